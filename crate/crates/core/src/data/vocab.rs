use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::CaptionRecord;
use crate::error::{Error, Result};
use crate::metrics::tokenize;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const HEADER: &str = "# objaoa vocabulary";

/// Token ↔ id map. Ids 0..4 are the specials; the rest are ordered by
/// descending corpus count, then ascending token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    min_count: u64,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, min_count: u64) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            counts,
            index,
            min_count,
        }
    }

    /// Keeps tokens seen at least `min_count` times across all captions.
    pub fn build(captions: &[CaptionRecord], min_count: u64) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for rec in captions {
            for c in &rec.captions {
                for t in tokenize(c) {
                    *counts.entry(t).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_count && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut cnt = vec![0; SPECIALS.len()];
        for (t, n) in kept {
            tokens.push(t);
            cnt.push(n);
        }
        Vocabulary::from_parts(tokens, cnt, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(id).copied()
    }

    /// Tokens for `ids`, skipping `<pad>`, `<bos>` and `<eos>`.
    pub fn tokens_of(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.tokens_of(ids).join(" ")
    }

    /// `token<TAB>count` per id after a one-line header.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} min_count={}\n", self.min_count);
        for (t, n) in self.tokens.iter().zip(&self.counts) {
            writeln!(s, "{t}\t{n}").expect("writing to a String");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty vocabulary file"))?;
        let min_count = header
            .strip_prefix(HEADER)
            .and_then(|r| r.trim().strip_prefix("min_count="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(1, "bad vocabulary header"))?;
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in lines {
            let (t, n) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(i + 1, "expected token<TAB>count"))?;
            let n: u64 = n.parse().map_err(|_| parse_err(i + 1, "bad count"))?;
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(parse_err(i + 1, "bad token"));
            }
            tokens.push(t.to_string());
            counts.push(n);
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(parse_err(2, "vocabulary must start with the four specials"));
        }
        let v = Vocabulary::from_parts(tokens, counts, min_count);
        if v.index.len() != v.tokens.len() {
            return Err(parse_err(1, "duplicate token"));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }
}

/// `<bos> tokens… <eos>`, truncated to at most `max_len` ids with `<eos>`
/// kept last. Unknown tokens map to `<unk>`.
pub fn encode_caption(raw: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let max_len = max_len.max(2);
    let mut ids = vec![BOS];
    ids.extend(tokenize(raw).iter().map(|t| vocab.id(t)).take(max_len - 2));
    ids.push(EOS);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(text: &[&str]) -> Vec<CaptionRecord> {
        text.iter()
            .enumerate()
            .map(|(i, c)| CaptionRecord {
                id: i.to_string(),
                captions: vec![c.to_string()],
            })
            .collect()
    }

    #[test]
    fn count_order_and_min_count() {
        let v = Vocabulary::build(&corpus(&["a b a"]), 1);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("b"));
        let v2 = Vocabulary::build(&corpus(&["a b a"]), 2);
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), UNK);
        assert_eq!(encode_caption("b a", &v2, 10), vec![BOS, UNK, 4, EOS]);
    }

    #[test]
    fn ties_sorted_by_token() {
        let v = Vocabulary::build(&corpus(&["z y x", "y"]), 1);
        let order: Vec<_> = (4..v.len()).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(order, ["y", "x", "z"]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&corpus(&["the cat sat"]), 1);
        assert_eq!(encode_caption("", &v, 20), vec![BOS, EOS]);
        let ids = encode_caption("A cat.", &v, 20);
        assert_eq!(ids, vec![BOS, UNK, v.id("cat"), EOS]);
        let s = "The cat, sat!";
        assert_eq!(v.tokens_of(&encode_caption(s, &v, 20)), tokenize(s));
        assert_eq!(v.decode(&encode_caption(s, &v, 20)), "the cat sat");
        let short = encode_caption("the cat sat", &v, 3);
        assert_eq!(short, vec![BOS, v.id("the"), EOS]);
    }

    #[test]
    fn text_round_trip_and_determinism() {
        let c = corpus(&["a red circle", "a blue square", "bầu trời xanh"]);
        let v = Vocabulary::build(&c, 1);
        let text = v.to_text();
        assert_eq!(Vocabulary::build(&c, 1).to_text(), text);
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("garbage").is_err());
        let no_specials = format!("{HEADER} min_count=1\na\t3\n");
        assert!(Vocabulary::from_text(&no_specials).is_err());
    }
}
