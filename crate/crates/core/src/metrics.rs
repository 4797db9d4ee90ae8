//! Caption metrics: corpus BLEU, plain CIDEr and ROUGE-L.
//!
//! All functions work on pre-tokenized sequences (see [`tokenize`]) and only
//! compare tokens for equality.

use std::collections::BTreeMap;

use thiserror::Error;

/// A tokenized sentence.
pub type TokenSeq = Vec<String>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("no candidates")]
    EmptyCandidates,
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("reference set {0} is empty")]
    EmptyReferences(usize),
    #[error("max_n must be in 1..=4, got {0}")]
    Order(usize),
}

/// Lowercases, splits on whitespace and strips punctuation from both ends of
/// every token. Tokens that are pure punctuation disappear.
pub fn tokenize(s: &str) -> TokenSeq {
    s.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn ngram_counts(seq: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

fn check_inputs(candidates: &[TokenSeq], references: &[Vec<TokenSeq>]) -> Result<(), MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(MetricError::EmptyReferences(i));
    }
    Ok(())
}

/// Reference length closest to `c`; ties go to the shorter reference.
pub fn closest_ref_len(c: usize, refs: &[TokenSeq]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus-level BLEU with clipped n-gram precisions and brevity penalty.
///
/// No smoothing: if any precision up to `max_n` is zero the score is zero.
pub fn bleu(candidates: &[TokenSeq], references: &[Vec<TokenSeq>], max_n: usize) -> Result<f64, MetricError> {
    check_inputs(candidates, references)?;
    if !(1..=4).contains(&max_n) {
        return Err(MetricError::Order(max_n));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=max_n {
            let counts = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &counts {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Mean of BLEU-1 through BLEU-4.
pub fn bleu_avg4(candidates: &[TokenSeq], references: &[Vec<TokenSeq>]) -> Result<f64, MetricError> {
    let mut s = 0.0;
    for n in 1..=4 {
        s += bleu(candidates, references, n)?;
    }
    Ok(s / 4.0)
}

/// Document frequencies of 1- to 4-grams over a reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    df: [BTreeMap<Vec<String>, usize>; 4],
    n_docs: usize,
}

impl CorpusStats {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    /// Number of images whose references contain `gram`.
    pub fn df(&self, gram: &[String]) -> usize {
        match gram.len() {
            1..=4 => self.df[gram.len() - 1].get(gram).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// `log(N / max(df, 1))`
    pub fn idf(&self, gram: &[String]) -> f64 {
        (self.n_docs as f64 / self.df(gram).max(1) as f64).ln()
    }
}

/// Counts each n-gram once per image, however often it appears in that
/// image's references.
pub fn build_corpus_stats(corpus: &[Vec<TokenSeq>]) -> CorpusStats {
    let mut df: [BTreeMap<Vec<String>, usize>; 4] = Default::default();
    for refs in corpus {
        for (n, table) in df.iter_mut().enumerate() {
            let mut seen: Vec<&[String]> = refs
                .iter()
                .flat_map(|r| ngram_counts(r, n + 1).into_keys())
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *table.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
    }
    CorpusStats {
        df,
        n_docs: corpus.len(),
    }
}

fn tfidf<'a>(seq: &'a [String], n: usize, stats: &CorpusStats) -> BTreeMap<&'a [String], f64> {
    ngram_counts(seq, n)
        .into_iter()
        .map(|(g, k)| (g, k as f64 * stats.idf(g)))
        .collect()
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum();
    let nb: f64 = b.values().map(|v| v * v).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(g, v)| b.get(g).map(|w| v * w))
        .sum();
    dot / (na * nb).sqrt()
}

/// Plain CIDEr: `10 · mean_n mean_refs cos(g_n(cand), g_n(ref))` with tf-idf
/// vectors over n = 1..4. Empty `refs` score 0.
pub fn cider(candidate: &[String], refs: &[TokenSeq], stats: &CorpusStats) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=4 {
        let c = tfidf(candidate, n, stats);
        let per_ref: f64 = refs.iter().map(|r| cosine(&c, &tfidf(r, n, stats))).sum();
        total += per_ref / refs.len() as f64;
    }
    10.0 * total / 4.0
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 against the best-matching reference.
pub fn rouge_l(candidate: &[String], refs: &[TokenSeq]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    refs.iter()
        .map(|r| {
            if r.is_empty() {
                return 0.0;
            }
            let l = lcs_len(candidate, r) as f64;
            let p = l / candidate.len() as f64;
            let rc = l / r.len() as f64;
            if p + rc == 0.0 {
                0.0
            } else {
                2.0 * p * rc / (p + rc)
            }
        })
        .fold(0.0, f64::max)
}

/// Corpus-level scores in report order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub bleu_avg4: f64,
    pub cider: f64,
    pub rouge_l: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 7] = ["bleu1", "bleu2", "bleu3", "bleu4", "bleu_avg4", "cider", "rouge_l"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.bleu_avg4,
            self.cider,
            self.rouge_l,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }
}

/// Scores candidates against their references. CIDEr idf comes from `stats`
/// when given, otherwise from `references` themselves.
pub fn evaluate(
    candidates: &[TokenSeq],
    references: &[Vec<TokenSeq>],
    stats: Option<&CorpusStats>,
) -> Result<MetricReport, MetricError> {
    check_inputs(candidates, references)?;
    let mut b = [0.0; 4];
    for (n, slot) in b.iter_mut().enumerate() {
        *slot = bleu(candidates, references, n + 1)?;
    }
    let own;
    let stats = match stats {
        Some(s) => s,
        None => {
            own = build_corpus_stats(references);
            &own
        }
    };
    let k = candidates.len() as f64;
    let cider_mean = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider(c, r, stats))
        .sum::<f64>()
        / k;
    let rouge_mean = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c, r))
        .sum::<f64>()
        / k;
    Ok(MetricReport {
        bleu: b,
        bleu_avg4: b.iter().sum::<f64>() / 4.0,
        cider: cider_mean,
        rouge_l: rouge_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> TokenSeq {
        tokenize(s)
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(t("A cat, on the MAT."), ["a", "cat", "on", "the", "mat"]);
        assert_eq!(t("  ... \"quoted\" "), ["quoted"]);
        assert_eq!(t("con mèo đen"), ["con", "mèo", "đen"]);
        assert!(t("").is_empty());
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![t("a red circle left of a blue square")];
        let r = vec![vec![c[0].clone()]];
        for n in 1..=4 {
            assert_eq!(bleu(&c, &r, n).unwrap(), 1.0);
        }
        assert_eq!(bleu_avg4(&c, &r).unwrap(), 1.0);
        let d = vec![t("x y z w")];
        assert_eq!(bleu(&d, &r, 1).unwrap(), 0.0);
        assert_eq!(bleu_avg4(&d, &r).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clipped_unigram() {
        let c = vec![t("the the the the the the the")];
        let r = vec![vec![t("the cat is on the mat")]];
        assert!((bleu(&c, &r, 1).unwrap() - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn bleu_errors() {
        assert_eq!(bleu(&[], &[], 1), Err(MetricError::EmptyCandidates));
        let c = vec![t("a")];
        assert!(matches!(bleu(&c, &[], 1), Err(MetricError::LengthMismatch { .. })));
        assert_eq!(bleu(&c, &[vec![]], 1), Err(MetricError::EmptyReferences(0)));
        assert_eq!(bleu(&c, &[vec![t("a")]], 5), Err(MetricError::Order(5)));
    }

    #[test]
    fn closest_length_ties_prefer_shorter() {
        let refs = vec![t("a b c d e"), t("a b c")];
        assert_eq!(closest_ref_len(4, &refs), 3);
        // with the shorter reference the brevity penalty applies
        let c = vec![t("a b c d")];
        let s = bleu(&c, &[refs.clone()], 1).unwrap();
        assert_eq!(s, 1.0);
        let c = vec![t("a b")];
        let s = bleu(&c, &[refs], 1).unwrap();
        assert!((s - (1.0f64 - 3.0 / 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn corpus_stats_counts_per_image() {
        let corpus = vec![
            vec![t("a a a b"), t("a c")],
            vec![t("a d")],
            vec![t("e f")],
        ];
        let s = build_corpus_stats(&corpus);
        assert_eq!(s.n_docs(), 3);
        assert_eq!(s.df(&t("a")), 2);
        assert_eq!(s.df(&t("a a")), 1);
        assert_eq!(s.df(&t("e f")), 1);
        assert_eq!(s.df(&t("zz")), 0);
        let one = build_corpus_stats(&[vec![t("x y z")]]);
        for g in ["x", "y", "z", "x y", "y z", "x y z"] {
            assert_eq!(one.df(&t(g)), 1);
        }
    }

    #[test]
    fn cider_examples() {
        let a = t("a red circle left of a blue square");
        let b = t("one green triangle below two yellow stars");
        let corpus = vec![vec![a.clone()], vec![b.clone()]];
        let s = build_corpus_stats(&corpus);
        assert_eq!(cider(&a, &[a.clone()], &s), 10.0);
        assert_eq!(cider(&b, &[a.clone()], &s), 0.0);
        let single = build_corpus_stats(&[vec![a.clone()]]);
        assert_eq!(cider(&a, &[a.clone()], &single), 0.0);
        assert_eq!(cider(&a, &[], &s), 0.0);
    }

    #[test]
    fn cider_is_symmetric_in_reference_order() {
        let refs = vec![t("a b c d"), t("a c d e"), t("b b c")];
        let corpus = vec![refs.clone(), vec![t("q r s")], vec![t("a q")]];
        let s = build_corpus_stats(&corpus);
        let c = t("a b c e");
        let mut rev = refs.clone();
        rev.reverse();
        assert!((cider(&c, &refs, &s) - cider(&c, &rev, &s)).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let a = t("a b c d");
        assert_eq!(rouge_l(&a, &[a.clone()]), 1.0);
        let f = rouge_l(&t("a c d"), &[a.clone()]);
        assert!((f - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge_l(&t("x y"), &[a.clone()]), 0.0);
        assert_eq!(rouge_l(&[], &[a.clone()]), 0.0);
        // best reference wins
        assert_eq!(rouge_l(&a, &[t("q"), a.clone()]), 1.0);
    }

    #[test]
    fn lcs_basic() {
        assert_eq!(lcs_len(&t("a b c b d a b"), &t("b d c a b a")), 4);
        assert_eq!(lcs_len(&[], &t("a")), 0);
    }

    #[test]
    fn evaluate_report() {
        let c = vec![t("a b c d"), t("e f g h")];
        let r = vec![vec![t("a b c d")], vec![t("e f g h")]];
        let rep = evaluate(&c, &r, None).unwrap();
        assert_eq!(rep.values(), [1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 1.0]);
        assert_eq!(rep.get("cider"), Some(10.0));
        assert_eq!(rep.get("meteor"), None);
    }

    fn seq_strategy() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..5, 0..8)
    }

    fn words(ids: &[u8], names: &[&str]) -> TokenSeq {
        ids.iter().map(|&i| names[i as usize].to_string()).collect()
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_relabeling(
            cands in prop::collection::vec(seq_strategy(), 1..4),
            refs in prop::collection::vec(prop::collection::vec(seq_strategy(), 1..3), 4),
            perm in Just(["p", "q", "r", "s", "t"]).prop_shuffle(),
        ) {
            let base = ["a", "b", "c", "d", "e"];
            let n = cands.len();
            let c1: Vec<_> = cands.iter().map(|s| words(s, &base)).collect();
            let c2: Vec<_> = cands.iter().map(|s| words(s, &perm)).collect();
            let r1: Vec<Vec<_>> = refs[..n].iter().map(|rs| rs.iter().map(|s| words(s, &base)).collect()).collect();
            let r2: Vec<Vec<_>> = refs[..n].iter().map(|rs| rs.iter().map(|s| words(s, &perm)).collect()).collect();
            for k in 1..=4 {
                prop_assert_eq!(bleu(&c1, &r1, k).unwrap(), bleu(&c2, &r2, k).unwrap());
            }
            let s1 = build_corpus_stats(&r1);
            let s2 = build_corpus_stats(&r2);
            for i in 0..n {
                let a = cider(&c1[i], &r1[i], &s1);
                let b = cider(&c2[i], &r2[i], &s2);
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert_eq!(rouge_l(&c1[i], &r1[i]), rouge_l(&c2[i], &r2[i]));
            }
        }

        #[test]
        fn metric_ranges(
            cands in prop::collection::vec(seq_strategy(), 1..4),
            refs in prop::collection::vec(prop::collection::vec(seq_strategy(), 1..3), 4),
        ) {
            let base = ["a", "b", "c", "d", "e"];
            let n = cands.len();
            let c: Vec<_> = cands.iter().map(|s| words(s, &base)).collect();
            let r: Vec<Vec<_>> = refs[..n].iter().map(|rs| rs.iter().map(|s| words(s, &base)).collect()).collect();
            let s = build_corpus_stats(&r);
            for k in 1..=4 {
                let b = bleu(&c, &r, k).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            }
            for i in 0..n {
                let ci = cider(&c[i], &r[i], &s);
                prop_assert!((0.0..=10.0 + 1e-9).contains(&ci));
                let rl = rouge_l(&c[i], &r[i]);
                prop_assert!((0.0..=1.0).contains(&rl));
            }
        }
    }
}
