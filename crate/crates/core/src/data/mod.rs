//! Region-feature and caption records, their line-delimited JSON files,
//! vocabulary, dataset splitting and the synthetic shapes generator.

mod synth;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tensor::Tensor;

pub use synth::{describe, region_features, synth_generate, synth_image, write_synth, Color, Shape, SynthRegion, CANVAS};
pub use vocab::{encode_caption, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};

/// One image's regions: boxes plus a `[n_regions, d_feat]` feature matrix.
///
/// `corners` keeps the on-disk `[x, y, w, h]` values so files round-trip
/// bit-exactly; `boxes` holds the same regions in center format.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub corners: Vec<[f64; 4]>,
    pub boxes: Vec<BoundingBox>,
    pub features: Tensor,
}

impl ImageRecord {
    /// Builds and validates a record from corner-format boxes.
    pub fn new(id: impl Into<String>, width: f64, height: f64, corners: Vec<[f64; 4]>, features: Tensor) -> Result<Self> {
        let id = id.into();
        let bad = |m: String| Error::validation(id.clone(), m);
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(bad(format!("image size {width}x{height}")));
        }
        if corners.is_empty() {
            return Err(bad("no regions".into()));
        }
        if features.rank() != 2 || features.shape()[0] != corners.len() {
            return Err(bad(format!(
                "{} boxes but feature matrix {:?}",
                corners.len(),
                features.shape()
            )));
        }
        if features.shape()[1] == 0 || !features.all_finite() {
            return Err(bad("features must be non-empty and finite".into()));
        }
        let mut boxes = Vec::with_capacity(corners.len());
        for (i, &[x, y, w, h]) in corners.iter().enumerate() {
            let b = BoundingBox::from_corner(x, y, w, h)
                .ok_or_else(|| bad(format!("box {i} is degenerate: {:?}", [x, y, w, h])))?;
            if x < 0.0 || y < 0.0 || x + w > width || y + h > height {
                return Err(bad(format!("box {i} leaves the {width}x{height} image")));
            }
            boxes.push(b);
        }
        Ok(ImageRecord {
            id,
            width,
            height,
            corners,
            boxes,
            features,
        })
    }

    /// Builds a record from center-format boxes, deriving corners.
    pub fn from_boxes(id: impl Into<String>, width: f64, height: f64, boxes: &[BoundingBox], features: Tensor) -> Result<Self> {
        let corners = boxes.iter().map(BoundingBox::corner).collect();
        ImageRecord::new(id, width, height, corners, features)
    }

    pub fn n_regions(&self) -> usize {
        self.boxes.len()
    }

    pub fn d_feat(&self) -> usize {
        self.features.last_dim()
    }
}

/// Reference captions for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    id: String,
    width: f64,
    height: f64,
    boxes: Vec<[f64; 4]>,
    features: Vec<Vec<f64>>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Yields `(1-based line number, line)` for every non-blank line.
fn records<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })),
        })
}

fn parse_line<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

/// Parses a features stream; see [`load_features`].
pub fn read_features<R: Read>(reader: R) -> Result<Vec<ImageRecord>> {
    let mut out: Vec<ImageRecord> = Vec::new();
    let mut seen = HashSet::new();
    for item in records(BufReader::new(reader)) {
        let (line_no, line) = item?;
        let raw: RawImage = parse_line(line_no, &line)?;
        let rows = raw.features.len();
        let cols = raw.features.first().map_or(0, Vec::len);
        if raw.features.iter().any(|r| r.len() != cols) {
            return Err(Error::validation(raw.id, "ragged feature rows"));
        }
        let features = Tensor::new(vec![rows, cols], raw.features.concat()).expect("row lengths checked");
        let rec = ImageRecord::new(raw.id, raw.width, raw.height, raw.boxes, features)?;
        if let Some(first) = out.first() {
            if first.d_feat() != rec.d_feat() {
                let msg = format!("feature width {} differs from {}", rec.d_feat(), first.d_feat());
                return Err(Error::validation(rec.id, msg));
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::validation(rec.id, "duplicate id"));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads a line-delimited JSON features file.
///
/// Each line holds `id`, `width`, `height`, `boxes` (corner `[x, y, w, h]`
/// in pixels) and `features` (one row per box). Blank lines are skipped.
pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    read_features(open(path.as_ref())?)
}

/// Parses a captions stream; see [`load_captions`].
pub fn read_captions<R: Read>(reader: R) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for item in records(BufReader::new(reader)) {
        let (line_no, line) = item?;
        let rec: CaptionRecord = parse_line(line_no, &line)?;
        if rec.captions.is_empty() {
            return Err(Error::validation(rec.id, "no captions"));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::validation(rec.id, "duplicate id"));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads a line-delimited JSON captions file with fields `id`, `captions`.
pub fn load_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    read_captions(open(path.as_ref())?)
}

fn image_line(r: &ImageRecord) -> String {
    let raw = RawImage {
        id: r.id.clone(),
        width: r.width,
        height: r.height,
        boxes: r.corners.clone(),
        features: (0..r.n_regions()).map(|i| r.features.row(i).to_vec()).collect(),
    };
    serde_json::to_string(&raw).expect("plain data serializes")
}

pub fn write_features_to<W: Write>(mut w: W, records: &[ImageRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", image_line(r))?;
    }
    w.flush()
}

pub fn write_captions_to<W: Write>(mut w: W, records: &[CaptionRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("plain data serializes"))?;
    }
    w.flush()
}

pub fn write_features(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_features_to(BufWriter::new(f), records).map_err(|e| Error::io(path, e))
}

pub fn write_captions(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_captions_to(BufWriter::new(f), records).map_err(|e| Error::io(path, e))
}

/// An image with its reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: ImageRecord,
    pub captions: Vec<String>,
}

/// Pairs images with captions by id, in image order. Every id must appear on
/// both sides exactly once.
pub fn join(images: Vec<ImageRecord>, captions: Vec<CaptionRecord>) -> Result<Vec<Example>> {
    let mut by_id: HashMap<String, Vec<String>> = captions.into_iter().map(|c| (c.id, c.captions)).collect();
    let mut out = Vec::with_capacity(images.len());
    for image in images {
        let caps = by_id
            .remove(&image.id)
            .ok_or_else(|| Error::validation(image.id.clone(), "no captions for this image"))?;
        out.push(Example { image, captions: caps });
    }
    if let Some(id) = by_id.into_keys().min() {
        return Err(Error::validation(id, "captions without features"));
    }
    Ok(out)
}

/// Seeded shuffle, then the first `dev_count` items form the dev split.
/// Both splits keep the input order.
pub fn split_dataset<T: Clone>(records: &[T], seed: u64, dev_count: usize) -> Result<(Vec<T>, Vec<T>)> {
    if dev_count > 0 && dev_count >= records.len() {
        return Err(Error::Config(format!(
            "dev_count {dev_count} leaves no training data out of {}",
            records.len()
        )));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev_idx = idx[..dev_count].to_vec();
    let mut train_idx = idx[dev_count..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&train_idx), pick(&dev_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = r#"{"id":"img1","width":100,"height":80,"boxes":[[0,0,10,10],[50,40,50,40]],"features":[[1.0,2.0],[3.5,-0.25]]}"#;

    #[test]
    fn empty_file_is_empty_list() {
        assert!(read_features("".as_bytes()).unwrap().is_empty());
        assert!(read_captions("\n\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn loads_and_converts_boxes() {
        let recs = read_features(GOOD.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        let b = recs[0].boxes[1];
        assert_eq!((b.cx, b.cy, b.w, b.h), (75.0, 60.0, 50.0, 40.0));
        assert_eq!(recs[0].features.shape(), &[2, 2]);
    }

    #[test]
    fn box_feature_count_mismatch_is_validation_error() {
        let line = r#"{"id":"x","width":100,"height":100,"boxes":[[0,0,10,10],[1,1,5,5]],"features":[[1],[2],[3]]}"#;
        match read_features(line.as_bytes()) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "x"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = format!("{GOOD}\n\n{{not json\n");
        match read_features(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_bounds_and_width_changes() {
        let oob = GOOD.replace("[50,40,50,40]", "[60,40,50,40]");
        assert!(matches!(read_features(oob.as_bytes()), Err(Error::Validation { .. })));
        let other = r#"{"id":"img2","width":100,"height":80,"boxes":[[0,0,10,10]],"features":[[1.0,2.0,3.0]]}"#;
        let text = format!("{GOOD}\n{other}\n");
        assert!(matches!(read_features(text.as_bytes()), Err(Error::Validation { id, .. }) if id == "img2"));
        let dup = format!("{GOOD}\n{GOOD}\n");
        assert!(matches!(read_features(dup.as_bytes()), Err(Error::Validation { .. })));
    }

    #[test]
    fn captions_need_at_least_one() {
        let text = r#"{"id":"a","captions":[]}"#;
        assert!(matches!(read_captions(text.as_bytes()), Err(Error::Validation { .. })));
        let ok = r#"{"id":"a","captions":["x y"]}"#;
        assert_eq!(read_captions(ok.as_bytes()).unwrap()[0].captions, ["x y"]);
    }

    #[test]
    fn join_pairs_by_id() {
        let imgs = read_features(GOOD.as_bytes()).unwrap();
        let caps = vec![CaptionRecord {
            id: "img1".into(),
            captions: vec!["a b".into()],
        }];
        let ex = join(imgs.clone(), caps).unwrap();
        assert_eq!(ex[0].captions, ["a b"]);
        let wrong = vec![CaptionRecord {
            id: "other".into(),
            captions: vec!["a".into()],
        }];
        assert!(matches!(join(imgs, wrong), Err(Error::Validation { .. })));
    }

    #[test]
    fn split_examples() {
        let items: Vec<usize> = (0..8025).collect();
        let (tr, dev) = split_dataset(&items, 3, 1000).unwrap();
        assert_eq!((tr.len(), dev.len()), (7025, 1000));
        let mut all: Vec<usize> = tr.iter().chain(&dev).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 3, 1000).unwrap().1, dev);
        assert_ne!(split_dataset(&items, 4, 1000).unwrap().1, dev);
        let (tr0, dev0) = split_dataset(&items[..5], 1, 0).unwrap();
        assert_eq!((tr0.len(), dev0.len()), (5, 0));
        assert!(split_dataset(&items[..5], 1, 5).is_err());
    }

    fn arb_record() -> impl Strategy<Value = (Vec<[f64; 4]>, Vec<Vec<f64>>)> {
        (1usize..4, 1usize..4).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(
                    (0.0f64..50.0, 0.0f64..50.0, 0.5f64..50.0, 0.5f64..50.0).prop_map(|(x, y, w, h)| [x, y, w, h]),
                    n,
                ),
                prop::collection::vec(prop::collection::vec(-1e6f64..1e6, d), n),
            )
        })
    }

    #[derive(Debug, Clone)]
    enum Corruption {
        None,
        NegativeWidth(usize),
        OutOfBounds(usize),
        DropFeatureRow,
        RaggedRow,
        NoBoxes,
        NanFeature,
        ZeroImageWidth,
        BadJson,
    }

    fn arb_corruption() -> impl Strategy<Value = Corruption> {
        prop_oneof![
            Just(Corruption::None),
            (0usize..4).prop_map(Corruption::NegativeWidth),
            (0usize..4).prop_map(Corruption::OutOfBounds),
            Just(Corruption::DropFeatureRow),
            Just(Corruption::RaggedRow),
            Just(Corruption::NoBoxes),
            Just(Corruption::NanFeature),
            Just(Corruption::ZeroImageWidth),
            Just(Corruption::BadJson),
        ]
    }

    proptest! {
        #[test]
        fn loader_rejects_exactly_corrupted_records(
            (boxes, feats) in arb_record(),
            corruption in arb_corruption(),
        ) {
            let mut raw = serde_json::json!({
                "id": "r", "width": 100.0, "height": 100.0,
                "boxes": boxes, "features": feats,
            });
            let n = boxes.len();
            let mut expect_parse = false;
            let valid = match &corruption {
                Corruption::None => true,
                Corruption::NegativeWidth(i) => {
                    raw["boxes"][i % n][2] = serde_json::json!(-1.0);
                    false
                }
                Corruption::OutOfBounds(i) => {
                    raw["boxes"][i % n][0] = serde_json::json!(99.9);
                    false
                }
                Corruption::DropFeatureRow => {
                    raw["features"].as_array_mut().unwrap().pop();
                    false
                }
                Corruption::RaggedRow => {
                    raw["features"][0].as_array_mut().unwrap().push(serde_json::json!(1.0));
                    // a single row cannot be ragged; it just widens the features
                    n == 1
                }
                Corruption::NoBoxes => {
                    raw["boxes"] = serde_json::json!([]);
                    raw["features"] = serde_json::json!([]);
                    false
                }
                Corruption::NanFeature => {
                    // JSON cannot carry NaN; a string in a number slot must fail to parse
                    raw["features"][0][0] = serde_json::json!("nan");
                    expect_parse = true;
                    false
                }
                Corruption::ZeroImageWidth => {
                    raw["width"] = serde_json::json!(0.0);
                    false
                }
                Corruption::BadJson => {
                    expect_parse = true;
                    false
                }
            };
            let mut line = raw.to_string();
            if matches!(corruption, Corruption::BadJson) {
                line.truncate(line.len() / 2);
            }
            let res = read_features(line.as_bytes());
            if valid {
                prop_assert!(res.is_ok(), "{:?}", res);
            } else if expect_parse {
                let is_parse = matches!(res, Err(Error::Parse { .. }));
                prop_assert!(is_parse, "{:?}", res);
            } else {
                let is_validation = matches!(res, Err(Error::Validation { .. }));
                prop_assert!(is_validation, "{:?}", res);
            }
        }

        #[test]
        fn write_read_round_trip_is_bit_exact((boxes, feats) in arb_record()) {
            let d = feats[0].len();
            let features = Tensor::new(vec![feats.len(), d], feats.concat()).unwrap();
            let rec = ImageRecord::new("q", 100.0, 100.0, boxes, features).unwrap();
            let mut buf = Vec::new();
            write_features_to(&mut buf, std::slice::from_ref(&rec)).unwrap();
            let back = read_features(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 1);
            let b = &back[0];
            prop_assert_eq!(&b.corners, &rec.corners);
            prop_assert_eq!(&b.boxes, &rec.boxes);
            let same = b.features.data().iter().zip(rec.features.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
            let mut again = Vec::new();
            write_features_to(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
