//! Deterministic "shapes" scenes with templated relational captions.
//!
//! Each image has 2–5 colored shapes on a 224×224 canvas. The caption names
//! the largest region, its position relative to the second largest, and the
//! second largest region: `a red circle left of a blue square`. Scenes where
//! the ranking or the dominant direction would be ambiguous are resampled.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{write_captions, write_features, CaptionRecord, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CANVAS: f64 = 224.0;

/// Shape one-hot (3) + color one-hot (3) + normalized cx, cy, w, h.
const FIXED_FEATURES: usize = 10;
const MIN_SIDE: u32 = 20;
const MAX_SIDE: u32 = 90;
const AREA_RATIO: f64 = 1.2;
const AXIS_MARGIN: f64 = 16.0;
const NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

/// A region before feature extraction; `corner` is `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthRegion {
    pub shape: Shape,
    pub color: Color,
    pub corner: [f64; 4],
}

impl SynthRegion {
    fn area(&self) -> f64 {
        self.corner[2] * self.corner[3]
    }

    fn center(&self) -> (f64, f64) {
        let [x, y, w, h] = self.corner;
        (x + w / 2.0, y + h / 2.0)
    }
}

/// The template caption for a scene, or `None` when the scene is ambiguous:
/// fewer than two regions, the top areas within a factor 1.2 of each other,
/// or the subject/object offset not clearly horizontal or vertical.
pub fn describe(regions: &[SynthRegion]) -> Option<String> {
    if regions.len() < 2 {
        return None;
    }
    let mut order: Vec<&SynthRegion> = regions.iter().collect();
    order.sort_by(|a, b| b.area().total_cmp(&a.area()));
    if order[0].area() < AREA_RATIO * order[1].area() {
        return None;
    }
    if order.len() > 2 && order[1].area() < AREA_RATIO * order[2].area() {
        return None;
    }
    let (subj, obj) = (order[0], order[1]);
    let (sx, sy) = subj.center();
    let (ox, oy) = obj.center();
    let (dx, dy) = (sx - ox, sy - oy);
    if (dx.abs() - dy.abs()).abs() < AXIS_MARGIN {
        return None;
    }
    let rel = if dx.abs() > dy.abs() {
        if dx < 0.0 {
            "left of"
        } else {
            "right of"
        }
    } else if dy < 0.0 {
        "above"
    } else {
        "below"
    };
    Some(format!(
        "a {} {} {rel} a {} {}",
        subj.color.name(),
        subj.shape.name(),
        obj.color.name(),
        obj.shape.name()
    ))
}

/// Feature row: one-hot shape, one-hot color, box geometry scaled by the
/// canvas, then `noise` (its length sets the padding).
pub fn region_features(r: &SynthRegion, noise: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; FIXED_FEATURES];
    f[Shape::ALL.iter().position(|&s| s == r.shape).expect("listed")] = 1.0;
    f[3 + Color::ALL.iter().position(|&c| c == r.color).expect("listed")] = 1.0;
    let [x, y, w, h] = r.corner;
    f[6] = (x + w / 2.0) / CANVAS;
    f[7] = (y + h / 2.0) / CANVAS;
    f[8] = w / CANVAS;
    f[9] = h / CANVAS;
    f.extend_from_slice(noise);
    f
}

fn sample_region(rng: &mut ChaCha8Rng) -> SynthRegion {
    let shape = Shape::ALL[rng.gen_range(0..3)];
    let color = Color::ALL[rng.gen_range(0..3)];
    let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
    let h = rng.gen_range(MIN_SIDE..=MAX_SIDE);
    let x = rng.gen_range(0..=CANVAS as u32 - w);
    let y = rng.gen_range(0..=CANVAS as u32 - h);
    SynthRegion {
        shape,
        color,
        corner: [x as f64, y as f64, w as f64, h as f64],
    }
}

/// Image `index` of the dataset generated from `seed`. Depends only on
/// `(seed, index, d_feat)`.
pub fn synth_image(seed: u64, index: u64, d_feat: usize) -> Result<(ImageRecord, CaptionRecord)> {
    if d_feat < FIXED_FEATURES {
        return Err(Error::Config(format!(
            "d_feat must be at least {FIXED_FEATURES}, got {d_feat}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (regions, caption) = loop {
        let n = rng.gen_range(2..=5);
        let regions: Vec<SynthRegion> = (0..n).map(|_| sample_region(&mut rng)).collect();
        if let Some(c) = describe(&regions) {
            break (regions, c);
        }
    };
    let mut data = Vec::with_capacity(regions.len() * d_feat);
    for r in &regions {
        let noise: Vec<f64> = (FIXED_FEATURES..d_feat)
            .map(|_| rng.gen_range(-NOISE..NOISE))
            .collect();
        data.extend(region_features(r, &noise));
    }
    let id = format!("img{index:05}");
    let features = Tensor::new(vec![regions.len(), d_feat], data).expect("row width is d_feat");
    let corners = regions.iter().map(|r| r.corner).collect();
    let image = ImageRecord::new(id.clone(), CANVAS, CANVAS, corners, features)?;
    Ok((
        image,
        CaptionRecord {
            id,
            captions: vec![caption],
        },
    ))
}

pub fn synth_generate(n_images: usize, seed: u64, d_feat: usize) -> Result<(Vec<ImageRecord>, Vec<CaptionRecord>)> {
    if n_images == 0 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    (0..n_images as u64)
        .map(|i| synth_image(seed, i, d_feat))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

/// Writes `features.jsonl` and `captions.jsonl` into `dir`, creating it.
pub fn write_synth(dir: impl AsRef<Path>, n_images: usize, seed: u64, d_feat: usize) -> Result<(PathBuf, PathBuf)> {
    let (images, captions) = synth_generate(n_images, seed, d_feat)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fp = dir.join("features.jsonl");
    let cp = dir.join("captions.jsonl");
    write_features(&fp, &images)?;
    write_captions(&cp, &captions)?;
    Ok((fp, cp))
}
