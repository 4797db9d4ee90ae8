//! The captioner: a geometric-attention encoder over image regions and a
//! standard transformer decoder over caption tokens.
//!
//! Parameters live in a flat, named [`Params`] list whose order is fixed by
//! [`layout`]. Forward passes bind that list onto a [`Tape`] and look the
//! handles up by name.

mod checkpoint;
mod config;
mod decode;

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{ImageRecord, BOS, PAD};
use crate::error::{Error, Result};
use crate::geometry::{
    multi_head_object_aoa_on, pair_embeddings, scaled_dot_scores_on, AoaVars, AttentionVars, OutputVars,
};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage, TrainerState};
pub use config::ModelConfig;
pub use decode::{
    beam_decode, beam_search, generation_mask, greedy_decode, masked_log_softmax, sample_caption, sequence_log_prob,
    strip_specials, BeamHypothesis, Session,
};

const LN_EPS: f64 = 1e-5;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±√(6 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    spec(out, format!("{prefix}.w"), &[fan_in, fan_out], Init::Xavier);
    spec(out, format!("{prefix}.b"), &[fan_out], Init::Zeros);
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    spec(out, format!("{prefix}.gain"), &[d], Init::Ones);
    spec(out, format!("{prefix}.bias"), &[d], Init::Zeros);
}

fn qkv(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    spec(out, format!("{prefix}.wq"), &[d, d], Init::Xavier);
    spec(out, format!("{prefix}.bq"), &[d], Init::Zeros);
    spec(out, format!("{prefix}.wk"), &[d, d], Init::Xavier);
    spec(out, format!("{prefix}.wv"), &[d, d], Init::Xavier);
    spec(out, format!("{prefix}.bv"), &[d], Init::Zeros);
}

/// Names, shapes and initializers of every parameter, in storage order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    linear(&mut out, "input", cfg.d_feat, d);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        qkv(&mut out, &format!("{p}.attn"), d);
        spec(&mut out, format!("{p}.attn.w_geo"), &[cfg.d_g, cfg.n_heads], Init::Xavier);
        if cfg.aoa_enabled {
            for part in ["gate", "info"] {
                spec(&mut out, format!("{p}.attn.aoa.w_q_{part}"), &[d, d], Init::Xavier);
                spec(&mut out, format!("{p}.attn.aoa.w_v_{part}"), &[d, d], Init::Xavier);
                spec(&mut out, format!("{p}.attn.aoa.b_{part}"), &[d], Init::Zeros);
            }
        } else {
            linear(&mut out, &format!("{p}.attn.out"), d, d);
        }
        norm(&mut out, &format!("{p}.ln1"), d);
        linear(&mut out, &format!("{p}.ffn1"), d, cfg.d_ffn);
        linear(&mut out, &format!("{p}.ffn2"), cfg.d_ffn, d);
        norm(&mut out, &format!("{p}.ln2"), d);
    }
    spec(&mut out, "embed".into(), &[cfg.vocab_size, d], Init::Xavier);
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec.{l}");
        for (att, ln) in [("self", "ln1"), ("cross", "ln2")] {
            qkv(&mut out, &format!("{p}.{att}"), d);
            linear(&mut out, &format!("{p}.{att}.out"), d, d);
            norm(&mut out, &format!("{p}.{ln}"), d);
        }
        linear(&mut out, &format!("{p}.ffn1"), d, cfg.d_ffn);
        linear(&mut out, &format!("{p}.ffn2"), cfg.d_ffn, d);
        norm(&mut out, &format!("{p}.ln3"), d);
    }
    linear(&mut out, "logits", d, cfg.vocab_size);
    out
}

/// Named parameter tensors in [`layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len(), "one name per tensor");
        Params { names, tensors }
    }

    /// Draws every parameter from its initializer with a generator seeded by `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for s in layout(cfg) {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::filled(&s.shape, 1.0),
                Init::Xavier => {
                    let a = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    let n = s.shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
                    Tensor::new(s.shape.clone(), data).expect("layout shapes")
                }
            };
            names.push(s.name);
            tensors.push(t);
        }
        Params { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against the layout for `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        if expected.len() != self.len() {
            return Err(Error::Compatibility(format!(
                "config expects {} parameters, found {}",
                expected.len(),
                self.len()
            )));
        }
        for (s, (name, t)) in expected.iter().zip(self.iter()) {
            if s.name != name || s.shape != t.shape() {
                return Err(Error::Compatibility(format!(
                    "expected {} {:?}, found {name} {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Inverted dropout. A rate of zero records nothing.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout {
            rate: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        Ok(tape.mul(x, m)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Plain multi-head attention with an output projection.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub out: LinearVars,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub attn: AttentionVars,
    pub ln1: NormVars,
    pub ffn1: LinearVars,
    pub ffn2: LinearVars,
    pub ln2: NormVars,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerVars {
    pub self_attn: MhaVars,
    pub ln1: NormVars,
    pub cross: MhaVars,
    pub ln2: NormVars,
    pub ffn1: LinearVars,
    pub ffn2: LinearVars,
    pub ln3: NormVars,
}

/// Tape handles for every parameter of the model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    /// One handle per parameter, in [`Params`] order.
    pub all: Vec<Var>,
    pub input: LinearVars,
    pub enc: Vec<EncoderLayerVars>,
    pub embed: Var,
    pub dec: Vec<DecoderLayerVars>,
    pub logits: LinearVars,
}

struct Lookup<'a> {
    map: HashMap<&'a str, Var>,
}

impl Lookup<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))
    }

    fn linear(&self, p: &str) -> Result<LinearVars> {
        Ok(LinearVars {
            w: self.var(&format!("{p}.w"))?,
            b: self.var(&format!("{p}.b"))?,
        })
    }

    fn norm(&self, p: &str) -> Result<NormVars> {
        Ok(NormVars {
            gain: self.var(&format!("{p}.gain"))?,
            bias: self.var(&format!("{p}.bias"))?,
        })
    }

    fn mha(&self, p: &str) -> Result<MhaVars> {
        Ok(MhaVars {
            wq: self.var(&format!("{p}.wq"))?,
            bq: self.var(&format!("{p}.bq"))?,
            wk: self.var(&format!("{p}.wk"))?,
            wv: self.var(&format!("{p}.wv"))?,
            bv: self.var(&format!("{p}.bv"))?,
            out: self.linear(&format!("{p}.out"))?,
        })
    }

    fn geo_attention(&self, p: &str, aoa: bool) -> Result<AttentionVars> {
        let output = if aoa {
            let v = |n: &str| self.var(&format!("{p}.aoa.{n}"));
            OutputVars::Aoa(AoaVars {
                w_q_gate: v("w_q_gate")?,
                w_v_gate: v("w_v_gate")?,
                b_gate: v("b_gate")?,
                w_q_info: v("w_q_info")?,
                w_v_info: v("w_v_info")?,
                b_info: v("b_info")?,
            })
        } else {
            let o = self.linear(&format!("{p}.out"))?;
            OutputVars::Projection { w: o.w, b: o.b }
        };
        Ok(AttentionVars {
            wq: self.var(&format!("{p}.wq"))?,
            bq: self.var(&format!("{p}.bq"))?,
            wk: self.var(&format!("{p}.wk"))?,
            wv: self.var(&format!("{p}.wv"))?,
            bv: self.var(&format!("{p}.bv"))?,
            w_geo: self.var(&format!("{p}.w_geo"))?,
            output,
        })
    }
}

/// Records `params` on `tape` (as trainable leaves or constants) and
/// resolves the structured handles.
pub fn bind(tape: &mut Tape, cfg: &ModelConfig, params: &Params, trainable: bool) -> Result<ModelVars> {
    let all: Vec<Var> = params
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    bind_vars(cfg, params, all)
}

/// Resolves structured handles from per-parameter vars already on a tape.
pub fn bind_vars(cfg: &ModelConfig, params: &Params, all: Vec<Var>) -> Result<ModelVars> {
    let lk = Lookup {
        map: params.names().iter().map(String::as_str).zip(all.iter().copied()).collect(),
    };
    let enc = (0..cfg.n_enc_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            Ok(EncoderLayerVars {
                attn: lk.geo_attention(&format!("{p}.attn"), cfg.aoa_enabled)?,
                ln1: lk.norm(&format!("{p}.ln1"))?,
                ffn1: lk.linear(&format!("{p}.ffn1"))?,
                ffn2: lk.linear(&format!("{p}.ffn2"))?,
                ln2: lk.norm(&format!("{p}.ln2"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dec = (0..cfg.n_dec_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            Ok(DecoderLayerVars {
                self_attn: lk.mha(&format!("{p}.self"))?,
                ln1: lk.norm(&format!("{p}.ln1"))?,
                cross: lk.mha(&format!("{p}.cross"))?,
                ln2: lk.norm(&format!("{p}.ln2"))?,
                ffn1: lk.linear(&format!("{p}.ffn1"))?,
                ffn2: lk.linear(&format!("{p}.ffn2"))?,
                ln3: lk.norm(&format!("{p}.ln3"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelVars {
        input: lk.linear("input")?,
        enc,
        embed: lk.var("embed")?,
        dec,
        logits: lk.linear("logits")?,
        all,
    })
}

fn affine(tape: &mut Tape, x: Var, p: LinearVars) -> Result<Var> {
    let y = tape.matmul(x, p.w)?;
    Ok(tape.add_bias(y, p.b)?)
}

fn layer_norm(tape: &mut Tape, x: Var, p: NormVars) -> Result<Var> {
    Ok(tape.layer_norm(x, p.gain, p.bias, LN_EPS)?)
}

fn ffn(tape: &mut Tape, x: Var, l1: LinearVars, l2: LinearVars) -> Result<Var> {
    let h = affine(tape, x, l1)?;
    let h = tape.relu(h);
    affine(tape, h, l2)
}

/// `layer_norm(x + dropout(sub))`
fn residual(tape: &mut Tape, x: Var, sub: Var, ln: NormVars, drop: &mut Dropout) -> Result<Var> {
    let sub = drop.apply(tape, sub)?;
    let s = tape.add(x, sub)?;
    layer_norm(tape, s, ln)
}

/// Multi-head attention of `xq` rows over `xkv` rows. `mask` is
/// `[rows(xq) × rows(xkv)]` or absent.
pub fn mha_on(tape: &mut Tape, xq: Var, xkv: Var, p: &MhaVars, n_heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let d = tape.shape(xq)[1];
    let d_head = d / n_heads;
    let q = affine(
        tape,
        xq,
        LinearVars {
            w: p.wq,
            b: p.bq,
        },
    )?;
    let k = tape.matmul(xkv, p.wk)?;
    let v = affine(
        tape,
        xkv,
        LinearVars {
            w: p.wv,
            b: p.bv,
        },
    )?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = scaled_dot_scores_on(tape, qh, kh)?;
        let w = tape.softmax_rows(scores, mask)?;
        heads.push(tape.matmul(w, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    affine(tape, cat, p.out)
}

/// Sinusoidal positions: `sin(t / 10000^(2i/d))` at even columns `2i`,
/// `cos` at odd ones.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let arg = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = arg.sin();
            data[t * d + 2 * i + 1] = arg.cos();
        }
        if d % 2 == 1 {
            data[t * d + d - 1] = (t as f64 / 10000f64.powf((d - 1) as f64 / d as f64)).sin();
        }
    }
    Tensor::new(vec![len, d], data).expect("len·d values")
}

/// `mask[i·len + j]` is true iff `j ≤ i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|k| k % len <= k / len).collect()
}

fn check_record(cfg: &ModelConfig, record: &ImageRecord) -> Result<()> {
    let f = &record.features;
    if f.rank() != 2 || f.shape()[0] != record.boxes.len() || record.boxes.is_empty() {
        return Err(Error::validation(
            record.id.clone(),
            format!("{} boxes but features {:?}", record.boxes.len(), f.shape()),
        ));
    }
    if f.shape()[1] != cfg.d_feat {
        return Err(Error::validation(
            record.id.clone(),
            format!("feature width {} but the model expects {}", f.shape()[1], cfg.d_feat),
        ));
    }
    Ok(())
}

/// Encoder forward pass; returns the `[regions, d_model]` memory.
pub fn encode_on(tape: &mut Tape, cfg: &ModelConfig, mv: &ModelVars, record: &ImageRecord, drop: &mut Dropout) -> Result<Var> {
    check_record(cfg, record)?;
    let feats = tape.constant(record.features.clone());
    let x = affine(tape, feats, mv.input)?;
    let mut x = drop.apply(tape, x)?;
    if mv.enc.is_empty() {
        return Ok(x);
    }
    let pair = tape.constant(pair_embeddings(&record.boxes, &cfg.geometry()));
    for layer in &mv.enc {
        let a = multi_head_object_aoa_on(tape, x, pair, &layer.attn)?;
        x = residual(tape, x, a, layer.ln1, drop)?;
        let f = ffn(tape, x, layer.ffn1, layer.ffn2)?;
        x = residual(tape, x, f, layer.ln2, drop)?;
    }
    Ok(x)
}

/// Decoder forward pass over a `<bos>`-initial prefix; returns `[len, vocab]` logits.
pub fn decode_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    mv: &ModelVars,
    memory: Var,
    prefix: &[usize],
    drop: &mut Dropout,
) -> Result<Var> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Contract("decoder prefix must start with <bos>".into()));
    }
    if prefix.len() > cfg.max_caption_len {
        return Err(Error::Contract(format!(
            "prefix length {} exceeds max_caption_len {}",
            prefix.len(),
            cfg.max_caption_len
        )));
    }
    let len = prefix.len();
    let e = tape.embedding(mv.embed, prefix)?;
    let pos = tape.constant(positional_encoding(len, cfg.d_model));
    let x = tape.add(e, pos)?;
    let mut x = drop.apply(tape, x)?;
    let mask = causal_mask(len);
    for layer in &mv.dec {
        let s = mha_on(tape, x, x, &layer.self_attn, cfg.n_heads, Some(&mask))?;
        x = residual(tape, x, s, layer.ln1, drop)?;
        let c = mha_on(tape, x, memory, &layer.cross, cfg.n_heads, None)?;
        x = residual(tape, x, c, layer.ln2, drop)?;
        let f = ffn(tape, x, layer.ffn1, layer.ffn2)?;
        x = residual(tape, x, f, layer.ln3, drop)?;
    }
    affine(tape, x, mv.logits)
}

/// Teacher-forced cross-entropy of `ids` (`<bos> … <eos>`) given `record`.
pub fn xe_loss_on(
    tape: &mut Tape,
    cfg: &ModelConfig,
    mv: &ModelVars,
    record: &ImageRecord,
    ids: &[usize],
    drop: &mut Dropout,
) -> Result<Var> {
    if ids.len() < 2 {
        return Err(Error::Contract("a caption needs at least <bos> and one target".into()));
    }
    let memory = encode_on(tape, cfg, mv, record, drop)?;
    let logits = decode_on(tape, cfg, mv, memory, &ids[..ids.len() - 1], drop)?;
    Ok(tape.cross_entropy(logits, &ids[1..], PAD)?)
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub memory: Tensor,
    pub seq_len: usize,
}

/// Builds a fresh checkpoint with parameters drawn from `cfg.seed`.
pub fn init_model(cfg: &ModelConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    Ok(Checkpoint::new(cfg.clone(), Params::init(cfg)))
}

/// Runs the encoder with frozen parameters.
pub fn encode(record: &ImageRecord, ckpt: &Checkpoint) -> Result<EncodedImage> {
    let mut tape = Tape::new();
    let mv = bind(&mut tape, &ckpt.config, &ckpt.params, false)?;
    let m = encode_on(&mut tape, &ckpt.config, &mv, record, &mut Dropout::off())?;
    Ok(EncodedImage {
        memory: tape.value(m).clone(),
        seq_len: record.n_regions(),
    })
}

/// Decoder logits for every prefix position, with frozen parameters.
pub fn decode_logits(encoded: &EncodedImage, prefix: &[usize], ckpt: &Checkpoint) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = bind(&mut tape, &ckpt.config, &ckpt.params, false)?;
    let m = tape.constant(encoded.memory.clone());
    let l = decode_on(&mut tape, &ckpt.config, &mv, m, prefix, &mut Dropout::off())?;
    Ok(tape.value(l).clone())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_compare, relative_error};
    use crate::data::EOS;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ffn: 32,
            d_g: 16,
            d_feat: 6,
            vocab_size: 9,
            max_caption_len: 8,
            ..ModelConfig::default()
        }
    }

    pub(crate) use crate::verify::random_record;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = small_config();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a.params, b.params);
        for (name, t) in a.params.iter() {
            let last = name.rsplit('.').next().unwrap();
            if matches!(last, "b" | "bias" | "bq" | "bv" | "b_gate" | "b_info") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if last == "gain" {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        let c = init_model(&ModelConfig { seed: 99, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn xavier_bounds_hold() {
        let cfg = small_config();
        let p = Params::init(&cfg);
        for s in layout(&cfg) {
            if s.init == Init::Xavier {
                let a = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                assert!(p.get(&s.name).unwrap().data().iter().all(|v| v.abs() <= a));
            }
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        let cfg = ModelConfig {
            vocab_size: 100,
            ..ModelConfig::default()
        };
        let (d, f, g, h, v, i) = (64, 128, 64, 4, 100, cfg.d_feat);
        let qkv = 3 * d * d + 2 * d;
        let ln = 2 * d;
        let ffn = d * f + f + f * d + d;
        let aoa = 4 * d * d + 2 * d;
        let enc = qkv + g * h + aoa + ln + ffn + ln;
        let mha = qkv + d * d + d;
        let dec = 2 * (mha + ln) + ffn + ln;
        let expected = i * d + d + 2 * enc + v * d + 2 * dec + d * v + v;
        assert_eq!(Params::init(&cfg).count(), expected);
        let ort = ModelConfig {
            aoa_enabled: false,
            ..cfg
        };
        let diff = 2 * (aoa - (d * d + d));
        assert_eq!(Params::init(&ort).count(), expected - diff);
    }

    #[test]
    fn encode_shapes_and_zero_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_config();
        let ck = init_model(&cfg).unwrap();
        let one = random_record(&mut rng, 1, cfg.d_feat);
        assert_eq!(encode(&one, &ck).unwrap().memory.shape(), &[1, 16]);

        let flat = ModelConfig {
            n_enc_layers: 0,
            ..cfg.clone()
        };
        let ck0 = init_model(&flat).unwrap();
        let rec = random_record(&mut rng, 3, cfg.d_feat);
        let m = encode(&rec, &ck0).unwrap().memory;
        let w = ck0.params.get("input.w").unwrap();
        for r in 0..3 {
            for c in 0..16 {
                let want: f64 = (0..cfg.d_feat).map(|k| rec.features.get(&[r, k]) * w.get(&[k, c])).sum();
                assert!((m.get(&[r, c]) - want).abs() < 1e-12);
            }
        }
        let wrong = random_record(&mut rng, 2, cfg.d_feat + 1);
        assert!(matches!(encode(&wrong, &ck), Err(Error::Validation { .. })));
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_config();
        let ck = init_model(&cfg).unwrap();
        let rec = random_record(&mut rng, 4, cfg.d_feat);
        let perm = [2, 0, 3, 1];
        let boxes: Vec<_> = perm.iter().map(|&i| rec.boxes[i]).collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| rec.features.row(i).to_vec()).collect();
        let prec = ImageRecord::from_boxes("p", 200.0, 200.0, &boxes, Tensor::from_rows(&rows).unwrap()).unwrap();
        let a = encode(&rec, &ck).unwrap().memory;
        let b = encode(&prec, &ck).unwrap().memory;
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..16 {
                assert!((b.get(&[k, c]) - a.get(&[i, c])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoder_is_causal_and_incremental() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_config();
        let ck = init_model(&cfg).unwrap();
        let enc = encode(&random_record(&mut rng, 3, cfg.d_feat), &ck).unwrap();
        let prefix = [BOS, 4, 5, 6, 7];
        let full = decode_logits(&enc, &prefix, &ck).unwrap();
        assert_eq!(full.shape(), &[5, 9]);
        assert_eq!(decode_logits(&enc, &[BOS], &ck).unwrap().shape(), &[1, 9]);
        for t in 1..=prefix.len() {
            let part = decode_logits(&enc, &prefix[..t], &ck).unwrap();
            for r in 0..t {
                for c in 0..9 {
                    assert!((part.get(&[r, c]) - full.get(&[r, c])).abs() < 1e-12);
                }
            }
        }
        let mut changed = prefix;
        changed[3] = 8;
        changed[4] = EOS;
        let alt = decode_logits(&enc, &changed, &ck).unwrap();
        for r in 0..3 {
            assert_eq!(alt.row(r), full.row(r));
        }
        assert_ne!(alt.row(3), full.row(3));
    }

    #[test]
    fn decoder_rejects_bad_prefixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_config();
        let ck = init_model(&cfg).unwrap();
        let enc = encode(&random_record(&mut rng, 2, cfg.d_feat), &ck).unwrap();
        assert!(decode_logits(&enc, &[4, 5], &ck).is_err());
        assert!(decode_logits(&enc, &[], &ck).is_err());
        let long = vec![BOS; cfg.max_caption_len + 1];
        assert!(decode_logits(&enc, &long, &ck).is_err());
        assert!(decode_logits(&enc, &long[..cfg.max_caption_len], &ck).is_ok());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Entries whose true gradient is below ~1e-7 sit under the resolution
        // of an O(1) loss at h = 1e-5, so each entry may also miss by the
        // rounding of f itself. The strict check runs in the verify suite.
        let h = 1e-5;
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for aoa in [true, false] {
                let cfg = ModelConfig {
                    aoa_enabled: aoa,
                    seed,
                    ..small_config()
                };
                let ck = init_model(&cfg).unwrap();
                let rec = random_record(&mut rng, 3, cfg.d_feat);
                let ids = [BOS, 4, 6, 5, EOS];
                let params = ck.params.clone();
                let f = |tape: &mut Tape, vars: &[Var]| {
                    let mv = bind_vars(&cfg, &params, vars.to_vec()).expect("layout");
                    xe_loss_on(tape, &cfg, &mv, &rec, &ids, &mut Dropout::off())
                        .map_err(|e| match e {
                            Error::Tensor(t) => t,
                            other => panic!("{other}"),
                        })
                };
                let cmp = finite_diff_compare(f, ck.params.tensors(), h).unwrap();
                let floor = 4.0 * f64::EPSILON * cmp.value.abs() / (2.0 * h);
                let mut within_tol = 0;
                let mut total = 0;
                for (pi, pairs) in cmp.entries.iter().enumerate() {
                    for &(a, n) in pairs {
                        let scale = a.abs().max(n.abs()).max(1e-8);
                        assert!(
                            (a - n).abs() <= 1e-4 * scale + floor,
                            "seed {seed} aoa={aoa} {}: {a:e} vs {n:e}",
                            ck.params.names()[pi]
                        );
                        within_tol += usize::from(relative_error(a, n) <= 1e-4);
                        total += 1;
                    }
                }
                assert!(within_tol + 2 >= total, "seed {seed} aoa={aoa}: {within_tol}/{total}");
            }
        }
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig {
            dropout_rate: 0.3,
            ..small_config()
        };
        let ck = init_model(&cfg).unwrap();
        let rec = random_record(&mut rng, 3, cfg.d_feat);
        let run = |drop: &mut Dropout| {
            let mut tape = Tape::new();
            let mv = bind(&mut tape, &cfg, &ck.params, false).unwrap();
            let m = encode_on(&mut tape, &cfg, &mv, &rec, drop).unwrap();
            tape.value(m).clone()
        };
        let eval = run(&mut Dropout::off());
        assert_eq!(eval, encode(&rec, &ck).unwrap().memory);
        let train = run(&mut Dropout::new(0.3, ChaCha8Rng::seed_from_u64(1)));
        assert_ne!(train, eval);
    }
}
