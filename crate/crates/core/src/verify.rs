//! Self-checks runnable outside the test harness: gradient checks against
//! finite differences, attention and decoding invariants, and metric
//! cross-checks against brute-force counters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Tape, Var};
use crate::data::{ImageRecord, BOS, EOS};
use crate::error::{Error, Result};
use crate::geometry::{
    combined_scores, geometric_weights, multi_head_object_aoa_on, pair_embeddings, relative_geometry, scaled_dot_scores,
    AoaVars, AttentionVars, BoundingBox, GeometryConfig, OutputVars,
};
use crate::metrics::{bleu, build_corpus_stats, cider, rouge_l, TokenSeq};
use crate::model::{
    beam_search, bind_vars, causal_mask, decode_logits, encode, generation_mask, init_model, xe_loss_on, Checkpoint, Dropout, ModelConfig, Session,
};
use crate::tensor::{Tensor, TensorError};

/// One named check and how it went.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Measured error (or count of violations); lower is better.
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn within(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
        }
    }

    fn exact(name: impl Into<String>, violations: usize) -> Self {
        Check::within(name, violations as f64, 0.0)
    }

    /// `[PASS] name: value (limit)`
    pub fn line(&self) -> String {
        format!(
            "[{}] {}: {:.3e} (limit {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.limit
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Invariants,
    MetricsOracle,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gradcheck" => Some(Suite::Gradcheck),
            "invariants" => Some(Suite::Invariants),
            "metrics-oracle" => Some(Suite::MetricsOracle),
            "all" => Some(Suite::All),
            _ => None,
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    Ok(match suite {
        Suite::Gradcheck => gradcheck_suite()?,
        Suite::Invariants => invariants_suite()?,
        Suite::MetricsOracle => metrics_oracle_suite()?,
        Suite::All => {
            let mut all = gradcheck_suite()?;
            all.extend(invariants_suite()?);
            all.extend(metrics_oracle_suite()?);
            all
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Uniform in `[-2, 2]`, resampling values within `1e-3` of zero so that
/// kinks stay out of reach of a `1e-5` perturbation.
fn inputs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `n` random boxes on a 200×200 image with random `[-1, 1]` features.
pub fn random_record(rng: &mut ChaCha8Rng, n: usize, d_feat: usize) -> ImageRecord {
    let boxes: Vec<BoundingBox> = (0..n)
        .map(|_| {
            let w = rng.gen_range(10.0..60.0);
            let h = rng.gen_range(10.0..60.0);
            BoundingBox::from_corner(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), w, h).expect("positive size")
        })
        .collect();
    let feats = (0..n * d_feat).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ImageRecord::from_boxes("r", 200.0, 200.0, &boxes, Tensor::new(vec![n, d_feat], feats).expect("n × d_feat"))
        .expect("boxes lie inside the image")
}

/// The configuration of the full-model gradient check.
pub fn gradcheck_model_config(aoa_enabled: bool) -> ModelConfig {
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
        aoa_enabled,
        ..ModelConfig::default()
    }
}

type ScalarFn = Box<dyn Fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>>;

/// `sum(y ⊙ w)` for a fixed random `w`, so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> crate::tensor::Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, ScalarFn, Vec<Tensor>)> {
    let mut cases: Vec<(&'static str, ScalarFn, Vec<Tensor>)> = Vec::new();
    let w34 = inputs(rng, &[3, 4]);
    macro_rules! unary {
        ($name:expr, $input:expr, $f:expr) => {{
            let w = w34.clone();
            let x = $input;
            cases.push((
                $name,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = $f(t, v[0])?;
                    weighted_sum(t, y, &w)
                }),
                vec![x],
            ));
        }};
    }
    macro_rules! binary {
        ($name:expr, $f:expr) => {{
            let w = w34.clone();
            cases.push((
                $name,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = $f(t, v[0], v[1])?;
                    weighted_sum(t, y, &w)
                }),
                vec![inputs(rng, &[3, 4]), inputs(rng, &[3, 4])],
            ));
        }};
    }
    binary!("add", |t: &mut Tape, a, b| t.add(a, b));
    binary!("sub", |t: &mut Tape, a, b| t.sub(a, b));
    binary!("mul", |t: &mut Tape, a, b| t.mul(a, b));
    unary!("sigmoid", inputs(rng, &[3, 4]), |t: &mut Tape, x| Ok::<_, TensorError>(t.sigmoid(x)));
    unary!("relu", inputs(rng, &[3, 4]), |t: &mut Tape, x| Ok::<_, TensorError>(t.relu(x)));
    unary!("exp", inputs(rng, &[3, 4]), |t: &mut Tape, x| Ok::<_, TensorError>(t.exp(x)));
    unary!("log", uniform(rng, &[3, 4], 0.1, 2.0), |t: &mut Tape, x| t.log(x));
    unary!("scale", inputs(rng, &[3, 4]), |t: &mut Tape, x| Ok::<_, TensorError>(t.scale(x, -1.7)));
    unary!("transpose_twice", inputs(rng, &[3, 4]), |t: &mut Tape, x| {
        let y = t.transpose(x)?;
        t.transpose(y)
    });
    unary!("softmax_rows", inputs(rng, &[3, 4]), |t: &mut Tape, x| t.softmax_rows(x, None));
    {
        let mask: Vec<bool> = causal_mask(4).into_iter().skip(4).take(12).collect();
        unary!("softmax_rows_masked", inputs(rng, &[3, 4]), |t: &mut Tape, x| t
            .softmax_rows(x, Some(&mask)));
    }
    unary!("reshape", inputs(rng, &[4, 3]), |t: &mut Tape, x| t.reshape(x, &[3, 4]));
    {
        let w = w34.clone();
        cases.push((
            "add_bias",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.add_bias(v[0], v[1])?;
                weighted_sum(t, y, &w)
            }),
            vec![inputs(rng, &[3, 4]), inputs(rng, &[4])],
        ));
    }
    {
        let w = w34.clone();
        cases.push((
            "matmul",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            }),
            vec![inputs(rng, &[3, 5]), inputs(rng, &[5, 4])],
        ));
    }
    {
        let w = w34.clone();
        cases.push((
            "layer_norm",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &w)
            }),
            vec![inputs(rng, &[3, 4]), inputs(rng, &[4]), inputs(rng, &[4])],
        ));
    }
    {
        let w = w34.clone();
        cases.push((
            "embedding",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.embedding(v[0], &[2, 0, 2])?;
                weighted_sum(t, y, &w)
            }),
            vec![inputs(rng, &[5, 4])],
        ));
    }
    {
        let w = w34.clone();
        cases.push((
            "slice_concat_cols",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let a = t.slice_cols(v[0], 3, 2)?;
                let b = t.slice_cols(v[1], 0, 2)?;
                let y = t.concat_cols(&[a, b])?;
                weighted_sum(t, y, &w)
            }),
            vec![inputs(rng, &[3, 5]), inputs(rng, &[3, 3])],
        ));
    }
    cases.push((
        "cross_entropy",
        Box::new(|t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[1, 0, 5, 3], 0)),
        vec![inputs(rng, &[4, 6])],
    ));
    {
        let mask = generation_mask(6);
        cases.push((
            "log_prob_gather",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let lp = t.log_prob_gather(v[0], &[2, 3, 5, 4], Some(&mask))?;
                Ok(t.sum(lp))
            }),
            vec![inputs(rng, &[4, 6])],
        ));
    }
    cases
}

/// Geometric attention block (`seq = 3`, `d_model = 8`) as a function of
/// its input and every parameter.
fn block_case(rng: &mut ChaCha8Rng, aoa: bool) -> (ScalarFn, Vec<Tensor>) {
    let (seq, d, heads, d_g) = (3, 8, 2, 16);
    let cfg = GeometryConfig {
        d_g,
        ..GeometryConfig::default()
    };
    let rec = random_record(rng, seq, 1);
    let pair = pair_embeddings(&rec.boxes, &cfg);
    let w = inputs(rng, &[seq, d]);
    let mut params = vec![inputs(rng, &[seq, d])];
    for shape in [&[d, d][..], &[d], &[d, d], &[d, d], &[d]] {
        params.push(uniform(rng, shape, -0.5, 0.5));
    }
    params.push(uniform(rng, &[d_g, heads], -0.3, 0.3));
    if aoa {
        for shape in [&[d, d][..], &[d, d], &[d], &[d, d], &[d, d], &[d]] {
            params.push(uniform(rng, shape, -0.5, 0.5));
        }
    } else {
        params.push(uniform(rng, &[d, d], -0.5, 0.5));
        params.push(uniform(rng, &[d], -0.5, 0.5));
    }
    let f: ScalarFn = Box::new(move |t: &mut Tape, v: &[Var]| {
        let output = if aoa {
            OutputVars::Aoa(AoaVars {
                w_q_gate: v[7],
                w_v_gate: v[8],
                b_gate: v[9],
                w_q_info: v[10],
                w_v_info: v[11],
                b_info: v[12],
            })
        } else {
            OutputVars::Projection { w: v[7], b: v[8] }
        };
        let vars = AttentionVars {
            wq: v[1],
            bq: v[2],
            wk: v[3],
            wv: v[4],
            bv: v[5],
            w_geo: v[6],
            output,
        };
        let e = t.constant(pair.clone());
        let y = multi_head_object_aoa_on(t, v[0], e, &vars)?;
        weighted_sum(t, y, &w)
    });
    (f, params)
}

/// Teacher-forced loss of the full model on a fixed 3-region image and a
/// caption of four target tokens.
pub fn full_model_case(aoa_enabled: bool) -> Result<(Checkpoint, ImageRecord, Vec<usize>)> {
    let cfg = gradcheck_model_config(aoa_enabled);
    let ck = init_model(&cfg)?;
    let rec = random_record(&mut ChaCha8Rng::seed_from_u64(cfg.seed), 3, cfg.d_feat);
    Ok((ck, rec, vec![BOS, 4, 6, 5, EOS]))
}

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

pub fn gradcheck_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for (name, f, params) in op_cases(&mut rng) {
        let r = finite_diff_check(f, &params, GRAD_H, GRAD_TOL)?;
        out.push(Check::within(format!("grad/{name}"), r.max_rel_err, GRAD_TOL));
    }
    for aoa in [true, false] {
        let (f, params) = block_case(&mut rng, aoa);
        let r = finite_diff_check(f, &params, GRAD_H, GRAD_TOL)?;
        out.push(Check::within(format!("grad/attention_block aoa={aoa}"), r.max_rel_err, GRAD_TOL));
    }
    for aoa in [true, false] {
        let (ck, rec, ids) = full_model_case(aoa)?;
        let cfg = ck.config.clone();
        let params = ck.params.clone();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let mv = bind_vars(&cfg, &params, vars.to_vec()).map_err(internal)?;
            xe_loss_on(tape, &cfg, &mv, &rec, &ids, &mut Dropout::off()).map_err(internal)
        };
        let r = finite_diff_check(f, ck.params.tensors(), GRAD_H, GRAD_TOL)?;
        out.push(Check::within(format!("grad/full_model aoa={aoa}"), r.max_rel_err, GRAD_TOL));
    }
    Ok(out)
}

fn internal(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Domain {
            op: "model",
            detail: other.to_string(),
        },
    }
}

fn pixel_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(1..=200) as f64;
    let h = rng.gen_range(1..=200) as f64;
    BoundingBox::from_corner(rng.gen_range(0..=800) as f64, rng.gen_range(0..=800) as f64, w, h).expect("positive size")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn small_model(seed: u64, aoa: bool, vocab_size: usize, max_len: usize) -> Result<Checkpoint> {
    init_model(&ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ffn: 32,
        d_g: 16,
        d_feat: 6,
        vocab_size,
        max_caption_len: max_len,
        aoa_enabled: aoa,
        seed,
        ..ModelConfig::default()
    })
}

/// Layer computed with explicit loops: plain multi-head attention (no
/// geometry, no gate), residual, layer norm, ReLU FFN, residual, layer norm.
fn vanilla_encoder(ck: &Checkpoint, features: &Tensor) -> Vec<Vec<f64>> {
    let p = |n: &str| ck.params.get(n).expect("parameter exists").data().to_vec();
    let cfg = &ck.config;
    let d = cfg.d_model;
    let rows = features.shape()[0];
    let x_in: Vec<Vec<f64>> = (0..rows).map(|r| features.row(r).to_vec()).collect();
    let lin = |x: &[Vec<f64>], w: &[f64], b: Option<&[f64]>, fan_out: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..fan_out)
                    .map(|j| {
                        let mut s = b.map_or(0.0, |b| b[j]);
                        for (i, v) in row.iter().enumerate() {
                            s += v * w[i * fan_out + j];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    };
    let norm = |x: &[Vec<f64>], g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    };
    let mut x = lin(&x_in, &p("input.w"), Some(&p("input.b")), d);
    for l in 0..cfg.n_enc_layers {
        let a = |s: &str| p(&format!("enc.{l}.{s}"));
        let q = lin(&x, &a("attn.wq"), Some(&a("attn.bq")), d);
        let k = lin(&x, &a("attn.wk"), None, d);
        let v = lin(&x, &a("attn.wv"), Some(&a("attn.bv")), d);
        let dh = d / cfg.n_heads;
        let mut heads = vec![vec![0.0; d]; rows];
        for h in 0..cfg.n_heads {
            for i in 0..rows {
                let scores: Vec<f64> = (0..rows)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    heads[i][h * dh + c] = (0..rows).map(|j| e[j] / z * v[j][h * dh + c]).sum();
                }
            }
        }
        let o = lin(&heads, &a("attn.out.w"), Some(&a("attn.out.b")), d);
        let s: Vec<Vec<f64>> = x.iter().zip(&o).map(|(r, o)| r.iter().zip(o).map(|(a, b)| a + b).collect()).collect();
        x = norm(&s, &a("ln1.gain"), &a("ln1.bias"));
        let h1: Vec<Vec<f64>> = lin(&x, &a("ffn1.w"), Some(&a("ffn1.b")), cfg.d_ffn)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = lin(&h1, &a("ffn2.w"), Some(&a("ffn2.b")), d);
        let s: Vec<Vec<f64>> = x.iter().zip(&f).map(|(r, o)| r.iter().zip(o).map(|(a, b)| a + b).collect()).collect();
        x = norm(&s, &a("ln2.gain"), &a("ln2.bias"));
    }
    x
}

/// Every caption a decoder can emit: sequences over the generable tokens
/// that end at the first `<eos>` or at `max_len`.
pub fn enumerate_captions(vocab_size: usize, max_len: usize) -> Vec<Vec<usize>> {
    let allowed: Vec<usize> = generation_mask(vocab_size)
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::new();
    let mut open = vec![Vec::new()];
    while let Some(prefix) = open.pop() {
        for &t in &allowed {
            let mut s: Vec<usize> = prefix.clone();
            s.push(t);
            if t == EOS || s.len() == max_len {
                out.push(s);
            } else {
                open.push(s);
            }
        }
    }
    out.sort();
    out
}

pub fn invariants_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let gcfg = GeometryConfig::default();
    let mut out = Vec::new();

    let (mut trans, mut scale) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (m, n) = (pixel_box(&mut rng), pixel_box(&mut rng));
        let base = relative_geometry(&m, &n, &gcfg);
        let (dx, dy) = (rng.gen_range(-500..=500) as f64, rng.gen_range(-500..=500) as f64);
        let moved = relative_geometry(&m.translated(dx, dy), &n.translated(dx, dy), &gcfg);
        let s = rng.gen_range(0.1..10.0);
        let scaled = relative_geometry(&m.scaled(s), &n.scaled(s), &gcfg);
        trans = trans.max(max_abs_diff(&base, &moved));
        scale = scale.max(max_abs_diff(&base, &scaled));
    }
    out.push(Check::within("lambda/translation_invariance", trans, 1e-12));
    out.push(Check::within("lambda/scale_invariance", scale, 1e-9));

    let mut negative = 0;
    let mut exact_zero_geo = 0;
    for trial in 0..100 {
        let seq = 1 + trial % 6;
        let boxes: Vec<BoundingBox> = (0..seq).map(|_| pixel_box(&mut rng)).collect();
        let w_geo = uniform(&mut rng, &[gcfg.d_g, 4], -1.0, 1.0);
        let omega_w = geometric_weights(&boxes, &w_geo, &gcfg)?;
        negative += omega_w.data().iter().filter(|&&v| !(v >= 0.0)).count();
        let q = uniform(&mut rng, &[seq, 8], -2.0, 2.0);
        let k = uniform(&mut rng, &[seq, 8], -2.0, 2.0);
        let omega_a = scaled_dot_scores(&q, &k)?;
        let combined = combined_scores(&omega_a, &Tensor::zeros(&[seq, seq]))?;
        exact_zero_geo += combined.data().iter().zip(omega_a.data()).filter(|(a, b)| a != b).count();
    }
    out.push(Check::exact("omega_w/nonnegative", negative));
    out.push(Check::exact("combined_scores/zero_geometry_is_content_only", exact_zero_geo));

    let mut worst_row = 0.0f64;
    for trial in 0..100 {
        let (r, c) = (1 + trial % 5, 1 + trial % 7);
        let spread = [1.0, 10.0, 100.0][trial % 3];
        let x = uniform(&mut rng, &[r, c], -spread, spread);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.softmax_rows(xv, None)?;
        let sv = tape.value(s);
        for i in 0..r {
            worst_row = worst_row.max((sv.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    out.push(Check::within("softmax/rows_sum_to_one", worst_row, 1e-9));

    let mut perm_err = 0.0f64;
    let mut perm_greedy = 0;
    for seed in 0..20 {
        let ck = small_model(seed, seed % 2 == 0, 9, 6)?;
        let n = 2 + seed as usize % 4;
        let rec = random_record(&mut rng, n, 6);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1);
        perm.swap(0, n - 1);
        let boxes: Vec<BoundingBox> = perm.iter().map(|&i| rec.boxes[i]).collect();
        let feats: Vec<f64> = perm.iter().flat_map(|&i| rec.features.row(i).to_vec()).collect();
        let permuted = ImageRecord::from_boxes("p", rec.width, rec.height, &boxes, Tensor::new(vec![n, 6], feats)?)?;
        let (a, b) = (encode(&rec, &ck)?.memory, encode(&permuted, &ck)?.memory);
        for (row, &src) in perm.iter().enumerate() {
            perm_err = perm_err.max(max_abs_diff(b.row(row), a.row(src)));
        }
        let ga = Session::new(&ck, &rec)?.greedy()?;
        let gb = Session::new(&ck, &permuted)?.greedy()?;
        perm_greedy += usize::from(ga != gb);
    }
    out.push(Check::within("encode/permutation_equivariance", perm_err, 1e-9));
    out.push(Check::exact("greedy/region_order_free", perm_greedy));

    let mut reduction = 0.0f64;
    for seed in 0..10 {
        let mut ck = small_model(100 + seed, false, 9, 6)?;
        for t in ck.params.tensors_mut() {
            // non-trivial biases and norm parameters, so they are exercised too
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        ck.params
            .get_mut("enc.0.attn.w_geo")
            .expect("geometry weights")
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let rec = random_record(&mut rng, 1 + seed as usize % 5, 6);
        let mem = encode(&rec, &ck)?.memory;
        let plain = vanilla_encoder(&ck, &rec.features);
        for (i, row) in plain.iter().enumerate() {
            reduction = reduction.max(max_abs_diff(mem.row(i), row));
        }
    }
    out.push(Check::within("encoder/reduces_to_vanilla_attention", reduction, 1e-9));

    let mut causal = 0;
    for seed in 0..10 {
        let ck = small_model(200 + seed, true, 9, 6)?;
        let rec = random_record(&mut rng, 3, 6);
        let enc = encode(&rec, &ck)?;
        let a = [BOS, 4, 5, 6, 7, 8];
        let t = 1 + seed as usize % 4;
        let mut b = a;
        for v in b.iter_mut().skip(t + 1) {
            *v = 3 + (*v + 2) % 6;
        }
        let (la, lb) = (decode_logits(&enc, &a, &ck)?, decode_logits(&enc, &b, &ck)?);
        for r in 0..=t {
            causal += la.row(r).iter().zip(lb.row(r)).filter(|(x, y)| x != y).count();
        }
    }
    out.push(Check::exact("decoder/causality", causal));

    let mut beam_one = 0;
    for seed in 0..100 {
        let ck = small_model(300 + seed, seed % 2 == 0, 9, 6)?;
        let rec = random_record(&mut rng, 1 + seed as usize % 5, 6);
        let mut s = Session::new(&ck, &rec)?;
        let g = s.greedy()?;
        let b = beam_search(&mut s, 1)?.tokens;
        beam_one += usize::from(g != b);
    }
    out.push(Check::exact("beam/width_one_is_greedy (100 pairs)", beam_one));

    let mut exhaustive = 0;
    // vocabulary of 6 leaves 4 generable tokens (<eos>, <unk> and two words)
    let captions = enumerate_captions(6, 4);
    for seed in 0..5 {
        let ck = small_model(400 + seed, true, 6, 4)?;
        let rec = random_record(&mut rng, 3, 6);
        let mut s = Session::new(&ck, &rec)?;
        let mut best: Option<(f64, &Vec<usize>)> = None;
        for c in &captions {
            let lp = s.log_prob(c)?;
            if best.is_none_or(|(b, _)| lp > b) {
                best = Some((lp, c));
            }
        }
        let found = beam_search(&mut s, 256)?.tokens;
        exhaustive += usize::from(best.map(|(_, c)| c) != Some(&found));
    }
    out.push(Check::exact("beam/width_256_is_exhaustive_argmax", exhaustive));
    Ok(out)
}

/// n-grams of `s` by position, without any map.
fn grams(s: &[String], n: usize) -> Vec<&[String]> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
}

fn count_in(list: &[&[String]], g: &[String]) -> usize {
    list.iter().filter(|x| **x == g).count()
}

/// Sentence BLEU by direct tallies.
pub fn brute_bleu(cand: &[String], refs: &[TokenSeq], max_n: usize) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cg = grams(cand, n);
        let mut matched = 0;
        let mut seen: Vec<&[String]> = Vec::new();
        for g in &cg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_refs = refs.iter().map(|r| count_in(&grams(r, n), g)).max().unwrap_or(0);
            matched += count_in(&cg, g).min(in_refs);
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / cg.len() as f64).ln();
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by(|a, b| a.abs_diff(c).cmp(&b.abs_diff(c)).then(a.cmp(b)))
        .unwrap_or(0);
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    bp * (log_sum / max_n as f64).exp()
}

/// CIDEr with idf from `corpus` by direct tallies.
pub fn brute_cider(cand: &[String], refs: &[TokenSeq], corpus: &[Vec<TokenSeq>]) -> f64 {
    let idf = |g: &[String]| {
        let df = corpus
            .iter()
            .filter(|doc| doc.iter().any(|r| count_in(&grams(r, g.len()), g) > 0))
            .count();
        (corpus.len() as f64 / df.max(1) as f64).ln()
    };
    let vector = |s: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        let gs = grams(s, n);
        let mut out: Vec<(Vec<String>, f64)> = Vec::new();
        for g in &gs {
            if out.iter().any(|(k, _)| k.as_slice() == *g) {
                continue;
            }
            out.push((g.to_vec(), count_in(&gs, g) as f64 * idf(g)));
        }
        out
    };
    let mut total = 0.0;
    for n in 1..=4 {
        let c = vector(cand, n);
        let mut per = 0.0;
        for r in refs {
            let rv = vector(r, n);
            let na: f64 = c.iter().map(|(_, v)| v * v).sum();
            let nb: f64 = rv.iter().map(|(_, v)| v * v).sum();
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let dot: f64 = c
                .iter()
                .map(|(k, v)| rv.iter().find(|(k2, _)| k2 == k).map_or(0.0, |(_, w)| v * w))
                .sum();
            per += dot / (na * nb).sqrt();
        }
        total += per / refs.len() as f64;
    }
    10.0 * total / 4.0
}

/// ROUGE-L F1 with the LCS found by trying every subsequence of `cand`.
pub fn brute_rouge_l(cand: &[String], refs: &[TokenSeq]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let is_subseq = |s: &[&String], r: &[String]| {
        let mut it = r.iter();
        s.iter().all(|t| it.any(|x| x == *t))
    };
    refs.iter()
        .map(|r| {
            let mut lcs = 0;
            for bits in 0u32..(1 << cand.len()) {
                let s: Vec<&String> = (0..cand.len()).filter(|i| bits >> i & 1 == 1).map(|i| &cand[i]).collect();
                if s.len() > lcs && is_subseq(&s, r) {
                    lcs = s.len();
                }
            }
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / cand.len() as f64;
            let rc = lcs as f64 / r.len() as f64;
            2.0 * p * rc / (p + rc)
        })
        .fold(0.0, f64::max)
}

fn words(s: &str) -> TokenSeq {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn metrics_oracle_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let alphabet = ["x", "y", "z"];
    let seq = |rng: &mut ChaCha8Rng| -> TokenSeq {
        let n = rng.gen_range(1..=6);
        (0..n).map(|_| alphabet[rng.gen_range(0..3)].to_string()).collect()
    };
    let pairs: Vec<(TokenSeq, Vec<TokenSeq>)> = (0..500)
        .map(|_| {
            let c = seq(&mut rng);
            let k = rng.gen_range(1..=3);
            (c, (0..k).map(|_| seq(&mut rng)).collect())
        })
        .collect();
    let corpus: Vec<Vec<TokenSeq>> = pairs.iter().map(|(_, r)| r.clone()).collect();
    let stats = build_corpus_stats(&corpus);
    let (mut eb, mut ec, mut er) = (0.0f64, 0.0f64, 0.0f64);
    for (c, refs) in &pairs {
        for n in 1..=4 {
            let a = bleu(std::slice::from_ref(c), std::slice::from_ref(refs), n)?;
            eb = eb.max((a - brute_bleu(c, refs, n)).abs());
        }
        ec = ec.max((cider(c, refs, &stats) - brute_cider(c, refs, &corpus)).abs());
        er = er.max((rouge_l(c, refs) - brute_rouge_l(c, refs)).abs());
    }
    let mut out = vec![
        Check::within("metrics/bleu_vs_brute_force (500 pairs)", eb, 1e-12),
        Check::within("metrics/cider_vs_brute_force (500 pairs)", ec, 1e-12),
        Check::within("metrics/rouge_l_vs_brute_force (500 pairs)", er, 1e-12),
    ];

    let clipped = bleu(
        &[words("the the the the the the the")],
        &[vec![words("the cat is on the mat")]],
        1,
    )?;
    out.push(Check::within("metrics/clipped_unigram_precision_2_7", (clipped - 2.0 / 7.0).abs(), 1e-12));
    let rl = rouge_l(&words("a c d"), &[words("a b c d")]);
    out.push(Check::within("metrics/rouge_l_hand_example", (rl - 6.0 / 7.0).abs(), 1e-12));
    let two = vec![vec![words("a red circle left of a square")], vec![words("two blue squares")]];
    let st = build_corpus_stats(&two);
    let perfect = cider(&words("a red circle left of a square"), &two[0], &st);
    out.push(Check::within("metrics/cider_perfect_match_is_10", (perfect - 10.0).abs(), 1e-12));
    Ok(out)
}

/// Gradient of `J = Σ_w p(w) r(w)` over every caption `w` the model can
/// emit for `record`, by enumeration.
pub fn exact_policy_gradient(ckpt: &Checkpoint, record: &ImageRecord, rewards: &[(Vec<usize>, f64)]) -> Result<Vec<Vec<f64>>> {
    let cfg = &ckpt.config;
    let mut tape = Tape::new();
    let mv = crate::model::bind(&mut tape, cfg, &ckpt.params, true)?;
    let memory = crate::model::encode_on(&mut tape, cfg, &mv, record, &mut Dropout::off())?;
    let mask = generation_mask(cfg.vocab_size);
    let mut terms = Vec::with_capacity(rewards.len());
    for (w, r) in rewards {
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&w[..w.len() - 1]);
        let logits = crate::model::decode_on(&mut tape, cfg, &mv, memory, &prefix, &mut Dropout::off())?;
        let lp = tape.log_prob_gather(logits, w, Some(&mask))?;
        let total = tape.sum(lp);
        let p = tape.exp(total);
        terms.push(tape.scale(p, *r));
    }
    let mut j = terms[0];
    for &t in &terms[1..] {
        j = tape.add(j, t)?;
    }
    tape.backward(j)?;
    Ok(mv
        .all
        .iter()
        .zip(ckpt.params.tensors())
        .map(|(&v, p)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(checks: &[Check]) {
        let bad: Vec<String> = checks.iter().filter(|c| !c.passed).map(Check::line).collect();
        assert!(bad.is_empty(), "{bad:#?}");
    }

    #[test]
    fn enumeration_counts() {
        // 4 generable tokens: 1 + 3 + 9 + 27 end in <eos>, 3^4 run to the limit
        let all = enumerate_captions(6, 4);
        assert_eq!(all.len(), 1 + 3 + 9 + 27 + 81);
        assert!(all.iter().all(|c| c.iter().position(|&t| t == EOS).is_none_or(|p| p == c.len() - 1)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        report(&gradcheck_suite().unwrap());
    }

    #[test]
    fn invariants_hold() {
        report(&invariants_suite().unwrap());
    }

    #[test]
    fn metric_oracles_agree() {
        report(&metrics_oracle_suite().unwrap());
    }

    #[test]
    fn brute_force_oracles_spot_checks() {
        assert_eq!(brute_rouge_l(&words("a c d"), &[words("a b c d")]), 6.0 / 7.0);
        assert_eq!(brute_bleu(&words("a b"), &[words("c d")], 1), 0.0);
        let corpus = vec![vec![words("a b a c")], vec![words("c d")]];
        assert!((brute_cider(&words("a b a c"), &corpus[0], &corpus) - 10.0).abs() < 1e-12);
    }
}
