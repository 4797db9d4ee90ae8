//! Geometric relative-position attention with attention-on-attention gating.
//!
//! For a set of regions with boxes, content scores `QKᵀ/√d` are modulated by
//! non-negative pairwise geometric weights,
//!
//! ```text
//! Ω = Ω_A ∘ exp(Ω_W),    Ω_W[h][m][n] = ReLU(Emb(λ(m, n)) · W_G)[h]
//! ```
//!
//! and the attended values are passed through the gate
//! `σ(X·W_q^g + A·W_v^g + b^g) ⊙ (X·W_q^i + A·W_v^i + b^i)`.
//!
//! Every operation exists twice: an `*_on` form that records onto a [`Tape`]
//! (used by the model) and a value form that runs a throwaway tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Error;
use crate::tensor::{Result, Tensor, TensorError};

/// One region's geometry in pixels, center format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Center-format box; `None` unless width and height are positive and finite.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.is_valid().then_some(b)
    }

    /// Converts a corner-format `[x, y, w, h]` box.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Option<Self> {
        BoundingBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// Corner format `[x, y, w, h]`.
    pub fn corner(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        BoundingBox {
            cx: self.cx * s,
            cy: self.cy * s,
            w: self.w * s,
            h: self.h * s,
        }
    }
}

/// Shape of the geometry embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    /// Embedding width; a multiple of 8 (4 components × sin/cos pairs).
    pub d_g: usize,
    /// Base of the geometric frequency ladder.
    pub wave_base: f64,
    /// Floor applied to `t_x` and `t_y` before their logarithm.
    pub eps_clamp: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            d_g: 64,
            wave_base: 1000.0,
            eps_clamp: 1e-3,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.d_g == 0 || self.d_g % 8 != 0 {
            return Err(Error::Config(format!("d_g = {} must be a positive multiple of 8", self.d_g)));
        }
        if !(self.eps_clamp > 0.0) {
            return Err(Error::Config(format!("eps_clamp = {} must be positive", self.eps_clamp)));
        }
        if !(self.wave_base > 0.0) {
            return Err(Error::Config(format!("wave_base = {} must be positive", self.wave_base)));
        }
        Ok(())
    }
}

/// Relative geometry `λ(m, n) = (log t_x, log t_y, t_w, t_h)` of box `m`
/// with respect to box `n`.
///
/// `t_x = |x_m − x_n| / w_m` and `t_y = |y_m − y_n| / h_m` are floored at
/// `eps_clamp`; `t_w = log(w_m / w_n)` and `t_h = log(h_m / h_n)` are used as is.
pub fn relative_geometry(m: &BoundingBox, n: &BoundingBox, cfg: &GeometryConfig) -> [f64; 4] {
    let tx = ((m.cx - n.cx).abs() / m.w).max(cfg.eps_clamp);
    let ty = ((m.cy - n.cy).abs() / m.h).max(cfg.eps_clamp);
    let tw = (m.w / n.w).ln();
    let th = (m.h / n.h).ln();
    [tx.ln(), ty.ln(), tw, th]
}

/// Sinusoidal embedding of `λ`: each component becomes `d_g / 4` values of
/// interleaved `(sin, cos)` at frequencies `wave_base^(8k / d_g)`.
pub fn geometry_embedding(lambda: &[f64; 4], cfg: &GeometryConfig) -> Vec<f64> {
    let pairs = cfg.d_g / 8;
    let mut out = Vec::with_capacity(cfg.d_g);
    for &component in lambda {
        for k in 0..pairs {
            let freq = cfg.wave_base.powf(8.0 * k as f64 / cfg.d_g as f64);
            let arg = component / freq;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Embeddings of every ordered box pair as a `[seq², d_g]` matrix; row
/// `m·seq + n` holds `Emb(λ(m, n))`.
pub fn pair_embeddings(boxes: &[BoundingBox], cfg: &GeometryConfig) -> Tensor {
    let s = boxes.len();
    let mut data = Vec::with_capacity(s * s * cfg.d_g);
    for m in boxes {
        for n in boxes {
            data.extend(geometry_embedding(&relative_geometry(m, n, cfg), cfg));
        }
    }
    Tensor::new(vec![s * s, cfg.d_g], data).expect("consistent extents")
}

/// Gate parameters; every matrix maps `d_model → d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct AoaParams {
    pub w_q_gate: Tensor,
    pub w_v_gate: Tensor,
    pub b_gate: Tensor,
    pub w_q_info: Tensor,
    pub w_v_info: Tensor,
    pub b_info: Tensor,
}

/// What follows the concatenated heads.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputStage {
    Aoa(AoaParams),
    Projection { w: Tensor, b: Tensor },
}

/// Parameters of one geometric multi-head attention block.
///
/// The Q/K/V matrices are `d_model × d_model`; head `h` uses columns
/// `h·d_head .. (h+1)·d_head`. `w_geo` is `d_g × n_heads`. Keys carry no
/// bias: a key bias only shifts each score row and has no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub w_geo: Tensor,
    pub output: OutputStage,
}

impl AttentionParams {
    pub fn n_heads(&self) -> usize {
        self.w_geo.last_dim()
    }

    pub fn aoa_enabled(&self) -> bool {
        matches!(self.output, OutputStage::Aoa(_))
    }

    /// Records all tensors as leaves; `trainable` decides whether they take gradients.
    pub fn to_vars(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let output = match &self.output {
            OutputStage::Aoa(a) => OutputVars::Aoa(AoaVars {
                w_q_gate: put(&a.w_q_gate),
                w_v_gate: put(&a.w_v_gate),
                b_gate: put(&a.b_gate),
                w_q_info: put(&a.w_q_info),
                w_v_info: put(&a.w_v_info),
                b_info: put(&a.b_info),
            }),
            OutputStage::Projection { w, b } => OutputVars::Projection {
                w: put(w),
                b: put(b),
            },
        };
        AttentionVars {
            wq: put(&self.wq),
            bq: put(&self.bq),
            wk: put(&self.wk),
            wv: put(&self.wv),
            bv: put(&self.bv),
            w_geo: put(&self.w_geo),
            output,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AoaVars {
    pub w_q_gate: Var,
    pub w_v_gate: Var,
    pub b_gate: Var,
    pub w_q_info: Var,
    pub w_v_info: Var,
    pub b_info: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum OutputVars {
    Aoa(AoaVars),
    Projection { w: Var, b: Var },
}

/// Tape handles for an [`AttentionParams`] block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub w_geo: Var,
    pub output: OutputVars,
}

/// Per-head `Ω_W` matrices (`[seq, seq]` each) from pair embeddings.
pub fn geometric_weights_on(tape: &mut Tape, pair_emb: Var, w_geo: Var, seq: usize) -> Result<Vec<Var>> {
    let z = tape.matmul(pair_emb, w_geo)?;
    let r = tape.relu(z);
    let heads = tape.shape(w_geo)[1];
    (0..heads)
        .map(|h| {
            let col = tape.slice_cols(r, h, 1)?;
            tape.reshape(col, &[seq, seq])
        })
        .collect()
}

/// `Q Kᵀ / √d_head`.
pub fn scaled_dot_scores_on(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (tape.shape(q), tape.shape(k));
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(TensorError::shape(
            "scaled_dot_scores",
            format!("Q {sq:?}, K {sk:?}"),
        ));
    }
    let d = sq[1] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    Ok(tape.scale(scores, 1.0 / d.sqrt()))
}

/// `Ω_A ∘ exp(Ω_W)`.
pub fn combined_scores_on(tape: &mut Tape, omega_a: Var, omega_w: Var) -> Result<Var> {
    if tape.shape(omega_a) != tape.shape(omega_w) {
        return Err(TensorError::shape(
            "combined_scores",
            format!("{:?} vs {:?}", tape.shape(omega_a), tape.shape(omega_w)),
        ));
    }
    let e = tape.exp(omega_w);
    tape.mul(omega_a, e)
}

/// `softmax(Ω) V`.
pub fn object_attention_on(tape: &mut Tape, omega: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
    let weights = tape.softmax_rows(omega, mask)?;
    tape.matmul(weights, v)
}

fn affine2(tape: &mut Tape, x: Var, wx: Var, a: Var, wa: Var, b: Var) -> Result<Var> {
    let p = tape.matmul(x, wx)?;
    let q = tape.matmul(a, wa)?;
    let s = tape.add(p, q)?;
    tape.add_bias(s, b)
}

/// `σ(X·W_q^g + A·W_v^g + b^g) ⊙ (X·W_q^i + A·W_v^i + b^i)`.
pub fn aoa_gate_on(tape: &mut Tape, q_in: Var, attended: Var, p: &AoaVars) -> Result<Var> {
    if tape.shape(q_in) != tape.shape(attended) {
        return Err(TensorError::shape(
            "aoa_gate",
            format!("{:?} vs {:?}", tape.shape(q_in), tape.shape(attended)),
        ));
    }
    let g = affine2(tape, q_in, p.w_q_gate, attended, p.w_v_gate, p.b_gate)?;
    let gate = tape.sigmoid(g);
    let info = affine2(tape, q_in, p.w_q_info, attended, p.w_v_info, p.b_info)?;
    tape.mul(gate, info)
}

fn project(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Geometric multi-head self-attention over regions.
///
/// Per head: `Ω_A` from projected Q/K, `Ω_W` from `pair_emb`, `Ω = Ω_A ∘
/// exp(Ω_W)`, `softmax(Ω) V`. The heads are concatenated and passed through
/// the AoA gate (with `X` as the query input) or a plain output projection.
pub fn multi_head_object_aoa_on(
    tape: &mut Tape,
    x: Var,
    pair_emb: Var,
    p: &AttentionVars,
) -> Result<Var> {
    let (seq, d_model) = match tape.shape(x) {
        [s, d] => (*s, *d),
        other => return Err(TensorError::shape("multi_head_object_aoa", format!("X {other:?}"))),
    };
    if tape.shape(pair_emb)[0] != seq * seq {
        return Err(TensorError::shape(
            "multi_head_object_aoa",
            format!("{} pair rows for {seq} regions", tape.shape(pair_emb)[0]),
        ));
    }
    let n_heads = tape.shape(p.w_geo)[1];
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(TensorError::shape(
            "multi_head_object_aoa",
            format!("d_model {d_model} not divisible by {n_heads} heads"),
        ));
    }
    let d_head = d_model / n_heads;
    let q = project(tape, x, p.wq, p.bq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = project(tape, x, p.wv, p.bv)?;
    let geo = geometric_weights_on(tape, pair_emb, p.w_geo, seq)?;
    let mut heads = Vec::with_capacity(n_heads);
    for (h, &omega_w) in geo.iter().enumerate() {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let omega_a = scaled_dot_scores_on(tape, qh, kh)?;
        let omega = combined_scores_on(tape, omega_a, omega_w)?;
        heads.push(object_attention_on(tape, omega, vh, None)?);
    }
    let concat = tape.concat_cols(&heads)?;
    match &p.output {
        OutputVars::Aoa(a) => aoa_gate_on(tape, x, concat, a),
        OutputVars::Projection { w, b } => project(tape, concat, *w, *b),
    }
}

/// `Ω_W` as a `[n_heads, seq, seq]` tensor.
pub fn geometric_weights(boxes: &[BoundingBox], w_geo: &Tensor, cfg: &GeometryConfig) -> Result<Tensor> {
    if boxes.is_empty() {
        return Err(TensorError::shape("geometric_weights", "no boxes"));
    }
    let s = boxes.len();
    let mut tape = Tape::new();
    let e = tape.constant(pair_embeddings(boxes, cfg));
    let w = tape.constant(w_geo.clone());
    let heads = geometric_weights_on(&mut tape, e, w, s)?;
    let mut data = Vec::with_capacity(heads.len() * s * s);
    for h in &heads {
        data.extend_from_slice(tape.value(*h).data());
    }
    Tensor::new(vec![heads.len(), s, s], data)
}

/// `Q Kᵀ / √d_head` for `[seq, d_head]` inputs.
pub fn scaled_dot_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let s = scaled_dot_scores_on(&mut tape, qv, kv)?;
    Ok(tape.value(s).clone())
}

/// `Ω_A ∘ exp(Ω_W)` for score tensors of any equal shape.
pub fn combined_scores(omega_a: &Tensor, omega_w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, w) = (tape.constant(omega_a.clone()), tape.constant(omega_w.clone()));
    let o = combined_scores_on(&mut tape, a, w)?;
    Ok(tape.value(o).clone())
}

/// `softmax(Ω) V`; leading axes of `Ω` and `V` are per-head batch axes.
pub fn object_attention(omega: &Tensor, v: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (o, vv) = (tape.constant(omega.clone()), tape.constant(v.clone()));
    let out = object_attention_on(&mut tape, o, vv, mask)?;
    Ok(tape.value(out).clone())
}

/// The AoA gate applied to `[seq, d_model]` inputs.
pub fn aoa_gate(q_in: &Tensor, attended: &Tensor, p: &AoaParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(q_in.clone());
    let a = tape.constant(attended.clone());
    let vars = AoaVars {
        w_q_gate: tape.constant(p.w_q_gate.clone()),
        w_v_gate: tape.constant(p.w_v_gate.clone()),
        b_gate: tape.constant(p.b_gate.clone()),
        w_q_info: tape.constant(p.w_q_info.clone()),
        w_v_info: tape.constant(p.w_v_info.clone()),
        b_info: tape.constant(p.b_info.clone()),
    };
    let out = aoa_gate_on(&mut tape, x, a, &vars)?;
    Ok(tape.value(out).clone())
}

/// Full geometric attention block on values. `aoa_enabled` must agree with
/// the output stage carried by `params`.
pub fn multi_head_object_aoa(
    x: &Tensor,
    boxes: &[BoundingBox],
    params: &AttentionParams,
    cfg: &GeometryConfig,
    aoa_enabled: bool,
) -> crate::Result<Tensor> {
    if params.aoa_enabled() != aoa_enabled {
        return Err(Error::Config(format!(
            "aoa_enabled = {aoa_enabled} but parameters carry {}",
            if params.aoa_enabled() { "an AoA gate" } else { "an output projection" }
        )));
    }
    if x.rank() != 2 || x.shape()[0] != boxes.len() {
        return Err(TensorError::shape(
            "multi_head_object_aoa",
            format!("X {:?} with {} boxes", x.shape(), boxes.len()),
        )
        .into());
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let e = tape.constant(pair_embeddings(boxes, cfg));
    let vars = params.to_vars(&mut tape, false);
    let out = multi_head_object_aoa_on(&mut tape, xv, e, &vars)?;
    Ok(tape.value(out).clone())
}
