use super::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Autodiff and central-difference derivatives for every parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradComparison {
    /// `f` at the unperturbed parameters.
    pub value: f64,
    /// Per parameter, `(analytic, numeric)` per entry.
    pub entries: Vec<Vec<(f64, f64)>>,
}

impl GradComparison {
    pub fn report(&self, tol: f64) -> GradCheckReport {
        let per_param: Vec<f64> = self
            .entries
            .iter()
            .map(|e| e.iter().map(|&(a, n)| relative_error(a, n)).fold(0.0, f64::max))
            .collect();
        let max_rel_err = per_param.iter().copied().fold(0.0, f64::max);
        GradCheckReport {
            per_param,
            max_rel_err,
            tol,
        }
    }
}

/// Evaluates the gradients of the scalar function `f` with respect to
/// `params` both ways.
///
/// `f` receives a fresh tape and one variable per parameter. Each entry is
/// perturbed by `±h` and the central difference `(f(p+h) - f(p-h)) / 2h`
/// is paired with the autodiff gradient.
pub fn finite_diff_compare<F>(f: F, params: &[Tensor], h: f64) -> Result<GradComparison>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = {
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        v.data()[0]
    };
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut pairs = Vec::with_capacity(grad.len());
        for (i, &a) in grad.iter().enumerate() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work[pi].data_mut()[i] = orig;
            pairs.push((a, (plus - minus) / (2.0 * h)));
        }
        entries.push(pairs);
    }
    Ok(GradComparison { value, entries })
}

/// [`finite_diff_compare`] reduced to the max relative error per parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_compare(f, params, h)?.report(tol))
}
