use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(param, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

/// Maximum over every parameter entry of
/// `|analytic − central| / max(1, |analytic|, |central|)`.
///
/// `f` must rebuild the computation from scratch on the tape it is handed;
/// it is called once for the analytic pass and twice per entry.
pub fn grad_check<F, E>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck, E>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    grad_check_sampled(f, params, eps, usize::MAX)
}

/// Like [`grad_check`] but visits at most `max_per_param` evenly strided
/// entries of each parameter.
pub fn grad_check_sampled<F, E>(f: F, params: &[Tensor], eps: f64, max_per_param: usize) -> Result<GradCheck, E>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(&p.clone().with_grad())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64, E> {
        let t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p)).collect();
        let l = f(&t, &vs)?;
        let value = t.scalar(l);
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" }.into());
        }
        Ok(value)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        entries: 0,
    };
    for p in 0..work.len() {
        let n = work[p].len();
        let step = n.div_ceil(max_per_param.min(n)).max(1);
        for i in (0..n).step_by(step) {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p][i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, i);
            }
        }
    }
    Ok(report)
}
