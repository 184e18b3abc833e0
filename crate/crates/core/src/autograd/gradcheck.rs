use rand::{Rng, SeedableRng};

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinates whose analytic and numeric gradients are both below this
/// magnitude are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random projection so
/// every output element contributes.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut reduce = |out: Var<f64>| -> Result<Var<f64>> {
        if out.value().numel() == 1 {
            return out.reshape(vec![1]);
        }
        let w = weights.get_or_insert_with(|| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
            Tensor::from_fn(out.shape().to_vec(), |_| rng.random_range(0.5..1.5))
        });
        if w.shape() != out.shape() {
            return Err(Error::Contract("grad_check output shape changed between calls".into()));
        }
        Ok(out.mul(&Var::constant(w.clone()))?.sum())
    };

    let leaf = Var::leaf(x.clone());
    let loss = reduce(f(&leaf)?)?;
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = reduce(f(&Var::constant(probe.clone()))?)?.value().item();
        probe.data_mut()[i] = orig - h;
        let minus = reduce(f(&Var::constant(probe.clone()))?)?.value().item();
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > report.max_rel_err || !err.is_finite() {
            report = GradCheckReport {
                max_rel_err: if err.is_finite() { err } else { f64::INFINITY },
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// `sum(x²)` with a deliberately wrong backward rule (`x` instead of `2x`),
/// used as a negative control for the checker.
pub fn faulty_square_sum(x: &Var<f64>) -> Var<f64> {
    let value = Tensor::scalar(x.value().data().iter().map(|v| v * v).sum());
    Var::from_op(
        "faulty_square_sum",
        value,
        &[x],
        Box::new(|g, p, _| vec![Some(p[0].map(|v| v * g.item()))]),
    )
}
