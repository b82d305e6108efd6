//! Finite-difference gradient verification.
//!
//! Compares tape gradients of a scalar loss against central differences,
//! parameter element by parameter element. The loss builder is evaluated
//! twice up front; if the two values differ by a single bit the check aborts,
//! because a nondeterministic loss (unseeded dropout, time-dependent input)
//! makes finite differences meaningless.

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamStore, Tape};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Worst relative error seen for one parameter tensor, with the offending
/// element's analytic and numeric derivatives for diagnosis.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_element: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

fn eval_loss<B>(store: &ParamStore<f64>, build: &mut B) -> Result<f64>
where
    B: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Numeric("gradient check loss must be scalar".into()));
    }
    Ok(v.item())
}

/// Check analytic gradients of `build`'s loss for every element of every
/// parameter in `store`, using central differences with step `epsilon`.
///
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// Parameter values are restored exactly and gradients are cleared on return.
pub fn grad_check<B>(
    store: &mut ParamStore<f64>,
    epsilon: f64,
    tolerance: f64,
    mut build: B,
) -> Result<GradCheckReport>
where
    B: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config("gradient check epsilon must be positive".into()));
    }

    let first = eval_loss(store, &mut build)?;
    let second = eval_loss(store, &mut build)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Numeric(format!(
            "loss is not deterministic: {first:?} vs {second:?}"
        )));
    }

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| store.grad(id).data().to_vec())
        .collect();

    let ids: Vec<_> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel_err = 0.0f64;
    for (pi, &id) in ids.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_at = (0usize, 0.0f64, 0.0f64);
        for e in 0..store.value(id).len() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + epsilon;
            let plus = eval_loss(store, &mut build)?;
            store.value_mut(id).data_mut()[e] = orig - epsilon;
            let minus = eval_loss(store, &mut build)?;
            store.value_mut(id).data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if !rel.is_finite() {
                worst = f64::INFINITY;
                worst_at = (e, a, numeric);
                break;
            }
            if rel > worst {
                worst = rel;
                worst_at = (e, a, numeric);
            }
        }
        if worst > max_rel_err {
            max_rel_err = worst;
        }
        per_param.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: worst,
            worst_element: worst_at.0,
            worst_analytic: worst_at.1,
            worst_numeric: worst_at.2,
        });
    }

    store.zero_grads();
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn passes_on_a_correct_composite_gradient() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::new(2, 3, vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.7]).unwrap())
            .unwrap();
        let b = store
            .register("b", Tensor::row(vec![0.05, -0.02, 0.3]))
            .unwrap();
        let report = grad_check(&mut store, DEFAULT_EPSILON, 1e-6, |tape, store| {
            let wr = tape.param(store, w)?;
            let br = tape.param(store, b)?;
            let x = tape.leaf(Tensor::row(vec![0.8, -0.6]))?;
            let h = tape.matmul(x, wr)?;
            let z = tape.add(h, br)?;
            let t = tape.tanh(z)?;
            let p = tape.log_softmax(t)?;
            let picked = tape.slice(p, 1, 1)?;
            tape.scale(picked, -1.0)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.per_param.len(), 2);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // Calls 1-2 are the determinism guard, call 3 records the analytic
        // backward, calls 4+ are finite-difference probes. Doubling the loss
        // only for the probes makes the analytic gradient half the numeric
        // one, which the report must flag.
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::row(vec![0.5, -0.25])).unwrap();
        let mut calls = 0;
        let report = grad_check(&mut store, DEFAULT_EPSILON, 1e-6, move |tape, store| {
            calls += 1;
            let c = if calls <= 3 { 1.0 } else { 2.0 };
            let pr = tape.param(store, p)?;
            let s = tape.sum(pr)?;
            tape.scale(s, c)
        })
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.3);
    }

    #[test]
    fn rejects_nondeterministic_loss() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::scalar(1.0)).unwrap();
        let mut calls = 0;
        let result = grad_check(&mut store, DEFAULT_EPSILON, 1e-6, move |tape, store| {
            calls += 1;
            let pr = tape.param(store, p)?;
            let s = tape.sum(pr)?;
            tape.scale(s, calls as f64)
        });
        assert!(matches!(result, Err(Error::Numeric(_))));
    }

    #[test]
    fn restores_parameter_values_exactly() {
        let mut store = ParamStore::new();
        let vals = vec![0.123456789f64, -0.987654321, 3.5e-7];
        let p = store.register("p", Tensor::row(vals.clone())).unwrap();
        grad_check(&mut store, DEFAULT_EPSILON, 1e-6, |tape, store| {
            let pr = tape.param(store, p)?;
            let sq = tape.mul(pr, pr)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(store.value(p).bits_eq(&Tensor::row(vals)));
        assert_eq!(store.grad(p).data(), &[0.0, 0.0, 0.0]);
    }
}
