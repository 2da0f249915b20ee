//! Finite-difference verification of the tape.
//!
//! Runs in f64: the model code is generic over the scalar, so the same
//! forward functions that train in f32 are instantiated here at double
//! precision, where central differences with h = 1e-5 resolve gradients
//! to ~1e-10.

use super::store::ParamStore;
use super::tensor::{no_grad, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over parameters of |g_analytic - g_fd| / max(1, |g_a|, |g_fd|)
    pub max_rel_err: f64,
    /// Parameter and flat index where the max occurred.
    pub worst: Option<(String, usize)>,
    pub params_checked: usize,
}

/// Compare the tape's gradient of a scalar-valued function against central
/// finite differences for every trainable parameter in the store.
pub fn grad_check(
    store: &ParamStore<f64>,
    f: impl Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
    h: f64,
) -> Result<GradCheckReport> {
    store.clear_grads();
    let loss = f(store)?;
    if loss.len() != 1 {
        return Err(Error::Shape(format!("grad_check: loss dims {:?}", loss.dims())));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    loss.backward();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, params_checked: 0 };
    for name in store.trainable_names() {
        // Snapshot the analytic gradient before the tensor gets swapped by
        // the perturbation updates below.
        let tensor = store.get(&name)?;
        let analytic = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.len()]);
        let dims = tensor.dims().to_vec();
        let base = tensor.data().to_vec();
        report.params_checked += 1;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            store.update(&name, dims.clone(), plus);
            let lp = no_grad(|| f(store))?.item();
            let mut minus = base.clone();
            minus[i] -= h;
            store.update(&name, dims.clone(), minus);
            let lm = no_grad(|| f(store))?.item();
            store.update(&name, dims.clone(), base.clone());
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite loss while perturbing {name}[{i}]"
                )));
            }
            let fd = (lp - lm) / (2.0 * h);
            let ga = analytic[i];
            if !ga.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite analytic gradient at {name}[{i}]"
                )));
            }
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    store.clear_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{mul, sum_all};

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", vec![3], vec![1.0, -2.0, 0.5]);
        // analytic gradient of sum(p) is exactly ones
        let p = store.get("p").unwrap();
        sum_all(&p).backward();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        store.clear_grads();
        // finite differences agree to rounding noise
        let report = grad_check(&store, |s| Ok(sum_all(&s.get("p")?)), 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-10, "rel err {}", report.max_rel_err);
        assert_eq!(report.params_checked, 1);
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", vec![2], vec![1.0, 2.0]);
        // capture the analytic gradient on the side to check 2p
        let p = store.get("p").unwrap();
        let loss = sum_all(&mul(&p, &p).unwrap());
        loss.backward();
        assert_eq!(p.grad().unwrap(), vec![2.0, 4.0]);
        store.clear_grads();
        let report =
            grad_check(&store, |s| Ok(sum_all(&mul(&s.get("p")?, &s.get("p")?)?)), 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", vec![2], vec![1.0, 2.0]);
        store.insert("b", vec![2], vec![3.0, 4.0]);
        store.set_frozen("b", true);
        let report = grad_check(
            &store,
            |s| {
                let prod = mul(&s.get("a")?, &s.get("b")?)?;
                Ok(sum_all(&prod))
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.params_checked, 1);
        assert!(report.max_rel_err <= 1e-9);
    }
}
