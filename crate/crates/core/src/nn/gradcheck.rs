//! Central finite-difference gradient checking.

use rand::seq::index;

use super::params::ParameterStore;
use super::tape::Gradients;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Tensors larger than this are checked on a random coordinate subset of
    /// this size.
    pub max_coords_per_tensor: usize,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            max_coords_per_tensor: 64,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `f` around `params`.
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(
    params: &ParameterStore,
    analytic: &Gradients,
    options: GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let eps = options.epsilon;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for (t, name) in names.iter().enumerate() {
        let Some(grad) = analytic.get(name) else {
            continue;
        };
        let len = params.get(name).expect("listed").len();
        let coords: Vec<usize> = if len > options.max_coords_per_tensor {
            let mut r = rng::stream(options.seed, "grad-check", t as u64);
            let mut picked = index::sample(&mut r, len, options.max_coords_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..len).collect()
        };
        for i in coords {
            let original = params.get(name).expect("listed").as_slice().expect("contiguous")[i];
            let set = |probe: &mut ParameterStore, v: f64| {
                probe
                    .get_mut(name)
                    .expect("listed")
                    .as_slice_mut()
                    .expect("contiguous")[i] = v;
            };
            set(&mut probe, original + eps);
            let plus = f(&probe)?;
            set(&mut probe, original - eps);
            let minus = f(&probe)?;
            set(&mut probe, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite function value while perturbing `{name}`[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice().expect("contiguous")[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Graph;
    use ndarray::array;

    fn quadratic(store: &ParameterStore) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let w = g.param(store, "w")?;
        let sq = g.mul(w, w)?;
        let loss = g.sum_all(sq);
        Ok((g.scalar(loss), g.backward(loss)?))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParameterStore::new();
        store.insert("w", array![[1.0, 2.0, 3.0]]);
        let (_, grads) = quadratic(&store).unwrap();
        let report = grad_check(&store, &grads, GradCheckOptions::default(), |p| {
            Ok(quadratic(p)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_detected() {
        let mut store = ParameterStore::new();
        store.insert("w", array![[1.0, 2.0, 3.0]]);
        let (_, mut grads) = quadratic(&store).unwrap();
        grads.get_mut("w").unwrap()[[0, 1]] *= 2.0;
        let report = grad_check(&store, &grads, GradCheckOptions::default(), |p| {
            Ok(quadratic(p)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn non_finite_value_is_error() {
        let mut store = ParameterStore::new();
        store.insert("w", array![[1.0]]);
        let grads: Gradients = [("w".to_string(), array![[0.0]])].into();
        let err = grad_check(&store, &grads, GradCheckOptions::default(), |_| Ok(f64::NAN));
        assert!(matches!(err, Err(Error::Numerical(_))));
    }
}
