//! Central finite-difference check of tape gradients.

use super::graph::{Graph, Var};
use super::params::{ParamStore, ParamVars};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Denominator floor of the relative error, so coordinates whose true gradient is zero are
/// judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the backward-pass gradient of `loss` with central differences
/// `(L(p + eps) - L(p - eps)) / 2 eps` for every coordinate, or for at most
/// `max_coords_per_tensor` evenly spaced coordinates of each tensor.
///
/// `loss` must be deterministic: it is rebuilt on a fresh graph for every evaluation.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    epsilon: f64,
    max_coords_per_tensor: Option<usize>,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &ParamVars) -> Var,
{
    let eval = |store: &ParamStore<f64>| {
        let g = Graph::new();
        let vars = store.register(&g);
        let out = loss(&g, &vars);
        g.scalar(out)
    };

    let g = Graph::new();
    let vars = params.register(&g);
    let out = loss(&g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = match max_coords_per_tensor {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let analytic = grads.get(vars[id]);
        for i in (0..n).step_by(stride) {
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Init, ParamLayout, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut layout = ParamLayout::new();
        layout.declare("p", 3, 4, Init::FanInUniform { fan_in: 1 });
        let store: ParamStore<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(1));
        let report = grad_check(&store, 1e-3, None, |g, p| {
            let sq = g.square(p.vars()[0]);
            let s = g.sum(sq);
            g.scale(s, 0.5)
        });
        assert_eq!(report.checked, 12);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at an exact kink: the tape picks the zero subgradient, differences see 1/2
        let mut store = ParamStore::new();
        store.push("x".into(), Tensor::from_vec(1, 1, vec![0.0]).unwrap());
        let report = grad_check(&store, 1e-4, None, |g, p| {
            let r = g.relu(p.vars()[0]);
            g.sum(r)
        });
        assert!(report.max_rel_error > 0.4);
        assert_eq!(report.worst, Some(("x".to_string(), 0)));
    }
}
