//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Default denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-12;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

/// `|a − n| / max(|a|, |n|, floor)`. A floor near the finite-difference
/// resolution keeps rounding noise on vanishing gradients from dominating.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of the scalar built by `f` with central
/// differences over every element of every tensor in `params`.
///
/// `f` receives a fresh graph and the parameter nodes and must return a
/// scalar node. It must be deterministic; a second evaluation at the same
/// point that disagrees with the first is reported as a usage error.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    finite_difference_check_sampled(f, params, eps, usize::MAX)
}

/// As [`finite_difference_check_sampled`] with a custom relative-error floor.
pub fn finite_difference_check_floored<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    per_param: usize,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check_impl(f, params, eps, per_param, floor)
}

/// As [`finite_difference_check`], visiting at most `per_param` evenly
/// strided elements of each tensor.
pub fn finite_difference_check_sampled<F>(f: F, params: &[Tensor], eps: f64, per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    check_impl(f, params, eps, per_param, REL_FLOOR)
}

fn check_impl<F>(f: F, params: &[Tensor], eps: f64, per_param: usize, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &ids)?;
        Ok(g.value(root).data()[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    let base = g.value(root).data()[0];
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::Usage("function under check is not deterministic".into()));
    }
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.tensor(*id);
        let n = params[pi].len();
        let step = n.div_ceil(per_param.min(n)).max(1);
        for ei in (0..n).step_by(step) {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[ei];
            let err = relative_error_floored(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let r = finite_difference_check(|g, p| Ok(g.sum(p[0])), &[x], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let x = Tensor::zeros(&[5]);
        let mut g = Graph::new();
        let p = g.param(x.clone());
        let s = g.sigmoid(p);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let r = finite_difference_check(
            |g, p| {
                let s = g.sigmoid(p[0]);
                Ok(g.sum(s))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn nondeterministic_function_is_flagged() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let r = finite_difference_check(
            |g, p| {
                calls.set(calls.get() + 1.0);
                let s = g.sum(p[0]);
                Ok(g.scale(s, calls.get()))
            },
            &[Tensor::ones(&[2])],
            1e-6,
        );
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(finite_difference_check(|g, p| Ok(g.sum(p[0])), &[Tensor::ones(&[1])], 0.0).is_err());
    }

    /// Truncation error dominates at large steps, round-off at tiny ones, so
    /// the error curve over eps has an interior minimum.
    #[test]
    fn eps_sweep_is_v_shaped() {
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let f = |g: &mut Graph, p: &[NodeId]| {
            let a = g.scale(p[0], 3.0);
            let s = g.sigmoid(a);
            let t = g.mul(s, s)?;
            Ok(g.sum(t))
        };
        let eps: Vec<f64> = (1..=12).map(|k| 10f64.powi(-k)).collect();
        let errs: Vec<f64> = eps
            .iter()
            .map(|&e| finite_difference_check(f, &[x.clone()], e).unwrap().max_rel_error)
            .collect();
        let best = errs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(best > 0 && best < errs.len() - 1, "errors {errs:?}");
        assert!(errs[0] > errs[best] * 100.0);
        assert!(errs[errs.len() - 1] > errs[best] * 100.0);
    }
}
