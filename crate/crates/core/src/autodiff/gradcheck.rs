//! Central-difference gradient checking.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum relative error between reverse-mode gradients and central
/// differences `(f(x + eps e) - f(x - eps e)) / 2 eps`, over every coordinate
/// of every input. Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
///
/// `build` receives one leaf per input (all differentiable) and must return a
/// scalar node.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    grad_check_detailed(build, inputs, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_detailed<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, inputs[which].shape());
        for idx in 0..inputs[which].len() {
            let orig = inputs[which].data()[idx];
            work[which].data_mut()[idx] = orig + eps;
            let fp = eval(&work)?;
            work[which].data_mut()[idx] = orig - eps;
            let fm = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (which, idx),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn quadratic_scalar_is_exact() {
        let x = Tensor::scalar(3.0);
        let report = grad_check_detailed(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.analytic, 6.0);
        assert!((report.numeric - 6.0).abs() < 1e-9);
    }

    #[test]
    fn squared_norm_is_tight() {
        let mut rng = SeededRng::new(8);
        let x = Tensor::randn(&[10], 1.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let r = grad_check(|g, ids| Ok(g.sum(ids[0])), &[Tensor::scalar(1.0)], 1e-2);
        assert!(r.is_err());
    }
}
