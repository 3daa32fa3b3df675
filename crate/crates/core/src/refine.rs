//! Iterative-refinement ratios `‖f_i(x_i)‖ / ‖x_i‖` and their entangled
//! counterparts `‖f_i(x_i)‖ / ‖x_i Γ‖`, with the bound pair
//!
//! ```text
//! (‖f‖ / (‖Γ‖₂ ‖x‖))²  ≤  (‖f‖ / ‖xΓ‖)²  ≤  (‖f‖ / ((1 - γ) ‖x‖))²
//! ```
//!
//! The upper bound rests on `‖xΓ‖ ≥ (1 - γ)‖x‖`, which holds for the dense,
//! orthogonal and 1x1 channel operators but not for wider conv kernels (their
//! frequency response dips below `1 - γ`); traces still report it there.

use std::fmt::Write as _;

use serde::Serialize;

use crate::autodiff::{conv_operator_norm, Graph};
use crate::blocks::{BlockKind, BlockParams};
use crate::entangle::Entangler;
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Denominators below this leave a ratio undefined.
pub const RATIO_EPS: f64 = 1e-12;

pub const TRACE_HEADER: &str =
    "block_index,x_norm,f_norm,gamma_x_norm,plain_ratio,entangled_ratio,lower_bound,upper_bound,gamma";

/// One block's refinement quantities for one forward pass. Norms are batch
/// means of per-sample norms; `None` marks an undefined ratio or bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementTrace {
    pub block_index: usize,
    pub x_norm: f64,
    pub f_norm: f64,
    pub gamma_x_norm: f64,
    pub plain_ratio: Option<f64>,
    pub entangled_ratio: Option<f64>,
    pub lower_bound: Option<f64>,
    /// `+∞` when `γ = 1`.
    pub upper_bound: Option<f64>,
    pub gamma: f64,
    pub spectral_norm_gamma: f64,
    pub per_sample_plain: Vec<Option<f64>>,
    pub per_sample_entangled: Vec<Option<f64>>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den >= RATIO_EPS).then(|| num / den)
}

/// `(f² / (‖Γ‖₂² x²), f² / ((1 - γ)² x²))`; the upper bound is `+∞` at `γ = 1`.
pub fn lemma1_bounds(f_norm: f64, x_norm: f64, gamma: f64, spectral_norm_gamma: f64) -> Result<(f64, f64)> {
    if !(x_norm > 0.0 && x_norm.is_finite()) {
        return Err(Error::InvalidArgument(format!("x_norm must be positive, got {x_norm}")));
    }
    if !(f_norm >= 0.0 && f_norm.is_finite()) {
        return Err(Error::InvalidArgument(format!("f_norm must be non-negative, got {f_norm}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    if !(spectral_norm_gamma > 0.0 && spectral_norm_gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spectral norm must be positive, got {spectral_norm_gamma}"
        )));
    }
    let f2 = f_norm * f_norm;
    let x2 = x_norm * x_norm;
    let lower = f2 / (spectral_norm_gamma * spectral_norm_gamma * x2);
    let upper = if gamma == 1.0 {
        f64::INFINITY
    } else {
        f2 / ((1.0 - gamma) * (1.0 - gamma) * x2)
    };
    Ok((lower, upper))
}

/// `‖Γ‖₂` of a block's skip operator on features of the given shape. 1x1
/// kernels use their channel matrix; wider kernels are estimated on the full
/// operator with circular padding.
pub fn skip_spectral_norm(block: &BlockParams, feature_shape: &[usize]) -> Result<f64> {
    Ok(match block.entangler() {
        Entangler::Identity => 1.0,
        Entangler::Zero => 0.0,
        Entangler::Matrix(m) => linalg::spectral_norm(m, 10_000, 1e-15),
        Entangler::Kernel2d(k) if k.kernel_size() == 1 => linalg::spectral_norm(&k.channel_matrix()?, 10_000, 1e-15),
        Entangler::Kernel2d(k) => {
            let r = feature_shape.len();
            if r < 3 {
                return Err(Error::InvalidArgument("conv skip needs [.., h, w, c] features".into()));
            }
            conv_operator_norm(k, feature_shape[r - 3], feature_shape[r - 2])?
        }
        Entangler::Kernel1d(_) => {
            return Err(Error::Unsupported("refinement traces cover residual blocks only".into()))
        }
    })
}

fn sample_count(kind: BlockKind, x: &Tensor) -> usize {
    match (kind, x.rank()) {
        (BlockKind::MlpResidual, 1) | (BlockKind::ConvResidual, 3) => 1,
        _ => x.shape()[0],
    }
}

fn sample_norms(t: &Tensor, samples: usize) -> Vec<f64> {
    let per = t.len() / samples;
    t.data().chunks(per).map(linalg::l2_norm).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs `x_{i+1} = f_i(x_i) + skip_i(x_i)` through mlp or conv residual blocks
/// and records every block's refinement quantities.
pub fn trace_refinement(blocks: &[BlockParams], batch: &Tensor) -> Result<Vec<RefinementTrace>> {
    let mut x = batch.clone();
    let mut out = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        if !matches!(block.kind(), BlockKind::MlpResidual | BlockKind::ConvResidual) {
            return Err(Error::Unsupported(format!("refinement trace of a {} block", block.kind())));
        }
        let mut g = Graph::new();
        let bb = block.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let f = bb.branch(&mut g, xi)?;
        let s = bb.entangle(&mut g, xi)?;
        let y = g.add(f, s)?;

        let samples = sample_count(block.kind(), &x);
        let xs = sample_norms(&x, samples);
        let fs = sample_norms(g.value(f), samples);
        let ss = sample_norms(g.value(s), samples);
        let (x_norm, f_norm, gamma_x_norm) = (mean(&xs), mean(&fs), mean(&ss));
        let gamma = block.entanglement().effective_gamma();
        let spectral = skip_spectral_norm(block, x.shape())?;

        let bounds = if x_norm >= RATIO_EPS && spectral >= RATIO_EPS {
            Some(lemma1_bounds(f_norm, x_norm, gamma, spectral)?)
        } else {
            None
        };
        let upper = if x_norm >= RATIO_EPS {
            Some(if gamma == 1.0 {
                f64::INFINITY
            } else {
                (f_norm / ((1.0 - gamma) * x_norm)).powi(2)
            })
        } else {
            None
        };
        out.push(RefinementTrace {
            block_index: i,
            x_norm,
            f_norm,
            gamma_x_norm,
            plain_ratio: ratio(f_norm, x_norm),
            entangled_ratio: ratio(f_norm, gamma_x_norm),
            lower_bound: bounds.map(|b| b.0),
            upper_bound: bounds.map(|b| b.1).or(upper),
            gamma,
            spectral_norm_gamma: spectral,
            per_sample_plain: fs.iter().zip(&xs).map(|(f, x)| ratio(*f, *x)).collect(),
            per_sample_entangled: fs.iter().zip(&ss).map(|(f, s)| ratio(*f, *s)).collect(),
        });
        x = g.value(y).clone();
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) => v.to_string(),
    }
}

fn trace_row(t: &RefinementTrace) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        t.block_index,
        t.x_norm,
        t.f_norm,
        t.gamma_x_norm,
        cell(t.plain_ratio),
        cell(t.entangled_ratio),
        cell(t.lower_bound),
        cell(t.upper_bound),
        t.gamma
    )
}

/// Trace export: one row per block, `NA` for undefined ratios and bounds.
pub fn trace_csv(traces: &[RefinementTrace]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for t in traces {
        s.push_str(&trace_row(t));
        s.push('\n');
    }
    s
}

/// Per-block traces gathered across labelled checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefinementReport {
    pub rows: Vec<(String, RefinementTrace)>,
}

impl RefinementReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("checkpoint,{TRACE_HEADER}\n");
        for (label, t) in &self.rows {
            let _ = writeln!(s, "{label},{}", trace_row(t));
        }
        s
    }

    pub fn plain_ratios(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|(_, t)| t.plain_ratio).collect()
    }
}

pub fn refinement_report(traces: &[(String, Vec<RefinementTrace>)]) -> RefinementReport {
    RefinementReport {
        rows: traces
            .iter()
            .flat_map(|(label, ts)| ts.iter().map(move |t| (label.clone(), t.clone())))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entangle::{EntanglementKind, EntanglementSpec};
    use crate::rng::SeededRng;

    #[test]
    fn bound_examples() {
        let (lo, hi) = lemma1_bounds(0.2, 2.0, 0.1, 1.0).unwrap();
        assert!((lo - 0.01).abs() < 1e-15);
        assert!((hi - 0.04 / (0.81 * 4.0)).abs() < 1e-15);
        assert!((hi - 0.012346).abs() < 1e-6);
        let (lo, hi) = lemma1_bounds(0.3, 1.5, 0.0, 1.0).unwrap();
        assert_eq!(lo, hi);
        assert!((lo - 0.04).abs() < 1e-15);
        assert_eq!(lemma1_bounds(0.0, 3.0, 0.5, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(lemma1_bounds(0.1, 1.0, 1.0, 1.0).unwrap().1, f64::INFINITY);
        assert!(lemma1_bounds(0.1, 0.0, 0.5, 1.0).is_err());
        assert!(lemma1_bounds(0.1, 1.0, 1.5, 1.0).is_err());
    }

    #[test]
    fn upper_bound_strictly_increases_in_gamma() {
        let mut prev = 0.0;
        for i in 0..100 {
            let (_, hi) = lemma1_bounds(0.3, 1.7, i as f64 / 100.0, 1.0).unwrap();
            assert!(hi > prev);
            prev = hi;
        }
    }

    fn zero_model(n: usize, spec: &EntanglementSpec) -> Vec<BlockParams> {
        let mut rng = SeededRng::new(1);
        (0..n)
            .map(|_| {
                let mut b = BlockParams::mlp_residual(4, 4, spec, &mut rng).unwrap();
                for (_, d) in b.param_data_mut() {
                    d.fill(0.0);
                }
                b
            })
            .collect()
    }

    #[test]
    fn zero_branch_has_zero_plain_ratio() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let traces = trace_refinement(&zero_model(3, &EntanglementSpec::dense(4, 0.3)), &x).unwrap();
        assert_eq!(traces.len(), 3);
        assert!(traces.iter().all(|t| t.plain_ratio == Some(0.0)));

        let report = refinement_report(&[("0".into(), traces.clone()), ("1".into(), traces)]);
        assert_eq!(report.rows.len(), 6);
        assert!(report.plain_ratios().iter().all(|r| *r == Some(0.0)));
    }

    #[test]
    fn gamma_zero_ratios_coincide() {
        let mut rng = SeededRng::new(3);
        let spec = EntanglementSpec::dense(4, 0.0);
        let blocks: Vec<_> = (0..4).map(|_| BlockParams::mlp_residual(4, 6, &spec, &mut rng).unwrap()).collect();
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        for t in trace_refinement(&blocks, &x).unwrap() {
            assert_eq!(t.plain_ratio, t.entangled_ratio);
            let r2 = t.plain_ratio.unwrap().powi(2);
            assert!((t.lower_bound.unwrap() - r2).abs() <= 1e-12 * r2.max(1.0));
            assert!((t.upper_bound.unwrap() - r2).abs() <= 1e-12 * r2.max(1.0));
        }
    }

    #[test]
    fn random_model_sits_inside_the_sandwich() {
        let mut rng = SeededRng::new(4);
        let spec = EntanglementSpec::dense(6, 0.1);
        let blocks: Vec<_> = (0..4).map(|_| BlockParams::mlp_residual(6, 6, &spec, &mut rng).unwrap()).collect();
        let x = Tensor::randn(&[10, 6], 1.0, &mut rng);
        for t in trace_refinement(&blocks, &x).unwrap() {
            let e2 = t.entangled_ratio.unwrap().powi(2);
            assert!(t.lower_bound.unwrap() <= e2 + 1e-12);
            assert!(e2 <= t.upper_bound.unwrap() + 1e-12);
            assert_eq!(t.per_sample_plain.len(), 10);
        }
    }

    #[test]
    fn none_skip_flags_undefined_ratio() {
        let mut rng = SeededRng::new(5);
        let blocks = vec![BlockParams::mlp_residual(3, 3, &EntanglementSpec::none(), &mut rng).unwrap()];
        let t = &trace_refinement(&blocks, &Tensor::randn(&[2, 3], 1.0, &mut rng)).unwrap()[0];
        assert_eq!(t.entangled_ratio, None);
        assert_eq!(t.lower_bound, None);
        assert_eq!(t.upper_bound, Some(f64::INFINITY));
        let csv = trace_csv(std::slice::from_ref(t));
        assert!(csv.starts_with(TRACE_HEADER));
        assert!(csv.lines().nth(1).unwrap().contains(",NA,NA,inf,1"));
    }

    #[test]
    fn conv_trace_uses_operator_norm() {
        let mut rng = SeededRng::new(6);
        let spec = EntanglementSpec::conv(EntanglementKind::Spatial, 3, 2, 0.5);
        let blocks = vec![BlockParams::conv_residual(2, &spec, &mut rng).unwrap()];
        let t = &trace_refinement(&blocks, &Tensor::randn(&[2, 6, 6, 2], 1.0, &mut rng)).unwrap()[0];
        assert!((t.spectral_norm_gamma - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encoder_blocks_are_unsupported() {
        let mut rng = SeededRng::new(7);
        let b = BlockParams::transformer_encoder(2, &EntanglementSpec::identity(), &mut rng).unwrap();
        assert!(matches!(
            trace_refinement(&[b], &Tensor::zeros(&[3, 2])),
            Err(Error::Unsupported(_))
        ));
    }
}
