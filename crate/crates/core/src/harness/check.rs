//! Built-in invariant suite behind `entangle check`.
//!
//! Each criterion rebuilds the operators it inspects. With
//! [`CheckOptions::perturb`] set, every operator of that kind gets `+1e-6`
//! on its first entry before inspection, which the suite must catch.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{attention, grad_check, AttentionNodes, Graph, NodeId, Padding};
use crate::blocks::{BlockParams, LstmMode};
use crate::entangle::{
    make_dense_gamma, make_identity_kernel, make_kernel_2d, make_orthogonal_channel_kernel, make_orthogonal_gamma,
    make_seq_kernel, ConvKernel, EntanglementKind, EntanglementSpec,
};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::refine::lemma1_bounds;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const PERTURBATION: f64 = 1e-6;

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub perturb: Option<EntanglementKind>,
}

impl CheckOptions {
    fn matrix(&self, kind: EntanglementKind, m: DenseMatrix) -> DenseMatrix {
        if self.perturb != Some(kind) {
            return m;
        }
        let (r, c) = m.shape();
        let mut data = m.into_data();
        data[0] += PERTURBATION;
        DenseMatrix::new(r, c, data).expect("finite")
    }

    fn kernel(&self, kind: EntanglementKind, mut k: ConvKernel) -> ConvKernel {
        if self.perturb == Some(kind) {
            k.data_mut()[0] += PERTURBATION;
        }
        k
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const CRITERIA: [(usize, &str); 7] = [
    (1, "dense spectrum"),
    (2, "orthogonality"),
    (3, "identity reduction"),
    (4, "jacobian decomposition"),
    (5, "gradient correctness"),
    (6, "refinement sandwich"),
    (7, "kernel mass conservation"),
];

/// Outcome of one criterion: `Ok(detail)` on pass, `Err(detail)` on failure.
type Outcome = std::result::Result<String, String>;

pub fn run_criterion(id: usize, opts: &CheckOptions) -> Result<CheckResult> {
    let (_, name) = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("no criterion {id}")))?;
    let start = Instant::now();
    let outcome = match id {
        1 => dense_spectrum(opts),
        2 => orthogonality(opts),
        3 => identity_reduction(),
        4 => jacobian(),
        5 => gradients(),
        6 => sandwich(opts),
        _ => mass_conservation(opts),
    };
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Ok(CheckResult {
        id,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_checks(opts: &CheckOptions) -> Vec<CheckResult> {
    CRITERIA
        .iter()
        .map(|(id, _)| run_criterion(*id, opts).expect("known criterion"))
        .collect()
}

fn fail<T>(msg: impl Into<String>) -> std::result::Result<T, String> {
    Err(msg.into())
}

fn dense_spectrum(opts: &CheckOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [2, 8, 64] {
        for gamma in [0.0, 0.1, 0.5, 0.9, 1.0] {
            let m = make_dense_gamma(n, gamma).map_err(|e| e.to_string())?;
            let m = opts.matrix(EntanglementKind::Dense, m);
            let eig = linalg::eig_symmetric(&m).map_err(|e| format!("n={n} gamma={gamma}: {e}"))?;
            let mut want = vec![1.0 - gamma; n];
            want[0] = 1.0;
            let dev = eig.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(dev);
            if dev > 1e-9 {
                return fail(format!("n={n} gamma={gamma}: eigenvalue deviation {dev:.3e}"));
            }
        }
    }
    Ok(format!("max eigenvalue deviation {worst:.3e}"))
}

fn orthogonality(opts: &CheckOptions) -> Outcome {
    let mut worst_defect: f64 = 0.0;
    let mut worst_sv: f64 = 0.0;
    let mut inspect = |label: String, q: &DenseMatrix| -> std::result::Result<(), String> {
        let defect = q.orthogonality_defect();
        let sv = linalg::singular_values(q)
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        worst_defect = worst_defect.max(defect);
        worst_sv = worst_sv.max(sv);
        if defect > 1e-10 || sv > 1e-9 {
            return fail(format!("{label}: defect {defect:.3e}, singular value deviation {sv:.3e}"));
        }
        Ok(())
    };
    for n in [4, 64, 256] {
        for seed in 0..10 {
            let q = opts.matrix(EntanglementKind::Orthogonal, make_orthogonal_gamma(n, seed));
            inspect(format!("orthogonal n={n} seed={seed}"), &q)?;
        }
    }
    for c in [4, 16] {
        for seed in 0..10 {
            let k = make_orthogonal_channel_kernel(c, seed).map_err(|e| e.to_string())?;
            let k = opts.kernel(EntanglementKind::OrthogonalChannel, k);
            inspect(
                format!("orthogonal_channel c={c} seed={seed}"),
                &k.channel_matrix().map_err(|e| e.to_string())?,
            )?;
        }
    }
    Ok(format!("max defect {worst_defect:.3e}, max |s-1| {worst_sv:.3e}"))
}

/// `Σ out ⊙ r` so every output coordinate contributes to the gradient.
fn readout(g: &mut Graph, out: NodeId, r: &Tensor) -> Result<NodeId> {
    let w = g.constant(r.clone());
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Runs a block twice, entangled and vanilla, and returns the largest output
/// and gradient differences.
fn compare_to_vanilla(
    block: &BlockParams,
    inputs: &[Tensor],
    run: &BlockRun,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    let mut outs = Vec::new();
    let mut grads = Vec::new();
    let mut r = None;
    for vanilla in [false, true] {
        let mut g = Graph::new();
        let xs: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let ids: Vec<NodeId> = block.params().iter().map(|(_, t)| g.param(t.clone())).collect();
        let bb = block.bind_nodes(&mut g, ids.clone())?;
        let out = run(&bb, &mut g, &xs, vanilla)?;
        let weights = r.get_or_insert_with(|| Tensor::randn(g.shape(out), 1.0, rng)).clone();
        let loss = readout(&mut g, out, &weights)?;
        let gr = g.backward(loss)?;
        outs.push(g.value(out).clone());
        grads.push(
            xs.iter()
                .chain(&ids)
                .map(|id| gr.get_or_zeros(*id, g.shape(*id)))
                .collect::<Vec<_>>(),
        );
    }
    let fwd = outs[0].max_abs_diff(&outs[1]);
    let grad = grads[0]
        .iter()
        .zip(&grads[1])
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    Ok((fwd, grad))
}

type BlockRun = dyn Fn(&crate::blocks::BoundBlock, &mut Graph, &[NodeId], bool) -> Result<NodeId>;

fn residual_run(bb: &crate::blocks::BoundBlock, g: &mut Graph, xs: &[NodeId], vanilla: bool) -> Result<NodeId> {
    if vanilla {
        bb.standard_residual(g, xs[0])
    } else {
        Ok(bb.residual(g, xs[0])?.0)
    }
}

fn encoder_run(bb: &crate::blocks::BoundBlock, g: &mut Graph, xs: &[NodeId], vanilla: bool) -> Result<NodeId> {
    if vanilla {
        bb.vanilla_encoder(g, xs[0])
    } else {
        bb.encoder(g, xs[0])
    }
}

/// Three LSTM steps from state `(xs[0], xs[1])` over inputs `xs[2..]`;
/// returns the final hidden output.
fn lstm_run(bb: &crate::blocks::BoundBlock, g: &mut Graph, xs: &[NodeId], vanilla: bool) -> Result<NodeId> {
    let (mut c, mut h) = (xs[0], xs[1]);
    for &x in &xs[2..] {
        (c, h) = if vanilla {
            bb.standard_lstm(g, c, h, x)?
        } else {
            bb.lstm(g, c, h, x)?
        };
    }
    let both = g.concat_outer(&[c, h])?;
    Ok(both)
}

fn identity_reduction() -> Outcome {
    let mut rng = SeededRng::new(3);
    let mut worst = (0.0f64, 0.0f64);
    let k = EntanglementKind::Channel;
    type Inputs = Box<dyn Fn(&mut SeededRng) -> Vec<Tensor>>;
    let cases: Vec<(&str, BlockParams, Inputs, &BlockRun)> = {
        let r = &mut rng;
        let e = |e: crate::error::Error| e.to_string();
        vec![
            (
                "mlp identity",
                BlockParams::mlp_residual(5, 7, &EntanglementSpec::identity(), r).map_err(e)?,
                Box::new(|r| vec![Tensor::randn(&[3, 5], 1.0, r)]),
                &residual_run,
            ),
            (
                "mlp dense gamma=0",
                BlockParams::mlp_residual(5, 7, &EntanglementSpec::dense(5, 0.0), r).map_err(e)?,
                Box::new(|r| vec![Tensor::randn(&[3, 5], 1.0, r)]),
                &residual_run,
            ),
            (
                "conv identity",
                BlockParams::conv_residual(3, &EntanglementSpec::identity(), r).map_err(e)?,
                Box::new(|r| vec![Tensor::randn(&[2, 5, 5, 3], 1.0, r)]),
                &residual_run,
            ),
            (
                "conv channel gamma=0",
                BlockParams::conv_residual(3, &EntanglementSpec::conv(k, 3, 3, 0.0), r).map_err(e)?,
                Box::new(|r| vec![Tensor::randn(&[2, 5, 5, 3], 1.0, r)]),
                &residual_run,
            ),
            (
                "encoder identity",
                BlockParams::transformer_encoder(4, &EntanglementSpec::identity(), r).map_err(e)?,
                Box::new(|r| vec![Tensor::randn(&[5, 4], 1.0, r)]),
                &encoder_run,
            ),
            (
                "encoder spatial gamma=0",
                BlockParams::transformer_encoder(4, &EntanglementSpec::conv(EntanglementKind::Spatial, 3, 4, 0.0), r)
                    .map_err(e)?,
                Box::new(|r| vec![Tensor::randn(&[2, 5, 4], 1.0, r)]),
                &encoder_run,
            ),
            (
                "lstm identity",
                BlockParams::lstm_cell(3, 4, &EntanglementSpec::identity(), LstmMode::EntangleThenGate, r).map_err(e)?,
                Box::new(|r| (0..5).map(|i| Tensor::randn(&[2, if i < 2 { 4 } else { 3 }], 1.0, r)).collect()),
                &lstm_run,
            ),
            (
                "lstm dense gamma=0",
                BlockParams::lstm_cell(3, 4, &EntanglementSpec::dense(4, 0.0), LstmMode::EntangleThenGate, r).map_err(e)?,
                Box::new(|r| (0..5).map(|i| Tensor::randn(&[2, if i < 2 { 4 } else { 3 }], 1.0, r)).collect()),
                &lstm_run,
            ),
        ]
    };
    for (label, block, inputs, run) in &cases {
        for _ in 0..50 {
            let xs = inputs(&mut rng);
            let (f, g) = compare_to_vanilla(block, &xs, *run, &mut rng).map_err(|e| format!("{label}: {e}"))?;
            worst = (worst.0.max(f), worst.1.max(g));
            if f > 1e-15 || g > 1e-12 {
                return fail(format!("{label}: forward diff {f:.3e}, gradient diff {g:.3e}"));
            }
        }
    }
    Ok(format!("max forward diff {:.3e}, max gradient diff {:.3e}", worst.0, worst.1))
}

fn jacobian() -> Outcome {
    let mut rng = SeededRng::new(4);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let n = 2 + rng.below(7);
        let (spec, gamma) = if i % 2 == 0 {
            let g = rng.uniform();
            (EntanglementSpec::dense(n, g), make_dense_gamma(n, g).map_err(|e| e.to_string())?)
        } else {
            let seed = rng.below(1000) as u64;
            (EntanglementSpec::orthogonal(n, seed), make_orthogonal_gamma(n, seed))
        };
        let mut block = BlockParams::mlp_residual(n, n, &spec, &mut rng).map_err(|e| e.to_string())?;
        for (_, d) in block.param_data_mut() {
            d.fill(0.0);
        }
        let x = Tensor::randn(&[n], 1.0, &mut rng);
        for j in 0..n {
            let mut g = Graph::new();
            let bb = block.bind(&mut g, false);
            let xi = g.param(x.clone());
            let mut run = || -> Result<Tensor> {
                let (y, _) = bb.residual(&mut g, xi)?;
                let yj = g.slice_last(y, j, 1)?;
                let loss = g.sum(yj);
                Ok(g.backward(loss)?.get_or_zeros(xi, &[n]))
            };
            let gx = run().map_err(|e| e.to_string())?;
            // row j of the operator g_y -> g_y Γᵀ is row j of Γᵀ
            for k in 0..n {
                let dev = (gx.data()[k] - gamma.transpose().get(j, k)).abs();
                worst = worst.max(dev);
                if dev > 1e-12 {
                    return fail(format!("{spec}: entry ({j},{k}) off by {dev:.3e}"));
                }
            }
        }
    }
    Ok(format!("max entry deviation {worst:.3e}"))
}

/// A differentiable op under test: returns the inputs for one random instance
/// and the function that builds its (non-scalar) output.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut SeededRng) -> Vec<Tensor>,
    pub build: fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
}

fn randn(shape: &[usize], r: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn away_from_zero(shape: &[usize], r: &mut SeededRng) -> Tensor {
    let mut t = randn(shape, r);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.05);
    }
    t
}

pub fn op_catalog() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", inputs: |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], build: |g, x| g.add(x[0], x[1]) },
        OpCase {
            name: "add_broadcast",
            inputs: |r| vec![randn(&[2, 3, 4], r), randn(&[4], r)],
            build: |g, x| g.add_broadcast(x[0], x[1]),
        },
        OpCase { name: "mul", inputs: |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], build: |g, x| g.mul(x[0], x[1]) },
        OpCase { name: "scale", inputs: |r| vec![randn(&[5], r)], build: |g, x| Ok(g.scale(x[0], -1.7)) },
        OpCase {
            name: "matmul",
            inputs: |r| vec![randn(&[2, 3, 4], r), randn(&[4, 5], r)],
            build: |g, x| g.matmul(x[0], x[1]),
        },
        OpCase {
            name: "batch_matmul",
            inputs: |r| vec![randn(&[2, 3, 4], r), randn(&[2, 4, 2], r)],
            build: |g, x| g.batch_matmul(x[0], x[1]),
        },
        OpCase { name: "transpose_last2", inputs: |r| vec![randn(&[2, 3, 4], r)], build: |g, x| g.transpose_last2(x[0]) },
        OpCase { name: "relu", inputs: |r| vec![away_from_zero(&[3, 4], r)], build: |g, x| Ok(g.relu(x[0])) },
        OpCase { name: "gelu", inputs: |r| vec![randn(&[3, 4], r)], build: |g, x| Ok(g.gelu(x[0])) },
        OpCase { name: "sigmoid", inputs: |r| vec![randn(&[3, 4], r)], build: |g, x| Ok(g.sigmoid(x[0])) },
        OpCase { name: "tanh", inputs: |r| vec![randn(&[3, 4], r)], build: |g, x| Ok(g.tanh(x[0])) },
        OpCase { name: "softmax", inputs: |r| vec![randn(&[3, 5], r)], build: |g, x| Ok(g.softmax(x[0])) },
        OpCase {
            name: "layernorm",
            inputs: |r| vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)],
            build: |g, x| g.layernorm(x[0], x[1], x[2]),
        },
        OpCase {
            name: "conv2d_zero",
            inputs: |r| vec![randn(&[2, 4, 4, 2], r), randn(&[3, 3, 2, 3], r)],
            build: |g, x| g.conv2d(x[0], x[1], Padding::Zero),
        },
        OpCase {
            name: "conv2d_circular",
            inputs: |r| vec![randn(&[4, 5, 2], r), randn(&[3, 3, 2, 2], r)],
            build: |g, x| g.conv2d(x[0], x[1], Padding::Circular),
        },
        OpCase {
            name: "conv1d_zero",
            inputs: |r| vec![randn(&[2, 5, 2], r), randn(&[3, 2, 3], r)],
            build: |g, x| g.conv1d(x[0], x[1], Padding::Zero),
        },
        OpCase {
            name: "conv1d_circular",
            inputs: |r| vec![randn(&[6, 3], r), randn(&[5, 3, 2], r)],
            build: |g, x| g.conv1d(x[0], x[1], Padding::Circular),
        },
        OpCase { name: "avg_pool2", inputs: |r| vec![randn(&[1, 4, 4, 2], r)], build: |g, x| g.avg_pool2(x[0]) },
        OpCase { name: "mean_axis1", inputs: |r| vec![randn(&[2, 3, 4], r)], build: |g, x| g.mean_axis1(x[0]) },
        OpCase { name: "reshape", inputs: |r| vec![randn(&[2, 6], r)], build: |g, x| g.reshape(x[0], &[3, 4]) },
        OpCase { name: "slice_last", inputs: |r| vec![randn(&[3, 6], r)], build: |g, x| g.slice_last(x[0], 2, 3) },
        OpCase {
            name: "concat_outer",
            inputs: |r| vec![randn(&[2, 3], r), randn(&[1, 3], r)],
            build: |g, x| g.concat_outer(&[x[0], x[1]]),
        },
        OpCase { name: "sum", inputs: |r| vec![randn(&[3, 4], r)], build: |g, x| Ok(g.sum(x[0])) },
        OpCase { name: "mean", inputs: |r| vec![randn(&[3, 4], r)], build: |g, x| Ok(g.mean(x[0])) },
        OpCase {
            name: "cross_entropy",
            inputs: |r| vec![randn(&[4, 5], r)],
            build: |g, x| g.cross_entropy(x[0], &[0, 3, 4, 1]),
        },
        OpCase {
            name: "attention",
            inputs: |r| (0..5).map(|i| if i == 0 { randn(&[4, 3], r) } else { randn(&[3, 3], r) }).collect(),
            build: |g, x| {
                let p = AttentionNodes { wq: x[1], wk: x[2], wv: x[3], wo: x[4] };
                Ok(attention(g, x[0], p)?.0)
            },
        },
    ]
}

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Max relative error of one op instance under a fixed random readout.
pub fn check_op(case: &OpCase, rng: &mut SeededRng) -> Result<f64> {
    let inputs = (case.inputs)(rng);
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = (case.build)(&mut probe, &ids)?;
    let r = Tensor::randn(probe.shape(out), 1.0, rng);
    let build = case.build;
    grad_check(
        |g, ids| {
            let out = build(g, ids)?;
            readout(g, out, &r)
        },
        &inputs,
        GRAD_EPS,
    )
}

fn block_kinds() -> [EntanglementSpec; 8] {
    use EntanglementKind as K;
    [
        EntanglementSpec::identity(),
        EntanglementSpec::none(),
        EntanglementSpec::dense(1, 0.3),
        EntanglementSpec::orthogonal(1, 5),
        EntanglementSpec::conv(K::Spatial, 3, 1, 0.4),
        EntanglementSpec::conv(K::Channel, 1, 1, 0.6),
        EntanglementSpec::conv(K::ChannelSpatial, 3, 1, 0.2),
        EntanglementSpec::conv(K::OrthogonalChannel, 1, 1, 0.0).with_seed(2),
    ]
}

/// Grad check of one block instance, differentiating inputs and parameters.
/// `which` selects mlp (0), conv (1), encoder (2) or lstm (3); the
/// entanglement cycles with `instance`.
pub fn check_block(which: usize, instance: usize, rng: &mut SeededRng) -> Result<f64> {
    let kinds = block_kinds();
    let vector_kinds = &kinds[..4];
    let (block, inputs, run): (BlockParams, Vec<Tensor>, &BlockRun) = match which {
        0 => {
            let spec = vector_kinds[instance % 4].sized(3);
            let b = BlockParams::mlp_residual(3, 4, &spec, rng)?;
            (b, vec![randn(&[2, 3], rng)], &residual_run)
        }
        1 => {
            let spec = kinds[instance % 8].sized(2);
            let b = BlockParams::conv_residual(2, &spec, rng)?;
            (b, vec![randn(&[4, 4, 2], rng)], &residual_run)
        }
        2 => {
            let spec = kinds[instance % 8].sized(3);
            let b = BlockParams::transformer_encoder(3, &spec, rng)?;
            (b, vec![randn(&[4, 3], rng)], &encoder_run)
        }
        _ => {
            let spec = vector_kinds[instance % 4].sized(3);
            let mode = [LstmMode::EntangleThenGate, LstmMode::GateThenEntangle, LstmMode::Literal][instance % 3];
            let b = BlockParams::lstm_cell(2, 3, &spec, mode, rng)?;
            let xs = (0..4).map(|i| randn(&[if i < 2 { 3 } else { 2 }], rng)).collect();
            (b, xs, &lstm_run)
        }
    };
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(block.params().iter().map(|(_, t)| t.clone()));
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = all.iter().map(|t| probe.constant(t.clone())).collect();
    let bb = block.bind_nodes(&mut probe, ids[n_in..].to_vec())?;
    let out = run(&bb, &mut probe, &ids[..n_in], false)?;
    let r = Tensor::randn(probe.shape(out), 1.0, rng);
    grad_check(
        |g, ids| {
            let bb = block.bind_nodes(g, ids[n_in..].to_vec())?;
            let out = run(&bb, g, &ids[..n_in], false)?;
            readout(g, out, &r)
        },
        &all,
        GRAD_EPS,
    )
}

pub const BLOCK_NAMES: [&str; 4] = ["mlp_residual", "conv_residual", "transformer_encoder", "lstm_cell"];

fn gradients() -> Outcome {
    let mut rng = SeededRng::new(5);
    let mut worst = (0.0f64, "");
    for case in op_catalog() {
        for i in 0..20 {
            let err = check_op(&case, &mut rng).map_err(|e| format!("{}: {e}", case.name))?;
            if err > worst.0 {
                worst = (err, case.name);
            }
            if err > GRAD_TOL {
                return fail(format!("{} instance {i}: relative error {err:.3e}", case.name));
            }
        }
    }
    for (which, name) in BLOCK_NAMES.iter().enumerate() {
        for i in 0..20 {
            let err = check_block(which, i, &mut rng).map_err(|e| format!("{name}: {e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
            if err > GRAD_TOL {
                return fail(format!("{name} instance {i}: relative error {err:.3e}"));
            }
        }
    }
    Ok(format!("max relative error {:.3e} ({})", worst.0, worst.1))
}

fn sandwich(opts: &CheckOptions) -> Outcome {
    const SLACK: f64 = 1e-12;
    let mut rng = SeededRng::new(6);
    for draw in 0..1000 {
        let n = 1 + rng.below(64);
        let gamma = 0.99 * rng.uniform();
        let m = make_dense_gamma(n, gamma).map_err(|e| e.to_string())?;
        let m = opts.matrix(EntanglementKind::Dense, m);
        let dir = rng.normal_vec(n);
        let scale = rng.uniform_range(-3.0, 3.0).exp();
        let x: Vec<f64> = dir.iter().map(|v| v * scale).collect();
        let x_norm = linalg::l2_norm(&x);
        let f_norm = x_norm * rng.uniform();
        let gx = linalg::l2_norm(&m.left_mul_vec(&x));
        let spectral = linalg::spectral_norm(&m, 10_000, 1e-15);
        let (lo, hi) = lemma1_bounds(f_norm, x_norm, gamma, spectral).map_err(|e| e.to_string())?;
        let r2 = (f_norm / gx).powi(2);
        let tag = format!("draw {draw} (n={n}, gamma={gamma:.4})");
        if lo > r2 * (1.0 + SLACK) || r2 > hi * (1.0 + SLACK) {
            return fail(format!("{tag}: {lo:.6e} <= {r2:.6e} <= {hi:.6e} violated"));
        }
        if gx > spectral * x_norm * (1.0 + SLACK) {
            return fail(format!("{tag}: |xG| = {gx:.6e} exceeds |G| |x|"));
        }
        if (1.0 - gamma) * x_norm > gx * (1.0 + SLACK) {
            return fail(format!("{tag}: (1-gamma)|x| exceeds |xG| = {gx:.6e}"));
        }
        if !(0.99..=1.0 + 1e-9).contains(&spectral) && opts.perturb.is_none() {
            return fail(format!("{tag}: spectral norm {spectral}"));
        }
    }
    Ok("1000 draws inside the bounds".into())
}

fn mass_conservation(opts: &CheckOptions) -> Outcome {
    use EntanglementKind as K;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut inspect = |label: String, kernel: &ConvKernel, want: f64| -> std::result::Result<(), String> {
        let dev = kernel.output_mass().iter().map(|m| (m - want).abs()).fold(0.0, f64::max);
        worst = worst.max(dev);
        checked += 1;
        if dev > 1e-12 {
            return fail(format!("{label}: output mass off by {dev:.3e}"));
        }
        if kernel.is_2d() {
            let c = kernel.channels_in();
            let x = Tensor::full(&[6, 6, c], 0.7);
            let y = crate::autodiff::conv2d(&x, kernel, Padding::Circular).map_err(|e| e.to_string())?;
            let dev = y.data().iter().map(|v| (v - 0.7 * want).abs()).fold(0.0, f64::max);
            if dev > 1e-12 {
                return fail(format!("{label}: constant input changed by {dev:.3e}"));
            }
        }
        Ok(())
    };
    for kind in [K::Spatial, K::Channel, K::ChannelSpatial] {
        for k in [1, 3, 5] {
            for c in [1, 4, 16] {
                for gamma in [0.0, 0.1, 0.5, 1.0] {
                    let spec = EntanglementSpec::conv(kind, k, c, gamma);
                    let label = format!("{kind} k={k} c={c} gamma={gamma}");
                    let k2 = opts.kernel(kind, make_kernel_2d(&spec).map_err(|e| e.to_string())?);
                    inspect(label.clone(), &k2, 1.0)?;
                    let k1 = opts.kernel(kind, make_seq_kernel(&spec).map_err(|e| e.to_string())?);
                    inspect(format!("{label} (1d)"), &k1, 1.0)?;
                }
            }
        }
    }
    for c in [1, 4, 16] {
        inspect(format!("identity c={c}"), &opts.kernel(K::Identity, make_identity_kernel(c, true)), 1.0)?;
        let zero = ConvKernel::new(Tensor::zeros(&[1, 1, c, c])).map_err(|e| e.to_string())?;
        inspect(format!("none c={c}"), &opts.kernel(K::None, zero), 0.0)?;
    }
    Ok(format!("{checked} kernels, max mass deviation {worst:.3e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_criteria_pass_and_catch_perturbations() {
        let clean = CheckOptions::default();
        for id in [1, 2, 4, 6, 7] {
            let r = run_criterion(id, &clean).unwrap();
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(!run_criterion(1, &CheckOptions { perturb: Some(EntanglementKind::Dense) }).unwrap().passed);
        assert!(!run_criterion(7, &CheckOptions { perturb: Some(EntanglementKind::Spatial) }).unwrap().passed);
        assert!(run_criterion(9, &clean).is_err());
    }
}
