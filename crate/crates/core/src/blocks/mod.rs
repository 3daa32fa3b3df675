//! Entangled residual, transformer-encoder and LSTM blocks.
//!
//! A [`BlockParams`] owns the trainable tensors of the residual branch `f`
//! plus a constant skip operator built from its [`EntanglementSpec`]. To run
//! it, [`BlockParams::bind`] places both on a [`Graph`]; the graph-level
//! functions then compose the forward pass. The tensor-level wrappers
//! ([`residual_forward`], [`transformer_encoder_forward`], [`lstm_step`],
//! [`apply_entanglement`]) do the same for one-off evaluation.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::autodiff::{attention, AttentionNodes, Graph, NodeId, Padding};
use crate::entangle::{EntanglementKind, EntanglementSpec, Entangler, FeatureLayout};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    MlpResidual,
    ConvResidual,
    TransformerEncoder,
    LstmCell,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MlpResidual => "mlp_residual",
            Self::ConvResidual => "conv_residual",
            Self::TransformerEncoder => "transformer_encoder",
            Self::LstmCell => "lstm_cell",
        }
    }

    fn layout(self, width: usize) -> FeatureLayout {
        match self {
            Self::MlpResidual | Self::LstmCell => FeatureLayout::Vector { dim: width },
            Self::ConvResidual => FeatureLayout::Map2d { channels: width },
            Self::TransformerEncoder => FeatureLayout::Sequence { channels: width },
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp_residual" => Self::MlpResidual,
            "conv_residual" => Self::ConvResidual,
            "transformer_encoder" => Self::TransformerEncoder,
            "lstm_cell" => Self::LstmCell,
            _ => return Err(Error::InvalidArgument(format!("unknown block kind {s:?}"))),
        })
    }
}

/// Where the skip operator sits relative to the forget gate in the LSTM cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LstmMode {
    /// `c' = f ⊙ (c Γ) + i ⊙ z`
    #[default]
    EntangleThenGate,
    /// `c' = (f ⊙ c) Γ + i ⊙ z`
    GateThenEntangle,
    /// `c' = c Γ + i ⊙ z`, no forget gate.
    Literal,
}

impl LstmMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EntangleThenGate => "entangle_then_gate",
            Self::GateThenEntangle => "gate_then_entangle",
            Self::Literal => "literal",
        }
    }
}

impl fmt::Display for LstmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LstmMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "entangle_then_gate" | "forget" | "default" => Self::EntangleThenGate,
            "gate_then_entangle" => Self::GateThenEntangle,
            "literal" => Self::Literal,
            _ => return Err(Error::InvalidArgument(format!("unknown lstm mode {s:?}"))),
        })
    }
}

/// Trainable tensors of one block together with its constant skip operator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    kind: BlockKind,
    width: usize,
    input_width: usize,
    hidden: usize,
    entanglement: EntanglementSpec,
    lstm_mode: LstmMode,
    params: Vec<(String, Tensor)>,
    entangler: Entangler,
}

/// Variance gain for the last layer of a residual branch: small, so stacked
/// blocks start close to their skip path instead of compounding variance.
const BRANCH_OUT_GAIN: f64 = 0.1;

fn he(shape: &[usize], fan_in: usize, gain: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng)
}

impl BlockParams {
    /// `f = Dense(width -> hidden) -> ReLU -> Dense(hidden -> width)`.
    pub fn mlp_residual(width: usize, hidden: usize, spec: &EntanglementSpec, rng: &mut SeededRng) -> Result<Self> {
        positive(&[width, hidden])?;
        let params = vec![
            ("w1".into(), he(&[width, hidden], width, 2.0, rng)),
            ("b1".into(), Tensor::zeros(&[hidden])),
            ("w2".into(), he(&[hidden, width], hidden, BRANCH_OUT_GAIN, rng)),
            ("b2".into(), Tensor::zeros(&[width])),
        ];
        Self::assemble(BlockKind::MlpResidual, width, width, hidden, spec, LstmMode::default(), params)
    }

    /// `f = Conv3x3 -> ReLU -> Conv3x3`, channel preserving, zero padded.
    pub fn conv_residual(channels: usize, spec: &EntanglementSpec, rng: &mut SeededRng) -> Result<Self> {
        positive(&[channels])?;
        let c = channels;
        let params = vec![
            ("k1".into(), he(&[3, 3, c, c], 9 * c, 2.0, rng)),
            ("b1".into(), Tensor::zeros(&[c])),
            ("k2".into(), he(&[3, 3, c, c], 9 * c, BRANCH_OUT_GAIN, rng)),
            ("b2".into(), Tensor::zeros(&[c])),
        ];
        Self::assemble(BlockKind::ConvResidual, c, c, c, spec, LstmMode::default(), params)
    }

    /// Single-head attention sublayer followed by a `d -> 4d -> d` GELU
    /// feed-forward sublayer, each closed by layer norm.
    pub fn transformer_encoder(d: usize, spec: &EntanglementSpec, rng: &mut SeededRng) -> Result<Self> {
        positive(&[d])?;
        let hidden = 4 * d;
        let mut params = Vec::new();
        for name in ["wq", "wk", "wv", "wo"] {
            params.push((name.to_string(), he(&[d, d], d, 1.0, rng)));
        }
        params.extend([
            ("ln1_scale".into(), Tensor::full(&[d], 1.0)),
            ("ln1_shift".into(), Tensor::zeros(&[d])),
            ("ffn_w1".into(), he(&[d, hidden], d, 2.0, rng)),
            ("ffn_b1".into(), Tensor::zeros(&[hidden])),
            ("ffn_w2".into(), he(&[hidden, d], hidden, 1.0, rng)),
            ("ffn_b2".into(), Tensor::zeros(&[d])),
            ("ln2_scale".into(), Tensor::full(&[d], 1.0)),
            ("ln2_shift".into(), Tensor::zeros(&[d])),
        ]);
        Self::assemble(BlockKind::TransformerEncoder, d, d, hidden, spec, LstmMode::default(), params)
    }

    /// Gate pre-activations `x W + h U + b`, columns ordered `i, f, o, z`.
    /// The forget-gate bias starts at 1.
    pub fn lstm_cell(
        input: usize,
        hidden: usize,
        spec: &EntanglementSpec,
        mode: LstmMode,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        positive(&[input, hidden])?;
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let params = vec![
            ("w".into(), Tensor::uniform(&[input, 4 * hidden], bound, rng)),
            ("u".into(), Tensor::uniform(&[hidden, 4 * hidden], bound, rng)),
            ("b".into(), Tensor::new(&[4 * hidden], b)?),
        ];
        Self::assemble(BlockKind::LstmCell, hidden, input, hidden, spec, mode, params)
    }

    fn assemble(
        kind: BlockKind,
        width: usize,
        input_width: usize,
        hidden: usize,
        spec: &EntanglementSpec,
        lstm_mode: LstmMode,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        check_spec_width(spec, width)?;
        let entangler = Entangler::build(spec, kind.layout(width))?;
        Ok(Self {
            kind,
            width,
            input_width,
            hidden,
            entanglement: spec.clone(),
            lstm_mode,
            params,
            entangler,
        })
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    /// Feature width (`D`, channel count `C`, or LSTM hidden size `H`).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn entanglement(&self) -> &EntanglementSpec {
        &self.entanglement
    }

    pub fn lstm_mode(&self) -> LstmMode {
        self.lstm_mode
    }

    pub fn set_lstm_mode(&mut self, mode: LstmMode) {
        self.lstm_mode = mode;
    }

    pub fn entangler(&self) -> &Entangler {
        &self.entangler
    }

    /// SHA-256 over the bit patterns of the skip operator, for checking that
    /// training never touches it.
    pub fn entangler_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.entanglement.to_string().as_bytes());
        for v in self.entangler.values() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Trainable tensors, in a fixed order.
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter {name:?}")))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter {name:?}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: slot.1.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.1 = value;
        Ok(())
    }

    /// Mutable views of the trainable values; shapes stay fixed.
    pub fn param_data_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f64])> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t.data_mut()))
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places the block on a graph: trainable tensors as differentiable leaves
    /// (or constants when `trainable` is false) and the skip operator as a
    /// constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBlock<'_> {
        let ids = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.bind_skip(g, ids)
    }

    /// Like [`bind`](Self::bind) but with caller-supplied parameter nodes,
    /// parallel to [`params`](Self::params).
    pub fn bind_nodes(&self, g: &mut Graph, ids: Vec<NodeId>) -> Result<BoundBlock<'_>> {
        if ids.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter nodes for {} parameters",
                ids.len(),
                self.params.len()
            )));
        }
        for (id, (name, t)) in ids.iter().zip(&self.params) {
            if g.shape(*id) != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "bind_nodes",
                    lhs: g.shape(*id).to_vec(),
                    rhs: t.shape().to_vec(),
                })
                .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")));
            }
        }
        Ok(self.bind_skip(g, ids))
    }

    fn bind_skip(&self, g: &mut Graph, ids: Vec<NodeId>) -> BoundBlock<'_> {
        let skip = match &self.entangler {
            Entangler::Identity => Skip::Identity,
            Entangler::Zero => Skip::Zero,
            Entangler::Matrix(m) => Skip::Matrix(g.constant(matrix_tensor(m))),
            Entangler::Kernel2d(k) => Skip::Conv2d(g.constant(k.tensor().clone())),
            Entangler::Kernel1d(k) => Skip::Conv1d(g.constant(k.tensor().clone())),
        };
        BoundBlock { params: self, ids, skip }
    }

    /// Appends this block to a checkpoint under `prefix`.
    pub fn write_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.set_meta(format!("{prefix}kind"), self.kind.as_str());
        ckpt.set_meta(format!("{prefix}width"), self.width.to_string());
        ckpt.set_meta(format!("{prefix}input"), self.input_width.to_string());
        ckpt.set_meta(format!("{prefix}hidden"), self.hidden.to_string());
        ckpt.set_meta(format!("{prefix}lstm_mode"), self.lstm_mode.as_str());
        ckpt.set_meta(format!("{prefix}entanglement"), self.entanglement.to_string());
        ckpt.set_meta(format!("{prefix}entangler_sha256"), self.entangler_fingerprint());
        for (name, t) in &self.params {
            ckpt.push_tensor(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Rebuilds a block written by [`write_checkpoint`](Self::write_checkpoint).
    /// The skip operator is reconstructed from its spec and must reproduce the
    /// recorded fingerprint.
    pub fn read_checkpoint(prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ckpt.require_meta(&format!("{prefix}{k}"));
        let num = |k: &str| -> Result<usize> {
            meta(k)?.parse().map_err(|_| Error::Parse(format!("bad {prefix}{k}")))
        };
        let kind: BlockKind = meta("kind")?.parse()?;
        let spec: EntanglementSpec = meta("entanglement")?.parse()?;
        let mode: LstmMode = meta("lstm_mode")?.parse()?;
        let (width, input, hidden) = (num("width")?, num("input")?, num("hidden")?);
        let mut rng = SeededRng::new(0);
        let mut block = match kind {
            BlockKind::MlpResidual => Self::mlp_residual(width, hidden, &spec, &mut rng)?,
            BlockKind::ConvResidual => Self::conv_residual(width, &spec, &mut rng)?,
            BlockKind::TransformerEncoder => Self::transformer_encoder(width, &spec, &mut rng)?,
            BlockKind::LstmCell => Self::lstm_cell(input, hidden, &spec, mode, &mut rng)?,
        };
        let names: Vec<String> = block.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            block.set_param(&name, ckpt.tensor(&format!("{prefix}{name}"))?.clone())?;
        }
        if block.entangler_fingerprint() != meta("entangler_sha256")? {
            return Err(Error::Parse(format!("{prefix}: entanglement operator does not match its fingerprint")));
        }
        Ok(block)
    }
}

fn positive(sizes: &[usize]) -> Result<()> {
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("block sizes must be positive".into()));
    }
    Ok(())
}

/// Rejects a spec whose operator width disagrees with the block's features.
fn check_spec_width(spec: &EntanglementSpec, width: usize) -> Result<()> {
    use EntanglementKind as K;
    let declared = match spec.kind {
        K::Identity | K::None => return Ok(()),
        K::Dense | K::Orthogonal => spec.dim,
        _ => spec.channels,
    };
    if declared != width {
        return Err(Error::ShapeMismatch {
            op: "entanglement",
            lhs: vec![declared],
            rhs: vec![width],
        });
    }
    Ok(())
}

fn matrix_tensor(m: &DenseMatrix) -> Tensor {
    Tensor::from_parts(vec![m.rows(), m.cols()], m.data().to_vec())
}

#[derive(Debug, Clone, Copy)]
enum Skip {
    Identity,
    Zero,
    Matrix(NodeId),
    Conv2d(NodeId),
    Conv1d(NodeId),
}

/// A block whose tensors live on a particular graph.
#[derive(Debug, Clone)]
pub struct BoundBlock<'a> {
    params: &'a BlockParams,
    ids: Vec<NodeId>,
    skip: Skip,
}

impl<'a> BoundBlock<'a> {
    pub fn block(&self) -> &'a BlockParams {
        self.params
    }

    /// Node ids of the trainable tensors, parallel to [`BlockParams::params`].
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn id(&self, name: &str) -> NodeId {
        let i = self
            .params
            .params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("{} block has no parameter {name}", self.params.kind));
        self.ids[i]
    }

    /// The skip path: `x Γ`, a constant-kernel convolution (SAME, zero
    /// padding), `x` itself, or zeros.
    pub fn entangle(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.skip {
            Skip::Identity => Ok(x),
            Skip::Zero => Ok(g.constant(Tensor::zeros(g.shape(x)))),
            Skip::Matrix(m) => g.matmul(x, m),
            Skip::Conv2d(k) => g.conv2d(x, k, Padding::Zero),
            Skip::Conv1d(k) => g.conv1d(x, k, Padding::Zero),
        }
    }

    fn expect(&self, kind: BlockKind) -> Result<()> {
        if self.params.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "expected a {kind} block, got {}",
                self.params.kind
            )));
        }
        Ok(())
    }

    fn check_width(&self, g: &Graph, x: NodeId, want: usize) -> Result<()> {
        if g.value(x).last_dim() != want {
            return Err(Error::ShapeMismatch {
                op: self.params.kind.as_str(),
                lhs: g.shape(x).to_vec(),
                rhs: vec![want],
            });
        }
        Ok(())
    }

    /// Residual branch `f(x)` of an mlp or conv residual block.
    pub fn branch(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.check_width(g, x, self.params.width)?;
        match self.params.kind {
            BlockKind::MlpResidual => {
                let h = g.matmul(x, self.id("w1"))?;
                let h = g.add_broadcast(h, self.id("b1"))?;
                let h = g.relu(h);
                let o = g.matmul(h, self.id("w2"))?;
                g.add_broadcast(o, self.id("b2"))
            }
            BlockKind::ConvResidual => {
                if !(3..=4).contains(&g.value(x).rank()) {
                    return Err(Error::InvalidArgument("conv block expects [h, w, c] or [n, h, w, c]".into()));
                }
                let h = g.conv2d(x, self.id("k1"), Padding::Zero)?;
                let h = g.add_broadcast(h, self.id("b1"))?;
                let h = g.relu(h);
                let o = g.conv2d(h, self.id("k2"), Padding::Zero)?;
                g.add_broadcast(o, self.id("b2"))
            }
            other => Err(Error::InvalidArgument(format!("{other} has no residual branch"))),
        }
    }

    /// `(f(x) + skip(x), f(x))`.
    pub fn residual(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId)> {
        let f = self.branch(g, x)?;
        let s = self.entangle(g, x)?;
        Ok((g.add(f, s)?, f))
    }

    /// Plain `f(x) + x`, ignoring the entanglement.
    pub fn standard_residual(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let f = self.branch(g, x)?;
        g.add(f, x)
    }

    fn sublayers(&self, g: &mut Graph, x: NodeId, entangled: bool) -> Result<NodeId> {
        self.expect(BlockKind::TransformerEncoder)?;
        self.check_width(g, x, self.params.width)?;
        if !(2..=3).contains(&g.value(x).rank()) {
            return Err(Error::InvalidArgument("encoder expects [l, d] or [b, l, d]".into()));
        }
        let p = AttentionNodes {
            wq: self.id("wq"),
            wk: self.id("wk"),
            wv: self.id("wv"),
            wo: self.id("wo"),
        };
        let (a, _) = attention(g, x, p)?;
        let s = if entangled { self.entangle(g, x)? } else { x };
        let sum = g.add(s, a)?;
        let out1 = g.layernorm(sum, self.id("ln1_scale"), self.id("ln1_shift"))?;

        let h = g.matmul(out1, self.id("ffn_w1"))?;
        let h = g.add_broadcast(h, self.id("ffn_b1"))?;
        let h = g.gelu(h);
        let ff = g.matmul(h, self.id("ffn_w2"))?;
        let ff = g.add_broadcast(ff, self.id("ffn_b2"))?;
        let s = if entangled { self.entangle(g, out1)? } else { out1 };
        let sum = g.add(s, ff)?;
        g.layernorm(sum, self.id("ln2_scale"), self.id("ln2_shift"))
    }

    /// `out1 = LN(skip(x) + Attn(x))`, `out2 = LN(skip(out1) + FFN(out1))`.
    pub fn encoder(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.sublayers(g, x, true)
    }

    /// The same block with plain `x + Sublayer(x)` connections.
    pub fn vanilla_encoder(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.sublayers(g, x, false)
    }

    fn gates(&self, g: &mut Graph, h: NodeId, x: NodeId) -> Result<[NodeId; 4]> {
        self.expect(BlockKind::LstmCell)?;
        self.check_width(g, x, self.params.input_width)?;
        self.check_width(g, h, self.params.width)?;
        let hw = self.params.width;
        let a = g.matmul(x, self.id("w"))?;
        let b = g.matmul(h, self.id("u"))?;
        let pre = g.add(a, b)?;
        let pre = g.add_broadcast(pre, self.id("b"))?;
        let i = g.slice_last(pre, 0, hw)?;
        let f = g.slice_last(pre, hw, hw)?;
        let o = g.slice_last(pre, 2 * hw, hw)?;
        let z = g.slice_last(pre, 3 * hw, hw)?;
        Ok([g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(z)])
    }

    /// One entangled LSTM step; returns `(c', h')`.
    pub fn lstm(&self, g: &mut Graph, c: NodeId, h: NodeId, x: NodeId) -> Result<(NodeId, NodeId)> {
        self.check_width(g, c, self.params.width)?;
        if g.shape(c) != g.shape(h) {
            return Err(Error::ShapeMismatch {
                op: "lstm state",
                lhs: g.shape(c).to_vec(),
                rhs: g.shape(h).to_vec(),
            });
        }
        let [i, f, o, z] = self.gates(g, h, x)?;
        let carry = match self.params.lstm_mode {
            LstmMode::EntangleThenGate => {
                let cg = self.entangle(g, c)?;
                g.mul(f, cg)?
            }
            LstmMode::GateThenEntangle => {
                let fc = g.mul(f, c)?;
                self.entangle(g, fc)?
            }
            LstmMode::Literal => self.entangle(g, c)?,
        };
        let iz = g.mul(i, z)?;
        let c_new = g.add(carry, iz)?;
        let t = g.tanh(c_new);
        let h_new = g.mul(o, t)?;
        Ok((c_new, h_new))
    }

    /// Standard forget-gated LSTM step with the same weights.
    pub fn standard_lstm(&self, g: &mut Graph, c: NodeId, h: NodeId, x: NodeId) -> Result<(NodeId, NodeId)> {
        let [i, f, o, z] = self.gates(g, h, x)?;
        let fc = g.mul(f, c)?;
        let iz = g.mul(i, z)?;
        let c_new = g.add(fc, iz)?;
        let t = g.tanh(c_new);
        let h_new = g.mul(o, t)?;
        Ok((c_new, h_new))
    }
}

/// Cell state and hidden output of an LSTM, `[H]` or `[B, H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Tensor,
    pub h: Tensor,
}

impl LstmState {
    pub fn new(c: Tensor, h: Tensor) -> Result<Self> {
        if c.shape() != h.shape() {
            return Err(Error::ShapeMismatch {
                op: "lstm state",
                lhs: c.shape().to_vec(),
                rhs: h.shape().to_vec(),
            });
        }
        for t in [&c, &h] {
            if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(Self { c, h })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            c: Tensor::zeros(shape),
            h: Tensor::zeros(shape),
        }
    }
}

/// `(f(x) + skip(x), f(x))` for an mlp or conv residual block.
pub fn residual_forward(x: &Tensor, params: &BlockParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xi = g.constant(x.clone());
    let (y, f) = b.residual(&mut g, xi)?;
    Ok((g.value(y).clone(), g.value(f).clone()))
}

pub fn transformer_encoder_forward(x: &Tensor, params: &BlockParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let xi = g.constant(x.clone());
    let y = b.encoder(&mut g, xi)?;
    Ok(g.value(y).clone())
}

pub fn lstm_step(state: &LstmState, x_t: &Tensor, params: &BlockParams) -> Result<LstmState> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let c = g.constant(state.c.clone());
    let h = g.constant(state.h.clone());
    let x = g.constant(x_t.clone());
    let (c, h) = b.lstm(&mut g, c, h, x)?;
    Ok(LstmState {
        c: g.value(c).clone(),
        h: g.value(h).clone(),
    })
}

/// Applies a skip operator to features. Dense and orthogonal kinds act on the
/// last axis of any tensor; 2D kernels need `[h, w, c]` or `[n, h, w, c]`
/// maps and 1D kernels `[l, d]` sequences (`[b, l, d]` is read as maps, so
/// batch sequences through a transformer block instead).
pub fn apply_entanglement(spec: &EntanglementSpec, x: &Tensor) -> Result<Tensor> {
    use EntanglementKind as K;
    let width = x.last_dim();
    check_spec_width(spec, width)?;
    let layout = match (spec.kind, x.rank()) {
        (K::Identity | K::None | K::Dense | K::Orthogonal, _) => FeatureLayout::Vector { dim: width },
        (_, 2) => FeatureLayout::Sequence { channels: width },
        (_, 3 | 4) => FeatureLayout::Map2d { channels: width },
        (kind, _) => {
            return Err(Error::InvalidSpec(format!(
                "{kind} entanglement cannot act on a rank-{} tensor",
                x.rank()
            )))
        }
    };
    let ent = Entangler::build(spec, layout)?;
    Ok(match ent {
        Entangler::Identity => x.clone(),
        Entangler::Zero => Tensor::zeros(x.shape()),
        Entangler::Matrix(m) => {
            let data = x.data().chunks(width).flat_map(|row| m.left_mul_vec(row)).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Entangler::Kernel2d(k) => crate::autodiff::conv2d(x, &k, Padding::Zero)?,
        Entangler::Kernel1d(k) => crate::autodiff::conv1d(x, &k, Padding::Zero)?,
    })
}
