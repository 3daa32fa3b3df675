//! Whole networks: an input stem, `depth` copies of the configured block and
//! a linear classifier head.

use super::config::{ExperimentConfig, ModelKind, Task};
use crate::autodiff::{Graph, NodeId, Padding};
use crate::blocks::{BlockParams, Checkpoint, LstmMode};
use crate::entangle::EntanglementSpec;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub width: usize,
    pub classes: usize,
    /// Whether every sequence step carries a label (copy task) or only the
    /// whole sequence.
    pub per_step: bool,
    pub stem: Vec<(String, Tensor)>,
    pub blocks: Vec<BlockParams>,
    pub head: Vec<(String, Tensor)>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[rows, classes]`; rows follow [`Forward::row_target`].
    pub logits: NodeId,
    /// Parameter nodes in [`Model::param_tensors`] order.
    pub params: Vec<NodeId>,
    /// Per-step logits come out time-major (`t * batch + b`) rather than
    /// sample-major.
    pub time_major: Option<(usize, usize)>,
}

impl Forward {
    /// Index into the sample-major label list for logits row `r`.
    pub fn row_target(&self, r: usize) -> usize {
        match self.time_major {
            Some((batch, steps)) => (r % batch) * steps + r / batch,
            None => r,
        }
    }
}

fn normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng)
}

impl Model {
    /// `sample_shape` excludes the batch axis.
    pub fn build(
        cfg: &ExperimentConfig,
        spec: &EntanglementSpec,
        sample_shape: &[usize],
        classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = cfg.width;
        let spec = spec.sized(w);
        let features: usize = sample_shape.iter().product();
        let mut stem = Vec::new();
        let mut blocks = Vec::with_capacity(cfg.depth);
        match cfg.model {
            ModelKind::ResMlp => {
                stem.push(("w".into(), normal(&[features, w], features, 1.0, rng)));
                stem.push(("b".into(), Tensor::zeros(&[w])));
                for _ in 0..cfg.depth {
                    blocks.push(BlockParams::mlp_residual(w, w, &spec, rng)?);
                }
            }
            ModelKind::ResCnn => {
                let &[_, _, cin] = sample_shape else {
                    return Err(Error::InvalidArgument("res_cnn needs [h, w, c] samples".into()));
                };
                stem.push(("k".into(), normal(&[3, 3, cin, w], 9 * cin, 2.0, rng)));
                stem.push(("b".into(), Tensor::zeros(&[w])));
                for _ in 0..cfg.depth {
                    blocks.push(BlockParams::conv_residual(w, &spec, rng)?);
                }
            }
            ModelKind::Transformer => {
                let &[tokens, cols, ch] = sample_shape else {
                    return Err(Error::InvalidArgument("transformer needs [h, w, c] samples".into()));
                };
                let d_in = cols * ch;
                stem.push(("w".into(), normal(&[d_in, w], d_in, 1.0, rng)));
                stem.push(("b".into(), Tensor::zeros(&[w])));
                stem.push(("pos".into(), Tensor::randn(&[tokens, w], 0.1, rng)));
                for _ in 0..cfg.depth {
                    blocks.push(BlockParams::transformer_encoder(w, &spec, rng)?);
                }
            }
            ModelKind::Lstm => {
                let &[_, input] = sample_shape else {
                    return Err(Error::InvalidArgument("lstm needs [steps, features] samples".into()));
                };
                for layer in 0..cfg.depth {
                    let i = if layer == 0 { input } else { w };
                    blocks.push(BlockParams::lstm_cell(i, w, &spec, cfg.lstm_mode, rng)?);
                }
            }
        }
        let head = vec![
            ("w".into(), normal(&[w, classes], w, 1.0, rng)),
            ("b".into(), Tensor::zeros(&[classes])),
        ];
        Ok(Self {
            kind: cfg.model,
            width: w,
            classes,
            per_step: cfg.task == Task::CopyMemory,
            stem,
            blocks,
            head,
        })
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.stem.iter().map(|(_, t)| t).collect();
        for b in &self.blocks {
            out.extend(b.params().iter().map(|(_, t)| t));
        }
        out.extend(self.head.iter().map(|(_, t)| t));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.stem.iter_mut().map(|(_, t)| t.data_mut()).collect();
        for b in &mut self.blocks {
            out.extend(b.param_data_mut().map(|(_, d)| d));
        }
        out.extend(self.head.iter_mut().map(|(_, t)| t.data_mut()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn entangler_fingerprints(&self) -> Vec<String> {
        self.blocks.iter().map(BlockParams::entangler_fingerprint).collect()
    }

    fn bind_list(g: &mut Graph, list: &[(String, Tensor)], trainable: bool, ids: &mut Vec<NodeId>) -> Vec<NodeId> {
        let out: Vec<NodeId> = list
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        ids.extend(&out);
        out
    }

    /// Stem output for a batch: the features the first block sees.
    fn stem_forward(&self, g: &mut Graph, x: NodeId, stem: &[NodeId]) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let batch = shape[0];
        match self.kind {
            ModelKind::ResMlp => {
                let flat = g.reshape(x, &[batch, shape[1..].iter().product()])?;
                let h = g.matmul(flat, stem[0])?;
                g.add_broadcast(h, stem[1])
            }
            ModelKind::ResCnn => {
                let h = g.conv2d(x, stem[0], Padding::Zero)?;
                let h = g.add_broadcast(h, stem[1])?;
                let h = g.relu(h);
                g.avg_pool2(h)
            }
            ModelKind::Transformer => {
                let rows = g.reshape(x, &[batch, shape[1], shape[2..].iter().product()])?;
                let h = g.matmul(rows, stem[0])?;
                let h = g.add_broadcast(h, stem[1])?;
                g.add_broadcast(h, stem[2])
            }
            ModelKind::Lstm => Err(Error::Unsupported("lstm has no stem".into())),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor, trainable: bool) -> Result<Forward> {
        let mut params = Vec::new();
        let stem = Self::bind_list(g, &self.stem, trainable, &mut params);
        let bound: Vec<_> = self
            .blocks
            .iter()
            .map(|b| {
                let bb = b.bind(g, trainable);
                params.extend(bb.ids());
                bb
            })
            .collect();
        let head = Self::bind_list(g, &self.head, trainable, &mut params);
        let batch = x.shape()[0];

        let (features, time_major) = match self.kind {
            ModelKind::ResMlp | ModelKind::ResCnn | ModelKind::Transformer => {
                let xi = g.constant(x.clone());
                let mut h = self.stem_forward(g, xi, &stem)?;
                for bb in &bound {
                    h = match self.kind {
                        ModelKind::Transformer => bb.encoder(g, h)?,
                        _ => bb.residual(g, h)?.0,
                    };
                }
                let pooled = match self.kind {
                    ModelKind::ResMlp => h,
                    _ => {
                        let s = g.shape(h).to_vec();
                        let tokens = g.reshape(h, &[batch, s[1..s.len() - 1].iter().product(), self.width])?;
                        g.mean_axis1(tokens)?
                    }
                };
                (pooled, None)
            }
            ModelKind::Lstm => {
                let &[_, steps, input] = x.shape() else {
                    return Err(Error::InvalidArgument("lstm expects [batch, steps, features]".into()));
                };
                let mut state: Vec<(NodeId, NodeId)> = (0..bound.len())
                    .map(|_| {
                        let c = g.constant(Tensor::zeros(&[batch, self.width]));
                        let h = g.constant(Tensor::zeros(&[batch, self.width]));
                        (c, h)
                    })
                    .collect();
                let mut outputs = Vec::with_capacity(steps);
                let src = x.data();
                for t in 0..steps {
                    let mut xt = Vec::with_capacity(batch * input);
                    for b in 0..batch {
                        let base = (b * steps + t) * input;
                        xt.extend_from_slice(&src[base..base + input]);
                    }
                    let mut inp = g.constant(Tensor::new(&[batch, input], xt)?);
                    for (bb, st) in bound.iter().zip(state.iter_mut()) {
                        *st = bb.lstm(g, st.0, st.1, inp)?;
                        inp = st.1;
                    }
                    if self.per_step {
                        outputs.push(inp);
                    }
                }
                if self.per_step {
                    (g.concat_outer(&outputs)?, Some((batch, steps)))
                } else {
                    (state.last().expect("depth >= 1").1, None)
                }
            }
        };
        let logits = g.matmul(features, head[0])?;
        let logits = g.add_broadcast(logits, head[1])?;
        Ok(Forward {
            logits,
            params,
            time_major,
        })
    }

    /// Features entering the first block, for refinement tracing.
    pub fn block_input(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ids = Vec::new();
        let stem = Self::bind_list(&mut g, &self.stem, false, &mut ids);
        let xi = g.constant(x.clone());
        let h = self.stem_forward(&mut g, xi, &stem)?;
        Ok(g.value(h).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("model", self.kind.as_str());
        c.set_meta("width", self.width.to_string());
        c.set_meta("classes", self.classes.to_string());
        c.set_meta("per_step", self.per_step.to_string());
        c.set_meta("depth", self.blocks.len().to_string());
        for (n, t) in &self.stem {
            c.push_tensor(format!("stem.{n}"), t.clone());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.write_checkpoint(&format!("block{i}."), &mut c);
        }
        for (n, t) in &self.head {
            c.push_tensor(format!("head.{n}"), t.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            c.require_meta(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad checkpoint meta {k}")))
        };
        let kind: ModelKind = c.require_meta("model")?.parse()?;
        let depth = num("depth")?;
        let blocks = (0..depth)
            .map(|i| BlockParams::read_checkpoint(&format!("block{i}."), c))
            .collect::<Result<Vec<_>>>()?;
        let section = |prefix: &str| -> Vec<(String, Tensor)> {
            c.tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect()
        };
        Ok(Self {
            kind,
            width: num("width")?,
            classes: num("classes")?,
            per_step: c.require_meta("per_step")? == "true",
            stem: section("stem."),
            blocks,
            head: section("head."),
        })
    }

    pub fn lstm_mode(&self) -> Option<LstmMode> {
        (self.kind == ModelKind::Lstm).then(|| self.blocks[0].lstm_mode())
    }
}
