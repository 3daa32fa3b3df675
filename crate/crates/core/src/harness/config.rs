//! Experiment configuration: UTF-8 `key = value` lines grouped under
//! `[experiment]`, `[entanglement]`, `[optimizer]` and `[sweep]` headers.
//! `#` starts a comment. Every `entanglement = ...` line in `[sweep]` adds
//! one spec (same syntax as [`EntanglementSpec`]'s `FromStr`); repeats are
//! kept.
//!
//! ```text
//! [experiment]
//! task = spiral2d
//! model = res_mlp
//! depth = 4
//! width = 16
//! epochs = 30
//! batch_size = 32
//! seeds = 1, 2, 3
//! output_dir = runs/spiral
//!
//! [entanglement]
//! kind = dense
//! gamma = 0.1
//!
//! [optimizer]
//! name = sgd_momentum
//! lr = 0.05
//! momentum = 0.9
//!
//! [sweep]
//! entanglement = kind=channel gamma=1 k=1
//! entanglement = identity
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::blocks::LstmMode;
use crate::entangle::{EntanglementKind, EntanglementSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Spiral2d,
    DigitsLite,
    SeqPixel,
    PermutedSeqPixel,
    CopyMemory,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Spiral2d,
        Task::DigitsLite,
        Task::SeqPixel,
        Task::PermutedSeqPixel,
        Task::CopyMemory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Spiral2d => "spiral2d",
            Self::DigitsLite => "digits_lite",
            Self::SeqPixel => "seq_pixel",
            Self::PermutedSeqPixel => "permuted_seq_pixel",
            Self::CopyMemory => "copy_memory",
        }
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, Self::SeqPixel | Self::PermutedSeqPixel | Self::CopyMemory)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ResMlp,
    ResCnn,
    Transformer,
    Lstm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ResMlp => "res_mlp",
            Self::ResCnn => "res_cnn",
            Self::Transformer => "transformer",
            Self::Lstm => "lstm",
        }
    }

    pub fn supports(self, task: Task) -> bool {
        match self {
            Self::ResMlp => matches!(task, Task::Spiral2d | Task::DigitsLite),
            Self::ResCnn | Self::Transformer => task == Task::DigitsLite,
            Self::Lstm => task.is_sequence(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "res_mlp" => Self::ResMlp,
            "res_cnn" => Self::ResCnn,
            "transformer" => Self::Transformer,
            "lstm" => Self::Lstm,
            _ => return Err(Error::Config(format!("unknown model {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64 },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            Self::SgdMomentum { lr, .. } | Self::Adam { lr } => lr,
        }
    }

    /// SGD with momentum 0.9 for feed-forward models, Adam at 5e-4 for LSTMs.
    pub fn default_for(model: ModelKind) -> Self {
        match model {
            ModelKind::Lstm => Self::Adam { lr: 5e-4 },
            _ => Self::SgdMomentum { lr: 0.05, momentum: 0.9 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub depth: usize,
    /// Feature width of the blocks: hidden units, channels, model dim or LSTM
    /// hidden size.
    pub width: usize,
    pub entanglement: EntanglementSpec,
    pub lstm_mode: LstmMode,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Dataset size overrides; `None` keeps the task's default split.
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub output_dir: PathBuf,
    pub sweep: Vec<EntanglementSpec>,
}

impl ExperimentConfig {
    pub fn new(task: Task, model: ModelKind) -> Self {
        Self {
            task,
            model,
            depth: 2,
            width: 16,
            entanglement: EntanglementSpec::identity(),
            lstm_mode: LstmMode::default(),
            optimizer: OptimizerConfig::default_for(model),
            clip_norm: 1.0,
            epochs: 10,
            batch_size: 32,
            seeds: vec![0],
            train_size: None,
            test_size: None,
            output_dir: PathBuf::from("runs"),
            sweep: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.width == 0 || self.batch_size == 0 {
            return bad("width and batch_size must be positive".into());
        }
        if !(self.optimizer.lr() > 0.0 && self.optimizer.lr().is_finite()) {
            return bad(format!("lr must be positive, got {}", self.optimizer.lr()));
        }
        if let OptimizerConfig::SgdMomentum { momentum, .. } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return bad(format!("momentum must lie in [0, 1), got {momentum}"));
            }
        }
        // written so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !self.model.supports(self.task) {
            return bad(format!("model {} cannot run task {}", self.model, self.task));
        }
        if matches!(self.train_size, Some(0)) || matches!(self.test_size, Some(0)) {
            return bad("dataset sizes must be positive".into());
        }
        for spec in std::iter::once(&self.entanglement).chain(&self.sweep) {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            let vector_model = matches!(self.model, ModelKind::ResMlp | ModelKind::Lstm);
            if vector_model && spec.kind.is_conv() {
                return bad(format!("{} entanglement needs a conv or transformer model", spec.kind));
            }
        }
        Ok(())
    }

    /// Specs a sweep runs: the `[sweep]` list, or the single configured spec.
    pub fn sweep_specs(&self) -> Vec<EntanglementSpec> {
        if self.sweep.is_empty() {
            vec![self.entanglement.clone()]
        } else {
            self.sweep.clone()
        }
    }

    pub fn with_entanglement(&self, spec: EntanglementSpec) -> Self {
        Self {
            entanglement: spec,
            ..self.clone()
        }
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[experiment]\n");
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("task", self.task.to_string());
        kv("model", self.model.to_string());
        kv("depth", self.depth.to_string());
        kv("width", self.width.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        kv("seeds", seeds.join(", "));
        if let Some(n) = self.train_size {
            kv("train_size", n.to_string());
        }
        if let Some(n) = self.test_size {
            kv("test_size", n.to_string());
        }
        kv("lstm_mode", self.lstm_mode.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        let e = &self.entanglement;
        s.push_str("\n[entanglement]\n");
        s.push_str(&format!(
            "kind = {}\ngamma = {}\nkernel_size = {}\nseed = {}\n",
            e.kind, e.gamma, e.kernel_size, e.seed
        ));
        s.push_str("\n[optimizer]\n");
        match self.optimizer {
            OptimizerConfig::SgdMomentum { lr, momentum } => {
                s.push_str(&format!("name = sgd_momentum\nlr = {lr}\nmomentum = {momentum}\n"))
            }
            OptimizerConfig::Adam { lr } => s.push_str(&format!("name = adam\nlr = {lr}\n")),
        }
        s.push_str(&format!("clip_norm = {}\n", self.clip_norm));
        if !self.sweep.is_empty() {
            s.push_str("\n[sweep]\n");
            for spec in &self.sweep {
                s.push_str(&format!("entanglement = {spec}\n"));
            }
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        text.parse()
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut pairs: Vec<(String, String, String, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "experiment" | "entanglement" | "optimizer" | "sweep") {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", lineno + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside any section", lineno + 1)));
            }
            pairs.push((section.clone(), k.trim().to_string(), v.trim().to_string(), lineno + 1));
        }

        let get = |sec: &str, key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(s, k, _, _)| s == sec && k == key)
                .map(|(_, _, v, _)| v.as_str())
        };
        let task: Task = get("experiment", "task")
            .ok_or_else(|| Error::Config("missing experiment.task".into()))?
            .parse()?;
        let model: ModelKind = get("experiment", "model")
            .ok_or_else(|| Error::Config("missing experiment.model".into()))?
            .parse()?;
        let mut cfg = ExperimentConfig::new(task, model);

        let mut kind = EntanglementKind::Identity;
        let mut ent_fields: Vec<(&str, &str)> = Vec::new();
        let mut opt_name = None;
        let mut lr = None;
        let mut momentum = 0.9;

        for (sec, k, v, lineno) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match (sec.as_str(), k) {
                ("experiment", "task" | "model") => {}
                ("experiment", "depth") => cfg.depth = parse_num(k, v)?,
                ("experiment", "width" | "channels") => cfg.width = parse_num(k, v)?,
                ("experiment", "epochs") => cfg.epochs = parse_num(k, v)?,
                ("experiment", "batch_size") => cfg.batch_size = parse_num(k, v)?,
                ("experiment", "train_size") => cfg.train_size = Some(parse_num(k, v)?),
                ("experiment", "test_size") => cfg.test_size = Some(parse_num(k, v)?),
                ("experiment", "lstm_mode") => cfg.lstm_mode = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
                ("experiment", "output_dir") => cfg.output_dir = PathBuf::from(v),
                ("experiment", "seeds") => {
                    cfg.seeds = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_num(k, s))
                        .collect::<Result<_>>()?
                }
                ("entanglement", "kind") => {
                    kind = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
                }
                ("entanglement", "gamma" | "kernel_size" | "seed") => ent_fields.push((k, v)),
                ("optimizer", "name") => opt_name = Some(v),
                ("optimizer", "lr") => lr = Some(parse_num::<f64>(k, v)?),
                ("optimizer", "momentum") => momentum = parse_num(k, v)?,
                ("optimizer", "clip_norm") => cfg.clip_norm = parse_num(k, v)?,
                ("sweep", "entanglement") => cfg
                    .sweep
                    .push(v.parse().map_err(|e: Error| Error::Config(format!("line {lineno}: {e}")))?),
                _ => return Err(Error::Config(format!("line {lineno}: unknown key {sec}.{k}"))),
            }
        }

        let mut spec = EntanglementSpec::new(kind);
        for (k, v) in ent_fields {
            match k {
                "gamma" => spec.gamma = parse_num(k, v)?,
                "kernel_size" => spec.kernel_size = parse_num(k, v)?,
                _ => spec.seed = parse_num(k, v)?,
            }
        }
        cfg.entanglement = spec;

        cfg.optimizer = match opt_name {
            None => {
                let d = OptimizerConfig::default_for(model);
                match (d, lr) {
                    (OptimizerConfig::SgdMomentum { .. }, Some(lr)) => OptimizerConfig::SgdMomentum { lr, momentum },
                    (OptimizerConfig::Adam { .. }, Some(lr)) => OptimizerConfig::Adam { lr },
                    (OptimizerConfig::SgdMomentum { lr, .. }, None) => OptimizerConfig::SgdMomentum { lr, momentum },
                    (d, None) => d,
                }
            }
            Some("sgd_momentum" | "sgd") => OptimizerConfig::SgdMomentum {
                lr: lr.unwrap_or(0.05),
                momentum,
            },
            Some("adam") => OptimizerConfig::Adam { lr: lr.unwrap_or(5e-4) },
            Some(other) => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
# spiral baseline
[experiment]
task = spiral2d
model = res_mlp
depth = 4
width = 16
epochs = 30
seeds = 1, 2, 3
output_dir = runs/spiral

[entanglement]
kind = dense
gamma = 0.1

[optimizer]
name = sgd_momentum
lr = 0.05

[sweep]
entanglement = kind=dense gamma=0.5
entanglement = kind=dense gamma=0.5
entanglement = none
";

    #[test]
    fn parses_and_round_trips() {
        let cfg: ExperimentConfig = SAMPLE.parse().unwrap();
        assert_eq!(cfg.depth, 4);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.entanglement.kind, EntanglementKind::Dense);
        assert_eq!(cfg.entanglement.gamma, 0.1);
        assert_eq!(cfg.optimizer, OptimizerConfig::SgdMomentum { lr: 0.05, momentum: 0.9 });
        assert_eq!(cfg.sweep.len(), 3);
        assert_eq!(cfg.sweep[0], cfg.sweep[1]);
        let again: ExperimentConfig = cfg.to_text().parse().unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = "[experiment]\ntask = spiral2d\nmodel = res_mlp\n";
        assert!(base.parse::<ExperimentConfig>().is_ok());
        for extra in [
            "depth = 0\n",
            "seeds =\n",
            "bogus = 1\n",
            "[optimizer]\nlr = -1\n",
            "[entanglement]\nkind = spatial\n",
            "[entanglement]\ngamma = 2\n",
            "[nowhere]\n",
        ] {
            assert!(format!("{base}{extra}").parse::<ExperimentConfig>().is_err(), "{extra}");
        }
        assert!("[experiment]\ntask = copy_memory\nmodel = res_mlp\n".parse::<ExperimentConfig>().is_err());
        assert!("[experiment]\ntask = mnist\nmodel = res_mlp\n".parse::<ExperimentConfig>().is_err());
    }

    #[test]
    fn lstm_defaults_to_adam() {
        let cfg: ExperimentConfig = "[experiment]\ntask = copy_memory\nmodel = lstm\n".parse().unwrap();
        assert_eq!(cfg.optimizer, OptimizerConfig::Adam { lr: 5e-4 });
    }
}
