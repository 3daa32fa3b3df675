//! `ENTANGLE-CKPT v1`: a text container of `meta key=value` lines followed by
//! named tensor sections (`tensor <name> <dims...>` then one value per line).

use std::fs;
use std::path::Path;

use crate::entangle::format_f64;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "ENTANGLE-CKPT v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Parse(format!("checkpoint missing meta {key:?}")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Parse(format!("checkpoint missing tensor {name:?}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            out.push_str(&format!("meta {k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
            for v in t.data() {
                out.push_str(&format_f64(*v));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Parse("missing ENTANGLE-CKPT v1 header".into()));
        }
        let mut ckpt = Checkpoint::new();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("bad meta line {line:?}")))?;
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Parse("tensor without name".into()))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad dim {s:?}"))))
                    .collect::<Result<_>>()?;
                let count: usize = shape.iter().product();
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    let l = lines
                        .next()
                        .ok_or_else(|| Error::Parse(format!("tensor {name} truncated")))?;
                    data.push(l.trim().parse().map_err(|_| Error::Parse(format!("bad value {l:?}")))?);
                }
                ckpt.tensors.push((name, Tensor::new(&shape, data)?));
            } else {
                return Err(Error::Parse(format!("unexpected line {line:?}")));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Checkpoint::new();
        c.set_meta("model", "res_mlp");
        c.set_meta("note", "a=b");
        c.push_tensor("w", Tensor::new(&[2, 2], vec![0.1, -2.0, 3e-300, 1.0 / 3.0]).unwrap());
        let parsed = Checkpoint::parse(&c.to_text()).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(parsed.meta("note"), Some("a=b"));
        assert!(Checkpoint::parse("nope").is_err());
    }
}
