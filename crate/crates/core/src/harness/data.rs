//! Seeded synthetic datasets.

use std::f64::consts::PI;

use super::config::Task;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 14;
pub const SEQ_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;

pub const COPY_SYMBOLS: usize = 8;
pub const COPY_RECALL: usize = 3;
pub const COPY_DELAY: usize = 50;
pub const COPY_BLANK: usize = 0;
pub const COPY_DELIMITER: usize = 9;
pub const COPY_LEN: usize = COPY_DELAY + 2 * COPY_RECALL;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, ...]` sample-major inputs.
    pub inputs: Tensor,
    /// `n * steps` class labels.
    pub targets: Vec<usize>,
    /// Labels per sample: 1 for classification, the sequence length for
    /// per-step tasks.
    pub steps: usize,
    pub classes: usize,
    /// Steps that count toward accuracy (all of them when `None`).
    pub scored_steps: Option<std::ops::Range<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and flattened labels of the given samples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let x = self.inputs.gather_outer(indices);
        let y = indices
            .iter()
            .flat_map(|&i| self.targets[i * self.steps..(i + 1) * self.steps].iter().copied())
            .collect();
        (x, y)
    }
}

/// Independent stream seeds from one run seed (splitmix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn default_sizes(task: Task) -> (usize, usize) {
    match task {
        Task::Spiral2d => (1000, 500),
        Task::DigitsLite | Task::SeqPixel | Task::PermutedSeqPixel => (5000, 1000),
        Task::CopyMemory => (2000, 400),
    }
}

/// Train and test splits with the task's default sizes.
pub fn gen_dataset(task: Task, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = default_sizes(task);
    gen_dataset_sized(task, seed, train, test)
}

pub fn gen_dataset_sized(task: Task, seed: u64, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
    if train == 0 || test == 0 {
        return Err(Error::InvalidArgument("dataset sizes must be positive".into()));
    }
    let make = |n: usize, stream: u64| -> Dataset {
        let mut rng = SeededRng::new(sub_seed(seed, stream));
        match task {
            Task::Spiral2d => spirals(n, &mut rng),
            Task::DigitsLite => digits(n, &mut rng),
            Task::SeqPixel | Task::PermutedSeqPixel => as_sequences(&digits(n, &mut rng)),
            Task::CopyMemory => copy_memory(n, &mut rng),
        }
    };
    let (mut a, mut b) = (make(train, 1), make(test, 2));
    if task == Task::PermutedSeqPixel {
        let perm = pixel_permutation(seed);
        a = permute_sequences(&a, &perm)?;
        b = permute_sequences(&b, &perm)?;
    }
    Ok((a, b))
}

/// Two interleaved one-turn spirals `r = 0.2 + 0.8 θ / 2π`, the second arm
/// rotated by π, with N(0, 0.1²) noise. Labels alternate so classes balance.
fn spirals(n: usize, rng: &mut SeededRng) -> Dataset {
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.uniform();
        let theta = 2.0 * PI * t;
        let r = 0.2 + 0.8 * t;
        let phi = theta + PI * class as f64;
        xs.push(r * phi.cos() + 0.1 * rng.normal());
        xs.push(r * phi.sin() + 0.1 * rng.normal());
        ys.push(class);
    }
    Dataset {
        inputs: Tensor::new(&[n, 2], xs).expect("finite"),
        targets: ys,
        steps: 1,
        classes: 2,
        scored_steps: None,
    }
}

// Seven-segment layout: a (top), b (upper right), c (lower right), d (bottom),
// e (lower left), f (upper left), g (middle).
const SEGMENTS: [&str; 10] = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"];

fn seg_dist(px: f64, py: f64, (x0, y0): (f64, f64), (x1, y1): (f64, f64)) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// One 14x14 glyph: seven-segment strokes under random shift, scale, slant,
/// stroke width and endpoint jitter, an occasional dropped segment, plus
/// pixel noise.
fn render_digit(digit: usize, rng: &mut SeededRng) -> Vec<f64> {
    let cx = 6.5 + rng.uniform_range(-1.5, 1.5);
    let cy = 6.5 + rng.uniform_range(-1.0, 1.0);
    let half_w = rng.uniform_range(2.2, 3.6);
    let half_h = rng.uniform_range(4.0, 5.5);
    let slant = rng.uniform_range(-0.3, 0.3);
    let width = rng.uniform_range(0.7, 1.3);
    let mut corner = |sx: f64, sy: f64| {
        let y = cy + sy * half_h + rng.uniform_range(-0.5, 0.5);
        let x = cx + sx * half_w - slant * (y - cy) + rng.uniform_range(-0.5, 0.5);
        (x, y)
    };
    let (tl, tr) = (corner(-1.0, -1.0), corner(1.0, -1.0));
    let (ml, mr) = (corner(-1.0, 0.0), corner(1.0, 0.0));
    let (bl, br) = (corner(-1.0, 1.0), corner(1.0, 1.0));
    let segs = SEGMENTS[digit];
    let dropped = if rng.uniform() < 0.08 { rng.below(segs.len()) } else { usize::MAX };
    let strokes: Vec<_> = segs
        .chars()
        .enumerate()
        .filter(|(i, _)| *i != dropped)
        .map(|(_, s)| match s {
            'a' => (tl, tr),
            'b' => (tr, mr),
            'c' => (mr, br),
            'd' => (bl, br),
            'e' => (ml, bl),
            'f' => (tl, ml),
            _ => (ml, mr),
        })
        .collect();
    let mut img = vec![0.0; SEQ_LEN];
    for (idx, px) in img.iter_mut().enumerate() {
        let (x, y) = ((idx % IMAGE_SIDE) as f64, (idx / IMAGE_SIDE) as f64);
        let d = strokes
            .iter()
            .map(|&(p, q)| seg_dist(x, y, p, q))
            .fold(f64::INFINITY, f64::min);
        *px = (1.0 - d / (2.0 * width)).max(0.0) + 0.25 * rng.normal();
    }
    img
}

fn digits(n: usize, rng: &mut SeededRng) -> Dataset {
    let mut xs = Vec::with_capacity(n * SEQ_LEN);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let d = i % 10;
        xs.extend(render_digit(d, rng));
        ys.push(d);
    }
    Dataset {
        inputs: Tensor::new(&[n, IMAGE_SIDE, IMAGE_SIDE, 1], xs).expect("finite"),
        targets: ys,
        steps: 1,
        classes: 10,
        scored_steps: None,
    }
}

/// Images read pixel by pixel in row-major order: `[n, 196, 1]`.
fn as_sequences(images: &Dataset) -> Dataset {
    let n = images.len();
    Dataset {
        inputs: images.inputs.reshape(&[n, SEQ_LEN, 1]).expect("same size"),
        ..images.clone()
    }
}

/// The fixed pixel order shared by both splits of `permuted_seq_pixel`.
pub fn pixel_permutation(seed: u64) -> Vec<usize> {
    SeededRng::new(sub_seed(seed, 99)).permutation(SEQ_LEN)
}

/// Reorders every sequence: step `t` of the output is step `perm[t]` of the
/// input.
pub fn permute_sequences(ds: &Dataset, perm: &[usize]) -> Result<Dataset> {
    let shape = ds.inputs.shape();
    if shape.len() != 3 || shape[1] != perm.len() {
        return Err(Error::InvalidArgument(format!(
            "permutation of length {} for inputs {:?}",
            perm.len(),
            shape
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    let (n, l, c) = (shape[0], shape[1], shape[2]);
    let src = ds.inputs.data();
    let mut out = Vec::with_capacity(src.len());
    for s in 0..n {
        for &p in perm {
            out.extend_from_slice(&src[(s * l + p) * c..(s * l + p + 1) * c]);
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(shape, out)?,
        ..ds.clone()
    })
}

/// Copy task: `K` symbols from `1..=8`, `T - 1` blanks, a delimiter, then `K`
/// blanks during which the symbols must be reproduced. Inputs are one-hot
/// over 10 tokens; targets are blank everywhere except the last `K` steps.
fn copy_memory(n: usize, rng: &mut SeededRng) -> Dataset {
    let vocab = COPY_DELIMITER + 1;
    let mut xs = vec![0.0; n * COPY_LEN * vocab];
    let mut ys = vec![COPY_BLANK; n * COPY_LEN];
    for s in 0..n {
        let mut tokens = vec![COPY_BLANK; COPY_LEN];
        for k in 0..COPY_RECALL {
            let sym = 1 + rng.below(COPY_SYMBOLS);
            tokens[k] = sym;
            ys[s * COPY_LEN + COPY_LEN - COPY_RECALL + k] = sym;
        }
        tokens[COPY_RECALL + COPY_DELAY - 1] = COPY_DELIMITER;
        for (t, &tok) in tokens.iter().enumerate() {
            xs[(s * COPY_LEN + t) * vocab + tok] = 1.0;
        }
    }
    Dataset {
        inputs: Tensor::new(&[n, COPY_LEN, vocab], xs).expect("finite"),
        targets: ys,
        steps: COPY_LEN,
        classes: vocab,
        scored_steps: Some(COPY_LEN - COPY_RECALL..COPY_LEN),
    }
}
