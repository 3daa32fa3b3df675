//! Constant entanglement operators for skip connections.
//!
//! A skip path `x -> x` becomes `x -> x Γ` for vector features, or a constant
//! convolution for feature maps and sequences. The dense family interpolates
//! between the identity (`gamma = 0`) and uniform mass spreading
//! (`gamma = 1`): `Γ = (gamma / n) * ones + (1 - gamma) * I`.
//!
//! Kernels use the layout `[k, k, c_in, c_out]` (2D) or `[k, c_in, c_out]`
//! (1D); applying a `1 x 1` kernel with channel matrix `M` computes `x M`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntanglementKind {
    Identity,
    None,
    Dense,
    Orthogonal,
    Spatial,
    Channel,
    ChannelSpatial,
    OrthogonalChannel,
}

impl EntanglementKind {
    pub const ALL: [EntanglementKind; 8] = [
        Self::Identity,
        Self::None,
        Self::Dense,
        Self::Orthogonal,
        Self::Spatial,
        Self::Channel,
        Self::ChannelSpatial,
        Self::OrthogonalChannel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::None => "none",
            Self::Dense => "dense",
            Self::Orthogonal => "orthogonal",
            Self::Spatial => "spatial",
            Self::Channel => "channel",
            Self::ChannelSpatial => "channel_spatial",
            Self::OrthogonalChannel => "orthogonal_channel",
        }
    }

    /// Kinds that are convolutions over a feature map or sequence.
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            Self::Spatial | Self::Channel | Self::ChannelSpatial | Self::OrthogonalChannel
        )
    }

    pub fn uses_gamma(self) -> bool {
        matches!(self, Self::Dense | Self::Spatial | Self::Channel | Self::ChannelSpatial)
    }

    pub fn uses_seed(self) -> bool {
        matches!(self, Self::Orthogonal | Self::OrthogonalChannel)
    }

    fn default_kernel_size(self) -> usize {
        match self {
            Self::Spatial | Self::ChannelSpatial => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for EntanglementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntanglementKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown entanglement kind {s:?}")))
    }
}

/// Declarative description of one entanglement operator.
///
/// Fields a kind does not use are carried along but ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct EntanglementSpec {
    pub kind: EntanglementKind,
    pub gamma: f64,
    pub kernel_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub seed: u64,
}

impl EntanglementSpec {
    pub fn new(kind: EntanglementKind) -> Self {
        Self {
            kind,
            gamma: 0.0,
            kernel_size: kind.default_kernel_size(),
            channels: 1,
            dim: 1,
            seed: 0,
        }
    }

    pub fn identity() -> Self {
        Self::new(EntanglementKind::Identity)
    }

    pub fn none() -> Self {
        Self::new(EntanglementKind::None)
    }

    pub fn dense(dim: usize, gamma: f64) -> Self {
        Self {
            dim,
            gamma,
            ..Self::new(EntanglementKind::Dense)
        }
    }

    pub fn orthogonal(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            ..Self::new(EntanglementKind::Orthogonal)
        }
    }

    pub fn conv(kind: EntanglementKind, kernel_size: usize, channels: usize, gamma: f64) -> Self {
        Self {
            kernel_size,
            channels,
            gamma,
            ..Self::new(kind)
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidKernelSize(self.kernel_size));
        }
        if self.channels == 0 || self.dim == 0 {
            return Err(Error::InvalidSpec("channels and dim must be positive".into()));
        }
        Ok(())
    }

    /// Same spec resized to the given feature width; vector kinds take it as
    /// `dim`, conv kinds as `channels`.
    pub fn sized(&self, width: usize) -> Self {
        let mut s = self.clone();
        s.dim = width;
        s.channels = width;
        s
    }

    /// The gamma that governs the smallest singular value of the operator in
    /// the refinement bounds: orthogonal and identity maps preserve norms
    /// (gamma 0), the zero map annihilates everything (gamma 1).
    pub fn effective_gamma(&self) -> f64 {
        match self.kind {
            EntanglementKind::Identity | EntanglementKind::Orthogonal | EntanglementKind::OrthogonalChannel => 0.0,
            EntanglementKind::None => 1.0,
            _ => self.gamma,
        }
    }

    /// Channel-mixing matrix for kinds that have one (vector kinds and 1x1 conv
    /// kinds). `None` for spatial kernels.
    pub fn channel_matrix(&self) -> Result<Option<DenseMatrix>> {
        self.validate()?;
        use EntanglementKind as K;
        let n = if self.kind.is_conv() { self.channels } else { self.dim };
        Ok(match self.kind {
            K::Identity => Some(DenseMatrix::identity(n)),
            K::None => Some(DenseMatrix::zeros(n, n)),
            K::Dense => Some(make_dense_gamma(n, self.gamma)?),
            K::Orthogonal | K::OrthogonalChannel => Some(make_orthogonal_gamma(n, self.seed)),
            K::Channel | K::ChannelSpatial if self.kernel_size == 1 => {
                Some(make_channel_kernel(1, n, self.gamma)?.channel_matrix()?)
            }
            K::Spatial if self.kernel_size == 1 => Some(DenseMatrix::identity(n)),
            _ => None,
        })
    }
}

impl fmt::Display for EntanglementSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kind={} gamma={} k={} c={} n={} seed={}",
            self.kind, self.gamma, self.kernel_size, self.channels, self.dim, self.seed
        )
    }
}

impl FromStr for EntanglementSpec {
    type Err = Error;

    /// Parses `kind=... gamma=... k=... c=... n=... seed=...`; only `kind` is
    /// required and a bare kind name is accepted too.
    fn from_str(s: &str) -> Result<Self> {
        let mut kind = None;
        let mut fields = Vec::new();
        for tok in s.split_whitespace() {
            match tok.split_once('=') {
                Some(("kind", v)) => kind = Some(v.parse::<EntanglementKind>()?),
                Some((k, v)) => fields.push((k, v)),
                None if kind.is_none() => kind = Some(tok.parse::<EntanglementKind>()?),
                None => return Err(Error::InvalidSpec(format!("stray token {tok:?}"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::InvalidSpec(format!("missing kind in {s:?}")))?;
        let mut spec = Self::new(kind);
        let bad = |k: &str, v: &str| Error::InvalidSpec(format!("bad value for {k}: {v:?}"));
        for (k, v) in fields {
            match k {
                "gamma" => spec.gamma = v.parse().map_err(|_| bad(k, v))?,
                "k" | "kernel_size" => spec.kernel_size = v.parse().map_err(|_| bad(k, v))?,
                "c" | "channels" => spec.channels = v.parse().map_err(|_| bad(k, v))?,
                "n" | "dim" => spec.dim = v.parse().map_err(|_| bad(k, v))?,
                "seed" => spec.seed = v.parse().map_err(|_| bad(k, v))?,
                _ => return Err(Error::InvalidSpec(format!("unknown field {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

fn check_kernel(kernel_size: usize, channels: usize, gamma: f64) -> Result<()> {
    check_gamma(gamma)?;
    if kernel_size.is_multiple_of(2) {
        return Err(Error::InvalidKernelSize(kernel_size));
    }
    if channels == 0 {
        return Err(Error::InvalidArgument("channels must be positive".into()));
    }
    Ok(())
}

/// `Γ[i][j] = gamma / n + [i == j] (1 - gamma)`.
pub fn make_dense_gamma(n: usize, gamma: f64) -> Result<DenseMatrix> {
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let base = gamma / n as f64;
    DenseMatrix::from_fn(n, n, |i, j| if i == j { base + (1.0 - gamma) } else { base })
}

/// Orthogonal factor of the QR decomposition of a seeded standard-normal
/// `n x n` sample.
pub fn make_orthogonal_gamma(n: usize, seed: u64) -> DenseMatrix {
    let mut rng = SeededRng::new(seed);
    let sample = DenseMatrix::new(n, n, rng.normal_vec(n * n)).expect("finite normal sample");
    let (q, _) = linalg::qr_decompose(&sample).expect("square");
    q
}

/// A constant convolution kernel, `[k, k, c_in, c_out]` or `[k, c_in, c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    data: Tensor,
}

impl ConvKernel {
    pub fn new(data: Tensor) -> Result<Self> {
        match data.shape() {
            [kh, kw, _, _] if kh == kw && kh % 2 == 1 => Ok(Self { data }),
            [k, _, _] if k % 2 == 1 => Ok(Self { data }),
            s => Err(Error::InvalidArgument(format!("bad kernel shape {s:?}"))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn is_2d(&self) -> bool {
        self.data.rank() == 4
    }

    pub fn kernel_size(&self) -> usize {
        self.data.shape()[0]
    }

    /// Number of spatial taps, `k^2` in 2D or `k` in 1D.
    pub fn taps(&self) -> usize {
        if self.is_2d() {
            self.kernel_size().pow(2)
        } else {
            self.kernel_size()
        }
    }

    pub fn channels_in(&self) -> usize {
        self.data.shape()[self.data.rank() - 2]
    }

    pub fn channels_out(&self) -> usize {
        self.data.last_dim()
    }

    /// `value(tap, ci, co)` with taps flattened row-major.
    pub fn value(&self, tap: usize, ci: usize, co: usize) -> f64 {
        let (cin, cout) = (self.channels_in(), self.channels_out());
        self.data.data()[(tap * cin + ci) * cout + co]
    }

    /// Sum over taps and input channels, one entry per output channel.
    pub fn output_mass(&self) -> Vec<f64> {
        let (cin, cout) = (self.channels_in(), self.channels_out());
        let mut mass = vec![0.0; cout];
        for tap in 0..self.taps() {
            for ci in 0..cin {
                for (co, m) in mass.iter_mut().enumerate() {
                    *m += self.value(tap, ci, co);
                }
            }
        }
        mass
    }

    /// Channel matrix of a 1-tap kernel.
    pub fn channel_matrix(&self) -> Result<DenseMatrix> {
        if self.taps() != 1 {
            return Err(Error::InvalidArgument(
                "channel matrix only defined for 1-tap kernels".into(),
            ));
        }
        DenseMatrix::new(self.channels_in(), self.channels_out(), self.data.data().to_vec())
    }

    /// Largest absolute entry with `ci != co`.
    pub fn max_cross_channel(&self) -> f64 {
        let mut m: f64 = 0.0;
        for tap in 0..self.taps() {
            for ci in 0..self.channels_in() {
                for co in 0..self.channels_out() {
                    if ci != co {
                        m = m.max(self.value(tap, ci, co).abs());
                    }
                }
            }
        }
        m
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }
}

fn build_kernel(shape: &[usize], taps: usize, channels: usize, center: usize, base: impl Fn(usize, usize) -> f64, gamma: f64) -> ConvKernel {
    let mut data = vec![0.0; taps * channels * channels];
    for tap in 0..taps {
        for ci in 0..channels {
            for co in 0..channels {
                data[(tap * channels + ci) * channels + co] += base(ci, co);
            }
        }
    }
    for i in 0..channels {
        data[(center * channels + i) * channels + i] += 1.0 - gamma;
    }
    ConvKernel {
        data: Tensor::from_parts(shape.to_vec(), data),
    }
}

/// Within-channel spatial averaging around an identity center tap.
pub fn make_spatial_kernel(kernel_size: usize, channels: usize, gamma: f64) -> Result<ConvKernel> {
    check_kernel(kernel_size, channels, gamma)?;
    let k = kernel_size;
    let tap = gamma / (k as f64 * k as f64);
    let center = (k / 2) * k + k / 2;
    Ok(build_kernel(
        &[k, k, channels, channels],
        k * k,
        channels,
        center,
        |ci, co| if ci == co { tap } else { 0.0 },
        gamma,
    ))
}

/// Uniform mixing over all taps and channels around an identity center tap.
/// `kernel_size = 1` is the pure channel-wise variant.
pub fn make_channel_kernel(kernel_size: usize, channels: usize, gamma: f64) -> Result<ConvKernel> {
    check_kernel(kernel_size, channels, gamma)?;
    let k = kernel_size;
    let v = gamma / (k as f64 * k as f64 * channels as f64);
    let center = (k / 2) * k + k / 2;
    Ok(build_kernel(&[k, k, channels, channels], k * k, channels, center, |_, _| v, gamma))
}

pub fn make_orthogonal_channel_kernel(channels: usize, seed: u64) -> Result<ConvKernel> {
    if channels == 0 {
        return Err(Error::InvalidArgument("channels must be positive".into()));
    }
    let q = make_orthogonal_gamma(channels, seed);
    Ok(ConvKernel {
        data: Tensor::from_parts(vec![1, 1, channels, channels], q.into_data()),
    })
}

pub fn make_identity_kernel(channels: usize, two_d: bool) -> ConvKernel {
    let eye = DenseMatrix::identity(channels).into_data();
    let shape = if two_d {
        vec![1, 1, channels, channels]
    } else {
        vec![1, channels, channels]
    };
    ConvKernel {
        data: Tensor::from_parts(shape, eye),
    }
}

/// 2D kernel for any conv-capable kind.
pub fn make_kernel_2d(spec: &EntanglementSpec) -> Result<ConvKernel> {
    spec.validate()?;
    use EntanglementKind as K;
    let c = spec.channels;
    match spec.kind {
        K::Spatial => make_spatial_kernel(spec.kernel_size, c, spec.gamma),
        K::Channel | K::ChannelSpatial => make_channel_kernel(spec.kernel_size, c, spec.gamma),
        K::OrthogonalChannel => make_orthogonal_channel_kernel(c, spec.seed),
        K::Identity => Ok(make_identity_kernel(c, true)),
        other => Err(Error::InvalidSpec(format!("{other} has no 2D kernel form"))),
    }
}

/// 1D analogue of the 2D constructors for `[L, D]` feature sequences.
pub fn make_seq_kernel(spec: &EntanglementSpec) -> Result<ConvKernel> {
    spec.validate()?;
    use EntanglementKind as K;
    let c = spec.channels;
    let k = spec.kernel_size;
    match spec.kind {
        K::Spatial => {
            let tap = spec.gamma / k as f64;
            Ok(build_kernel(&[k, c, c], k, c, k / 2, |ci, co| if ci == co { tap } else { 0.0 }, spec.gamma))
        }
        K::Channel | K::ChannelSpatial => {
            let v = spec.gamma / (k as f64 * c as f64);
            Ok(build_kernel(&[k, c, c], k, c, k / 2, |_, _| v, spec.gamma))
        }
        K::OrthogonalChannel => {
            let q = make_orthogonal_gamma(c, spec.seed);
            Ok(ConvKernel {
                data: Tensor::from_parts(vec![1, c, c], q.into_data()),
            })
        }
        K::Identity => Ok(make_identity_kernel(c, false)),
        other => Err(Error::InvalidSpec(format!("{other} has no 1D kernel form"))),
    }
}

/// A materialized skip operator, ready to apply to features.
#[derive(Debug, Clone, PartialEq)]
pub enum Entangler {
    Identity,
    Zero,
    /// Right-multiplication `x Γ` on the last axis.
    Matrix(DenseMatrix),
    Kernel2d(ConvKernel),
    Kernel1d(ConvKernel),
}

/// Feature layout a block presents to its skip path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayout {
    Vector { dim: usize },
    Map2d { channels: usize },
    Sequence { channels: usize },
}

impl Entangler {
    /// Builds the operator for a feature layout. Dense and orthogonal kinds act
    /// on the channel axis of maps and sequences; conv kinds require a spatial
    /// layout.
    pub fn build(spec: &EntanglementSpec, layout: FeatureLayout) -> Result<Self> {
        spec.validate()?;
        use EntanglementKind as K;
        let width = match layout {
            FeatureLayout::Vector { dim } => dim,
            FeatureLayout::Map2d { channels } | FeatureLayout::Sequence { channels } => channels,
        };
        let spec = spec.sized(width);
        Ok(match (spec.kind, layout) {
            (K::Identity, _) => Self::Identity,
            (K::None, _) => Self::Zero,
            (K::Dense, _) => Self::Matrix(make_dense_gamma(width, spec.gamma)?),
            (K::Orthogonal, _) => Self::Matrix(make_orthogonal_gamma(width, spec.seed)),
            (kind, FeatureLayout::Vector { .. }) => {
                return Err(Error::InvalidSpec(format!("{kind} entanglement needs spatial features")))
            }
            (_, FeatureLayout::Map2d { .. }) => Self::Kernel2d(make_kernel_2d(&spec)?),
            (_, FeatureLayout::Sequence { .. }) => Self::Kernel1d(make_seq_kernel(&spec)?),
        })
    }

    /// Flat view of the constant operator's values, for hashing and export.
    pub fn values(&self) -> Vec<f64> {
        match self {
            Self::Identity | Self::Zero => Vec::new(),
            Self::Matrix(m) => m.data().to_vec(),
            Self::Kernel2d(k) | Self::Kernel1d(k) => k.tensor().data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub spec: String,
    /// Present when the channel matrix is symmetric.
    pub eigenvalues: Option<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub spectral_norm: f64,
    pub is_orthogonal: bool,
    /// For spatial kernels: l1 and l2 norms of output channel 0's taps.
    pub tap_l1: Option<f64>,
    pub tap_l2: Option<f64>,
}

/// Grid side used to estimate the operator norm of spatial kernels.
pub const SPECTRUM_GRID: usize = 8;

pub fn spectrum_report(spec: &EntanglementSpec) -> Result<SpectrumReport> {
    spec.validate()?;
    if let Some(m) = spec.channel_matrix()? {
        let sym = linalg::frobenius_norm(&m.sub(&m.transpose())?) <= 1e-12 * linalg::frobenius_norm(&m).max(1.0);
        let eigenvalues = if sym { Some(linalg::eig_symmetric(&m)?) } else { None };
        let is_orthogonal = m.orthogonality_defect() <= 1e-8;
        return Ok(SpectrumReport {
            spec: spec.to_string(),
            eigenvalues,
            singular_values: linalg::singular_values(&m),
            spectral_norm: linalg::spectral_norm(&m, 10_000, 1e-15),
            is_orthogonal,
            tap_l1: None,
            tap_l2: None,
        });
    }
    let kernel = make_kernel_2d(spec)?;
    let c = kernel.channels_in();
    let taps: Vec<f64> = (0..kernel.taps())
        .flat_map(|t| (0..c).map(move |ci| (t, ci)))
        .map(|(t, ci)| kernel.value(t, ci, 0))
        .collect();
    let spectral_norm = crate::autodiff::conv_operator_norm(&kernel, SPECTRUM_GRID, SPECTRUM_GRID)?;
    Ok(SpectrumReport {
        spec: spec.to_string(),
        eigenvalues: None,
        singular_values: Vec::new(),
        spectral_norm,
        is_orthogonal: false,
        tap_l1: Some(taps.iter().map(|v| v.abs()).sum()),
        tap_l2: Some(linalg::l2_norm(&taps)),
    })
}

pub const KERNEL_MAGIC: &str = "ENTANGLE-KERNEL v1";

/// Operator values for export: kernels for conv kinds, `n x n` matrices for
/// vector kinds.
pub fn materialize(spec: &EntanglementSpec) -> Result<Tensor> {
    spec.validate()?;
    if spec.kind.is_conv() {
        return Ok(make_kernel_2d(spec)?.data);
    }
    let m = spec.channel_matrix()?.expect("vector kinds always have a matrix");
    let n = m.rows();
    Tensor::new(&[n, n], m.into_data())
}

/// Text export: magic line, shape line, spec line, then one value per line
/// with 17 significant digits.
pub fn format_kernel_file(spec: &EntanglementSpec, values: &Tensor) -> String {
    let mut out = String::new();
    out.push_str(KERNEL_MAGIC);
    out.push('\n');
    let shape: Vec<String> = values.shape().iter().map(usize::to_string).collect();
    out.push_str(&shape.join(" "));
    out.push('\n');
    out.push_str(&spec.to_string());
    out.push('\n');
    for v in values.data() {
        out.push_str(&format_f64(*v));
        out.push('\n');
    }
    out
}

pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_kernel_file(text: &str) -> Result<(EntanglementSpec, Tensor)> {
    let mut lines = text.lines();
    if lines.next() != Some(KERNEL_MAGIC) {
        return Err(Error::Parse("missing ENTANGLE-KERNEL v1 header".into()));
    }
    let shape: Vec<usize> = lines
        .next()
        .ok_or_else(|| Error::Parse("missing shape line".into()))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad dim {s:?}"))))
        .collect::<Result<_>>()?;
    let spec: EntanglementSpec = lines
        .next()
        .ok_or_else(|| Error::Parse("missing spec line".into()))?
        .parse()?;
    let values: Vec<f64> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse().map_err(|_| Error::Parse(format!("bad value {l:?}"))))
        .collect::<Result<_>>()?;
    Ok((spec, Tensor::new(&shape, values)?))
}

pub fn write_kernel_file(path: &Path, spec: &EntanglementSpec) -> Result<()> {
    let values = materialize(spec)?;
    fs::write(path, format_kernel_file(spec, &values))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dense_gamma_examples() {
        assert_eq!(make_dense_gamma(2, 0.0).unwrap(), DenseMatrix::identity(2));
        let g = make_dense_gamma(2, 0.5).unwrap();
        assert_eq!(g.data(), &[0.75, 0.25, 0.25, 0.75]);
        let g = make_dense_gamma(3, 1.0).unwrap();
        assert!(g.data().iter().all(|&v| close(v, 1.0 / 3.0, 1e-16)));
        assert!(matches!(make_dense_gamma(3, 1.5), Err(Error::InvalidGamma(_))));
        assert!(matches!(make_dense_gamma(3, -0.1), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn orthogonal_gamma_examples() {
        // 1x1 case is the sign of the sample under the R[i][i] >= 0 convention
        for seed in 0..8 {
            let q = make_orthogonal_gamma(1, seed);
            let sample = SeededRng::new(seed).normal();
            assert_eq!(q.data(), &[sample.signum()]);
        }
        let a = make_orthogonal_gamma(4, 7);
        let b = make_orthogonal_gamma(4, 7);
        assert_eq!(a.data(), b.data());
        for s in linalg::singular_values(&a) {
            assert!(close(s, 1.0, 1e-9));
        }
    }

    #[test]
    fn spatial_kernel_examples() {
        let k = make_spatial_kernel(3, 1, 0.9).unwrap();
        for tap in 0..9 {
            let expected = if tap == 4 { 0.2 } else { 0.1 };
            assert!(close(k.value(tap, 0, 0), expected, 1e-15), "tap {tap}");
        }
        let k = make_spatial_kernel(1, 3, 0.37).unwrap();
        assert_eq!(k.channel_matrix().unwrap(), DenseMatrix::identity(3));
        let k = make_spatial_kernel(5, 2, 0.0).unwrap();
        for tap in 0..25 {
            let want = if tap == 12 { 1.0 } else { 0.0 };
            assert_eq!(k.value(tap, 1, 1), want);
            assert_eq!(k.value(tap, 0, 1), 0.0);
        }
        assert!(matches!(make_spatial_kernel(2, 1, 0.5), Err(Error::InvalidKernelSize(2))));
    }

    #[test]
    fn channel_kernel_examples() {
        let k = make_channel_kernel(1, 4, 0.8).unwrap();
        let m = k.channel_matrix().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.4 } else { 0.2 };
                assert!(close(m.get(i, j), want, 1e-15));
            }
        }
        assert_eq!(m, make_dense_gamma(4, 0.8).unwrap());

        let k = make_channel_kernel(3, 2, 0.5).unwrap();
        assert!(close(k.value(0, 0, 1), 0.5 / 18.0, 1e-16));
        assert!(close(k.value(4, 1, 1), 0.5 / 18.0 + 0.5, 1e-15));
        assert!(close(k.value(4, 0, 1), 0.5 / 18.0, 1e-16));
        assert!(close(k.value(4, 1, 1), 0.527_777_777_777_777_8, 1e-12));
    }

    #[test]
    fn orthogonal_channel_kernel_examples() {
        assert_eq!(make_orthogonal_channel_kernel(1, 5).unwrap().tensor().data()[0].abs(), 1.0);
        let a = make_orthogonal_channel_kernel(8, 3).unwrap().channel_matrix().unwrap();
        let b = make_orthogonal_channel_kernel(8, 4).unwrap().channel_matrix().unwrap();
        assert!(a.orthogonality_defect() <= 1e-10);
        assert!(linalg::frobenius_norm(&a.sub(&b).unwrap()) > 0.0);
    }

    #[test]
    fn seq_kernel_examples() {
        let spec = EntanglementSpec::conv(EntanglementKind::Spatial, 3, 1, 0.6);
        let k = make_seq_kernel(&spec).unwrap();
        assert_eq!(k.shape(), &[3, 1, 1]);
        let taps = k.tensor().data();
        assert!(close(taps[0], 0.2, 1e-15) && close(taps[1], 0.6, 1e-15) && close(taps[2], 0.2, 1e-15));

        let k = make_seq_kernel(&EntanglementSpec::identity().sized(3)).unwrap();
        assert_eq!(k.shape(), &[1, 3, 3]);
        assert_eq!(k.channel_matrix().unwrap(), DenseMatrix::identity(3));

        let spec = EntanglementSpec::conv(EntanglementKind::Channel, 1, 3, 0.3);
        let m = make_seq_kernel(&spec).unwrap().channel_matrix().unwrap();
        assert_eq!(m, make_dense_gamma(3, 0.3).unwrap());

        assert!(make_seq_kernel(&EntanglementSpec::dense(3, 0.1)).is_err());
    }

    #[test]
    fn spectrum_report_examples() {
        let r = spectrum_report(&EntanglementSpec::dense(5, 0.25)).unwrap();
        let eig = r.eigenvalues.unwrap();
        let want = [1.0, 0.75, 0.75, 0.75, 0.75];
        for (a, b) in eig.iter().zip(want) {
            assert!(close(*a, b, 1e-9));
        }
        assert!(!r.is_orthogonal);

        let r = spectrum_report(&EntanglementSpec::orthogonal(6, 11)).unwrap();
        assert!(r.is_orthogonal);
        assert!(r.singular_values.iter().all(|s| close(*s, 1.0, 1e-9)));

        let r = spectrum_report(&EntanglementSpec::dense(4, 0.0)).unwrap();
        assert!(r.is_orthogonal);

        let r = spectrum_report(&EntanglementSpec::conv(EntanglementKind::Spatial, 3, 2, 0.5)).unwrap();
        assert!(r.eigenvalues.is_none());
        assert!(close(r.tap_l1.unwrap(), 1.0, 1e-12));
        assert!(close(r.spectral_norm, 1.0, 1e-6));
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = EntanglementSpec {
            kind: EntanglementKind::ChannelSpatial,
            gamma: 0.1,
            kernel_size: 3,
            channels: 16,
            dim: 1,
            seed: 42,
        };
        let text = spec.to_string();
        assert_eq!(text, "kind=channel_spatial gamma=0.1 k=3 c=16 n=1 seed=42");
        assert_eq!(text.parse::<EntanglementSpec>().unwrap(), spec);
        assert_eq!("identity".parse::<EntanglementSpec>().unwrap().kind, EntanglementKind::Identity);
        assert!("kind=dense gamma=2".parse::<EntanglementSpec>().is_err());
        assert!("kind=spatial k=4".parse::<EntanglementSpec>().is_err());
        assert!("kind=wobble".parse::<EntanglementSpec>().is_err());
    }

    #[test]
    fn kernel_file_round_trip() {
        let spec: EntanglementSpec = "kind=spatial gamma=0.9 k=3 c=2".parse().unwrap();
        let values = materialize(&spec).unwrap();
        let text = format_kernel_file(&spec, &values);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(KERNEL_MAGIC));
        assert_eq!(lines.next(), Some("3 3 2 2"));
        assert_eq!(lines.next(), Some("kind=spatial gamma=0.9 k=3 c=2 n=1 seed=0"));
        let (spec2, values2) = parse_kernel_file(&text).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(values2, values);
    }

    #[test]
    fn entangler_layouts() {
        let spec = EntanglementSpec::conv(EntanglementKind::Spatial, 3, 1, 0.1);
        assert!(Entangler::build(&spec, FeatureLayout::Vector { dim: 4 }).is_err());
        assert!(matches!(
            Entangler::build(&spec, FeatureLayout::Map2d { channels: 4 }).unwrap(),
            Entangler::Kernel2d(_)
        ));
        assert!(matches!(
            Entangler::build(&spec, FeatureLayout::Sequence { channels: 4 }).unwrap(),
            Entangler::Kernel1d(_)
        ));
        assert_eq!(
            Entangler::build(&EntanglementSpec::none(), FeatureLayout::Vector { dim: 3 }).unwrap(),
            Entangler::Zero
        );
    }
}
