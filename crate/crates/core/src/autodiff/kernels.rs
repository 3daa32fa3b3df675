//! Raw loops behind the graph ops. Everything is row-major and allocation is
//! left to the caller where it matters.

use super::Padding;

/// `out[m, n] += a[m, k] * b[k, n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
fn source_index(pos: usize, offset: usize, pad: usize, len: usize, padding: Padding) -> Option<usize> {
    let p = pos as isize + offset as isize - pad as isize;
    match padding {
        Padding::Zero => (p >= 0 && (p as usize) < len).then_some(p as usize),
        Padding::Circular => Some(p.rem_euclid(len as isize) as usize),
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2dDims {
    fn for_each_tap(&self, padding: Padding, mut f: impl FnMut(usize, usize, usize)) {
        // f(out_base, in_base, kernel_base)
        let pad = self.k / 2;
        for b in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    let out_base = ((b * self.h + y) * self.w + x) * self.cout;
                    for ky in 0..self.k {
                        let Some(sy) = source_index(y, ky, pad, self.h, padding) else { continue };
                        for kx in 0..self.k {
                            let Some(sx) = source_index(x, kx, pad, self.w, padding) else { continue };
                            let in_base = ((b * self.h + sy) * self.w + sx) * self.cin;
                            let k_base = (ky * self.k + kx) * self.cin * self.cout;
                            f(out_base, in_base, k_base);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], d: Conv2dDims, padding: Padding) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.h * d.w * d.cout];
    d.for_each_tap(padding, |ob, ib, kb| {
        for ci in 0..d.cin {
            let v = x[ib + ci];
            if v == 0.0 {
                continue;
            }
            let krow = &kernel[kb + ci * d.cout..kb + (ci + 1) * d.cout];
            for (o, &kv) in out[ob..ob + d.cout].iter_mut().zip(krow) {
                *o += v * kv;
            }
        }
    });
    out
}

/// Adjoint of [`conv2d_forward`] with respect to the input.
pub(crate) fn conv2d_backward_input(g: &[f64], kernel: &[f64], d: Conv2dDims, padding: Padding) -> Vec<f64> {
    let mut gx = vec![0.0; d.n * d.h * d.w * d.cin];
    d.for_each_tap(padding, |ob, ib, kb| {
        let grow = &g[ob..ob + d.cout];
        for ci in 0..d.cin {
            let krow = &kernel[kb + ci * d.cout..kb + (ci + 1) * d.cout];
            let mut s = 0.0;
            for (gv, kv) in grow.iter().zip(krow) {
                s += gv * kv;
            }
            gx[ib + ci] += s;
        }
    });
    gx
}

pub(crate) fn conv2d_backward_kernel(g: &[f64], x: &[f64], d: Conv2dDims, padding: Padding) -> Vec<f64> {
    let mut gk = vec![0.0; d.k * d.k * d.cin * d.cout];
    d.for_each_tap(padding, |ob, ib, kb| {
        let grow = &g[ob..ob + d.cout];
        for ci in 0..d.cin {
            let v = x[ib + ci];
            if v == 0.0 {
                continue;
            }
            let krow = &mut gk[kb + ci * d.cout..kb + (ci + 1) * d.cout];
            for (o, gv) in krow.iter_mut().zip(grow) {
                *o += v * gv;
            }
        }
    });
    gk
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv1dDims {
    pub n: usize,
    pub l: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv1dDims {
    fn for_each_tap(&self, padding: Padding, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.k / 2;
        for b in 0..self.n {
            for t in 0..self.l {
                let out_base = (b * self.l + t) * self.cout;
                for kt in 0..self.k {
                    let Some(st) = source_index(t, kt, pad, self.l, padding) else { continue };
                    f(out_base, (b * self.l + st) * self.cin, kt * self.cin * self.cout);
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(x: &[f64], kernel: &[f64], d: Conv1dDims, padding: Padding) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.l * d.cout];
    d.for_each_tap(padding, |ob, ib, kb| {
        for ci in 0..d.cin {
            let v = x[ib + ci];
            if v == 0.0 {
                continue;
            }
            let krow = &kernel[kb + ci * d.cout..kb + (ci + 1) * d.cout];
            for (o, &kv) in out[ob..ob + d.cout].iter_mut().zip(krow) {
                *o += v * kv;
            }
        }
    });
    out
}

pub(crate) fn conv1d_backward_input(g: &[f64], kernel: &[f64], d: Conv1dDims, padding: Padding) -> Vec<f64> {
    let mut gx = vec![0.0; d.n * d.l * d.cin];
    d.for_each_tap(padding, |ob, ib, kb| {
        let grow = &g[ob..ob + d.cout];
        for ci in 0..d.cin {
            let krow = &kernel[kb + ci * d.cout..kb + (ci + 1) * d.cout];
            gx[ib + ci] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    gx
}

pub(crate) fn conv1d_backward_kernel(g: &[f64], x: &[f64], d: Conv1dDims, padding: Padding) -> Vec<f64> {
    let mut gk = vec![0.0; d.k * d.cin * d.cout];
    d.for_each_tap(padding, |ob, ib, kb| {
        let grow = &g[ob..ob + d.cout];
        for ci in 0..d.cin {
            let v = x[ib + ci];
            let krow = &mut gk[kb + ci * d.cout..kb + (ci + 1) * d.cout];
            for (o, gv) in krow.iter_mut().zip(grow) {
                *o += v * gv;
            }
        }
    });
    gk
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
