//! Convolution, ELU, max-pooling and nearest upsampling with their exact
//! backward passes. Activations are channel-major, x fastest.

use rand::Rng;
use rayon::prelude::*;

use crate::net::{cast, Scalar};

/// Zero-padded copy of a channel so every tap of a `k³` kernel is a constant
/// offset into one flat buffer.
#[derive(Debug, Clone, Copy)]
struct Padded {
    p: usize,
    dims: [usize; 3],
    sy: usize,
    sz: usize,
    len: usize,
    /// First/last-exclusive margin that keeps every offset in bounds.
    m: usize,
}

impl Padded {
    fn new(dims: [usize; 3], p: usize) -> Self {
        let sy = dims[0] + 2 * p;
        let sz = sy * (dims[1] + 2 * p);
        let len = sz * (dims[2] + 2 * p);
        Padded { p, dims, sy, sz, len, m: p * (sz + sy + 1) }
    }

    fn row(&self, y: usize, z: usize) -> usize {
        (z + self.p) * self.sz + (y + self.p) * self.sy + self.p
    }

    fn pad<T: Scalar>(&self, src: &[T]) -> Vec<T> {
        let [nx, ny, nz] = self.dims;
        let mut out = vec![T::zero(); self.len];
        for z in 0..nz {
            for y in 0..ny {
                let s = nx * (y + ny * z);
                let d = self.row(y, z);
                out[d..d + nx].copy_from_slice(&src[s..s + nx]);
            }
        }
        out
    }

    fn extract<T: Scalar>(&self, src: &[T], out: &mut [T]) {
        let [nx, ny, nz] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                let s = self.row(y, z);
                let d = nx * (y + ny * z);
                out[d..d + nx].copy_from_slice(&src[s..s + nx]);
            }
        }
    }

    /// Tap offsets, kx fastest.
    fn offsets(&self, k: usize) -> Vec<isize> {
        let p = self.p as isize;
        let mut v = Vec::with_capacity(k * k * k);
        for dz in 0..k as isize {
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    v.push((dz - p) * self.sz as isize + (dy - p) * self.sy as isize + (dx - p));
                }
            }
        }
        v
    }

    fn shifted<'a, T>(&self, buf: &'a [T], off: isize) -> &'a [T] {
        let lo = (self.m as isize + off) as usize;
        &buf[lo..lo + self.len - 2 * self.m]
    }
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], w: T, x: &[T]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a = *a + w * *v;
    }
}

/// Eight independent partial sums so the reduction vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (x, y)| s + *x * *y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

/// Same-padded `k³` convolution (cross-correlation), weights laid out
/// `[cout][cin][kz][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        Conv { cin, cout, k, w: vec![T::zero(); cout * cin * k * k * k], b: vec![T::zero(); cout] }
    }

    /// Uniform in `±sqrt(6 / fan_in)`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let mut c = Conv::zeros(cin, cout, k);
        let bound = (6.0 / (cin * k * k * k) as f64).sqrt();
        c.w.iter_mut().for_each(|w| *w = cast(rng.random_range(-bound..bound)));
        c
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn forward(&self, x: &[T], dims: [usize; 3]) -> Vec<T> {
        let n = dims.iter().product::<usize>();
        debug_assert_eq!(x.len(), self.cin * n);
        let pd = Padded::new(dims, self.k / 2);
        let pads: Vec<Vec<T>> = x.par_chunks(n).map(|c| pd.pad(c)).collect();
        let offs = pd.offsets(self.k);
        let kk = self.taps();
        let mut out = vec![T::zero(); self.cout * n];
        out.par_chunks_mut(n).enumerate().for_each(|(o, dst)| {
            let mut acc = vec![T::zero(); pd.len];
            let (lo, hi) = (pd.m, pd.len - pd.m);
            for (ci, src) in pads.iter().enumerate() {
                let wrow = &self.w[(o * self.cin + ci) * kk..][..kk];
                for (w, off) in wrow.iter().zip(&offs) {
                    axpy(&mut acc[lo..hi], *w, pd.shifted(src, *off));
                }
            }
            pd.extract(&acc, dst);
            dst.iter_mut().for_each(|v| *v = *v + self.b[o]);
        });
        out
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], dims: [usize; 3], g: &[T], grads: &mut Conv<T>) -> Vec<T> {
        let n = dims.iter().product::<usize>();
        let pd = Padded::new(dims, self.k / 2);
        let pads: Vec<Vec<T>> = x.par_chunks(n).map(|c| pd.pad(c)).collect();
        let gp: Vec<Vec<T>> = g.par_chunks(n).map(|c| pd.pad(c)).collect();
        let offs = pd.offsets(self.k);
        let kk = self.taps();
        let (lo, hi) = (pd.m, pd.len - pd.m);

        grads.w.par_chunks_mut(self.cin * kk).enumerate().for_each(|(o, gw)| {
            let go = &gp[o][lo..hi];
            for (ci, src) in pads.iter().enumerate() {
                for (t, off) in offs.iter().enumerate() {
                    gw[ci * kk + t] = gw[ci * kk + t] + dot(go, pd.shifted(src, *off));
                }
            }
        });
        for (o, gb) in grads.b.iter_mut().enumerate() {
            *gb = *gb + g[o * n..(o + 1) * n].iter().copied().sum::<T>();
        }

        let mut dx = vec![T::zero(); self.cin * n];
        dx.par_chunks_mut(n).enumerate().for_each(|(ci, dst)| {
            let mut acc = vec![T::zero(); pd.len];
            for (o, go) in gp.iter().enumerate() {
                let wrow = &self.w[(o * self.cin + ci) * kk..][..kk];
                for (w, off) in wrow.iter().zip(&offs) {
                    axpy(&mut acc[lo..hi], *w, pd.shifted(go, -*off));
                }
            }
            pd.extract(&acc, dst);
        });
        dx
    }
}

pub fn elu<T: Scalar>(x: &mut [T]) {
    x.par_iter_mut().for_each(|v| {
        if *v <= T::zero() {
            *v = v.exp_m1();
        }
    });
}

/// Backward through ELU given its output `y`.
pub fn elu_backward<T: Scalar>(y: &[T], g: &mut [T]) {
    g.par_iter_mut().zip(y.par_iter()).for_each(|(g, y)| {
        if *y <= T::zero() {
            *g = *g * (*y + T::one());
        }
    });
}

/// 2×2×2 max-pooling; returns pooled values and the argmax of each window.
pub fn max_pool<T: Scalar>(x: &[T], c: usize, dims: [usize; 3]) -> (Vec<T>, Vec<usize>, [usize; 3]) {
    let out = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let (n, m) = (dims.iter().product::<usize>(), out.iter().product::<usize>());
    let mut vals = vec![T::zero(); c * m];
    let mut arg = vec![0usize; c * m];
    vals.par_chunks_mut(m).zip(arg.par_chunks_mut(m)).enumerate().for_each(|(ch, (v, a))| {
        let src = &x[ch * n..(ch + 1) * n];
        for z in 0..out[2] {
            for y in 0..out[1] {
                for xo in 0..out[0] {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for (dz, dy, dx) in WINDOW {
                        let i = (2 * xo + dx) + dims[0] * ((2 * y + dy) + dims[1] * (2 * z + dz));
                        if src[i] > best {
                            best = src[i];
                            bi = i;
                        }
                    }
                    let o = xo + out[0] * (y + out[1] * z);
                    v[o] = best;
                    a[o] = bi;
                }
            }
        }
    });
    (vals, arg, out)
}

const WINDOW: [(usize, usize, usize); 8] =
    [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)];

pub fn max_pool_backward<T: Scalar>(g: &[T], arg: &[usize], c: usize, in_voxels: usize) -> Vec<T> {
    let m = g.len() / c;
    let mut dx = vec![T::zero(); c * in_voxels];
    dx.par_chunks_mut(in_voxels).enumerate().for_each(|(ch, d)| {
        for o in 0..m {
            let i = arg[ch * m + o];
            d[i] = d[i] + g[ch * m + o];
        }
    });
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample<T: Scalar>(x: &[T], c: usize, dims: [usize; 3]) -> (Vec<T>, [usize; 3]) {
    let out = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let (n, m) = (dims.iter().product::<usize>(), out.iter().product::<usize>());
    let mut v = vec![T::zero(); c * m];
    v.par_chunks_mut(m).enumerate().for_each(|(ch, dst)| {
        let src = &x[ch * n..(ch + 1) * n];
        for z in 0..out[2] {
            for y in 0..out[1] {
                let s = dims[0] * (y / 2 + dims[1] * (z / 2));
                let d = out[0] * (y + out[1] * z);
                for xo in 0..out[0] {
                    dst[d + xo] = src[s + xo / 2];
                }
            }
        }
    });
    (v, out)
}

pub fn upsample_backward<T: Scalar>(g: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let out = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let (n, m) = (dims.iter().product::<usize>(), out.iter().product::<usize>());
    let mut dx = vec![T::zero(); c * n];
    dx.par_chunks_mut(n).enumerate().for_each(|(ch, d)| {
        let src = &g[ch * m..(ch + 1) * m];
        for z in 0..out[2] {
            for y in 0..out[1] {
                for xo in 0..out[0] {
                    let i = xo / 2 + dims[0] * (y / 2 + dims[1] * (z / 2));
                    d[i] = d[i] + src[xo + out[0] * (y + out[1] * z)];
                }
            }
        }
    });
    dx
}
