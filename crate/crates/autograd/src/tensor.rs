//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is built on.
//!
//! Every kernel here is a plain value-level function. Shape errors are programmer
//! errors at this layer and panic with the offending shapes; user-facing validation
//! lives in the model crates.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Geometry of a square-kernel 2-D convolution over an `[N, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Shape of the column matrix: `[C*k*k, N*OH*OW]`.
    pub fn cols_shape(&self) -> [usize; 2] {
        [self.c * self.k * self.k, self.n * self.out_h() * self.out_w()]
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading `shape` while iterating over `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    assert!(shape.len() <= out.len(), "cannot broadcast {shape:?} to {out:?}");
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + pad;
        assert!(
            shape[i] == out[o] || shape[i] == 1,
            "cannot broadcast {shape:?} to {out:?}"
        );
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Row-major walk over `shape` one innermost row at a time. `f` receives the row's
/// starting offsets into two strided operands, the row length and the operands'
/// innermost strides.
#[inline]
fn walk_rows(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    if shape.is_empty() {
        f(0, 0, 1, 0, 0);
        return;
    }
    if shape.contains(&0) {
        return;
    }
    let nd = shape.len();
    let inner = shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer = numel(&shape[..nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..outer {
        f(oa, ob, inner, ia, ib);
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Output columns `ox in lo..hi` for which `ox * stride + shift` lies in `0..w`.
#[inline]
fn valid_range(ow: usize, stride: isize, shift: isize, w: isize) -> (usize, usize) {
    let lo = if shift >= 0 { 0 } else { ((-shift) + stride - 1) / stride };
    let hi = if w - shift <= 0 { 0 } else { (w - shift + stride - 1) / stride };
    let lo = (lo as usize).min(ow);
    (lo, (hi as usize).clamp(lo, ow))
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(shape, vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self::new(shape, (0..numel(shape)).map(&mut f).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| StandardNormal.sample(rng))
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Tensor {
                shape: self.shape.clone(),
                data,
            };
        }
        let out = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape)
        });
        if other.data.len() == 1 {
            let b = other.data[0];
            let data = self.data.iter().map(|&a| f(a, b)).collect();
            return Tensor::new(&out, data);
        }
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = Vec::with_capacity(numel(&out));
        let (a, b) = (&self.data, &other.data);
        walk_rows(&out, &sa, &sb, |oa, ob, n, ia, ib| match (ia, ib) {
            (1, 0) => {
                let bv = b[ob];
                data.extend(a[oa..oa + n].iter().map(|&x| f(x, bv)));
            }
            (0, 1) => {
                let av = a[oa];
                data.extend(b[ob..ob + n].iter().map(|&y| f(av, y)));
            }
            (1, 1) => data.extend(a[oa..oa + n].iter().zip(&b[ob..ob + n]).map(|(&x, &y)| f(x, y))),
            _ => data.extend((0..n).map(|j| f(a[oa + j * ia], b[ob + j * ib]))),
        });
        Tensor::new(&out, data)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let sa = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(numel(shape));
        walk_rows(shape, &sa, &sa, |oa, _, n, ia, _| {
            if ia == 0 {
                data.extend(std::iter::repeat_n(self.data[oa], n));
            } else {
                data.extend((0..n).map(|j| self.data[oa + j * ia]));
            }
        });
        Tensor::new(shape, data)
    }

    /// Sum over the axes that `shape` broadcasts along; the inverse of `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let st = broadcast_strides(shape, &self.shape);
        let ss = contiguous_strides(&self.shape);
        let mut out = vec![0.0; numel(shape)];
        walk_rows(&self.shape, &ss, &st, |i, o, n, _, io| {
            let row = &self.data[i..i + n];
            if io == 0 {
                out[o] += row.iter().sum::<f64>();
            } else {
                for (j, v) in row.iter().enumerate() {
                    out[o + j * io] += v;
                }
            }
        });
        Tensor::new(shape, out)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.shape.len(), "permutation rank mismatch");
        let in_strides = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        walk_rows(&out_shape, &src_strides, &src_strides, |o, _, n, io, _| {
            if io == 1 {
                data.extend_from_slice(&self.data[o..o + n]);
            } else {
                data.extend((0..n).map(|j| self.data[o + j * io]));
            }
        });
        Tensor::new(&out_shape, data)
    }

    /// `op(a) · op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert!(a.ndim() == 2 && b.ndim() == 2, "matmul needs 2-D operands");
        let (ar, ac) = (a.shape[0], a.shape[1]);
        let (br, bc) = (b.shape[0], b.shape[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims: {:?} x {:?} (ta={ta}, tb={tb})", a.shape, b.shape);
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: the pointers cover `a`, `b` and `out` exactly with the strides given.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// Unfold an `[N, C, H, W]` image into a `[C*k*k, N*OH*OW]` column matrix (zero padding).
    pub fn im2col(&self, g: &ConvGeom) -> Tensor {
        assert_eq!(self.shape, g.image_shape(), "im2col geometry mismatch");
        let (oh, ow) = (g.out_h(), g.out_w());
        let [rows, ncols] = g.cols_shape();
        let mut out = vec![0.0; rows * ncols];
        let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
        for ci in 0..g.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut out[row * ncols..(row + 1) * ncols];
                    for ni in 0..g.n {
                        let src = &self.data[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..oh {
                            let iy = oy as isize * s + ki as isize - p;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let base = (ni * oh + oy) * ow;
                            let srow = &src[iy as usize * g.w..][..g.w];
                            let (lo, hi) = valid_range(ow, s, kj as isize - p, w);
                            let drow = &mut dst[base..base + ow];
                            if s == 1 {
                                let off = (lo as isize + kj as isize - p) as usize;
                                drow[lo..hi].copy_from_slice(&srow[off..off + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    drow[ox] = srow[(ox as isize * s + kj as isize - p) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[rows, ncols], out)
    }

    /// Adjoint of [`Tensor::im2col`]: scatter-add columns back into an image.
    pub fn col2im(&self, g: &ConvGeom) -> Tensor {
        let [rows, ncols] = g.cols_shape();
        assert_eq!(self.shape, [rows, ncols], "col2im geometry mismatch");
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; numel(&g.image_shape())];
        let (h, w, k, s, p) = (g.h as isize, g.w as isize, g.k, g.stride as isize, g.pad as isize);
        for ci in 0..g.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &self.data[row * ncols..(row + 1) * ncols];
                    for ni in 0..g.n {
                        let dst = &mut out[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..oh {
                            let iy = oy as isize * s + ki as isize - p;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let base = (ni * oh + oy) * ow;
                            let drow = &mut dst[iy as usize * g.w..][..g.w];
                            let srow = &src[base..base + ow];
                            let (lo, hi) = valid_range(ow, s, kj as isize - p, w);
                            if s == 1 {
                                let off = (lo as isize + kj as isize - p) as usize;
                                for (d, v) in drow[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for ox in lo..hi {
                                    drow[(ox as isize * s + kj as isize - p) as usize] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&g.image_shape(), out)
    }

    /// Nearest-neighbour 2x upsampling of an `[N, C, H, W]` tensor.
    pub fn upsample2x(&self) -> Tensor {
        assert_eq!(self.ndim(), 4, "upsample2x needs NCHW");
        let (nc, h, w) = (self.shape[0] * self.shape[1], self.shape[2], self.shape[3]);
        let mut out = vec![0.0; nc * 4 * h * w];
        for plane in 0..nc {
            let src = &self.data[plane * h * w..][..h * w];
            let dst = &mut out[plane * 4 * h * w..][..4 * h * w];
            for (y, drow) in dst.chunks_exact_mut(2 * w).enumerate() {
                let srow = &src[(y / 2) * w..][..w];
                for (pair, &v) in drow.chunks_exact_mut(2).zip(srow) {
                    pair[0] = v;
                    pair[1] = v;
                }
            }
        }
        Tensor::new(&[self.shape[0], self.shape[1], 2 * h, 2 * w], out)
    }

    /// Sum over non-overlapping 2x2 windows; the adjoint of [`Tensor::upsample2x`].
    pub fn pool_sum2x(&self) -> Tensor {
        assert_eq!(self.ndim(), 4, "pool_sum2x needs NCHW");
        let (nc, h, w) = (self.shape[0] * self.shape[1], self.shape[2], self.shape[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "pool_sum2x needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * oh * ow];
        for plane in 0..nc {
            let src = &self.data[plane * h * w..][..h * w];
            let dst = &mut out[plane * oh * ow..][..oh * ow];
            for y in 0..h {
                for x in 0..w {
                    dst[(y / 2) * ow + x / 2] += src[y * w + x];
                }
            }
        }
        Tensor::new(&[self.shape[0], self.shape[1], oh, ow], out)
    }

    fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
        (numel(&shape[..axis]), numel(&shape[axis + 1..]))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let mut shape = first.to_vec();
        shape[axis] = parts.iter().map(|t| t.shape[axis]).sum();
        for t in parts {
            let mut s = t.shape.clone();
            s[axis] = shape[axis];
            assert_eq!(s, shape, "concat shapes disagree off-axis");
        }
        let (outer, inner) = Self::split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for t in parts {
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(&shape, data)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[axis], "slice out of range");
        let (outer, inner) = Self::split_at_axis(&self.shape, axis);
        let full = self.shape[axis] * inner;
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * full + start * inner..][..len * inner]);
        }
        Tensor::new(&shape, data)
    }

    /// Zero-pad along one axis; the adjoint of [`Tensor::slice_axis`].
    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let (outer, inner) = Self::split_at_axis(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape[axis] += before + after;
        let chunk = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            data.extend(std::iter::repeat_n(0.0, before * inner));
            data.extend_from_slice(&self.data[o * chunk..(o + 1) * chunk]);
            data.extend(std::iter::repeat_n(0.0, after * inner));
        }
        Tensor::new(&shape, data)
    }
}
