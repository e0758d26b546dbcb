//! Forward kernels over [`Tensor`] values.
//!
//! Matrix-shaped operations treat the last axis as columns and all leading
//! axes as rows. Each kernel validates shapes and returns a fresh tensor.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Stride, kernel and zero padding of a 3D pooling convolution, ordered (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub stride: [usize; 3],
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolConfig {
    /// Halves H and W, keeps T: stride (1,2,2), kernel (3,3,3), padding (1,1,1).
    pub const HALVE_SPATIAL: PoolConfig = PoolConfig {
        stride: [1, 2, 2],
        kernel: [3, 3, 3],
        padding: [1, 1, 1],
    };

    /// `floor((extent + 2p − k) / s) + 1`, or `None` when that is below 1.
    pub fn out_extent(&self, axis: usize, extent: usize) -> Option<usize> {
        let s = self.stride[axis];
        if s == 0 {
            return None;
        }
        let padded = extent + 2 * self.padding[axis];
        if padded < self.kernel[axis] {
            return None;
        }
        Some((padded - self.kernel[axis]) / s + 1)
    }

    pub fn out_shape(&self, t: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        let dims = [t, h, w];
        let mut out = [0; 3];
        for axis in 0..3 {
            out[axis] = self.out_extent(axis, dims[axis]).ok_or_else(|| {
                Error::Config(format!(
                    "pooling {self:?} gives a nonpositive output extent on axis {axis} (input {dims:?})"
                ))
            })?;
        }
        Ok(out)
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

fn replace_last(shape: &[usize], n: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    match out.last_mut() {
        Some(last) => *last = n,
        None => out.push(n),
    }
    out
}

/// `C = A · B` with `A` viewed as (rows, k) and `B` of shape (k, n).
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.rows_cols();
    if b.rank() != 2 || b.shape()[0] != k || a.rank() == 0 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}: inner extents differ", a.shape(), b.shape()),
        ));
    }
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out);
    Ok(Tensor::from_parts(replace_last(a.shape(), n), out))
}

/// `C = A · Bᵀ` with `A` (m, k) and `B` (n, k).
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.rows_cols();
    let (n, kb) = b.rows_cols();
    if a.rank() != 2 || b.rank() != 2 || k != kb {
        return Err(Error::shape(
            "matmul_nt",
            format!("{:?} · {:?}ᵀ: inner extents differ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize, T::zero(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} + {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Adds a length-`n` bias to every row of a (rows, n) tensor.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = x.rows_cols();
    if bias.numel() != n || bias.rank() != 1 {
        return Err(Error::shape(
            "add_bias",
            format!("bias {:?} does not match rows of {:?}", bias.shape(), x.shape()),
        ));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n.max(1)) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub fn scale<T: Real>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

/// Row-wise softmax over the last axis, stabilised by subtracting the row max.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (_, n) = x.rows_cols();
    let mut data = x.data().to_vec();
    if n > 0 {
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Layer norm output plus the per-row mean and reciprocal standard deviation.
pub struct LayerNormOut<T> {
    pub out: Tensor<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<LayerNormOut<T>> {
    let (m, d) = x.rows_cols();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} do not match last axis of {:?}",
                gamma.shape(),
                beta.shape(),
                x.shape()
            ),
        ));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap_or_else(T::one);
    let mut out = vec![T::zero(); m * d];
    let mut means = Vec::with_capacity(m);
    let mut rstds = Vec::with_capacity(m);
    for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, (o, &v)) in dst.iter_mut().zip(row).enumerate() {
            *o = (v - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok(LayerNormOut {
        out: Tensor::from_parts(x.shape().to_vec(), out),
        mean: means,
        rstd: rstds,
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Geometry of one depthwise pooling convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub channels: usize,
    pub cfg: PoolConfig,
}

impl PoolGeometry {
    pub fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, cfg: PoolConfig) -> Result<Self> {
        let [t, h, wd, c] = match *x.shape() {
            [t, h, w, c] => [t, h, w, c],
            _ => {
                return Err(Error::shape(
                    "conv3d_pool",
                    format!("input must be (T, H, W, C), got {:?}", x.shape()),
                ))
            }
        };
        let expected = [cfg.kernel[0], cfg.kernel[1], cfg.kernel[2], c];
        if w.shape() != expected {
            return Err(Error::shape(
                "conv3d_pool",
                format!("kernel weights {:?}, expected {expected:?}", w.shape()),
            ));
        }
        let output = cfg.out_shape(t, h, wd)?;
        Ok(Self {
            input: [t, h, wd],
            output,
            channels: c,
            cfg,
        })
    }

    /// Calls `f(out_offset, in_offset, tap_offset)` for every in-bounds
    /// (output position, kernel tap) pair; offsets point at channel 0.
    #[inline]
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [to, ho, wo] = self.output;
        let [kt, kh, kw] = self.cfg.kernel;
        let [st, sh, sw] = self.cfg.stride;
        let [pt, ph, pw] = self.cfg.padding;
        let c = self.channels;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let out_off = ((ot * ho + oh) * wo + ow) * c;
                    for a in 0..kt {
                        let it = (ot * st + a) as isize - pt as isize;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let ih = (oh * sh + b) as isize - ph as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            for e in 0..kw {
                                let iw = (ow * sw + e) as isize - pw as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                let in_off =
                                    ((it as usize * hi + ih as usize) * wi + iw as usize) * c;
                                let tap_off = ((a * kh + b) * kw + e) * c;
                                f(out_off, in_off, tap_off);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise 3D convolution with zero padding: every channel has its own
/// (kT, kH, kW) kernel and channels never mix.
pub fn conv3d_pool<T: Real>(x: &Tensor<T>, w: &Tensor<T>, cfg: PoolConfig) -> Result<Tensor<T>> {
    let geo = PoolGeometry::new(x, w, cfg)?;
    let c = geo.channels;
    let [to, ho, wo] = geo.output;
    let mut out = vec![T::zero(); to * ho * wo * c];
    let xd = x.data();
    let wd = w.data();
    geo.for_each_tap(|o, i, k| {
        let dst = &mut out[o..o + c];
        for ((d, &xv), &wv) in dst.iter_mut().zip(&xd[i..i + c]).zip(&wd[k..k + c]) {
            *d = *d + xv * wv;
        }
    });
    Ok(Tensor::from_parts(vec![to, ho, wo, c], out))
}

/// Concatenates along axis 0; all other extents must agree.
pub fn concat_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if first.rank() == 0 {
        return Err(Error::shape("concat", "cannot concatenate scalars"));
    }
    let tail = &first.shape()[1..];
    let mut rows = 0;
    for p in parts {
        if p.rank() == 0 || &p.shape()[1..] != tail {
            return Err(Error::shape(
                "concat",
                format!("{:?} does not stack onto {:?}", p.shape(), first.shape()),
            ));
        }
        rows += p.shape()[0];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = rows;
    Ok(Tensor::from_parts(shape, data))
}

/// Rows `start..start + len` along axis 0.
pub fn slice_rows<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || start + len > x.shape()[0] {
        return Err(Error::shape(
            "slice",
            format!("rows {start}..{} out of {:?}", start + len, x.shape()),
        ));
    }
    let inner: usize = x.shape()[1..].iter().product();
    let data = x.data()[start * inner..(start + len) * inner].to_vec();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Concatenates 2D tensors along the column axis.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
    let m = first.rows_cols().0;
    if parts.iter().any(|p| p.rank() != 2 || p.shape()[0] != m) {
        return Err(Error::shape(
            "concat_cols",
            "all inputs must be 2D with equal row counts",
        ));
    }
    let n: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![m, n], data))
}

/// Columns `start..start + len` of a 2D tensor.
pub fn slice_cols<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 || start + len > x.shape()[1] {
        return Err(Error::shape(
            "slice_cols",
            format!("columns {start}..{} out of {:?}", start + len, x.shape()),
        ));
    }
    let m = x.shape()[0];
    let mut data = Vec::with_capacity(m * len);
    for i in 0..m {
        data.extend_from_slice(&x.row(i)[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![m, len], data))
}

/// Mean over rows: (m, n) → (1, n).
pub fn mean_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.rows_cols();
    if m == 0 || x.rank() == 0 {
        return Err(Error::shape("mean", format!("no rows in {:?}", x.shape())));
    }
    let inv = T::one() / T::from_usize(m).unwrap_or_else(T::one);
    let mut out = vec![T::zero(); n];
    for row in x.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    for o in &mut out {
        *o = *o * inv;
    }
    Ok(Tensor::from_parts(vec![1, n], out))
}

pub fn sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}

/// Gathers rows of a (V, d) table.
pub fn embedding<T: Real>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::shape("embedding", "table must be 2D"));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Input(format!("token id {id} outside vocabulary of {v}")));
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], data))
}

/// Softmax cross-entropy of a single logit vector against a class label.
/// Returns the loss and the class probabilities.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Vec<T>)> {
    let (m, c) = logits.rows_cols();
    if m != 1 || label >= c {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} with label {label}", logits.shape()),
        ));
    }
    let probs = softmax_rows(logits).into_vec();
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.data().iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    Ok((lse - logits.data()[label], probs))
}
