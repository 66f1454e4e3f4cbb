//! Forward and analytic backward kernels.
//!
//! Every function here is pure. Convolutions use the cross-correlation
//! convention (no kernel flip) and parallelize over the batch axis only, so
//! results are bit-identical for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{config_err, shape_err, Error, Result};

// ---------------------------------------------------------------------------
// Convolution

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dGeometry {
    /// Padding of `k / 2` per axis ("same" output size at stride 1).
    pub fn same(kernel: (usize, usize), stride: (usize, usize), groups: usize) -> Self {
        Self {
            stride,
            padding: (kernel.0 / 2, kernel.1 / 2),
            groups,
        }
    }

    pub fn pointwise() -> Self {
        Self::same((1, 1), (1, 1), 1)
    }
}

/// `floor((input + 2·pad − kernel) / stride) + 1`.
pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return config_err("stride must be positive");
    }
    if input + 2 * pad < kernel {
        return shape_err(format!(
            "padded extent {} smaller than kernel {kernel}",
            input + 2 * pad
        ));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Weight, optional bias and geometry of a static convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `C_out × C_in/groups × k_F × k_T`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: Conv2dGeometry,
}

impl<T: Real> ConvParams<T> {
    /// Convolution with default padding `k // 2`.
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let [_, _, kh, kw] = weight.dims4()?;
        let p = Self {
            weight,
            bias,
            geometry: Conv2dGeometry::same((kh, kw), stride, groups),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.geometry.padding = padding;
        self
    }

    fn validate(&self) -> Result<()> {
        let [cout, _, _, _] = self.weight.dims4()?;
        let g = self.geometry.groups;
        if g == 0 || cout % g != 0 {
            return config_err(format!("groups {g} must divide C_out {cout}"));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [cout] {
                return shape_err(format!("bias shape {:?} for C_out {cout}", b.shape()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvDims {
    fn kernel_len(&self) -> usize {
        self.cout * self.cin_g * self.kh * self.kw
    }
}

/// Validates input/weight compatibility. `cout` is the per-sample output
/// channel count (weights may be stacked per sample).
fn conv_dims(
    x_shape: &[usize],
    cout: usize,
    w_shape: &[usize],
    geom: &Conv2dGeometry,
) -> Result<ConvDims> {
    let &[b, cin, h, w] = x_shape else {
        return shape_err(format!("conv2d input must be rank 4, got {x_shape:?}"));
    };
    let &[_, cin_g, kh, kw] = w_shape else {
        return shape_err(format!("conv2d weight must be rank 4, got {w_shape:?}"));
    };
    let groups = geom.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return config_err(format!(
            "groups {groups} must divide C_in {cin} and C_out {cout}"
        ));
    }
    if cin_g * groups != cin {
        return shape_err(format!(
            "weight expects {} input channels, input has {cin}",
            cin_g * groups
        ));
    }
    let ho = output_extent(h, kh, geom.stride.0, geom.padding.0)?;
    let wo = output_extent(w, kw, geom.stride.1, geom.padding.1)?;
    Ok(ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / groups,
        groups,
        kh,
        kw,
        ho,
        wo,
        sh: geom.stride.0,
        sw: geom.stride.1,
        ph: geom.padding.0,
        pw: geom.padding.1,
    })
}

/// Output positions `o < out_len` with `0 <= o·s + k − p < n`.
#[inline]
fn valid_range(k: usize, p: usize, s: usize, n: usize, out_len: usize) -> (usize, usize) {
    if n + p <= k {
        return (0, 0);
    }
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = ((n - 1 + p - k) / s + 1).min(out_len);
    (lo.min(hi), hi)
}

fn conv_sample_forward<T: Real>(d: &ConvDims, x: &[T], w: &[T], out: &mut [T]) {
    let hw = d.h * d.w;
    let howo = d.ho * d.wo;
    for g in 0..d.groups {
        for ocg in 0..d.cout_g {
            let oc = g * d.cout_g + ocg;
            let o = &mut out[oc * howo..(oc + 1) * howo];
            for icg in 0..d.cin_g {
                let ic = g * d.cin_g + icg;
                let xc = &x[ic * hw..(ic + 1) * hw];
                let wbase = (oc * d.cin_g + icg) * d.kh * d.kw;
                for ky in 0..d.kh {
                    let (oy0, oy1) = valid_range(ky, d.ph, d.sh, d.h, d.ho);
                    for kx in 0..d.kw {
                        let (ox0, ox1) = valid_range(kx, d.pw, d.sw, d.w, d.wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = w[wbase + ky * d.kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * d.sh + ky - d.ph;
                            let orow = &mut o[oy * d.wo..(oy + 1) * d.wo];
                            let xrow = &xc[iy * d.w..(iy + 1) * d.w];
                            if d.sw == 1 {
                                let shift = kx + ox0 - d.pw;
                                for (ov, &xv) in orow[ox0..ox1]
                                    .iter_mut()
                                    .zip(&xrow[shift..shift + (ox1 - ox0)])
                                {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * d.sw + kx - d.pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_sample_backward<T: Real>(
    d: &ConvDims,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let hw = d.h * d.w;
    let howo = d.ho * d.wo;
    for g in 0..d.groups {
        for ocg in 0..d.cout_g {
            let oc = g * d.cout_g + ocg;
            let go = &dy[oc * howo..(oc + 1) * howo];
            for icg in 0..d.cin_g {
                let ic = g * d.cin_g + icg;
                let xc = &x[ic * hw..(ic + 1) * hw];
                let dxc = &mut dx[ic * hw..(ic + 1) * hw];
                let wbase = (oc * d.cin_g + icg) * d.kh * d.kw;
                for ky in 0..d.kh {
                    let (oy0, oy1) = valid_range(ky, d.ph, d.sh, d.h, d.ho);
                    for kx in 0..d.kw {
                        let (ox0, ox1) = valid_range(kx, d.pw, d.sw, d.w, d.wo);
                        let wv = w[wbase + ky * d.kw + kx];
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * d.sh + ky - d.ph;
                            for ox in ox0..ox1 {
                                let ix = ox * d.sw + kx - d.pw;
                                let g_out = go[oy * d.wo + ox];
                                dxc[iy * d.w + ix] += wv * g_out;
                                acc += g_out * xc[iy * d.w + ix];
                            }
                        }
                        dw[wbase + ky * d.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Static 2-D convolution; weight `C_out × C_in/groups × k_F × k_T`.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, &p.weight, p.bias.as_ref(), &p.geometry)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &Conv2dGeometry,
) -> Result<Tensor<T>> {
    let cout = w.shape()[0];
    let d = conv_dims(x.shape(), cout, w.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err(format!("bias shape {:?} for C_out {cout}", b.shape()));
        }
    }
    let sample_in = d.cin * d.h * d.w;
    let sample_out = d.cout * d.ho * d.wo;
    let mut out = vec![T::zero(); d.b * sample_out];
    out.par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(b, o)| {
            if let Some(bias) = bias {
                for (c, chunk) in o.chunks_mut(d.ho * d.wo).enumerate() {
                    chunk.fill(bias.data()[c]);
                }
            }
            conv_sample_forward(&d, &x.data()[b * sample_in..(b + 1) * sample_in], w.data(), o);
        });
    Ok(Tensor::from_parts(vec![d.b, d.cout, d.ho, d.wo], out))
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: &Conv2dGeometry,
) -> Result<ConvGrads<T>> {
    let cout = w.shape()[0];
    let d = conv_dims(x.shape(), cout, w.shape(), geom)?;
    let sample_in = d.cin * d.h * d.w;
    let sample_out = d.cout * d.ho * d.wo;
    if dy.shape() != [d.b, d.cout, d.ho, d.wo] {
        return shape_err(format!("conv2d output gradient has shape {:?}", dy.shape()));
    }
    let klen = d.kernel_len();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..d.b)
        .into_par_iter()
        .map(|b| {
            let mut dx = vec![T::zero(); sample_in];
            let mut dw = vec![T::zero(); klen];
            conv_sample_backward(
                &d,
                &x.data()[b * sample_in..(b + 1) * sample_in],
                w.data(),
                &dy.data()[b * sample_out..(b + 1) * sample_out],
                &mut dx,
                &mut dw,
            );
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(d.b * sample_in);
    let mut dw = vec![T::zero(); klen];
    for (sdx, sdw) in per_sample {
        dx.extend_from_slice(&sdx);
        for (a, b) in dw.iter_mut().zip(sdw) {
            *a += b;
        }
    }
    let db = channel_sums(dy);
    Ok(ConvGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dw: Tensor::from_parts(w.shape().to_vec(), dw),
        db: Tensor::from_parts(vec![d.cout], db),
    })
}

/// Per-channel sums over batch and spatial axes of a `B × C × …` tensor.
fn channel_sums<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let b = t.shape()[0];
    let c = t.shape()[1];
    let inner = t.numel() / (b * c);
    let mut out = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            let s = &t.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
            *o += s.iter().copied().sum::<T>();
        }
    }
    out
}

/// Convolution with a separate kernel per batch sample.
///
/// `w` stacks the per-sample kernels along its first axis:
/// `(B·C_out) × C_in/groups × k_F × k_T`; `bias` is `B × C_out`.
pub fn conv2d_per_sample_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &Conv2dGeometry,
) -> Result<Tensor<T>> {
    let b = x.shape()[0];
    if w.rank() != 4 || w.shape()[0] % b != 0 {
        return shape_err(format!(
            "per-sample kernels {:?} do not stack over batch {b}",
            w.shape()
        ));
    }
    let cout = w.shape()[0] / b;
    let d = conv_dims(x.shape(), cout, w.shape(), geom)?;
    if let Some(bias) = bias {
        if bias.shape() != [b, cout] {
            return shape_err(format!("per-sample bias shape {:?}", bias.shape()));
        }
    }
    let sample_in = d.cin * d.h * d.w;
    let sample_out = d.cout * d.ho * d.wo;
    let klen = d.kernel_len();
    let mut out = vec![T::zero(); d.b * sample_out];
    out.par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(bi, o)| {
            if let Some(bias) = bias {
                for (c, chunk) in o.chunks_mut(d.ho * d.wo).enumerate() {
                    chunk.fill(bias.data()[bi * cout + c]);
                }
            }
            conv_sample_forward(
                &d,
                &x.data()[bi * sample_in..(bi + 1) * sample_in],
                &w.data()[bi * klen..(bi + 1) * klen],
                o,
            );
        });
    Ok(Tensor::from_parts(vec![d.b, d.cout, d.ho, d.wo], out))
}

pub fn conv2d_per_sample_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geom: &Conv2dGeometry,
) -> Result<ConvGrads<T>> {
    let b = x.shape()[0];
    let cout = w.shape()[0] / b;
    let d = conv_dims(x.shape(), cout, w.shape(), geom)?;
    let sample_in = d.cin * d.h * d.w;
    let sample_out = d.cout * d.ho * d.wo;
    if dy.shape() != [d.b, d.cout, d.ho, d.wo] {
        return shape_err(format!("conv2d output gradient has shape {:?}", dy.shape()));
    }
    let klen = d.kernel_len();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..d.b)
        .into_par_iter()
        .map(|bi| {
            let mut dx = vec![T::zero(); sample_in];
            let mut dw = vec![T::zero(); klen];
            conv_sample_backward(
                &d,
                &x.data()[bi * sample_in..(bi + 1) * sample_in],
                &w.data()[bi * klen..(bi + 1) * klen],
                &dy.data()[bi * sample_out..(bi + 1) * sample_out],
                &mut dx,
                &mut dw,
            );
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(d.b * sample_in);
    let mut dw = Vec::with_capacity(d.b * klen);
    for (sdx, sdw) in per_sample {
        dx.extend_from_slice(&sdx);
        dw.extend_from_slice(&sdw);
    }
    let howo = d.ho * d.wo;
    let db: Vec<T> = dy
        .data()
        .chunks(howo)
        .map(|c| c.iter().copied().sum())
        .collect();
    Ok(ConvGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dw: Tensor::from_parts(w.shape().to_vec(), dw),
        db: Tensor::from_parts(vec![d.b, d.cout], db),
    })
}

/// The same per-sample convolution expressed as one grouped convolution over
/// a `1 × (B·C_in) × F × T` view with `B·groups` groups.
pub fn conv2d_per_sample_grouped<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &Conv2dGeometry,
) -> Result<Tensor<T>> {
    let [b, c, h, wd] = x.dims4()?;
    let folded = x.clone().reshape(&[1, b * c, h, wd])?;
    let grouped = Conv2dGeometry {
        groups: geom.groups * b,
        ..*geom
    };
    let flat_bias = match bias {
        Some(t) => Some(t.clone().reshape(&[t.numel()])?),
        None => None,
    };
    let y = conv2d_forward(&folded, w, flat_bias.as_ref(), &grouped)?;
    let [_, bc_out, ho, wo] = y.dims4()?;
    y.reshape(&[b, bc_out / b, ho, wo])
}

// ---------------------------------------------------------------------------
// Kernel mixing

/// `out[b] = Σ_k att[b, k] · kernels[k]`, where `kernels` stacks `K` equally
/// shaped blocks along its first axis. The result stacks `B` mixed blocks.
pub fn mix_kernels<T: Real>(att: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, k] = att.dims2()?;
    if kernels.shape()[0] % k != 0 {
        return shape_err(format!(
            "kernel stack {:?} is not divisible into {k} kernels",
            kernels.shape()
        ));
    }
    let len = kernels.numel() / k;
    let mut out = vec![T::zero(); b * len];
    for (bi, row) in out.chunks_mut(len).enumerate() {
        for ki in 0..k {
            let a = att.data()[bi * k + ki];
            for (o, &wv) in row.iter_mut().zip(&kernels.data()[ki * len..(ki + 1) * len]) {
                *o += a * wv;
            }
        }
    }
    let mut shape = kernels.shape().to_vec();
    shape[0] = shape[0] / k * b;
    Ok(Tensor::from_parts(shape, out))
}

pub fn mix_kernels_backward<T: Real>(
    att: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let b = att.shape()[0];
    let k = att.shape()[1];
    let len = kernels.numel() / k;
    let mut datt = vec![T::zero(); b * k];
    let mut dk = vec![T::zero(); kernels.numel()];
    for bi in 0..b {
        let g = &dy.data()[bi * len..(bi + 1) * len];
        for ki in 0..k {
            let wk = &kernels.data()[ki * len..(ki + 1) * len];
            datt[bi * k + ki] = g.iter().zip(wk).map(|(&a, &b)| a * b).sum();
            let a = att.data()[bi * k + ki];
            for (d, &gv) in dk[ki * len..(ki + 1) * len].iter_mut().zip(g) {
                *d += a * gv;
            }
        }
    }
    (
        Tensor::from_parts(att.shape().to_vec(), datt),
        Tensor::from_parts(kernels.shape().to_vec(), dk),
    )
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Batch statistics gathered in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (used for normalization).
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

fn bn_layout<T: Real>(x: &Tensor<T>, len: usize) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return shape_err(format!("batch norm needs rank >= 2, got {:?}", x.shape()));
    }
    let b = x.shape()[0];
    let c = x.shape()[1];
    if len != c {
        return shape_err(format!("batch norm vectors of length {len} for {c} channels"));
    }
    Ok((b, c, x.numel() / (b * c)))
}

/// `y = gamma·(x − mean)/sqrt(var + eps) + beta` per channel (axis 1).
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (b, c, inner) = bn_layout(x, mean.len())?;
    for v in [var, gamma, beta] {
        bn_layout(x, v.len())?;
    }
    if var.iter().any(|&v| v < T::zero()) {
        return Err(Error::Numeric("batch norm variance is negative".into()));
    }
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let shift = beta[ci] - mean[ci] * scale;
            let s = &mut out.data_mut()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
            for v in s {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Training-mode forward; returns `(y, x̂, 1/σ, stats)`.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>, BatchStats<T>)> {
    let (b, c, inner) = bn_layout(x, gamma.len())?;
    bn_layout(x, beta.len())?;
    let n = b * inner;
    let nt = T::of(n as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += x.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / nt;
        let mut q = T::zero();
        for bi in 0..b {
            for &v in &x.data()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                q += (v - m) * (v - m);
            }
        }
        mean[ci] = m;
        var[ci] = q / nt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let range = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
            for (h, o) in xhat.data_mut()[range.clone()]
                .iter_mut()
                .zip(&mut y.data_mut()[range])
            {
                *h = (*h - mean[ci]) * inv_std[ci];
                *o = gamma[ci] * *h + beta[ci];
            }
        }
    }
    Ok((y, xhat, inv_std, BatchStats { mean, var, count: n }))
}

/// Gradients `(dx, dgamma, dbeta)` of training-mode batch norm.
pub fn batch_norm_train_backward<T: Real>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    gamma: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let b = dy.shape()[0];
    let c = dy.shape()[1];
    let inner = dy.numel() / (b * c);
    let nt = T::of((b * inner) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let range = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
            for (&g, &h) in dy.data()[range.clone()].iter().zip(&xhat.data()[range]) {
                dbeta[ci] += g;
                dgamma[ci] += g * h;
            }
        }
    }
    let mut dx = dy.clone();
    for bi in 0..b {
        for ci in 0..c {
            let k = gamma[ci] * inv_std[ci] / nt;
            let range = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
            for (d, &h) in dx.data_mut()[range.clone()]
                .iter_mut()
                .zip(&xhat.data()[range])
            {
                *d = k * (nt * *d - dbeta[ci] - h * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Gradients `(dx, dgamma, dbeta)` of batch norm with fixed statistics.
pub fn batch_norm_eval_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let b = dy.shape()[0];
    let c = dy.shape()[1];
    let inner = dy.numel() / (b * c);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = dy.clone();
    for bi in 0..b {
        for ci in 0..c {
            let range = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
            let k = gamma[ci] * inv_std[ci];
            for (d, &xv) in dx.data_mut()[range.clone()]
                .iter_mut()
                .zip(&x.data()[range])
            {
                dbeta[ci] += *d;
                dgamma[ci] += *d * (xv - mean[ci]) * inv_std[ci];
                *d *= k;
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Activations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Hardswish,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Hardswish => {
                let three = T::of(3.0);
                let six = T::of(6.0);
                x * (x + three).max(T::zero()).min(six) / six
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative evaluated at the input `x`; relu uses 0 at the kink.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Hardswish => {
                let three = T::of(3.0);
                if x < -three {
                    T::zero()
                } else if x <= three {
                    (x + x + three) / T::of(6.0)
                } else {
                    T::one()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
        }
    }

    /// Distance from `x` to the nearest point where the derivative jumps.
    pub fn kink_distance<T: Real>(self, x: T) -> f64 {
        let x = x.to_f64_lossy();
        match self {
            Activation::Relu => x.abs(),
            Activation::Hardswish => (x + 3.0).abs().min((x - 3.0).abs()),
            Activation::Sigmoid => f64::INFINITY,
        }
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

// ---------------------------------------------------------------------------
// Pooling

/// Average pooling window: kernel, stride and zero padding per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolGeometry {
    /// Square window with padding `k // 2`.
    pub fn square(k: usize, stride: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: (stride, stride),
            padding: (k / 2, k / 2),
        }
    }
}

fn window(o: usize, k: usize, s: usize, p: usize, n: usize) -> (usize, usize) {
    let start = (o * s) as isize - p as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).max(0) as usize).min(n);
    (lo, hi)
}

/// Average pooling; windows clipped by padding divide by the number of real
/// elements they cover.
pub fn avg_pool2d<T: Real>(x: &Tensor<T>, g: &PoolGeometry) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let ho = output_extent(h, g.kernel.0, g.stride.0, g.padding.0)?;
    let wo = output_extent(w, g.kernel.1, g.stride.1, g.padding.1)?;
    let mut out = vec![T::zero(); b * c * ho * wo];
    for bc in 0..b * c {
        let xs = &x.data()[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1) = window(oy, g.kernel.0, g.stride.0, g.padding.0, h);
            for ox in 0..wo {
                let (x0, x1) = window(ox, g.kernel.1, g.stride.1, g.padding.1, w);
                let mut s = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += xs[iy * w + ix];
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)).max(1);
                out[(bc * ho + oy) * wo + ox] = s / T::of(count as f64);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

pub fn avg_pool2d_backward<T: Real>(
    input_shape: &[usize],
    dy: &Tensor<T>,
    g: &PoolGeometry,
) -> Tensor<T> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = vec![T::zero(); b * c * h * w];
    for bc in 0..b * c {
        let d = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1) = window(oy, g.kernel.0, g.stride.0, g.padding.0, h);
            for ox in 0..wo {
                let (x0, x1) = window(ox, g.kernel.1, g.stride.1, g.padding.1, w);
                let count = ((y1 - y0) * (x1 - x0)).max(1);
                let gv = dy.data()[(bc * ho + oy) * wo + ox] / T::of(count as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        d[iy * w + ix] += gv;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Spatial axis of a `B × C × F × T` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialAxis {
    Frequency,
    Time,
}

/// Mean over one spatial axis. Pooling over time yields `B × C × F`,
/// pooling over frequency yields `B × C × T`.
pub fn axis_pool<T: Real>(x: &Tensor<T>, axis: SpatialAxis) -> Result<Tensor<T>> {
    let [b, c, f, t] = x.dims4()?;
    let bc = b * c;
    let (len, shape) = match axis {
        SpatialAxis::Time => (f, vec![b, c, f]),
        SpatialAxis::Frequency => (t, vec![b, c, t]),
    };
    let mut out = vec![T::zero(); bc * len];
    for i in 0..bc {
        let plane = &x.data()[i * f * t..(i + 1) * f * t];
        let o = &mut out[i * len..(i + 1) * len];
        match axis {
            SpatialAxis::Time => {
                let n = T::of(t as f64);
                for (fi, ov) in o.iter_mut().enumerate() {
                    *ov = plane[fi * t..(fi + 1) * t].iter().copied().sum::<T>() / n;
                }
            }
            SpatialAxis::Frequency => {
                for fi in 0..f {
                    for (ov, &v) in o.iter_mut().zip(&plane[fi * t..(fi + 1) * t]) {
                        *ov += v;
                    }
                }
                let n = T::of(f as f64);
                for ov in o.iter_mut() {
                    *ov /= n;
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn axis_pool_backward<T: Real>(
    input_shape: &[usize],
    dy: &Tensor<T>,
    axis: SpatialAxis,
) -> Tensor<T> {
    let (b, c, f, t) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let mut dx = vec![T::zero(); b * c * f * t];
    for i in 0..b * c {
        let plane = &mut dx[i * f * t..(i + 1) * f * t];
        match axis {
            SpatialAxis::Time => {
                let n = T::of(t as f64);
                for fi in 0..f {
                    let g = dy.data()[i * f + fi] / n;
                    plane[fi * t..(fi + 1) * t].fill(g);
                }
            }
            SpatialAxis::Frequency => {
                let n = T::of(f as f64);
                let g = &dy.data()[i * t..(i + 1) * t];
                for fi in 0..f {
                    for (p, &gv) in plane[fi * t..(fi + 1) * t].iter_mut().zip(g) {
                        *p = gv / n;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Mean over all spatial positions: `B × C × …` → `B × C`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return shape_err(format!("global pooling needs rank >= 3, got {:?}", x.shape()));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let inner = x.numel() / (b * c);
    let n = T::of(inner as f64);
    let data = x
        .data()
        .chunks(inner)
        .map(|s| s.iter().copied().sum::<T>() / n)
        .collect();
    Ok(Tensor::from_parts(vec![b, c], data))
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (input_shape[0], input_shape[1]);
    let inner = input_shape.iter().product::<usize>() / (b * c);
    let n = T::of(inner as f64);
    let mut dx = Vec::with_capacity(b * c * inner);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g / n, inner));
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Linear maps

/// `y = x·Wᵀ + b` along the trailing axis; `W` is `out × in`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [out_f, in_f] = w.dims2()?;
    let last = *x.shape().last().expect("rank >= 1");
    if last != in_f {
        return shape_err(format!(
            "linear expects trailing extent {in_f}, input has shape {:?}",
            x.shape()
        ));
    }
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return shape_err(format!("linear bias shape {:?} for {out_f} outputs", b.shape()));
        }
    }
    let rows = x.numel() / in_f;
    let mut out = vec![T::zero(); rows * out_f];
    for r in 0..rows {
        let xr = &x.data()[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let wr = &w.data()[o * in_f..(o + 1) * in_f];
            let mut s = b.map_or(T::zero(), |b| b.data()[o]);
            for (&a, &bv) in xr.iter().zip(wr) {
                s += a * bv;
            }
            out[r * out_f + o] = s;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_f;
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients `(dx, dW, db)` of [`linear`].
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let out_f = w.shape()[0];
    let in_f = w.shape()[1];
    let rows = x.numel() / in_f;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); out_f];
    for r in 0..rows {
        let xr = &x.data()[r * in_f..(r + 1) * in_f];
        let dxr = &mut dx[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let g = dy.data()[r * out_f + o];
            db[o] += g;
            let wr = &w.data()[o * in_f..(o + 1) * in_f];
            let dwr = &mut dw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![out_f], db),
    )
}

// ---------------------------------------------------------------------------
// Concatenation and slicing

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return shape_err("concat of zero tensors");
    };
    if axis >= first.rank() {
        return shape_err(format!("concat axis {axis} out of range"));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return shape_err(format!(
                "cannot concat {:?} with {:?} along axis {axis}",
                p.shape(),
                first.shape()
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = axis_layout(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

pub fn slice_axis<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return shape_err(format!(
            "slice [{start}, {}) of axis {axis} out of range for {:?}",
            start + len,
            x.shape()
        ));
    }
    let (outer, n, inner) = axis_layout(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Scatters a slice gradient back into a zero tensor of `input_shape`.
pub fn slice_axis_backward<T: Real>(
    input_shape: &[usize],
    axis: usize,
    start: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (outer, n, inner) = axis_layout(input_shape, axis);
    let len = dy.shape()[axis];
    let mut dx = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        dx[base..base + len * inner]
            .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Softmax with temperature

/// Row-wise `softmax(logits / tau)` of a `B × K` matrix.
pub fn softmax_temperature<T: Real>(logits: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return config_err(format!("softmax temperature must be positive, got {tau}"));
    }
    let [_, k] = logits.dims2()?;
    let tau = T::of(tau);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) / tau).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

pub fn softmax_temperature_backward<T: Real>(probs: &Tensor<T>, dy: &Tensor<T>, tau: f64) -> Tensor<T> {
    let k = probs.shape()[1];
    let tau = T::of(tau);
    let mut dx = dy.clone();
    for (row, p) in dx.data_mut().chunks_mut(k).zip(probs.data().chunks(k)) {
        let dot: T = row.iter().zip(p).map(|(&g, &s)| g * s).sum();
        for (g, &s) in row.iter_mut().zip(p) {
            *g = s * (*g - dot) / tau;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Dynamic ReLU

/// Normalization of raw Dy-ReLU predictor outputs into slopes and intercepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyReluRanges {
    /// Number of linear mappings `M`.
    pub mappings: usize,
    /// Half-width of the slope range.
    pub lambda_a: f64,
    /// Half-width of the intercept range.
    pub lambda_b: f64,
    /// Slope centers, one per mapping.
    pub init_a: Vec<f64>,
    /// Intercept centers, one per mapping.
    pub init_b: Vec<f64>,
}

impl DyReluRanges {
    /// Slopes centered on `(1, 0, …)`, intercepts on zero, ranges 1.0 and 0.5.
    pub fn standard(mappings: usize) -> Self {
        let mut init_a = vec![0.0; mappings];
        if mappings > 0 {
            init_a[0] = 1.0;
        }
        Self {
            mappings,
            lambda_a: 1.0,
            lambda_b: 0.5,
            init_a,
            init_b: vec![0.0; mappings],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mappings == 0
            || self.init_a.len() != self.mappings
            || self.init_b.len() != self.mappings
        {
            return config_err("Dy-ReLU needs M >= 1 and one init value per mapping");
        }
        Ok(())
    }

    /// `(center, lambda)` for coefficient `j` of a channel's `2M` block.
    #[inline]
    fn slot(&self, j: usize) -> (f64, f64) {
        if j < self.mappings {
            (self.init_a[j], self.lambda_a)
        } else {
            (self.init_b[j - self.mappings], self.lambda_b)
        }
    }
}

/// Maps raw predictions `B × (C·2M)` to coefficients of the same layout.
///
/// Channel `c` owns entries `[c·2M, (c+1)·2M)`: the first `M` are slopes,
/// the remaining `M` intercepts; each is `center + λ·(2σ(u) − 1)`.
pub fn dyrelu_coefficients<T: Real>(raw: &Tensor<T>, r: &DyReluRanges) -> Result<Tensor<T>> {
    let [_, n] = raw.dims2()?;
    let per = 2 * r.mappings;
    if n % per != 0 {
        return shape_err(format!("{n} Dy-ReLU predictions are not a multiple of 2M = {per}"));
    }
    let mut out = raw.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (center, lambda) = r.slot(i % per);
        *v = T::of(center) + T::of(lambda) * (T::of(2.0) * sigmoid(*v) - T::one());
    }
    Ok(out)
}

pub fn dyrelu_coefficients_backward<T: Real>(
    raw: &Tensor<T>,
    dy: &Tensor<T>,
    r: &DyReluRanges,
) -> Tensor<T> {
    let per = 2 * r.mappings;
    let mut dx = dy.clone();
    for (i, (g, &u)) in dx.data_mut().iter_mut().zip(raw.data()).enumerate() {
        let (_, lambda) = r.slot(i % per);
        let s = sigmoid(u);
        *g *= T::of(2.0 * lambda) * s * (T::one() - s);
    }
    dx
}

/// `y_c = max_m(a_c^m·x_c + b_c^m)`, spatially shared and channel-wise.
///
/// Returns the output and, per element, the index of the winning mapping
/// (the lowest index on ties).
pub fn dyrelu_apply<T: Real>(
    x: &Tensor<T>,
    coef: &Tensor<T>,
    mappings: usize,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let [b, c, f, t] = x.dims4()?;
    let per = 2 * mappings;
    if coef.shape() != [b, c * per] {
        return shape_err(format!(
            "Dy-ReLU coefficients {:?} for input {:?} with M = {mappings}",
            coef.shape(),
            x.shape()
        ));
    }
    if mappings > u8::MAX as usize {
        return config_err("Dy-ReLU supports at most 255 mappings");
    }
    let plane = f * t;
    let mut y = vec![T::zero(); x.numel()];
    let mut arg = vec![0u8; x.numel()];
    for bc in 0..b * c {
        let cf = &coef.data()[bc * per..(bc + 1) * per];
        let (slopes, intercepts) = cf.split_at(mappings);
        let range = bc * plane..(bc + 1) * plane;
        for ((o, a), &xv) in y[range.clone()]
            .iter_mut()
            .zip(&mut arg[range.clone()])
            .zip(&x.data()[range])
        {
            let mut best = slopes[0] * xv + intercepts[0];
            let mut best_m = 0u8;
            for m in 1..mappings {
                let v = slopes[m] * xv + intercepts[m];
                if v > best {
                    best = v;
                    best_m = m as u8;
                }
            }
            *o = best;
            *a = best_m;
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), y), arg))
}

/// Gradients `(dx, dcoef)` of [`dyrelu_apply`].
pub fn dyrelu_apply_backward<T: Real>(
    x: &Tensor<T>,
    coef: &Tensor<T>,
    arg: &[u8],
    dy: &Tensor<T>,
    mappings: usize,
) -> (Tensor<T>, Tensor<T>) {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let plane = x.numel() / (b * c);
    let per = 2 * mappings;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dc = vec![T::zero(); coef.numel()];
    for bc in 0..b * c {
        let cf = &coef.data()[bc * per..(bc + 1) * per];
        let dcf = &mut dc[bc * per..(bc + 1) * per];
        for i in bc * plane..(bc + 1) * plane {
            let m = arg[i] as usize;
            let g = dy.data()[i];
            dx[i] = cf[m] * g;
            dcf[m] += g * x.data()[i];
            dcf[mappings + m] += g;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(coef.shape().to_vec(), dc),
    )
}

/// Gap between the best and second-best mapping at each element; zero means
/// the input sits on a kink of the max.
pub fn dyrelu_margin<T: Real>(x: &Tensor<T>, coef: &Tensor<T>, mappings: usize) -> f64 {
    if mappings < 2 {
        return f64::INFINITY;
    }
    let b = x.shape()[0];
    let c = x.shape()[1];
    let plane = x.numel() / (b * c);
    let per = 2 * mappings;
    let mut margin = f64::INFINITY;
    for bc in 0..b * c {
        let cf = &coef.data()[bc * per..(bc + 1) * per];
        for &xv in &x.data()[bc * plane..(bc + 1) * plane] {
            let mut vals: Vec<f64> = (0..mappings)
                .map(|m| (cf[m] * xv + cf[mappings + m]).to_f64_lossy())
                .collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(vals[0] - vals[1]);
        }
    }
    margin
}

// ---------------------------------------------------------------------------
// Recalibration

/// `y[b,c,f,t] = x[b,c,f,t] · s_f[b,c,f] · s_t[b,c,t]`; either factor may be
/// absent. `s_f` is `B × C × F × 1`, `s_t` is `B × C × T × 1`.
pub fn coord_scale<T: Real>(
    x: &Tensor<T>,
    sf: Option<&Tensor<T>>,
    st: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [b, c, f, t] = x.dims4()?;
    if let Some(sf) = sf {
        if sf.shape() != [b, c, f, 1] {
            return shape_err(format!("frequency weights {:?} for input {:?}", sf.shape(), x.shape()));
        }
    }
    if let Some(st) = st {
        if st.shape() != [b, c, t, 1] {
            return shape_err(format!("time weights {:?} for input {:?}", st.shape(), x.shape()));
        }
    }
    let mut y = x.clone();
    for bc in 0..b * c {
        let plane = &mut y.data_mut()[bc * f * t..(bc + 1) * f * t];
        for fi in 0..f {
            let wf = sf.map_or(T::one(), |s| s.data()[bc * f + fi]);
            let row = &mut plane[fi * t..(fi + 1) * t];
            match st {
                Some(st) => {
                    for (v, &wt) in row.iter_mut().zip(&st.data()[bc * t..(bc + 1) * t]) {
                        *v *= wf * wt;
                    }
                }
                None => {
                    for v in row.iter_mut() {
                        *v *= wf;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients `(dx, dsf, dst)` of [`coord_scale`].
pub fn coord_scale_backward<T: Real>(
    x: &Tensor<T>,
    sf: Option<&Tensor<T>>,
    st: Option<&Tensor<T>>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, c, f, t) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dsf = vec![T::zero(); b * c * f];
    let mut dst = vec![T::zero(); b * c * t];
    for bc in 0..b * c {
        for fi in 0..f {
            let wf = sf.map_or(T::one(), |s| s.data()[bc * f + fi]);
            for ti in 0..t {
                let wt = st.map_or(T::one(), |s| s.data()[bc * t + ti]);
                let i = (bc * f + fi) * t + ti;
                let g = dy.data()[i];
                let xv = x.data()[i];
                dx[i] = g * wf * wt;
                dsf[bc * f + fi] += g * xv * wt;
                dst[bc * t + ti] += g * xv * wf;
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        sf.map(|s| Tensor::from_parts(s.shape().to_vec(), dsf)),
        st.map(|s| Tensor::from_parts(s.shape().to_vec(), dst)),
    )
}

/// `y[b,c,…] = x[b,c,…] · s[b,c]`.
pub fn channel_scale<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = (x.shape()[0], x.shape().get(1).copied().unwrap_or(1));
    if x.rank() < 2 || s.shape() != [b, c] {
        return shape_err(format!("channel weights {:?} for input {:?}", s.shape(), x.shape()));
    }
    let inner = x.numel() / (b * c);
    let mut y = x.clone();
    for (chunk, &w) in y.data_mut().chunks_mut(inner).zip(s.data()) {
        for v in chunk {
            *v *= w;
        }
    }
    Ok(y)
}

pub fn channel_scale_backward<T: Real>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let inner = x.numel() / s.numel();
    let mut dx = dy.clone();
    let mut ds = vec![T::zero(); s.numel()];
    for (i, (chunk, &w)) in dx.data_mut().chunks_mut(inner).zip(s.data()).enumerate() {
        let xs = &x.data()[i * inner..(i + 1) * inner];
        for (g, &xv) in chunk.iter_mut().zip(xs) {
            ds[i] += *g * xv;
            *g *= w;
        }
    }
    (dx, Tensor::from_parts(s.shape().to_vec(), ds))
}

// ---------------------------------------------------------------------------
// Losses

/// Numerically stable `BCE(σ(z), y)` for one element.
#[inline]
pub fn bce_with_logits_elem(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean of `BCE(σ(z), y)` over all elements.
pub fn bce_with_logits<T: Real>(z: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    if z.shape() != y.shape() {
        return shape_err(format!("logits {:?} vs targets {:?}", z.shape(), y.shape()));
    }
    let s: f64 = z
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| bce_with_logits_elem(a.to_f64_lossy(), b.to_f64_lossy()))
        .sum();
    Ok(T::of(s / z.numel() as f64))
}

pub fn bce_with_logits_backward<T: Real>(z: &Tensor<T>, y: &Tensor<T>, scale: T) -> Tensor<T> {
    let n = T::of(z.numel() as f64);
    let data = z
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (sigmoid(a) - b) / n * scale)
        .collect();
    Tensor::from_parts(z.shape().to_vec(), data)
}
