//! Forward and backward kernels for the layer set.
//!
//! Spatial ops accept either a single `C×H×W` map or a `B×C×H×W` batch and
//! return the same rank they were given. The autodiff graph calls straight
//! into these; they are also usable on their own for inference code.

use crate::error::{DcnError, Result};
use crate::tensor::{Scalar, Tensor};

/// Splits a rank-3/4 shape into `(batch, c, h, w, batched)`.
fn batch_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(DcnError::config(format!(
            "{op}: expected C×H×W or B×C×H×W input, got {shape:?}"
        ))),
    }
}

fn spatial_shape(batch: usize, c: usize, h: usize, w: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![batch, c, h, w]
    } else {
        vec![c, h, w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub batched: bool,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (batch, cin, h, w, batched) = batch_dims(input, "conv2d")?;
        let &[cout, kcin, kh, kw] = kernel else {
            return Err(DcnError::config(format!(
                "conv2d: kernel must be C_out×C_in×k_h×k_w, got {kernel:?}"
            )));
        };
        if kcin != cin {
            return Err(DcnError::config(format!(
                "conv2d: input has {cin} channels but kernel expects {kcin} (input {input:?}, kernel {kernel:?})"
            )));
        }
        if stride == 0 {
            return Err(DcnError::config("conv2d: stride must be at least 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(DcnError::config(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Conv2dGeometry {
            batch,
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
            batched,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn output_shape(&self) -> Vec<usize> {
        spatial_shape(
            self.batch,
            self.out_channels,
            self.out_h,
            self.out_w,
            self.batched,
        )
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (out_h·out_w)` column matrix.
fn im2col<T: Scalar>(g: &Conv2dGeometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &chan[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - pad;
                        *v = if x < 0 || x >= g.width as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Scalar>(g: &Conv2dGeometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] = dst[x as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `bias`, when given, has one entry per output channel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.out_channels {
            return Err(DcnError::config(format!(
                "conv2d: bias has {} entries for {} output channels",
                b.numel(),
                g.out_channels
            )));
        }
    }
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * plane;
    let mut cols = vec![T::zero(); k * plane];
    let mut out = vec![T::zero(); g.batch * out_size];
    for b in 0..g.batch {
        im2col(&g, &input.data()[b * in_size..(b + 1) * in_size], &mut cols);
        let dst = &mut out[b * out_size..(b + 1) * out_size];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_channels,
            k,
            plane,
            T::one(),
            kernel.data(),
            k as isize,
            1,
            &cols,
            plane as isize,
            1,
            beta,
            dst,
            plane as isize,
            1,
        );
    }
    Tensor::new(&g.output_shape(), out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads<T>> {
    let g = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * plane;
    let mut cols = vec![T::zero(); k * plane];
    let mut dcols = vec![T::zero(); k * plane];
    let mut dx = vec![T::zero(); input.numel()];
    let mut dw = vec![T::zero(); kernel.numel()];
    let mut db = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        let dy = &grad_out.data()[b * out_size..(b + 1) * out_size];
        for (co, chunk) in dy.chunks(plane).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum::<T>();
        }
        im2col(&g, &input.data()[b * in_size..(b + 1) * in_size], &mut cols);
        // dW += dY · colsᵀ
        T::gemm(
            g.out_channels,
            plane,
            k,
            T::one(),
            dy,
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            T::one(),
            &mut dw,
            k as isize,
            1,
        );
        // dcols = Wᵀ · dY
        T::gemm(
            k,
            g.out_channels,
            plane,
            T::one(),
            kernel.data(),
            1,
            k as isize,
            dy,
            plane as isize,
            1,
            T::zero(),
            &mut dcols,
            plane as isize,
            1,
        );
        col2im(&g, &dcols, &mut dx[b * in_size..(b + 1) * in_size]);
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape(), dx)?,
        kernel: Tensor::new(kernel.shape(), dw)?,
        bias: Tensor::new(&[g.out_channels], db)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Non-overlapping mean pooling with a square `window`, which must tile the input.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (b, c, h, w, batched) = batch_dims(x.shape(), "avg_pool")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(DcnError::config(format!(
            "avg_pool: window {window} does not tile a {h}×{w} map"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let scale = T::one() / T::from_usize(window * window).unwrap();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            for xx in 0..w {
                let o = (y / window) * ow + xx / window;
                dst[o] = dst[o] + plane[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * scale);
    }
    Tensor::new(&spatial_shape(b, c, oh, ow, batched), out)
}

pub fn avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
) -> Result<Tensor<T>> {
    let (_, _, h, w, _) = batch_dims(input_shape, "avg_pool")?;
    let (oh, ow) = (h / window, w / window);
    let scale = T::one() / T::from_usize(window * window).unwrap();
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (dst, src) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / window) * ow + xx / window] * scale;
            }
        }
    }
    Tensor::new(input_shape, dx)
}

/// Region `[start, end)` along one axis for output cell `i` of `out` cells.
///
/// Uses floor boundaries so that consecutive regions partition `0..len`
/// exactly with no overlap.
pub fn adaptive_region(i: usize, out: usize, len: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let (b, c, h, w, batched) = batch_dims(x.shape(), "adaptive_avg_pool")?;
    if rows == 0 || cols == 0 || rows > h || cols > w {
        return Err(DcnError::config(format!(
            "adaptive_avg_pool: target grid {rows}×{cols} does not fit a {h}×{w} map"
        )));
    }
    let mut out = vec![T::zero(); b * c * rows * cols];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(rows * cols)) {
        for i in 0..rows {
            let (y0, y1) = adaptive_region(i, rows, h);
            for j in 0..cols {
                let (x0, x1) = adaptive_region(j, cols, w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc = acc + plane[y * w + xx];
                    }
                }
                dst[i * cols + j] = acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
            }
        }
    }
    Tensor::new(&spatial_shape(b, c, rows, cols, batched), out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    rows: usize,
    cols: usize,
) -> Result<Tensor<T>> {
    let (_, _, h, w, _) = batch_dims(input_shape, "adaptive_avg_pool")?;
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for (dst, src) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(rows * cols)) {
        for i in 0..rows {
            let (y0, y1) = adaptive_region(i, rows, h);
            for j in 0..cols {
                let (x0, x1) = adaptive_region(j, cols, w);
                let g = src[i * cols + j] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * w + xx] = g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, dx)
}

/// Saved statistics from a training-mode batch normalisation.
#[derive(Debug, Clone)]
pub struct BatchNormStats<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased per-channel variance, for running-statistics updates.
    pub var_unbiased: Vec<T>,
}

fn channel_indices(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w, _) = batch_dims(shape, "batchnorm")?;
    Ok((b, c, h * w))
}

/// Batch normalisation with statistics taken over (batch, height, width).
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormStats<T>)> {
    let (b, c, plane) = channel_indices(x.shape())?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(DcnError::config(format!(
            "batchnorm: {c} channels but gamma/beta have {}/{} entries",
            gamma.numel(),
            beta.numel()
        )));
    }
    let count = b * plane;
    let n = T::from_usize(count).unwrap();
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for bi in 0..b {
        for (ch, m) in mean.iter_mut().enumerate() {
            let off = (bi * c + ch) * plane;
            *m = *m + data[off..off + plane].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let m = mean[ch];
            var[ch] = var[ch]
                + data[off..off + plane]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
        }
    }
    let var_unbiased: Vec<T> = var
        .iter()
        .map(|&s| {
            if count > 1 {
                s / T::from_usize(count - 1).unwrap()
            } else {
                T::zero()
            }
        })
        .collect();
    let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / n + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                let xh = (data[i] - mean[ch]) * inv_std[ch];
                normalized[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        BatchNormStats {
            normalized: Tensor::new(x.shape(), normalized)?,
            inv_std,
            mean,
            var_unbiased,
        },
    ))
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_train_backward<T: Scalar>(
    stats: &BatchNormStats<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let shape = stats.normalized.shape();
    let (b, c, plane) = channel_indices(shape)?;
    let n = T::from_usize(b * plane).unwrap();
    let xh = stats.normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] = dgamma[ch] + dy[i] * xh[i];
                dbeta[ch] = dbeta[ch] + dy[i];
            }
        }
    }
    // dx = γ·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let k = gamma[ch] * stats.inv_std[ch] / n;
            for i in off..off + plane {
                dx[i] = k * (n * dy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(shape, dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

/// Inference-mode normalisation using stored statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (b, c, plane) = channel_indices(x.shape())?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.numel() != c {
            return Err(DcnError::config(format!(
                "batchnorm: {name} has {} entries for {c} channels",
                t.numel()
            )));
        }
    }
    let mut out = x.data().to_vec();
    for bi in 0..b {
        for ch in 0..c {
            let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
            let shift = beta[ch] - running_mean[ch] * scale;
            let off = (bi * c + ch) * plane;
            out[off..off + plane]
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
    }
    Tensor::new(x.shape(), out)
}

/// Pairwise cosine similarity between the spatial cells of a feature map.
///
/// `features` is `C×M×N` or `B×C×M×N`; the result is `P×P` or `B×P×P` with
/// `P = M·N` and cell `(r, c)` flattened to `r·N + c`. Norms are clamped
/// below at `eps`.
pub fn cosine_matrix<T: Scalar>(features: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (b, c, m, n, batched) = batch_dims(features.shape(), "cosine_matrix")?;
    let p = m * n;
    let mut out = vec![T::zero(); b * p * p];
    for bi in 0..b {
        let f = &features.data()[bi * c * p..(bi + 1) * c * p];
        let norms = cell_norms(f, c, p, eps);
        let dst = &mut out[bi * p * p..(bi + 1) * p * p];
        for i in 0..p {
            for j in i..p {
                let mut dot = T::zero();
                for ch in 0..c {
                    dot = dot + f[ch * p + i] * f[ch * p + j];
                }
                let v = dot / (norms[i] * norms[j]);
                dst[i * p + j] = v;
                dst[j * p + i] = v;
            }
        }
    }
    let shape = if batched { vec![b, p, p] } else { vec![p, p] };
    Tensor::new(&shape, out)
}

fn cell_norms<T: Scalar>(f: &[T], c: usize, p: usize, eps: T) -> Vec<T> {
    (0..p)
        .map(|i| {
            (0..c)
                .map(|ch| f[ch * p + i] * f[ch * p + i])
                .sum::<T>()
                .sqrt()
                .max(eps)
        })
        .collect()
}

pub fn cosine_matrix_backward<T: Scalar>(
    features: &Tensor<T>,
    sim: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (b, c, m, n, _) = batch_dims(features.shape(), "cosine_matrix")?;
    let p = m * n;
    let mut dx = vec![T::zero(); features.numel()];
    for bi in 0..b {
        let f = &features.data()[bi * c * p..(bi + 1) * c * p];
        let a = &sim.data()[bi * p * p..(bi + 1) * p * p];
        let g = &grad_out.data()[bi * p * p..(bi + 1) * p * p];
        let norms = cell_norms(f, c, p, eps);
        let d = &mut dx[bi * c * p..(bi + 1) * c * p];
        for i in 0..p {
            // d n_i / d v_i is v_i/‖v_i‖ above the clamp and 0 below it.
            let raw = (0..c).map(|ch| f[ch * p + i] * f[ch * p + i]).sum::<T>().sqrt();
            let clamped = raw < eps;
            let mut radial = T::zero();
            for j in 0..p {
                let h = g[i * p + j] + g[j * p + i];
                let coef = h / (norms[i] * norms[j]);
                for ch in 0..c {
                    d[ch * p + i] = d[ch * p + i] + coef * f[ch * p + j];
                }
                radial = radial + h * a[i * p + j];
            }
            if !clamped {
                let k = radial / (norms[i] * raw);
                for ch in 0..c {
                    d[ch * p + i] = d[ch * p + i] - k * f[ch * p + i];
                }
            }
        }
    }
    Tensor::new(features.shape(), dx)
}
