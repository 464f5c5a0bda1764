//! Forward neural-network primitives.
//!
//! Standard, depthwise and pointwise convolution (stride 1, "same"
//! zero-padding, optional dilation, bias-free), average pooling with VALID
//! truncating windows, global average pooling, a bias-free fully-connected
//! layer, and the usual activations. All functions are pure; the convolution
//! kernels run data-parallel over output channels when the `parallel` feature
//! is enabled, with bit-identical sequential fallbacks in [`seq`].

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Convolution variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// Declarative description of one convolution layer.
///
/// Stride is fixed to 1 and padding to "same"; all layers are bias-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    /// Kernel height `m`.
    pub kernel_h: usize,
    /// Kernel width `r`.
    pub kernel_w: usize,
    /// Number of output channels `n`.
    pub out_channels: usize,
    pub dilation_h: usize,
    pub dilation_w: usize,
    pub kind: ConvKind,
}

impl ConvSpec {
    pub fn standard(kernel_h: usize, kernel_w: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            kernel_h,
            kernel_w,
            out_channels,
            dilation_h: 1,
            dilation_w: 1,
            kind: ConvKind::Standard,
        }
    }

    pub fn depthwise(kernel_h: usize, kernel_w: usize, channels: usize) -> ConvSpec {
        ConvSpec {
            kernel_h,
            kernel_w,
            out_channels: channels,
            dilation_h: 1,
            dilation_w: 1,
            kind: ConvKind::Depthwise,
        }
    }

    pub fn pointwise(out_channels: usize) -> ConvSpec {
        ConvSpec {
            kernel_h: 1,
            kernel_w: 1,
            out_channels,
            dilation_h: 1,
            dilation_w: 1,
            kind: ConvKind::Pointwise,
        }
    }

    pub fn with_dilation(mut self, dilation_h: usize, dilation_w: usize) -> ConvSpec {
        self.dilation_h = dilation_h;
        self.dilation_w = dilation_w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Config(format!(
                "kernel dims must be >= 1, got {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be >= 1".into()));
        }
        if self.dilation_h == 0 || self.dilation_w == 0 {
            return Err(Error::Config(format!(
                "dilation must be >= 1, got ({}, {})",
                self.dilation_w, self.dilation_h
            )));
        }
        if self.kind == ConvKind::Pointwise
            && (self.kernel_h != 1
                || self.kernel_w != 1
                || self.dilation_h != 1
                || self.dilation_w != 1)
        {
            return Err(Error::Config(format!(
                "pointwise convolution requires 1x1 kernel and dilation 1, got {}x{} d=({},{})",
                self.kernel_h, self.kernel_w, self.dilation_w, self.dilation_h
            )));
        }
        Ok(())
    }
}

/// Span of a kernel of size `k` with dilation `d`: `(k - 1) * d + 1`.
pub fn effective_extent(k: usize, d: usize) -> usize {
    (k - 1) * d + 1
}

/// Low-side "same" padding; the extra element of an odd total goes high.
pub(crate) fn same_pad_low(k: usize, d: usize) -> usize {
    (effective_extent(k, d) - 1) / 2
}

// ---------------------------------------------------------------------------
// convolution kernels
// ---------------------------------------------------------------------------

/// Accumulates one dilated kernel tap over the valid region of a plane.
///
/// Adds `weight * x_plane[hh + dy, ww + dx]` into `out_plane[hh, ww]` for all
/// in-bounds positions. `dy`/`dx` already include the padding offset.
#[inline]
pub(crate) fn accumulate_tap(
    out_plane: &mut [f64],
    x_plane: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    weight: f64,
) {
    let h_lo = (-dy).max(0) as usize;
    let h_hi = (h as isize - dy).clamp(0, h as isize) as usize;
    let w_lo = (-dx).max(0) as usize;
    let w_hi = (w as isize - dx).clamp(0, w as isize) as usize;
    if w_lo >= w_hi {
        return;
    }
    for hh in h_lo..h_hi {
        let x_base = (hh as isize + dy) as usize * w;
        let x_row = &x_plane[(x_base as isize + dx + w_lo as isize) as usize..]
            [..w_hi - w_lo];
        let out_row = &mut out_plane[hh * w + w_lo..hh * w + w_hi];
        for (o, x) in out_row.iter_mut().zip(x_row) {
            *o += weight * x;
        }
    }
}

/// Dot product of two planes along one dilated tap offset:
/// sum over valid `(hh, ww)` of `a[hh, ww] * b[hh + dy, ww + dx]`.
#[inline]
pub(crate) fn tap_dot(
    a_plane: &[f64],
    b_plane: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
) -> f64 {
    let h_lo = (-dy).max(0) as usize;
    let h_hi = (h as isize - dy).clamp(0, h as isize) as usize;
    let w_lo = (-dx).max(0) as usize;
    let w_hi = (w as isize - dx).clamp(0, w as isize) as usize;
    if w_lo >= w_hi {
        return 0.0;
    }
    let mut sum = 0.0;
    for hh in h_lo..h_hi {
        let b_base = (hh as isize + dy) as usize * w;
        let b_row = &b_plane[(b_base as isize + dx + w_lo as isize) as usize..][..w_hi - w_lo];
        let a_row = &a_plane[hh * w + w_lo..hh * w + w_hi];
        for (a, b) in a_row.iter().zip(b_row) {
            sum += a * b;
        }
    }
    sum
}

fn standard_conv_impl(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    parallel: bool,
) -> Result<Tensor> {
    spec.validate()?;
    let (c_in, h, w) = input.dims3()?;
    let (m, r, n) = (spec.kernel_h, spec.kernel_w, spec.out_channels);
    if weights.shape() != [n, c_in, m, r] {
        return Err(Error::dim(
            "conv2d_standard",
            format!(
                "weights shape {:?} does not match [out_channels={n}, in_channels={c_in}, \
                 kernel_h={m}, kernel_w={r}]",
                weights.shape()
            ),
        ));
    }
    input.ensure_finite("conv2d_standard", "input")?;
    weights.ensure_finite("conv2d_standard", "weights")?;

    let pad_h = same_pad_low(m, spec.dilation_h) as isize;
    let pad_w = same_pad_low(r, spec.dilation_w) as isize;
    let x = input.data();
    let wts = weights.data();
    let mut out = Tensor::zeros(&[n, h, w]);
    exec::fill_chunks(out.data_mut(), h * w, parallel, |o, out_plane| {
        for c in 0..c_in {
            let x_plane = &x[c * h * w..(c + 1) * h * w];
            for i in 0..m {
                let dy = (i * spec.dilation_h) as isize - pad_h;
                for j in 0..r {
                    let weight = wts[((o * c_in + c) * m + i) * r + j];
                    let dx = (j * spec.dilation_w) as isize - pad_w;
                    accumulate_tap(out_plane, x_plane, h, w, dy, dx, weight);
                }
            }
        }
    });
    Ok(out)
}

fn depthwise_conv_impl(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    parallel: bool,
) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = input.dims3()?;
    let (m, r) = (spec.kernel_h, spec.kernel_w);
    if spec.out_channels != c {
        return Err(Error::dim(
            "conv2d_depthwise",
            format!(
                "depthwise out_channels {} must equal input channels {c}",
                spec.out_channels
            ),
        ));
    }
    if weights.shape() != [c, m, r] {
        return Err(Error::dim(
            "conv2d_depthwise",
            format!(
                "weights shape {:?} does not match [channels={c}, kernel_h={m}, kernel_w={r}]",
                weights.shape()
            ),
        ));
    }
    input.ensure_finite("conv2d_depthwise", "input")?;
    weights.ensure_finite("conv2d_depthwise", "weights")?;

    let pad_h = same_pad_low(m, spec.dilation_h) as isize;
    let pad_w = same_pad_low(r, spec.dilation_w) as isize;
    let x = input.data();
    let wts = weights.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    exec::fill_chunks(out.data_mut(), h * w, parallel, |ch, out_plane| {
        let x_plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..m {
            let dy = (i * spec.dilation_h) as isize - pad_h;
            for j in 0..r {
                let weight = wts[(ch * m + i) * r + j];
                let dx = (j * spec.dilation_w) as isize - pad_w;
                accumulate_tap(out_plane, x_plane, h, w, dy, dx, weight);
            }
        }
    });
    Ok(out)
}

fn pointwise_conv_impl(input: &Tensor, weights: &Tensor, parallel: bool) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    let shape = weights.shape();
    if shape.len() != 2 || shape[1] != c_in {
        return Err(Error::dim(
            "conv2d_pointwise",
            format!("weights shape {shape:?} does not match [out_channels, in_channels={c_in}]"),
        ));
    }
    let c_out = shape[0];
    input.ensure_finite("conv2d_pointwise", "input")?;
    weights.ensure_finite("conv2d_pointwise", "weights")?;

    let x = input.data();
    let wts = weights.data();
    let plane = h * w;
    let mut out = Tensor::zeros(&[c_out, h, w]);
    exec::fill_chunks(out.data_mut(), plane, parallel, |o, out_plane| {
        for c in 0..c_in {
            let weight = wts[o * c_in + c];
            let x_plane = &x[c * plane..(c + 1) * plane];
            for (ov, xv) in out_plane.iter_mut().zip(x_plane) {
                *ov += weight * xv;
            }
        }
    });
    Ok(out)
}

/// Standard convolution: `input [C_in, H, W]`, `weights [C_out, C_in, m, r]`.
pub fn conv2d_standard(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    standard_conv_impl(input, weights, spec, exec::default_parallel())
}

/// Depthwise convolution: one `m x r` filter per channel, `weights [C, m, r]`.
pub fn conv2d_depthwise(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    depthwise_conv_impl(input, weights, spec, exec::default_parallel())
}

/// Pointwise (1x1) convolution: `weights [C_out, C_in]`.
pub fn conv2d_pointwise(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    pointwise_conv_impl(input, weights, exec::default_parallel())
}

/// Sequential variants of the convolution kernels.
///
/// These run the exact same per-element arithmetic as the default entry
/// points on the current thread; the benchmark suite and the determinism
/// tests compare the two paths.
pub mod seq {
    use super::*;

    pub fn conv2d_standard(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
        standard_conv_impl(input, weights, spec, false)
    }

    pub fn conv2d_depthwise(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
        depthwise_conv_impl(input, weights, spec, false)
    }

    pub fn conv2d_pointwise(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
        pointwise_conv_impl(input, weights, false)
    }
}

// ---------------------------------------------------------------------------
// pooling, fully-connected, activations
// ---------------------------------------------------------------------------

/// Non-overlapping average pooling with VALID (truncating) boundary handling:
/// `H' = floor(H / window_h)`, `W' = floor(W / window_w)`.
pub fn avg_pool2d(input: &Tensor, window_h: usize, window_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if window_h == 0 || window_w == 0 || window_h > h || window_w > w {
        return Err(Error::dim(
            "avg_pool2d",
            format!("window {window_h}x{window_w} does not fit input {h}x{w}"),
        ));
    }
    input.ensure_finite("avg_pool2d", "input")?;
    let out_h = h / window_h;
    let out_w = w / window_w;
    let inv = 1.0 / (window_h * window_w) as f64;
    let x = input.data();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let out_data = out.data_mut();
    for ch in 0..c {
        let x_plane = &x[ch * h * w..(ch + 1) * h * w];
        let o_plane = &mut out_data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut sum = 0.0;
                for i in 0..window_h {
                    let row = (oh * window_h + i) * w + ow * window_w;
                    for j in 0..window_w {
                        sum += x_plane[row + j];
                    }
                }
                o_plane[oh * out_w + ow] = sum * inv;
            }
        }
    }
    Ok(out)
}

/// One mean per channel; returns a rank-1 tensor of length `C`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    input.ensure_finite("global_avg_pool", "input")?;
    let plane = h * w;
    let inv = 1.0 / plane as f64;
    let x = input.data();
    let means: Vec<f64> = (0..c)
        .map(|ch| x[ch * plane..(ch + 1) * plane].iter().sum::<f64>() * inv)
        .collect();
    Ok(Tensor::vector(means))
}

/// Bias-free matrix-vector product: `input [C]`, `weights [K, C]` -> `[K]`.
pub fn fully_connected(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if input.rank() != 1 {
        return Err(Error::dim(
            "fully_connected",
            format!("input must be rank 1, got shape {:?}", input.shape()),
        ));
    }
    let c = input.len();
    let shape = weights.shape();
    if shape.len() != 2 || shape[1] != c {
        return Err(Error::dim(
            "fully_connected",
            format!("weights shape {shape:?} does not match [out_dim, in_dim={c}]"),
        ));
    }
    input.ensure_finite("fully_connected", "input")?;
    weights.ensure_finite("fully_connected", "weights")?;
    let x = input.data();
    let out: Vec<f64> = weights
        .data()
        .chunks_exact(c)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::vector(out))
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Elementwise logistic sigmoid.
pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Softmax over a vector, computed with max-subtraction so that large logits
/// cannot overflow. The output sums to 1 within 1e-12.
pub fn softmax(input: &Tensor) -> Tensor {
    debug_assert_eq!(input.rank(), 1, "softmax input must be a vector");
    softmax_slice(input.data())
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Tensor {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::vector(exps.into_iter().map(|e| e / sum).collect())
}
