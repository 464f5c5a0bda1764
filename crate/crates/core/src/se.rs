//! Squeeze-and-excitation channel reweighting.
//!
//! The squeeze step global-average-pools the feature maps to one value per
//! channel; the excitation step runs that vector through a two-layer
//! bias-free bottleneck (ReLU hidden, sigmoid output) and the input is
//! rescaled channel-wise by the resulting weights, each strictly inside
//! (0, 1).

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::Tensor;

/// Shape of one squeeze-and-excitation block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeConfig {
    pub channels: usize,
    /// Bottleneck ratio; the hidden width is `max(1, round(channels * alpha))`.
    pub alpha: f64,
}

pub const DEFAULT_ALPHA: f64 = 1.0 / 16.0; // 2^-4

impl SeConfig {
    pub fn new(channels: usize) -> SeConfig {
        SeConfig {
            channels,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> SeConfig {
        self.alpha = alpha;
        self
    }

    pub fn bottleneck(&self) -> usize {
        ((self.channels as f64 * self.alpha).round() as usize).max(1)
    }

    /// Both excitation matrices are bias-free: `2 * C * bottleneck` weights.
    pub fn param_count(&self) -> u64 {
        2 * (self.channels * self.bottleneck()) as u64
    }

    /// Multiply count: the two matrix-vector products plus the final
    /// per-channel rescale; the squeeze mean contributes none.
    pub fn multiply_count(&self) -> u64 {
        self.param_count() + self.channels as u64
    }
}

/// Applies the block: `out[c,h,w] = input[c,h,w] * sigmoid(W2 relu(W1 s))[c]`
/// where `s` is the per-channel spatial mean. `w_reduce` is `[b, C]`,
/// `w_expand` is `[C, b]`.
pub fn se_forward(input: &Tensor, w_reduce: &Tensor, w_expand: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let b = match w_reduce.shape() {
        [b, cc] if *cc == c => *b,
        other => {
            return Err(Error::dim(
                "se_forward",
                format!("w_reduce shape {other:?} does not match [bottleneck, channels={c}]"),
            ))
        }
    };
    if w_expand.shape() != [c, b] {
        return Err(Error::dim(
            "se_forward",
            format!(
                "w_expand shape {:?} does not match [channels={c}, bottleneck={b}]",
                w_expand.shape()
            ),
        ));
    }

    let weights = excitation_weights(input, w_reduce, w_expand)?;
    let plane = h * w;
    let mut out = input.clone();
    for ch in 0..c {
        let scale = weights.data()[ch];
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v *= scale;
        }
    }
    Ok(out)
}

/// The per-channel gate vector `sigmoid(W2 relu(W1 squeeze(x)))`.
pub fn excitation_weights(input: &Tensor, w_reduce: &Tensor, w_expand: &Tensor) -> Result<Tensor> {
    let squeezed = nn::global_avg_pool(input)?;
    let hidden = nn::relu(&nn::fully_connected(&squeezed, w_reduce)?);
    Ok(nn::sigmoid(&nn::fully_connected(&hidden, w_expand)?))
}
