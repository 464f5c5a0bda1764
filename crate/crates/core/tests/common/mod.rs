//! Shared helpers for the integration tests: a synthetic keyword dataset and
//! a brute-force convolution oracle.

#![allow(dead_code)]

use ds_resnet::audio::dataset::{Dataset, NoisePool, Split, Utterance};
use ds_resnet::nn::ConvSpec;
use ds_resnet::rng::Rng;
use ds_resnet::tensor::Tensor;

pub const CLIP: usize = 16_000;

/// A one-second synthetic "word": each class gets its own tone signature so
/// the classes are cleanly separable from MFCC features.
pub fn synth_waveform(label: u8, variant: u64, seed: u64) -> Vec<f64> {
    let mut rng = Rng::stream(seed, &format!("synth/{label}/{variant}"));
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let amp = rng.uniform(0.35, 0.45);
    let jitter = rng.uniform(0.97, 1.03);
    (0..CLIP)
        .map(|i| {
            let t = i as f64 / CLIP as f64;
            match label {
                11 => rng.normal() * 0.003, // silence: near-zero noise
                10 => {
                    // unknown: two inharmonic tones
                    let a = (std::f64::consts::TAU * 3130.0 * jitter * t + phase).sin();
                    let b = (std::f64::consts::TAU * 4270.0 * jitter * t).sin();
                    amp * 0.5 * (a + b)
                }
                k => {
                    let f = 350.0 + 230.0 * f64::from(k);
                    amp * (std::f64::consts::TAU * f * jitter * t + phase).sin()
                        + rng.normal() * 0.002
                }
            }
        })
        .collect()
}

/// `n` labeled in-memory utterances cycling through `classes`, all assigned
/// to `split`.
pub fn synth_utterances(n: usize, classes: &[u8], split: Split, seed: u64) -> Vec<Utterance> {
    (0..n)
        .map(|i| {
            let label = classes[i % classes.len()];
            let wave = synth_waveform(label, i as u64, seed);
            Utterance::from_memory(format!("synth/{split:?}/{i}"), wave, label, split)
        })
        .collect()
}

/// A dataset whose train and validation splits are the same fixed pool, for
/// overfit-style checks.
pub fn overfit_dataset(n: usize, seed: u64) -> Dataset {
    let classes: Vec<u8> = (0..12).collect();
    let train = synth_utterances(n, &classes, Split::Train, seed);
    let validation = train
        .iter()
        .map(|u| Utterance {
            split: Split::Validation,
            ..u.clone()
        })
        .collect();
    Dataset {
        train,
        validation,
        test: Vec::new(),
        noise: NoisePool::default(),
    }
}

// ---------------------------------------------------------------------------
// brute-force convolution oracle
// ---------------------------------------------------------------------------

/// Direct six-nested-loop standard convolution with "same" zero padding and
/// stride 1. Returns the output and the number of scalar multiplications
/// performed; padded taps multiply an explicit zero so the count matches the
/// analytic cost model.
pub fn oracle_conv2d_standard(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> (Tensor, u64) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let n = spec.out_channels;
    let (m, r) = (spec.kernel_h, spec.kernel_w);
    let (dh, dw) = (spec.dilation_h, spec.dilation_w);
    let pad_h = ((m - 1) * dh / 2) as isize;
    let pad_w = ((r - 1) * dw / 2) as isize;
    let mut out = Tensor::zeros(&[n, h, w]);
    let mut mults = 0u64;
    for o in 0..n {
        for oh in 0..h {
            for ow in 0..w {
                let mut sum = 0.0;
                for c in 0..c_in {
                    for i in 0..m {
                        for j in 0..r {
                            let ih = oh as isize + (i * dh) as isize - pad_h;
                            let iw = ow as isize + (j * dw) as isize - pad_w;
                            let x = if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w
                            {
                                input.at3(c, ih as usize, iw as usize)
                            } else {
                                0.0
                            };
                            let wt = weights.data()[((o * c_in + c) * m + i) * r + j];
                            sum += wt * x;
                            mults += 1;
                        }
                    }
                }
                out.data_mut()[(o * h + oh) * w + ow] = sum;
            }
        }
    }
    (out, mults)
}

/// Depthwise variant of the brute-force oracle.
pub fn oracle_conv2d_depthwise(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> (Tensor, u64) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (m, r) = (spec.kernel_h, spec.kernel_w);
    let (dh, dw) = (spec.dilation_h, spec.dilation_w);
    let pad_h = ((m - 1) * dh / 2) as isize;
    let pad_w = ((r - 1) * dw / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut mults = 0u64;
    for ch in 0..c {
        for oh in 0..h {
            for ow in 0..w {
                let mut sum = 0.0;
                for i in 0..m {
                    for j in 0..r {
                        let ih = oh as isize + (i * dh) as isize - pad_h;
                        let iw = ow as isize + (j * dw) as isize - pad_w;
                        let x = if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                            input.at3(ch, ih as usize, iw as usize)
                        } else {
                            0.0
                        };
                        sum += weights.data()[(ch * m + i) * r + j] * x;
                        mults += 1;
                    }
                }
                out.data_mut()[(ch * h + oh) * w + ow] = sum;
            }
        }
    }
    (out, mults)
}

/// Per-pixel matrix-vector oracle for pointwise convolution.
pub fn oracle_conv2d_pointwise(input: &Tensor, weights: &Tensor) -> (Tensor, u64) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let c_out = weights.shape()[0];
    let mut out = Tensor::zeros(&[c_out, h, w]);
    let mut mults = 0u64;
    for o in 0..c_out {
        for oh in 0..h {
            for ow in 0..w {
                let mut sum = 0.0;
                for c in 0..c_in {
                    sum += weights.data()[o * c_in + c] * input.at3(c, oh, ow);
                    mults += 1;
                }
                out.data_mut()[(o * h + oh) * w + ow] = sum;
            }
        }
    }
    (out, mults)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.normal()).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
