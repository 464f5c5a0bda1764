//! MFCC feature extraction.
//!
//! 40 cepstral coefficients per frame from 25 ms windows every 10 ms:
//! centered framing (the signal is reflect-padded by half a window, giving
//! 101 frames for a one-second clip), periodic Hann window, 512-point FFT
//! magnitude spectrum, 40 triangular mel filters spanning 20 Hz to 8 kHz
//! (HTK mel scale), natural log with a 1e-10 floor, then an orthonormal
//! DCT-II keeping all 40 coefficients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::wav::CLIP_SAMPLES;

pub const FRAME_LEN: usize = 400; // 25 ms at 16 kHz
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const NUM_MELS: usize = 40;
pub const NUM_COEFFS: usize = 40;
pub const NUM_FRAMES: usize = 101; // 16000 / 160 + 1 with centered framing
pub const FMIN_HZ: f64 = 20.0;
pub const FMAX_HZ: f64 = 8_000.0;
const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// In-place iterative radix-2 Cooley-Tukey FFT.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (step_r, step_i) = (ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let (mut w_r, mut w_i) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_r = re[b] * w_r - im[b] * w_i;
                let t_i = re[b] * w_i + im[b] * w_r;
                re[b] = re[a] - t_r;
                im[b] = im[a] - t_i;
                re[a] += t_r;
                im[a] += t_i;
                let next_r = w_r * step_r - w_i * step_i;
                w_i = w_r * step_i + w_i * step_r;
                w_r = next_r;
            }
        }
        len <<= 1;
    }
}

/// Precomputed window, filter bank and DCT matrix.
pub struct MfccExtractor {
    hann: Vec<f64>,
    /// Per filter: first FFT bin and the triangle weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
    /// Row-major `[NUM_COEFFS x NUM_MELS]` orthonormal DCT-II matrix.
    dct: Vec<f64>,
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MfccExtractor {
    pub fn new() -> MfccExtractor {
        let hann: Vec<f64> = (0..FRAME_LEN)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos()
            })
            .collect();

        let bins = FFT_SIZE / 2 + 1;
        let bin_hz = super::wav::SAMPLE_RATE as f64 / FFT_SIZE as f64;
        let mel_lo = hz_to_mel(FMIN_HZ);
        let mel_hi = hz_to_mel(FMAX_HZ);
        let edges: Vec<f64> = (0..NUM_MELS + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (NUM_MELS + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(NUM_MELS);
        for t in 1..=NUM_MELS {
            let (lo, center, hi) = (edges[t - 1], edges[t], edges[t + 1]);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let weight = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                if weight > 0.0 {
                    if start.is_none() {
                        start = Some(k);
                    }
                    weights.push(weight);
                } else if start.is_some() {
                    break;
                }
            }
            filters.push((start.unwrap_or(0), weights));
        }

        let n = NUM_MELS as f64;
        let mut dct = vec![0.0; NUM_COEFFS * NUM_MELS];
        for k in 0..NUM_COEFFS {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for m in 0..NUM_MELS {
                dct[k * NUM_MELS + m] = scale
                    * (std::f64::consts::PI * (2.0 * m as f64 + 1.0) * k as f64 / (2.0 * n)).cos();
            }
        }

        MfccExtractor { hann, filters, dct }
    }

    /// 1 x 101 x 40 feature tensor for exactly one second of audio.
    pub fn extract(&self, samples: &[f64]) -> Result<Tensor> {
        if samples.len() != CLIP_SAMPLES {
            return Err(Error::dim(
                "mfcc",
                format!(
                    "expected exactly {CLIP_SAMPLES} samples (one second), got {}",
                    samples.len()
                ),
            ));
        }
        let pad = FRAME_LEN / 2;
        let mut padded = Vec::with_capacity(CLIP_SAMPLES + 2 * pad);
        // reflect padding without repeating the edge sample
        for i in 0..pad {
            padded.push(samples[pad - i]);
        }
        padded.extend_from_slice(samples);
        for i in 0..pad {
            padded.push(samples[CLIP_SAMPLES - 2 - i]);
        }

        let mut out = Tensor::zeros(&[1, NUM_FRAMES, NUM_COEFFS]);
        let mut re = vec![0.0; FFT_SIZE];
        let mut im = vec![0.0; FFT_SIZE];
        let mut mags = vec![0.0; FFT_SIZE / 2 + 1];
        let mut logmel = vec![0.0; NUM_MELS];
        for frame in 0..NUM_FRAMES {
            let start = frame * FRAME_SHIFT;
            for n in 0..FRAME_LEN {
                re[n] = padded[start + n] * self.hann[n];
                im[n] = 0.0;
            }
            re[FRAME_LEN..].fill(0.0);
            im[FRAME_LEN..].fill(0.0);
            fft_in_place(&mut re, &mut im);
            for (k, mag) in mags.iter_mut().enumerate() {
                *mag = (re[k] * re[k] + im[k] * im[k]).sqrt();
            }
            for (m, (start_bin, weights)) in self.filters.iter().enumerate() {
                let energy: f64 = weights
                    .iter()
                    .zip(&mags[*start_bin..])
                    .map(|(w, v)| w * v)
                    .sum();
                logmel[m] = energy.max(LOG_FLOOR).ln();
            }
            let row = &mut out.data_mut()[frame * NUM_COEFFS..(frame + 1) * NUM_COEFFS];
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = self.dct[k * NUM_MELS..(k + 1) * NUM_MELS]
                    .iter()
                    .zip(&logmel)
                    .map(|(d, v)| d * v)
                    .sum();
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_clip_yields_101_by_40() {
        let extractor = MfccExtractor::new();
        let samples: Vec<f64> = (0..CLIP_SAMPLES)
            .map(|i| (2.0 * std::f64::consts::PI * 700.0 * i as f64 / 16_000.0).sin() * 0.4)
            .collect();
        let features = extractor.extract(&samples).unwrap();
        assert_eq!(features.shape(), &[1, NUM_FRAMES, NUM_COEFFS]);
        assert!(features.all_finite());
    }

    #[test]
    fn wrong_length_is_rejected() {
        let extractor = MfccExtractor::new();
        assert!(extractor.extract(&vec![0.0; 8_000]).is_err());
    }

    #[test]
    fn zero_input_gives_identical_frames() {
        let extractor = MfccExtractor::new();
        let features = extractor.extract(&vec![0.0; CLIP_SAMPLES]).unwrap();
        let first = &features.data()[..NUM_COEFFS];
        for frame in 1..NUM_FRAMES {
            let row = &features.data()[frame * NUM_COEFFS..(frame + 1) * NUM_COEFFS];
            assert_eq!(row, first);
        }
        // the constant comes from the log floor, not from zeros
        assert!(first[0] != 0.0);
    }

    #[test]
    fn extraction_is_bit_deterministic() {
        let extractor = MfccExtractor::new();
        let samples: Vec<f64> = (0..CLIP_SAMPLES)
            .map(|i| ((i * 2654435761) % 65536) as f64 / 32768.0 - 1.0)
            .collect();
        let a = extractor.extract(&samples).unwrap();
        let b = MfccExtractor::new().extract(&samples).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fft_matches_naive_dft_on_small_input() {
        let n = 16;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        fft_in_place(&mut re, &mut im);
        for k in 0..n {
            let mut sr = 0.0;
            let mut si = 0.0;
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                sr += v * ang.cos();
                si += v * ang.sin();
            }
            assert!((re[k] - sr).abs() < 1e-10, "re[{k}]");
            assert!((im[k] - si).abs() < 1e-10, "im[{k}]");
        }
    }
}
