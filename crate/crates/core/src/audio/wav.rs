//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono audio.
//!
//! The reader walks the chunk list (skipping unknown chunks), accepts only
//! PCM format tag 1 with 16 bits per sample and a single channel, and
//! normalizes samples to `f64` in `[-1, 1)` by dividing by 32768. The writer
//! produces the canonical 44-byte-header layout and is used for fixtures and
//! tests.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// One second of audio at 16 kHz.
pub const CLIP_SAMPLES: usize = 16_000;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: "WAV",
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

/// Decodes a mono 16-bit PCM WAV at the expected sample rate.
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(format_err(format!(
                "chunk {:?} of {size} bytes overruns the file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err("fmt chunk shorter than 16 bytes"));
                }
                fmt = Some((
                    read_u16(body, 0),
                    read_u16(body, 2),
                    read_u32(body, 4),
                    read_u16(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }
    let (tag, channels, rate, bits) = fmt.ok_or_else(|| format_err("no fmt chunk"))?;
    if tag != 1 {
        return Err(format_err(format!(
            "unsupported encoding (format tag {tag}, expected PCM)"
        )));
    }
    if bits != 16 {
        return Err(format_err(format!("unsupported bit depth {bits}, expected 16")));
    }
    if channels != 1 {
        return Err(format_err(format!(
            "unsupported channel count {channels}, expected mono"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(format_err(format!(
            "unsupported sample rate {rate} Hz, expected {SAMPLE_RATE} Hz"
        )));
    }
    let data = data.ok_or_else(|| format_err("no data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(format_err("data chunk has an odd byte length"));
    }
    Ok(data
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
        .collect())
}

pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Pads short clips with trailing zeros and crops long ones centrally so the
/// result is exactly one second.
pub fn pad_or_crop(samples: &[f64]) -> Vec<f64> {
    match samples.len() {
        n if n == CLIP_SAMPLES => samples.to_vec(),
        n if n < CLIP_SAMPLES => {
            let mut out = samples.to_vec();
            out.resize(CLIP_SAMPLES, 0.0);
            out
        }
        n => {
            let start = (n - CLIP_SAMPLES) / 2;
            samples[start..start + CLIP_SAMPLES].to_vec()
        }
    }
}

/// Reads a WAV and normalizes its length to one second.
pub fn read_clip(path: &Path) -> Result<Vec<f64>> {
    Ok(pad_or_crop(&read_wav(path)?))
}

pub fn encode_wav(samples: &[f64]) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    fs::write(path, encode_wav(samples)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_round_trip_within_quantization_step() {
        let samples: Vec<f64> = (0..CLIP_SAMPLES)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect();
        let decoded = decode_wav(&encode_wav(&samples)).unwrap();
        assert_eq!(decoded.len(), CLIP_SAMPLES);
        for (a, b) in decoded.iter().zip(&samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn silence_decodes_to_zeros() {
        let decoded = decode_wav(&encode_wav(&vec![0.0; CLIP_SAMPLES])).unwrap();
        assert!(decoded.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_and_crop_rules() {
        let short = vec![1.0; 8_000];
        let padded = pad_or_crop(&short);
        assert_eq!(padded.len(), CLIP_SAMPLES);
        assert!(padded[..8_000].iter().all(|&v| v == 1.0));
        assert!(padded[8_000..].iter().all(|&v| v == 0.0));

        let long: Vec<f64> = (0..20_000).map(|i| i as f64).collect();
        let cropped = pad_or_crop(&long);
        assert_eq!(cropped.len(), CLIP_SAMPLES);
        assert_eq!(cropped[0], 2_000.0); // central crop
    }

    #[test]
    fn malformed_inputs_are_described() {
        assert!(decode_wav(b"not a wav").unwrap_err().to_string().contains("RIFF"));

        // 8-bit depth is rejected
        let mut bytes = encode_wav(&[0.0; 4]);
        bytes[34] = 8;
        assert!(decode_wav(&bytes).unwrap_err().to_string().contains("bit depth"));

        // wrong sample rate is rejected
        let mut bytes = encode_wav(&[0.0; 4]);
        bytes[24..28].copy_from_slice(&8000u32.to_le_bytes());
        assert!(decode_wav(&bytes).unwrap_err().to_string().contains("sample rate"));

        // stereo is rejected
        let mut bytes = encode_wav(&[0.0; 4]);
        bytes[22] = 2;
        assert!(decode_wav(&bytes).unwrap_err().to_string().contains("channel"));
    }
}
