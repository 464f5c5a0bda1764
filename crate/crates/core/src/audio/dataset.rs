//! Speech Commands dataset handling: directory scanning, the SHA1-based
//! speaker-stable split, silence/unknown balancing, waveform augmentation,
//! and the "DSFC" feature cache file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mfcc::{NUM_COEFFS, NUM_FRAMES};
use super::wav::{pad_or_crop, read_clip, read_wav, CLIP_SAMPLES};

/// The ten target words; everything else spoken is "unknown".
pub const KEYWORDS: [&str; 10] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];

pub const LABEL_UNKNOWN: u8 = 10;
pub const LABEL_SILENCE: u8 = 11;
pub const NUM_LABELS: usize = 12;

pub fn label_of_word(word: &str) -> u8 {
    KEYWORDS
        .iter()
        .position(|&k| k == word)
        .map(|i| i as u8)
        .unwrap_or(LABEL_UNKNOWN)
}

pub fn label_name(label: u8) -> &'static str {
    match label {
        LABEL_UNKNOWN => "unknown",
        LABEL_SILENCE => "silence",
        k => KEYWORDS[k as usize],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Deterministic speaker-stable split bucket for a Speech Commands file
/// name.
///
/// The speaker portion (everything before `_nohash_`, or the whole base name
/// when that marker is absent) is SHA1-hashed; the digest modulo 2^27 is
/// mapped to a percentage, with the first 10% going to validation and the
/// next 10% to test. Files from one speaker always land in the same split.
pub fn assign_split(filename: &str) -> Split {
    let base = filename.rsplit(['/', '\\']).next().unwrap_or(filename);
    let speaker = match base.find("_nohash_") {
        Some(idx) => &base[..idx],
        None => base,
    };
    let digest = Sha1::digest(speaker.as_bytes());
    // big-endian digest value mod 2^27: only the low 27 bits of the last
    // four bytes survive the modulus
    let low = u32::from_be_bytes([digest[16], digest[17], digest[18], digest[19]]);
    let modulus: u64 = 1 << 27;
    let bucket = u64::from(low) & (modulus - 1);
    let percentage = bucket as f64 * (100.0 / (modulus - 1) as f64);
    if percentage < 10.0 {
        Split::Validation
    } else if percentage < 20.0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Background noise recordings, fully decoded.
#[derive(Debug, Clone, Default)]
pub struct NoisePool {
    sources: Vec<(String, Arc<Vec<f64>>)>,
}

impl NoisePool {
    pub fn load(dir: &Path) -> Result<NoisePool> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        files.sort();
        let mut sources = Vec::with_capacity(files.len());
        for path in files {
            let mut samples = read_wav(&path)?;
            if samples.len() < CLIP_SAMPLES {
                samples = pad_or_crop(&samples);
            }
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            sources.push((name, Arc::new(samples)));
        }
        Ok(NoisePool { sources })
    }

    pub fn from_memory(named: Vec<(String, Vec<f64>)>) -> NoisePool {
        NoisePool {
            sources: named
                .into_iter()
                .map(|(n, s)| (n, Arc::new(pad_extend(s))))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    /// One-second crop of source `index` starting at `offset`, scaled.
    pub fn crop(&self, index: usize, offset: usize, scale: f64) -> Vec<f64> {
        let src = &self.sources[index].1;
        src[offset..offset + CLIP_SAMPLES]
            .iter()
            .map(|&v| v * scale)
            .collect()
    }

    fn max_offset(&self, index: usize) -> usize {
        self.sources[index].1.len() - CLIP_SAMPLES
    }
}

fn pad_extend(mut s: Vec<f64>) -> Vec<f64> {
    if s.len() < CLIP_SAMPLES {
        s.resize(CLIP_SAMPLES, 0.0);
    }
    s
}

/// Where an utterance's waveform comes from.
#[derive(Debug, Clone)]
pub enum Source {
    /// A WAV file on disk, length-normalized at load.
    File(PathBuf),
    /// An in-memory waveform (synthetic data, tests).
    Memory(Arc<Vec<f64>>),
    /// A scaled one-second crop of a background-noise recording.
    NoiseCrop {
        pool_index: usize,
        offset: usize,
        scale: f64,
    },
}

/// One labeled training example.
#[derive(Debug, Clone)]
pub struct Utterance {
    /// Stable identifier; seeds per-utterance augmentation.
    pub key: String,
    pub source: Source,
    pub label: u8,
    pub split: Split,
}

impl Utterance {
    pub fn from_file(path: PathBuf, label: u8, split: Split) -> Utterance {
        Utterance {
            key: path.to_string_lossy().into_owned(),
            source: Source::File(path),
            label,
            split,
        }
    }

    pub fn from_memory(key: String, samples: Vec<f64>, label: u8, split: Split) -> Utterance {
        Utterance {
            key,
            source: Source::Memory(Arc::new(samples)),
            label,
            split,
        }
    }

    /// The one-second waveform, in `[-1, 1]`.
    pub fn waveform(&self, noise: &NoisePool) -> Result<Vec<f64>> {
        match &self.source {
            Source::File(path) => read_clip(path),
            Source::Memory(samples) => Ok(pad_or_crop(samples)),
            Source::NoiseCrop {
                pool_index,
                offset,
                scale,
            } => Ok(noise.crop(*pool_index, *offset, *scale)),
        }
    }
}

/// A fully prepared dataset: three splits plus the noise pool.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub noise: NoisePool,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Scans a Speech Commands style directory: word-named subdirectories of WAV
/// files plus a `_background_noise_` directory.
pub fn scan_dataset(root: &Path) -> Result<(Vec<(PathBuf, u8)>, NoisePool)> {
    let mut word_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    word_dirs.sort();
    let mut files = Vec::new();
    let mut noise = NoisePool::default();
    for dir in word_dirs {
        let word = dir.file_name().unwrap().to_string_lossy().into_owned();
        if word == "_background_noise_" {
            noise = NoisePool::load(&dir)?;
            continue;
        }
        let label = label_of_word(&word);
        let mut wavs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .collect();
        wavs.sort();
        files.extend(wavs.into_iter().map(|p| (p, label)));
    }
    Ok((files, noise))
}

/// Balances one split in place: adds synthetic silence crops and subsamples
/// the unknown pool so both classes make up about 10% of the result
/// (`round(K / 8)` of each for `K` keyword segments).
pub fn balance_split(
    keyword: Vec<Utterance>,
    unknown: Vec<Utterance>,
    noise: &NoisePool,
    split: Split,
    seed: u64,
) -> Result<Vec<Utterance>> {
    let target = ((keyword.len() as f64) / 8.0).round() as usize;
    let mut out = keyword;
    if target > 0 {
        if unknown.is_empty() {
            return Err(Error::Config(format!(
                "{} split: no 'unknown' utterances available for balancing",
                split.name()
            )));
        }
        if noise.is_empty() {
            return Err(Error::Config(format!(
                "{} split: no background-noise recordings available for silence synthesis",
                split.name()
            )));
        }
        let mut unknown = unknown;
        let mut rng = crate::rng::Rng::stream(seed, &format!("balance/unknown/{}", split.name()));
        rng.shuffle(&mut unknown);
        unknown.truncate(target);
        out.extend(unknown);

        let mut rng = crate::rng::Rng::stream(seed, &format!("balance/silence/{}", split.name()));
        for i in 0..target {
            let pool_index = rng.below(noise.len());
            let offset = rng.below(noise.max_offset(pool_index) + 1);
            let scale = rng.next_f64();
            out.push(Utterance {
                key: format!("silence/{}/{i}", split.name()),
                source: Source::NoiseCrop {
                    pool_index,
                    offset,
                    scale,
                },
                label: LABEL_SILENCE,
                split,
            });
        }
    }
    Ok(out)
}

/// First-experiment preparation: hash-based speaker split of every word
/// file, then per-split silence/unknown balancing.
pub fn prepare_experiment1(root: &Path, seed: u64) -> Result<Dataset> {
    let (files, noise) = scan_dataset(root)?;
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no WAV files found under {}",
            root.display()
        )));
    }
    let mut keyword = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut unknown = vec![Vec::new(), Vec::new(), Vec::new()];
    for (path, label) in files {
        let split = assign_split(&path.to_string_lossy());
        let idx = match split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        };
        let utt = Utterance::from_file(path, label, split);
        if label == LABEL_UNKNOWN {
            unknown[idx].push(utt);
        } else {
            keyword[idx].push(utt);
        }
    }
    let [kw_train, kw_val, kw_test] = <[Vec<Utterance>; 3]>::try_from(keyword).unwrap();
    let [un_train, un_val, un_test] = <[Vec<Utterance>; 3]>::try_from(unknown).unwrap();
    Ok(Dataset {
        train: balance_split(kw_train, un_train, &noise, Split::Train, seed)?,
        validation: balance_split(kw_val, un_val, &noise, Split::Validation, seed)?,
        test: balance_split(kw_test, un_test, &noise, Split::Test, seed)?,
        noise,
    })
}

/// Second-experiment preparation: splits come from the published
/// `validation_list.txt` / `testing_list.txt` files; everything else trains.
/// No balancing or silence synthesis is applied.
pub fn prepare_experiment2(root: &Path) -> Result<Dataset> {
    let read_list = |name: &str| -> Result<BTreeSet<String>> {
        let path = root.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    };
    let validation_list = read_list("validation_list.txt")?;
    let testing_list = read_list("testing_list.txt")?;
    let (files, noise) = scan_dataset(root)?;
    let mut dataset = Dataset {
        noise,
        ..Dataset::default()
    };
    for (path, label) in files {
        let rel = path
            .strip_prefix(root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        let split = if validation_list.contains(&rel) {
            Split::Validation
        } else if testing_list.contains(&rel) {
            Split::Test
        } else {
            Split::Train
        };
        let utt = Utterance::from_file(path, label, split);
        match split {
            Split::Train => dataset.train.push(utt),
            Split::Validation => dataset.validation.push(utt),
            Split::Test => dataset.test.push(utt),
        }
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Training-time waveform augmentation constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Maximum time shift in either direction, in milliseconds.
    pub shift_ms: f64,
    /// Probability of mixing in background noise.
    pub noise_prob: f64,
    /// Upper bound of the uniform noise amplitude.
    pub noise_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            shift_ms: 100.0,
            noise_prob: 0.8,
            noise_max: 0.1,
        }
    }
}

/// Random time shift plus optional background noise, then a hard clip to
/// `[-1, 1]`.
///
/// Draw order (fixed for reproducibility): shift, noise coin, then noise
/// source / offset / amplitude. A positive shift moves content later in
/// time; vacated samples are zero.
pub fn augment(
    samples: &[f64],
    noise: &NoisePool,
    cfg: &AugmentConfig,
    rng: &mut crate::rng::Rng,
) -> Vec<f64> {
    let n = samples.len();
    let max_shift = (cfg.shift_ms / 1000.0 * super::wav::SAMPLE_RATE as f64).round() as i64;
    let shift = rng.below((2 * max_shift + 1) as usize) as i64 - max_shift;
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let src = i as i64 - shift;
        if src >= 0 && (src as usize) < n {
            *slot = samples[src as usize];
        }
    }
    let coin = rng.next_f64();
    if coin < cfg.noise_prob && !noise.is_empty() {
        let idx = rng.below(noise.len());
        let offset = rng.below(noise.max_offset(idx) + 1);
        let amp = rng.uniform(0.0, cfg.noise_max);
        let crop = noise.crop(idx, offset, amp);
        for (o, v) in out.iter_mut().zip(crop) {
            *o += v;
        }
    }
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    out
}

/// The augmentation stream for one utterance in one epoch.
pub fn augment_rng(seed: u64, epoch: u64, key: &str) -> crate::rng::Rng {
    crate::rng::Rng::stream(seed, &format!("augment/{epoch}/{key}"))
}

// ---------------------------------------------------------------------------
// "DSFC" feature cache
// ---------------------------------------------------------------------------

pub const FEATURE_MAGIC: &[u8; 4] = b"DSFC";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub key: String,
    pub label: u8,
    /// `1 x 101 x 40` features.
    pub features: Tensor,
}

pub fn encode_feature_cache(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        if rec.features.shape() != [1, NUM_FRAMES, NUM_COEFFS] {
            return Err(Error::dim(
                "feature_cache",
                format!(
                    "record '{}' has shape {:?}, expected [1, {NUM_FRAMES}, {NUM_COEFFS}]",
                    rec.key,
                    rec.features.shape()
                ),
            ));
        }
        let key = rec.key.as_bytes();
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key);
        out.push(rec.label);
        for &v in rec.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_feature_cache(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    fs::write(path, encode_feature_cache(records)?).map_err(|e| Error::io(path, e))
}

pub fn decode_feature_cache(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let fail = |detail: String| Error::Format {
        format: "DSFC",
        detail,
    };
    if bytes.len() < 12 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(fail("bad magic bytes (expected \"DSFC\")".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut records = Vec::with_capacity(count);
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format {
                format: "DSFC",
                detail: format!("truncated at offset {pos}"),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    for _ in 0..count {
        let key_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let key = String::from_utf8(take(&mut pos, key_len)?.to_vec())
            .map_err(|_| fail("record key is not valid UTF-8".into()))?;
        let label = take(&mut pos, 1)?[0];
        let want = NUM_FRAMES * NUM_COEFFS;
        let raw = take(&mut pos, want * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        records.push(FeatureRecord {
            key,
            label,
            features: Tensor::from_vec(&[1, NUM_FRAMES, NUM_COEFFS], data)?,
        });
    }
    if pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(records)
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<FeatureRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes)
}
