//! 128-dimensional side features at 0.96 s resolution.
//!
//! Features either come from the deterministic stand-in extractor
//! ([`extract_pseudo_vggish`]) or from precomputed `SFV1` files. Both routes
//! yield a [`SideFeatureSequence`] of dequantized values.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, AudioClip, DspError, StftConfig, Window};

pub const FEATURE_DIM: usize = 128;
pub const FRAME_PERIOD: f64 = 0.96;
pub const N_MELS: usize = 64;
/// Default quantization range of whitened features.
pub const QUANT_RANGE: (f32, f32) = (-2.0, 2.0);

const MEL_WIN: usize = 2048;
const MEL_HOP: usize = 441;
const MEL_FMIN: f64 = 125.0;
const MEL_FMAX: f64 = 7500.0;
const LOG_OFFSET: f64 = 0.01;
const MAX_FIT_ROWS: usize = 50_000;
const MAGIC: &[u8; 4] = b"SFV1";
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip of {0:.3} s is shorter than one 0.96 s patch")]
    TooShort(f64),
    #[error("whitener needs at least {needed} rows, got {got}")]
    NotEnoughRows { needed: usize, got: usize },
    #[error("whitener expects {expected} input dims, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("bad magic bytes in feature file")]
    BadMagic,
    #[error("truncated feature file: {0}")]
    Truncated(String),
    #[error("feature dimension {0} is not 128")]
    Dimension(usize),
    #[error("unknown source tag {0}")]
    SourceTag(u8),
    #[error("invalid quantization range ({0}, {1})")]
    Range(f32, f32),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("feature i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Mixture,
    Vocals,
    Drums,
    Bass,
    Other,
}

impl SourceTag {
    pub const STEMS: [SourceTag; 4] = [
        SourceTag::Vocals,
        SourceTag::Drums,
        SourceTag::Bass,
        SourceTag::Other,
    ];

    pub fn code(self) -> u8 {
        match self {
            SourceTag::Mixture => 0,
            SourceTag::Vocals => 1,
            SourceTag::Drums => 2,
            SourceTag::Bass => 3,
            SourceTag::Other => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => SourceTag::Mixture,
            1 => SourceTag::Vocals,
            2 => SourceTag::Drums,
            3 => SourceTag::Bass,
            4 => SourceTag::Other,
            c => return Err(FeatureError::SourceTag(c)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceTag::Mixture => "mixture",
            SourceTag::Vocals => "vocals",
            SourceTag::Drums => "drums",
            SourceTag::Bass => "bass",
            SourceTag::Other => "other",
        }
    }
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideFeatureSequence {
    /// `[T_v × 128]`, dequantized.
    pub frames: Array2<f64>,
    pub frame_period: f64,
    pub source_tag: SourceTag,
}

impl SideFeatureSequence {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaWhitener {
    pub mean: Array1<f64>,
    /// `[input_dim × 128]`, orthonormal columns ordered by decreasing variance.
    pub projection: Array2<f64>,
    /// Eigenvalues after flooring.
    pub eigenvalues: Array1<f64>,
    pub floor: f64,
}

impl PcaWhitener {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(FeatureError::InputDim {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let centered = x - &self.mean.view().insert_axis(Axis(0));
        let mut y = centered.dot(&self.projection);
        let scale = self.eigenvalues.mapv(|l| 1.0 / l.sqrt());
        y *= &scale.view().insert_axis(Axis(0));
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFeatures {
    /// `[T_v × 128]` codes.
    pub codes: Array2<u8>,
    pub range: (f32, f32),
    pub frame_period: f32,
    pub source_tag: SourceTag,
}

impl QuantizedFeatures {
    pub fn to_sequence(&self) -> SideFeatureSequence {
        SideFeatureSequence {
            frames: dequantize8(self),
            frame_period: self.frame_period as f64,
            source_tag: self.source_tag,
        }
    }
}

fn patch_len(sample_rate: u32) -> usize {
    (FRAME_PERIOD * sample_rate as f64).round() as usize
}

/// Log-mel statistics (64 band means, then 64 band standard deviations) of
/// every patch of `FRAME_PERIOD` seconds starting at multiples of `hop_seconds`.
pub fn raw_patch_features(clip: &AudioClip, hop_seconds: f64) -> Result<Array2<f64>> {
    let sr = clip.sample_rate();
    let patch = patch_len(sr);
    if clip.n_samples() < patch {
        return Err(FeatureError::TooShort(clip.duration()));
    }
    let hop = ((hop_seconds * sr as f64).round() as usize).max(1);
    let n_patches = (clip.n_samples() - patch) / hop + 1;
    let mono = clip.to_mono();
    let cfg = StftConfig {
        win_length: MEL_WIN,
        hop_length: MEL_HOP,
        window: Window::Hann,
        sample_rate: sr,
    };
    let mel = dsp::mel_matrix_range(cfg.n_bins(), N_MELS, sr, MEL_FMIN, MEL_FMAX);
    let mut out = Array2::<f64>::zeros((n_patches, 2 * N_MELS));
    for p in 0..n_patches {
        let seg = &mono[p * hop..p * hop + patch];
        let spec = dsp::magnitude(&dsp::stft(seg, &cfg)?);
        let logmel = spec.values.dot(&mel.t()).mapv(|v| (v + LOG_OFFSET).ln());
        let mean = logmel.mean_axis(Axis(0)).expect("patch has frames");
        let std = logmel.std_axis(Axis(0), 0.0);
        out.slice_mut(s![p, ..N_MELS]).assign(&mean);
        out.slice_mut(s![p, N_MELS..]).assign(&std);
    }
    Ok(out)
}

/// PCA whitening fitted on `training` rows. The seed drives row subsampling
/// when the matrix exceeds the fitting cap.
pub fn fit_whitener(training: &Array2<f64>, seed: u64) -> Result<PcaWhitener> {
    fit_whitener_with_floor(training, seed, 1e-6)
}

pub fn fit_whitener_with_floor(
    training: &Array2<f64>,
    seed: u64,
    floor: f64,
) -> Result<PcaWhitener> {
    let dim = training.ncols();
    if dim < FEATURE_DIM {
        return Err(FeatureError::InputDim {
            expected: FEATURE_DIM,
            got: dim,
        });
    }
    let needed = 10 * dim;
    if training.nrows() < needed {
        return Err(FeatureError::NotEnoughRows {
            needed,
            got: training.nrows(),
        });
    }
    let rows = if training.nrows() > MAX_FIT_ROWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, training.nrows(), MAX_FIT_ROWS).into_vec();
        idx.sort_unstable();
        training.select(Axis(0), &idx)
    } else {
        training.clone()
    };
    let n = rows.nrows() as f64;
    let mean = rows.mean_axis(Axis(0)).expect("non-empty");
    let centered = &rows - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / n;
    let eig = SymmetricEigen::new(DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut projection = Array2::<f64>::zeros((dim, FEATURE_DIM));
    let mut eigenvalues = Array1::<f64>::zeros(FEATURE_DIM);
    for (k, &col) in order.iter().take(FEATURE_DIM).enumerate() {
        let v = eig.eigenvectors.column(col);
        // sign convention: the largest-magnitude entry is positive
        let pivot = v
            .iter()
            .copied()
            .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            projection[[i, k]] = sign * v[i];
        }
        eigenvalues[k] = eig.eigenvalues[col].max(floor);
    }
    Ok(PcaWhitener {
        mean,
        projection,
        eigenvalues,
        floor,
    })
}

/// Uniform 8-bit quantization over `range`, clipping out-of-range values.
pub fn quantize8(x: &Array2<f64>, range: (f32, f32)) -> Result<Array2<u8>> {
    let (lo, hi) = (range.0 as f64, range.1 as f64);
    if !(lo < hi) {
        return Err(FeatureError::Range(range.0, range.1));
    }
    let step = (hi - lo) / 255.0;
    Ok(x.mapv(|v| ((v.clamp(lo, hi) - lo) / step).round().clamp(0.0, 255.0) as u8))
}

pub fn dequantize8(q: &QuantizedFeatures) -> Array2<f64> {
    let (lo, hi) = (q.range.0 as f64, q.range.1 as f64);
    let step = (hi - lo) / 255.0;
    q.codes.mapv(|c| lo + c as f64 * step)
}

/// Stand-in for a pretrained audio embedding: log-mel patch statistics,
/// PCA whitening, 8-bit quantization.
pub fn extract_quantized(
    clip: &AudioClip,
    whitener: &PcaWhitener,
    tag: SourceTag,
) -> Result<QuantizedFeatures> {
    let raw = raw_patch_features(clip, FRAME_PERIOD)?;
    let white = whitener.transform(&raw)?;
    Ok(QuantizedFeatures {
        codes: quantize8(&white, QUANT_RANGE)?,
        range: QUANT_RANGE,
        frame_period: FRAME_PERIOD as f32,
        source_tag: tag,
    })
}

pub fn extract_pseudo_vggish(
    clip: &AudioClip,
    whitener: &PcaWhitener,
    tag: SourceTag,
) -> Result<SideFeatureSequence> {
    Ok(extract_quantized(clip, whitener, tag)?.to_sequence())
}

/// Number of latent frames covered by one feature frame.
pub fn repeat_factor(frame_period: f64, latent_frame_period: f64) -> usize {
    ((frame_period / latent_frame_period).round() as usize).max(1)
}

/// Aligns features to `t_l` latent frames by repetition; the last feature
/// frame covers any tail.
pub fn upsample_repeat(
    v: &SideFeatureSequence,
    latent_frame_period: f64,
    t_l: usize,
) -> Array2<f64> {
    upsample_repeat_offset(v, latent_frame_period, t_l, 0)
}

/// Like [`upsample_repeat`] for a window starting `offset_frames` latent
/// frames into the feature timeline.
pub fn upsample_repeat_offset(
    v: &SideFeatureSequence,
    latent_frame_period: f64,
    t_l: usize,
    offset_frames: usize,
) -> Array2<f64> {
    let n = repeat_factor(v.frame_period, latent_frame_period);
    let last = v.n_frames() - 1;
    let idx: Vec<usize> = (0..t_l)
        .map(|t| ((t + offset_frames) / n).min(last))
        .collect();
    v.frames.select(Axis(0), &idx)
}

pub fn encode_features(q: &QuantizedFeatures) -> Vec<u8> {
    let (t_v, dim) = q.codes.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + t_v * dim);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t_v as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&q.range.0.to_le_bytes());
    out.extend_from_slice(&q.range.1.to_le_bytes());
    out.extend_from_slice(&q.frame_period.to_le_bytes());
    out.push(q.source_tag.code());
    out.extend(q.codes.iter());
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<QuantizedFeatures> {
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let t_v = u32_at(4) as usize;
    let dim = u32_at(8) as usize;
    if dim != FEATURE_DIM {
        return Err(FeatureError::Dimension(dim));
    }
    let range = (f32_at(12), f32_at(16));
    if !(range.0 < range.1) {
        return Err(FeatureError::Range(range.0, range.1));
    }
    let frame_period = f32_at(20);
    let source_tag = SourceTag::from_code(bytes[24])?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != t_v * dim {
        return Err(FeatureError::Truncated(format!(
            "expected {} code bytes, found {}",
            t_v * dim,
            payload.len()
        )));
    }
    if t_v == 0 {
        return Err(FeatureError::Truncated("zero frames".into()));
    }
    let codes = Array2::from_shape_vec((t_v, dim), payload.to_vec())
        .expect("payload length checked");
    Ok(QuantizedFeatures {
        codes,
        range,
        frame_period,
        source_tag,
    })
}

pub fn save_features(q: &QuantizedFeatures, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(q))?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<QuantizedFeatures> {
    decode_features(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // correlated columns with varied scales
        let base = Array2::from_shape_fn((rows, cols), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let mix = Array2::from_shape_fn((cols, cols), |(i, j)| {
            if i == j {
                1.0 + i as f64 * 0.1
            } else {
                rng.gen_range(-0.2..0.2)
            }
        });
        base.dot(&mix) + 3.0
    }

    #[test]
    fn whitened_variance_near_one() {
        let x = random_matrix(2000, 128, 1);
        let w = fit_whitener(&x, 7).unwrap();
        let y = w.transform(&x).unwrap();
        for v in y.var_axis(Axis(0), 0.0).iter() {
            assert!((0.9..=1.1).contains(v), "variance {v}");
        }
        // orthonormal projection columns
        let gram = w.projection.t().dot(&w.projection);
        for i in 0..128 {
            for j in 0..128 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn refit_is_identical() {
        let x = random_matrix(1500, 128, 2);
        assert_eq!(fit_whitener(&x, 3).unwrap(), fit_whitener(&x, 3).unwrap());
    }

    #[test]
    fn identical_rows_hit_the_floor() {
        let x = Array2::from_elem((1280, 128), 0.5);
        let w = fit_whitener(&x, 0).unwrap();
        assert!(w.eigenvalues.iter().all(|l| *l == w.floor));
        let y = w.transform(&x).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_few_rows_rejected() {
        let x = random_matrix(100, 128, 4);
        assert!(matches!(
            fit_whitener(&x, 0),
            Err(FeatureError::NotEnoughRows { .. })
        ));
    }

    #[test]
    fn quantization_endpoints_and_bound() {
        let range = (-2.0f32, 2.0f32);
        let x = Array2::from_shape_vec((1, 3), vec![-2.0, 2.0, 0.3]).unwrap();
        let codes = quantize8(&x, range).unwrap();
        assert_eq!(codes[[0, 0]], 0);
        assert_eq!(codes[[0, 1]], 255);
        let q = QuantizedFeatures {
            codes,
            range,
            frame_period: 0.96,
            source_tag: SourceTag::Bass,
        };
        let back = dequantize8(&q);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 4.0 / 510.0 + 1e-12);
        }
        let constant = Array2::from_elem((4, 128), 0.7);
        let c = quantize8(&constant, range).unwrap();
        assert!(c.iter().all(|v| *v == c[[0, 0]]));
        assert!(quantize8(&constant, (1.0, 1.0)).is_err());
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(repeat_factor(0.96, 1024.0 / 44_100.0), 41);
        let seq = SideFeatureSequence {
            frames: Array2::from_shape_fn((1, 128), |(_, j)| j as f64),
            frame_period: 0.96,
            source_tag: SourceTag::Mixture,
        };
        let up = upsample_repeat(&seq, 1024.0 / 44_100.0, 259);
        assert_eq!(up.nrows(), 259);
        assert!(up.rows().into_iter().all(|r| r == seq.frames.row(0)));

        let seq = SideFeatureSequence {
            frames: random_matrix(5, 128, 9),
            frame_period: 0.96,
            source_tag: SourceTag::Mixture,
        };
        assert_eq!(upsample_repeat(&seq, 0.96, 5), seq.frames);
    }

    #[test]
    fn feature_file_errors() {
        assert!(matches!(
            decode_features(&[]),
            Err(FeatureError::Truncated(_))
        ));
        let q = QuantizedFeatures {
            codes: Array2::from_elem((2, 128), 7),
            range: QUANT_RANGE,
            frame_period: 0.96,
            source_tag: SourceTag::Drums,
        };
        let mut bytes = encode_features(&q);
        assert_eq!(decode_features(&bytes).unwrap(), q);
        bytes[8..12].copy_from_slice(&64u32.to_le_bytes());
        assert!(matches!(
            decode_features(&bytes),
            Err(FeatureError::Dimension(64))
        ));
        let mut bad = encode_features(&q);
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(FeatureError::BadMagic)));
        let good = encode_features(&q);
        assert!(matches!(
            decode_features(&good[..good.len() - 1]),
            Err(FeatureError::Truncated(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocals.sfv");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = QuantizedFeatures {
            codes: Array2::from_shape_fn((6, 128), |_| rng.gen()),
            range: (-1.5, 2.5),
            frame_period: 0.96,
            source_tag: SourceTag::Vocals,
        };
        save_features(&q, &path).unwrap();
        assert_eq!(load_features(&path).unwrap(), q);
    }

    #[test]
    fn short_clip_rejected() {
        let clip = AudioClip::mono(vec![0.1; 40_000], 44_100).unwrap();
        assert!(matches!(
            raw_patch_features(&clip, FRAME_PERIOD),
            Err(FeatureError::TooShort(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantize_is_idempotent(vals in proptest::collection::vec(-5.0f64..5.0, 128)) {
                let x = Array2::from_shape_vec((1, 128), vals).unwrap();
                let q = QuantizedFeatures {
                    codes: quantize8(&x, QUANT_RANGE).unwrap(),
                    range: QUANT_RANGE,
                    frame_period: 0.96,
                    source_tag: SourceTag::Other,
                };
                let again = quantize8(&dequantize8(&q), QUANT_RANGE).unwrap();
                prop_assert_eq!(again, q.codes);
            }

            #[test]
            fn upsample_rows_come_from_input(t_v in 1usize..8, t_l in 1usize..400) {
                let seq = SideFeatureSequence {
                    frames: Array2::from_shape_fn((t_v, 128), |(i, _)| i as f64),
                    frame_period: 0.96,
                    source_tag: SourceTag::Mixture,
                };
                let up = upsample_repeat(&seq, 1024.0 / 44_100.0, t_l);
                prop_assert_eq!(up.nrows(), t_l);
                let mut distinct: Vec<i64> = up.column(0).iter().map(|v| *v as i64).collect();
                distinct.dedup();
                prop_assert!(distinct.len() <= t_v);
            }
        }
    }
}
