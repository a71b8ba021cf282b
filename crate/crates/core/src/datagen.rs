//! Deterministic synthetic four-stem tracks.
//!
//! Bass is a low harmonic tone, drums are filtered noise bursts on an eighth
//! note grid, vocals are a vibrato melody with formant-shaped harmonics and
//! rests, and other is a sustained chord pad whose register and voicing vary
//! per track.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::{wav, AudioClip, DspError, SAMPLE_RATE};
use crate::trainer::{TrackBundle, TrainError, STEM_FILES};

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const PEAK_LIMIT: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid synthesis spec: {0}")]
    Spec(String),
    #[error("{0} exists and is not empty (pass force to overwrite)")]
    NotEmpty(PathBuf),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path} does not match the manifest (expected sha256 {expected}, found {found})")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 8,
            n_valid: 2,
            n_test: 2,
            duration: 12.0,
            sample_rate: SAMPLE_RATE,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration >= 7.0) {
            return Err(DatagenError::Spec(format!(
                "duration {} s is below 7 s",
                self.duration
            )));
        }
        if self.sample_rate != SAMPLE_RATE {
            return Err(DatagenError::Spec(format!(
                "sample rate {} is not {SAMPLE_RATE}",
                self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    /// `(split, index within split, global track index)` for every track.
    pub fn layout(&self) -> Vec<(&'static str, usize, u64)> {
        let counts = [self.n_train, self.n_valid, self.n_test];
        let mut out = Vec::new();
        let mut global = 0;
        for (split, n) in SPLITS.iter().zip(counts) {
            for i in 0..n {
                out.push((*split, i, global));
                global += 1;
            }
        }
        out
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    sr: f64,
    n: usize,
    beat: f64,
}

impl Ctx {
    fn secs(&self, s: f64) -> usize {
        (s * self.sr).round() as usize
    }
}

/// Attack/release envelope of a note of `len` samples.
fn note_env(len: usize, attack: usize, release: usize, decay_to: f64) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let a = if attack > 0 { (i as f64 / attack as f64).min(1.0) } else { 1.0 };
            let r = if release > 0 {
                ((len - i) as f64 / release as f64).min(1.0)
            } else {
                1.0
            };
            let d = decay_to + (1.0 - decay_to) * (-(i as f64) / len.max(1) as f64 * 3.0).exp();
            a * r * d
        })
        .collect()
}

/// Harmonic tone following a per-sample frequency track, partials above
/// 0.45·sr dropped.
fn render_harmonic(freq: &[f64], amp: &[f64], partials: &[f64], sr: f64) -> Vec<f64> {
    let mut phase = 0.0;
    freq.iter()
        .zip(amp)
        .map(|(f, a)| {
            phase += 2.0 * PI * f / sr;
            if phase > 2.0 * PI * 1e6 {
                phase %= 2.0 * PI;
            }
            let mut v = 0.0;
            for (k, p) in partials.iter().enumerate() {
                if (k + 1) as f64 * f < 0.45 * sr {
                    v += p * ((k + 1) as f64 * phase).sin();
                }
            }
            a * v
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let r = rms(x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
}

fn semitones(f: f64, st: f64) -> f64 {
    f * 2f64.powf(st / 12.0)
}

fn bass(ctx: &mut Ctx) -> Vec<f64> {
    let f0 = ctx.rng.gen_range(45.0..80.0);
    let steps = [0.0, 0.0, 3.0, 5.0, 7.0, -2.0, 10.0];
    let partials = [1.0, 0.5, 0.3, 0.15];
    let beats = if ctx.rng.gen_bool(0.5) { 1.0 } else { 2.0 };
    let note = ctx.secs(ctx.beat * beats);
    let mut freq = Vec::with_capacity(ctx.n);
    let mut amp = Vec::with_capacity(ctx.n);
    while freq.len() < ctx.n {
        let f = semitones(f0, steps[ctx.rng.gen_range(0..steps.len())]).clamp(40.0, 120.0);
        let len = note.min(ctx.n - freq.len());
        let env = note_env(len, ctx.secs(0.01), ctx.secs(0.03), 0.5);
        freq.extend(std::iter::repeat(f).take(len));
        amp.extend(env);
    }
    render_harmonic(&freq, &amp, &partials, ctx.sr)
}

/// One-pole low-pass coefficient for cutoff `fc`.
fn lp_coef(fc: f64, sr: f64) -> f64 {
    1.0 - (-2.0 * PI * fc / sr).exp()
}

fn burst(ctx: &mut Ctx, len: usize, decay: f64, lo: f64, hi: f64) -> Vec<f64> {
    let (a_lo, a_hi) = (lp_coef(lo, ctx.sr), lp_coef(hi, ctx.sr));
    let (mut s_lo, mut s_hi) = (0.0, 0.0);
    let tau = decay * ctx.sr;
    let mut out: Vec<f64> = (0..len)
        .map(|i| {
            let w: f64 = ctx.rng.gen_range(-1.0..1.0);
            // band-pass as the difference of two one-pole low-passes
            s_hi += a_hi * (w - s_hi);
            s_lo += a_lo * (w - s_lo);
            let band = if lo > 0.0 { s_hi - s_lo } else { s_hi };
            band * (-(i as f64) / tau).exp()
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

fn drums(ctx: &mut Ctx) -> Vec<f64> {
    let mut out = vec![0.0; ctx.n];
    let step = ctx.beat / 2.0;
    let hat_prob = ctx.rng.gen_range(0.6..0.95);
    let mut k = 0usize;
    loop {
        let start = ctx.secs(k as f64 * step);
        if start >= ctx.n {
            break;
        }
        let pos = k % 8;
        let mut hits = Vec::new();
        if pos == 0 || pos == 4 || (pos == 6 && ctx.rng.gen_bool(0.3)) {
            hits.push((0.18, 0.0, 150.0, 1.0));
        }
        if pos == 2 || pos == 6 {
            hits.push((0.12, 300.0, 4000.0, 0.7));
        }
        if ctx.rng.gen_bool(hat_prob) {
            hits.push((0.03, 6000.0, 16000.0, 0.35));
        }
        for (decay, lo, hi, level) in hits {
            let len = ctx.secs(decay * 5.0).min(ctx.n - start);
            let b = burst(ctx, len, decay, lo, hi);
            for (o, v) in out[start..start + len].iter_mut().zip(b) {
                *o += level * v;
            }
        }
        k += 1;
    }
    out
}

fn vocals(ctx: &mut Ctx) -> Vec<f64> {
    let base = ctx.rng.gen_range(200.0..330.0);
    let scale = [0.0, 2.0, 4.0, 7.0, 9.0, 12.0];
    let rate = ctx.rng.gen_range(5.0..6.5);
    let depth = ctx.rng.gen_range(0.015..0.03);
    let f1 = ctx.rng.gen_range(500.0..800.0);
    let f2 = ctx.rng.gen_range(1200.0..2200.0);
    let mut freq = Vec::with_capacity(ctx.n);
    let mut amp = Vec::with_capacity(ctx.n);
    let mut notes = Vec::new();
    while freq.len() < ctx.n {
        let beats = [1.0, 1.0, 2.0][ctx.rng.gen_range(0..3)];
        let len = ctx.secs(ctx.beat * beats).min(ctx.n - freq.len());
        let rest = ctx.rng.gen_bool(0.2);
        let f = semitones(base, scale[ctx.rng.gen_range(0..scale.len())]).clamp(180.0, 500.0);
        let env = if rest {
            vec![0.0; len]
        } else {
            note_env(len, ctx.secs(0.03), ctx.secs(0.05), 0.8)
        };
        notes.push(f);
        freq.extend(std::iter::repeat(f).take(len));
        amp.extend(env);
    }
    for (i, f) in freq.iter_mut().enumerate() {
        *f *= 1.0 + depth * (2.0 * PI * rate * i as f64 / ctx.sr).sin();
    }
    // partial weights from the mean pitch so the formants stay put
    let f_mean = notes.iter().sum::<f64>() / notes.len() as f64;
    let partials: Vec<f64> = (1..=10)
        .map(|k| {
            let fk = k as f64 * f_mean;
            let formant = 1.0
                + 2.0 * (-((fk - f1) / 200.0).powi(2)).exp()
                + 1.5 * (-((fk - f2) / 400.0).powi(2)).exp();
            formant / k as f64
        })
        .collect();
    render_harmonic(&freq, &amp, &partials, ctx.sr)
}

fn other(ctx: &mut Ctx) -> Vec<f64> {
    let root = ctx.rng.gen_range(110.0..220.0);
    let chords: [&[f64]; 4] = [&[0.0, 4.0, 7.0], &[0.0, 3.0, 7.0], &[0.0, 5.0, 7.0], &[0.0, 4.0, 7.0, 11.0]];
    let quality = chords[ctx.rng.gen_range(0..chords.len())];
    let spread = ctx.rng.gen_bool(0.5);
    let n_partials = ctx.rng.gen_range(2..=4);
    let partials: Vec<f64> = (1..=n_partials).map(|k| 1.0 / (k * k) as f64).collect();
    let progression = [0.0, 5.0, 7.0, -3.0, 2.0];
    let bar = ctx.secs(ctx.beat * 4.0);
    let mut out = vec![0.0; ctx.n];
    let mut start = 0;
    while start < ctx.n {
        let len = bar.min(ctx.n - start);
        let shift = progression[ctx.rng.gen_range(0..progression.len())];
        let env = note_env(len, ctx.secs(0.15), ctx.secs(0.15), 0.9);
        for (v, st) in quality.iter().enumerate() {
            let lift = if spread && v % 2 == 1 { 12.0 } else { 0.0 };
            let f = semitones(root, shift + st + lift);
            let detune = 1.0 + ctx.rng.gen_range(-0.002..0.002);
            let freq = vec![f * detune; len];
            let tone = render_harmonic(&freq, &env, &partials, ctx.sr);
            for (o, t) in out[start..start + len].iter_mut().zip(tone) {
                *o += t;
            }
        }
        start += len;
    }
    out
}

/// Equal-power stereo placement; `pan` in [-1, 1].
fn pan(mono: &[f64], pan: f64) -> Vec<Vec<f64>> {
    let theta = (pan + 1.0) * PI / 4.0;
    vec![
        mono.iter().map(|v| v * theta.cos()).collect(),
        mono.iter().map(|v| v * theta.sin()).collect(),
    ]
}

/// Deterministic track `index`; every index draws from its own stream of the
/// spec's seed.
pub fn synth_track(spec: &SynthSpec, index: u64) -> Result<TrackBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let bpm: f64 = rng.gen_range(90.0..140.0);
    let mut ctx = Ctx {
        rng,
        sr: spec.sample_rate as f64,
        n: spec.n_samples(),
        beat: 60.0 / bpm,
    };
    let layers: [(fn(&mut Ctx) -> Vec<f64>, f64, f64); 4] = [
        (vocals, 0.07, 0.15),
        (drums, 0.08, 0.5),
        (bass, 0.08, 0.1),
        (other, 0.06, 0.6),
    ];
    let mut stems = Vec::new();
    for (render, level, width) in layers {
        let mut mono = render(&mut ctx);
        let gain = ctx.rng.gen_range(0.7..1.3);
        normalize_rms(&mut mono, level * gain);
        let p = ctx.rng.gen_range(-width..=width);
        stems.push(pan(&mono, p));
    }
    let n = ctx.n;
    let mix_peak = (0..2)
        .flat_map(|c| (0..n).map(move |i| (c, i)))
        .map(|(c, i)| stems.iter().map(|s| s[c][i]).sum::<f64>().abs())
        .fold(0.0f64, f64::max);
    let stem_peak = stems
        .iter()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let peak = mix_peak.max(stem_peak);
    // headroom keeps the f32 rounding below from crossing the limit
    let scale = if peak > 0.0 { (PEAK_LIMIT - 1e-3) / peak } else { 1.0 };
    let clips = stems
        .into_iter()
        .map(|s| {
            let chans = s
                .into_iter()
                .map(|c| c.into_iter().map(|v| (v * scale) as f32 as f64).collect())
                .collect();
            AudioClip::new(chans, spec.sample_rate)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mixture = AudioClip::sum(&clips)?;
    Ok(TrackBundle::new(format!("synth{index:03}"), mixture, clips)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub track: String,
    pub index: u64,
    /// SHA-256 of each written file, keyed by stem name.
    pub sha256: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub tracks: Vec<ManifestEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes every track as WAVs in the trainer layout plus `manifest.json`.
pub fn build_dataset(spec: &SynthSpec, root: &Path, force: bool) -> Result<Manifest> {
    spec.validate()?;
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(io(root))?.next().is_some();
        if non_empty && !force {
            return Err(DatagenError::NotEmpty(root.to_path_buf()));
        }
        for split in SPLITS {
            let dir = root.join(split);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(io(&dir))?;
            }
        }
    }
    let mut tracks = Vec::new();
    for (split, i, index) in spec.layout() {
        let track = format!("track{i:03}");
        let dir = root.join(split).join(&track);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let bundle = synth_track(spec, index)?;
        let mut sha256 = std::collections::BTreeMap::new();
        let clips = std::iter::once(&bundle.mixture).chain(&bundle.stems);
        for (name, clip) in STEM_FILES.iter().zip(clips) {
            let path = dir.join(format!("{name}.wav"));
            wav::write_wav(&path, clip)?;
            sha256.insert(name.to_string(), sha256_file(&path)?);
        }
        tracks.push(ManifestEntry {
            split: split.into(),
            track,
            index,
            sha256,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        tracks,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io(&path))?;
    Ok(manifest)
}

/// Re-hashes every file listed in `<root>/manifest.json`.
pub fn verify_dataset(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DatagenError::Manifest(format!("{}: {e}", path.display())))?;
    for entry in &manifest.tracks {
        let dir = root.join(&entry.split).join(&entry.track);
        for (name, expected) in &entry.sha256 {
            let file = dir.join(format!("{name}.wav"));
            let found = sha256_file(&file)?;
            if &found != expected {
                return Err(DatagenError::HashMismatch {
                    path: file,
                    expected: expected.clone(),
                    found,
                });
            }
        }
    }
    Ok(manifest)
}
