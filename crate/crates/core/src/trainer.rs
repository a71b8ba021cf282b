//! Data pipeline and optimization loop.
//!
//! Dataset layout: `<root>/<split>/<track>/{mixture,vocals,drums,bass,other}.wav`
//! with optional `.sfv` side-feature files of the same stem names. A run
//! directory holds `config.json`, `log.csv`, `best.ckpt`, `last.ckpt` and
//! `splits.json`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsp::{wav, AudioClip, DspError};
use crate::losses::{self, LossError};
use crate::nncore::{
    clip_grad_norm, grad_check, AdamConfig, GradCheckConfig, GradCheckReport, NnError, OptimizerState, Tape,
    Var,
};
use crate::separator::{clip_magnitude, Method, Separator, SeparatorConfig, SeparatorError};
use crate::sidefeat::{self, FeatureError, PcaWhitener, SideFeatureSequence, SourceTag, FEATURE_DIM};

pub const MIN_TRACK_SECONDS: f64 = 6.0;
/// Largest accepted relative energy of `mixture − Σ stems`.
pub const MIXTURE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("track {track} is {seconds:.2} s long, at least {needed:.2} s required")]
    TrackTooShort {
        track: String,
        seconds: f64,
        needed: f64,
    },
    #[error("track {track}: mixture differs from the stem sum (relative energy {relative:.3e})")]
    MixtureMismatch { track: String, relative: f64 },
    #[error("method {method} requires side features, missing for track {track}")]
    FeaturesRequired { method: Method, track: String },
    #[error("track {track}: side features misaligned: {detail}")]
    FeatureMisaligned { track: String, detail: String },
    #[error("split leak: {0}")]
    SplitLeak(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Side features of a full track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFeatures {
    pub mixture: SideFeatureSequence,
    /// In stem order: vocals, drums, bass, other.
    pub stems: Vec<SideFeatureSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackBundle {
    pub id: String,
    pub mixture: AudioClip,
    /// In stem order: vocals, drums, bass, other.
    pub stems: Vec<AudioClip>,
    /// Always covers the full track; `offset` locates a crop within it.
    pub features: Option<TrackFeatures>,
    /// Sample offset of this bundle within the original track.
    pub offset: usize,
}

impl TrackBundle {
    pub fn new(id: impl Into<String>, mixture: AudioClip, stems: Vec<AudioClip>) -> Result<Self> {
        let id = id.into();
        if stems.len() != SourceTag::STEMS.len() {
            return Err(TrainError::Dataset(format!(
                "track {id}: {} stems, expected 4",
                stems.len()
            )));
        }
        for s in &stems {
            if s.n_samples() != mixture.n_samples()
                || s.sample_rate() != mixture.sample_rate()
                || s.n_channels() != mixture.n_channels()
            {
                return Err(TrainError::Dataset(format!(
                    "track {id}: stems and mixture differ in length, rate or channels"
                )));
            }
        }
        Ok(Self {
            id,
            mixture,
            stems,
            features: None,
            offset: 0,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.mixture.n_samples()
    }

    pub fn duration(&self) -> f64 {
        self.mixture.duration()
    }

    /// Energy of `mixture − Σ stems` relative to the mixture energy.
    pub fn mixture_error(&self) -> f64 {
        let mut err = 0.0;
        for c in 0..self.mixture.n_channels() {
            for (n, m) in self.mixture.channel(c).iter().enumerate() {
                let s: f64 = self.stems.iter().map(|st| st.channel(c)[n]).sum();
                err += (m - s) * (m - s);
            }
        }
        err / self.mixture.energy().max(f64::MIN_POSITIVE)
    }

    /// SHA-256 of the mixture samples, used to detect split leaks.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for ch in self.mixture.channels() {
            for v in ch {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Same window of every signal; features keep the full-track timeline.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            mixture: self.mixture.slice(start, len)?,
            stems: self
                .stems
                .iter()
                .map(|s| s.slice(start, len))
                .collect::<std::result::Result<_, _>>()?,
            features: self.features.clone(),
            offset: self.offset + start,
        })
    }

    pub fn center_crop(&self, seconds: f64) -> Result<Self> {
        let len = crop_len(seconds, self.mixture.sample_rate());
        if len > self.n_samples() {
            return Err(self.too_short(seconds));
        }
        self.crop((self.n_samples() - len) / 2, len)
    }

    fn too_short(&self, needed: f64) -> TrainError {
        TrainError::TrackTooShort {
            track: self.id.clone(),
            seconds: self.duration(),
            needed,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn crop_len(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

/// Random crop whose start is a multiple of `hop`, so latent frames stay on
/// the side-feature grid.
pub fn sample_crop(
    bundle: &TrackBundle,
    seconds: f64,
    hop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrackBundle> {
    let len = crop_len(seconds, bundle.mixture.sample_rate());
    if len > bundle.n_samples() {
        return Err(bundle.too_short(seconds));
    }
    let steps = (bundle.n_samples() - len) / hop;
    let start = hop * rng.gen_range(0..=steps);
    bundle.crop(start, len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub gain_min: f64,
    pub gain_max: f64,
    pub swap_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gain_min: 0.25,
            gain_max: 1.25,
            swap_prob: 0.5,
        }
    }
}

/// Explicit per-stem gains and channel swaps.
pub fn apply_augmentation(bundle: &TrackBundle, gains: &[f64], swaps: &[bool]) -> Result<TrackBundle> {
    let stems: Vec<AudioClip> = bundle
        .stems
        .iter()
        .zip(gains.iter().zip(swaps))
        .map(|(s, (g, swap))| {
            let s = if *swap { s.swapped() } else { s.clone() };
            if *g == 1.0 {
                s
            } else {
                s.scaled(*g)
            }
        })
        .collect();
    let mixture = AudioClip::sum(&stems)?;
    Ok(TrackBundle {
        mixture,
        stems,
        ..bundle.clone()
    })
}

/// Independent gain and channel swap per stem; the mixture is re-summed.
pub fn augment(bundle: &TrackBundle, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<TrackBundle> {
    let n = bundle.stems.len();
    let mut gains = Vec::with_capacity(n);
    let mut swaps = Vec::with_capacity(n);
    for _ in 0..n {
        gains.push(rng.gen_range(cfg.gain_min..=cfg.gain_max));
        swaps.push(rng.gen_bool(cfg.swap_prob));
    }
    apply_augmentation(bundle, &gains, &swaps)
}

pub const STEM_FILES: [&str; 5] = ["mixture", "vocals", "drums", "bass", "other"];

pub fn load_track(dir: &Path) -> Result<TrackBundle> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut clips = Vec::new();
    for name in STEM_FILES {
        let path = dir.join(format!("{name}.wav"));
        if !path.exists() {
            return Err(TrainError::Dataset(format!("missing {}", path.display())));
        }
        clips.push(wav::read_wav(&path)?);
    }
    let mixture = clips.remove(0);
    let mut bundle = TrackBundle::new(id, mixture, clips)?;
    bundle.features = load_track_features(dir, &bundle.id)?;
    Ok(bundle)
}

fn load_track_features(dir: &Path, id: &str) -> Result<Option<TrackFeatures>> {
    let paths: Vec<_> = STEM_FILES
        .iter()
        .map(|n| dir.join(format!("{n}.sfv")))
        .collect();
    let present = paths.iter().filter(|p| p.exists()).count();
    if present == 0 {
        return Ok(None);
    }
    if present != paths.len() {
        return Err(TrainError::FeatureMisaligned {
            track: id.into(),
            detail: "only some .sfv files are present".into(),
        });
    }
    let mut seqs = Vec::new();
    for (path, tag) in paths.iter().zip([
        SourceTag::Mixture,
        SourceTag::Vocals,
        SourceTag::Drums,
        SourceTag::Bass,
        SourceTag::Other,
    ]) {
        let q = sidefeat::load_features(path)?;
        if q.source_tag != tag {
            return Err(TrainError::FeatureMisaligned {
                track: id.into(),
                detail: format!("{} carries tag {}", path.display(), q.source_tag),
            });
        }
        seqs.push(q.to_sequence());
    }
    let mixture = seqs.remove(0);
    Ok(Some(TrackFeatures {
        mixture,
        stems: seqs,
    }))
}

/// Loads and validates every track of `<root>/<split>`, sorted by name.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<TrackBundle>> {
    let dir = root.join(split);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(TrainError::Dataset(format!("{} has no tracks", dir.display())));
    }
    let tracks = dirs
        .iter()
        .map(|d| load_track(d))
        .collect::<Result<Vec<_>>>()?;
    validate_tracks(&tracks, MIN_TRACK_SECONDS)?;
    Ok(tracks)
}

pub fn validate_tracks(tracks: &[TrackBundle], min_seconds: f64) -> Result<()> {
    for t in tracks {
        if t.duration() + 1e-9 < min_seconds {
            return Err(t.too_short(min_seconds));
        }
        let rel = t.mixture_error();
        if rel > MIXTURE_TOLERANCE {
            return Err(TrainError::MixtureMismatch {
                track: t.id.clone(),
                relative: rel,
            });
        }
        if let Some(f) = &t.features {
            let needed = (t.duration() / sidefeat::FRAME_PERIOD).floor() as usize;
            for s in std::iter::once(&f.mixture).chain(&f.stems) {
                if s.n_frames() < needed.max(1) {
                    return Err(TrainError::FeatureMisaligned {
                        track: t.id.clone(),
                        detail: format!(
                            "{} has {} frames for {:.2} s of audio",
                            s.source_tag,
                            s.n_frames(),
                            t.duration()
                        ),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Patch hop used when fitting the whitener, denser than the feature rate so
/// small training sets still yield enough rows.
pub const WHITENER_FIT_HOP: f64 = 0.24;

/// Fits the feature whitener on patches of every mixture and stem.
pub fn fit_dataset_whitener(tracks: &[TrackBundle], seed: u64) -> Result<PcaWhitener> {
    let mut blocks = Vec::new();
    for t in tracks {
        for clip in std::iter::once(&t.mixture).chain(&t.stems) {
            blocks.push(sidefeat::raw_patch_features(clip, WHITENER_FIT_HOP)?);
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let rows = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|_| TrainError::Dataset("no tracks to fit the whitener on".into()))?;
    Ok(sidefeat::fit_whitener(&rows, seed)?)
}

/// Quantized features of the mixture and the four stems, in file order.
pub fn quantized_track_features(
    bundle: &TrackBundle,
    whitener: &PcaWhitener,
) -> Result<Vec<sidefeat::QuantizedFeatures>> {
    let tags = [
        SourceTag::Mixture,
        SourceTag::Vocals,
        SourceTag::Drums,
        SourceTag::Bass,
        SourceTag::Other,
    ];
    std::iter::once(&bundle.mixture)
        .chain(&bundle.stems)
        .zip(tags)
        .map(|(clip, tag)| Ok(sidefeat::extract_quantized(clip, whitener, tag)?))
        .collect()
}

pub fn track_features(bundle: &TrackBundle, whitener: &PcaWhitener) -> Result<TrackFeatures> {
    let mut seqs: Vec<_> = quantized_track_features(bundle, whitener)?
        .iter()
        .map(|q| q.to_sequence())
        .collect();
    let mixture = seqs.remove(0);
    Ok(TrackFeatures {
        mixture,
        stems: seqs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub crop_seconds: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub crops_per_epoch: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub augment: AugmentConfig,
    /// Capacity of the crop prefetch buffer; 0 prepares crops inline.
    pub prefetch: usize,
    /// Validate on whole tracks instead of centered crops.
    pub full_track_validation: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            early_stop_patience: 25,
            lr_decay_factor: 0.3,
            lr_patience: 10,
            crop_seconds: 6.0,
            max_epochs: 60,
            seed: 0,
            crops_per_epoch: 64,
            batch_size: 8,
            grad_clip: 5.0,
            augment: AugmentConfig::default(),
            prefetch: 2,
            full_track_validation: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Schedule(m.into()));
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr must be positive and weight decay non-negative");
        }
        if self.early_stop_patience == 0 || self.lr_patience == 0 {
            return fail("patiences must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail("decay factor must lie in (0, 1)");
        }
        if self.max_epochs == 0 || self.crops_per_epoch == 0 || self.batch_size == 0 {
            return fail("epochs, crops per epoch and batch size must be positive");
        }
        if !(self.crop_seconds > 0.0) || !(self.grad_clip > 0.0) {
            return fail("crop length and clip norm must be positive");
        }
        let a = &self.augment;
        if !(0.0 <= a.gain_min && a.gain_min <= a.gain_max) || !(0.0..=1.0).contains(&a.swap_prob) {
            return fail("bad augmentation ranges");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Learning-rate decay and early stopping on a stagnating metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub best: f64,
    lr_patience: usize,
    stop_patience: usize,
    since_improvement: usize,
    since_decay: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlateauStep {
    pub improved: bool,
    pub decay: bool,
    pub stop: bool,
}

impl Plateau {
    pub fn new(lr_patience: usize, stop_patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            lr_patience,
            stop_patience,
            since_improvement: 0,
            since_decay: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> PlateauStep {
        if metric < self.best {
            self.best = metric;
            self.since_improvement = 0;
            self.since_decay = 0;
            return PlateauStep {
                improved: true,
                ..Default::default()
            };
        }
        self.since_improvement += 1;
        self.since_decay += 1;
        let decay = self.since_decay >= self.lr_patience;
        if decay {
            self.since_decay = 0;
        }
        PlateauStep {
            improved: false,
            decay,
            stop: self.since_improvement >= self.stop_patience,
        }
    }
}

/// One prepared training or validation example.
#[derive(Debug, Clone)]
pub struct Example {
    pub mixture: Array2<f64>,
    pub targets: Vec<Array2<f64>>,
    pub side: Option<Array2<f64>>,
    pub stem_features: Option<Vec<Array2<f64>>>,
}

/// Side features on the latent grid of `bundle`.
pub fn aligned_features(
    bundle: &TrackBundle,
    config: &SeparatorConfig,
    t_l: usize,
) -> Option<(Array2<f64>, Vec<Array2<f64>>)> {
    let f = bundle.features.as_ref()?;
    let period = config.latent_frame_period();
    let offset = (bundle.offset as f64 / config.hop_length as f64).round() as usize;
    let up = |s: &SideFeatureSequence| sidefeat::upsample_repeat_offset(s, period, t_l, offset);
    Some((up(&f.mixture), f.stems.iter().map(up).collect()))
}

pub fn prepare_example(bundle: &TrackBundle, config: &SeparatorConfig) -> Result<Example> {
    let stft = config.stft();
    let (mixture, _) = clip_magnitude(&bundle.mixture, &stft, config.channels)?;
    let targets = bundle
        .stems
        .iter()
        .map(|s| Ok(clip_magnitude(s, &stft, config.channels)?.0))
        .collect::<Result<Vec<_>>>()?;
    let method = config.method;
    let feats = aligned_features(bundle, config, mixture.nrows());
    if feats.is_none() && (method.needs_mixture_features() || method.needs_stem_features()) {
        return Err(TrainError::FeaturesRequired {
            method,
            track: bundle.id.clone(),
        });
    }
    let (side, stem_features) = match feats {
        Some((m, s)) => (
            method.needs_mixture_features().then_some(m),
            method.needs_stem_features().then_some(s),
        ),
        None => (None, None),
    };
    Ok(Example {
        mixture,
        targets,
        side,
        stem_features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub mse: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossValues {
    fn add(&mut self, o: LossValues) {
        self.mse += o.mse;
        self.reg += o.reg;
        self.total += o.total;
    }

    fn scaled(self, c: f64) -> Self {
        Self {
            mse: self.mse * c,
            reg: self.reg * c,
            total: self.total * c,
        }
    }

    fn is_finite(&self) -> bool {
        self.mse.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }
}

fn regularizer(model: &Separator, tape: &mut Tape, projected: Option<&[Var]>, ex: &Example) -> Result<Option<Var>> {
    let cfg = model.config();
    Ok(match (cfg.method, projected, &ex.stem_features) {
        (Method::ConReg, Some(p), Some(v)) => Some(losses::con_reg_term(tape, p, v, cfg.alpha)?),
        (Method::DisReg, Some(p), Some(v)) => Some(losses::dis_reg_term(tape, p, v)?),
        (m, _, None) if m.needs_stem_features() => {
            return Err(TrainError::FeaturesRequired {
                method: m,
                track: "<example>".into(),
            })
        }
        _ => None,
    })
}

/// Builds the training objective of one example on `tape`.
/// Reconstruction term and, for the regularized methods, the unweighted
/// regularizer.
pub fn example_terms(model: &Separator, tape: &mut Tape, ex: &Example) -> Result<(Var, Option<Var>)> {
    let out = model.build(tape, &ex.mixture, ex.side.as_ref())?;
    let mse = losses::mse_term(tape, &out.estimates, &ex.targets)?;
    let reg = regularizer(model, tape, out.projected.as_deref(), ex)?;
    Ok((mse, reg))
}

/// The unweighted regularizer alone, built without the decoder.
pub fn regularizer_term(model: &Separator, tape: &mut Tape, ex: &Example) -> Result<Option<Var>> {
    if !model.config().method.has_head() {
        return Ok(None);
    }
    let latents = model.encode(tape, &ex.mixture)?;
    let projected = latents
        .iter()
        .map(|l| model.project(tape, *l))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    regularizer(model, tape, Some(&projected), ex)
}

pub fn example_loss(model: &Separator, tape: &mut Tape, ex: &Example) -> Result<(Var, LossValues)> {
    let (mse, reg) = example_terms(model, tape, ex)?;
    let mse_v = tape.scalar(mse);
    let (loss, reg_v) = match reg {
        Some(r) => {
            let weighted = tape.scale(r, model.config().lambda);
            (tape.add(mse, weighted)?, tape.scalar(r))
        }
        None => (mse, 0.0),
    };
    Ok((
        loss,
        LossValues {
            mse: mse_v,
            reg: reg_v,
            total: tape.scalar(loss),
        },
    ))
}

/// Which part of the training objective a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedLoss {
    Total,
    Mse,
    Reg,
}

/// Finite-difference check of `model`'s parameters under one part of the
/// loss on `ex`.
pub fn check_gradients(
    model: &Separator,
    ex: &Example,
    part: CheckedLoss,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut params = model.params().clone();
    let mut probe = model.clone();
    let report = grad_check(&mut params, cfg, |tape, store| {
        probe.params_mut().clone_from(store);
        let graph = |e: TrainError| NnError::Graph(e.to_string());
        match part {
            CheckedLoss::Total => Ok(example_loss(&probe, tape, ex).map_err(graph)?.0),
            CheckedLoss::Mse => Ok(example_terms(&probe, tape, ex).map_err(graph)?.0),
            CheckedLoss::Reg => regularizer_term(&probe, tape, ex)
                .map_err(graph)?
                .ok_or_else(|| NnError::Graph(format!("{} has no regularizer", probe.config().method))),
        }
    })?;
    Ok(report)
}

/// Random example of `frames` frames shaped for `config`, used to exercise
/// the loss without audio.
pub fn synthetic_example(config: &SeparatorConfig, frames: usize, seed: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = config.channels * config.n_bins();
    let mixture = Array2::from_shape_fn((frames, width), |_| rng.gen_range(0.1..1.0));
    let shares: Vec<Array2<f64>> = (0..config.sources.len())
        .map(|_| Array2::from_shape_fn((frames, width), |_| rng.gen_range(0.0..1.0)))
        .collect();
    let total = shares.iter().fold(Array2::<f64>::zeros((frames, width)), |acc, s| acc + s);
    let targets = shares.iter().map(|s| s / &total * &mixture).collect();
    let features = |rng: &mut ChaCha8Rng| Array2::from_shape_fn((frames, FEATURE_DIM), |_| rng.gen_range(-2.0..2.0));
    let side = config.method.needs_mixture_features().then(|| features(&mut rng));
    let stem_features = config
        .method
        .needs_stem_features()
        .then(|| (0..config.sources.len()).map(|_| features(&mut rng)).collect());
    Example {
        mixture,
        targets,
        side,
        stem_features,
    }
}

/// Deterministic validation loss: centered crops (or whole tracks), no
/// augmentation, averaged over tracks.
pub fn validate(model: &Separator, tracks: &[TrackBundle], schedule: &TrainSchedule) -> Result<LossValues> {
    let mut acc = LossValues::default();
    for t in tracks {
        let clip = if schedule.full_track_validation {
            t.clone()
        } else {
            t.center_crop(schedule.crop_seconds)?
        };
        let ex = prepare_example(&clip, model.config())?;
        let mut tape = Tape::new();
        let (_, v) = example_loss(model, &mut tape, &ex)?;
        acc.add(v);
    }
    Ok(acc.scaled(1.0 / tracks.len().max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossValues,
    pub valid: LossValues,
    pub lr: f64,
    pub grad_norm: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl RunLog {
    pub const CSV_HEADER: &'static str =
        "epoch,train_mse,train_reg,train_total,valid_mse,valid_reg,valid_total,lr,grad_norm,improved";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&csv_row(r));
        }
        s
    }

    pub fn train_mse(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train.mse).collect()
    }
}

fn csv_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        r.epoch,
        r.train.mse,
        r.train.reg,
        r.train.total,
        r.valid.mse,
        r.valid.reg,
        r.valid.total,
        r.lr,
        r.grad_norm,
        r.improved as u8
    )
}

/// Everything `train` consumes besides the two configs.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<TrackBundle>,
    pub valid: Vec<TrackBundle>,
    /// Content hashes of the held-out test split.
    pub test_hashes: BTreeSet<String>,
    /// Embedded in checkpoints so concat models can featurize raw audio.
    pub whitener: Option<PcaWhitener>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Separator,
    pub last: Separator,
    pub log: RunLog,
}

#[derive(Serialize)]
struct SplitEntry<'a> {
    id: &'a str,
    hash: String,
}

#[derive(Serialize)]
struct SplitsFile<'a> {
    train: Vec<SplitEntry<'a>>,
    valid: Vec<SplitEntry<'a>>,
    test_hashes: &'a BTreeSet<String>,
}

fn split_entries(ts: &[TrackBundle]) -> Vec<SplitEntry<'_>> {
    ts.iter()
        .map(|t| SplitEntry {
            id: &t.id,
            hash: t.content_hash(),
        })
        .collect()
}

fn check_splits(data: &TrainData) -> Result<()> {
    for t in data.train.iter().chain(&data.valid) {
        if data.test_hashes.contains(&t.content_hash()) {
            return Err(TrainError::SplitLeak(format!(
                "track {} also appears in the test split",
                t.id
            )));
        }
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn checkpoint_meta(epoch: usize, valid: &LossValues, lr: f64) -> String {
    serde_json::json!({ "epoch": epoch, "valid": valid, "lr": lr }).to_string()
}

/// Produces training examples in a fixed order, independent of how fast the
/// optimizer consumes them.
struct CropStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl CropStream {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next(&mut self, tracks: &[TrackBundle], config: &SeparatorConfig, schedule: &TrainSchedule) -> Result<Example> {
        if self.cursor == self.order.len() {
            self.order = (0..tracks.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let track = &tracks[self.order[self.cursor]];
        self.cursor += 1;
        let crop = sample_crop(track, schedule.crop_seconds, config.hop_length, &mut self.rng)?;
        let crop = augment(&crop, &schedule.augment, &mut self.rng)?;
        prepare_example(&crop, config)
    }
}

pub fn train(
    config: &SeparatorConfig,
    schedule: &TrainSchedule,
    data: &TrainData,
    run_dir: Option<&Path>,
    config_json: &serde_json::Value,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(TrainError::Dataset("train and valid splits must be non-empty".into()));
    }
    validate_tracks(&data.train, schedule.crop_seconds)?;
    validate_tracks(&data.valid, schedule.crop_seconds)?;
    check_splits(data)?;
    let method = config.method;
    if method.needs_mixture_features() || method.needs_stem_features() {
        if let Some(t) = data.train.iter().chain(&data.valid).find(|t| t.features.is_none()) {
            return Err(TrainError::FeaturesRequired {
                method,
                track: t.id.clone(),
            });
        }
    }

    let mut model = Separator::new(config.clone())?;
    let mixtures = data
        .train
        .iter()
        .map(|t| Ok(clip_magnitude(&t.mixture, &config.stft(), config.channels)?.0))
        .collect::<Result<Vec<_>>>()?;
    model.fit_scaler(mixtures.iter())?;
    model.set_whitener(data.whitener.clone());

    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let pretty = serde_json::to_string_pretty(config_json).expect("json value serializes");
        write_file(&dir.join("config.json"), pretty.as_bytes())?;
        let splits = SplitsFile {
            train: split_entries(&data.train),
            valid: split_entries(&data.valid),
            test_hashes: &data.test_hashes,
        };
        let text = serde_json::to_string_pretty(&splits).expect("splits serialize");
        write_file(&dir.join("splits.json"), text.as_bytes())?;
        write_file(&dir.join("log.csv"), format!("{}\n", RunLog::CSV_HEADER).as_bytes())?;
    }

    let mut opt = OptimizerState::new(model.params(), schedule.adam());
    let mut plateau = Plateau::new(schedule.lr_patience, schedule.early_stop_patience);
    let mut log = RunLog::default();
    let mut best = model.clone();
    let total_crops = schedule.max_epochs * schedule.crops_per_epoch;

    let outcome = std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Example>>(schedule.prefetch.max(1));
        let mut inline = None;
        if schedule.prefetch > 0 {
            let tracks = &data.train;
            scope.spawn(move || {
                let mut stream = CropStream::new(schedule.seed);
                for _ in 0..total_crops {
                    let ex = stream.next(tracks, config, schedule);
                    let failed = ex.is_err();
                    if tx.send(ex).is_err() || failed {
                        break;
                    }
                }
            });
        } else {
            drop(tx);
            inline = Some(CropStream::new(schedule.seed));
        }
        let mut next_example = || -> Result<Example> {
            match inline.as_mut() {
                Some(stream) => stream.next(&data.train, config, schedule),
                None => rx
                    .recv()
                    .map_err(|_| TrainError::Dataset("crop producer stopped".into()))?,
            }
        };

        for epoch in 1..=schedule.max_epochs {
            let mut epoch_loss = LossValues::default();
            let mut grad_norm = 0.0;
            let mut done = 0;
            let mut step = 0;
            while done < schedule.crops_per_epoch {
                let batch = schedule.batch_size.min(schedule.crops_per_epoch - done);
                for _ in 0..batch {
                    let ex = next_example()?;
                    let mut tape = Tape::new();
                    let (loss, values) = example_loss(&model, &mut tape, &ex)?;
                    if !values.is_finite() {
                        return Err(TrainError::NonFinite {
                            epoch,
                            step,
                            detail: format!(
                                "mse={} reg={} total={}",
                                values.mse, values.reg, values.total
                            ),
                        });
                    }
                    let scaled = tape.scale(loss, 1.0 / batch as f64);
                    tape.backward(scaled, model.params_mut())?;
                    epoch_loss.add(values);
                }
                grad_norm = clip_grad_norm(model.params_mut(), schedule.grad_clip);
                opt.step(model.params_mut()).map_err(|e| match e {
                    NnError::NonFinite(name) => TrainError::NonFinite {
                        epoch,
                        step,
                        detail: format!("gradient of {name}"),
                    },
                    other => other.into(),
                })?;
                model.params_mut().zero_grad();
                done += batch;
                step += 1;
            }
            let train_loss = epoch_loss.scaled(1.0 / schedule.crops_per_epoch as f64);
            let valid = validate(&model, &data.valid, schedule)?;
            if !valid.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    detail: format!("validation total={}", valid.total),
                });
            }
            let lr = opt.lr();
            let state = plateau.observe(valid.total);
            let record = EpochRecord {
                epoch,
                train: train_loss,
                valid,
                lr,
                grad_norm,
                improved: state.improved,
            };
            if state.improved {
                best = model.clone();
                log.best_epoch = epoch;
            }
            if let Some(dir) = run_dir {
                let path = dir.join("log.csv");
                let mut f = fs::OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                f.write_all(csv_row(&record).as_bytes()).map_err(io_err(&path))?;
                if state.improved {
                    best.to_checkpoint(None, checkpoint_meta(epoch, &valid, lr))
                        .save(dir.join("best.ckpt"))?;
                }
                model
                    .to_checkpoint(Some(opt.clone()), checkpoint_meta(epoch, &valid, lr))
                    .save(dir.join("last.ckpt"))?;
            }
            log.records.push(record);
            if state.decay {
                opt.set_lr(lr * schedule.lr_decay_factor);
            }
            if state.stop {
                log.stopped_early = true;
                break;
            }
        }
        Ok(())
    });
    outcome?;
    Ok(TrainOutcome {
        best,
        last: model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp;

    fn ramp_clip(n: usize, scale: f64) -> AudioClip {
        let l: Vec<f64> = (0..n).map(|i| scale * ((i % 97) as f64 / 97.0 - 0.5)).collect();
        let r: Vec<f64> = (0..n).map(|i| scale * ((i % 31) as f64 / 31.0 - 0.5)).collect();
        AudioClip::new(vec![l, r], dsp::SAMPLE_RATE).unwrap()
    }

    fn bundle(n: usize) -> TrackBundle {
        let stems: Vec<_> = (0..4).map(|k| ramp_clip(n, 0.1 * (k + 1) as f64)).collect();
        let mixture = AudioClip::sum(&stems).unwrap();
        TrackBundle::new("t", mixture, stems).unwrap()
    }

    #[test]
    fn plateau_on_frozen_metric() {
        let mut p = Plateau::new(10, 25);
        let mut decays = Vec::new();
        let mut stop = None;
        for epoch in 1..=60 {
            let s = p.observe(1.0);
            if s.decay {
                decays.push(epoch);
            }
            if s.stop {
                stop = Some(epoch);
                break;
            }
        }
        assert_eq!(decays, vec![11, 21]);
        assert_eq!(stop, Some(26));
    }

    #[test]
    fn plateau_resets_on_improvement() {
        let mut p = Plateau::new(2, 3);
        assert!(p.observe(1.0).improved);
        assert!(!p.observe(1.0).decay);
        assert!(p.observe(1.0).decay);
        assert!(p.observe(0.5).improved);
        assert!(!p.observe(0.7).stop);
        assert!(!p.observe(0.7).stop);
        assert!(p.observe(0.7).stop);
    }

    #[test]
    fn crops_are_reproducible_and_compose() {
        let b = bundle(44_100 * 8);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = sample_crop(&b, 6.0, 1024, &mut r1).unwrap();
        let c = sample_crop(&b, 6.0, 1024, &mut r2).unwrap();
        assert_eq!(a.offset, c.offset);
        assert_eq!(a.offset % 1024, 0);
        let cc = sample_crop(&a, 3.0, 1024, &mut r1).unwrap();
        assert_eq!(cc.n_samples(), 3 * 44_100);
        let direct = b.crop(cc.offset, cc.n_samples()).unwrap();
        assert_eq!(direct, cc);
        assert!(cc.mixture_error() < 1e-28);
    }

    #[test]
    fn short_track_is_rejected() {
        let b = bundle(44_100 * 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_crop(&b, 6.0, 1024, &mut rng),
            Err(TrainError::TrackTooShort { .. })
        ));
        assert!(validate_tracks(&[b], 6.0).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let b = bundle(4096);
        let out = apply_augmentation(&b, &[1.0; 4], &[false; 4]).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn augmentation_resums_mixture() {
        let b = bundle(4096);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = augment(&b, &AugmentConfig::default(), &mut rng).unwrap();
        let resum = AudioClip::sum(&a.stems).unwrap();
        assert_eq!(resum, a.mixture);
    }

    #[test]
    fn gain_scales_target_magnitude() {
        let b = bundle(8192);
        let a = apply_augmentation(&b, &[0.5, 1.0, 1.0, 1.0], &[false; 4]).unwrap();
        let cfg = SeparatorConfig {
            win_length: 1024,
            hop_length: 256,
            max_bin: 64,
            ..SeparatorConfig::desk(Method::Baseline)
        };
        let x = prepare_example(&b, &cfg).unwrap();
        let y = prepare_example(&a, &cfg).unwrap();
        for (p, q) in x.targets[0].iter().zip(y.targets[0].iter()) {
            assert!((0.5 * p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        let s = TrainSchedule {
            lr_decay_factor: 1.0,
            ..TrainSchedule::default()
        };
        assert!(s.validate().is_err());
        let s = TrainSchedule {
            lr_patience: 0,
            ..TrainSchedule::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn mixture_mismatch_is_detected() {
        let mut b = bundle(44_100 * 7);
        b.mixture = b.mixture.scaled(1.5);
        assert!(matches!(
            validate_tracks(&[b], 6.0),
            Err(TrainError::MixtureMismatch { .. })
        ));
    }
}
