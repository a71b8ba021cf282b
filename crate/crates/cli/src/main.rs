//! `sidesep`: synthesize data, extract side features, train, separate,
//! evaluate and analyze latent spaces.

mod config;
mod exit;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};
use sidesep::bsseval::{self, EvalReport};
use sidesep::datagen::{self, SynthSpec};
use sidesep::dsp::{wav, AudioClip};
use sidesep::latentlab;
use sidesep::nncore::{config_hash, Checkpoint, GradCheckConfig};
use sidesep::separator::{Method, Separator};
use sidesep::sidefeat::{self, PcaWhitener};
use sidesep::trainer::{self, CheckedLoss, TrackBundle, TrainData, STEM_FILES};

use config::RunConfig;
use exit::Failure;

/// Name of the fitted whitener inside a dataset root.
const WHITENER_FILE: &str = "whitener.json";

#[derive(Parser)]
#[command(name = "sidesep", version, about = "Side-feature source separation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic four-stem dataset with a hash manifest.
    Synth(SynthArgs),
    /// Fit the feature whitener and write `.sfv` side features for every track.
    Features(FeaturesArgs),
    /// Train a separator from a JSON run config.
    Train(TrainArgs),
    /// Separate one mixture WAV into four stem WAVs.
    Separate(SeparateArgs),
    /// Framewise SDR/SIR/SAR on a dataset split.
    Eval(EvalArgs),
    /// Export latents and cluster them with K-means.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the training loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Track length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeatureSource {
    /// A tree written by `synth`; its manifest hashes are verified first.
    Synth,
    /// Any directory in the dataset layout.
    Dir,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "dir")]
    source: FeatureSource,
    /// Split the whitener is fitted on.
    #[arg(long, default_value = "train")]
    fit_split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    method: Option<String>,
    /// Seeds both initialization and crop sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Run directory written by `train`; uses its best checkpoint and config.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SeparateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    mixture: PathBuf,
    /// Mixture `.sfv` file; without it the checkpoint's extractor is used.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Evaluate precomputed estimates laid out as `<dir>/<track>/<source>.wav`.
    #[arg(long, conflicts_with_all = ["run", "checkpoint"])]
    estimates: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    hop: Option<f64>,
    #[arg(long)]
    filter_len: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    include_silence: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Spectrogram frames in the random example.
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Entries checked per parameter tensor.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Exit with the numeric-failure code above this relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn log_resolved(command: &str, resolved: &Value, seed: u64) {
    eprintln!("[sidesep {command}] seed {seed}");
    eprintln!("[sidesep {command}] resolved config {resolved}");
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn parse_method(name: &str) -> Result<Method> {
    Ok(name.parse().map_err(|e: sidesep::separator::SeparatorError| Failure::Schema(e.to_string()))?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_train: a.n_train.unwrap_or(d.n_train),
        n_valid: a.n_valid.unwrap_or(d.n_valid),
        n_test: a.n_test.unwrap_or(d.n_test),
        duration: a.duration.unwrap_or(d.duration),
        sample_rate: a.sample_rate.unwrap_or(d.sample_rate),
        seed: a.seed.unwrap_or(d.seed),
    };
    log_resolved("synth", &json!(spec), spec.seed);
    let manifest = datagen::build_dataset(&spec, &a.out, a.force)?;
    println!("wrote {} tracks to {}", manifest.tracks.len(), a.out.display());
    Ok(())
}

fn split_names(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Failure::Io(format!("{}: {e}", root.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

fn load_whitener(root: &Path) -> Result<Option<PcaWhitener>> {
    let path = root.join(WHITENER_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let w = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(Some(w))
}

fn features(a: FeaturesArgs) -> Result<()> {
    let resolved = json!({
        "data": a.data,
        "source": if a.source == FeatureSource::Synth { "synth" } else { "dir" },
        "fit_split": a.fit_split,
        "seed": a.seed,
    });
    log_resolved("features", &resolved, a.seed);
    if a.source == FeatureSource::Synth {
        let manifest = datagen::verify_dataset(&a.data)?;
        eprintln!("manifest verified for {} tracks", manifest.tracks.len());
    }
    let fit = trainer::load_split(&a.data, &a.fit_split)?;
    let whitener = trainer::fit_dataset_whitener(&fit, a.seed)?;
    let text = serde_json::to_string(&whitener).context("serializing the whitener")?;
    write(&a.data.join(WHITENER_FILE), text)?;
    let mut written = 0;
    for split in split_names(&a.data)? {
        for track in trainer::load_split(&a.data, &split)? {
            let dir = a.data.join(&split).join(&track.id);
            let seqs = trainer::quantized_track_features(&track, &whitener)?;
            for (name, q) in STEM_FILES.iter().zip(&seqs) {
                sidefeat::save_features(q, dir.join(format!("{name}.sfv")))?;
            }
            written += 1;
        }
    }
    println!("wrote side features for {written} tracks");
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(m) = &a.method {
        cfg.set_method(parse_method(m)?);
    }
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    if let Some(epochs) = a.epochs {
        cfg.schedule.max_epochs = epochs;
        cfg.schedule.validate().map_err(|e| Failure::Schema(e.to_string()))?;
    }
    let resolved = cfg.to_json();
    log_resolved("train", &resolved, cfg.schedule.seed);
    if a.out.join("best.ckpt").exists() && !a.force {
        return Err(Failure::Data(format!("{} already holds a run (pass --force)", a.out.display())).into());
    }

    let root = &cfg.data.root;
    let train = trainer::load_split(root, &cfg.data.train)?;
    let valid = trainer::load_split(root, &cfg.data.valid)?;
    let test_hashes: BTreeSet<String> = if root.join(&cfg.data.test).is_dir() {
        trainer::load_split(root, &cfg.data.test)?
            .iter()
            .map(TrackBundle::content_hash)
            .collect()
    } else {
        BTreeSet::new()
    };
    let data = TrainData {
        train,
        valid,
        test_hashes,
        whitener: load_whitener(root)?,
    };
    let outcome = trainer::train(&cfg.separator, &cfg.schedule, &data, Some(&a.out), &resolved)?;
    let log = &outcome.log;
    let best = log.records.iter().find(|r| r.epoch == log.best_epoch);
    match best {
        Some(r) => println!(
            "{} epochs, best epoch {} (valid total {:.6}){}",
            log.records.len(),
            r.epoch,
            r.valid.total,
            if log.stopped_early { ", stopped early" } else { "" }
        ),
        None => println!("{} epochs", log.records.len()),
    }
    println!("run directory {}", a.out.display());
    Ok(())
}

struct Loaded {
    model: Separator,
    run: Option<(PathBuf, RunConfig)>,
}

fn load_model(m: &ModelArgs) -> Result<Loaded> {
    match (&m.run, &m.checkpoint) {
        (Some(dir), _) => {
            let path = dir.join("config.json");
            let text = fs::read_to_string(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            let cfg = RunConfig::parse_resolved(&text)?;
            let ck = Checkpoint::load(dir.join("best.ckpt")).with_context(|| format!("loading {}", dir.display()))?;
            let expected = config_hash(&serde_json::to_string(&cfg.separator).expect("config serializes"));
            if ck.config_hash() != expected {
                return Err(Failure::HashMismatch(format!(
                    "checkpoint config hash {:016x} differs from {} ({expected:016x})",
                    ck.config_hash(),
                    path.display()
                ))
                .into());
            }
            let model = Separator::from_checkpoint(&ck)?;
            Ok(Loaded {
                model,
                run: Some((dir.clone(), cfg)),
            })
        }
        (None, Some(path)) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(Loaded {
                model: Separator::from_checkpoint(&ck)?,
                run: None,
            })
        }
        (None, None) => Err(Failure::Schema("one of --run or --checkpoint is required".into()).into()),
    }
}

fn separate(a: SeparateArgs) -> Result<()> {
    let loaded = load_model(&a.model)?;
    let model = &loaded.model;
    log_resolved("separate", &json!(model.config()), model.config().seed);
    let mixture = wav::read_wav(&a.mixture)?;
    let features = match &a.features {
        Some(p) => Some(sidefeat::load_features(p)?.to_sequence()),
        None => None,
    };
    let estimates = model.separate(&mixture, features.as_ref())?;
    create_dir(&a.out)?;
    for (tag, clip) in model.config().sources.iter().zip(&estimates) {
        wav::write_wav(a.out.join(format!("{tag}.wav")), clip)?;
    }
    println!("wrote {} stems to {}", estimates.len(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct SplitsFile {
    test_hashes: BTreeSet<String>,
}

/// Refuses evaluation data that differs from the test split a run recorded.
fn check_test_hashes(run_dir: &Path, tracks: &[TrackBundle]) -> Result<()> {
    let path = run_dir.join("splits.json");
    let text = fs::read_to_string(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let splits: SplitsFile = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if splits.test_hashes.is_empty() {
        return Ok(());
    }
    for t in tracks {
        if !splits.test_hashes.contains(&t.content_hash()) {
            return Err(Failure::HashMismatch(format!(
                "track {} is not part of the test split recorded in {}",
                t.id,
                path.display()
            ))
            .into());
        }
    }
    Ok(())
}

/// Dataset root, split and output directory, falling back to the run's
/// own config.
fn resolve_target(
    data: &Option<PathBuf>,
    split: &Option<String>,
    out: &Option<PathBuf>,
    run: Option<&(PathBuf, RunConfig)>,
    default_out: &str,
) -> Result<(PathBuf, String, PathBuf)> {
    let root = match (data, run) {
        (Some(d), _) => d.clone(),
        (None, Some((_, cfg))) => cfg.data.root.clone(),
        (None, None) => return Err(Failure::Schema("--data is required without --run".into()).into()),
    };
    let split = match (split, run) {
        (Some(s), _) => s.clone(),
        (None, Some((_, cfg))) => cfg.data.test.clone(),
        (None, None) => "test".into(),
    };
    let out = match (out, run) {
        (Some(o), _) => o.clone(),
        (None, Some((dir, _))) => dir.join(format!("{default_out}-{split}")),
        (None, None) => return Err(Failure::Schema("--out is required without --run".into()).into()),
    };
    Ok((root, split, out))
}

fn read_estimates(dir: &Path, track: &TrackBundle) -> Result<Vec<AudioClip>> {
    STEM_FILES[1..]
        .iter()
        .map(|name| {
            let path = dir.join(&track.id).join(format!("{name}.wav"));
            wav::read_wav(&path).with_context(|| format!("reading estimate {}", path.display()))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let loaded = match a.estimates {
        Some(_) => None,
        None => Some(load_model(&a.model)?),
    };
    let run = loaded.as_ref().and_then(|l| l.run.as_ref());
    let (root, split, out) = resolve_target(&a.data, &a.split, &a.out, run, "eval")?;
    let mut cfg = run.map(|(_, c)| c.eval).unwrap_or_default();
    cfg.window_s = a.window.unwrap_or(cfg.window_s);
    cfg.hop_s = a.hop.unwrap_or(cfg.hop_s);
    cfg.filter_len = a.filter_len.unwrap_or(cfg.filter_len);
    let seed = loaded.as_ref().map_or(0, |l| l.model.config().seed);
    log_resolved(
        "eval",
        &json!({ "data": root, "split": split, "out": out, "eval": cfg }),
        seed,
    );

    let tracks = trainer::load_split(&root, &split)?;
    if let Some((dir, rc)) = run {
        if split == rc.data.test {
            check_test_hashes(dir, &tracks)?;
        }
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for t in &tracks {
        let estimates = match (&a.estimates, &loaded) {
            (Some(dir), _) => read_estimates(dir, t)?,
            (None, Some(l)) => l.model.separate(&t.mixture, t.features.as_ref().map(|f| &f.mixture))?,
            (None, None) => unreachable!("a model is loaded unless estimates are given"),
        };
        reports.push(bsseval::eval_track(&t.id, &estimates, &t.stems, &cfg)?);
    }
    let aggregate = bsseval::aggregate(&reports);
    let report = json!({
        "split": split,
        "eval": cfg,
        "tracks": reports.iter().map(EvalReport::to_json).collect::<Vec<_>>(),
        "aggregate": aggregate,
    });
    create_dir(&out)?;
    write(&out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    let mut csv = format!("{}\n", bsseval::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_rows());
    }
    write(&out.join("framewise.csv"), csv)?;

    println!("{:<8} {:>8} {:>8} {:>8}", "source", "SDR", "SIR", "SAR");
    if let Value::Object(per_source) = &aggregate {
        for (name, m) in per_source {
            let cell = |k: &str| match &m[k] {
                Value::Number(n) => format!("{:.2}", n.as_f64().unwrap_or(f64::NAN)),
                Value::String(s) => s.clone(),
                _ => "nan".into(),
            };
            println!("{name:<8} {:>8} {:>8} {:>8}", cell("SDR"), cell("SIR"), cell("SAR"));
        }
    }
    println!("report {}", out.join("eval.json").display());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let loaded = load_model(&a.model)?;
    let run = loaded.run.as_ref();
    let (root, split, out) = resolve_target(&a.data, &a.split, &a.out, run, "analyze")?;
    let defaults = run.map(|(_, c)| c.analyze.clone()).unwrap_or_default();
    let seed = a.seed.unwrap_or(defaults.seed);
    let include_silence = a.include_silence || defaults.include_silence;
    let method = loaded.model.config().method;
    log_resolved(
        "analyze",
        &json!({ "data": root, "split": split, "out": out, "method": method, "include_silence": include_silence }),
        seed,
    );

    let tracks = trainer::load_split(&root, &split)?;
    let export = latentlab::export_latents(&loaded.model, &tracks, method)?;
    let analysis = latentlab::analyze(&export, seed, include_silence)?;
    create_dir(&out)?;
    write(&out.join("latents.csv"), export.to_csv())?;
    let mut doc = analysis.to_json();
    if let Value::Object(m) = &mut doc {
        m.insert("method".into(), json!(method));
        m.insert("split".into(), json!(split));
        m.insert("seed".into(), json!(seed));
        m.insert("latent_width".into(), json!(export.width()));
    }
    write(&out.join("analysis.json"), serde_json::to_string_pretty(&doc)?)?;
    println!(
        "{method}: C = {}, {} rows, clustering accuracy {:.4}",
        export.width(),
        analysis.rows,
        analysis.confusion.accuracy()
    );
    println!("report {}", out.join("analysis.json").display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.set_seed(seed);
    }
    let seed = cfg.separator.seed;
    log_resolved("gradcheck", &cfg.to_json(), seed);
    if a.frames == 0 || a.samples == 0 || !(a.eps > 0.0) {
        return Err(Failure::Schema("frames, samples and eps must be positive".into()).into());
    }
    let model = Separator::new(cfg.separator.clone())?;
    let example = trainer::synthetic_example(&cfg.separator, a.frames, seed);
    let check = GradCheckConfig {
        eps: a.eps,
        samples_per_tensor: a.samples,
        seed,
    };
    let mut parts = vec![CheckedLoss::Mse];
    if cfg.separator.method.has_head() {
        parts.push(CheckedLoss::Reg);
    }
    let mut worst: f64 = 0.0;
    for part in parts {
        let report = trainer::check_gradients(&model, &example, part, &check)?;
        for e in &report.entries {
            println!(
                "{}",
                json!({ "loss": part, "param": e.name, "checked": e.checked, "max_rel_error": e.max_rel_error })
            );
        }
        worst = worst.max(report.max_rel_error());
    }
    println!("max relative error {worst:.3e}");
    if !(worst <= a.tolerance) {
        return Err(Failure::Numeric(format!(
            "max relative error {worst:.3e} exceeds {:.1e}",
            a.tolerance
        ))
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train(a),
        Command::Separate(a) => separate(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::classify(&e))
        }
    }
}
