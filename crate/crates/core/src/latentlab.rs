//! Latent-space diagnostics: per-frame latent export, K-means, Hungarian
//! cluster matching and confusion matrices.

use ndarray::{concatenate, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::dsp;
use crate::separator::{clip_magnitude, Method, Separator, SeparatorError};
use crate::sidefeat::SourceTag;
use crate::trainer::TrackBundle;

/// Stem frames with energy below this fraction of the track mean are silent.
pub const SILENCE_RATIO: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("export requested for {requested} but the model was trained as {model}")]
    MethodMismatch { requested: Method, model: Method },
    #[error("k-means needs at least k = {k} rows, got {n}")]
    TooFewRows { n: usize, k: usize },
    #[error("label arrays differ in length: {0} vs {1}")]
    LabelLength(usize, usize),
    #[error("label {0} outside 0..k")]
    Label(usize),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
}

pub type Result<T> = std::result::Result<T, LatentError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentExport {
    pub method: Method,
    /// `[N × C]`.
    pub matrix: Array2<f64>,
    pub instrument: Vec<SourceTag>,
    pub silent: Vec<bool>,
    pub track: Vec<String>,
}

impl LatentExport {
    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }

    /// Instrument labels as indices into the stem order.
    pub fn label_indices(&self) -> Vec<usize> {
        self.instrument
            .iter()
            .map(|t| SourceTag::STEMS.iter().position(|s| s == t).unwrap_or(0))
            .collect()
    }

    /// Rows kept by the silence filter.
    pub fn filtered(&self, include_silence: bool) -> (Array2<f64>, Vec<usize>) {
        let labels = self.label_indices();
        let keep: Vec<usize> = (0..self.matrix.nrows())
            .filter(|i| include_silence || !self.silent[*i])
            .collect();
        (
            self.matrix.select(Axis(0), &keep),
            keep.iter().map(|i| labels[*i]).collect(),
        )
    }

    pub fn to_csv(&self) -> String {
        let c = self.width();
        let mut out: Vec<String> = (0..c).map(|i| format!("dim{i}")).collect();
        out.push("instrument".into());
        out.push("silence".into());
        let mut s = out.join(",");
        s.push('\n');
        for (i, row) in self.matrix.rows().into_iter().enumerate() {
            for v in row {
                s.push_str(&v.to_string());
                s.push(',');
            }
            s.push_str(self.instrument[i].name());
            s.push(',');
            s.push_str(if self.silent[i] { "1" } else { "0" });
            s.push('\n');
        }
        s
    }
}

/// Per-frame magnitude energies of a stem.
fn frame_energy(mag: &Array2<f64>) -> Vec<f64> {
    mag.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Method-appropriate latent rows for every stem frame of every track.
pub fn export_latents(model: &Separator, tracks: &[TrackBundle], method: Method) -> Result<LatentExport> {
    let cfg = model.config();
    if cfg.method != method {
        return Err(LatentError::MethodMismatch {
            requested: method,
            model: cfg.method,
        });
    }
    let mut blocks = Vec::new();
    let mut instrument = Vec::new();
    let mut silent = Vec::new();
    let mut track_ids = Vec::new();
    for t in tracks {
        let mix_features = t.features.as_ref().map(|f| &f.mixture);
        let out = model.forward(&t.mixture, mix_features)?;
        let energies = t
            .stems
            .iter()
            .map(|s| Ok(frame_energy(&clip_magnitude(s, &cfg.stft(), cfg.channels)?.0)))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = energies.iter().flatten().sum();
        let count: usize = energies.iter().map(|e| e.len()).sum();
        let mean = total / count.max(1) as f64;
        for (i, tag) in SourceTag::STEMS.iter().enumerate() {
            let rows = match method {
                Method::Baseline => out.latents[i].clone(),
                Method::Concat => {
                    let side = out.side.as_ref().expect("concat forward carries side features");
                    concatenate(Axis(1), &[out.latents[i].view(), side.view()])
                        .expect("same frame count")
                }
                Method::ConReg | Method::DisReg => {
                    out.projected.as_ref().expect("regularized model has a head")[i].clone()
                }
            };
            for e in &energies[i] {
                instrument.push(*tag);
                silent.push(*e < SILENCE_RATIO * mean);
                track_ids.push(t.id.clone());
            }
            blocks.push(rows);
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let matrix = if views.is_empty() {
        Array2::zeros((0, cfg.export_width()))
    } else {
        concatenate(Axis(0), &views).expect("equal widths")
    };
    Ok(LatentExport {
        method,
        matrix,
        instrument,
        silent,
        track: track_ids,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    centroids.row_mut(0).assign(&x.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(j).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centroids.row(j)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iter` is reached. Empty clusters move to the point
/// farthest from its centroid.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 || n < k {
        return Err(LatentError::TooFewRows { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(x, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, r) in x.rows().into_iter().enumerate() {
            let (j, d) = nearest(r, &centroids);
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        inertia.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, x.ncols()));
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &r);
            counts[labels[i]] += 1;
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            } else {
                let far = (0..n)
                    .filter(|i| !taken[*i])
                    .max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a)))
                    .expect("n ≥ k");
                taken[far] = true;
                centroids.row_mut(j).assign(&x.row(far));
            }
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        inertia,
        converged,
    })
}

/// Minimum-cost perfect matching on a square cost matrix; returns
/// `assignment[row] = column`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // potentials over 1-based rows/columns; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    /// `counts[true][assigned]`.
    pub counts: Array2<u64>,
    /// `cluster_to_class[cluster]`.
    pub cluster_to_class: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = self.counts.diag().sum();
        trace as f64 / self.total().max(1) as f64
    }

    pub fn log_display(&self) -> Array2<f64> {
        self.counts.mapv(|c| (1.0 + c as f64).ln())
    }

    pub fn to_json(&self) -> Value {
        let rows = |a: Array2<f64>| -> Vec<Vec<f64>> { a.rows().into_iter().map(|r| r.to_vec()).collect() };
        json!({
            "classes": SourceTag::STEMS.iter().take(self.counts.nrows()).map(|t| t.name()).collect::<Vec<_>>(),
            "counts": self.counts.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "log_display": rows(self.log_display()),
            "cluster_to_class": self.cluster_to_class,
            "accuracy": self.accuracy(),
        })
    }
}

/// Matches clusters to classes maximizing agreement, then counts true class
/// against assigned class.
pub fn confusion(clusters: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if clusters.len() != truth.len() {
        return Err(LatentError::LabelLength(clusters.len(), truth.len()));
    }
    if let Some(bad) = clusters.iter().chain(truth).find(|l| **l >= k) {
        return Err(LatentError::Label(*bad));
    }
    let mut joint = Array2::<u64>::zeros((k, k));
    for (c, t) in clusters.iter().zip(truth) {
        joint[(*c, *t)] += 1;
    }
    let cost = joint.mapv(|v| -(v as f64));
    let cluster_to_class = hungarian(&cost);
    let mut counts = Array2::<u64>::zeros((k, k));
    for (c, t) in clusters.iter().zip(truth) {
        counts[(*t, cluster_to_class[*c])] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        cluster_to_class,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub kmeans: KMeans,
    pub confusion: ConfusionMatrix,
    pub rows: usize,
    pub include_silence: bool,
}

impl Analysis {
    pub fn to_json(&self) -> Value {
        json!({
            "rows": self.rows,
            "include_silence": self.include_silence,
            "kmeans_iterations": self.kmeans.inertia.len(),
            "kmeans_converged": self.kmeans.converged,
            "confusion": self.confusion.to_json(),
            "accuracy": self.confusion.accuracy(),
        })
    }
}

/// Four-way K-means on the export and the matched confusion matrix.
pub fn analyze(export: &LatentExport, seed: u64, include_silence: bool) -> Result<Analysis> {
    let k = SourceTag::STEMS.len();
    let (x, truth) = export.filtered(include_silence);
    let km = kmeans(&x, k, seed, 300)?;
    let confusion = confusion(&km.labels, &truth, k)?;
    Ok(Analysis {
        kmeans: km,
        confusion,
        rows: x.nrows(),
        include_silence,
    })
}
