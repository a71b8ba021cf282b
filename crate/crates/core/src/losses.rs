//! Training objectives: magnitude MSE, the contrastive margin regularizer and
//! the distance-based soft-margin regularizer, combined as
//! `total = mse + λ · reg`.
//!
//! Each regularizer exists twice: as plain functions over arrays (used for
//! reporting and as a reference) and as tape builders used in training. The
//! two are tested against each other.
//!
//! Frames where any involved vector has norm below [`COSINE_EPS`] are left
//! out of the frame average; pairs without a valid frame are left out of the
//! pair average.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;
use thiserror::Error;

use crate::nncore::{row_cos, NnError, Tape, Var, COSINE_EPS};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const LAMBDA_CON_REG: f64 = 0.000_001;
pub const LAMBDA_DIS_REG: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("expected {expected} sources, got {got}")]
    SourceCount { expected: usize, got: usize },
    #[error("margin alpha = {0} outside [0, 2]")]
    Alpha(f64),
    #[error("regularization weight must be non-negative, got {0}")]
    Lambda(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// A (latent source, feature source) pairing; positive iff `i == j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PairLabel {
    pub i: usize,
    pub j: usize,
}

impl PairLabel {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    pub fn y(&self) -> i8 {
        if self.i == self.j {
            1
        } else {
            -1
        }
    }

    pub fn is_positive(&self) -> bool {
        self.i == self.j
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDiagnostic {
    pub label: PairLabel,
    pub value: f64,
    pub valid_frames: usize,
    pub silent_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub reg: f64,
    pub total: f64,
    pub pairs: Vec<PairDiagnostic>,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=2.0).contains(&alpha) {
        Ok(())
    } else {
        Err(LossError::Alpha(alpha))
    }
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    row_cos(a, b).unwrap_or(0.0)
}

pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    1.0 - cosine(a, b)
}

fn is_silent(v: ArrayView1<f64>) -> bool {
    v.dot(&v).sqrt() < COSINE_EPS
}

fn same_dim(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::Shape(a, b))
    }
}

/// Mean squared error over every source, frame and bin.
pub fn mse_loss(estimates: &[Array2<f64>], truth: &[Array2<f64>]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(LossError::SourceCount {
            expected: truth.len(),
            got: estimates.len(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, t) in estimates.iter().zip(truth) {
        same_dim(e.dim(), t.dim())?;
        sum += e
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        n += t.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Frame-averaged contrastive term for one pair:
/// `1 − cos(p_t, v_t)` for positive pairs, `max(cos(p_t, v_t) − α, 0)` for
/// negative pairs.
pub fn con_reg_loss(
    p: ArrayView2<f64>,
    v: ArrayView2<f64>,
    label: PairLabel,
    alpha: f64,
) -> Result<PairDiagnostic> {
    check_alpha(alpha)?;
    same_dim(p.dim(), v.dim())?;
    let mut sum = 0.0;
    let mut valid = 0;
    for (pt, vt) in p.rows().into_iter().zip(v.rows()) {
        if is_silent(pt) || is_silent(vt) {
            continue;
        }
        let c = cosine(pt, vt);
        sum += if label.is_positive() {
            1.0 - c
        } else {
            (c - alpha).max(0.0)
        };
        valid += 1;
    }
    Ok(PairDiagnostic {
        label,
        value: if valid > 0 { sum / valid as f64 } else { 0.0 },
        valid_frames: valid,
        silent_frames: p.nrows() - valid,
    })
}

/// Frame-averaged soft-margin term for sources `i ≠ j`:
/// `max(D(p_i, p_j) − D(v_i, v_j), 0)` with cosine distance `D`.
pub fn dis_reg_loss(
    p_i: ArrayView2<f64>,
    p_j: ArrayView2<f64>,
    v_i: ArrayView2<f64>,
    v_j: ArrayView2<f64>,
) -> Result<(f64, usize)> {
    same_dim(p_i.dim(), p_j.dim())?;
    same_dim(v_i.dim(), v_j.dim())?;
    if p_i.nrows() != v_i.nrows() {
        return Err(LossError::Shape(p_i.dim(), v_i.dim()));
    }
    let mut sum = 0.0;
    let mut valid = 0;
    for t in 0..p_i.nrows() {
        let rows = [p_i.row(t), p_j.row(t), v_i.row(t), v_j.row(t)];
        if rows.iter().any(|r| is_silent(*r)) {
            continue;
        }
        let d_latent = cosine_distance(rows[0], rows[1]);
        let d_feat = cosine_distance(rows[2], rows[3]);
        sum += (d_latent - d_feat).max(0.0);
        valid += 1;
    }
    Ok((if valid > 0 { sum / valid as f64 } else { 0.0 }, valid))
}

/// Positive pairs `(i, i)` and all ordered negative pairs `(i, j)`, `i ≠ j`.
pub fn con_reg_pairs(n_sources: usize) -> Vec<PairLabel> {
    let mut pairs: Vec<_> = (0..n_sources).map(|i| PairLabel::new(i, i)).collect();
    for i in 0..n_sources {
        for j in 0..n_sources {
            if i != j {
                pairs.push(PairLabel::new(i, j));
            }
        }
    }
    pairs
}

/// Unordered source pairs `i < j`.
pub fn dis_reg_pairs(n_sources: usize) -> Vec<PairLabel> {
    let mut pairs = Vec::new();
    for i in 0..n_sources {
        for j in i + 1..n_sources {
            pairs.push(PairLabel::new(i, j));
        }
    }
    pairs
}

fn check_sets(projected: usize, features: usize) -> Result<()> {
    if projected != features {
        return Err(LossError::SourceCount {
            expected: projected,
            got: features,
        });
    }
    Ok(())
}

fn average(pairs: &[PairDiagnostic]) -> f64 {
    let valid: Vec<_> = pairs.iter().filter(|p| p.valid_frames > 0).collect();
    if valid.is_empty() {
        0.0
    } else {
        valid.iter().map(|p| p.value).sum::<f64>() / valid.len() as f64
    }
}

/// Contrastive regularizer over all pairs of one clip.
pub fn con_reg_set(
    projected: &[Array2<f64>],
    features: &[Array2<f64>],
    alpha: f64,
) -> Result<(f64, Vec<PairDiagnostic>)> {
    check_sets(projected.len(), features.len())?;
    let pairs = con_reg_pairs(projected.len())
        .into_iter()
        .map(|l| con_reg_loss(projected[l.i].view(), features[l.j].view(), l, alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok((average(&pairs), pairs))
}

/// Soft-margin regularizer over the unordered pairs of one clip.
pub fn dis_reg_set(
    projected: &[Array2<f64>],
    features: &[Array2<f64>],
) -> Result<(f64, Vec<PairDiagnostic>)> {
    check_sets(projected.len(), features.len())?;
    let pairs = dis_reg_pairs(projected.len())
        .into_iter()
        .map(|l| {
            let (value, valid) = dis_reg_loss(
                projected[l.i].view(),
                projected[l.j].view(),
                features[l.i].view(),
                features[l.j].view(),
            )?;
            Ok(PairDiagnostic {
                label: l,
                value,
                valid_frames: valid,
                silent_frames: projected[l.i].nrows() - valid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((average(&pairs), pairs))
}

pub fn total_loss(mse: f64, reg: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(LossError::Lambda(lambda));
    }
    Ok(LossBreakdown {
        mse,
        reg,
        total: mse + lambda * reg,
        pairs: Vec::new(),
    })
}

/// MSE of estimated magnitudes against constant targets, on the tape.
pub fn mse_term(tape: &mut Tape, estimates: &[Var], truth: &[Array2<f64>]) -> Result<Var> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(LossError::SourceCount {
            expected: truth.len(),
            got: estimates.len(),
        });
    }
    let terms = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| tape.mse(*e, t.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.mean(&terms)?)
}

fn frame_weights(rows: &[ArrayView2<f64>]) -> Array1<f64> {
    let t = rows[0].nrows();
    Array1::from_shape_fn(t, |k| {
        if rows.iter().any(|m| is_silent(m.row(k))) {
            0.0
        } else {
            1.0
        }
    })
}

fn mean_of_valid(tape: &mut Tape, terms: Vec<(Var, bool)>) -> Result<Var> {
    let valid: Vec<Var> = terms.iter().filter(|(_, ok)| *ok).map(|(v, _)| *v).collect();
    if valid.is_empty() {
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    Ok(tape.mean(&valid)?)
}

/// Contrastive regularizer on the tape; `projected[i]` are `[T × 128]`
/// projected latents, `features[j]` the aligned side features.
pub fn con_reg_term(
    tape: &mut Tape,
    projected: &[Var],
    features: &[Array2<f64>],
    alpha: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    check_sets(projected.len(), features.len())?;
    let mut terms = Vec::new();
    for label in con_reg_pairs(projected.len()) {
        let p = projected[label.i];
        let v = tape.constant(features[label.j].clone());
        let cos = tape.row_cosine(p, v)?;
        let per_frame = if label.is_positive() {
            let neg = tape.scale(cos, -1.0);
            tape.add_scalar(neg, 1.0)
        } else {
            let shifted = tape.add_scalar(cos, -alpha);
            tape.relu(shifted)
        };
        let weights = frame_weights(&[tape.value(p).view(), features[label.j].view()]);
        let any = weights.sum() > 0.0;
        let term = tape.weighted_mean(per_frame, weights)?;
        terms.push((term, any));
    }
    mean_of_valid(tape, terms)
}

/// Soft-margin regularizer on the tape.
pub fn dis_reg_term(tape: &mut Tape, projected: &[Var], features: &[Array2<f64>]) -> Result<Var> {
    check_sets(projected.len(), features.len())?;
    let mut terms = Vec::new();
    for label in dis_reg_pairs(projected.len()) {
        let (pi, pj) = (projected[label.i], projected[label.j]);
        let (vi, vj) = (&features[label.i], &features[label.j]);
        same_dim(vi.dim(), tape.value(pi).dim())?;
        let d_feat: Vec<f64> = vi
            .rows()
            .into_iter()
            .zip(vj.rows())
            .map(|(a, b)| cosine_distance(a, b))
            .collect();
        let cos = tape.row_cosine(pi, pj)?;
        // D_latent − D_feat = (1 − cos) − D_feat
        let offsets = tape.constant(Array2::from_shape_fn((d_feat.len(), 1), |(t, _)| {
            1.0 - d_feat[t]
        }));
        let neg = tape.scale(cos, -1.0);
        let gap = tape.add(neg, offsets)?;
        let hinge = tape.relu(gap);
        let weights = frame_weights(&[
            tape.value(pi).view(),
            tape.value(pj).view(),
            vi.view(),
            vj.view(),
        ]);
        let any = weights.sum() > 0.0;
        let term = tape.weighted_mean(hinge, weights)?;
        terms.push((term, any));
    }
    mean_of_valid(tape, terms)
}
