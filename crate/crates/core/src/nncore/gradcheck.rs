//! Central finite-difference gradient checking.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Result, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Tensors larger than this are checked on a random subset of this size.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_tensor: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Builds the loss on a fresh tape and returns its value.
pub fn loss_value<F>(params: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    Ok(tape.scalar(loss))
}

/// Analytic gradients of the loss, one array per parameter (zeros where the
/// loss does not depend on a parameter).
pub fn analytic_gradients<F>(params: &mut ParamStore, build: &mut F) -> Result<Vec<Array2<f64>>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, params)?;
    let grads = params
        .ids()
        .map(|id| {
            params
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(params.value(id).dim()))
        })
        .collect();
    params.zero_grad();
    Ok(grads)
}

/// Compares `analytic` against central differences of `loss`.
pub fn compare_gradients<L>(
    params: &mut ParamStore,
    cfg: &GradCheckConfig,
    analytic: &[Array2<f64>],
    loss: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
{
    let all = vec![true; params.len()];
    compare_read_gradients(params, cfg, analytic, &all, loss)
}

/// Like [`compare_gradients`], but parameters the graph never reads
/// (`read[id] == false`) are only required to have an all-zero analytic
/// gradient, since the loss cannot depend on them.
fn compare_read_gradients<L>(
    params: &mut ParamStore,
    cfg: &GradCheckConfig,
    analytic: &[Array2<f64>],
    read: &[bool],
    mut loss: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let size = params.value(id).len();
        if !read[id.0] {
            let stray = analytic[id.0].iter().any(|g| *g != 0.0);
            report.entries.push(GradCheckEntry {
                name: params.name(id).to_string(),
                checked: 0,
                max_rel_error: if stray { 1.0 } else { 0.0 },
            });
            continue;
        }
        let coords: Vec<usize> = if size <= cfg.samples_per_tensor {
            (0..size).collect()
        } else {
            sample(&mut rng, size, cfg.samples_per_tensor).into_vec()
        };
        let cols = params.value(id).ncols();
        let mut worst: f64 = 0.0;
        for &k in &coords {
            let (r, c) = (k / cols, k % cols);
            let orig = params.value(id)[[r, c]];
            params.value_mut(id)[[r, c]] = orig + cfg.eps;
            let plus = loss(params)?;
            params.value_mut(id)[[r, c]] = orig - cfg.eps;
            let minus = loss(params)?;
            params.value_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            worst = worst.max(relative_error(analytic[id.0][[r, c]], numeric));
        }
        report.entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Checks reverse-mode gradients of `build` against central differences.
pub fn grad_check<F>(
    params: &mut ParamStore,
    cfg: &GradCheckConfig,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &mut build)?;
    let mut tape = Tape::new();
    build(&mut tape, params)?;
    let read: Vec<bool> = params.ids().map(|id| tape.reads(id)).collect();
    compare_read_gradients(params, cfg, &analytic, &read, |p| loss_value(p, &mut build))
}
