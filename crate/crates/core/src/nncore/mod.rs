//! Minimal neural-network toolkit: a reverse-mode tape, LSTM layers, Adam,
//! input standardization, finite-difference gradient checks and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{config_hash, Checkpoint};
pub use gradcheck::{
    analytic_gradients, compare_gradients, grad_check, loss_value, relative_error,
    GradCheckConfig, GradCheckEntry, GradCheckReport,
};
pub use optim::{clip_grad_norm, AdamConfig, OptimizerState};
pub use tape::{row_cos, ParamId, ParamStore, Tape, Tensor, Var, COSINE_EPS};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("non-finite gradient in parameter {0}")]
    NonFinite(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash {stored:016x} does not match its config ({computed:016x})")]
    HashMismatch { stored: u64, computed: u64 },
    #[error("graph construction: {0}")]
    Graph(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Uniform `[-bound, bound]` initialization.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// Parameters of a dense layer `[in × out]` plus `[1 × out]` bias.
#[derive(Debug, Clone, Copy)]
pub struct DenseIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseIds {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.add(format!("{prefix}.w"), uniform(rng, fan_in, fan_out, bound)),
            b: store.add(format!("{prefix}.b"), uniform(rng, 1, fan_out, bound)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dense(w, b, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmIds {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add(
                format!("{prefix}.w_ih"),
                uniform(rng, d_in, 4 * hidden, bound),
            ),
            w_hh: store.add(
                format!("{prefix}.w_hh"),
                uniform(rng, hidden, 4 * hidden, bound),
            ),
            bias: store.add(format!("{prefix}.bias"), uniform(rng, 1, 4 * hidden, bound)),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        reverse: bool,
    ) -> Result<Var> {
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let bias = tape.param(store, self.bias);
        tape.lstm(x, w_ih, w_hh, bias, reverse)
    }
}

/// Bidirectional LSTM: forward and backward passes concatenated per frame,
/// output width `2 · hidden`.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmIds {
    pub forward: LstmIds,
    pub backward: LstmIds,
}

impl BiLstmIds {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        Self {
            forward: LstmIds::init(store, rng, &format!("{prefix}.fwd"), d_in, hidden),
            backward: LstmIds::init(store, rng, &format!("{prefix}.bwd"), d_in, hidden),
        }
    }
}

pub fn birnn(tape: &mut Tape, store: &ParamStore, ids: &BiLstmIds, x: Var) -> Result<Var> {
    let f = ids.forward.apply(tape, store, x, false)?;
    let b = ids.backward.apply(tape, store, x, true)?;
    tape.concat_cols(&[f, b])
}

/// Per-column mean/standard-deviation scaler fitted once on training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub const MIN_STD: f64 = 1e-8;

    pub fn identity(width: usize) -> Self {
        Self {
            mean: Array1::zeros(width),
            std: Array1::ones(width),
        }
    }

    /// Fits on the rows of all given matrices.
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a Array2<f64>>) -> Option<Self> {
        let mut n = 0usize;
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        for m in data {
            n += m.nrows();
            let s = m.sum_axis(Axis(0));
            let q = m.mapv(|v| v * v).sum_axis(Axis(0));
            match (&mut sum, &mut sq) {
                (Some(a), Some(b)) => {
                    *a += &s;
                    *b += &q;
                }
                _ => {
                    sum = Some(s);
                    sq = Some(q);
                }
            }
        }
        let (sum, sq) = (sum?, sq?);
        let mean = &sum / n as f64;
        let var = (&sq / n as f64) - &mean * &mean;
        let std = var.mapv(|v| v.max(0.0).sqrt().max(Self::MIN_STD));
        Some(Self { mean, std })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean.view().insert_axis(Axis(0))) / &self.std.view().insert_axis(Axis(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_store_input(seed: u64, t: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, t, d, 1.0)
    }

    #[test]
    fn birnn_single_frame_sees_same_input_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ids = BiLstmIds::init(&mut store, &mut rng, "rnn", 3, 4);
        let x = random_store_input(2, 1, 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = birnn(&mut tape, &store, &ids, xv).unwrap();
        let mut t2 = Tape::new();
        let xv2 = t2.constant(x);
        let f = ids.forward.apply(&mut t2, &store, xv2, false).unwrap();
        let b = ids.backward.apply(&mut t2, &store, xv2, false).unwrap();
        let expect = ndarray::concatenate(Axis(1), &[t2.value(f).view(), t2.value(b).view()])
            .unwrap();
        assert_eq!(tape.value(out), &expect);
    }

    #[test]
    fn reversed_input_swaps_and_reverses_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ids = BiLstmIds::init(&mut store, &mut rng, "rnn", 3, 4);
        // tie the two directions
        for (a, b) in [
            (ids.forward.w_ih, ids.backward.w_ih),
            (ids.forward.w_hh, ids.backward.w_hh),
            (ids.forward.bias, ids.backward.bias),
        ] {
            let v = store.value(a).clone();
            *store.value_mut(b) = v;
        }
        let x = random_store_input(4, 7, 3);
        let mut rev = x.clone();
        rev.invert_axis(Axis(0));
        let run = |input: Array2<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(input);
            let out = birnn(&mut tape, &store, &ids, v).unwrap();
            tape.value(out).clone()
        };
        let a = run(x);
        let b = run(rev);
        let h = 4;
        for t in 0..7 {
            for j in 0..h {
                assert!((a[[t, j]] - b[[6 - t, h + j]]).abs() < 1e-14);
                assert!((a[[t, h + j]] - b[[6 - t, j]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn standardizer_fit_and_apply() {
        let x = ndarray::array![[1.0, 10.0], [3.0, 10.0]];
        let s = Standardizer::fit([&x]).unwrap();
        assert_eq!(s.mean, ndarray::array![2.0, 10.0]);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.std[1], Standardizer::MIN_STD);
        let y = s.apply(&x);
        assert_eq!(y, ndarray::array![[-1.0, 0.0], [1.0, 0.0]]);
    }
}
