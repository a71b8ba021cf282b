//! Framewise SDR/SIR/SAR by least-squares projection onto delayed
//! references.
//!
//! Within a frame of `N` samples a reference delayed by `d` taps is
//! `r(n − d)` for `n ≥ d` and zero before, so frames never see their
//! neighbours. The estimate is projected onto the `filter_len` delays of the
//! target reference (`s_target`) and onto the delays of all references
//! (`s_target + e_interf`); the remainder is `e_artif`. Normal equations carry
//! a Tikhonov ridge of [`RIDGE`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dsp::AudioClip;
use crate::sidefeat::SourceTag;

pub const RIDGE: f64 = 1e-10;
/// Energies below this are treated as exactly zero.
pub const ZERO_ENERGY: f64 = 1e-30;
/// Energy ratios above this (150 dB) are numerically indistinguishable from a
/// perfect decomposition and reported as `+∞`.
pub const MAX_RATIO: f64 = 1e15;

#[derive(Debug, Error)]
pub enum BssError {
    #[error("frame length {frame} must exceed 4 × filter length {filter_len}")]
    FrameTooShort { frame: usize, filter_len: usize },
    #[error("target reference is silent in this frame")]
    SilentReference,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("expected {expected} signals, got {got}")]
    Count { expected: usize, got: usize },
    #[error("sample rates differ: {0} vs {1}")]
    SampleRate(u32, u32),
}

pub type Result<T> = std::result::Result<T, BssError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

impl Metrics {
    pub const INVALID: Metrics = Metrics {
        sdr: f64::NAN,
        sir: f64::NAN,
        sar: f64::NAN,
    };
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Delayed-reference Gram matrix of one frame, shared by all targets.
pub struct FrameProjector<'a> {
    refs: &'a [&'a [f64]],
    filter_len: usize,
    gram: DMatrix<f64>,
}

impl<'a> FrameProjector<'a> {
    pub fn new(refs: &'a [&'a [f64]], filter_len: usize) -> Result<Self> {
        let n = refs.first().map(|r| r.len()).unwrap_or(0);
        if refs.iter().any(|r| r.len() != n) {
            return Err(BssError::Length("reference frames differ in length".into()));
        }
        if filter_len == 0 || n <= 4 * filter_len {
            return Err(BssError::FrameTooShort {
                frame: n,
                filter_len,
            });
        }
        let k = refs.len();
        let l = filter_len as isize;
        let mut gram = DMatrix::zeros(k * filter_len, k * filter_len);
        for ki in 0..k {
            for kj in ki..k {
                let (rk, rj) = (refs[ki], refs[kj]);
                // full cross-correlation over in-frame indices:
                // xc[c] = Σ_m rk(m) rj(m − c)
                let xc: Vec<f64> = (-(l - 1)..l)
                    .map(|c| {
                        let lo = c.max(0) as usize;
                        let hi = (n as isize + c.min(0)) as usize;
                        (lo..hi).map(|m| rk[m] * rj[(m as isize - c) as usize]).sum()
                    })
                    .collect();
                for a in 0..filter_len {
                    for b in 0..filter_len {
                        let c = b as isize - a as isize;
                        let mut g = xc[(c + l - 1) as usize];
                        // drop the terms whose sample index n = m + a leaves the frame
                        let hi = (n as isize - 1).min(n as isize - 1 + c);
                        for m in (n - a) as isize..=hi {
                            g -= rk[m as usize] * rj[(m - c) as usize];
                        }
                        gram[(ki * filter_len + a, kj * filter_len + b)] = g;
                        gram[(kj * filter_len + b, ki * filter_len + a)] = g;
                    }
                }
            }
        }
        Ok(Self {
            refs,
            filter_len,
            gram,
        })
    }

    fn rhs(&self, estimate: &[f64], sources: std::ops::Range<usize>) -> DVector<f64> {
        let l = self.filter_len;
        let n = estimate.len();
        let mut b = DVector::zeros(sources.len() * l);
        for (row, k) in sources.enumerate() {
            for d in 0..l {
                b[row * l + d] = dot(&self.refs[k][..n - d], &estimate[d..]);
            }
        }
        b
    }

    fn solve(&self, sources: std::ops::Range<usize>, b: &DVector<f64>) -> DVector<f64> {
        let l = self.filter_len;
        let r = sources.start * l..sources.end * l;
        let mut g = self
            .gram
            .view((r.start, r.start), (r.len(), r.len()))
            .into_owned();
        for i in 0..r.len() {
            g[(i, i)] += RIDGE;
        }
        match g.clone().cholesky() {
            Some(ch) => ch.solve(b),
            None => g
                .lu()
                .solve(b)
                .unwrap_or_else(|| DVector::zeros(b.len())),
        }
    }

    fn synthesize(&self, coef: &DVector<f64>, sources: std::ops::Range<usize>, n: usize) -> Vec<f64> {
        let l = self.filter_len;
        let mut out = vec![0.0; n];
        for (row, k) in sources.enumerate() {
            for d in 0..l {
                let c = coef[row * l + d];
                if c == 0.0 {
                    continue;
                }
                for (o, r) in out[d..].iter_mut().zip(self.refs[k]) {
                    *o += c * r;
                }
            }
        }
        out
    }

    pub fn decompose(&self, estimate: &[f64], target: usize) -> Result<Decomposition> {
        let n = self.refs[0].len();
        if estimate.len() != n {
            return Err(BssError::Length(format!(
                "estimate frame {} vs reference frame {n}",
                estimate.len()
            )));
        }
        if energy(self.refs[target]) < ZERO_ENERGY {
            return Err(BssError::SilentReference);
        }
        if estimate == self.refs[target] {
            // the zero-delay tap reproduces the estimate exactly; the ridge
            // would otherwise leave a residue of order RIDGE / energy
            return Ok(Decomposition {
                s_target: estimate.to_vec(),
                e_interf: vec![0.0; n],
                e_artif: vec![0.0; n],
            });
        }
        let k = self.refs.len();
        let own = target..target + 1;
        let b_own = self.rhs(estimate, own.clone());
        let s_target = self.synthesize(&self.solve(own.clone(), &b_own), own, n);
        let b_all = self.rhs(estimate, 0..k);
        let p_all = self.synthesize(&self.solve(0..k, &b_all), 0..k, n);
        let e_interf = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
        let e_artif = estimate.iter().zip(&p_all).map(|(e, p)| e - p).collect();
        Ok(Decomposition {
            s_target,
            e_interf,
            e_artif,
        })
    }
}

/// One-shot decomposition of an estimate frame against reference frames.
pub fn decompose(
    estimate: &[f64],
    references: &[&[f64]],
    target: usize,
    filter_len: usize,
) -> Result<Decomposition> {
    if target >= references.len() {
        return Err(BssError::Count {
            expected: target + 1,
            got: references.len(),
        });
    }
    FrameProjector::new(references, filter_len)?.decompose(estimate, target)
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den < ZERO_ENERGY || num > MAX_RATIO * den {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

pub fn metrics(d: &Decomposition) -> Metrics {
    let s = energy(&d.s_target);
    let i = energy(&d.e_interf);
    let a = energy(&d.e_artif);
    let noise: Vec<f64> = d.e_interf.iter().zip(&d.e_artif).map(|(x, y)| x + y).collect();
    let signal: Vec<f64> = d.s_target.iter().zip(&d.e_interf).map(|(x, y)| x + y).collect();
    let sar = ratio_db(energy(&signal), a);
    if s < ZERO_ENERGY {
        return Metrics {
            sdr: f64::NEG_INFINITY,
            sir: f64::NEG_INFINITY,
            sar,
        };
    }
    Metrics {
        sdr: ratio_db(s, energy(&noise)),
        sir: ratio_db(s, i),
        sar,
    }
}

/// Framewise values with their sentinel bookkeeping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricSeries {
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn finite(&self) -> Vec<f64> {
        self.values.iter().copied().filter(|v| v.is_finite()).collect()
    }

    pub fn count_pos_inf(&self) -> usize {
        self.values.iter().filter(|v| **v == f64::INFINITY).count()
    }

    pub fn count_neg_inf(&self) -> usize {
        self.values.iter().filter(|v| **v == f64::NEG_INFINITY).count()
    }

    pub fn count_invalid(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Median of the finite frames; without any, the sentinel that occurs
    /// (`+∞` before `−∞`), else NaN.
    pub fn median(&self) -> f64 {
        let f = self.finite();
        if !f.is_empty() {
            return median(f);
        }
        if self.count_pos_inf() > 0 {
            f64::INFINITY
        } else if self.count_neg_inf() > 0 {
            f64::NEG_INFINITY
        } else {
            f64::NAN
        }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceReport {
    pub source: SourceTag,
    pub sdr: MetricSeries,
    pub sir: MetricSeries,
    pub sar: MetricSeries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub track: String,
    pub window_s: f64,
    pub hop_s: f64,
    pub filter_len: usize,
    pub frame_starts: Vec<f64>,
    pub sources: Vec<SourceReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub filter_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_s: 1.0,
            hop_s: 1.0,
            filter_len: 512,
        }
    }
}

fn db_json(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        Value::Null
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn series_json(s: &MetricSeries) -> Value {
    json!({
        "frames": s.values.iter().map(|v| db_json(*v)).collect::<Vec<_>>(),
        "median": db_json(s.median()),
        "pos_inf": s.count_pos_inf(),
        "neg_inf": s.count_neg_inf(),
        "invalid": s.count_invalid(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Value {
        json!({
            "track": self.track,
            "window_s": self.window_s,
            "hop_s": self.hop_s,
            "filter_len": self.filter_len,
            "frame_starts": self.frame_starts,
            "sources": self.sources.iter().map(|s| json!({
                "source": s.source.name(),
                "SDR": series_json(&s.sdr),
                "SIR": series_json(&s.sir),
                "SAR": series_json(&s.sar),
            })).collect::<Vec<_>>(),
        })
    }

    /// Rows `track,source,frame_start_s,SDR,SIR,SAR`, without header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for s in &self.sources {
            for (i, start) in self.frame_starts.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    self.track,
                    s.source.name(),
                    start,
                    s.sdr.values[i],
                    s.sir.values[i],
                    s.sar.values[i]
                ));
            }
        }
        out
    }

    pub fn source(&self, tag: SourceTag) -> Option<&SourceReport> {
        self.sources.iter().find(|s| s.source == tag)
    }
}

pub const CSV_HEADER: &str = "track,source,frame_start_s,SDR,SIR,SAR";

/// Per-source median over tracks of the per-track medians.
pub fn aggregate(reports: &[EvalReport]) -> Value {
    let mut out = serde_json::Map::new();
    for tag in SourceTag::STEMS {
        let per_track = |f: fn(&SourceReport) -> &MetricSeries| {
            let v: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.source(tag))
                .map(|s| f(s).median())
                .collect();
            MetricSeries { values: v }.median()
        };
        out.insert(
            tag.name().into(),
            json!({
                "SDR": db_json(per_track(|s| &s.sdr)),
                "SIR": db_json(per_track(|s| &s.sir)),
                "SAR": db_json(per_track(|s| &s.sar)),
            }),
        );
    }
    Value::Object(out)
}

/// Evaluates single-channel signals over non-overlapping full windows.
pub fn eval_signals(
    track: &str,
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    sample_rate: u32,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if estimates.len() != references.len() || references.is_empty() {
        return Err(BssError::Count {
            expected: references.len(),
            got: estimates.len(),
        });
    }
    let len = references[0].len();
    if estimates.iter().chain(references).any(|s| s.len() != len) {
        return Err(BssError::Length("estimates and references differ in length".into()));
    }
    let win = (cfg.window_s * sample_rate as f64).round() as usize;
    let hop = (cfg.hop_s * sample_rate as f64).round() as usize;
    if hop == 0 || win <= 4 * cfg.filter_len {
        return Err(BssError::FrameTooShort {
            frame: win,
            filter_len: cfg.filter_len,
        });
    }
    let n_frames = if len >= win { (len - win) / hop + 1 } else { 0 };
    let mut sources: Vec<SourceReport> = SourceTag::STEMS
        .iter()
        .take(references.len())
        .map(|t| SourceReport {
            source: *t,
            sdr: MetricSeries::default(),
            sir: MetricSeries::default(),
            sar: MetricSeries::default(),
        })
        .collect();
    let mut frame_starts = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * hop;
        frame_starts.push(start as f64 / sample_rate as f64);
        let refs: Vec<&[f64]> = references.iter().map(|r| &r[start..start + win]).collect();
        let projector = FrameProjector::new(&refs, cfg.filter_len)?;
        for (j, report) in sources.iter_mut().enumerate() {
            let m = match projector.decompose(&estimates[j][start..start + win], j) {
                Ok(d) => metrics(&d),
                Err(BssError::SilentReference) => Metrics::INVALID,
                Err(e) => return Err(e),
            };
            report.sdr.values.push(m.sdr);
            report.sir.values.push(m.sir);
            report.sar.values.push(m.sar);
        }
    }
    Ok(EvalReport {
        track: track.into(),
        window_s: cfg.window_s,
        hop_s: cfg.hop_s,
        filter_len: cfg.filter_len,
        frame_starts,
        sources,
    })
}

/// Evaluates clips after a mono downmix.
pub fn eval_track(
    track: &str,
    estimates: &[AudioClip],
    references: &[AudioClip],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let sr = references
        .first()
        .map(|r| r.sample_rate())
        .ok_or(BssError::Count {
            expected: 4,
            got: 0,
        })?;
    if let Some(c) = estimates.iter().chain(references).find(|c| c.sample_rate() != sr) {
        return Err(BssError::SampleRate(sr, c.sample_rate()));
    }
    let mono = |cs: &[AudioClip]| cs.iter().map(|c| c.to_mono()).collect::<Vec<_>>();
    eval_signals(track, &mono(estimates), &mono(references), sr, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn refs(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4).map(|_| noise(&mut rng, n)).collect()
    }

    fn views(r: &[Vec<f64>]) -> Vec<&[f64]> {
        r.iter().map(|v| v.as_slice()).collect()
    }

    #[test]
    fn target_estimate_has_no_error_terms() {
        let r = refs(1, 512);
        let v = views(&r);
        let d = decompose(&r[0], &v, 0, 8).unwrap();
        assert!(energy(&d.e_interf) < 1e-18 * energy(&r[0]));
        assert!(energy(&d.e_artif) < 1e-18 * energy(&r[0]));
        let m = metrics(&d);
        assert_eq!((m.sdr, m.sir, m.sar), (f64::INFINITY, f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn additivity() {
        let r = refs(2, 300);
        let v = views(&r);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est: Vec<f64> = noise(&mut rng, 300)
            .iter()
            .zip(&r[1])
            .map(|(n, x)| 0.3 * n + x)
            .collect();
        let d = decompose(&est, &v, 1, 4).unwrap();
        let scale = energy(&est).sqrt();
        for i in 0..300 {
            let sum = d.s_target[i] + d.e_interf[i] + d.e_artif[i];
            assert!((sum - est[i]).abs() <= 1e-9 * scale);
        }
        // s_target is orthogonal to e_interf + e_artif within the target subspace
        assert!(dot(&d.s_target, &d.e_artif).abs() < 1e-8 * energy(&est));
    }

    #[test]
    fn half_interference_gives_quarter_energy_ratio() {
        let n = 20_000;
        let r = refs(4, n);
        let v = views(&r);
        let est: Vec<f64> = r[0].iter().zip(&r[1]).map(|(a, b)| a + 0.5 * b).collect();
        let d = decompose(&est, &v, 0, 1).unwrap();
        let ratio = energy(&d.e_interf) / energy(&d.s_target);
        assert!((ratio - 0.25).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn independent_noise_is_mostly_artifact() {
        let n = 4000;
        let l = 8;
        let r = refs(5, n);
        let v = views(&r);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let est = noise(&mut rng, n);
        let d = decompose(&est, &v, 0, l).unwrap();
        let frac = energy(&d.s_target) / energy(&est);
        assert!(frac < 4.0 * l as f64 / n as f64, "{frac}");
        assert!(metrics(&d).sdr < -15.0);
    }

    #[test]
    fn metric_identities() {
        let d = Decomposition {
            s_target: vec![1.0, 2.0, 0.0],
            e_interf: vec![0.1, 0.0, 0.3],
            e_artif: vec![0.0; 3],
        };
        let m = metrics(&d);
        assert_eq!(m.sar, f64::INFINITY);
        assert_eq!(m.sdr, m.sir);
        let doubled = Decomposition {
            s_target: d.s_target.iter().map(|v| 2.0 * v).collect(),
            e_interf: d.e_interf.iter().map(|v| 2.0 * v).collect(),
            e_artif: vec![0.0, 0.5, 0.0],
        };
        let m2 = metrics(&doubled);
        let half = Decomposition {
            s_target: d.s_target.clone(),
            e_interf: d.e_interf.clone(),
            e_artif: vec![0.0, 0.25, 0.0],
        };
        let m1 = metrics(&half);
        assert!((m1.sdr - m2.sdr).abs() < 1e-12);
        assert!((m1.sir - m2.sir).abs() < 1e-12);
        assert!((m1.sar - m2.sar).abs() < 1e-12);
    }

    #[test]
    fn gain_invariance() {
        let r = refs(7, 600);
        let v = views(&r);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let est: Vec<f64> = noise(&mut rng, 600)
            .iter()
            .zip(&r[2])
            .map(|(n, x)| 0.5 * n + x)
            .collect();
        let est2: Vec<f64> = est.iter().map(|v| 2.0 * v).collect();
        let a = metrics(&decompose(&est, &v, 2, 4).unwrap());
        let b = metrics(&decompose(&est2, &v, 2, 4).unwrap());
        assert!((a.sdr - b.sdr).abs() < 1e-6);
        assert!((a.sir - b.sir).abs() < 1e-6);
        assert!((a.sar - b.sar).abs() < 1e-6);
    }

    #[test]
    fn silent_reference_marks_frame_invalid() {
        let mut r = refs(9, 100);
        r[0] = vec![0.0; 100];
        let v = views(&r);
        assert!(matches!(
            decompose(&r[1], &v, 0, 4),
            Err(BssError::SilentReference)
        ));
    }

    #[test]
    fn short_frame_rejected() {
        let r = refs(10, 16);
        let v = views(&r);
        assert!(matches!(
            decompose(&r[0], &v, 0, 4),
            Err(BssError::FrameTooShort { .. })
        ));
    }

    #[test]
    fn framewise_concatenation() {
        let cfg = EvalConfig {
            window_s: 1.0,
            hop_s: 1.0,
            filter_len: 4,
        };
        let sr = 200;
        let a = refs(11, 400);
        let b = refs(12, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let est_a: Vec<Vec<f64>> = a
            .iter()
            .map(|r| r.iter().map(|v| v + 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
            .collect();
        let est_b: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|v| 0.7 * v).collect()).collect();
        let cat = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
            x.iter().zip(y).map(|(p, q)| [p.as_slice(), q.as_slice()].concat()).collect()
        };
        let whole = eval_signals("t", &cat(&est_a, &est_b), &cat(&a, &b), sr, &cfg).unwrap();
        let ra = eval_signals("t", &est_a, &a, sr, &cfg).unwrap();
        let rb = eval_signals("t", &est_b, &b, sr, &cfg).unwrap();
        for j in 0..4 {
            let joined: Vec<f64> = [ra.sources[j].sdr.values.clone(), rb.sources[j].sdr.values.clone()].concat();
            assert_eq!(whole.sources[j].sdr.values, joined);
        }
    }

    #[test]
    fn medians_skip_sentinels() {
        let s = MetricSeries {
            values: vec![f64::INFINITY, 1.0, 3.0, f64::NEG_INFINITY, f64::NAN, 2.0],
        };
        assert_eq!(s.median(), 2.0);
        assert_eq!((s.count_pos_inf(), s.count_neg_inf(), s.count_invalid()), (1, 1, 1));
        let p = MetricSeries {
            values: vec![f64::INFINITY; 3],
        };
        assert_eq!(p.median(), f64::INFINITY);
    }
}
