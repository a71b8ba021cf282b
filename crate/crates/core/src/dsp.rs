//! Time-frequency analysis and synthesis.
//!
//! Frames are centered with reflect padding of `win_length / 2` samples and
//! the forward transform is unnormalized, so a full-scale sinusoid at a bin
//! center reaches a magnitude of about a quarter of `win_length` under Hann.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Zip};
use realfft::num_complex::Complex64;
use realfft::RealFftPlanner;
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 44_100;
pub const DEFAULT_WIN: usize = 4096;
pub const DEFAULT_HOP: usize = 1024;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("framing error: signal of {n_samples} samples cannot be framed with window {win_length}")]
    Framing { n_samples: usize, win_length: usize },
    #[error("invalid framing parameters: {0}")]
    InvalidParams(String),
    #[error("window {win_length}/hop {hop_length} violates the overlap-add condition")]
    OverlapAdd { win_length: usize, hop_length: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Multichannel audio, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(DspError::InvalidAudio(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let n = channels[0].len();
        if n == 0 {
            return Err(DspError::InvalidAudio("clip has no samples".into()));
        }
        if channels.iter().any(|c| c.len() != n) {
            return Err(DspError::InvalidAudio("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(DspError::InvalidAudio("non-finite sample".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn silence(n_channels: usize, n_samples: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; n_samples]; n_channels], sample_rate)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Average of all channels.
    pub fn to_mono(&self) -> Vec<f64> {
        let k = self.n_channels() as f64;
        (0..self.n_samples())
            .map(|t| self.channels.iter().map(|c| c[t]).sum::<f64>() / k)
            .collect()
    }

    /// Returns the clip with `n_channels` channels, duplicating a mono source.
    pub fn with_channels(&self, n_channels: usize) -> Result<Self> {
        match (self.n_channels(), n_channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 2) => Self::new(
                vec![self.channels[0].clone(), self.channels[0].clone()],
                self.sample_rate,
            ),
            (2, 1) => Self::mono(self.to_mono(), self.sample_rate),
            (a, b) => Err(DspError::InvalidAudio(format!(
                "cannot convert {a} channels to {b}"
            ))),
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_samples() {
            return Err(DspError::InvalidAudio(format!(
                "slice {start}..{} exceeds {} samples",
                start + len,
                self.n_samples()
            )));
        }
        Self::new(
            self.channels
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
            self.sample_rate,
        )
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|x| x * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Swaps left and right; identity for mono.
    pub fn swapped(&self) -> Self {
        let mut channels = self.channels.clone();
        channels.reverse();
        Self {
            channels,
            sample_rate: self.sample_rate,
        }
    }

    pub fn sum<'a>(clips: impl IntoIterator<Item = &'a AudioClip>) -> Result<Self> {
        let mut iter = clips.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| DspError::InvalidAudio("sum of zero clips".into()))?;
        let mut acc = first.channels.clone();
        for clip in iter {
            if clip.n_channels() != first.n_channels()
                || clip.n_samples() != first.n_samples()
                || clip.sample_rate != first.sample_rate
            {
                return Err(DspError::InvalidAudio("clips differ in layout".into()));
            }
            for (a, c) in acc.iter_mut().zip(&clip.channels) {
                for (x, y) in a.iter_mut().zip(c) {
                    *x += y;
                }
            }
        }
        Self::new(acc, first.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|x| x * x).sum()
    }

    pub fn peak(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn samples(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            win_length: DEFAULT_WIN,
            hop_length: DEFAULT_HOP,
            window: Window::Hann,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.win_length / 2 + 1
    }

    pub fn frame_period(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    fn validate(&self) -> Result<()> {
        if !self.win_length.is_power_of_two() || self.win_length < 2 {
            return Err(DspError::InvalidParams(format!(
                "window length {} is not a power of two",
                self.win_length
            )));
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(DspError::InvalidParams(format!(
                "hop {} must be in 1..={}",
                self.hop_length, self.win_length
            )));
        }
        Ok(())
    }
}

/// Number of centered frames for a signal of `n_samples`.
pub fn frame_count(n_samples: usize, win_length: usize, hop_length: usize) -> usize {
    let pad = win_length / 2;
    (n_samples + 2 * pad - win_length) / hop_length + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    /// `[frames × bins]`
    pub values: Array2<Complex64>,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    fn config(&self) -> StftConfig {
        StftConfig {
            win_length: self.win_length,
            hop_length: self.hop_length,
            window: self.window,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `[frames × bins]`, non-negative.
    pub values: Array2<f64>,
    pub win_length: usize,
    pub hop_length: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }
}

fn reflect_pad(signal: &[f64], pad: usize) -> Vec<f64> {
    let n = signal.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| signal[i]));
    out.extend_from_slice(signal);
    out.extend((0..pad).map(|i| signal[n - 2 - i]));
    out
}

/// Single-channel STFT.
pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let pad = cfg.win_length / 2;
    if signal.len() <= pad {
        return Err(DspError::Framing {
            n_samples: signal.len(),
            win_length: cfg.win_length,
        });
    }
    let padded = reflect_pad(signal, pad);
    let n_frames = frame_count(signal.len(), cfg.win_length, cfg.hop_length);
    let window = cfg.window.samples(cfg.win_length);

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.win_length);
    let mut scratch = fft.make_scratch_vec();
    let mut frame = fft.make_input_vec();
    let mut spectrum = fft.make_output_vec();
    let mut values = Array2::<Complex64>::zeros((n_frames, cfg.n_bins()));
    for (m, mut row) in values.rows_mut().into_iter().enumerate() {
        let start = m * cfg.hop_length;
        for (j, x) in frame.iter_mut().enumerate() {
            *x = padded[start + j] * window[j];
        }
        fft.process_with_scratch(&mut frame, &mut spectrum, &mut scratch)
            .expect("fft buffer sizes are fixed by the planner");
        for (dst, src) in row.iter_mut().zip(&spectrum) {
            *dst = *src;
        }
    }
    Ok(ComplexSpectrogram {
        values,
        win_length: cfg.win_length,
        hop_length: cfg.hop_length,
        window: cfg.window,
        sample_rate: cfg.sample_rate,
    })
}

/// STFT of every channel of a clip.
pub fn stft_clip(clip: &AudioClip, cfg: &StftConfig) -> Result<Vec<ComplexSpectrogram>> {
    let cfg = StftConfig {
        sample_rate: clip.sample_rate(),
        ..*cfg
    };
    clip.channels().iter().map(|c| stft(c, &cfg)).collect()
}

/// Checks that the squared window overlap-adds to a constant.
pub fn check_overlap_add(win_length: usize, hop_length: usize, window: Window) -> Result<()> {
    let err = DspError::OverlapAdd {
        win_length,
        hop_length,
    };
    if hop_length == 0 || win_length % hop_length != 0 {
        return Err(err);
    }
    let w = window.samples(win_length);
    let env: Vec<f64> = (0..hop_length)
        .map(|i| {
            (i..win_length)
                .step_by(hop_length)
                .map(|j| w[j] * w[j])
                .sum::<f64>()
        })
        .collect();
    let max = env.iter().cloned().fold(f64::MIN, f64::max);
    let min = env.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 || (max - min) > 1e-9 * max {
        return Err(err);
    }
    Ok(())
}

/// Inverse STFT by windowed overlap-add, trimmed to `n_samples`.
pub fn istft(spec: &ComplexSpectrogram, n_samples: usize) -> Result<Vec<f64>> {
    let cfg = spec.config();
    cfg.validate()?;
    check_overlap_add(cfg.win_length, cfg.hop_length, cfg.window)?;
    if spec.n_bins() != cfg.n_bins() {
        return Err(DspError::Shape {
            expected: (spec.n_frames(), cfg.n_bins()),
            got: spec.values.dim(),
        });
    }
    let win = cfg.win_length;
    let pad = win / 2;
    let window = cfg.window.samples(win);
    let total = (spec.n_frames() - 1) * cfg.hop_length + win;
    let mut out = vec![0.0; total];
    let mut envelope = vec![0.0; total];

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(win);
    let mut scratch = ifft.make_scratch_vec();
    let mut spectrum = ifft.make_input_vec();
    let mut frame = ifft.make_output_vec();
    let scale = 1.0 / win as f64;
    for (m, row) in spec.values.rows().into_iter().enumerate() {
        for (dst, src) in spectrum.iter_mut().zip(row.iter()) {
            *dst = *src;
        }
        // imaginary parts of DC and Nyquist must vanish for a real inverse
        spectrum[0].im = 0.0;
        let last = spectrum.len() - 1;
        spectrum[last].im = 0.0;
        ifft.process_with_scratch(&mut spectrum, &mut frame, &mut scratch)
            .expect("fft buffer sizes are fixed by the planner");
        let start = m * cfg.hop_length;
        for j in 0..win {
            out[start + j] += frame[j] * scale * window[j];
            envelope[start + j] += window[j] * window[j];
        }
    }
    let result = (0..n_samples)
        .map(|t| {
            let i = t + pad;
            if i < total && envelope[i] > 1e-11 {
                out[i] / envelope[i]
            } else {
                0.0
            }
        })
        .collect();
    Ok(result)
}

/// Inverse STFT of per-channel spectrograms.
pub fn istft_clip(specs: &[ComplexSpectrogram], n_samples: usize) -> Result<AudioClip> {
    let sr = specs
        .first()
        .ok_or_else(|| DspError::InvalidAudio("no channels".into()))?
        .sample_rate;
    let channels = specs
        .iter()
        .map(|s| istft(s, n_samples))
        .collect::<Result<Vec<_>>>()?;
    AudioClip::new(channels, sr)
}

pub fn magnitude(spec: &ComplexSpectrogram) -> Spectrogram {
    Spectrogram {
        values: spec.values.mapv(|c| c.norm()),
        win_length: spec.win_length,
        hop_length: spec.hop_length,
        sample_rate: spec.sample_rate,
    }
}

/// Scales the mixture magnitude by `mask`, keeping the mixture phase.
pub fn mask_apply(mask: &Array2<f64>, mixture: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    if mask.dim() != mixture.values.dim() {
        return Err(DspError::Shape {
            expected: mixture.values.dim(),
            got: mask.dim(),
        });
    }
    let mut values = mixture.values.clone();
    Zip::from(&mut values).and(mask).for_each(|c, &m| *c *= m);
    Ok(ComplexSpectrogram {
        values,
        ..mixture.clone()
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular mel filterbank spanning 0 Hz to Nyquist.
pub fn mel_matrix(n_bins: usize, n_mels: usize, sample_rate: u32) -> Array2<f64> {
    mel_matrix_range(n_bins, n_mels, sample_rate, 0.0, sample_rate as f64 / 2.0)
}

/// Triangular mel filterbank `[n_mels × n_bins]` between `fmin` and `fmax`.
///
/// A filter narrower than the bin spacing still gets the weight of its
/// nearest bin, so no row is empty.
pub fn mel_matrix_range(
    n_bins: usize,
    n_mels: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Array2<f64> {
    assert!(n_mels < n_bins, "need fewer mel bands than bins");
    let nyquist = sample_rate as f64 / 2.0;
    let bin_hz = nyquist / (n_bins - 1) as f64;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut m = Array2::<f64>::zeros((n_mels, n_bins));
    for b in 0..n_mels {
        let (lo, center, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            m[[b, k]] = w;
        }
        if m.row(b).sum() <= 0.0 {
            let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
            m[[b, k]] = 1.0;
        }
    }
    m
}

pub mod wav {
    //! WAV ingestion (16-bit PCM or 32-bit float) and 32-bit float output.

    use super::*;
    use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

    pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
        let reader = WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.sample_rate != SAMPLE_RATE {
            return Err(DspError::UnsupportedWav(format!(
                "sample rate {} Hz (only {SAMPLE_RATE} Hz is supported)",
                spec.sample_rate
            )));
        }
        let n_ch = spec.channels as usize;
        if n_ch == 0 || n_ch > 2 {
            return Err(DspError::UnsupportedWav(format!("{n_ch} channels")));
        }
        let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (SampleFormat::Int, 16) => reader
                .into_samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>()?,
            (SampleFormat::Float, 32) => reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| v as f64))
                .collect::<std::result::Result<_, _>>()?,
            (fmt, bits) => {
                return Err(DspError::UnsupportedWav(format!("{bits}-bit {fmt:?}")));
            }
        };
        let channels = (0..n_ch)
            .map(|c| interleaved.iter().skip(c).step_by(n_ch).copied().collect())
            .collect();
        AudioClip::new(channels, spec.sample_rate)
    }

    pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
        let spec = WavSpec {
            channels: clip.n_channels() as u16,
            sample_rate: clip.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut writer = WavWriter::create(path.as_ref(), spec)?;
        for t in 0..clip.n_samples() {
            for c in clip.channels() {
                writer.write_sample(c[t] as f32)?;
            }
        }
        writer.finalize()?;
        Ok(())
    }
}
