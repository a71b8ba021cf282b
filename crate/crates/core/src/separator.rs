//! Four-branch mask-estimation network with two cross-branch bridges.
//!
//! Per source: dense + tanh encoder to width `B`, bridge #1, a stack of
//! bidirectional LSTM layers whose output is the latent sequence, bridge #2
//! on the decoder input, then dense + relu and dense + sigmoid to a mask over
//! every bin of every channel. A bridge replaces each branch activation
//! `a_i` with `(a_i + mean_j a_j) / 2`.
//!
//! Magnitudes of a multichannel clip are stacked along the feature axis:
//! `[T × channels·F]`, channel-major.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, AudioClip, ComplexSpectrogram, DspError, Spectrogram, StftConfig, Window};
use crate::nncore::{
    birnn, BiLstmIds, Checkpoint, DenseIds, NnError, OptimizerState, ParamStore, Standardizer,
    Tape, Var,
};
use crate::sidefeat::{self, PcaWhitener, SideFeatureSequence, SourceTag, FEATURE_DIM};

#[derive(Debug, Error)]
pub enum SeparatorError {
    #[error("invalid separator config: {0}")]
    Config(String),
    #[error("method {0} requires side features of the mixture")]
    FeaturesRequired(Method),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Feature(#[from] sidefeat::FeatureError),
}

pub type Result<T> = std::result::Result<T, SeparatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    Concat,
    ConReg,
    DisReg,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Baseline,
        Method::Concat,
        Method::ConReg,
        Method::DisReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Concat => "concat",
            Method::ConReg => "con-reg",
            Method::DisReg => "dis-reg",
        }
    }

    /// Regularized methods carry a projection head to the feature space.
    pub fn has_head(self) -> bool {
        matches!(self, Method::ConReg | Method::DisReg)
    }

    pub fn needs_mixture_features(self) -> bool {
        self == Method::Concat
    }

    pub fn needs_stem_features(self) -> bool {
        self.has_head()
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Method::ConReg => crate::losses::LAMBDA_CON_REG,
            Method::DisReg => crate::losses::LAMBDA_DIS_REG,
            _ => 0.0,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = SeparatorError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SeparatorError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    pub method: Method,
    /// Latent width `B`; equals twice the recurrent size.
    pub latent_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub sources: Vec<SourceTag>,
    pub alpha: f64,
    pub lambda: f64,
    /// Standardize encoder inputs per bin with statistics from training data.
    pub normalize: bool,
    pub channels: usize,
    /// Bins per channel fed to the encoder.
    pub max_bin: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub seed: u64,
}

impl SeparatorConfig {
    /// Desk-scale defaults for `method`.
    pub fn desk(method: Method) -> Self {
        Self {
            method,
            latent_width: 64,
            hidden: 32,
            layers: 1,
            sources: SourceTag::STEMS.to_vec(),
            alpha: crate::losses::DEFAULT_ALPHA,
            lambda: method.default_lambda(),
            normalize: true,
            channels: 2,
            max_bin: dsp::DEFAULT_WIN / 2 + 1,
            win_length: dsp::DEFAULT_WIN,
            hop_length: dsp::DEFAULT_HOP,
            seed: 0,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.win_length / 2 + 1
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig {
            win_length: self.win_length,
            hop_length: self.hop_length,
            window: Window::Hann,
            sample_rate: dsp::SAMPLE_RATE,
        }
    }

    pub fn latent_frame_period(&self) -> f64 {
        self.hop_length as f64 / dsp::SAMPLE_RATE as f64
    }

    /// Width of the decoder input for this method.
    pub fn decoder_input_width(&self) -> usize {
        if self.method == Method::Concat {
            self.latent_width + FEATURE_DIM
        } else {
            self.latent_width
        }
    }

    /// Width of exported latent rows.
    pub fn export_width(&self) -> usize {
        if self.method.has_head() {
            FEATURE_DIM
        } else {
            self.decoder_input_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SeparatorError::Config(m));
        if !(0.0..=2.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 2]", self.alpha));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.latent_width < 8 {
            return fail(format!("latent width {} below 8", self.latent_width));
        }
        if self.latent_width != 2 * self.hidden {
            return fail(format!(
                "latent width {} must equal twice the recurrent size {}",
                self.latent_width, self.hidden
            ));
        }
        if self.layers == 0 {
            return fail("at least one recurrent layer is required".into());
        }
        if self.sources != SourceTag::STEMS {
            return fail("sources must be vocals, drums, bass, other".into());
        }
        if !(1..=2).contains(&self.channels) {
            return fail(format!("{} channels", self.channels));
        }
        if self.max_bin == 0 || self.max_bin > self.n_bins() {
            return fail(format!("max_bin {} outside 1..={}", self.max_bin, self.n_bins()));
        }
        if !self.win_length.is_power_of_two() || self.hop_length == 0 {
            return fail("window must be a power of two and hop positive".into());
        }
        dsp::check_overlap_add(self.win_length, self.hop_length, Window::Hann)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Branch {
    enc: DenseIds,
    rnn: Vec<BiLstmIds>,
    dec1: DenseIds,
    dec2: DenseIds,
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct GraphOutput {
    pub masks: Vec<Var>,
    pub estimates: Vec<Var>,
    pub latents: Vec<Var>,
    pub projected: Option<Vec<Var>>,
}

/// Values of a forward pass on audio.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per source, `[T × channels·F]`.
    pub estimates: Vec<Array2<f64>>,
    pub masks: Vec<Array2<f64>>,
    /// Per source, `[T × B]`.
    pub latents: Vec<Array2<f64>>,
    /// Per source, `[T × 128]`, present for methods with a projection head.
    pub projected: Option<Vec<Array2<f64>>>,
    /// Mixture side features aligned to the latent frames (concat only).
    pub side: Option<Array2<f64>>,
    pub mixture_specs: Vec<ComplexSpectrogram>,
}

#[derive(Debug, Clone)]
pub struct Separator {
    config: SeparatorConfig,
    params: ParamStore,
    branches: Vec<Branch>,
    head: Option<DenseIds>,
    scaler: Standardizer,
    whitener: Option<PcaWhitener>,
}

/// Stacks per-channel magnitudes along the feature axis.
pub fn stack_channels(specs: &[Spectrogram]) -> Array2<f64> {
    let views: Vec<_> = specs.iter().map(|s| s.values.view()).collect();
    concatenate(Axis(1), &views).expect("channels share the frame count")
}

/// Splits a stacked `[T × channels·F]` array back into channels.
pub fn unstack_channels(x: &Array2<f64>, channels: usize) -> Vec<Array2<f64>> {
    let f = x.ncols() / channels;
    (0..channels)
        .map(|c| x.slice(s![.., c * f..(c + 1) * f]).to_owned())
        .collect()
}

/// Stacked magnitude spectrogram of a clip, upmixed or downmixed to
/// `channels`.
pub fn clip_magnitude(
    clip: &AudioClip,
    cfg: &StftConfig,
    channels: usize,
) -> Result<(Array2<f64>, Vec<ComplexSpectrogram>)> {
    let clip = clip.with_channels(channels)?;
    let specs = dsp::stft_clip(&clip, cfg)?;
    let mags: Vec<_> = specs.iter().map(dsp::magnitude).collect();
    Ok((stack_channels(&mags), specs))
}

impl Separator {
    pub fn new(config: SeparatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let b = config.latent_width;
        let d_in = config.channels * config.max_bin;
        let d_out = config.channels * config.n_bins();
        let branches = config
            .sources
            .iter()
            .map(|tag| {
                let p = tag.name();
                let enc = DenseIds::init(&mut params, &mut rng, &format!("{p}.enc"), d_in, b);
                let rnn = (0..config.layers)
                    .map(|k| {
                        BiLstmIds::init(
                            &mut params,
                            &mut rng,
                            &format!("{p}.rnn{k}"),
                            b,
                            config.hidden,
                        )
                    })
                    .collect();
                let dec1 = DenseIds::init(
                    &mut params,
                    &mut rng,
                    &format!("{p}.dec1"),
                    config.decoder_input_width(),
                    b,
                );
                let dec2 = DenseIds::init(&mut params, &mut rng, &format!("{p}.dec2"), b, d_out);
                Branch {
                    enc,
                    rnn,
                    dec1,
                    dec2,
                }
            })
            .collect();
        // the head is created last so branch weights match a baseline model
        // built from the same seed
        let head = config
            .method
            .has_head()
            .then(|| DenseIds::init(&mut params, &mut rng, "head", b, FEATURE_DIM));
        Ok(Self {
            scaler: Standardizer::identity(d_in),
            config,
            params,
            branches,
            head,
            whitener: None,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.scaler
    }

    pub fn set_scaler(&mut self, scaler: Standardizer) -> Result<()> {
        let width = self.config.channels * self.config.max_bin;
        if scaler.mean.len() != width || scaler.std.len() != width {
            return Err(SeparatorError::Input(format!(
                "scaler width {} does not match encoder input {width}",
                scaler.mean.len()
            )));
        }
        self.scaler = scaler;
        Ok(())
    }

    pub fn whitener(&self) -> Option<&PcaWhitener> {
        self.whitener.as_ref()
    }

    pub fn set_whitener(&mut self, whitener: Option<PcaWhitener>) {
        self.whitener = whitener;
    }

    /// Encoder input: the first `max_bin` bins of each channel.
    pub fn encoder_input(&self, mixture: &Array2<f64>) -> Array2<f64> {
        let f = self.config.n_bins();
        let parts: Vec<_> = (0..self.config.channels)
            .map(|c| mixture.slice(s![.., c * f..c * f + self.config.max_bin]))
            .collect();
        concatenate(Axis(1), &parts).expect("same frame count")
    }

    /// Encoder input rows used to fit the input scaler.
    pub fn fit_scaler<'a>(&mut self, mixtures: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<()> {
        if !self.config.normalize {
            return Ok(());
        }
        let inputs: Vec<_> = mixtures.into_iter().map(|m| self.encoder_input(m)).collect();
        if let Some(s) = Standardizer::fit(inputs.iter()) {
            self.set_scaler(s)?;
        }
        Ok(())
    }

    fn bridge(tape: &mut Tape, branches: &[Var]) -> Result<Vec<Var>> {
        let mean = tape.mean(branches)?;
        branches
            .iter()
            .map(|a| {
                let sum = tape.add(*a, mean)?;
                Ok(tape.scale(sum, 0.5))
            })
            .collect()
    }

    /// Encoder path to the per-source latent sequences `[T × B]`.
    pub fn encode(&self, tape: &mut Tape, mixture: &Array2<f64>) -> Result<Vec<Var>> {
        let expected = self.config.channels * self.config.n_bins();
        if mixture.ncols() != expected {
            return Err(SeparatorError::Input(format!(
                "mixture has {} columns, expected {expected}",
                mixture.ncols()
            )));
        }
        let mut input = self.encoder_input(mixture);
        if self.config.normalize {
            input = self.scaler.apply(&input);
        }
        let x = tape.constant(input);
        let pre = self
            .branches
            .iter()
            .map(|br| {
                let h = br.enc.apply(tape, &self.params, x)?;
                Ok(tape.tanh(h))
            })
            .collect::<Result<Vec<_>>>()?;
        let bridged = Self::bridge(tape, &pre)?;
        self.branches
            .iter()
            .zip(bridged)
            .map(|(br, mut h)| {
                for layer in &br.rnn {
                    h = birnn(tape, &self.params, layer, h)?;
                }
                Ok(h)
            })
            .collect()
    }

    /// Decoder path: returns `(masks, estimates)`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        latents: &[Var],
        side: Option<&Array2<f64>>,
        mixture: &Array2<f64>,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let inputs = match (self.config.method, side) {
            (Method::Concat, None) => return Err(SeparatorError::FeaturesRequired(Method::Concat)),
            (Method::Concat, Some(v)) => {
                let t = tape.value(latents[0]).nrows();
                if v.dim() != (t, FEATURE_DIM) {
                    return Err(SeparatorError::Input(format!(
                        "side features {:?}, expected ({t}, {FEATURE_DIM})",
                        v.dim()
                    )));
                }
                let sv = tape.constant(v.clone());
                latents
                    .iter()
                    .map(|l| Ok(tape.concat_cols(&[*l, sv])?))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => latents.to_vec(),
        };
        let bridged = Self::bridge(tape, &inputs)?;
        let mix = tape.constant(mixture.clone());
        let mut masks = Vec::new();
        let mut estimates = Vec::new();
        for (br, d) in self.branches.iter().zip(bridged) {
            let h = br.dec1.apply(tape, &self.params, d)?;
            let h = tape.relu(h);
            let z = br.dec2.apply(tape, &self.params, h)?;
            let mask = tape.sigmoid(z);
            estimates.push(tape.mul(mask, mix)?);
            masks.push(mask);
        }
        Ok((masks, estimates))
    }

    /// Per-frame affine projection of a latent sequence to 128 dims.
    pub fn project(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| SeparatorError::Config("model has no projection head".into()))?;
        Ok(head.apply(tape, &self.params, latent)?)
    }

    /// Full forward pass on a stacked mixture magnitude.
    pub fn build(
        &self,
        tape: &mut Tape,
        mixture: &Array2<f64>,
        side: Option<&Array2<f64>>,
    ) -> Result<GraphOutput> {
        let latents = self.encode(tape, mixture)?;
        let (masks, estimates) = self.decode(tape, &latents, side, mixture)?;
        let projected = match self.head {
            Some(_) => Some(
                latents
                    .iter()
                    .map(|l| self.project(tape, *l))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(GraphOutput {
            masks,
            estimates,
            latents,
            projected,
        })
    }

    /// Mixture side features aligned to `t_l` latent frames, from a given
    /// sequence or, failing that, from the embedded extractor.
    pub fn aligned_mixture_features(
        &self,
        mixture: &AudioClip,
        features: Option<&SideFeatureSequence>,
        t_l: usize,
    ) -> Result<Array2<f64>> {
        let seq = match features {
            Some(f) => f.clone(),
            None => {
                let w = self
                    .whitener
                    .as_ref()
                    .ok_or(SeparatorError::FeaturesRequired(self.config.method))?;
                sidefeat::extract_pseudo_vggish(mixture, w, SourceTag::Mixture)?
            }
        };
        Ok(sidefeat::upsample_repeat(
            &seq,
            self.config.latent_frame_period(),
            t_l,
        ))
    }

    /// Forward pass on audio.
    pub fn forward(
        &self,
        mixture: &AudioClip,
        features: Option<&SideFeatureSequence>,
    ) -> Result<ForwardOutput> {
        let (mag, specs) = clip_magnitude(mixture, &self.config.stft(), self.config.channels)?;
        let side = if self.config.method.needs_mixture_features() {
            Some(self.aligned_mixture_features(mixture, features, mag.nrows())?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let out = self.build(&mut tape, &mag, side.as_ref())?;
        let values = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>();
        Ok(ForwardOutput {
            estimates: values(&out.estimates),
            masks: values(&out.masks),
            latents: values(&out.latents),
            projected: out.projected.as_deref().map(values),
            side,
            mixture_specs: specs,
        })
    }

    /// Separated stems rendered with the mixture phase.
    pub fn separate(
        &self,
        mixture: &AudioClip,
        features: Option<&SideFeatureSequence>,
    ) -> Result<Vec<AudioClip>> {
        let out = self.forward(mixture, features)?;
        out.masks
            .iter()
            .map(|mask| {
                let per_channel = unstack_channels(mask, self.config.channels);
                let specs = per_channel
                    .iter()
                    .zip(&out.mixture_specs)
                    .map(|(m, spec)| dsp::mask_apply(m, spec))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(dsp::istft_clip(&specs, mixture.n_samples())?)
            })
            .collect()
    }

    pub fn to_checkpoint(&self, optimizer: Option<OptimizerState>, meta_json: String) -> Checkpoint {
        let row = |a: &Array1<f64>| a.view().insert_axis(Axis(0)).to_owned();
        let mut buffers = vec![
            ("scaler.mean".to_string(), row(&self.scaler.mean)),
            ("scaler.std".to_string(), row(&self.scaler.std)),
        ];
        if let Some(w) = &self.whitener {
            buffers.push(("whitener.mean".into(), row(&w.mean)));
            buffers.push(("whitener.projection".into(), w.projection.clone()));
            buffers.push(("whitener.eigenvalues".into(), row(&w.eigenvalues)));
            buffers.push(("whitener.floor".into(), Array2::from_elem((1, 1), w.floor)));
        }
        Checkpoint {
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            meta_json,
            params: self.params.clone(),
            buffers,
            optimizer,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: SeparatorConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| SeparatorError::Checkpoint(format!("config: {e}")))?;
        let mut model = Self::new(config)?;
        model.load_params(&ck.params)?;
        let vec = |name: &str| -> Result<Array1<f64>> {
            ck.buffer(name)
                .map(|b| b.row(0).to_owned())
                .ok_or_else(|| SeparatorError::Checkpoint(format!("missing buffer {name}")))
        };
        model.set_scaler(Standardizer {
            mean: vec("scaler.mean")?,
            std: vec("scaler.std")?,
        })?;
        if let Some(p) = ck.buffer("whitener.projection") {
            model.whitener = Some(PcaWhitener {
                mean: vec("whitener.mean")?,
                projection: p.clone(),
                eigenvalues: vec("whitener.eigenvalues")?,
                floor: vec("whitener.floor")?[0],
            });
        }
        Ok(model)
    }

    /// Copies every parameter of this model from `source` by name. Extra
    /// parameters in `source` (e.g. a projection head) are ignored.
    pub fn load_params(&mut self, source: &ParamStore) -> Result<()> {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let src = source
                .find(&name)
                .ok_or_else(|| SeparatorError::Checkpoint(format!("missing parameter {name}")))?;
            let value = source.value(src);
            if value.dim() != self.params.value(id).dim() {
                return Err(SeparatorError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    self.params.value(id).dim()
                )));
            }
            *self.params.value_mut(id) = value.clone();
        }
        Ok(())
    }
}
