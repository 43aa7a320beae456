//! One autoencoder layer: encoder, quantizer and decoder, plus its loss and a
//! single optimisation step.
//!
//! Topology (widths and counts come from [`LayerConfig`]):
//!
//! * encoder: `conv3x3/2 → ReLU → (conv3x3 → ReLU)* → conv3x3 → D channels`;
//!   always exactly one stride-2 convolution, so the grid halves.
//! * decoder: `conv3x3 → ReLU → nearest ×2 → (dilated conv3x3 → ReLU)* →
//!   conv3x3 → output`. Interior decoder convolutions alternate dilation
//!   2 and 1 (1,2,1 for three layers) with padding equal to the dilation.
//!
//! The decoder head depends on the reconstruction target: sigmoid pixels,
//! raw `z_e` of the layer below, or `N_lower` logits per position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RunningNorm, Tape, Var};
use crate::error::{arg_err, dim_err, HqaError, Result};
use crate::kernels::{self, ConvGeom};
use crate::optim::{radam_step, LrSchedule, OptimizerState};
use crate::param::{fan_in_uniform, ParamId, ParamStore};
use crate::quantizer::{
    commitment_loss, commitment_on_tape, ema_kmeans_update, entropy_loss, entropy_on_tape,
    observe_and_maybe_reset, posterior, posterior_on_tape, Codebook, PosteriorDistribution,
    ResetEvent, TemperatureSchedule, UsageAccumulator,
};
use crate::real::Real;
use crate::tensor::Tensor;

const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    /// Gumbel-softmax relaxed sample from the distance posterior.
    StochasticGumbel,
    /// Nearest code with a straight-through gradient; EMA k-means codebook.
    DeterministicEma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// MSE against the layer input (the `z_e` of the layer below).
    EmbeddingMse,
    /// Cross-entropy against the lower layer's nearest-code indices.
    IndexCrossEntropy,
    /// MSE against pixels, sigmoid output.
    PixelMse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizers {
    /// `β_e·Σ p log p + β_c·E_q‖z_e − e‖²`.
    Probabilistic,
    /// `‖sg[z_e] − e_k‖² + β_c‖z_e − sg[e_k]‖²` at the nearest code.
    Stopgrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerVariant {
    pub quantization: Quantization,
    pub recon_target: ReconTarget,
    pub regularizers: Regularizers,
}

impl LayerVariant {
    pub const fn hqa(recon_target: ReconTarget) -> Self {
        Self {
            quantization: Quantization::StochasticGumbel,
            recon_target,
            regularizers: Regularizers::Probabilistic,
        }
    }

    pub const fn vqvae(recon_target: ReconTarget) -> Self {
        Self {
            quantization: Quantization::DeterministicEma,
            recon_target,
            regularizers: Regularizers::Stopgrad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub beta_entropy: f64,
    pub beta_commit: f64,
    pub training_steps: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub tau_initial: f64,
    pub tau_final: f64,
    pub learning_rate: f64,
    pub code_reset: bool,
    /// Size of the lower codebook; decoder logits per position for the
    /// cross-entropy target, ignored otherwise.
    pub target_codes: usize,
    /// Standardise the input with running statistics (layers above the
    /// first).
    pub normalize_input: bool,
}

impl LayerConfig {
    /// Pixel layer with the MNIST hyperparameters of the first HQA layer.
    pub fn mnist_pixel_layer() -> Self {
        Self {
            input_size: 32,
            input_channels: 1,
            enc_layers: 3,
            dec_layers: 3,
            enc_hidden: 16,
            dec_hidden: 16,
            codebook_size: 256,
            codebook_dim: 64,
            beta_entropy: 1e-3,
            beta_commit: 1e-3,
            training_steps: 18_000,
            batch_size: 512,
            dropout: 0.0,
            tau_initial: TemperatureSchedule::MNIST_INITIAL,
            tau_final: TemperatureSchedule::FINAL,
            learning_rate: 4e-4,
            code_reset: true,
            target_codes: 0,
            normalize_input: false,
        }
    }

    /// Layer `level` (1-based, at most 5) of the MNIST hierarchy: sizes
    /// halve from 32, upper layers reconstruct the `z_e` below.
    pub fn mnist_layer(level: usize) -> Result<Self> {
        const ENC: [usize; 5] = [16, 16, 32, 48, 80];
        const DEC: [usize; 5] = [16, 32, 48, 80, 128];
        if !(1..=5).contains(&level) {
            return Err(HqaError::Config(format!(
                "MNIST hierarchy has layers 1..=5, not {level}"
            )));
        }
        let base = Self::mnist_pixel_layer();
        Ok(Self {
            input_size: 32 >> (level - 1),
            input_channels: if level == 1 { 1 } else { base.codebook_dim },
            enc_hidden: ENC[level - 1],
            dec_hidden: DEC[level - 1],
            normalize_input: level > 1,
            ..base
        })
    }

    /// Config for a layer stacked on `below`, keeping this layer's
    /// widths and schedules but taking sizes from the layer beneath.
    pub fn chained_on(mut self, below: &LayerConfig) -> Self {
        self.input_size = below.output_size();
        self.input_channels = below.codebook_dim;
        self.normalize_input = true;
        self
    }

    pub fn output_size(&self) -> usize {
        self.input_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_size", self.input_size),
            ("input_channels", self.input_channels),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("codebook_size", self.codebook_size),
            ("codebook_dim", self.codebook_dim),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(HqaError::Config(format!("{name} must be positive")));
        }
        if self.input_size < 2 || !self.input_size.is_multiple_of(2) {
            return Err(HqaError::Config(format!(
                "input_size {} cannot be halved",
                self.input_size
            )));
        }
        if !self.codebook_size.is_power_of_two() {
            return Err(HqaError::Config(format!(
                "codebook_size {} is not a power of two",
                self.codebook_size
            )));
        }
        if self.dec_layers < 2 {
            return Err(HqaError::Config("dec_layers must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HqaError::Config(format!(
                "dropout {} not in [0,1)",
                self.dropout
            )));
        }
        if !(self.tau_initial > 0.0 && self.tau_final > 0.0) {
            return Err(HqaError::Config("temperatures must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || self.beta_entropy < 0.0 || self.beta_commit < 0.0 {
            return Err(HqaError::Config(
                "learning rate and loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn output_channels(&self, target: ReconTarget) -> Result<usize> {
        match target {
            ReconTarget::PixelMse | ReconTarget::EmbeddingMse => Ok(self.input_channels),
            ReconTarget::IndexCrossEntropy if self.target_codes >= 2 => Ok(self.target_codes),
            ReconTarget::IndexCrossEntropy => Err(HqaError::Config(
                "index_cross_entropy needs target_codes ≥ 2".into(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvUnit {
    weight: ParamId,
    bias: ParamId,
    geom: ConvGeom,
}

/// A chain of 3×3 convolutions with ReLU between them and an optional
/// nearest-neighbour upsample after the first convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    units: Vec<ConvUnit>,
    upsample_after_first: bool,
}

impl ConvNet {
    fn add_conv<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        i: usize,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> ConvUnit {
        let fan_in = cin * KERNEL * KERNEL;
        let weight = store.add(
            format!("{prefix}.{i}.weight"),
            fan_in_uniform(&[cout, cin, KERNEL, KERNEL], fan_in, rng),
        );
        let bias = store.add(
            format!("{prefix}.{i}.bias"),
            fan_in_uniform(&[cout], fan_in, rng),
        );
        ConvUnit { weight, bias, geom }
    }

    fn encoder<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &LayerConfig, rng: &mut R) -> Self {
        let n = cfg.enc_layers;
        let units = (0..n)
            .map(|i| {
                let cin = if i == 0 {
                    cfg.input_channels
                } else {
                    cfg.enc_hidden
                };
                let cout = if i + 1 == n {
                    cfg.codebook_dim
                } else {
                    cfg.enc_hidden
                };
                let stride = if i == 0 { 2 } else { 1 };
                Self::add_conv(
                    store,
                    "encoder",
                    i,
                    cin,
                    cout,
                    ConvGeom::new(stride, 1, 1),
                    rng,
                )
            })
            .collect();
        Self {
            units,
            upsample_after_first: false,
        }
    }

    fn decoder<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &LayerConfig,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let n = cfg.dec_layers;
        let units = (0..n)
            .map(|i| {
                let cin = if i == 0 {
                    cfg.codebook_dim
                } else {
                    cfg.dec_hidden
                };
                let cout = if i + 1 == n { out } else { cfg.dec_hidden };
                let dilation = if i == 0 || i + 1 == n || i % 2 == 0 {
                    1
                } else {
                    2
                };
                Self::add_conv(
                    store,
                    "decoder",
                    i,
                    cin,
                    cout,
                    ConvGeom::new(1, dilation, dilation),
                    rng,
                )
            })
            .collect();
        Self {
            units,
            upsample_after_first: true,
        }
    }

    /// `dropout` applies after every hidden activation when `rng` is given.
    fn forward<T: Real, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        dropout: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let last = self.units.len() - 1;
        for (i, u) in self.units.iter().enumerate() {
            let w = tape.param(store, u.weight);
            let b = tape.param(store, u.bias);
            x = tape.conv2d(x, w, Some(b), u.geom)?;
            if i == last {
                break;
            }
            x = tape.relu(x);
            if let Some(r) = rng.as_deref_mut() {
                x = tape.dropout(x, dropout, r)?;
            }
            if i == 0 && self.upsample_after_first {
                x = tape.nearest_upsample(x, 2)?;
            }
        }
        Ok(x)
    }
}

/// Scalar loss components of one batch, in `f64` whatever the compute
/// precision.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    /// Mean `Σ p log p` (probabilistic) or zero (stopgrad).
    pub entropy: f64,
    /// Expected (probabilistic) or nearest-code (stopgrad) squared distance.
    pub commitment: f64,
    /// `‖sg[z_e] − e_k‖²` (stopgrad) or zero.
    pub codebook: f64,
    pub temperature: f64,
    pub learning_rate: f64,
}

/// Training target for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// Reconstruct the layer input itself.
    Input,
    /// Lower-layer code indices in `[B,H,W]` order.
    Indices(&'a [usize]),
}

/// Optimiser and code-usage state carried between training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T = f32> {
    pub net_opt: OptimizerState<T>,
    pub code_opt: OptimizerState<T>,
    pub usage: UsageAccumulator,
    pub steps_done: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HqaLayer<T = f32> {
    pub config: LayerConfig,
    pub variant: LayerVariant,
    pub params: ParamStore<T>,
    pub codebook: Codebook<T>,
    pub normalizer: Option<RunningNorm<T>>,
    pub train_state: TrainState<T>,
    encoder: ConvNet,
    decoder: ConvNet,
}

/// Everything one forward pass leaves on the tape.
struct Forward {
    loss: Var,
    recon: Var,
    entropy: Option<Var>,
    commitment: Var,
    codebook: Option<Var>,
    indices: Vec<usize>,
    z_rows: Tensor<f64>,
}

impl<T: Real> HqaLayer<T> {
    pub fn new<R: Rng>(config: LayerConfig, variant: LayerVariant, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let out = config.output_channels(variant.recon_target)?;
        let mut params = ParamStore::new();
        let encoder = ConvNet::encoder(&mut params, &config, rng);
        let decoder = ConvNet::decoder(&mut params, &config, out, rng);
        let learnable = variant.quantization == Quantization::StochasticGumbel;
        let codebook =
            Codebook::init_uniform(config.codebook_size, config.codebook_dim, learnable, rng)?;
        let normalizer = config
            .normalize_input
            .then(|| RunningNorm::new(config.input_channels));
        let usage = if config.code_reset {
            UsageAccumulator::new(config.codebook_size)
        } else {
            UsageAccumulator::disabled(config.codebook_size)
        };
        let train_state = TrainState {
            net_opt: OptimizerState::new(&params, config.learning_rate),
            code_opt: OptimizerState::new(codebook.store(), config.learning_rate),
            usage,
            steps_done: 0,
        };
        Ok(Self {
            config,
            variant,
            params,
            codebook,
            normalizer,
            train_state,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the network wiring for already-populated stores, as when
    /// restoring a checkpoint. Parameter names and shapes must match.
    pub fn from_parts(
        config: LayerConfig,
        variant: LayerVariant,
        params: ParamStore<T>,
        codebook: Codebook<T>,
        normalizer: Option<RunningNorm<T>>,
        train_state: TrainState<T>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Self::new(config, variant, &mut rng)?;
        if template.params.len() != params.len() {
            return Err(arg_err("HqaLayer::from_parts", "parameter count mismatch"));
        }
        for ((_, a), (_, b)) in template.params.iter().zip(params.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(arg_err(
                    "HqaLayer::from_parts",
                    format!(
                        "parameter {} {:?} vs {} {:?}",
                        a.name,
                        a.tensor.shape(),
                        b.name,
                        b.tensor.shape()
                    ),
                ));
            }
        }
        if codebook.embeddings().shape() != template.codebook.embeddings().shape() {
            return Err(arg_err("HqaLayer::from_parts", "codebook shape mismatch"));
        }
        if normalizer.is_some() != template.normalizer.is_some() {
            return Err(arg_err(
                "HqaLayer::from_parts",
                "normaliser presence mismatch",
            ));
        }
        Ok(Self {
            params,
            codebook,
            normalizer,
            train_state,
            ..template
        })
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.config.input_size;
        [batch, self.config.input_channels, s, s]
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.config.output_size();
        [batch, self.config.codebook_dim, s, s]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        let want = self.input_shape(s.first().copied().unwrap_or(0));
        if s != want || s[0] == 0 {
            return Err(arg_err(
                "encode",
                format!(
                    "input {s:?}, expected [B≥1,{},{},{}]",
                    want[1], want[2], want[3]
                ),
            ));
        }
        Ok(s[0])
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<usize> {
        let s = z.shape();
        let want = self.latent_shape(s.first().copied().unwrap_or(0));
        if s != want || s[0] == 0 {
            return Err(arg_err(
                "decode",
                format!(
                    "latent {s:?}, expected [B≥1,{},{},{}]",
                    want[1], want[2], want[3]
                ),
            ));
        }
        Ok(s[0])
    }

    fn encode_var(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        norm: Option<&mut RunningNorm<T>>,
        training: bool,
        rng: Option<&mut impl Rng>,
    ) -> Result<Var> {
        let x = match norm {
            Some(state) => tape.running_normalize(x, state, training)?,
            None => x,
        };
        self.encoder
            .forward(tape, &self.params, x, self.config.dropout, rng)
    }

    fn decode_var(&self, tape: &mut Tape<T>, z_q: Var, rng: Option<&mut impl Rng>) -> Result<Var> {
        let out = self
            .decoder
            .forward(tape, &self.params, z_q, self.config.dropout, rng)?;
        Ok(match self.variant.recon_target {
            ReconTarget::PixelMse => tape.sigmoid(out),
            _ => out,
        })
    }

    /// Continuous encoder output `z_e`, eval mode.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut norm = self.normalizer.clone();
        let z = self.encode_var(&mut tape, xv, norm.as_mut(), false, None::<&mut ChaCha8Rng>)?;
        Ok(tape.value(z).clone())
    }

    /// Decoder output for a quantised latent, eval mode: pixels in (0,1),
    /// lower-layer `z_e`, or logits over the lower codebook.
    pub fn decode(&self, z_q: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z_q)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z_q.clone());
        let out = self.decode_var(&mut tape, zv, None::<&mut ChaCha8Rng>)?;
        Ok(tape.value(out).clone())
    }

    /// `[B,D,h,w]` latent for `[B,h,w]` code indices.
    pub fn lookup(&self, indices: &[usize], batch: usize) -> Result<Tensor<T>> {
        let shape = self.latent_shape(batch);
        if indices.len() != batch * shape[2] * shape[3] {
            return Err(dim_err(
                "lookup",
                format!(
                    "{} indices for a {}×{}×{} grid",
                    indices.len(),
                    batch,
                    shape[2],
                    shape[3]
                ),
            ));
        }
        let rows = self.codebook.lookup(indices)?;
        Tensor::new(shape, kernels::rows_to_nchw(rows.data(), &shape))
    }

    /// Distance posterior for every position of `z_e`, in `[B,h,w]` order.
    pub fn posterior(&self, z_e: &Tensor<T>) -> Result<PosteriorDistribution<T>> {
        self.check_latent(z_e)?;
        let rows = Tensor::new(
            [
                z_e.len() / self.config.codebook_dim,
                self.config.codebook_dim,
            ],
            kernels::nchw_to_rows(z_e.data(), z_e.shape()),
        )?;
        posterior(&rows, &self.codebook)
    }

    pub fn temperature_at(&self, step: usize) -> Result<f64> {
        let mut s = TemperatureSchedule::new(self.config.tau_initial, self.config.training_steps);
        s.final_tau = self.config.tau_final;
        s.temperature_at(step.min(self.config.training_steps))
    }

    pub fn learning_rate_at(&self, step: usize) -> Result<f64> {
        LrSchedule::new(self.config.learning_rate, self.config.training_steps)
            .lr_at(step.min(self.config.training_steps))
    }

    fn forward_loss<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        input: &Tensor<T>,
        target: Target<'_>,
        norm: Option<&mut RunningNorm<T>>,
        tau: f64,
        rng: &mut R,
    ) -> Result<Forward> {
        let batch = self.check_input(input)?;
        let cfg = &self.config;
        let xv = tape.constant(input.clone());
        let dropout_rng = (cfg.dropout > 0.0).then_some(&mut *rng);
        let z = self.encode_var(tape, xv, norm, true, dropout_rng)?;
        let z_rows = tape.to_rows(z)?;
        let positions = tape.shape(z_rows)[0];
        let codes = self.codebook.on_tape(tape);
        let post = posterior_on_tape(tape, z_rows, codes)?;
        let nearest: Vec<usize> = tape
            .value(post.logits)
            .data()
            .chunks_exact(cfg.codebook_size)
            .map(argmax_first)
            .collect();

        let (z_q_rows, indices) = match self.variant.quantization {
            Quantization::StochasticGumbel => {
                let soft = tape.gumbel_softmax(post.logits, tau, rng)?;
                let picked = tape
                    .value(soft)
                    .data()
                    .chunks_exact(cfg.codebook_size)
                    .map(argmax_first)
                    .collect();
                (tape.matmul(soft, codes)?, picked)
            }
            Quantization::DeterministicEma => {
                let e_k = tape.gather_rows(codes, &nearest)?;
                let shift = tape.sub(e_k, z_rows)?;
                let shift = tape.detach(shift);
                (tape.add(z_rows, shift)?, nearest.clone())
            }
        };
        let zs = cfg.output_size();
        let z_q = tape.from_rows(z_q_rows, [batch, cfg.codebook_dim, zs, zs])?;
        let dropout_rng = (cfg.dropout > 0.0).then_some(&mut *rng);
        let out = self.decode_var(tape, z_q, dropout_rng)?;

        let recon = match (self.variant.recon_target, target) {
            (ReconTarget::IndexCrossEntropy, Target::Indices(idx)) => {
                let logits = tape.to_rows(out)?;
                tape.cross_entropy(logits, idx)?
            }
            (ReconTarget::IndexCrossEntropy, Target::Input) => {
                return Err(arg_err(
                    "layer_loss",
                    "cross-entropy target needs lower-layer indices",
                ));
            }
            (_, Target::Input) => tape.mse(out, xv)?,
            (_, Target::Indices(_)) => {
                return Err(arg_err("layer_loss", "index target given to an MSE layer"))
            }
        };

        let inv_p = T::one() / T::c(positions.max(1) as f64);
        let (loss, entropy, commitment, codebook) = match self.variant.regularizers {
            Regularizers::Probabilistic => {
                let h = entropy_on_tape(tape, &post)?;
                let c = commitment_on_tape(tape, &post)?;
                let wh = tape.scale(h, T::c(cfg.beta_entropy));
                let wc = tape.scale(c, T::c(cfg.beta_commit));
                let s = tape.add(recon, wh)?;
                (tape.add(s, wc)?, Some(h), c, None)
            }
            Regularizers::Stopgrad => {
                let e_k = tape.gather_rows(codes, &nearest)?;
                let z_sg = tape.detach(z_rows);
                let e_sg = tape.detach(e_k);
                let d_code = tape.sub(z_sg, e_k)?;
                let sq_code = tape.mul(d_code, d_code)?;
                let sum_code = tape.sum(sq_code);
                let code_term = tape.scale(sum_code, inv_p);
                let d_commit = tape.sub(z_rows, e_sg)?;
                let sq_commit = tape.mul(d_commit, d_commit)?;
                let sum_commit = tape.sum(sq_commit);
                let commit_term = tape.scale(sum_commit, inv_p);
                let wc = tape.scale(commit_term, T::c(cfg.beta_commit));
                let s = tape.add(recon, code_term)?;
                (tape.add(s, wc)?, None, commit_term, Some(code_term))
            }
        };
        let z_rows_value = tape.value(z_rows).cast::<f64>();
        Ok(Forward {
            loss,
            recon,
            entropy,
            commitment,
            codebook,
            indices,
            z_rows: z_rows_value,
        })
    }

    fn breakdown(&self, tape: &Tape<T>, f: &Forward, tau: f64, lr: f64) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().f64());
        LossBreakdown {
            total: get(Some(f.loss)),
            recon: get(Some(f.recon)),
            entropy: get(f.entropy),
            commitment: get(Some(f.commitment)),
            codebook: get(f.codebook),
            temperature: tau,
            learning_rate: lr,
        }
    }

    /// Training-mode loss of one batch without touching any state.
    pub fn evaluate_loss<R: Rng>(
        &self,
        input: &Tensor<T>,
        target: Target<'_>,
        step: usize,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let tau = self.temperature_at(step)?;
        let mut tape = Tape::new();
        let mut norm = self.normalizer.clone();
        let f = self.forward_loss(&mut tape, input, target, norm.as_mut(), tau, rng)?;
        Ok(self.breakdown(&tape, &f, tau, self.learning_rate_at(step)?))
    }

    /// One optimisation step at schedule position `step`: forward with a
    /// relaxed (or straight-through) sample, backward, RAdam update, EMA
    /// codebook update and code-usage bookkeeping. A non-finite loss aborts
    /// before any state changes.
    pub fn train_step<R: Rng>(
        &mut self,
        input: &Tensor<T>,
        target: Target<'_>,
        step: usize,
        rng: &mut R,
    ) -> Result<(LossBreakdown, Option<ResetEvent>)> {
        let tau = self.temperature_at(step)?;
        let lr = self.learning_rate_at(step)?;
        let mut tape = Tape::new();
        let mut norm = self.normalizer.clone();
        let f = self.forward_loss(&mut tape, input, target, norm.as_mut(), tau, rng)?;
        let report = self.breakdown(&tape, &f, tau, lr);
        if !report.total.is_finite() {
            return Err(HqaError::NonFiniteLoss {
                step,
                detail: format!("{report:?}"),
            });
        }
        self.params.zero_grad();
        self.codebook.store_mut().zero_grad();
        tape.backward_many(f.loss, &mut [&mut self.params, self.codebook.store_mut()])?;
        radam_step(&mut self.params, &mut self.train_state.net_opt, lr);
        if self.codebook.learnable {
            radam_step(
                self.codebook.store_mut(),
                &mut self.train_state.code_opt,
                lr,
            );
        } else {
            let z = f.z_rows.cast::<T>();
            ema_kmeans_update(&mut self.codebook, &z, &f.indices)?;
        }
        self.normalizer = norm;
        let reset = observe_and_maybe_reset(
            &mut self.train_state.usage,
            &f.indices,
            &mut self.codebook,
            step,
            self.config.training_steps,
            rng,
        );
        self.train_state.steps_done = step + 1;
        Ok((report, reset))
    }
}

fn argmax_first<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// The per-layer objective from precomputed pieces.
///
/// `target`/`reconstruction` are compared by MSE, except that
/// `target_indices` switches to cross-entropy of `reconstruction` rows
/// (`[positions, N_lower]` logits). Stopgrad terms use the posterior mode.
#[allow(clippy::too_many_arguments)]
pub fn layer_loss<T: Real>(
    target: &Tensor<T>,
    target_indices: Option<&[usize]>,
    z_rows: &Tensor<T>,
    post: &PosteriorDistribution<T>,
    codebook: &Codebook<T>,
    reconstruction: &Tensor<T>,
    variant: LayerVariant,
    beta_entropy: f64,
    beta_commit: f64,
) -> Result<LossBreakdown> {
    let recon = match target_indices {
        Some(idx) => {
            let n = reconstruction.shape().get(1).copied().unwrap_or(0);
            if reconstruction.ndim() != 2 || reconstruction.shape()[0] != idx.len() {
                return Err(dim_err(
                    "layer_loss",
                    "logits must be [positions, N] matching the indices",
                ));
            }
            let logp = kernels::log_softmax_rows(reconstruction.data(), n);
            idx.iter()
                .enumerate()
                .map(|(r, &t)| -logp[r * n + t].f64())
                .sum::<f64>()
                / idx.len().max(1) as f64
        }
        None => {
            if target.shape() != reconstruction.shape() {
                return Err(dim_err(
                    "layer_loss",
                    format!(
                        "target {:?} vs reconstruction {:?}",
                        target.shape(),
                        reconstruction.shape()
                    ),
                ));
            }
            target
                .data()
                .iter()
                .zip(reconstruction.data())
                .map(|(&a, &b)| (a - b).f64().powi(2))
                .sum::<f64>()
                / target.len().max(1) as f64
        }
    };
    let mut out = LossBreakdown {
        recon,
        ..Default::default()
    };
    match variant.regularizers {
        Regularizers::Probabilistic => {
            out.entropy = entropy_loss(post).f64();
            out.commitment = commitment_loss(post, z_rows, codebook)?.f64();
            out.total = recon + beta_entropy * out.entropy + beta_commit * out.commitment;
        }
        Regularizers::Stopgrad => {
            let modes = post.mode();
            let d = codebook.dim();
            let dist: f64 = modes
                .iter()
                .enumerate()
                .map(|(p, &k)| {
                    kernels::sq_dist(&z_rows.data()[p * d..(p + 1) * d], codebook.row(k)).f64()
                })
                .sum::<f64>()
                / modes.len().max(1) as f64;
            out.codebook = dist;
            out.commitment = dist;
            out.total = recon + dist + beta_commit * dist;
        }
    }
    Ok(out)
}
