//! One-dimensional mode-covering / mode-dropping experiment.
//!
//! Data are scalars from a four-component Gaussian mixture. A single
//! quantized layer with too few codes must put reconstructions between
//! modes (mode covering). Stacking a 2-code layer on a 4-code base fixes
//! that, and whether it drops modes depends on how the base code is chosen
//! at decode time: argmax keeps two modes, posterior sampling keeps four.
//!
//! Everything runs in `f64` on MLPs small enough that a full seed takes a
//! few seconds.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, HqaError, Result};
use crate::optim::{radam_step, LrSchedule, OptimizerState};
use crate::param::{fan_in_uniform, ParamId, ParamStore};
use crate::quantizer::{
    commitment_on_tape, entropy_on_tape, observe_and_maybe_reset, posterior, posterior_on_tape,
    sample_categorical, Codebook, PosteriorDistribution, TemperatureSchedule, UsageAccumulator,
};
use crate::stack::DecodeMode;
use crate::tensor::Tensor;

/// Equal-weight Gaussian mixture with a shared standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDistribution {
    pub means: Vec<f64>,
    pub std: f64,
}

impl Default for ToyDistribution {
    fn default() -> Self {
        Self {
            means: vec![-0.49, -0.32, 0.32, 0.49],
            std: 0.015,
        }
    }
}

impl ToyDistribution {
    /// Density at `x`.
    pub fn density(&self, x: f64) -> f64 {
        let norm = 1.0 / (self.std * (2.0 * std::f64::consts::PI).sqrt() * self.means.len() as f64);
        self.means
            .iter()
            .map(|m| norm * (-0.5 * ((x - m) / self.std).powi(2)).exp())
            .sum()
    }
}

/// `n` i.i.d. mixture samples.
pub fn sample_toy(dist: &ToyDistribution, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, dist.std).expect("finite std");
    (0..n)
        .map(|_| dist.means[rng.random_range(0..dist.means.len())] + noise.sample(&mut rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub dist: ToyDistribution,
    pub hidden: usize,
    pub codebook_dim: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Commitment weight of the deterministic layers.
    pub vq_commit: f64,
    /// Entropy and commitment weights of the stochastic layers.
    pub beta_entropy: f64,
    pub beta_commit: f64,
    pub tau_initial: f64,
    pub code_reset: bool,
    /// Mode windows are `mean ± window_stds · std`.
    pub window_stds: f64,
    pub max_gap: f64,
    pub min_covering_gap: f64,
    pub occupancy: f64,
    pub max_window_share: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dist: ToyDistribution::default(),
            hidden: 32,
            codebook_dim: 2,
            learning_rate: 4e-4,
            steps: 5000,
            batch_size: 256,
            train_samples: 20_000,
            eval_samples: 10_000,
            vq_commit: 0.25,
            beta_entropy: 1e-3,
            beta_commit: 1e-3,
            tau_initial: TemperatureSchedule::MNIST_INITIAL,
            code_reset: true,
            window_stds: 4.0,
            max_gap: 0.05,
            min_covering_gap: 0.3,
            occupancy: 0.01,
            max_window_share: 0.6,
        }
    }
}

/// Two hidden ReLU layers.
#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn new(
        store: &mut ParamStore<f64>,
        prefix: &str,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add(
                    format!("{prefix}.{i}.weight"),
                    fan_in_uniform(&[w[0], w[1]], w[0], rng),
                );
                let bias = store.add(
                    format!("{prefix}.{i}.bias"),
                    fan_in_uniform(&[w[1]], w[0], rng),
                );
                (weight, bias)
            })
            .collect();
        Self { layers }
    }

    fn forward(&self, tape: &mut Tape<f64>, store: &ParamStore<f64>, mut x: Var) -> Result<Var> {
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x);
            }
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            let y = tape.matmul(x, w)?;
            x = tape.add_row_bias(y, b)?;
        }
        Ok(x)
    }
}

/// One quantized autoencoder over row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLayer {
    pub params: ParamStore<f64>,
    pub codebook: Codebook<f64>,
    /// `Deterministic`: nearest code with straight-through gradients and
    /// stop-gradient codebook/commitment terms. `Stochastic`: relaxed
    /// posterior sample with entropy and expected commitment terms.
    pub quantization: ToyQuantization,
    pub input_dim: usize,
    encoder: Mlp,
    decoder: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyQuantization {
    Deterministic,
    Stochastic,
}

impl ToyLayer {
    pub fn new(
        input_dim: usize,
        codes: usize,
        quantization: ToyQuantization,
        cfg: &ToyConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (h, d) = (cfg.hidden, cfg.codebook_dim);
        let encoder = Mlp::new(&mut params, "encoder", &[input_dim, h, h, d], &mut rng);
        let decoder = Mlp::new(&mut params, "decoder", &[d, h, h, input_dim], &mut rng);
        let codebook = Codebook::init_uniform(codes, d, true, &mut rng)?;
        Ok(Self {
            params,
            codebook,
            quantization,
            input_dim,
            encoder,
            decoder,
        })
    }

    fn run(&self, mlp: &Mlp, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &self.params, v)?;
        Ok(tape.value(y).clone())
    }

    /// `[B, input_dim] -> [B, D]`.
    pub fn encode(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.run(&self.encoder, x)
    }

    /// `[B, D] -> [B, input_dim]`.
    pub fn decode(&self, z_q: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.run(&self.decoder, z_q)
    }

    pub fn posterior(&self, z_e: &Tensor<f64>) -> Result<PosteriorDistribution<f64>> {
        posterior(z_e, &self.codebook)
    }

    /// Trains against `target(x) = x` on batches drawn by `batch`; returns
    /// the reconstruction loss per step.
    fn train(
        &mut self,
        cfg: &ToyConfig,
        rng: &mut ChaCha8Rng,
        mut batch: impl FnMut(&mut ChaCha8Rng) -> Result<Tensor<f64>>,
    ) -> Result<Vec<f64>> {
        let mut net_opt = OptimizerState::new(&self.params, cfg.learning_rate);
        let mut code_opt = OptimizerState::new(self.codebook.store(), cfg.learning_rate);
        let lr = LrSchedule::new(cfg.learning_rate, cfg.steps);
        let tau = TemperatureSchedule::new(cfg.tau_initial, cfg.steps);
        let mut usage = if cfg.code_reset {
            UsageAccumulator::new(self.codebook.size())
        } else {
            UsageAccumulator::disabled(self.codebook.size())
        };
        let mut recon_log = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let x = batch(rng)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let z = self.encoder.forward(&mut tape, &self.params, xv)?;
            let codes = self.codebook.on_tape(&mut tape);
            let post = posterior_on_tape(&mut tape, z, codes)?;
            let n = self.codebook.size();
            let argmax = |t: &Tape<f64>, v: Var| -> Vec<usize> {
                t.value(v)
                    .data()
                    .chunks_exact(n)
                    .map(|r| (0..n).fold(0, |b, k| if r[k] > r[b] { k } else { b }))
                    .collect()
            };
            let (z_q, picked, extra) = match self.quantization {
                ToyQuantization::Deterministic => {
                    let nearest = argmax(&tape, post.logits);
                    let e_k = tape.gather_rows(codes, &nearest)?;
                    let shift = tape.sub(e_k, z)?;
                    let shift = tape.detach(shift);
                    let z_q = tape.add(z, shift)?;
                    let (z_sg, e_sg) = (tape.detach(z), tape.detach(e_k));
                    let code_term = mean_sq(&mut tape, z_sg, e_k)?;
                    let commit = mean_sq(&mut tape, z, e_sg)?;
                    let commit = tape.scale(commit, cfg.vq_commit);
                    (z_q, nearest, tape.add(code_term, commit)?)
                }
                ToyQuantization::Stochastic => {
                    let soft = tape.gumbel_softmax(post.logits, tau.temperature_at(step)?, rng)?;
                    let picked = argmax(&tape, soft);
                    let z_q = tape.matmul(soft, codes)?;
                    let h = entropy_on_tape(&mut tape, &post)?;
                    let c = commitment_on_tape(&mut tape, &post)?;
                    let h = tape.scale(h, cfg.beta_entropy);
                    let c = tape.scale(c, cfg.beta_commit);
                    (z_q, picked, tape.add(h, c)?)
                }
            };
            let out = self.decoder.forward(&mut tape, &self.params, z_q)?;
            let recon = tape.mse(out, xv)?;
            let loss = tape.add(recon, extra)?;
            let total = tape.value(loss).item();
            if !total.is_finite() {
                return Err(HqaError::NonFiniteLoss {
                    step,
                    detail: format!("toy loss {total}"),
                });
            }
            recon_log.push(tape.value(recon).item());
            self.params.zero_grad();
            self.codebook.store_mut().zero_grad();
            tape.backward_many(loss, &mut [&mut self.params, self.codebook.store_mut()])?;
            let rate = lr.lr_at(step)?;
            radam_step(&mut self.params, &mut net_opt, rate);
            radam_step(self.codebook.store_mut(), &mut code_opt, rate);
            observe_and_maybe_reset(
                &mut usage,
                &picked,
                &mut self.codebook,
                step,
                cfg.steps,
                rng,
            );
        }
        Ok(recon_log)
    }
}

fn mean_sq(tape: &mut Tape<f64>, a: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(a)[0].max(1);
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Layer 1 consumes scalars; layer 2, when present, reconstructs layer 1's
/// `z_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyStack {
    pub layers: Vec<ToyLayer>,
    /// Reconstruction loss per step, one log per layer.
    pub loss_logs: Vec<Vec<f64>>,
}

impl ToyStack {
    /// Transmitted code of every scalar in `x`.
    pub fn compress(
        &self,
        x: &[f64],
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let mut z = Tensor::new([x.len(), 1], x.to_vec())?;
        for layer in &self.layers {
            z = layer.encode(&z)?;
        }
        let top = self
            .layers
            .last()
            .ok_or_else(|| arg_err("ToyStack", "empty stack"))?;
        Ok(pick(&top.posterior(&z)?, mode, rng))
    }

    /// Decodes top-layer codes back to scalars, re-quantizing at each layer
    /// boundary with `mode`.
    pub fn reconstruct(
        &self,
        codes: &[usize],
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let mut idx = codes.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = layer.decode(&layer.codebook.lookup(&idx)?)?;
            if i == 0 {
                return Ok(out.into_data());
            }
            idx = pick(&self.layers[i - 1].posterior(&out)?, mode, rng);
        }
        Err(arg_err("ToyStack", "empty stack"))
    }

    /// Mean entropy (nats) of the base posterior evaluated at the top
    /// layer's reconstruction of `z_e`; zero for a single layer.
    pub fn decoded_posterior_entropy(&self, x: &[f64]) -> Result<f64> {
        if self.layers.len() < 2 {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let codes = self.compress(x, DecodeMode::Argmax, &mut rng)?;
        let top = &self.layers[1];
        let z_hat = top.decode(&top.codebook.lookup(&codes)?)?;
        let post = self.layers[0].posterior(&z_hat)?;
        let h: f64 = post
            .probs
            .data()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        Ok(h / post.positions() as f64)
    }
}

fn pick(post: &PosteriorDistribution<f64>, mode: DecodeMode, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match mode {
        DecodeMode::Argmax => post.mode(),
        DecodeMode::Stochastic => (0..post.positions())
            .map(|p| sample_categorical(post.row(p), rng))
            .collect(),
    }
}

fn batch_of(samples: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let data = (0..size)
        .map(|_| samples[rng.random_range(0..samples.len())])
        .collect();
    Tensor::new([size, 1], data)
}

/// Single deterministic layer with `codes` codes trained on `samples`.
pub fn train_toy_vqvae(
    codes: usize,
    samples: &[f64],
    cfg: &ToyConfig,
    seed: u64,
) -> Result<ToyStack> {
    if samples.is_empty() {
        return Err(arg_err("train_toy_vqvae", "no samples"));
    }
    let mut layer = ToyLayer::new(1, codes, ToyQuantization::Deterministic, cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let log = layer.train(cfg, &mut rng, |r| batch_of(samples, cfg.batch_size, r))?;
    Ok(ToyStack {
        layers: vec![layer],
        loss_logs: vec![log],
    })
}

/// A `top_codes` layer trained to reconstruct the frozen base's `z_e`.
pub fn train_toy_hierarchy(
    base: &ToyStack,
    top_codes: usize,
    quantization: ToyQuantization,
    samples: &[f64],
    cfg: &ToyConfig,
    seed: u64,
) -> Result<ToyStack> {
    let [first] = base.layers.as_slice() else {
        return Err(arg_err(
            "train_toy_hierarchy",
            "base must be a single layer",
        ));
    };
    let mut top = ToyLayer::new(cfg.codebook_dim, top_codes, quantization, cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70b);
    let log = top.train(cfg, &mut rng, |r| {
        first.encode(&batch_of(samples, cfg.batch_size, r)?)
    })?;
    Ok(ToyStack {
        layers: vec![first.clone(), top],
        loss_logs: vec![base.loss_logs[0].clone(), log],
    })
}

/// Reconstruction mass per mode window and outside all windows.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeCoverageReport {
    pub per_mode: Vec<f64>,
    pub gap_mass: f64,
    pub modes_occupied: usize,
}

impl ModeCoverageReport {
    pub fn from_values(
        values: &[f64],
        dist: &ToyDistribution,
        window_stds: f64,
        occupancy: f64,
    ) -> Self {
        let half = window_stds * dist.std;
        let mut counts = vec![0usize; dist.means.len()];
        let mut gap = 0usize;
        for &v in values {
            match dist.means.iter().position(|m| (v - m).abs() <= half) {
                Some(k) => counts[k] += 1,
                None => gap += 1,
            }
        }
        let n = values.len().max(1) as f64;
        let per_mode: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        Self {
            modes_occupied: per_mode.iter().filter(|&&m| m > occupancy).count(),
            per_mode,
            gap_mass: gap as f64 / n,
        }
    }

    pub fn max_share(&self) -> f64 {
        self.per_mode.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_line(&self) -> String {
        let masses: Vec<String> = self.per_mode.iter().map(|m| format!("{m:.4}")).collect();
        format!(
            "per_mode={} gap_mass={:.4} modes_occupied={}",
            masses.join(","),
            self.gap_mass,
            self.modes_occupied
        )
    }
}

/// Reconstructs `n` fresh samples through `stack` and bins them.
pub fn evaluate_coverage(
    stack: &ToyStack,
    mode: DecodeMode,
    n: usize,
    seed: u64,
    cfg: &ToyConfig,
) -> Result<ModeCoverageReport> {
    let values = reconstruct_fresh(stack, mode, n, seed, cfg)?;
    Ok(ModeCoverageReport::from_values(
        &values,
        &cfg.dist,
        cfg.window_stds,
        cfg.occupancy,
    ))
}

/// Reconstructions of `n` fresh samples.
pub fn reconstruct_fresh(
    stack: &ToyStack,
    mode: DecodeMode,
    n: usize,
    seed: u64,
    cfg: &ToyConfig,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(arg_err("evaluate_coverage", "n must be ≥ 1"));
    }
    let x = sample_toy(&cfg.dist, n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let codes = stack.compress(&x, mode, &mut rng)?;
    stack.reconstruct(&codes, mode, &mut rng)
}

/// `bin_center density` lines over `[lo, hi)`, normalised so the
/// histogram integrates to the in-range fraction.
pub fn histogram_table(values: &[f64], lo: f64, hi: f64, bins: usize) -> String {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v < hi {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let n = values.len().max(1) as f64;
    let mut s = String::from("# bin_center density\n");
    for (i, c) in counts.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:.6} {:.6}",
            lo + (i as f64 + 0.5) * width,
            *c as f64 / (n * width)
        );
    }
    s
}

/// The exact mixture density on the same grid as [`histogram_table`].
pub fn density_table(dist: &ToyDistribution, lo: f64, hi: f64, bins: usize) -> String {
    let width = (hi - lo) / bins as f64;
    let mut s = String::from("# bin_center density\n");
    for i in 0..bins {
        let x = lo + (i as f64 + 0.5) * width;
        let _ = writeln!(s, "{x:.6} {:.6}", dist.density(x));
    }
    s
}

/// The four systems of one seed and whether each shows its expected regime.
#[derive(Clone, Debug)]
pub struct ToySeedOutcome {
    pub seed: u64,
    pub four_code: ModeCoverageReport,
    pub two_code: ModeCoverageReport,
    pub deterministic: ModeCoverageReport,
    pub stochastic: ModeCoverageReport,
    pub stochastic_posterior_entropy: f64,
    /// Reconstructions behind each report, in the same order.
    pub values: [Vec<f64>; 4],
}

impl ToySeedOutcome {
    /// 4 codes: no gap, every mode. 2 codes: covering. Argmax hierarchy:
    /// no gap, at most two modes. Sampling hierarchy: no gap, every mode,
    /// none dominant.
    pub fn regimes(&self, cfg: &ToyConfig) -> [bool; 4] {
        let modes = cfg.dist.means.len();
        [
            self.four_code.gap_mass < cfg.max_gap && self.four_code.modes_occupied == modes,
            self.two_code.gap_mass > cfg.min_covering_gap,
            self.deterministic.gap_mass < cfg.max_gap && self.deterministic.modes_occupied <= 2,
            self.stochastic.gap_mass < cfg.max_gap
                && self.stochastic.modes_occupied == modes
                && self.stochastic.max_share() < cfg.max_window_share,
        ]
    }

    pub fn passes(&self, cfg: &ToyConfig) -> bool {
        self.regimes(cfg).iter().all(|&r| r)
    }
}

/// Trains and evaluates all four systems for one seed.
pub fn run_toy_seed(cfg: &ToyConfig, seed: u64) -> Result<ToySeedOutcome> {
    let samples = sample_toy(&cfg.dist, cfg.train_samples, seed);
    let four = train_toy_vqvae(4, &samples, cfg, seed.wrapping_mul(4).wrapping_add(1))?;
    let two = train_toy_vqvae(2, &samples, cfg, seed.wrapping_mul(4).wrapping_add(2))?;
    let det = train_toy_hierarchy(
        &four,
        2,
        ToyQuantization::Deterministic,
        &samples,
        cfg,
        seed.wrapping_mul(4).wrapping_add(3),
    )?;
    let sto = train_toy_hierarchy(
        &four,
        2,
        ToyQuantization::Stochastic,
        &samples,
        cfg,
        seed.wrapping_mul(4).wrapping_add(3),
    )?;
    let eval_seed = seed.wrapping_add(1_000_003);
    let runs = [
        (&four, DecodeMode::Argmax),
        (&two, DecodeMode::Argmax),
        (&det, DecodeMode::Argmax),
        (&sto, DecodeMode::Stochastic),
    ];
    let values: Vec<Vec<f64>> = runs
        .iter()
        .map(|(s, m)| reconstruct_fresh(s, *m, cfg.eval_samples, eval_seed, cfg))
        .collect::<Result<_>>()?;
    let report = |v: &Vec<f64>| {
        ModeCoverageReport::from_values(v, &cfg.dist, cfg.window_stds, cfg.occupancy)
    };
    let held_out = sample_toy(&cfg.dist, 2000, eval_seed ^ 1);
    Ok(ToySeedOutcome {
        seed,
        four_code: report(&values[0]),
        two_code: report(&values[1]),
        deterministic: report(&values[2]),
        stochastic: report(&values[3]),
        stochastic_posterior_entropy: sto.decoded_posterior_entropy(&held_out)?,
        values: values.try_into().expect("four runs"),
    })
}
