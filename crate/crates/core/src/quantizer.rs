//! Codebooks, the distance-based stochastic posterior, hard/soft/argmin
//! quantisation, the probabilistic loss terms, dead-code resetting and the
//! EMA k-means update used by the deterministic baseline.
//!
//! The posterior over codes for an encoder output `z` is
//! `q(k | z) ∝ exp(−½‖z − e_k‖²)`. The ½ is a fixed constant; any rescaling
//! of it is absorbed by the loss coefficients.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{gumbel_softmax_sample, Tape, Var};
use crate::error::{arg_err, dim_err, HqaError, Result};
use crate::kernels;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Running cluster statistics for the EMA k-means codebook update.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T = f32> {
    pub cluster_size: Vec<T>,
    pub embed_sum: Vec<T>,
    pub decay: f64,
    pub epsilon: f64,
}

impl<T: Real> EmaState<T> {
    pub const DEFAULT_DECAY: f64 = 0.99;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// Starts each code with unit mass located at its current embedding.
    pub fn new(embeddings: &Tensor<T>) -> Self {
        Self {
            cluster_size: vec![T::one(); embeddings.shape()[0]],
            embed_sum: embeddings.data().to_vec(),
            decay: Self::DEFAULT_DECAY,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }
}

/// `N × D` code embeddings. Learnable codebooks are trained by gradient;
/// the others carry EMA k-means state instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T = f32> {
    store: ParamStore<T>,
    id: ParamId,
    pub learnable: bool,
    pub ema: Option<EmaState<T>>,
}

impl<T: Real> Codebook<T> {
    pub fn from_embeddings(embeddings: Tensor<T>, learnable: bool) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(dim_err(
                "Codebook",
                format!("embeddings must be [N,D] with D>0, got {s:?}"),
            ));
        }
        if !s[0].is_power_of_two() {
            return Err(HqaError::Unsupported(format!(
                "codebook size {} is not a power of two",
                s[0]
            )));
        }
        if embeddings.data().iter().any(|v| v.is_nan()) {
            return Err(arg_err("Codebook", "embeddings contain NaN"));
        }
        let ema = (!learnable).then(|| EmaState::new(&embeddings));
        let mut store = ParamStore::new();
        let id = store.add("codebook", embeddings);
        store.get_mut(id).requires_grad = learnable;
        Ok(Self {
            store,
            id,
            learnable,
            ema,
        })
    }

    /// Uniform(−1/N, 1/N) initialisation.
    pub fn init_uniform<R: Rng>(
        size: usize,
        dim: usize,
        learnable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / size.max(1) as f64;
        let data = (0..size * dim)
            .map(|_| T::c(rng.random_range(-bound..bound)))
            .collect();
        Self::from_embeddings(Tensor::new([size, dim], data)?, learnable)
    }

    pub fn size(&self) -> usize {
        self.embeddings().shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings().shape()[1]
    }

    pub fn bits(&self) -> u32 {
        self.size().trailing_zeros()
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        self.store.tensor(self.id)
    }

    pub fn embeddings_mut(&mut self) -> &mut Tensor<T> {
        &mut self.store.get_mut(self.id).tensor
    }

    pub fn row(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.embeddings().data()[k * d..(k + 1) * d]
    }

    /// Backing store, so the optimizer and checkpoints can treat the
    /// embeddings like any other parameter.
    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Places the embeddings on `tape`; gradient reaches them only when the
    /// codebook is learnable.
    pub fn on_tape(&self, tape: &mut Tape<T>) -> Var {
        tape.param(&self.store, self.id)
    }

    fn check_rows(&self, z: &Tensor<T>, op: &'static str) -> Result<usize> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.dim() {
            return Err(arg_err(
                op,
                format!("z_e rows {s:?} do not match codebook dim {}", self.dim()),
            ));
        }
        Ok(s[0])
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor<T>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.size()) {
            return Err(HqaError::Range {
                index: bad,
                size: self.size(),
            });
        }
        Ok(self.embeddings().select_outer(indices))
    }
}

/// `q(k | z_e)` for every row of `z_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDistribution<T = f32> {
    /// `[positions, N]`, rows sum to one.
    pub probs: Tensor<T>,
    /// `−½‖z_e − e_k‖²`, the unnormalised log-probabilities.
    pub logits: Tensor<T>,
}

impl<T: Real> PosteriorDistribution<T> {
    pub fn positions(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn codes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, p: usize) -> &[T] {
        let n = self.codes();
        &self.probs.data()[p * n..(p + 1) * n]
    }

    /// Builds a posterior directly from probabilities (e.g. one-hot rows).
    pub fn from_probs(probs: Tensor<T>) -> Result<Self> {
        if probs.ndim() != 2 {
            return Err(dim_err(
                "PosteriorDistribution",
                "probs must be [positions, N]",
            ));
        }
        let logits = probs.map(|p| p.ln());
        Ok(Self { probs, logits })
    }

    /// Index of the most probable code per row, ties to the lowest index.
    pub fn mode(&self) -> Vec<usize> {
        let n = self.codes();
        self.probs
            .data()
            .chunks_exact(n)
            .map(|row| argmax_first(row))
            .collect()
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

fn argmin_first<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = k;
        }
    }
    best
}

/// Squared distances `[positions, N]` between rows of `z_e` and every code.
pub fn sq_distances<T: Real>(z_e: &Tensor<T>, codebook: &Codebook<T>) -> Result<Tensor<T>> {
    let p = codebook.check_rows(z_e, "sq_distances")?;
    let d = kernels::pairwise_sq_dist(z_e.data(), codebook.embeddings().data(), codebook.dim());
    Tensor::new([p, codebook.size()], d)
}

/// Posterior with logits divided by `temperature`; `1.0` is the plain posterior.
pub fn posterior_tempered<T: Real>(
    z_e: &Tensor<T>,
    codebook: &Codebook<T>,
    temperature: f64,
) -> Result<PosteriorDistribution<T>> {
    if !(temperature > 0.0) {
        return Err(arg_err("posterior", "temperature must be > 0"));
    }
    let d = sq_distances(z_e, codebook)?;
    let scale = T::c(-0.5 / temperature);
    let logits = d.map(|v| v * scale);
    let probs = Tensor::new(
        logits.shape().to_vec(),
        kernels::softmax_rows(logits.data(), codebook.size()),
    )?;
    Ok(PosteriorDistribution { probs, logits })
}

pub fn posterior<T: Real>(
    z_e: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<PosteriorDistribution<T>> {
    posterior_tempered(z_e, codebook, 1.0)
}

/// Relaxed one-hot sample per row, mixed into a convex combination of codes.
pub fn quantize_soft<T: Real, R: Rng>(
    posterior: &PosteriorDistribution<T>,
    codebook: &Codebook<T>,
    tau: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if posterior.codes() != codebook.size() {
        return Err(dim_err(
            "quantize_soft",
            "posterior width differs from codebook size",
        ));
    }
    let soft = gumbel_softmax_sample(&posterior.logits, tau, rng)?;
    mix_codes(&soft, codebook)
}

/// `weights [P,N] @ embeddings [N,D]`.
pub fn mix_codes<T: Real>(weights: &Tensor<T>, codebook: &Codebook<T>) -> Result<Tensor<T>> {
    let (p, n, d) = (weights.shape()[0], codebook.size(), codebook.dim());
    if weights.shape()[1] != n {
        return Err(dim_err(
            "mix_codes",
            "weight width differs from codebook size",
        ));
    }
    let mut out = vec![T::zero(); p * d];
    T::gemm(
        p,
        n,
        d,
        T::one(),
        weights.data(),
        false,
        codebook.embeddings().data(),
        false,
        T::zero(),
        &mut out,
    );
    Tensor::new([p, d], out)
}

/// Samples one code per row from the categorical posterior.
pub fn quantize_hard<T: Real, R: Rng>(
    posterior: &PosteriorDistribution<T>,
    codebook: &Codebook<T>,
    rng: &mut R,
) -> Result<(Vec<usize>, Tensor<T>)> {
    if posterior.codes() != codebook.size() {
        return Err(dim_err(
            "quantize_hard",
            "posterior width differs from codebook size",
        ));
    }
    let indices: Vec<usize> = (0..posterior.positions())
        .map(|p| sample_categorical(posterior.row(p), rng))
        .collect();
    let z_q = codebook.lookup(&indices)?;
    Ok((indices, z_q))
}

pub fn sample_categorical<T: Real, R: Rng>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().map(|p| p.f64()).sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, p) in probs.iter().enumerate() {
        let p = p.f64();
        if p > 0.0 {
            last_positive = k;
            acc += p;
            if target < acc {
                return k;
            }
        }
    }
    last_positive
}

/// Nearest code per row; ties go to the lowest index.
pub fn quantize_argmin<T: Real>(
    z_e: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<(Vec<usize>, Tensor<T>)> {
    let d = sq_distances(z_e, codebook)?;
    let indices: Vec<usize> = d
        .data()
        .chunks_exact(codebook.size())
        .map(argmin_first)
        .collect();
    let z_q = codebook.lookup(&indices)?;
    Ok((indices, z_q))
}

/// Linear temperature decay from `initial` to `final_tau` over `total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub final_tau: f64,
    pub total_steps: usize,
}

impl TemperatureSchedule {
    pub const CELEBA_INITIAL: f64 = 0.4;
    pub const MNIST_INITIAL: f64 = 0.66;
    pub const FINAL: f64 = 0.01;

    pub fn new(initial: f64, total_steps: usize) -> Self {
        Self {
            initial,
            final_tau: Self::FINAL,
            total_steps,
        }
    }

    pub fn temperature_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(arg_err(
                "temperature_at",
                format!("step {step} beyond {} total steps", self.total_steps),
            ));
        }
        if self.total_steps == 0 {
            return Ok(self.final_tau);
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.initial + (self.final_tau - self.initial) * frac)
    }
}

/// Mean over positions of `Σ_k p log p` (the negative entropy), with
/// `0 · log 0 = 0`.
pub fn entropy_loss<T: Real>(posterior: &PosteriorDistribution<T>) -> T {
    let n = posterior.codes();
    let logp = kernels::log_softmax_rows(posterior.logits.data(), n);
    let mut total = T::zero();
    for (pr, lr) in posterior
        .probs
        .data()
        .chunks_exact(n)
        .zip(logp.chunks_exact(n))
    {
        for (&p, &l) in pr.iter().zip(lr) {
            if p > T::zero() {
                total += p * l;
            }
        }
    }
    total / T::c(posterior.positions().max(1) as f64)
}

/// Mean over positions of `Σ_k q(k|z) ‖z − e_k‖²`.
pub fn commitment_loss<T: Real>(
    posterior: &PosteriorDistribution<T>,
    z_e: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<T> {
    let d = sq_distances(z_e, codebook)?;
    if d.shape() != posterior.probs.shape() {
        return Err(dim_err(
            "commitment_loss",
            "posterior and z_e disagree on positions",
        ));
    }
    let mut total = T::zero();
    for (&p, &dist) in posterior.probs.data().iter().zip(d.data()) {
        total += p * dist;
    }
    Ok(total / T::c(posterior.positions().max(1) as f64))
}

/// Posterior quantities recorded on a tape during training.
#[derive(Clone, Copy, Debug)]
pub struct TapePosterior {
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

pub fn posterior_on_tape<T: Real>(
    tape: &mut Tape<T>,
    z_rows: Var,
    codes: Var,
) -> Result<TapePosterior> {
    let logits = tape.neg_half_sq_dist(z_rows, codes)?;
    let probs = tape.softmax(logits);
    let log_probs = tape.log_softmax(logits);
    Ok(TapePosterior {
        logits,
        probs,
        log_probs,
    })
}

pub fn entropy_on_tape<T: Real>(tape: &mut Tape<T>, post: &TapePosterior) -> Result<Var> {
    let positions = tape.shape(post.probs)[0].max(1);
    let plogp = tape.mul(post.probs, post.log_probs)?;
    let s = tape.sum(plogp);
    Ok(tape.scale(s, T::one() / T::c(positions as f64)))
}

/// Expected squared distance, using `‖z − e‖² = −2 · logit`.
pub fn commitment_on_tape<T: Real>(tape: &mut Tape<T>, post: &TapePosterior) -> Result<Var> {
    let positions = tape.shape(post.probs)[0].max(1);
    let weighted = tape.mul(post.probs, post.logits)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, T::c(-2.0 / positions as f64)))
}

/// Code-usage window for dead-code resetting.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageAccumulator {
    pub counts: Vec<u64>,
    pub batches_seen: usize,
    pub window_batches: usize,
    pub reset_threshold: f64,
    pub active_fraction: f64,
    pub perturbation_scale: f64,
    pub enabled: bool,
}

/// A code moved next to a heavily used one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResetEvent {
    pub reset: usize,
    pub donor: usize,
}

impl UsageAccumulator {
    pub fn new(codes: usize) -> Self {
        Self {
            counts: vec![0; codes],
            batches_seen: 0,
            window_batches: 20,
            reset_threshold: 0.03,
            active_fraction: 0.75,
            perturbation_scale: 0.01,
            enabled: true,
        }
    }

    pub fn disabled(codes: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(codes)
        }
    }
}

/// Records one batch of code assignments. Every `window_batches` calls the
/// least-used code is moved onto the most-used one plus N(0, σ²) noise per
/// dimension when its count is below `reset_threshold` of the maximum, as
/// long as `step` lies inside the first `active_fraction` of training.
pub fn observe_and_maybe_reset<T: Real, R: Rng>(
    acc: &mut UsageAccumulator,
    indices: &[usize],
    codebook: &mut Codebook<T>,
    step: usize,
    total_steps: usize,
    rng: &mut R,
) -> Option<ResetEvent> {
    for &i in indices {
        acc.counts[i] += 1;
    }
    acc.batches_seen += 1;
    if acc.batches_seen < acc.window_batches {
        return None;
    }
    let event = inspect_window(acc, step, total_steps).map(|(reset, donor)| {
        let noise = Normal::new(0.0, acc.perturbation_scale).expect("finite std");
        let d = codebook.dim();
        let donor_row = codebook.row(donor).to_vec();
        let moved: Vec<T> = donor_row
            .iter()
            .map(|&v| v + T::c(noise.sample(rng)))
            .collect();
        codebook.embeddings_mut().data_mut()[reset * d..(reset + 1) * d].copy_from_slice(&moved);
        if let Some(ema) = &mut codebook.ema {
            let size = ema.cluster_size[donor];
            ema.cluster_size[reset] = size;
            for j in 0..d {
                ema.embed_sum[reset * d + j] = moved[j] * size;
            }
        }
        ResetEvent { reset, donor }
    });
    acc.counts.fill(0);
    acc.batches_seen = 0;
    event
}

fn inspect_window(
    acc: &UsageAccumulator,
    step: usize,
    total_steps: usize,
) -> Option<(usize, usize)> {
    if !acc.enabled || (step as f64) >= acc.active_fraction * total_steps as f64 {
        return None;
    }
    let most =
        (0..acc.counts.len()).fold(0, |b, k| if acc.counts[k] > acc.counts[b] { k } else { b });
    let least =
        (0..acc.counts.len()).fold(0, |b, k| if acc.counts[k] < acc.counts[b] { k } else { b });
    let (max, min) = (acc.counts[most] as f64, acc.counts[least] as f64);
    (most != least && min < acc.reset_threshold * max).then_some((least, most))
}

/// One online k-means step with exponential moving averages and Laplace
/// smoothing of the cluster sizes.
pub fn ema_kmeans_update<T: Real>(
    codebook: &mut Codebook<T>,
    z_e: &Tensor<T>,
    indices: &[usize],
) -> Result<()> {
    let (n, d) = (codebook.size(), codebook.dim());
    let p = codebook.check_rows(z_e, "ema_kmeans_update")?;
    if p != indices.len() {
        return Err(dim_err(
            "ema_kmeans_update",
            format!("{p} rows but {} indices", indices.len()),
        ));
    }
    let Some(ema) = codebook.ema.as_mut() else {
        return Err(HqaError::Unsupported(
            "EMA update on a gradient-trained codebook".into(),
        ));
    };
    let decay = T::c(ema.decay);
    let keep = T::one() - decay;
    let mut counts = vec![T::zero(); n];
    let mut sums = vec![T::zero(); n * d];
    for (row, &k) in z_e.data().chunks_exact(d).zip(indices) {
        if k >= n {
            return Err(HqaError::Range { index: k, size: n });
        }
        counts[k] += T::one();
        sums[k * d..(k + 1) * d]
            .iter_mut()
            .zip(row)
            .for_each(|(s, &v)| *s += v);
    }
    for k in 0..n {
        ema.cluster_size[k] = decay * ema.cluster_size[k] + keep * counts[k];
    }
    for j in 0..n * d {
        ema.embed_sum[j] = decay * ema.embed_sum[j] + keep * sums[j];
    }
    let total: T = ema.cluster_size.iter().copied().sum();
    let eps = T::c(ema.epsilon);
    let smoothed: Vec<T> = ema
        .cluster_size
        .iter()
        .map(|&c| (c + eps) / (total + T::c(n as f64) * eps) * total)
        .collect();
    let sums = ema.embed_sum.clone();
    let data = codebook.embeddings_mut().data_mut();
    for k in 0..n {
        for j in 0..d {
            data[k * d + j] = sums[k * d + j] / smoothed[k];
        }
    }
    Ok(())
}
