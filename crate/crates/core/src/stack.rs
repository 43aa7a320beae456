//! A greedily trained hierarchy of [`HqaLayer`]s.
//!
//! Layer `l` (1-based) consumes the continuous `z_e` of layer `l − 1`; no
//! quantization happens on the way up. Only the indices of the transmitted
//! layer leave the encoder, and reconstruction walks back down, re-sampling
//! a hard code at every layer boundary.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{arg_err, HqaError, Result};
use crate::kernels;
use crate::layer::{HqaLayer, LayerConfig, LayerVariant, LossBreakdown, ReconTarget, Target};
use crate::quantizer::{sample_categorical, ResetEvent};
use crate::real::Real;
use crate::tensor::Tensor;

/// How a hard code is chosen from a posterior at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Sample from the posterior.
    #[default]
    Stochastic,
    /// Most probable code; seed-independent.
    Argmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReconstructionOptions {
    pub mode: DecodeMode,
    pub seed: u64,
}

impl ReconstructionOptions {
    pub fn argmax() -> Self {
        Self {
            mode: DecodeMode::Argmax,
            seed: 0,
        }
    }

    pub fn stochastic(seed: u64) -> Self {
        Self {
            mode: DecodeMode::Stochastic,
            seed,
        }
    }
}

/// One layer's configuration within a greedy training plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub config: LayerConfig,
    pub variant: LayerVariant,
}

/// Random state of the layer currently being trained. Batch order is a
/// pure function of `batch_seed` and the step, so this plus the layer's
/// own state is enough to resume mid-layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainCursor {
    pub rng: ChaCha8Rng,
    pub batch_seed: u64,
}

impl TrainCursor {
    /// Fresh cursor for `layer` (1-based) under the run seed.
    pub fn for_layer(seed: u64, layer: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * layer as u64 + 1);
        let batch_seed = rng.next_u64();
        Self { rng, batch_seed }
    }
}

/// Weight-initialisation stream for `layer`, independent of its cursor.
pub fn init_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * layer as u64);
    rng
}

/// Progress notifications from [`train_greedy`]. Returning an error from
/// the callback stops training.
pub enum TrainEvent<'a, T> {
    Step {
        layer: usize,
        step: usize,
        loss: &'a LossBreakdown,
        reset: Option<ResetEvent>,
        stack: &'a HqaStack<T>,
        cursor: &'a TrainCursor,
    },
    LayerDone {
        layer: usize,
        stack: &'a HqaStack<T>,
        cursor: &'a TrainCursor,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HqaStack<T = f32> {
    layers: Vec<HqaLayer<T>>,
    frozen: Vec<bool>,
}

impl<T: Real> HqaStack<T> {
    pub fn new() -> Self {
        Self {
            layers: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> Result<&HqaLayer<T>> {
        self.check_level(l)?;
        Ok(&self.layers[l - 1])
    }

    pub fn layers(&self) -> &[HqaLayer<T>] {
        &self.layers
    }

    pub fn is_frozen(&self, l: usize) -> Result<bool> {
        self.check_level(l)?;
        Ok(self.frozen[l - 1])
    }

    /// Freezes the top layer; a frozen layer never trains again.
    pub fn freeze_top(&mut self) {
        if let Some(f) = self.frozen.last_mut() {
            *f = true;
        }
    }

    fn check_level(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.layers.len() {
            return Err(arg_err(
                "HqaStack",
                format!("layer {l} not in 1..={}", self.layers.len()),
            ));
        }
        Ok(())
    }

    /// Appends a layer on top. The current top must be frozen, sizes must
    /// chain, and the first layer must reconstruct pixels.
    pub fn push(&mut self, layer: HqaLayer<T>, frozen: bool) -> Result<()> {
        let level = self.layers.len() + 1;
        let cfg = &layer.config;
        match self.layers.last() {
            None => {
                if layer.variant.recon_target != ReconTarget::PixelMse {
                    return Err(HqaError::Config("layer 1 must reconstruct pixels".into()));
                }
            }
            Some(below) => {
                if !self.frozen[level - 2] {
                    return Err(arg_err(
                        "HqaStack::push",
                        format!("layer {} is still training", level - 1),
                    ));
                }
                let b = &below.config;
                if cfg.input_size != b.output_size() || cfg.input_channels != b.codebook_dim {
                    return Err(HqaError::Config(format!(
                        "layer {level}: input {}×{}² does not match layer {} latent {}×{}²",
                        cfg.input_channels,
                        cfg.input_size,
                        level - 1,
                        b.codebook_dim,
                        b.output_size()
                    )));
                }
                match layer.variant.recon_target {
                    ReconTarget::PixelMse => {
                        return Err(HqaError::Config(format!(
                            "layer {level}: only layer 1 reconstructs pixels"
                        )))
                    }
                    ReconTarget::IndexCrossEntropy if cfg.target_codes != b.codebook_size => {
                        return Err(HqaError::Config(format!(
                            "layer {level}: target_codes {} but layer {} has {} codes",
                            cfg.target_codes,
                            level - 1,
                            b.codebook_size
                        )))
                    }
                    _ => {}
                }
            }
        }
        self.layers.push(layer);
        self.frozen.push(frozen);
        Ok(())
    }

    /// Encoder composition `1..=l`, eval mode, no quantization.
    pub fn encode_to(&self, x: &Tensor<T>, l: usize) -> Result<Tensor<T>> {
        self.check_level(l)?;
        self.input_of(x, l)
            .and_then(|z| self.layers[l - 1].encode(&z))
    }

    /// Input seen by layer `l`: the pixels for `l = 1`, else `z_e` of `l − 1`.
    fn input_of(&self, x: &Tensor<T>, l: usize) -> Result<Tensor<T>> {
        let mut z = x.clone();
        for layer in &self.layers[..l - 1] {
            z = layer.encode(&z)?;
        }
        Ok(z)
    }

    /// Hard codes for a `z_e` at layer `l`, in `[B,h,w]` order.
    pub fn quantize<R: Rng>(
        &self,
        z_e: &Tensor<T>,
        l: usize,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let post = self.layer(l)?.posterior(z_e)?;
        Ok(pick(&post.probs, mode, rng))
    }

    /// The transmitted indices for `x` at layer `l`.
    pub fn compress<R: Rng>(
        &self,
        x: &Tensor<T>,
        l: usize,
        mode: DecodeMode,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let z = self.encode_to(x, l)?;
        self.quantize(&z, l, mode, rng)
    }

    /// Bits transmitted per image at layer `l`.
    pub fn rate_bits(&self, l: usize) -> Result<u64> {
        let layer = self.layer(l)?;
        let s = layer.config.output_size() as u64;
        Ok(s * s * layer.codebook.bits() as u64)
    }

    /// Decodes `[batch,h,w]` indices of layer `l` down to pixels. Every
    /// intermediate latent is re-quantized hard at the layer below.
    pub fn reconstruct(
        &self,
        indices: &[usize],
        batch: usize,
        l: usize,
        opts: &ReconstructionOptions,
    ) -> Result<Tensor<T>> {
        self.check_level(l)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = indices.to_vec();
        for level in (1..=l).rev() {
            let layer = &self.layers[level - 1];
            let z_q = layer.lookup(&idx, batch)?;
            let out = layer.decode(&z_q)?;
            if level == 1 {
                return Ok(out);
            }
            let below = level - 1;
            idx = match layer.variant.recon_target {
                ReconTarget::IndexCrossEntropy => {
                    let n = out.shape()[1];
                    let mut rows = kernels::nchw_to_rows(out.data(), out.shape());
                    rows.chunks_exact_mut(n).for_each(softmax_in_place);
                    pick(
                        &Tensor::new([rows.len() / n, n], rows)?,
                        opts.mode,
                        &mut rng,
                    )
                }
                _ => self.quantize(&out, below, opts.mode, &mut rng)?,
            };
        }
        unreachable!("loop returns at level 1")
    }

    /// `steps` intermediate frames between `x1` and `x2` in layer-`l` `z_e`
    /// space, bracketed by the two endpoints, each quantized then decoded.
    pub fn interpolate(
        &self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
        steps: usize,
        l: usize,
        opts: &ReconstructionOptions,
    ) -> Result<Vec<Tensor<T>>> {
        if steps == 0 {
            return Err(arg_err("interpolate", "steps must be ≥ 1"));
        }
        if x1.shape() != x2.shape() {
            return Err(arg_err("interpolate", "endpoint shapes differ"));
        }
        let batch = x1.shape()[0];
        let (z1, z2) = (self.encode_to(x1, l)?, self.encode_to(x2, l)?);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..=steps + 1)
            .map(|i| {
                let t = T::c(i as f64 / (steps + 1) as f64);
                let data = z1
                    .data()
                    .iter()
                    .zip(z2.data())
                    .map(|(&a, &b)| a + t * (b - a))
                    .collect();
                let z = Tensor::new(z1.shape(), data)?;
                let idx = self.quantize(&z, l, opts.mode, &mut rng)?;
                self.reconstruct(&idx, batch, l, opts)
            })
            .collect()
    }

    /// One decode per code of a 1×1 layer, stacked along the batch axis.
    pub fn enumerate_codes(&self, l: usize, opts: &ReconstructionOptions) -> Result<Tensor<T>> {
        let layer = self.layer(l)?;
        if layer.config.output_size() != 1 {
            let s = layer.config.output_size();
            return Err(arg_err(
                "enumerate_codes",
                format!("layer {l} grid is {s}×{s}, not 1×1"),
            ));
        }
        let n = layer.codebook.size();
        self.reconstruct(&(0..n).collect::<Vec<_>>(), n, l, opts)
    }

    /// `n` stochastic decodes of the same transmitted (argmax) indices; decode
    /// `i` uses seed `seed + i`.
    pub fn stochastic_decodes(
        &self,
        x: &Tensor<T>,
        l: usize,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Tensor<T>>> {
        if n == 0 {
            return Err(arg_err("stochastic_decodes", "n must be ≥ 1"));
        }
        let mut unused = ChaCha8Rng::seed_from_u64(seed);
        let idx = self.compress(x, l, DecodeMode::Argmax, &mut unused)?;
        let batch = x.shape()[0];
        (0..n as u64)
            .map(|i| {
                self.reconstruct(
                    &idx,
                    batch,
                    l,
                    &ReconstructionOptions::stochastic(seed.wrapping_add(i)),
                )
            })
            .collect()
    }

    /// Runs the top layer from its recorded step to the end of its schedule.
    fn train_top<F>(
        &mut self,
        data: &Dataset<T>,
        cursor: &mut TrainCursor,
        on_event: &mut F,
    ) -> Result<()>
    where
        F: FnMut(TrainEvent<'_, T>) -> Result<()>,
    {
        let l = self.layers.len();
        if l == 0 || self.frozen[l - 1] {
            return Err(arg_err("train", "no unfrozen top layer"));
        }
        let (bs, total) = {
            let cfg = &self.layers[l - 1].config;
            (cfg.batch_size, cfg.training_steps)
        };
        let per_epoch = data.len() / bs;
        if per_epoch == 0 {
            return Err(arg_err(
                "train",
                format!("batch size {bs} exceeds {} samples", data.len()),
            ));
        }
        let needs_indices =
            self.layers[l - 1].variant.recon_target == ReconTarget::IndexCrossEntropy;
        let mut order: Option<(usize, Vec<usize>)> = None;
        for step in self.layers[l - 1].train_state.steps_done..total {
            let epoch = step / per_epoch;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, data.epoch_order(cursor.batch_seed, epoch as u64)));
            }
            let slot = (step % per_epoch) * bs;
            let idx = &order.as_ref().expect("set above").1[slot..slot + bs];
            let pixels = data.images.select_outer(idx);
            let input = self.input_of(&pixels, l)?;
            let lower = if needs_indices {
                // The layer below's transmitted codes are its posterior mode.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                Some(self.quantize(&input, l - 1, DecodeMode::Argmax, &mut rng)?)
            } else {
                None
            };
            let target = lower.as_deref().map_or(Target::Input, Target::Indices);
            let (loss, reset) =
                self.layers[l - 1].train_step(&input, target, step, &mut cursor.rng)?;
            on_event(TrainEvent::Step {
                layer: l,
                step,
                loss: &loss,
                reset,
                stack: self,
                cursor,
            })?;
        }
        self.freeze_top();
        on_event(TrainEvent::LayerDone {
            layer: l,
            stack: self,
            cursor,
        })
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn pick<T: Real, R: Rng>(probs: &Tensor<T>, mode: DecodeMode, rng: &mut R) -> Vec<usize> {
    let n = probs.shape()[1];
    probs
        .data()
        .chunks_exact(n)
        .map(|row| match mode {
            DecodeMode::Stochastic => sample_categorical(row, rng),
            DecodeMode::Argmax => {
                let mut best = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = k;
                    }
                }
                best
            }
        })
        .collect()
}

/// Trains `plans` greedily on top of `stack`, which may already hold
/// finished layers (resume). A partially trained unfrozen top layer
/// continues from `cursor`; every new layer draws its weights and cursor
/// from `seed` and its level alone, so resuming at a layer boundary
/// reproduces an uninterrupted run exactly.
pub fn train_greedy<T: Real, F>(
    mut stack: HqaStack<T>,
    plans: &[LayerPlan],
    data: &Dataset<T>,
    seed: u64,
    cursor: Option<TrainCursor>,
    mut on_event: F,
) -> Result<HqaStack<T>>
where
    F: FnMut(TrainEvent<'_, T>) -> Result<()>,
{
    if stack.len() > plans.len() {
        return Err(arg_err(
            "train_greedy",
            "stack has more layers than the plan",
        ));
    }
    for (i, (layer, plan)) in stack.layers.iter().zip(plans).enumerate() {
        if layer.config != plan.config || layer.variant != plan.variant {
            return Err(HqaError::Config(format!(
                "layer {} differs from the plan",
                i + 1
            )));
        }
    }
    let l = stack.len();
    if l > 0 && !stack.frozen[l - 1] {
        let mut cursor = match cursor {
            Some(c) => c,
            None if stack.layers[l - 1].train_state.steps_done == 0 => {
                TrainCursor::for_layer(seed, l)
            }
            None => {
                return Err(arg_err(
                    "train_greedy",
                    format!("layer {l} is mid-training but no cursor given"),
                ))
            }
        };
        stack.train_top(data, &mut cursor, &mut on_event)?;
    }
    for (i, plan) in plans.iter().enumerate().skip(stack.len()) {
        let level = i + 1;
        let layer = HqaLayer::new(plan.config, plan.variant, &mut init_rng(seed, level))?;
        stack.push(layer, false)?;
        let mut cursor = TrainCursor::for_layer(seed, level);
        stack.train_top(data, &mut cursor, &mut on_event)?;
    }
    Ok(stack)
}
