//! Distortion, code utilisation and a small probe classifier used to check
//! that reconstructions keep their class.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{BatchStream, Dataset};
use crate::error::{arg_err, dim_err, HqaError, Result};
use crate::kernels::ConvGeom;
use crate::optim::{radam_step, OptimizerState};
use crate::param::{fan_in_uniform, ParamId, ParamStore};
use crate::real::Real;
use crate::stack::{HqaStack, ReconstructionOptions};
use crate::tensor::Tensor;

/// Mean squared error per element.
pub fn distortion<T: Real>(originals: &Tensor<T>, reconstructions: &Tensor<T>) -> Result<f64> {
    let mut acc = DistortionAccumulator::default();
    acc.add(originals, reconstructions)?;
    Ok(acc.mean())
}

/// Streaming form of [`distortion`] over evaluation batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistortionAccumulator {
    sum: f64,
    count: u64,
}

impl DistortionAccumulator {
    pub fn add<T: Real>(
        &mut self,
        originals: &Tensor<T>,
        reconstructions: &Tensor<T>,
    ) -> Result<()> {
        if originals.shape() != reconstructions.shape() {
            return Err(dim_err(
                "distortion",
                format!("{:?} vs {:?}", originals.shape(), reconstructions.shape()),
            ));
        }
        self.sum += originals
            .data()
            .iter()
            .zip(reconstructions.data())
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>();
        self.count += originals.len() as u64;
        Ok(())
    }

    /// Zero when nothing has been added.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Occurrence count of each code.
pub fn code_histogram(indices: &[usize], codebook_size: usize) -> Result<Vec<u64>> {
    let mut h = vec![0u64; codebook_size];
    for &i in indices {
        *h.get_mut(i).ok_or(HqaError::Range {
            index: i,
            size: codebook_size,
        })? += 1;
    }
    Ok(h)
}

/// `exp(H)` of the normalised histogram, in `[1, N]`. An empty histogram
/// counts as a single code.
pub fn codebook_perplexity(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let t = total as f64;
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

/// Probe architecture and training schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub channels: (usize, usize),
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Largest clean test error, in percent, before the probe may be used.
    pub max_clean_error: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            channels: (16, 32),
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-3,
            max_clean_error: 5.0,
        }
    }
}

/// Two stride-2 convolutions with ReLU and a linear head over ten classes.
/// It only scores reconstructions once [`ProbeClassifier::certify`] has
/// measured its clean error within the gate.
#[derive(Clone, Debug)]
pub struct ProbeClassifier<T = f32> {
    pub params: ParamStore<T>,
    pub config: ProbeConfig,
    input_size: usize,
    conv: [(ParamId, ParamId); 2],
    head: (ParamId, ParamId),
    clean_error: Option<f64>,
}

const CLASSES: usize = 10;
const STRIDE2: ConvGeom = ConvGeom::new(2, 1, 1);

impl<T: Real> ProbeClassifier<T> {
    pub fn new(input_size: usize, config: ProbeConfig, seed: u64) -> Result<Self> {
        if !input_size.is_multiple_of(4) || input_size == 0 {
            return Err(arg_err(
                "ProbeClassifier",
                format!("input size {input_size} not divisible by 4"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (c1, c2) = config.channels;
        let mut conv_unit = |name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let w = params.add(
                format!("{name}.weight"),
                fan_in_uniform(&[cout, cin, 3, 3], cin * 9, rng),
            );
            let b = params.add(
                format!("{name}.bias"),
                fan_in_uniform(&[cout], cin * 9, rng),
            );
            (w, b)
        };
        let conv = [
            conv_unit("conv1", 1, c1, &mut rng),
            conv_unit("conv2", c1, c2, &mut rng),
        ];
        let flat = c2 * (input_size / 4) * (input_size / 4);
        let head = (
            params.add(
                "head.weight",
                fan_in_uniform(&[flat, CLASSES], flat, &mut rng),
            ),
            params.add("head.bias", fan_in_uniform(&[CLASSES], flat, &mut rng)),
        );
        Ok(Self {
            params,
            config,
            input_size,
            conv,
            head,
            clean_error: None,
        })
    }

    fn logits(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<crate::autodiff::Var> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(dim_err(
                "probe",
                format!("images {s:?}, expected [B,1,{0},{0}]", self.input_size),
            ));
        }
        let mut h = tape.constant(images.clone());
        for &(w, b) in &self.conv {
            let (w, b) = (tape.param(&self.params, w), tape.param(&self.params, b));
            h = tape.conv2d(h, w, Some(b), STRIDE2)?;
            h = tape.relu(h);
        }
        let flat = tape.shape(h)[1..].iter().product::<usize>();
        let h = tape.reshape(h, &[s[0], flat])?;
        let (w, b) = (
            tape.param(&self.params, self.head.0),
            tape.param(&self.params, self.head.1),
        );
        let z = tape.matmul(h, w)?;
        tape.add_row_bias(z, b)
    }

    /// Trains on labelled images; returns the per-step training loss.
    pub fn train(&mut self, data: &Dataset<T>, seed: u64) -> Result<Vec<f64>> {
        let labels_present = data.labels.is_some();
        if !labels_present {
            return Err(arg_err("ProbeClassifier::train", "dataset has no labels"));
        }
        let mut opt = OptimizerState::new(&self.params, self.config.learning_rate);
        let batches = BatchStream::new(data, self.config.batch_size, seed)?;
        let mut losses = Vec::with_capacity(self.config.steps);
        for batch in batches.take(self.config.steps) {
            let targets: Vec<usize> = batch
                .labels
                .expect("checked")
                .iter()
                .map(|&l| l as usize)
                .collect();
            let mut tape = Tape::new();
            let logits = self.logits(&mut tape, &batch.images)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            losses.push(tape.value(loss).item().f64());
            self.params.zero_grad();
            tape.backward(loss, &mut self.params)?;
            radam_step(&mut self.params, &mut opt, self.config.learning_rate);
        }
        self.clean_error = None;
        Ok(losses)
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(images.shape().first().copied().unwrap_or(0));
        let n = images.shape().first().copied().unwrap_or(0);
        for start in (0..n).step_by(256) {
            let chunk = images.slice_outer(start, (start + 256).min(n));
            let mut tape = Tape::new();
            let logits = self.logits(&mut tape, &chunk)?;
            out.extend(tape.value(logits).data().chunks_exact(CLASSES).map(|row| {
                (0..CLASSES).fold(0, |best, k| if row[k] > row[best] { k } else { best }) as u8
            }));
        }
        Ok(out)
    }

    /// Percent of `images` whose predicted class differs from `labels`.
    pub fn error_percent(&self, images: &Tensor<T>, labels: &[u8]) -> Result<f64> {
        let pred = self.predict(images)?;
        if pred.len() != labels.len() || labels.is_empty() {
            return Err(dim_err(
                "classify_error",
                format!("{} images, {} labels", pred.len(), labels.len()),
            ));
        }
        let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
        Ok(100.0 * wrong as f64 / labels.len() as f64)
    }

    /// Measures the clean error and enables [`Self::classify_error`] when it
    /// is within the gate.
    pub fn certify(&mut self, clean_images: &Tensor<T>, labels: &[u8]) -> Result<f64> {
        let err = self.error_percent(clean_images, labels)?;
        if err > self.config.max_clean_error {
            self.clean_error = None;
            return Err(HqaError::Gate(format!(
                "probe clean error {err:.2}% exceeds {:.2}%",
                self.config.max_clean_error
            )));
        }
        self.clean_error = Some(err);
        Ok(err)
    }

    pub fn clean_error(&self) -> Option<f64> {
        self.clean_error
    }

    /// Error percent on reconstructions; refuses until certified.
    pub fn classify_error(&self, reconstructions: &Tensor<T>, labels: &[u8]) -> Result<f64> {
        if self.clean_error.is_none() {
            return Err(HqaError::Gate(
                "probe classifier has not passed its clean-error gate".into(),
            ));
        }
        self.error_percent(reconstructions, labels)
    }
}

/// Evaluation of one layer of a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub layer: usize,
    pub rate_bits: u64,
    pub distortion_mse: f64,
    pub codebook_perplexity: f64,
    /// Percent, when a certified probe was supplied.
    pub classification_error: Option<f64>,
}

impl EvalReport {
    /// `key=value` pairs separated by spaces.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "layer={} rate_bits={} distortion_mse={:.6} codebook_perplexity={:.3}",
            self.layer, self.rate_bits, self.distortion_mse, self.codebook_perplexity
        );
        if let Some(e) = self.classification_error {
            let _ = write!(s, " classification_error={e:.2}");
        }
        s
    }
}

/// Tab-separated table with a header row; missing errors print as `-`.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut s = String::from(
        "layer\trate_bits\tdistortion_mse\tcodebook_perplexity\tclassification_error\n",
    );
    for r in reports {
        let err = r
            .classification_error
            .map_or("-".to_string(), |e| format!("{e:.4}"));
        let _ = writeln!(
            s,
            "{}\t{}\t{:.8}\t{:.4}\t{}",
            r.layer, r.rate_bits, r.distortion_mse, r.codebook_perplexity, err
        );
    }
    s
}

/// Compresses and reconstructs every image of `data` at each layer in
/// `layers`. Perplexity is over the transmitted indices.
pub fn evaluate_stack<T: Real>(
    stack: &HqaStack<T>,
    data: &Dataset<T>,
    layers: &[usize],
    probe: Option<&ProbeClassifier<T>>,
    opts: &ReconstructionOptions,
    batch_size: usize,
) -> Result<Vec<EvalReport>> {
    let labels = match probe {
        Some(p) => {
            if p.clean_error().is_none() {
                return Err(HqaError::Gate(
                    "probe classifier has not passed its clean-error gate".into(),
                ));
            }
            Some(
                data.labels
                    .as_deref()
                    .ok_or_else(|| arg_err("evaluate_stack", "probe needs labels"))?,
            )
        }
        None => None,
    };
    let batches = data.batches(batch_size, 0, 0, false)?;
    let mut reports = Vec::with_capacity(layers.len());
    for &l in layers {
        let n = stack.layer(l)?.codebook.size();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut dist = DistortionAccumulator::default();
        let mut hist = vec![0u64; n];
        let mut recon_parts = Vec::new();
        for (b, idx) in batches.iter().enumerate() {
            let x = data.images.select_outer(idx);
            let codes = stack.compress(&x, l, opts.mode, &mut rng)?;
            for (h, c) in hist.iter_mut().zip(code_histogram(&codes, n)?) {
                *h += c;
            }
            let batch_opts = ReconstructionOptions {
                seed: opts.seed.wrapping_add(b as u64),
                ..*opts
            };
            let y = stack.reconstruct(&codes, idx.len(), l, &batch_opts)?;
            dist.add(&x, &y)?;
            if labels.is_some() {
                recon_parts.push(y);
            }
        }
        let classification_error = match (probe, labels) {
            (Some(p), Some(lab)) => {
                Some(p.classify_error(&Tensor::concat_outer(&recon_parts)?, lab)?)
            }
            _ => None,
        };
        reports.push(EvalReport {
            layer: l,
            rate_bits: stack.rate_bits(l)?,
            distortion_mse: dist.mean(),
            codebook_perplexity: codebook_perplexity(&hist),
            classification_error,
        });
    }
    Ok(reports)
}
