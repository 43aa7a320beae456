//! Layer checkpoints and the stack manifest.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic "HQACKPT\0" | u32 format version | str producer version
//! [32] config digest | u32 layer | u8 scalar width | u8 frozen
//! str plan (TOML) | params | codebook | normaliser | train state | cursor
//! [32] SHA-256 of every preceding byte
//! ```
//!
//! `str` is a u32 length plus UTF-8 bytes; a tensor is a u8 rank, u32 dims
//! and raw values; optional blocks start with a u8 presence flag. Writing
//! is a pure function of the in-memory state, so load followed by save
//! reproduces the file byte for byte. Gradients are never stored.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::RunningNorm;
use crate::config::{hex, parse_hex32, LayerSection};
use crate::error::{HqaError, Result};
use crate::layer::{HqaLayer, TrainState};
use crate::optim::{OptimizerState, RAdamConfig};
use crate::param::ParamStore;
use crate::quantizer::{Codebook, EmaState, UsageAccumulator};
use crate::real::Real;
use crate::stack::{HqaStack, LayerPlan, TrainCursor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HQACKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const PRODUCER: &str = concat!("hqa-core ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_VERSION: u32 = 1;

/// One trained (or partially trained) layer plus what is needed to carry
/// on training it.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheckpoint<T = f32> {
    pub layer: usize,
    pub digest: [u8; 32],
    pub frozen: bool,
    pub state: HqaLayer<T>,
    /// Present while the layer is unfinished.
    pub cursor: Option<TrainCursor>,
}

fn corrupt(detail: impl Into<String>) -> HqaError {
    HqaError::Parse(format!("checkpoint: {}", detail.into()))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| corrupt(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn values<T: Real>(&mut self, v: &[T]) -> Result<()> {
        self.u32(v.len())?;
        for &x in v {
            x.write_le(&mut self.0);
        }
        Ok(())
    }
    fn tensor<T: Real>(&mut self, t: &Tensor<T>) -> Result<()> {
        self.u8(t.ndim() as u8);
        for &d in t.shape() {
            self.u32(d)?;
        }
        for &x in t.data() {
            x.write_le(&mut self.0);
        }
        Ok(())
    }
    fn optimizer<T: Real>(&mut self, o: &OptimizerState<T>) -> Result<()> {
        let c = &o.config;
        for v in [c.beta1, c.beta2, c.eps, c.rho_threshold, o.base_lr] {
            self.f64(v);
        }
        self.u64(o.step);
        self.u32(o.first.len())?;
        for (m, v) in o.first.iter().zip(&o.second) {
            self.values(m)?;
            self.values(v)?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(corrupt(format!("flag byte {b}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
    fn raw<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(
            n.checked_mul(T::BYTES)
                .ok_or_else(|| corrupt("length overflow"))?,
        )?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn values<T: Real>(&mut self) -> Result<Vec<T>> {
        let n = self.u32()?;
        self.raw(n)
    }
    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let data = self.raw(n.ok_or_else(|| corrupt("shape overflow"))?)?;
        Tensor::new(shape, data)
    }
    fn optimizer<T: Real>(&mut self) -> Result<OptimizerState<T>> {
        let [beta1, beta2, eps, rho_threshold, base_lr] = [
            self.f64()?,
            self.f64()?,
            self.f64()?,
            self.f64()?,
            self.f64()?,
        ];
        let step = self.u64()?;
        let slots = self.u32()?;
        let mut first = Vec::with_capacity(slots.min(1 << 16));
        let mut second = Vec::with_capacity(slots.min(1 << 16));
        for _ in 0..slots {
            first.push(self.values()?);
            second.push(self.values()?);
        }
        Ok(OptimizerState {
            config: RAdamConfig {
                beta1,
                beta2,
                eps,
                rho_threshold,
            },
            first,
            second,
            step,
            base_lr,
        })
    }
}

impl<T: Real> LayerCheckpoint<T> {
    pub fn plan(&self) -> LayerPlan {
        LayerPlan {
            config: self.state.config,
            variant: self.state.variant,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layer = &self.state;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION as usize)?;
        w.str(PRODUCER)?;
        w.0.extend_from_slice(&self.digest);
        w.u32(self.layer)?;
        w.u8(T::BYTES as u8);
        w.bool(self.frozen);
        let plan = toml::to_string(&LayerSection::from_plan(&self.plan()))
            .map_err(|e| corrupt(e.to_string()))?;
        w.str(&plan)?;

        w.u32(layer.params.len())?;
        for (_, p) in layer.params.iter() {
            w.str(&p.name)?;
            w.bool(p.requires_grad);
            w.tensor(&p.tensor)?;
        }

        let cb = &layer.codebook;
        w.bool(cb.learnable);
        w.bool(cb.store().iter().all(|(_, p)| p.requires_grad));
        w.tensor(cb.embeddings())?;
        w.bool(cb.ema.is_some());
        if let Some(e) = &cb.ema {
            w.values(&e.cluster_size)?;
            w.values(&e.embed_sum)?;
            w.f64(e.decay);
            w.f64(e.epsilon);
        }

        w.bool(layer.normalizer.is_some());
        if let Some(n) = &layer.normalizer {
            w.values(&n.mean)?;
            w.values(&n.var)?;
            w.f64(n.momentum);
            w.f64(n.eps);
        }

        let ts = &layer.train_state;
        w.u64(ts.steps_done as u64);
        w.optimizer(&ts.net_opt)?;
        w.optimizer(&ts.code_opt)?;
        let u = &ts.usage;
        w.u32(u.counts.len())?;
        for &c in &u.counts {
            w.u64(c);
        }
        w.u64(u.batches_seen as u64);
        w.u64(u.window_batches as u64);
        w.f64(u.reset_threshold);
        w.f64(u.active_fraction);
        w.f64(u.perturbation_scale);
        w.bool(u.enabled);

        w.bool(self.cursor.is_some());
        if let Some(c) = &self.cursor {
            w.0.extend_from_slice(&c.rng.get_seed());
            w.u64(c.rng.get_stream());
            w.0.extend_from_slice(&c.rng.get_word_pos().to_le_bytes());
            w.u64(c.batch_seed);
        }

        let sum = Sha256::digest(&w.0);
        w.0.extend_from_slice(&sum);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let _producer = r.str()?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let layer_index = r.u32()?;
        let width = r.u8()? as usize;
        if width != T::BYTES {
            return Err(corrupt(format!(
                "{width}-byte scalars, expected {}",
                T::BYTES
            )));
        }
        let frozen = r.bool()?;
        let section: LayerSection =
            toml::from_str(&r.str()?).map_err(|e| corrupt(e.to_string()))?;
        let plan = section_to_plan(&section)?;

        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let requires_grad = r.bool()?;
            let id = params.add(name, r.tensor()?);
            params.get_mut(id).requires_grad = requires_grad;
        }

        let learnable = r.bool()?;
        let codebook_grad = r.bool()?;
        let mut codebook = Codebook::from_embeddings(r.tensor()?, learnable)?;
        codebook.store_mut().set_requires_grad(codebook_grad);
        codebook.ema = if r.bool()? {
            Some(EmaState {
                cluster_size: r.values()?,
                embed_sum: r.values()?,
                decay: r.f64()?,
                epsilon: r.f64()?,
            })
        } else {
            None
        };

        let normalizer = if r.bool()? {
            Some(RunningNorm {
                mean: r.values()?,
                var: r.values()?,
                momentum: r.f64()?,
                eps: r.f64()?,
            })
        } else {
            None
        };

        let steps_done = r.u64()? as usize;
        let net_opt = r.optimizer()?;
        let code_opt = r.optimizer()?;
        let counts = (0..r.u32()?).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let usage = UsageAccumulator {
            counts,
            batches_seen: r.u64()? as usize,
            window_batches: r.u64()? as usize,
            reset_threshold: r.f64()?,
            active_fraction: r.f64()?,
            perturbation_scale: r.f64()?,
            enabled: r.bool()?,
        };
        check_slots(&net_opt, &params, "network")?;
        check_slots(&code_opt, codebook.store(), "codebook")?;

        let cursor = if r.bool()? {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            Some(TrainCursor {
                rng,
                batch_seed: r.u64()?,
            })
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }

        let train_state = TrainState {
            net_opt,
            code_opt,
            usage,
            steps_done,
        };
        let state = HqaLayer::from_parts(
            plan.config,
            plan.variant,
            params,
            codebook,
            normalizer,
            train_state,
        )?;
        Ok(Self {
            layer: layer_index,
            digest,
            frozen,
            state,
            cursor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_slots<T: Real>(o: &OptimizerState<T>, store: &ParamStore<T>, what: &str) -> Result<()> {
    let ok = o.first.len() == store.len()
        && store
            .iter()
            .zip(o.first.iter().zip(&o.second))
            .all(|((_, p), (m, v))| m.len() == p.tensor.len() && v.len() == p.tensor.len());
    if ok {
        Ok(())
    } else {
        Err(corrupt(format!(
            "{what} optimiser moments do not match the parameters"
        )))
    }
}

/// A stored section carries every derived field, so it resolves on its own.
fn section_to_plan(s: &LayerSection) -> Result<LayerPlan> {
    let (Some(input_size), Some(input_channels), Some(recon_target)) =
        (s.input_size, s.input_channels, s.recon_target)
    else {
        return Err(corrupt("plan lacks input geometry"));
    };
    Ok(LayerPlan {
        config: crate::layer::LayerConfig {
            input_size,
            input_channels,
            enc_layers: s.enc_layers,
            dec_layers: s.dec_layers,
            enc_hidden: s.enc_hidden,
            dec_hidden: s.dec_hidden,
            codebook_size: s.codebook_size,
            codebook_dim: s.codebook_dim,
            beta_entropy: s.beta_entropy,
            beta_commit: s.beta_commit,
            training_steps: s.training_steps,
            batch_size: s.batch_size,
            dropout: s.dropout,
            tau_initial: s.tau_initial,
            tau_final: s.tau_final,
            learning_rate: s.learning_rate,
            code_reset: s.code_reset,
            target_codes: s.target_codes.unwrap_or(0),
            normalize_input: s.normalize_input.unwrap_or(false),
        },
        variant: crate::layer::LayerVariant {
            quantization: s.quantization,
            recon_target,
            regularizers: s.regularizers,
        },
    })
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    /// Hex SHA-256 config digest, equal to the checkpoint header's.
    pub digest: String,
}

/// Ordered list of the layer checkpoints making up a stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub format: u32,
    #[serde(rename = "layer")]
    pub layers: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "stack.toml";

pub fn checkpoint_file_name(layer: usize) -> String {
    format!("layer{layer}.ckpt")
}

impl StackManifest {
    pub fn new() -> Self {
        Self {
            format: MANIFEST_VERSION,
            layers: Vec::new(),
        }
    }

    /// Adds or replaces the row for `layer`; rows above it are dropped.
    pub fn record(&mut self, layer: usize, digest: &[u8; 32]) {
        self.layers.retain(|e| e.index < layer);
        self.layers.push(ManifestEntry {
            index: layer,
            file: PathBuf::from(checkpoint_file_name(layer)),
            digest: hex(digest),
        });
    }

    pub fn to_text(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| HqaError::Config(e.to_string()))?;
        Ok(format!(
            "# HQA stack manifest: layer checkpoints, bottom first.\n{body}"
        ))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Self =
            toml::from_str(text).map_err(|e| HqaError::Parse(format!("manifest: {e}")))?;
        if m.format != MANIFEST_VERSION {
            return Err(HqaError::Parse(format!(
                "manifest format {}, expected {MANIFEST_VERSION}",
                m.format
            )));
        }
        for (i, e) in m.layers.iter().enumerate() {
            if e.index != i + 1 {
                return Err(HqaError::Parse(format!(
                    "manifest row {} names layer {}",
                    i + 1,
                    e.index
                )));
            }
            parse_hex32(&e.digest)?;
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }
}

impl Default for StackManifest {
    fn default() -> Self {
        Self::new()
    }
}

/// Resolves a model argument: a manifest file or the directory holding it.
pub fn manifest_dir(model: &Path) -> PathBuf {
    if model.is_dir() {
        model.to_path_buf()
    } else {
        model.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Loads every layer listed in the manifest. All must be frozen unless
/// `allow_unfinished_top`, and each header digest must match its row.
pub fn load_stack<T: Real>(
    model: &Path,
    allow_unfinished_top: bool,
) -> Result<(HqaStack<T>, Vec<LayerCheckpoint<T>>)> {
    let dir = manifest_dir(model);
    let manifest = StackManifest::load(&dir)?;
    if manifest.layers.is_empty() {
        return Err(HqaError::Config(format!(
            "manifest in {} lists no layers",
            dir.display()
        )));
    }
    let mut stack = HqaStack::new();
    let mut ckpts = Vec::new();
    let last = manifest.layers.len();
    for e in &manifest.layers {
        let ck = LayerCheckpoint::<T>::load(&dir.join(&e.file))?;
        if ck.layer != e.index {
            return Err(corrupt(format!(
                "{} holds layer {}, manifest says {}",
                e.file.display(),
                ck.layer,
                e.index
            )));
        }
        if hex(&ck.digest) != e.digest {
            return Err(HqaError::Config(format!(
                "layer {}: checkpoint digest differs from the manifest",
                e.index
            )));
        }
        if !ck.frozen && !(allow_unfinished_top && e.index == last) {
            return Err(HqaError::Config(format!(
                "layer {} is not fully trained",
                e.index
            )));
        }
        stack.push(ck.state.clone(), ck.frozen)?;
        ckpts.push(ck);
    }
    Ok((stack, ckpts))
}
