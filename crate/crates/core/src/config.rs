//! Experiment configuration files.
//!
//! A config is TOML: a few top-level keys, one `[data]` table and one
//! `[[layer]]` table per hierarchy level, bottom first. Layer geometry that
//! follows from the layer below (input size, input channels, normalisation,
//! the lower codebook size for the cross-entropy head) may be omitted; when
//! given it must agree with the chain.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{default_mnist_dir, DataSource, DatasetSpec, ResizeMethod, Split};
use crate::error::{HqaError, Result};
use crate::layer::{LayerConfig, LayerVariant, Quantization, ReconTarget, Regularizers};
use crate::quantizer::TemperatureSchedule;
use crate::stack::LayerPlan;

/// Side length every loader produces.
pub const IMAGE_SIZE: usize = 32;

pub const PRESET_MNIST_FULL: &str = include_str!("../../../configs/mnist_full.toml");
pub const PRESET_MNIST_DESK: &str = include_str!("../../../configs/mnist_desk.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Mnist,
    ImageFolder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Defaults to the MNIST directory for `mnist`; required for folders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default)]
    pub resize: ResizeMethod,
}

fn default_split() -> Split {
    Split::Train
}

impl DataSection {
    pub fn to_spec(&self) -> Result<DatasetSpec> {
        let source = match (self.kind, &self.dir) {
            (DataKind::Mnist, dir) => DataSource::MnistIdx {
                dir: dir.clone().unwrap_or_else(default_mnist_dir),
            },
            (DataKind::ImageFolder, Some(dir)) => DataSource::ImageFolder { dir: dir.clone() },
            (DataKind::ImageFolder, None) => {
                return Err(HqaError::Config("data: image_folder needs `dir`".into()));
            }
        };
        Ok(DatasetSpec {
            source,
            split: self.split,
            limit: self.limit,
            resize: self.resize,
        })
    }
}

fn default_tau_final() -> f64 {
    TemperatureSchedule::FINAL
}

fn default_true() -> bool {
    true
}

fn default_quantization() -> Quantization {
    Quantization::StochasticGumbel
}

fn default_regularizers() -> Regularizers {
    Regularizers::Probabilistic
}

/// One `[[layer]]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
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
    #[serde(default)]
    pub dropout: f64,
    pub tau_initial: f64,
    #[serde(default = "default_tau_final")]
    pub tau_final: f64,
    pub learning_rate: f64,
    #[serde(default = "default_true")]
    pub code_reset: bool,
    #[serde(default = "default_quantization")]
    pub quantization: Quantization,
    #[serde(default = "default_regularizers")]
    pub regularizers: Regularizers,
    /// `pixel_mse` for layer 1 and `embedding_mse` above when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_target: Option<ReconTarget>,
    /// Lower codebook size for `index_cross_entropy`, else 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_codes: Option<usize>,
    /// True exactly above layer 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize_input: Option<bool>,
}

impl LayerSection {
    /// Section reproducing `plan` with every derivable field spelled out.
    pub fn from_plan(plan: &LayerPlan) -> Self {
        let c = &plan.config;
        Self {
            input_size: Some(c.input_size),
            input_channels: Some(c.input_channels),
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            enc_hidden: c.enc_hidden,
            dec_hidden: c.dec_hidden,
            codebook_size: c.codebook_size,
            codebook_dim: c.codebook_dim,
            beta_entropy: c.beta_entropy,
            beta_commit: c.beta_commit,
            training_steps: c.training_steps,
            batch_size: c.batch_size,
            dropout: c.dropout,
            tau_initial: c.tau_initial,
            tau_final: c.tau_final,
            learning_rate: c.learning_rate,
            code_reset: c.code_reset,
            quantization: plan.variant.quantization,
            regularizers: plan.variant.regularizers,
            recon_target: Some(plan.variant.recon_target),
            target_codes: Some(c.target_codes),
            normalize_input: Some(c.normalize_input),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub data: DataSection,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSection>,
}

/// What a layer checkpoint's digest covers: everything that influences
/// that layer's trained weights.
#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    data: &'a DataSection,
    layer: Vec<LayerSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HqaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Named shipped preset: `mnist-full` or `mnist-desk`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist-full" => Self::parse(PRESET_MNIST_FULL),
            "mnist-desk" => Self::parse(PRESET_MNIST_DESK),
            other => Err(HqaError::Config(format!(
                "unknown preset `{other}` (expected mnist-full or mnist-desk)"
            ))),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HqaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plans().map(|_| ())
    }

    /// Resolves every section against the one below it. Errors name the
    /// offending layer (1-based).
    pub fn plans(&self) -> Result<Vec<LayerPlan>> {
        if self.layers.is_empty() {
            return Err(HqaError::Config("config has no [[layer]] sections".into()));
        }
        if self.data.limit == Some(0) {
            return Err(HqaError::Config("data: limit must be positive".into()));
        }
        let mut plans: Vec<LayerPlan> = Vec::with_capacity(self.layers.len());
        for (i, s) in self.layers.iter().enumerate() {
            let level = i + 1;
            let fail = |msg: String| HqaError::Config(format!("layer {level}: {msg}"));
            let below = plans.last().map(|p| p.config);
            let (size, channels) = match below {
                None => (IMAGE_SIZE, 1),
                Some(b) => (b.output_size(), b.codebook_dim),
            };
            if let Some(given) = s.input_size {
                if given != size {
                    let what = match below {
                        None => format!("input_size {given} differs from the {IMAGE_SIZE}-pixel images"),
                        Some(b) => format!(
                            "input_size {given} does not halve layer {}'s input {} (expected {size})",
                            level - 1,
                            b.input_size
                        ),
                    };
                    return Err(fail(what));
                }
            }
            if let Some(given) = s.input_channels {
                if given != channels {
                    return Err(fail(format!("input_channels {given}, expected {channels}")));
                }
            }
            if size < 2 {
                return Err(fail(format!(
                    "input grid {size}×{size} cannot be halved again"
                )));
            }
            let recon_target = s.recon_target.unwrap_or(if level == 1 {
                ReconTarget::PixelMse
            } else {
                ReconTarget::EmbeddingMse
            });
            if (level == 1) != (recon_target == ReconTarget::PixelMse) {
                return Err(fail("only layer 1 reconstructs pixels".into()));
            }
            let target_codes = match (recon_target, below) {
                (ReconTarget::IndexCrossEntropy, Some(b)) => b.codebook_size,
                _ => 0,
            };
            if s.target_codes.is_some_and(|t| t != target_codes) {
                return Err(fail(format!("target_codes must be {target_codes}")));
            }
            if s.normalize_input.is_some_and(|n| n != (level > 1)) {
                return Err(fail("normalize_input is set exactly above layer 1".into()));
            }
            let config = LayerConfig {
                input_size: size,
                input_channels: channels,
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
                target_codes,
                normalize_input: level > 1,
            };
            config.validate().map_err(|e| fail(e.to_string()))?;
            plans.push(LayerPlan {
                config,
                variant: LayerVariant {
                    quantization: s.quantization,
                    recon_target,
                    regularizers: s.regularizers,
                },
            });
        }
        Ok(plans)
    }

    /// SHA-256 over the seed, the data section and layers `1..=layer`,
    /// each fully resolved. Unchanged by edits to higher layers.
    pub fn layer_digest(&self, layer: usize) -> Result<[u8; 32]> {
        let plans = self.plans()?;
        if !(1..=plans.len()).contains(&layer) {
            return Err(HqaError::Config(format!(
                "no layer {layer} in a {}-layer config",
                plans.len()
            )));
        }
        let view = DigestView {
            seed: self.seed,
            data: &self.data,
            layer: plans[..layer].iter().map(LayerSection::from_plan).collect(),
        };
        let text = toml::to_string(&view).map_err(|e| HqaError::Config(e.to_string()))?;
        Ok(Sha256::digest(text.as_bytes()).into())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_hex32(s: &str) -> Result<[u8; 32]> {
    let bad = || HqaError::Parse(format!("`{s}` is not a 64-digit hex digest"));
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}
