//! End-to-end greedy training into an output directory.
//!
//! Layout of `out_dir` after a run of an `L`-layer config:
//!
//! * `config.toml`: the resolved config, re-serialized.
//! * `layer{l}.ckpt`: one checkpoint per layer (see [`crate::checkpoint`]).
//! * `loss_layer{l}.tsv`: one row per training step.
//! * `stack.toml`: the manifest, rewritten whenever a checkpoint changes.
//!
//! Every artifact is a pure function of the config and the data, so two
//! runs with the same inputs produce identical bytes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::checkpoint::{checkpoint_file_name, LayerCheckpoint, StackManifest};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{HqaError, Result};
use crate::layer::LossBreakdown;
use crate::quantizer::ResetEvent;
use crate::real::Real;
use crate::stack::{train_greedy, HqaStack, TrainCursor, TrainEvent};

pub const LOSS_LOG_HEADER: &str =
    "step\ttotal\trecon\tentropy\tcommit\tcodebook\ttemperature\tlr\treset";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from the checkpoints of layers `1..=k` already in `out_dir`.
    pub resume_layer: Option<usize>,
    /// Save the layer under training every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Stop after this many steps in this invocation, saving a resumable
    /// checkpoint. The run then ends with [`HqaError::Paused`].
    pub max_steps: Option<usize>,
}

pub fn loss_log_name(layer: usize) -> String {
    format!("loss_layer{layer}.tsv")
}

pub fn loss_log_row(step: usize, loss: &LossBreakdown, reset: Option<ResetEvent>) -> String {
    let reset = reset.map_or_else(|| "-".to_string(), |r| format!("{}<{}", r.reset, r.donor));
    format!(
        "{step}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}\t{:.4e}\t{reset}",
        loss.total,
        loss.recon,
        loss.entropy,
        loss.commitment,
        loss.codebook,
        loss.temperature,
        loss.learning_rate
    )
}

/// Keeps the header and the rows for steps below `keep`.
fn truncate_log(path: &Path, keep: usize) -> Result<()> {
    let mut lines = vec![LOSS_LOG_HEADER.to_string()];
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let step: usize = line
                .split('\t')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| HqaError::Parse(format!("{}: bad row `{line}`", path.display())))?;
            if step < keep {
                lines.push(line);
            }
        }
    }
    if lines.len() != keep + 1 {
        return Err(HqaError::Config(format!(
            "{} holds {} of the {keep} completed steps",
            path.display(),
            lines.len() - 1
        )));
    }
    fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

struct Session<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    manifest: StackManifest,
    log: Option<(usize, BufWriter<File>)>,
}

impl Session<'_> {
    fn log_for(&mut self, layer: usize) -> Result<&mut BufWriter<File>> {
        if self.log.as_ref().is_none_or(|(l, _)| *l != layer) {
            let path = self.out.join(loss_log_name(layer));
            if !path.exists() {
                fs::write(&path, format!("{LOSS_LOG_HEADER}\n"))?;
            }
            let f = fs::OpenOptions::new().append(true).open(path)?;
            self.log = Some((layer, BufWriter::new(f)));
        }
        Ok(&mut self.log.as_mut().expect("opened above").1)
    }

    fn save<T: Real>(
        &mut self,
        stack: &HqaStack<T>,
        layer: usize,
        cursor: Option<&TrainCursor>,
    ) -> Result<()> {
        if let Some((_, w)) = &mut self.log {
            w.flush()?;
        }
        let digest = self.cfg.layer_digest(layer)?;
        let ck = LayerCheckpoint {
            layer,
            digest,
            frozen: stack.is_frozen(layer)?,
            state: stack.layer(layer)?.clone(),
            cursor: cursor.cloned(),
        };
        ck.save(&self.out.join(checkpoint_file_name(layer)))?;
        self.manifest.record(layer, &digest);
        self.manifest.save(self.out)
    }
}

/// Loads layers `1..=k` from `out_dir`, checking each against `cfg`.
fn resume_state<T: Real>(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    k: usize,
) -> Result<(HqaStack<T>, Option<TrainCursor>, StackManifest)> {
    let total = cfg.layers.len();
    if !(1..=total).contains(&k) {
        return Err(HqaError::Config(format!(
            "cannot resume at layer {k} of a {total}-layer config"
        )));
    }
    let mut stack = HqaStack::new();
    let mut manifest = StackManifest::new();
    let mut cursor = None;
    for l in 1..=k {
        let ck = LayerCheckpoint::<T>::load(&out_dir.join(checkpoint_file_name(l)))?;
        let want = cfg.layer_digest(l)?;
        if ck.digest != want || ck.layer != l {
            return Err(HqaError::Config(format!(
                "layer {l}: checkpoint was trained under a different config"
            )));
        }
        if !ck.frozen && l < k {
            return Err(HqaError::Config(format!(
                "layer {l} is unfinished; resume at layer={l}"
            )));
        }
        if !ck.frozen {
            truncate_log(
                &out_dir.join(loss_log_name(l)),
                ck.state.train_state.steps_done,
            )?;
        }
        manifest.record(l, &ck.digest);
        stack.push(ck.state, ck.frozen)?;
        cursor = ck.cursor;
    }
    Ok((stack, cursor, manifest))
}

/// Greedy training of every layer in `cfg`, writing checkpoints, loss logs
/// and the manifest to `out_dir`. `progress` receives human-readable lines.
pub fn run_training<T: Real>(
    cfg: &ExperimentConfig,
    data: &Dataset<T>,
    out_dir: &Path,
    opts: &TrainOptions,
    mut progress: impl FnMut(&str),
) -> Result<HqaStack<T>> {
    let plans = cfg.plans()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    let (stack, cursor, manifest) = match opts.resume_layer {
        Some(k) => resume_state(cfg, out_dir, k)?,
        None => (HqaStack::new(), None, StackManifest::new()),
    };
    for l in stack.len() + 1..=plans.len() {
        let path = out_dir.join(loss_log_name(l));
        if path.exists() {
            fs::remove_file(path)?;
        }
    }
    let mut session = Session {
        cfg,
        out: out_dir,
        manifest,
        log: None,
    };
    let mut budget = opts.max_steps;
    let result = train_greedy(stack, &plans, data, cfg.seed, cursor, |ev| match ev {
        TrainEvent::Step {
            layer,
            step,
            loss,
            reset,
            stack,
            cursor,
        } => {
            writeln!(
                session.log_for(layer)?,
                "{}",
                loss_log_row(step, loss, reset)
            )?;
            let total = plans[layer - 1].config.training_steps;
            let done = step + 1;
            if done % 100 == 0 || done == total {
                progress(&format!(
                    "layer {layer} step {done}/{total} recon {:.5} total {:.5}",
                    loss.recon, loss.total
                ));
            }
            if let Some(b) = budget.as_mut() {
                *b = b.saturating_sub(1);
                if *b == 0 && done < total {
                    session.save(stack, layer, Some(cursor))?;
                    return Err(HqaError::Paused { layer, step: done });
                }
            }
            if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 && done < total {
                session.save(stack, layer, Some(cursor))?;
            }
            Ok(())
        }
        TrainEvent::LayerDone { layer, stack, .. } => {
            session.save(stack, layer, None)?;
            progress(&format!("layer {layer} done"));
            match budget {
                Some(0) if layer < plans.len() => Err(HqaError::Paused {
                    layer,
                    step: plans[layer - 1].config.training_steps,
                }),
                _ => Ok(()),
            }
        }
    });
    if let Some((_, w)) = &mut session.log {
        w.flush()?;
    }
    result
}
