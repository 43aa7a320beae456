use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use hqa_core::codec::{self, rate_report};
use hqa_core::data::{
    self, default_mnist_dir, read_image, tile, write_image, DataSource, Dataset, DatasetSpec, Split,
};
use hqa_core::experiment::{run_training, TrainOptions};
use hqa_core::metrics::{evaluate_stack, report_table, ProbeClassifier, ProbeConfig};
use hqa_core::toylab::{histogram_table, run_toy_seed, sample_toy, ToyConfig};
use hqa_core::{
    load_stack, DecodeMode, ExperimentConfig, HqaError, HqaStack, ReconstructionOptions, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ToyMode;

/// Bits per stored pixel value of the uncompressed images.
const PIXEL_BITS: u32 = 8;
const HIST_RANGE: (f64, f64) = (-0.7, 0.7);
const HIST_BINS: usize = 280;

pub fn parse_resume(s: &str) -> Result<usize, String> {
    let k = s
        .strip_prefix("layer=")
        .ok_or_else(|| format!("expected `layer=K`, got `{s}`"))?;
    match k.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(k),
        _ => Err(format!("`{k}` is not a layer number ≥ 1")),
    }
}

fn opts(mode: DecodeMode, seed: u64) -> ReconstructionOptions {
    ReconstructionOptions { mode, seed }
}

pub fn toy(
    out: &Path,
    seed: u64,
    mode: ToyMode,
    assert_regimes: bool,
    steps: Option<usize>,
) -> Result<ExitCode> {
    let mut cfg = ToyConfig::default();
    if let Some(s) = steps {
        ensure!(s > 0, "--steps must be positive");
        cfg.steps = s;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = run_toy_seed(&cfg, seed)?;
    let regimes = outcome.regimes(&cfg);
    let target = sample_toy(&cfg.dist, cfg.eval_samples, seed.wrapping_add(1_000_003));
    let hist = |v: &[f64]| histogram_table(v, HIST_RANGE.0, HIST_RANGE.1, HIST_BINS);

    let mut panels = vec![
        ("target", None, hist(&target)),
        ("four_code", Some(0), hist(&outcome.values[0])),
        ("two_code", Some(1), hist(&outcome.values[1])),
        ("hierarchy_stochastic", Some(3), hist(&outcome.values[3])),
    ];
    if mode == ToyMode::Deterministic {
        panels.push(("hierarchy_deterministic", Some(2), hist(&outcome.values[2])));
    }
    let reports = [
        &outcome.four_code,
        &outcome.two_code,
        &outcome.deterministic,
        &outcome.stochastic,
    ];
    let mut report = format!("seed={seed} steps={}\n", cfg.steps);
    let mut all_ok = true;
    for (name, idx, table) in &panels {
        fs::write(out.join(format!("{name}.hist")), table)?;
        if let Some(i) = *idx {
            all_ok &= regimes[i];
            let status = if regimes[i] { "ok" } else { "FAIL" };
            writeln!(
                report,
                "system={name} regime={status} {}",
                reports[i].to_line()
            )?;
        }
    }
    writeln!(
        report,
        "stochastic_posterior_entropy={:.4}",
        outcome.stochastic_posterior_entropy
    )?;
    fs::write(out.join("report.txt"), &report)?;
    print!("{report}");
    if assert_regimes && !all_ok {
        eprintln!("regime check failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub out: PathBuf,
    pub resume: Option<usize>,
    pub checkpoint_every: usize,
    pub max_steps: Option<usize>,
    pub data_dir: Option<PathBuf>,
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => bail!("pass --config or --preset"),
    };
    if let Some(dir) = args.data_dir {
        cfg.data.dir = Some(dir);
    }
    let spec = cfg.data.to_spec()?;
    let data = Dataset::<f32>::load(&spec)
        .with_context(|| format!("loading training data ({:?})", spec.source))?;
    eprintln!(
        "training {} layers on {} images into {}",
        cfg.layers.len(),
        data.len(),
        args.out.display()
    );
    let opts = TrainOptions {
        resume_layer: args.resume,
        checkpoint_every: args.checkpoint_every,
        max_steps: args.max_steps,
    };
    match run_training(&cfg, &data, &args.out, &opts, |line| eprintln!("{line}")) {
        Ok(_) => Ok(ExitCode::SUCCESS),
        Err(HqaError::Paused { layer, step }) => {
            eprintln!(
                "paused at layer {layer} after {step} steps; continue with --resume layer={layer}"
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => Err(e.into()),
    }
}

fn load_model(model: &Path) -> Result<HqaStack<f32>> {
    let (stack, _) =
        load_stack(model, false).with_context(|| format!("loading model {}", model.display()))?;
    Ok(stack)
}

/// One image as a `[1,C,H,W]` batch sized for the stack's first layer.
fn load_input(stack: &HqaStack<f32>, path: &Path) -> Result<Tensor<f32>> {
    let img: Tensor<f32> =
        read_image(path).with_context(|| format!("reading {}", path.display()))?;
    let want = stack.layer(1)?.input_shape(1);
    let s = img.shape().to_vec();
    ensure!(
        s[..] == want[1..],
        "{} is {:?} (C,H,W) but the model expects {:?}",
        path.display(),
        s,
        &want[1..]
    );
    Ok(img.reshape(want)?)
}

fn write_batch(images: &Tensor<f32>, paths: &[PathBuf]) -> Result<()> {
    for (i, p) in paths.iter().enumerate() {
        let one = images.slice_outer(i, i + 1);
        let s = one.shape().to_vec();
        write_image(p, &one.reshape([s[1], s[2], s[3]])?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn report_rate(stack: &HqaStack<f32>, layer: usize, blob_bytes: usize) -> Result<()> {
    let top = stack.layer(layer)?;
    let g = top.config.output_size();
    let [_, c, h, w] = stack.layer(1)?.input_shape(1);
    let r = rate_report((g, g), top.codebook.size(), (h, w, c), PIXEL_BITS)?;
    eprintln!(
        "layer={layer} rate_bits={} original_bits={} ratio={:.2}x blob_bytes={blob_bytes}",
        r.rate_bits, r.original_bits, r.ratio
    );
    Ok(())
}

pub fn compress(
    model: &Path,
    image: &Path,
    layer: usize,
    seed: u64,
    mode: DecodeMode,
    out: &Path,
) -> Result<ExitCode> {
    let stack = load_model(model)?;
    ensure!(
        (1..=stack.len()).contains(&layer),
        "--layer {layer} outside 1..={}",
        stack.len()
    );
    let x = load_input(&stack, image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = stack.compress(&x, layer, mode, &mut rng)?;
    let top = stack.layer(layer)?;
    let g = top.config.output_size();
    let blob = codec::serialize(&idx, u8::try_from(layer)?, (g, g), top.codebook.size())?;
    fs::write(out, &blob).with_context(|| format!("writing {}", out.display()))?;
    report_rate(&stack, layer, blob.len())?;
    Ok(ExitCode::SUCCESS)
}

fn numbered(out: &Path, i: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = out
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pgm".into());
    out.with_file_name(format!("{stem}_{i:02}.{ext}"))
}

pub fn decompress(
    model: &Path,
    blob: &Path,
    seed: u64,
    mode: DecodeMode,
    samples: usize,
    out: &Path,
) -> Result<ExitCode> {
    ensure!(samples >= 1, "--samples must be at least 1");
    let stack = load_model(model)?;
    let bytes = fs::read(blob).with_context(|| format!("reading {}", blob.display()))?;
    let decoded =
        codec::deserialize(&bytes).with_context(|| format!("decoding {}", blob.display()))?;
    let h = decoded.header;
    let layer = h.layer as usize;
    let top = stack
        .layer(layer)
        .with_context(|| format!("blob names layer {layer}"))?;
    let g = top.config.output_size();
    ensure!(
        (
            h.grid_h as usize,
            h.grid_w as usize,
            h.codebook_size as usize
        ) == (g, g, top.codebook.size()),
        "blob grid {}x{} over {} codes does not match layer {layer} ({g}x{g} over {})",
        h.grid_h,
        h.grid_w,
        h.codebook_size,
        top.codebook.size()
    );
    let decodes = (0..samples as u64)
        .map(|i| {
            stack.reconstruct(
                &decoded.indices,
                1,
                layer,
                &opts(mode, seed.wrapping_add(i)),
            )
        })
        .collect::<hqa_core::Result<Vec<_>>>()?;
    let paths: Vec<PathBuf> = if samples == 1 {
        vec![out.to_path_buf()]
    } else {
        (0..samples).map(|i| numbered(out, i)).collect()
    };
    write_batch(&Tensor::concat_outer(&decodes)?, &paths)?;
    report_rate(&stack, layer, bytes.len())?;
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
pub fn interp(
    model: &Path,
    from: &Path,
    to: &Path,
    layer: usize,
    steps: usize,
    mode: DecodeMode,
    seed: u64,
    out: &Path,
) -> Result<ExitCode> {
    let stack = load_model(model)?;
    let a = load_input(&stack, from)?;
    let b = load_input(&stack, to)?;
    let frames = stack.interpolate(&a, &b, steps, layer, &opts(mode, seed))?;
    fs::create_dir_all(out)?;
    let all = Tensor::concat_outer(&frames)?;
    let paths: Vec<PathBuf> = (0..frames.len())
        .map(|i| out.join(format!("frame_{i:02}.pgm")))
        .collect();
    write_batch(&all, &paths)?;
    write_image(&out.join("strip.pgm"), &tile(&all, frames.len())?)?;
    eprintln!(
        "wrote {} frames ({steps} intermediate) to {}",
        frames.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn enumerate(
    model: &Path,
    layer: usize,
    mode: DecodeMode,
    seed: u64,
    out: &Path,
) -> Result<ExitCode> {
    let stack = load_model(model)?;
    let images = stack.enumerate_codes(layer, &opts(mode, seed))?;
    let n = images.shape()[0];
    let cols = (n as f64).sqrt().ceil() as usize;
    write_image(out, &tile(&images, cols)?)?;
    eprintln!("wrote {n} code decodes to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub struct EvalArgs {
    pub model: PathBuf,
    pub layers: String,
    pub data_dir: Option<PathBuf>,
    pub limit: usize,
    pub probe_train: usize,
    pub probe_steps: Option<usize>,
    pub no_probe: bool,
    pub mode: DecodeMode,
    pub seed: u64,
    pub table: Option<PathBuf>,
}

fn parse_layers(s: &str, depth: usize) -> Result<Vec<usize>> {
    if s == "all" {
        return Ok((1..=depth).collect());
    }
    s.split(',')
        .map(|p| {
            let l: usize = p
                .trim()
                .parse()
                .with_context(|| format!("bad layer `{p}`"))?;
            ensure!((1..=depth).contains(&l), "layer {l} outside 1..={depth}");
            Ok(l)
        })
        .collect()
}

fn mnist(dir: &Path, split: Split, limit: usize) -> Result<Dataset<f32>> {
    let spec = DatasetSpec {
        source: DataSource::MnistIdx {
            dir: dir.to_path_buf(),
        },
        split,
        limit: Some(limit),
        resize: data::ResizeMethod::Bilinear,
    };
    Dataset::load(&spec).with_context(|| format!("loading MNIST {split:?} from {}", dir.display()))
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let stack = load_model(&args.model)?;
    let layers = parse_layers(&args.layers, stack.len())?;
    let dir = args.data_dir.unwrap_or_else(default_mnist_dir);
    let test = mnist(&dir, Split::Test, args.limit)?;
    let probe = if args.no_probe {
        None
    } else {
        let mut cfg = ProbeConfig::default();
        if let Some(s) = args.probe_steps {
            cfg.steps = s;
        }
        let size = stack.layer(1)?.config.input_size;
        let mut probe = ProbeClassifier::<f32>::new(size, cfg, args.seed)?;
        probe.train(&mnist(&dir, Split::Train, args.probe_train)?, args.seed)?;
        let labels = test.labels.as_deref().context("test split has no labels")?;
        let clean = probe
            .certify(&test.images, labels)
            .context("probe classifier not certified; refusing to report classification error")?;
        println!("probe_clean_error={clean:.2}");
        Some(probe)
    };
    let reports = evaluate_stack(
        &stack,
        &test,
        &layers,
        probe.as_ref(),
        &opts(args.mode, args.seed),
        250,
    )?;
    for r in &reports {
        println!("{}", r.to_line());
    }
    if let Some(path) = args.table {
        fs::write(&path, report_table(&reports))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn preset(name: &str) -> Result<ExitCode> {
    let text = match name {
        "mnist-full" => hqa_core::config::PRESET_MNIST_FULL,
        "mnist-desk" => hqa_core::config::PRESET_MNIST_DESK,
        _ => {
            ExperimentConfig::preset(name)?;
            unreachable!("unknown presets are rejected above");
        }
    };
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
