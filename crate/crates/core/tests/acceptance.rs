//! Acceptance gates. Run with `cargo test -p hqa-core --test acceptance`;
//! extra arguments select criteria by substring (`-- codec rates`).
//!
//! Every tolerance is pinned here. A criterion that needs MNIST fails when
//! the dataset is missing rather than being skipped.

mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::{contract, gradcheck, randn, rng};
use hqa_core::codec::{deserialize, rate_report, serialize, BlobError};
use hqa_core::data::{
    default_mnist_dir, load_mnist, resize_bilinear, DataSource, Dataset, DatasetSpec, ResizeMethod,
    Split,
};
use hqa_core::experiment::{run_training, TrainOptions};
use hqa_core::kernels::{nchw_to_rows, rows_to_nchw};
use hqa_core::metrics::{
    code_histogram, codebook_perplexity, evaluate_stack, ProbeClassifier, ProbeConfig,
};
use hqa_core::quantizer::{
    commitment_loss, entropy_loss, posterior_tempered, quantize_argmin, sq_distances,
};
use hqa_core::stack::TrainEvent;
use hqa_core::toylab::{run_toy_seed, ToyConfig};
use hqa_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Toy regimes.
const TOY_SEEDS: u64 = 10;
const TOY_MIN_PASSING: usize = 8;
const TOY_MAX_SECONDS_PER_SEED: f64 = 600.0;

// Gradient checks.
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 20;

// Limiting cases.
const LIMIT_INSTANCES: usize = 1000;
const LIMIT_MIN_GAP: f64 = 0.1;
const LIMIT_TAU: f64 = 1e-4;

// Codec.
const CODEC_GRIDS: usize = 1000;

// Desk-scale MNIST.
const DESK_MAX_SECONDS: f64 = 3600.0;
const DESK_PROBE_FACTOR: f64 = 3.0;
const DESK_PERPLEXITY_DIVISOR: f64 = 8.0;
const DEAD_CODE_MIN_DROP: f64 = 0.30;

// Variant equivalence.
const VARIANT_INSTANCES: usize = 100;
const VARIANT_TOL: f64 = 1e-8;

type Check = fn() -> Result<String, String>;
type Inputs<'a> = &'a dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;
type Graph<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var], u64) -> Var;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 8] = [
        ("1 toy-regimes", toy_regimes),
        ("2 gradients", gradients),
        ("3 limiting-cases", limiting_cases),
        ("4 rates", rates),
        ("5 codec", codec_round_trip),
        ("6 desk-mnist", desk_mnist),
        ("7 variant-equivalence", variant_equivalence),
        ("8 determinism", determinism),
    ];
    // libtest flags such as --nocapture may be forwarded; ignore them.
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    // Panics become FAIL lines below; the default hook would only add noise.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("PASS criterion {name} ({secs:.1}s): {detail}"),
            Err(detail) => format!("FAIL criterion {name} ({secs:.1}s): {detail}"),
        };
        failed += usize::from(outcome.is_err());
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn toy_regimes() -> Result<String, String> {
    let cfg = ToyConfig::default();
    let mut passing = 0;
    let mut slowest = 0.0f64;
    let mut failures = Vec::new();
    for seed in 0..TOY_SEEDS {
        let start = Instant::now();
        let outcome = run_toy_seed(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        if outcome.passes(&cfg) {
            passing += 1;
        } else {
            failures.push(format!("seed {seed} regimes {:?}", outcome.regimes(&cfg)));
        }
    }
    ensure(passing >= TOY_MIN_PASSING, || {
        format!(
            "{passing}/{TOY_SEEDS} seeds passing, need {TOY_MIN_PASSING}; {}",
            failures.join(", ")
        )
    })?;
    ensure(slowest <= TOY_MAX_SECONDS_PER_SEED, || {
        format!("slowest seed took {slowest:.0}s, limit {TOY_MAX_SECONDS_PER_SEED}s")
    })?;
    Ok(format!(
        "{passing}/{TOY_SEEDS} seeds show all four regimes; slowest seed {slowest:.1}s"
    ))
}

/// Runs `build` through [`gradcheck`] on `GRAD_INSTANCES` random instances
/// and returns the worst relative error.
fn worst_over_instances(
    name: &str,
    salt: u64,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: impl Fn(&mut Tape<f64>, &[Var], u64) -> Var,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_INSTANCES {
        let mut r = rng(salt * 1000 + seed);
        let err = gradcheck(&inputs(&mut r), |t, v| build(t, v, seed));
        ensure(err <= GRAD_TOL, || {
            format!("{name} instance {seed}: relative error {err:.3e}")
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn gradients() -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut check =
        |name: &str, salt: u64, inputs: Inputs<'_>, build: Graph<'_>| -> Result<(), String> {
            worst = worst.max(worst_over_instances(name, salt, inputs, build)?);
            count += 1;
            Ok(())
        };
    check(
        "conv2d",
        1,
        &|r| {
            vec![
                randn(&[2, 2, 5, 5], r),
                randn(&[3, 2, 3, 3], r),
                randn(&[3], r),
            ]
        },
        &|t, v, s| {
            let mut r = rng(s);
            let d = r.random_range(1..=2);
            let geom = ConvGeom::new(r.random_range(1..=2), d, d);
            let y = t.conv2d(v[0], v[1], Some(v[2]), geom).unwrap();
            contract(t, y, s)
        },
    )?;
    check(
        "nearest_upsample",
        2,
        &|r| vec![randn(&[2, 2, 3, 2], r)],
        &|t, v, s| {
            let y = t.nearest_upsample(v[0], 1 + s as usize % 3).unwrap();
            contract(t, y, s)
        },
    )?;
    for (i, act) in [Activation::Relu, Activation::Sigmoid, Activation::Identity]
        .into_iter()
        .enumerate()
    {
        check(
            &format!("{act:?}"),
            3 + i as u64,
            &|r| vec![randn(&[4, 5], r)],
            &|t, v, s| {
                let y = t.elementwise(v[0], act);
                contract(t, y, s)
            },
        )?;
    }
    for (i, training) in [true, false].into_iter().enumerate() {
        check(
            "running_normalize",
            6 + i as u64,
            &|r| vec![randn(&[3, 2, 2, 2], r)],
            &|t, v, s| {
                let mut state = RunningNorm::new(2);
                state.mean = vec![0.3, -0.2];
                state.var = vec![1.5, 0.7];
                let y = t.running_normalize(v[0], &mut state, training).unwrap();
                contract(t, y, s)
            },
        )?;
    }
    check("dropout", 8, &|r| vec![randn(&[4, 6], r)], &|t, v, s| {
        let y = t.dropout(v[0], 0.5, &mut rng(s)).unwrap();
        contract(t, y, s)
    })?;
    let pair = |r: &mut ChaCha8Rng| vec![randn(&[2, 3], r), randn(&[2, 3], r)];
    check("add", 9, &pair, &|t, v, s| {
        let y = t.add(v[0], v[1]).unwrap();
        contract(t, y, s)
    })?;
    check("sub", 10, &pair, &|t, v, s| {
        let y = t.sub(v[0], v[1]).unwrap();
        contract(t, y, s)
    })?;
    check("mul", 11, &pair, &|t, v, s| {
        let y = t.mul(v[0], v[1]).unwrap();
        contract(t, y, s)
    })?;
    check("scale", 12, &|r| vec![randn(&[3, 3], r)], &|t, v, s| {
        let y = t.scale(v[0], -1.7);
        contract(t, y, s)
    })?;
    check("sum", 13, &|r| vec![randn(&[3, 4], r)], &|t, v, s| {
        let w = contract(t, v[0], s);
        let y = t.mul(v[0], v[0]).unwrap();
        let y = t.sum(y);
        t.add(y, w).unwrap()
    })?;
    check("mean", 14, &|r| vec![randn(&[3, 4], r)], &|t, v, _| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.mean(y)
    })?;
    check(
        "matmul",
        15,
        &|r| vec![randn(&[3, 4], r), randn(&[4, 5], r)],
        &|t, v, s| {
            let y = t.matmul(v[0], v[1]).unwrap();
            contract(t, y, s)
        },
    )?;
    check(
        "add_row_bias",
        16,
        &|r| vec![randn(&[3, 5], r), randn(&[5], r)],
        &|t, v, s| {
            let y = t.add_row_bias(v[0], v[1]).unwrap();
            contract(t, y, s)
        },
    )?;
    check(
        "neg_half_sq_dist",
        17,
        &|r| vec![randn(&[6, 3], r), randn(&[4, 3], r)],
        &|t, v, s| {
            let y = t.neg_half_sq_dist(v[0], v[1]).unwrap();
            contract(t, y, s)
        },
    )?;
    check("softmax", 18, &|r| vec![randn(&[3, 5], r)], &|t, v, s| {
        let y = t.softmax(v[0]);
        contract(t, y, s)
    })?;
    check(
        "log_softmax",
        19,
        &|r| vec![randn(&[3, 5], r)],
        &|t, v, s| {
            let y = t.log_softmax(v[0]);
            contract(t, y, s)
        },
    )?;
    check(
        "to_rows/from_rows/reshape",
        20,
        &|r| vec![randn(&[2, 3, 2, 2], r)],
        &|t, v, s| {
            let rows = t.to_rows(v[0]).unwrap();
            let y = t.mul(rows, rows).unwrap();
            let back = t.from_rows(y, [2, 3, 2, 2]).unwrap();
            let flat = t.reshape(back, &[24]).unwrap();
            contract(t, flat, s)
        },
    )?;
    check(
        "gather_rows",
        21,
        &|r| vec![randn(&[4, 3], r)],
        &|t, v, s| {
            let y = t.gather_rows(v[0], &[3, 0, 3, 1]).unwrap();
            contract(t, y, s)
        },
    )?;
    check(
        "cross_entropy",
        22,
        &|r| vec![randn(&[3, 5], r)],
        &|t, v, s| {
            let targets = [s as usize % 5, 4, 0];
            t.cross_entropy(v[0], &targets).unwrap()
        },
    )?;
    check("mse", 23, &pair, &|t, v, _| t.mse(v[0], v[1]).unwrap())?;
    check(
        "gumbel_softmax",
        24,
        &|r| vec![randn(&[3, 4], r)],
        &|t, v, s| {
            let y = t.gumbel_softmax(v[0], 0.8, &mut rng(s)).unwrap();
            contract(t, y, s)
        },
    )?;
    // Encoder (stride-2 conv, ReLU, conv), relaxed quantisation against a
    // codebook, decoder (conv, upsample, conv, sigmoid) and the full
    // objective with entropy and commitment terms.
    check(
        "encoder-decoder",
        25,
        &|r| {
            let x =
                Tensor::new([2, 1, 4, 4], (0..32).map(|_| r.random::<f64>()).collect()).unwrap();
            vec![
                x,
                randn(&[3, 1, 3, 3], r),
                randn(&[3], r),
                randn(&[2, 3, 3, 3], r),
                randn(&[4, 2], r),
                randn(&[3, 2, 3, 3], r),
                randn(&[1, 3, 3, 3], r),
            ]
        },
        &|t, v, s| {
            let g1 = ConvGeom::new(2, 1, 1);
            let g = ConvGeom::new(1, 1, 1);
            let h = t.conv2d(v[0], v[1], Some(v[2]), g1).unwrap();
            let h = t.relu(h);
            let z = t.conv2d(h, v[3], None, g).unwrap();
            let rows = t.to_rows(z).unwrap();
            let logits = t.neg_half_sq_dist(rows, v[4]).unwrap();
            let soft = t.gumbel_softmax(logits, 0.7, &mut rng(s)).unwrap();
            let zq = t.matmul(soft, v[4]).unwrap();
            let zq = t.from_rows(zq, [2, 2, 2, 2]).unwrap();
            let d = t.conv2d(zq, v[5], None, g).unwrap();
            let d = t.relu(d);
            let d = t.nearest_upsample(d, 2).unwrap();
            let d = t.conv2d(d, v[6], None, g).unwrap();
            let y = t.sigmoid(d);
            let recon = t.mse(y, v[0]).unwrap();
            let probs = t.softmax(logits);
            let logp = t.log_softmax(logits);
            let neg_h = t.mul(probs, logp).unwrap();
            let neg_h = t.mean(neg_h);
            let commit = t.mul(probs, logits).unwrap();
            let commit = t.mean(commit);
            let commit = t.scale(commit, -2.0);
            let reg = t.add(neg_h, commit).unwrap();
            let reg = t.scale(reg, 0.1);
            t.add(recon, reg).unwrap()
        },
    )?;
    Ok(format!(
        "{count} checks × {GRAD_INSTANCES} instances, worst relative error {worst:.2e} ≤ {GRAD_TOL:e}"
    ))
}

fn limiting_cases() -> Result<String, String> {
    let mut r = rng(31);
    let mut checked = 0;
    while checked < LIMIT_INSTANCES {
        let n = 1usize << r.random_range(1..=4);
        let d = r.random_range(1..=8);
        let cb = Codebook::from_embeddings(randn(&[n, d], &mut r), true).unwrap();
        let z = randn(&[1, d], &mut r);
        let dist = sq_distances(&z, &cb).unwrap();
        let mut sorted: Vec<f64> = dist.data().iter().map(|v| v.sqrt()).collect();
        sorted.sort_by(f64::total_cmp);
        if sorted[1] - sorted[0] < LIMIT_MIN_GAP {
            continue;
        }
        checked += 1;
        let post = posterior_tempered(&z, &cb, LIMIT_TAU).unwrap();
        let (idx, _) = quantize_argmin(&z, &cb).unwrap();
        ensure(post.mode() == idx, || {
            format!(
                "instance {checked}: mode {:?} vs argmin {idx:?}",
                post.mode()
            )
        })?;
    }
    let mut r = rng(41);
    for i in 0..LIMIT_INSTANCES {
        let n = 1usize << r.random_range(1..=4);
        let d = r.random_range(1..=8);
        let cb = Codebook::from_embeddings(randn(&[n, d], &mut r), true).unwrap();
        let z = randn(&[1, d], &mut r);
        let k = r.random_range(0..n);
        let mut probs = vec![0.0; n];
        probs[k] = 1.0;
        let post = PosteriorDistribution::from_probs(Tensor::new([1, n], probs).unwrap()).unwrap();
        let h = entropy_loss(&post);
        ensure(h == 0.0, || {
            format!("one-hot instance {i}: entropy term {h}")
        })?;
        let c = commitment_loss(&post, &z, &cb).unwrap();
        let want = sq_distances(&z, &cb).unwrap().data()[k];
        ensure(c == want, || {
            format!("one-hot instance {i}: commitment {c} vs ‖z−e_k‖² {want}")
        })?;
        let naive: f64 = z
            .data()
            .iter()
            .zip(cb.row(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        ensure((c - naive).abs() <= 1e-12 * naive.max(1.0), || {
            format!("one-hot instance {i}: commitment {c} vs naive {naive}")
        })?;
    }
    Ok(format!(
        "{LIMIT_INSTANCES} tempered posteriors agree with argmin; {LIMIT_INSTANCES} one-hot posteriors give zero entropy and exact commitment"
    ))
}

fn rates() -> Result<String, String> {
    let mut stack = HqaStack::<f32>::new();
    for level in 1..=5 {
        let cfg = LayerConfig::mnist_layer(level).map_err(|e| e.to_string())?;
        let target = if level == 1 {
            ReconTarget::PixelMse
        } else {
            ReconTarget::EmbeddingMse
        };
        let layer = HqaLayer::new(cfg, LayerVariant::hqa(target), &mut rng(level as u64))
            .map_err(|e| e.to_string())?;
        stack.push(layer, true).map_err(|e| e.to_string())?;
    }
    let mnist: Vec<u64> = (1..=5).map(|l| stack.rate_bits(l).unwrap()).collect();
    ensure(mnist == [2048, 512, 128, 32, 8], || {
        format!("MNIST rates {mnist:?}")
    })?;

    let colour: Vec<u64> = [64usize, 32, 16, 8, 4, 2, 1]
        .iter()
        .map(|&g| {
            rate_report((g, g), 512, (128, 128, 3), 8)
                .unwrap()
                .rate_bits
        })
        .collect();
    ensure(colour == [36864, 9216, 2304, 576, 144, 36, 9], || {
        format!("colour rates {colour:?}")
    })?;
    let r171 = rate_report((8, 8), 512, (64, 64, 3), 8).unwrap();
    let r10923 = rate_report((1, 1), 512, (64, 64, 3), 8).unwrap();
    ensure(r171.original_bits == 98_304, || {
        format!("original bits {}", r171.original_bits)
    })?;
    ensure(
        r171.ratio.round() == 171.0 && (r171.ratio - 98_304.0 / 576.0).abs() < 1e-9,
        || format!("ratio {}", r171.ratio),
    )?;
    ensure(
        r10923.ratio.round() == 10_923.0 && (r10923.ratio - 98_304.0 / 9.0).abs() < 1e-9,
        || format!("ratio {}", r10923.ratio),
    )?;
    Ok(format!(
        "MNIST {mnist:?}; colour {colour:?}; ratios {:.2}x and {:.2}x",
        r171.ratio, r10923.ratio
    ))
}

fn codec_round_trip() -> Result<String, String> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..CODEC_GRIDS {
        let n = [2usize, 256, 512][trial % 3];
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let idx: Vec<usize> = (0..h * w).map(|_| r.random_range(0..n)).collect();
        let layer = r.random::<u8>();
        let blob = serialize(&idx, layer, (h, w), n).map_err(|e| e.to_string())?;
        let back = deserialize(&blob).map_err(|e| format!("grid {trial}: {e}"))?;
        ensure(
            back.indices == idx
                && back.header.layer == layer
                && (back.header.grid_h as usize, back.header.grid_w as usize) == (h, w)
                && back.header.codebook_size as usize == n,
            || format!("grid {trial} ({h}×{w}, N={n}) did not round-trip"),
        )?;
        // Every strict prefix must be refused.
        let cut = r.random_range(0..blob.len());
        ensure(deserialize(&blob[..cut]).is_err(), || {
            format!("grid {trial}: prefix of {cut} bytes accepted")
        })?;
    }

    let blob = serialize(&[5, 3, 7], 0, (1, 3), 8).unwrap();
    let mutate = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = blob.clone();
        f(&mut b);
        deserialize(&b)
    };
    let cases: Vec<(&str, bool)> = vec![
        (
            "truncated header",
            deserialize(&blob[..10]) == Err(BlobError::TruncatedHeader),
        ),
        (
            "bad magic",
            matches!(mutate(&|b| b[0] ^= 1), Err(BlobError::BadMagic(_))),
        ),
        (
            "version",
            matches!(mutate(&|b| b[4] ^= 1), Err(BlobError::Version(_))),
        ),
        (
            "codebook size",
            mutate(&|b| b[11] = 6) == Err(BlobError::CodebookSize(6)),
        ),
        (
            "bit length",
            matches!(mutate(&|b| b[15] = 10), Err(BlobError::BitLength { .. })),
        ),
        (
            "short payload",
            matches!(
                mutate(&|b| {
                    b.pop();
                }),
                Err(BlobError::PayloadLength { .. })
            ),
        ),
        (
            "long payload",
            matches!(mutate(&|b| b.push(0)), Err(BlobError::PayloadLength { .. })),
        ),
        (
            "padding",
            mutate(&|b| *b.last_mut().unwrap() |= 1) == Err(BlobError::Padding),
        ),
    ];
    let rejected: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
    ensure(rejected.is_empty(), || {
        format!("corruptions not rejected as expected: {rejected:?}")
    })?;
    Ok(format!(
        "{CODEC_GRIDS} grids over N∈{{2,256,512}} round-trip; {} corruption classes rejected",
        cases.len()
    ))
}

fn mnist_available() -> Result<PathBuf, String> {
    let dir = default_mnist_dir();
    ensure(dir.join("train-images-idx3-ubyte").exists(), || {
        format!("MNIST not found in {} (set HQA_MNIST_DIR)", dir.display())
    })?;
    Ok(dir)
}

fn mnist(dir: &Path, split: Split, limit: usize) -> Result<Dataset<f32>, String> {
    Dataset::load(&DatasetSpec {
        source: DataSource::MnistIdx {
            dir: dir.to_path_buf(),
        },
        split,
        limit: Some(limit),
        resize: ResizeMethod::Bilinear,
    })
    .map_err(|e| e.to_string())
}

/// Trains the desk preset once per build directory. The training time is
/// recorded next to the checkpoints so a reused model still reports it.
fn desk_model(dir: &Path) -> Result<(HqaStack<f32>, f64, bool), String> {
    let cfg = ExperimentConfig::preset("mnist-desk").map_err(|e| e.to_string())?;
    let timing = dir.join("train_seconds");
    let cached = fs::read_to_string(dir.join("config.toml")).ok() == Some(cfg.to_toml().unwrap())
        && timing.exists();
    if cached {
        if let Ok((stack, _)) = load_stack::<f32>(dir, false) {
            let secs = fs::read_to_string(&timing)
                .unwrap()
                .trim()
                .parse()
                .map_err(|e| format!("{e}"))?;
            return Ok((stack, secs, true));
        }
    }
    let _ = fs::remove_dir_all(dir);
    let start = Instant::now();
    let data = Dataset::<f32>::load(&cfg.data.to_spec().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let stack = run_training(&cfg, &data, dir, &TrainOptions::default(), |_| {})
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    fs::write(&timing, format!("{secs}\n")).map_err(|e| e.to_string())?;
    Ok((stack, secs, false))
}

fn desk_mnist() -> Result<String, String> {
    let mnist_dir = mnist_available()?;
    let start = Instant::now();
    let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    let (stack, train_secs, cached) = desk_model(&cache)?;

    let test = mnist(&mnist_dir, Split::Test, 10_000)?;
    let labels = test.labels.clone().ok_or("test split has no labels")?;
    let mut probe =
        ProbeClassifier::<f32>::new(32, ProbeConfig::default(), 0).map_err(|e| e.to_string())?;
    probe
        .train(&mnist(&mnist_dir, Split::Train, 10_000)?, 0)
        .map_err(|e| e.to_string())?;
    let clean = probe
        .certify(&test.images, &labels)
        .map_err(|e| e.to_string())?;
    let reports = evaluate_stack(
        &stack,
        &test,
        &[1, 2, 3],
        Some(&probe),
        &ReconstructionOptions::stochastic(0),
        250,
    )
    .map_err(|e| e.to_string())?;
    let eval_secs = start.elapsed().as_secs_f64() - if cached { 0.0 } else { train_secs };

    let dist: Vec<f64> = reports.iter().map(|r| r.distortion_mse).collect();
    let perp: Vec<f64> = reports.iter().map(|r| r.codebook_perplexity).collect();
    let err3 = reports[2].classification_error.ok_or("no probe error")?;
    let n = stack.layer(1).unwrap().codebook.size() as f64;
    let summary = format!(
        "distortion {dist:.5?}, perplexity {perp:.1?}, probe clean {clean:.2}% layer-3 {err3:.2}%, train {train_secs:.0}s{} + eval {eval_secs:.0}s",
        if cached { " (reused)" } else { "" }
    );
    let mut problems = Vec::new();
    if !dist.windows(2).all(|w| w[1] > w[0]) {
        problems.push("(a) distortion not strictly increasing".to_string());
    }
    if err3 > DESK_PROBE_FACTOR * clean {
        problems.push(format!(
            "(b) layer-3 error above {DESK_PROBE_FACTOR}× clean"
        ));
    }
    if perp.iter().any(|&p| p <= n / DESK_PERPLEXITY_DIVISOR) {
        problems.push(format!(
            "(c) perplexity not above N/{DESK_PERPLEXITY_DIVISOR} = {}",
            n / DESK_PERPLEXITY_DIVISOR
        ));
    }
    if train_secs + eval_secs > DESK_MAX_SECONDS {
        problems.push(format!("runtime above {DESK_MAX_SECONDS}s"));
    }
    let (on, off) = dead_code_scenario(&mnist_dir)?;
    let drop = 1.0 - off / on;
    let summary = format!(
        "{summary}; dead-code perplexity reset on {on:.2} off {off:.2} ({:.0}% lower)",
        100.0 * drop
    );
    if drop < DEAD_CODE_MIN_DROP {
        problems.push(format!(
            "dead-code drop below {:.0}%",
            100.0 * DEAD_CODE_MIN_DROP
        ));
    }
    ensure(problems.is_empty(), || {
        format!("{}; {summary}", problems.join("; "))
    })?;
    Ok(summary)
}

const DEAD_SIZE: usize = 8;
const DEAD_CODES: usize = 32;
const DEAD_LIVE: usize = 4;
const DEAD_STEPS: usize = 800;

fn downsampled_mnist(dir: &Path, split: Split, n: usize) -> Result<Dataset<f64>, String> {
    let m = load_mnist(dir, split).map_err(|e| e.to_string())?;
    let (h, w) = (m.images.rows, m.images.cols);
    let mut data = Vec::with_capacity(n * DEAD_SIZE * DEAD_SIZE);
    for i in 0..n {
        let src: Vec<f64> = m
            .images
            .image(i)
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        data.extend(
            resize_bilinear(&src, h, w, DEAD_SIZE, DEAD_SIZE)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0)),
        );
    }
    let images = Tensor::new([n, 1, DEAD_SIZE, DEAD_SIZE], data).map_err(|e| e.to_string())?;
    Dataset::new(images, Some(m.labels[..n].to_vec())).map_err(|e| e.to_string())
}

/// A layer whose codebook starts with all but `DEAD_LIVE` codes moved far
/// from every encoder output, so only resetting can bring them back.
/// Returns the held-out code perplexity with resetting on and off.
fn dead_code_scenario(dir: &Path) -> Result<(f64, f64), String> {
    let train = downsampled_mnist(dir, Split::Train, 4096)?;
    let test = downsampled_mnist(dir, Split::Test, 1000)?;
    let perplexity = |code_reset: bool| -> Result<f64, String> {
        let cfg = LayerConfig {
            input_size: DEAD_SIZE,
            enc_hidden: 16,
            dec_hidden: 16,
            codebook_size: DEAD_CODES,
            codebook_dim: 16,
            training_steps: DEAD_STEPS,
            batch_size: 32,
            code_reset,
            ..LayerConfig::mnist_pixel_layer()
        };
        let mut init = rng(7);
        let mut layer =
            HqaLayer::<f64>::new(cfg, LayerVariant::hqa(ReconTarget::PixelMse), &mut init)
                .map_err(|e| e.to_string())?;
        let d = cfg.codebook_dim;
        for v in &mut layer.codebook.embeddings_mut().data_mut()[DEAD_LIVE * d..] {
            *v += 10.0;
        }
        let mut cursor = rng(8);
        let per_epoch = train.len() / cfg.batch_size;
        for step in 0..DEAD_STEPS {
            let order = train.epoch_order(9, (step / per_epoch) as u64);
            let slot = (step % per_epoch) * cfg.batch_size;
            let x = train
                .images
                .select_outer(&order[slot..slot + cfg.batch_size]);
            layer
                .train_step(&x, Target::Input, step, &mut cursor)
                .map_err(|e| e.to_string())?;
        }
        let mut stack = HqaStack::new();
        stack.push(layer, true).map_err(|e| e.to_string())?;
        let codes = stack
            .compress(&test.images, 1, DecodeMode::Argmax, &mut rng(0))
            .map_err(|e| e.to_string())?;
        Ok(codebook_perplexity(
            &code_histogram(&codes, DEAD_CODES).map_err(|e| e.to_string())?,
        ))
    };
    Ok((perplexity(true)?, perplexity(false)?))
}

fn small_config(input_size: usize, channels: usize) -> LayerConfig {
    LayerConfig {
        input_size,
        input_channels: channels,
        enc_hidden: 4,
        dec_hidden: 4,
        codebook_size: 8,
        codebook_dim: 3,
        training_steps: 50,
        batch_size: 2,
        ..LayerConfig::mnist_pixel_layer()
    }
}

fn rows_of(z: &Tensor<f64>) -> Tensor<f64> {
    let d = z.shape()[1];
    Tensor::new([z.len() / d, d], nchw_to_rows(z.data(), z.shape())).unwrap()
}

/// Reconstruction MSE plus codebook and commitment distances to the
/// nearest code, computed without the layer's loss code.
fn vqvae_objective(layer: &HqaLayer<f64>, x: &Tensor<f64>, beta: f64) -> f64 {
    let z = layer.encode(x).unwrap();
    let rows = rows_of(&z);
    let d = rows.shape()[1];
    let mut dist = 0.0;
    let mut q = Vec::with_capacity(rows.len());
    for p in 0..rows.shape()[0] {
        let zr = &rows.data()[p * d..(p + 1) * d];
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for k in 0..layer.codebook.size() {
            let dk: f64 = zr
                .iter()
                .zip(layer.codebook.row(k))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if dk < best_d {
                best = k;
                best_d = dk;
            }
        }
        dist += best_d;
        q.extend_from_slice(layer.codebook.row(best));
    }
    let dist = dist / rows.shape()[0] as f64;
    let zq = Tensor::new(z.shape().to_vec(), rows_to_nchw(&q, z.shape())).unwrap();
    let y = layer.decode(&zq).unwrap();
    let recon = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    recon + dist + beta * dist
}

fn variant_equivalence() -> Result<String, String> {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for i in 0..VARIANT_INSTANCES {
        let size = [4usize, 8, 16][i % 3];
        let beta = r.random_range(0.05..1.0);
        let mut cfg = small_config(size, 1);
        cfg.beta_commit = beta;
        let mut layer =
            HqaLayer::<f64>::new(cfg, LayerVariant::vqvae(ReconTarget::PixelMse), &mut r).unwrap();
        layer.codebook = Codebook::from_embeddings(randn(&[8, 3], &mut r), false).unwrap();
        let n = 2 * size * size;
        let x = Tensor::new(
            [2, 1, size, size],
            (0..n).map(|_| r.random::<f64>()).collect(),
        )
        .unwrap();
        let l = layer
            .evaluate_loss(&x, Target::Input, 0, &mut r)
            .map_err(|e| e.to_string())?;
        let oracle = vqvae_objective(&layer, &x, beta);
        let err = (l.total - oracle).abs();
        ensure(err <= VARIANT_TOL, || {
            format!("instance {i}: loss {} vs reference {oracle}", l.total)
        })?;
        worst = worst.max(err);
    }
    Ok(format!(
        "{VARIANT_INSTANCES} instances, worst |Δ| {worst:.2e} ≤ {VARIANT_TOL:e}"
    ))
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Result<String, String> {
    let mnist_dir = mnist_available()?;
    let mut cfg = ExperimentConfig::preset("mnist-desk").map_err(|e| e.to_string())?;
    cfg.data.dir = Some(mnist_dir);
    cfg.data.limit = Some(512);
    cfg.layers.truncate(2);
    for l in &mut cfg.layers {
        l.training_steps = 40;
        l.batch_size = 16;
    }
    let data = Dataset::<f64>::load(&cfg.data.to_spec().map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        run_training(&cfg, &data, dir, &TrainOptions::default(), |_| {})
            .map_err(|e| e.to_string())?;
    }
    let (fa, fb) = (tree_bytes(&a), tree_bytes(&b));
    let names: Vec<&str> = fa.iter().map(|f| f.0.as_str()).collect();
    ensure(fa == fb, || {
        format!("output directories differ ({names:?})")
    })?;
    ensure(
        names.contains(&"layer1.ckpt") && names.contains(&"layer2.ckpt"),
        || format!("missing checkpoints in {names:?}"),
    )?;

    let plans = cfg.plans().map_err(|e| e.to_string())?;
    let mut frozen_l1 = None;
    let stack = train_greedy(
        HqaStack::<f64>::new(),
        &plans,
        &data,
        cfg.seed,
        None,
        |ev| {
            if let TrainEvent::LayerDone {
                layer: 1, stack, ..
            } = ev
            {
                frozen_l1 = Some(stack.layer(1)?.clone());
            }
            Ok(())
        },
    )
    .map_err(|e| e.to_string())?;
    let before = frozen_l1.ok_or("layer 1 never finished")?;
    let after = stack.layer(1).unwrap();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let params_equal = before
        .params
        .iter()
        .zip(after.params.iter())
        .all(|((_, p), (_, q))| bits(&p.tensor) == bits(&q.tensor));
    ensure(
        params_equal
            && bits(before.codebook.embeddings()) == bits(after.codebook.embeddings())
            && before.normalizer == after.normalizer,
        || "layer 1 changed while layer 2 trained".into(),
    )?;
    let on_disk =
        LayerCheckpoint::<f64>::load(&a.join("layer1.ckpt")).map_err(|e| e.to_string())?;
    ensure(
        on_disk
            .state
            .params
            .iter()
            .zip(after.params.iter())
            .all(|((_, p), (_, q))| bits(&p.tensor) == bits(&q.tensor)),
        || "checkpointed layer 1 differs from the in-memory frozen layer".into(),
    )?;
    Ok(format!(
        "two runs wrote identical bytes for {} files; frozen layer 1 bitwise unchanged",
        names.len()
    ))
}
