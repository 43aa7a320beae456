use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hqa_core::codec;
use hqa_core::kernels::{conv2d_backward, conv2d_forward, ConvDims};
use hqa_core::quantizer::posterior;
use hqa_core::stack::init_rng;
use hqa_core::{
    Codebook, ConvGeom, HqaLayer, LayerConfig, LayerVariant, ReconTarget, Target, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Shapes of the MNIST layer-1 encoder and decoder at batch 32.
fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    let cases = [
        (
            "enc_stride2_1x16_32px",
            [32, 1, 32, 32],
            [16, 1, 3, 3],
            ConvGeom::new(2, 1, 1),
        ),
        (
            "enc_16x16_16px",
            [32, 16, 16, 16],
            [16, 16, 3, 3],
            ConvGeom::new(1, 1, 1),
        ),
        (
            "dec_dilated_16x16_32px",
            [32, 16, 32, 32],
            [16, 16, 3, 3],
            ConvGeom::new(1, 2, 2),
        ),
    ];
    for (name, input, weight, geom) in cases {
        let d = ConvDims::infer(&input, &weight, geom).unwrap();
        let x = random(input.iter().product(), 1);
        let w = random(weight.iter().product(), 2);
        let b = random(weight[0], 3);
        let go = random(d.batch * d.out_ch * d.out_pixels(), 4);
        g.bench_with_input(BenchmarkId::new("forward", name), &d, |bench, d| {
            bench.iter(|| conv2d_forward(black_box(&x), &w, Some(&b), d))
        });
        g.bench_with_input(BenchmarkId::new("backward", name), &d, |bench, d| {
            let mut gi = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; b.len()];
            bench.iter(|| {
                conv2d_backward(
                    black_box(&x),
                    &w,
                    &go,
                    d,
                    Some(&mut gi),
                    Some(&mut gw),
                    Some(&mut gb),
                )
            })
        });
    }
    g.finish();
}

fn posterior_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("posterior");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let codebook = Codebook::<f32>::init_uniform(256, 64, true, &mut rng).unwrap();
    for (name, grid) in [("32x64x16x16", 16), ("32x64x4x4", 4)] {
        // Positions of a [32, 64, grid, grid] latent as rows.
        let z = Tensor::new([32 * grid * grid, 64], random(32 * 64 * grid * grid, 5)).unwrap();
        g.throughput(Throughput::Elements((32 * grid * grid) as u64));
        g.bench_function(name, |bench| {
            bench.iter(|| posterior(black_box(&z), &codebook).unwrap())
        });
    }
    g.finish();
}

fn codec_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("codec");
    for n in [2usize, 256, 512] {
        let mut r = ChaCha8Rng::seed_from_u64(n as u64);
        let idx: Vec<usize> = (0..64 * 64).map(|_| r.random_range(0..n)).collect();
        let blob = codec::serialize(&idx, 1, (64, 64), n).unwrap();
        g.throughput(Throughput::Elements(idx.len() as u64));
        g.bench_function(BenchmarkId::new("serialize", n), |bench| {
            bench.iter(|| codec::serialize(black_box(&idx), 1, (64, 64), n).unwrap())
        });
        g.bench_function(BenchmarkId::new("deserialize", n), |bench| {
            bench.iter(|| codec::deserialize(black_box(&blob)).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = LayerConfig {
        batch_size: 32,
        ..LayerConfig::mnist_pixel_layer()
    };
    let mut layer = HqaLayer::<f32>::new(
        cfg,
        LayerVariant::hqa(ReconTarget::PixelMse),
        &mut init_rng(0, 1),
    )
    .unwrap();
    let x = Tensor::new(
        [32, 1, 32, 32],
        random(32 * 1024, 6).iter().map(|v| v.abs()).collect(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = c.benchmark_group("layer");
    g.sample_size(10);
    g.bench_function("mnist_layer1_train_step_b32", |bench| {
        bench.iter(|| {
            layer
                .train_step(black_box(&x), Target::Input, 0, &mut rng)
                .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, conv, posterior_bench, codec_bench, train_step);
criterion_main!(benches);
