mod common;

use common::{randn, rng};
use hqa_core::kernels::sq_dist;
use hqa_core::quantizer::*;
use hqa_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn book(values: &[f64], dim: usize) -> Codebook<f64> {
    Codebook::from_embeddings(
        Tensor::from_f64([values.len() / dim, dim], values).unwrap(),
        true,
    )
    .unwrap()
}

fn rows(values: &[f64], dim: usize) -> Tensor<f64> {
    Tensor::from_f64([values.len() / dim, dim], values).unwrap()
}

#[test]
fn posterior_two_code_example() {
    // Scalar evaluation of exp(−½d²)/Σ: logits [0, −0.5].
    let p = posterior(&rows(&[0.0], 1), &book(&[0.0, 1.0], 1)).unwrap();
    assert!((p.probs.data()[0] - 0.622_459_331_201_854_6).abs() < 1e-12);
    assert!((p.probs.data()[1] - 0.377_540_668_798_145_4).abs() < 1e-12);
    assert_eq!(p.logits.data(), &[0.0, -0.5]);
}

#[test]
fn posterior_uniform_when_equidistant() {
    // Four corners of a square around the origin.
    let cb = book(&[1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0], 2);
    let p = posterior(&rows(&[0.0, 0.0], 2), &cb).unwrap();
    for &v in p.probs.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn posterior_rows_normalised_and_translation_invariant(
        z in prop::collection::vec(-3.0f64..3.0, 6),
        e in prop::collection::vec(-3.0f64..3.0, 8),
        shift in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let cb = book(&e, 2);
        let zt = rows(&z, 2);
        let p = posterior(&zt, &cb).unwrap();
        for r in p.probs.data().chunks(4) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
        let zs: Vec<f64> = z.iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect();
        let es: Vec<f64> = e.iter().enumerate().map(|(i, v)| v + shift[i % 2]).collect();
        let ps = posterior(&rows(&zs, 2), &book(&es, 2)).unwrap();
        prop_assert!(ps.probs.max_abs_diff(&p.probs) < 1e-9);
    }
}

#[test]
fn soft_quantization_is_convex_combination() {
    let cb = book(&[0.0, 1.0], 1);
    let onehot = PosteriorDistribution::from_probs(rows(&[0.0, 1.0], 2)).unwrap();
    let z = mix_codes(&onehot.probs, &cb).unwrap();
    assert_eq!(z.data(), &[1.0]);
    let cb4 = book(&[0.0, 0.0, 2.0, 0.0, 0.0, 4.0, 2.0, 4.0], 2);
    let uniform = Tensor::full([1, 4], 0.25);
    assert_eq!(mix_codes(&uniform, &cb4).unwrap().data(), &[1.0, 2.0]);

    let post = posterior(&rows(&[0.3], 1), &cb).unwrap();
    let mut r = rng(5);
    for _ in 0..1000 {
        let zq = quantize_soft(&post, &cb, 0.5, &mut r).unwrap();
        let v = zq.data()[0];
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert!(quantize_soft(&post, &cb, 0.0, &mut r).is_err());
}

#[test]
fn hard_quantization_samples_posterior() {
    let cb = book(&[0.0, 1.0], 1);
    let certain = PosteriorDistribution::from_probs(rows(&[1.0, 0.0], 2)).unwrap();
    let mut r = rng(1);
    for _ in 0..200 {
        let (idx, zq) = quantize_hard(&certain, &cb, &mut r).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(zq.data(), cb.row(0));
    }
    let half = PosteriorDistribution::from_probs(rows(&[0.5, 0.5], 2)).unwrap();
    let zeros = (0..10_000)
        .filter(|_| quantize_hard(&half, &cb, &mut r).unwrap().0[0] == 0)
        .count();
    let f = zeros as f64 / 1e4;
    assert!((0.47..=0.53).contains(&f), "{f}");
}

#[test]
fn hard_quantization_is_seeded_and_returns_code_rows() {
    let cb = book(&(0..16).map(|v| v as f64 * 0.1).collect::<Vec<_>>(), 2);
    let z = randn(&[30, 2], &mut rng(3));
    let post = posterior(&z, &cb).unwrap();
    let a = quantize_hard(&post, &cb, &mut rng(11)).unwrap();
    let b = quantize_hard(&post, &cb, &mut rng(11)).unwrap();
    assert_eq!(a, b);
    for (p, &k) in a.0.iter().enumerate() {
        assert_eq!(&a.1.data()[p * 2..p * 2 + 2], cb.row(k));
    }
}

#[test]
fn hard_quantization_chi_square_against_posterior() {
    let cb = book(&[0.0, 0.4, 1.0, 1.7], 1);
    let post = posterior(&rows(&[0.6], 1), &cb).unwrap();
    let n = 10_000usize;
    let mut counts = [0usize; 4];
    let mut r = rng(99);
    for _ in 0..n {
        counts[quantize_hard(&post, &cb, &mut r).unwrap().0[0]] += 1;
    }
    let chi2: f64 = (0..4)
        .map(|k| {
            let e = post.probs.data()[k] * n as f64;
            (counts[k] as f64 - e).powi(2) / e
        })
        .sum();
    // χ²(3) critical value at p = 0.001.
    assert!(chi2 < 16.266, "chi2 = {chi2}");
}

#[test]
fn argmin_picks_nearest_with_low_index_ties() {
    let cb = book(&[0.0, 1.0], 1);
    assert_eq!(quantize_argmin(&rows(&[0.1], 1), &cb).unwrap().0, vec![0]);
    assert_eq!(quantize_argmin(&rows(&[0.5], 1), &cb).unwrap().0, vec![0]);
    assert_eq!(quantize_argmin(&rows(&[0.9], 1), &cb).unwrap().0, vec![1]);
}

#[test]
fn argmin_agrees_with_posterior_mode() {
    let mut r = rng(21);
    for _ in 0..100 {
        let cb = Codebook::from_embeddings(randn(&[8, 3], &mut r), true).unwrap();
        let z = randn(&[1, 3], &mut r);
        let (idx, _) = quantize_argmin(&z, &cb).unwrap();
        assert_eq!(posterior(&z, &cb).unwrap().mode(), idx);
    }
}

#[test]
fn entropy_loss_examples_and_direct_sum() {
    let uniform = PosteriorDistribution::from_probs(Tensor::full([1, 4], 0.25f64)).unwrap();
    assert!((entropy_loss(&uniform) + 4f64.ln()).abs() < 1e-12);
    let onehot = PosteriorDistribution::from_probs(rows(&[0.0, 1.0, 0.0, 0.0], 4)).unwrap();
    assert_eq!(entropy_loss(&onehot), 0.0);

    let mut r = rng(8);
    for _ in 0..50 {
        let cb = Codebook::from_embeddings(randn(&[4, 2], &mut r), true).unwrap();
        let z = randn(&[5, 2], &mut r);
        let post = posterior(&z, &cb).unwrap();
        let direct: f64 = post
            .probs
            .data()
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>()
            / 5.0;
        let got = entropy_loss(&post);
        assert!((got - direct).abs() < 1e-8);
        assert!(got <= 0.0 && got >= -(4f64.ln()) - 1e-12);
    }
}

#[test]
fn commitment_loss_examples() {
    let cb = book(&[0.0, 1.0], 1);
    let z = rows(&[0.0], 1);
    let uniform = PosteriorDistribution::from_probs(rows(&[0.5, 0.5], 2)).unwrap();
    assert_eq!(commitment_loss(&uniform, &z, &cb).unwrap(), 0.5);
    let on_one = PosteriorDistribution::from_probs(rows(&[0.0, 1.0], 2)).unwrap();
    assert_eq!(commitment_loss(&on_one, &z, &cb).unwrap(), 1.0);
    let on_zero = PosteriorDistribution::from_probs(rows(&[1.0, 0.0], 2)).unwrap();
    assert_eq!(commitment_loss(&on_zero, &z, &cb).unwrap(), 0.0);
}

#[test]
fn tempered_posterior_converges_to_argmin() {
    let mut r = rng(31);
    let mut checked = 0;
    while checked < 200 {
        let cb = Codebook::from_embeddings(randn(&[8, 4], &mut r), true).unwrap();
        let z = randn(&[1, 4], &mut r);
        let d = sq_distances(&z, &cb).unwrap();
        let mut sorted: Vec<f64> = d.data().iter().map(|v| v.sqrt()).collect();
        sorted.sort_by(f64::total_cmp);
        if sorted[1] - sorted[0] < 0.1 {
            continue;
        }
        checked += 1;
        let post = posterior_tempered(&z, &cb, 1e-4).unwrap();
        let (idx, _) = quantize_argmin(&z, &cb).unwrap();
        assert_eq!(post.mode(), idx);
        assert!(post.probs.data()[idx[0]] > 1.0 - 1e-3);
    }
}

#[test]
fn one_hot_limit_recovers_vq_terms_exactly() {
    let mut r = rng(41);
    for _ in 0..100 {
        let cb = Codebook::from_embeddings(randn(&[4, 3], &mut r), true).unwrap();
        let z = randn(&[1, 3], &mut r);
        let k = r.random_range(0..4);
        let mut probs = vec![0.0; 4];
        probs[k] = 1.0;
        let post = PosteriorDistribution::from_probs(rows(&probs, 4)).unwrap();
        assert_eq!(entropy_loss(&post), 0.0);
        let c = commitment_loss(&post, &z, &cb).unwrap();
        assert_eq!(c, sq_dist(z.data(), cb.row(k)));
        let naive: f64 = z
            .data()
            .iter()
            .zip(cb.row(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((c - naive).abs() < 1e-12);
    }
}

#[test]
fn tape_losses_match_pure_losses() {
    let mut r = rng(51);
    for _ in 0..20 {
        let cb = Codebook::from_embeddings(randn(&[8, 3], &mut r), true).unwrap();
        let z = randn(&[6, 3], &mut r);
        let post = posterior(&z, &cb).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let ev = cb.on_tape(&mut tape);
        let tp = posterior_on_tape(&mut tape, zv, ev).unwrap();
        let h = entropy_on_tape(&mut tape, &tp).unwrap();
        let c = commitment_on_tape(&mut tape, &tp).unwrap();
        assert!(tape.value(tp.probs).max_abs_diff(&post.probs) < 1e-12);
        assert!((tape.value(h).item() - entropy_loss(&post)).abs() < 1e-10);
        assert!((tape.value(c).item() - commitment_loss(&post, &z, &cb).unwrap()).abs() < 1e-10);
    }
}

fn far_resets(dim: usize, trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut far = 0;
    for trial in 0..trials {
        let mut cb = Codebook::<f64>::from_embeddings(randn(&[4, dim], &mut r), true).unwrap();
        let mut acc = UsageAccumulator::new(4);
        acc.window_batches = 1;
        let ev = observe_and_maybe_reset(
            &mut acc,
            &[2, 2, 2, 0, 1, 2, 2, 2],
            &mut cb,
            trial,
            10_000,
            &mut r,
        );
        let ev = ev.expect("an unused code triggers a reset");
        assert_eq!((ev.reset, ev.donor), (3, 2));
        if sq_dist(cb.row(ev.reset), cb.row(ev.donor)).sqrt() >= 0.1 {
            far += 1;
        }
    }
    far
}

#[test]
fn reset_lands_near_donor_with_high_probability() {
    // P(chi2_48 > 100) = 1.6e-5, so at most one far reset in 1000.
    for dim in [2, 16, 32, 48] {
        let far = far_resets(dim, 1000, 61 + dim as u64);
        assert!(far <= 1, "D={dim}: {far} resets landed too far");
    }
}

#[test]
fn reset_distance_tail_at_d64_matches_chi_square() {
    // ||eps||^2 / 0.01^2 ~ chi2_64, tail above 100 is 2.69e-3.
    let far = far_resets(64, 4000, 7);
    let expected = 4000.0 * 2.686e-3;
    let sd = (4000.0 * 2.686e-3 * (1.0 - 2.686e-3_f64)).sqrt();
    assert!(
        (far as f64 - expected).abs() < 4.0 * sd,
        "far={far} expected {expected:.1}"
    );
}

#[test]
fn ema_update_converges_to_constant_input() {
    let mut cb = Codebook::<f64>::from_embeddings(rows(&[0.3, -0.2, 1.0, 1.0], 2), false).unwrap();
    let v = [2.0, -1.5];
    let z = rows(&[v[0], v[1], v[0], v[1], v[0], v[1]], 2);
    for _ in 0..100 {
        ema_kmeans_update(&mut cb, &z, &[0, 0, 0]).unwrap();
    }
    // An unassigned code keeps its location while its mass dominates epsilon.
    assert!((cb.row(1)[0] - 1.0).abs() < 1e-3 && (cb.row(1)[1] - 1.0).abs() < 1e-3);
    for _ in 0..2900 {
        ema_kmeans_update(&mut cb, &z, &[0, 0, 0]).unwrap();
    }
    assert!((cb.row(0)[0] - v[0]).abs() < 1e-3 && (cb.row(0)[1] - v[1]).abs() < 1e-3);
}

#[test]
fn ema_with_unit_decay_leaves_embeddings_unchanged() {
    let start = rows(&[0.3, -0.2, 1.0, 1.0], 2);
    let mut cb = Codebook::<f64>::from_embeddings(start.clone(), false).unwrap();
    cb.ema.as_mut().unwrap().decay = 1.0;
    ema_kmeans_update(&mut cb, &rows(&[5.0, 5.0], 2), &[1]).unwrap();
    assert!(cb.embeddings().max_abs_diff(&start) < 1e-12);
    let mut learned = book(&[0.0, 1.0], 1);
    assert!(ema_kmeans_update(&mut learned, &rows(&[0.0], 1), &[0]).is_err());
}
