use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavemoe::data::{
    build_windows, impute_and_mask, quality_filter, read_corpus, write_corpus, RawSeries,
    Verdict, Window,
};
use wavemoe::evalbench::{evaluate_series, metrics, rollout, EvalTask, Fusion};
use wavemoe::model::ops::top_k_indices;
use wavemoe::model::{forward, init_model, ModelConfig};
use wavemoe::tokenize::{instance_normalize, tokenize};
use wavemoe::train::{
    joint_loss, lr_at, prepare_sample, warmup_steps, TrainConfig,
};
use wavemoe::wavelet::{build_filter_bank, dwt_multi, dwt_step, idwt_multi, FilterBank};

fn bank(name: &str) -> FilterBank {
    build_filter_bank(name).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// CDF 5/3 lifting with periodic extension: predict odd samples from their
/// even neighbours, then update the evens. Scaled to the orthonormal-style
/// normalization (approx * sqrt2, detail / -sqrt2).
fn lifting_53(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let h = n / 2;
    let d: Vec<f64> = (0..h)
        .map(|k| x[2 * k + 1] - 0.5 * (x[2 * k] + x[(2 * k + 2) % n]))
        .collect();
    let s: Vec<f64> = (0..h)
        .map(|k| x[2 * k] + 0.25 * (d[(k + h - 1) % h] + d[k]))
        .collect();
    let r2 = std::f64::consts::SQRT_2;
    (
        s.iter().map(|v| v * r2).collect(),
        d.iter().map(|v| -v / r2).collect(),
    )
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn even_signal(max_half: usize) -> impl Strategy<Value = Vec<f64>> {
    (2..=max_half).prop_flat_map(|h| signal(2 * h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bior22_step_matches_lifting(x in even_signal(128)) {
        let (a, d) = dwt_step(&x, &bank("bior2.2")).unwrap();
        let (la, ld) = lifting_53(&x);
        prop_assert!(max_diff(&a, &la) < 1e-12);
        prop_assert!(max_diff(&d, &ld) < 1e-12);
    }

    #[test]
    fn two_level_matches_lifting(x in (1usize..=64).prop_flat_map(|q| signal(4 * q))) {
        let p = dwt_multi(&x, &bank("bior2.2"), 2).unwrap();
        let (a1, d1) = lifting_53(&x);
        let (a2, d2) = lifting_53(&a1);
        prop_assert!(max_diff(p.detail(1), &d1) < 1e-12);
        prop_assert!(max_diff(p.detail(2), &d2) < 1e-12);
        prop_assert!(max_diff(&p.approx, &a2) < 1e-12);
    }

    #[test]
    fn round_trip_every_even_length(h in 2usize..=2048, seed in any::<u64>(), haar in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..2 * h).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b = bank(if haar { "haar" } else { "bior2.2" });
        let levels = (2 * h).trailing_zeros().min(4) as usize;
        for l in 1..=levels {
            let back = idwt_multi(&dwt_multi(&x, &b, l).unwrap(), &b).unwrap();
            prop_assert!(max_diff(&back, &x) < 1e-10);
        }
    }

    #[test]
    fn linearity(
        q in 1usize..=32,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4 * q;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        for name in ["haar", "bior2.2"] {
            let fb = bank(name);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let pm = dwt_multi(&mix, &fb, 2).unwrap();
            let px = dwt_multi(&x, &fb, 2).unwrap();
            let py = dwt_multi(&y, &fb, 2).unwrap();
            let combine = |u: &[f64], v: &[f64]| -> Vec<f64> {
                u.iter().zip(v).map(|(s, t)| a * s + b * t).collect()
            };
            prop_assert!(max_diff(&pm.approx, &combine(&px.approx, &py.approx)) < 1e-10);
            for l in 0..2 {
                prop_assert!(max_diff(&pm.details[l], &combine(&px.details[l], &py.details[l])) < 1e-10);
            }
        }
    }

    #[test]
    fn haar_energy(x in even_signal(256)) {
        let (a, d) = dwt_step(&x, &bank("haar")).unwrap();
        let e = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>();
        prop_assert!((e(&x) - e(&a) - e(&d)).abs() < 1e-10 * e(&x).max(1.0));
    }

    #[test]
    fn constants_have_zero_details(c in -100.0f64..100.0, q in 1usize..=64) {
        for name in ["haar", "bior2.2"] {
            let p = dwt_multi(&vec![c; 4 * q], &bank(name), 2).unwrap();
            for band in &p.details {
                prop_assert!(band.iter().all(|&v| v == 0.0), "{name}: {band:?}");
            }
        }
    }

    #[test]
    fn normalization_round_trip(x in prop::collection::vec(-1e3f64..1e3, 2..256)) {
        let mask = vec![true; x.len()];
        let (z, stats) = instance_normalize(&x, &mask).unwrap();
        let back: Vec<f64> = z.iter().map(|&v| stats.denormalize(v)).collect();
        prop_assert!(max_diff(&back, &x) < 1e-9);
    }

    #[test]
    fn token_counts_agree(p_quarter in 1usize..=4, blocks in 1usize..=16) {
        let p = 4 * p_quarter;
        let c = 4 * p * blocks;
        let x: Vec<f64> = (0..c).map(|t| (t as f64 * 0.37).sin()).collect();
        let t = tokenize(&x, &vec![true; c], &bank("bior2.2"), p).unwrap();
        prop_assert_eq!(t.time_patches.nrows(), c / p);
        prop_assert_eq!(t.time_patches.dim(), t.wavelet_patches.dim());
    }

    #[test]
    fn top_k_matches_sorting_oracle(
        values in prop::collection::vec(prop::sample::select(vec![-2.0f64, -1.0, 0.0, 0.5, 1.0, 3.0]), 1..40),
        k in 0usize..45,
    ) {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
        prop_assert_eq!(top_k_indices(&values, k), order);
    }

    #[test]
    fn metric_symmetry(
        pair in (1usize..64).prop_flat_map(|n| (signal(n), signal(n)))
    ) {
        let (a, b) = pair;
        let (m1, a1) = metrics(&a, &b).unwrap();
        let (m2, a2) = metrics(&b, &a).unwrap();
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(a1, a2);
        prop_assert!(m1 >= 0.0 && a1 >= 0.0);
    }

    #[test]
    fn schedule_shape(total in 1u64..3000, ratio in 0.0f64..0.5, base in 1e-5f64..1e-2) {
        let cfg = TrainConfig { total_steps: total, warmup_ratio: ratio, base_lr: base, ..TrainConfig::default() };
        let w = warmup_steps(&cfg);
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, &cfg).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((peak - base).abs() <= 1e-15 * base);
        prop_assert_eq!(lrs[w as usize], peak);
        for s in 0..w as usize {
            prop_assert!(lrs[s] <= lrs[s + 1]);
        }
        for s in w as usize..total as usize {
            prop_assert!(lrs[s + 1] <= lrs[s]);
        }
        // No jumps bigger than a full warmup increment or a cosine slope step.
        let max_jump = base / (w.max(1) as f64) + std::f64::consts::PI * base / (total - w).max(1) as f64;
        for s in 0..total as usize {
            prop_assert!((lrs[s + 1] - lrs[s]).abs() <= max_jump * (1.0 + 1e-9));
        }
        prop_assert!(lr_at(total + 1, &cfg).is_err());
    }
}

/// Circular patch distance; periodized transforms wrap at the ends.
fn patch_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn alignment_soundness(seed in any::<u64>(), l_idx in 0usize..3, p_idx in 0usize..2, bump in 0.1f64..5.0) {
        let p = [4usize, 8][p_idx];
        let c = [16usize, 32, 64][l_idx];
        prop_assume!(c % (4 * p) == 0);
        let b = bank("bior2.2");
        let w = b.max_filter_length().div_ceil(p) + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = vec![true; c];
        let base = tokenize(&x, &mask, &b, p).unwrap();
        let n = c / p;
        for i in 0..c {
            let mut y = x.clone();
            y[i] += bump;
            let t = tokenize(&y, &mask, &b, p).unwrap();
            let j = i / p;
            for r in 0..n {
                let changed = base.wavelet_patches.row(r) != t.wavelet_patches.row(r);
                if changed {
                    prop_assert!(patch_distance(r, j, n) <= w, "value {i} (patch {j}) moved patch {r}");
                }
            }
        }
    }

    #[test]
    fn masked_values_never_reach_the_loss(seed in any::<u64>(), frac in 0.05f64..0.5) {
        let config = ModelConfig { hidden_size: 16, ffn_dim: 16, shared_ffn_dim: 8, router_hidden: 16, ..ModelConfig::tiny() };
        let weights = init_model(&config).unwrap();
        let fb = bank("bior2.2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 64;
        let x: Vec<f64> = (0..c).map(|t| (t as f64 / 5.0).sin() + rng.random_range(-0.1..0.1)).collect();
        let mut mask: Vec<bool> = (0..c).map(|_| rng.random::<f64>() >= frac).collect();
        mask[0] = true;
        mask[c - 1] = true;
        let loss = |values: &[f64]| {
            let (tokens, targets) = prepare_sample(values, &mask, &fb, config.patch_length).unwrap();
            let trace = forward(&tokens, &weights, &config).unwrap();
            joint_loss(&trace, &targets, &config, 1.0).unwrap()
        };
        let mut flipped = x.clone();
        for (v, &m) in flipped.iter_mut().zip(&mask) {
            if !m {
                *v = rng.random_range(-1e6..1e6);
            }
        }
        let (a, b) = (loss(&x), loss(&flipped));
        prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
        prop_assert_eq!(a.time.to_bits(), b.time.to_bits());
        prop_assert_eq!(a.wavelet.to_bits(), b.wavelet.to_bits());
    }

    #[test]
    fn joint_loss_zero_iff_targets_hit(seed in any::<u64>()) {
        let config = ModelConfig { load_balance_coeff: 0.0, ..ModelConfig::tiny() };
        let weights = init_model(&config).unwrap();
        let fb = bank("bior2.2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (values, mask) = impute_and_mask(
            &x.iter().map(|&v| if v > 0.8 { f64::NAN } else { v }).collect::<Vec<_>>(),
        );
        let (tokens, targets) = prepare_sample(&values, &mask, &fb, 8).unwrap();
        let mut trace = forward(&tokens, &weights, &config).unwrap();
        let l = joint_loss(&trace, &targets, &config, 1.0).unwrap();
        prop_assert!(l.total > 0.0 && l.time >= 0.0 && l.wavelet >= 0.0);

        // Hit every supervised entry; unsupervised ones stay arbitrary.
        for ((p, &t), &m) in trace.time_predictions.iter_mut().zip(&targets.time).zip(&targets.time_mask) {
            if m { *p = t; }
        }
        for ((p, &t), &m) in trace.wavelet_predictions.iter_mut().zip(&targets.wavelet).zip(&targets.wavelet_mask) {
            if m { *p = t; }
        }
        let zero = joint_loss(&trace, &targets, &config, 1.0).unwrap();
        prop_assert_eq!(zero.total, 0.0);

        // Any single supervised miss makes it positive again.
        if let Some(idx) = targets.time_mask.iter().position(|&m| m) {
            let cols = trace.time_predictions.ncols();
            trace.time_predictions[[idx / cols, idx % cols]] += 1e-3;
            prop_assert!(joint_loss(&trace, &targets, &config, 1.0).unwrap().total > 0.0);
        }
    }
}

/// Values from a permutation, so every raw value is unique but no series is
/// a ramp.
fn unique_series(rng: &mut ChaCha8Rng, count: usize, window: usize) -> Vec<RawSeries> {
    const M: u64 = 1_000_003;
    let mut next = 0u64;
    (0..count)
        .map(|s| {
            let len = rng.random_range(0..5 * window);
            let values = (0..len)
                .map(|_| {
                    next += 1;
                    let v = (next * 7919) % M;
                    if rng.random::<f64>() < 0.03 { f64::NAN } else { v as f64 }
                })
                .collect();
            RawSeries {
                id: format!("s{s}"),
                domain: format!("d{}", s % 2),
                values,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn windows_conserve_and_never_repeat_values(seed in any::<u64>(), count in 1usize..6) {
        let window = 256;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series = unique_series(&mut rng, count, window);
        let (windows, stats) = build_windows(series.clone().into_iter().map(Ok), window).unwrap();
        prop_assert_eq!(windows.len() as u64, stats.accepted());
        let full: u64 = stats.domains.values().map(|d| d.full_windows).sum();
        let packed: u64 = stats.domains.values().map(|d| d.packed_windows).sum();
        prop_assert_eq!(windows.len() as u64, full + packed);

        let raw: HashSet<u64> = series.iter().flat_map(|s| s.values.iter())
            .filter(|v| v.is_finite()).map(|v| *v as u64).collect();
        let mut seen = HashSet::new();
        for w in &windows {
            prop_assert_eq!(w.values.len(), window);
            // Re-check idempotence on what was emitted.
            prop_assert_eq!(quality_filter(&w.masked_values()), Verdict::Accept);
            prop_assert_eq!(quality_filter(&w.values_f64()), Verdict::Accept);
            for (&v, &m) in w.values.iter().zip(&w.mask) {
                if !m {
                    prop_assert_eq!(v, 0.0);
                    continue;
                }
                let v = v as u64;
                prop_assert!(raw.contains(&v));
                prop_assert!(seen.insert(v), "value {v} appears twice");
            }
        }
    }

    #[test]
    fn corpus_round_trip(seed in any::<u64>(), n in 0usize..6, len in 1usize..70) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows: Vec<Window> = (0..n)
            .map(|i| {
                let mask: Vec<bool> = (0..len).map(|_| rng.random::<f64>() > 0.2).collect();
                Window {
                    values: mask.iter().map(|&m| if m { rng.random_range(-9.0f32..9.0) } else { 0.0 }).collect(),
                    mask,
                    domain: format!("dom{}", i % 3),
                    fragment_boundaries: vec![(len / 2) as u32],
                    source_ids: vec![format!("src{i}"), "x".into()],
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        if n == 0 {
            // An empty corpus still needs a window length; none to infer.
            return Ok(());
        }
        let manifest = write_corpus(&windows, &path).unwrap();
        let (back_manifest, back) = read_corpus(&path).unwrap();
        prop_assert_eq!(manifest, back_manifest);
        prop_assert_eq!(back, windows);
    }
}

#[test]
fn forward_and_rollout_are_deterministic() {
    let config = ModelConfig::tiny();
    let weights = init_model(&config).unwrap();
    let x: Vec<f64> = (0..128).map(|t| (t as f64 / 4.0).sin()).collect();
    let fb = bank("bior2.2");
    let (tokens, _) = prepare_sample(&x, &vec![true; 128], &fb, 8).unwrap();
    let a = forward(&tokens, &weights, &config).unwrap();
    let b = forward(&tokens, &init_model(&config).unwrap(), &config).unwrap();
    let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.time_predictions), bits(&b.time_predictions));
    assert_eq!(bits(&a.wavelet_predictions), bits(&b.wavelet_predictions));
    assert_eq!(a.router_assignments, b.router_assignments);
    assert_eq!(a.load_balance_loss.to_bits(), b.load_balance_loss.to_bits());

    let f1 = rollout(&weights, &config, &x, 32, Fusion::Mean).unwrap();
    let f2 = rollout(&weights, &config, &x, 32, Fusion::Mean).unwrap();
    assert_eq!(
        f1.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        f2.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn evaluation_ignores_values_after_the_context() {
    let config = ModelConfig::tiny();
    let weights = init_model(&config).unwrap();
    let task = EvalTask { context_length: 128, horizon: 16, ..EvalTask::default() };
    let series: Vec<f64> = (0..400).map(|t| (t as f64 / 6.0).sin()).collect();
    let a = evaluate_series(&weights, &config, "s", &series, &task, Fusion::Time).unwrap().unwrap();
    let mut altered = series.clone();
    for v in &mut altered[400 - 16..] {
        *v += 100.0;
    }
    let b = evaluate_series(&weights, &config, "s", &altered, &task, Fusion::Time).unwrap().unwrap();
    assert_eq!(a.forecast, b.forecast);
    assert_ne!(a.mse, b.mse);
}
