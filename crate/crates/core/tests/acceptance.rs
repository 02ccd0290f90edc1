//! Acceptance criteria AC-1 .. AC-8. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavemoe::data::synthetic::{generate, SyntheticConfig};
use wavemoe::data::{
    balanced_batch, build_windows, impute_and_mask, quality_filter, CorpusManifest, DomainCount,
    RecordEntry, RejectReason, Verdict,
};
use wavemoe::evalbench::{evaluate_series, EvalTask, Fusion};
use wavemoe::model::{
    attention_maps, count_params, forward, forward_with_selections, gradients,
    loss_with_selections, moe_layer, sparse_causal_attention, init_model, ModelConfig,
    ModelWeights,
};
use wavemoe::run::{self, RunConfig};
use wavemoe::train::{prepare_sample, train_loop};
use wavemoe::wavelet::{build_filter_bank, dwt_multi, idwt_multi};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn seconds(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// AC-1: DWT round trip, 100 random length-512 signals, bior2.2 level 2.
fn ac1() -> Outcome {
    let start = Instant::now();
    let bank = build_filter_bank("bior2.2").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..512).map(|_| rng.random_range(-10.0..10.0)).collect();
        let back = idwt_multi(&dwt_multi(&x, &bank, 2).unwrap(), &bank).unwrap();
        for (a, b) in back.iter().zip(&x) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-10 && elapsed < Duration::from_secs(1),
        format!("max |error| {worst:.3e} (< 1e-10), {} (< 1s)", seconds(elapsed)),
    )
}

fn grad_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        n_experts: 4,
        top_k_experts: 2,
        hidden_size: 16,
        ffn_dim: 32,
        shared_ffn_dim: 16,
        router_hidden: 16,
        patch_length: 8,
        top_k_attention: 4,
        use_shared_expert: true,
        load_balance_coeff: 0.01,
        wavelet_loss_weight: 1.0,
        wavelet: "bior2.2".into(),
        seed: 11,
    }
}

/// Biases start at zero and gains at one; move them off those points so
/// every parameter has a generic gradient.
fn randomize_affine(w: &mut ModelWeights, rng: &mut ChaCha8Rng) {
    for (name, t) in w.tensors_mut() {
        if name.ends_with("bias") {
            t.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        } else if name.contains("norm") {
            t.mapv_inplace(|_| rng.random_range(0.6..1.4));
        }
    }
}

// AC-2: analytic gradients vs central finite differences on 200 parameters.
fn ac2() -> Outcome {
    let start = Instant::now();
    let config = grad_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut w = init_model(&config).unwrap();
    randomize_affine(&mut w, &mut rng);
    let bank = build_filter_bank(&config.wavelet).unwrap();
    let raw: Vec<f64> = (0..64)
        .map(|t| (t as f64 * 0.3).sin() + 0.5 * rng.random_range(-1.0..1.0))
        .collect();
    let mut mask = vec![true; 64];
    mask[5] = false;
    let (tokens, targets) = prepare_sample(&raw, &mask, &bank, config.patch_length).unwrap();
    let (_, grad) = gradients(&tokens, &targets, &w, &config, 1.0).unwrap();
    let (_, selections) = forward_with_selections(&tokens, &w, &config).unwrap();

    let sizes: Vec<usize> = w.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    for _ in 0..200 {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let base = w.get_flat(t, flat);
        let loss_at = |v: f64| {
            let mut p = w.clone();
            p.set_flat(t, flat, v);
            loss_with_selections(&tokens, &targets, &p, &config, 1.0, &selections)
                .unwrap()
                .total
        };
        let fd = (loss_at(base + h) - loss_at(base - h)) / (2.0 * h);
        let an = grad.get_flat(t, flat);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
            worst_at = format!("{}[{flat}]", w.tensors()[t].0);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "max relative error {worst:.3e} at {worst_at} (< 1e-4), {} (< 2min)",
            seconds(elapsed)
        ),
    )
}

/// Plain dense causal attention, written out element by element.
fn dense_causal(x: &Array2<f64>, a: &wavemoe::model::weights::Attention, heads: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    let hd = d / heads;
    let q = x.dot(&a.query);
    let k = x.dot(&a.key);
    let v = x.dot(&a.value);
    let mut ctx = Array2::<f64>::zeros((n, d));
    for h in 0..heads {
        for i in 0..n {
            let s: Vec<f64> = (0..=i)
                .map(|j| (0..hd).map(|c| q[[i, h * hd + c]] * k[[j, h * hd + c]]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in 0..hd {
                    ctx[[i, h * hd + c]] += ej / z * v[[j, h * hd + c]];
                }
            }
        }
    }
    ctx.dot(&a.output)
}

// AC-3: routing and attention invariants over 1000 random forward passes.
fn ac3() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut dense_worst: f64 = 0.0;
    let n_pos = 16;
    for pass in 0..1000u64 {
        let config = ModelConfig { seed: pass, ..grad_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + pass);
        let mut w = init_model(&config).unwrap();
        randomize_affine(&mut w, &mut rng);
        let bank = build_filter_bank(&config.wavelet).unwrap();
        let x: Vec<f64> = (0..n_pos * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (tokens, _) = prepare_sample(&x, &vec![true; x.len()], &bank, 8).unwrap();
        let trace = forward(&tokens, &w, &config).unwrap();
        for (l, layer) in trace.router_assignments.iter().enumerate() {
            for (i, r) in layer.iter().enumerate() {
                let mut ids = r.experts.clone();
                ids.sort_unstable();
                ids.dedup();
                let sum: f64 = r.gates.iter().sum();
                if ids.len() != 2 || r.experts.len() != 2 || (sum - 1.0).abs() > 1e-9 || r.gates.iter().any(|&g| g <= 0.0) {
                    failures.push(format!("pass {pass} layer {l} pos {i}: {r:?}"));
                }
            }
        }
        for (l, (tmaps, wmaps)) in attention_maps(&tokens, &w, &config).unwrap().iter().enumerate() {
            for p in tmaps.iter().chain(wmaps) {
                for (i, row) in p.outer_iter().enumerate() {
                    let nz = row.iter().filter(|&&v| v != 0.0).count();
                    let future = row.iter().skip(i + 1).any(|&v| v != 0.0);
                    if (row.sum() - 1.0).abs() > 1e-9 || nz > config.top_k_attention || future || row.iter().any(|&v| v < 0.0) {
                        failures.push(format!("pass {pass} layer {l} attention row {i}"));
                    }
                }
            }
        }

        // Both pathways of a position go through exactly the routed experts:
        // shifting one expert's output bias moves a row iff that expert was
        // selected for it, in the time and the wavelet stream alike.
        let d = config.hidden_size;
        let th = Array2::from_shape_simple_fn((n_pos, d), || rng.random_range(-1.0..1.0));
        let wh = Array2::from_shape_simple_fn((n_pos, d), || rng.random_range(-1.0..1.0));
        let layer = &w.layers[0];
        let base = moe_layer(&th, &wh, layer, &config);
        for e in 0..config.n_experts {
            let mut shifted = layer.clone();
            shifted.experts[e].time.down.bias.mapv_inplace(|b| b + 1.0);
            shifted.experts[e].wavelet.down.bias.mapv_inplace(|b| b + 1.0);
            let out = moe_layer(&th, &wh, &shifted, &config);
            for (i, r) in base.routings.iter().enumerate() {
                let routed = r.experts.contains(&e);
                let t_moved = out.time.row(i) != base.time.row(i);
                let w_moved = out.wavelet.row(i) != base.wavelet.row(i);
                if t_moved != routed || w_moved != routed {
                    failures.push(format!("pass {pass} expert {e} pos {i}: pathways disagree"));
                }
            }
        }

        let a = &w.layers[0].time_attention;
        let hx = Array2::from_shape_simple_fn((n_pos, d), || rng.random_range(-1.0..1.0));
        let sparse = sparse_causal_attention(&hx, a, config.n_heads, n_pos + (pass as usize % 3), None);
        let dense = dense_causal(&hx, a, config.n_heads);
        dense_worst = dense_worst.max((&sparse.output - &dense).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let pass = failures.is_empty() && dense_worst < 1e-12;
    let mut detail = format!(
        "1000 passes, {} violations, k>=n vs dense max diff {dense_worst:.2e} (< 1e-12), {}",
        failures.len(),
        seconds(start.elapsed())
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first: {f}"));
    }
    outcome(pass, detail)
}

// AC-4: filter thresholds and mask rules at window length 4096.
fn ac4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
    let with_missing = |count: usize| {
        let mut v = base.clone();
        // spread the gaps so no run of finite values gets too short
        for i in 0..count {
            v[i * 4096 / count] = f64::NAN;
        }
        quality_filter(&v)
    };
    let v819 = with_missing(819);
    let v820 = with_missing(820);
    let ramp: Vec<f64> = (0..4096).map(|t| t as f64 * 0.5 + 3.0).collect();
    let v_ramp = quality_filter(&ramp);
    let (values, mask) = impute_and_mask(&[1.0, f64::NAN, 0.0, 2.0]);
    let mask_ok = mask == [true, false, false, true] && values == [1.0, 0.0, 0.0, 2.0];
    let elapsed = start.elapsed();
    let pass = v819 == Verdict::Accept
        && v820 == Verdict::Reject(RejectReason::Missing)
        && v_ramp == Verdict::Reject(RejectReason::LowVariability)
        && mask_ok
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "819 missing -> {v819:?}, 820 -> {v820:?}, ramp -> {v_ramp:?}, [1,NaN,0,2] mask {mask:?}, {}",
            seconds(elapsed)
        ),
    )
}

// AC-5: the tiny model learns mixed sinusoids.
fn ac5() -> Outcome {
    let start = Instant::now();
    let run = RunConfig::for_profile("tiny").unwrap();
    let (model, train) = (run.model, run.train);
    let corpus_cfg = SyntheticConfig { n_series: 200, seed: 0, ..SyntheticConfig::default() };
    let (windows, _) = build_windows(generate(&corpus_cfg).into_iter().map(Ok), 4096).unwrap();
    let outcome_t = match train_loop(&windows, &model, &train, None, None) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let hist = &outcome_t.history;
    let initial = hist[0].total;
    let tail = 50.min(hist.len());
    let final_loss = hist[hist.len() - tail..].iter().map(|r| r.total).sum::<f64>() / tail as f64;

    let held_out = SyntheticConfig { n_series: 32, length: 512 + 96, seed: 7, ..SyntheticConfig::default() };
    let task = EvalTask::default();
    let (mut mse, mut naive, mut n) = (0.0, 0.0, 0.0);
    for s in generate(&held_out) {
        match evaluate_series(&outcome_t.state.weights, &model, &s.id, &s.values, &task, Fusion::Time) {
            Ok(Ok(r)) => {
                mse += r.mse;
                naive += r.baseline_mse;
                n += 1.0;
            }
            Ok(Err(reason)) => return outcome(false, format!("series {} skipped: {reason}", s.id)),
            Err(e) => return outcome(false, format!("evaluation failed: {e}")),
        }
    }
    let (mse, naive) = (mse / n, naive / n);
    let elapsed = start.elapsed();
    let pass = windows.len() == 200
        && hist.len() == 2000
        && mse <= 0.8 * naive
        && final_loss <= 0.5 * initial
        && elapsed < Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!(
            "{} windows, {} steps: eval mse {mse:.4} vs persistence {naive:.4} (ratio {:.3} <= 0.8); \
             loss {initial:.4} -> {final_loss:.4} (last-{tail} mean, ratio {:.3} <= 0.5), {}",
            windows.len(),
            hist.len(),
            mse / naive,
            final_loss / initial,
            seconds(elapsed)
        ),
    )
}

/// Parameter count from the architecture description, independent of the
/// library's own counting code.
fn closed_form(c: &ModelConfig) -> (usize, usize) {
    let (d, p, l, e, k) = (c.hidden_size, c.patch_length, c.n_layers, c.n_experts, c.top_k_experts);
    let linear = |i: usize, o: usize| i * o + o;
    let ffn = |f: usize| linear(d, f) + linear(f, d);
    let embed = 2 * linear(p, d);
    let heads = 2 * linear(d, p);
    let final_norm = 2 * d;
    let attention = 2 * 4 * d * d;
    let norms = 4 * d;
    let router = linear(2 * d, c.router_hidden) + linear(c.router_hidden, e);
    let expert = 2 * ffn(c.ffn_dim);
    let shared = if c.use_shared_expert { 2 * ffn(c.shared_ffn_dim) } else { 0 };
    let dense = embed + heads + final_norm + l * (attention + norms + router + shared);
    (dense + l * e * expert, dense + l * k * expert)
}

// AC-6: parameter arithmetic.
fn ac6() -> Outcome {
    let t1 = ModelConfig::full();
    let counts = count_params(&t1);
    let total_dev = counts.total as f64 / 226e6 - 1.0;
    let active_dev = counts.activated as f64 / 100e6 - 1.0;
    let mut mismatches = Vec::new();
    let variants = [
        ModelConfig::tiny(),
        grad_config(),
        ModelConfig { use_shared_expert: false, ..ModelConfig::tiny() },
        ModelConfig { n_layers: 3, n_experts: 6, top_k_experts: 2, ffn_dim: 40, router_hidden: 12, ..ModelConfig::tiny() },
        ModelConfig { hidden_size: 24, n_heads: 3, patch_length: 4, shared_ffn_dim: 8, ..ModelConfig::tiny() },
    ];
    for c in &variants {
        let formula = closed_form(c);
        let counted = count_params(c);
        let stored = init_model(c).unwrap().num_params();
        if formula != (counted.total, counted.activated) || stored != formula.0 {
            mismatches.push(format!("{formula:?} vs {:?} / {stored}", (counted.total, counted.activated)));
        }
    }
    let t1_formula = closed_form(&t1) == (counts.total, counts.activated);
    let pass = total_dev.abs() <= 0.15 && active_dev.abs() <= 0.15 && mismatches.is_empty() && t1_formula;
    outcome(
        pass,
        format!(
            "full total {} ({:+.1}% of 226M), activated {} ({:+.1}% of 100M), shared expert {}; \
             {} tiny configs match the closed form{}",
            counts.total,
            100.0 * total_dev,
            counts.activated,
            100.0 * active_dev,
            if t1.use_shared_expert { "on" } else { "off" },
            variants.len() - mismatches.len(),
            mismatches.first().map(|m| format!("; mismatch {m}")).unwrap_or_default()
        ),
    )
}

fn write_csv_series(path: &Path, series: &[f64]) {
    let mut body = String::from("value\n");
    for v in series {
        body.push_str(&format!("{v}\n"));
    }
    std::fs::write(path, body).unwrap();
}

/// preprocess -> train -> evaluate in `root`; returns the bytes to compare.
fn pipeline(root: &Path) -> wavemoe::Result<Vec<(String, Vec<u8>)>> {
    let raw = root.join("raw");
    let eval = root.join("eval");
    std::fs::create_dir_all(&raw)?;
    std::fs::create_dir_all(&eval)?;
    let synth = generate(&SyntheticConfig { n_series: 6, length: 8192, seed: 3, ..SyntheticConfig::default() });
    for s in &synth {
        write_csv_series(&raw.join(format!("{}.csv", s.id)), &s.values);
    }
    let held = generate(&SyntheticConfig { n_series: 3, length: 700, seed: 4, ..SyntheticConfig::default() });
    for s in &held {
        write_csv_series(&eval.join(format!("{}.csv", s.id)), &s.values);
    }
    let mut config = RunConfig::for_profile("tiny")?;
    config.set_seed(17);
    config.train.total_steps = 100;
    config.train.batch_size = 16;
    let corpus = root.join("corpus.bin");
    run::preprocess(&raw, None, &corpus, &config.data)?;
    let out = root.join("run");
    run::train(&corpus, &config, &out, None)?;
    let report = root.join("report");
    run::evaluate(&out.join("checkpoint.bin"), &eval, &config.eval, &report, false)?;
    let files = [
        corpus.clone(),
        out.join("checkpoint.bin"),
        out.join("run_config.toml"),
        report.join("report.jsonl"),
        report.join("report.txt"),
    ];
    files
        .iter()
        .map(|f| Ok((f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(f)?)))
        .collect()
}

// AC-7: bitwise determinism of the whole pipeline with one worker.
fn ac7() -> Outcome {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| pool.install(|| pipeline(&dir.path().join(name))))
        .collect();
    let (a, b) = match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let differing: Vec<&str> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let sizes: Vec<String> = a.iter().map(|(n, bytes)| format!("{n} {}B", bytes.len())).collect();
    outcome(
        differing.is_empty(),
        format!(
            "two runs, seed 17, 100 steps: {} identical [{}]{}, {}",
            if differing.is_empty() { "all files" } else { "NOT all files" },
            sizes.join(", "),
            if differing.is_empty() { String::new() } else { format!("; differ: {differing:?}") },
            seconds(start.elapsed())
        ),
    )
}

// AC-8: domain-balanced sampling with a 100:1 imbalance.
fn ac8() -> Outcome {
    let mut records = Vec::new();
    for i in 0..1010u64 {
        records.push(RecordEntry { offset: i, domain: u32::from(i >= 1000) });
    }
    let manifest = CorpusManifest {
        version: wavemoe::data::corpus::CORPUS_VERSION,
        window_length: 4096,
        domains: vec![
            DomainCount { name: "large".into(), count: 1000 },
            DomainCount { name: "small".into(), count: 10 },
        ],
        records,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let picks = balanced_batch(&manifest, 10_000, &mut rng).unwrap();
    let small = picks.iter().filter(|&&i| i >= 1000).count() as f64 / picks.len() as f64;
    let large = 1.0 - small;
    let pass = picks.len() == 10_000 && (small - 0.5).abs() <= 0.02;
    outcome(pass, format!("10000 draws: large {large:.4}, small {small:.4} (0.5 +- 0.02)"))
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC-")).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("AC-1", ac1),
        ("AC-2", ac2),
        ("AC-3", ac3),
        ("AC-4", ac4),
        ("AC-5", ac5),
        ("AC-6", ac6),
        ("AC-7", ac7),
        ("AC-8", ac8),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let result = std::panic::catch_unwind(check)
            .unwrap_or_else(|_| outcome(false, "panicked"));
        println!("{name} {} {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
        if !result.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
