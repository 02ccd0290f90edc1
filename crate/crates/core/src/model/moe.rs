//! Shared routing over time/wavelet token pairs.
//!
//! One MLP gate scores the concatenation `[time_h, wavelet_h]`; the top-k
//! experts it selects process both tokens at that position, each through the
//! expert's branch for that pathway.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::Serialize;

use super::config::ModelConfig;
use super::ops::{
    ffn_backward, ffn_forward, gelu_with_slope, linear_backward, linear_forward,
    rmsnorm_backward, rmsnorm_forward, softmax, top_k_indices, FfnCache,
};
use super::weights::{Expert, Layer, Router};

/// Experts chosen for one token pair, ascending, with renormalized gates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Gates are a softmax over the selected logits only.
pub fn select_experts(logits: &[f64], top_k: usize, frozen: Option<&[usize]>) -> Routing {
    let experts = match frozen {
        Some(sel) => sel.to_vec(),
        None => top_k_indices(logits, top_k),
    };
    let picked = Array1::from_iter(experts.iter().map(|&e| logits[e]));
    let gates = softmax(picked.view()).to_vec();
    Routing { experts, gates }
}

pub(crate) struct RouterCache {
    input: Array2<f64>,
    slope: Array2<f64>,
    act: Array2<f64>,
    pub logits: Array2<f64>,
}

pub(crate) fn router_forward(z: Array2<f64>, router: &Router) -> RouterCache {
    let pre = linear_forward(&z, &router.hidden);
    let (act, slope) = gelu_with_slope(&pre);
    let logits = linear_forward(&act, &router.logits);
    RouterCache {
        input: z,
        slope,
        act,
        logits,
    }
}

fn router_backward(cache: &RouterCache, router: &Router, dlogits: &Array2<f64>, grad: &mut Router) -> Array2<f64> {
    let mut dact = linear_backward(&cache.act, &router.logits, dlogits, &mut grad.logits);
    dact *= &cache.slope;
    linear_backward(&cache.input, &router.hidden, &dact, &mut grad.hidden)
}

/// Routes a single pair through the router MLP.
pub fn route_pair(time_h: &[f64], wavelet_h: &[f64], router: &Router, top_k: usize) -> Routing {
    let z: Vec<f64> = time_h.iter().chain(wavelet_h).copied().collect();
    let z = Array2::from_shape_vec((1, z.len()), z).expect("row vector");
    let cache = router_forward(z, router);
    select_experts(cache.logits.row(0).as_slice().expect("contiguous"), top_k, None)
}

/// Applies both branches of one expert; no cross-branch mixing.
pub fn expert_apply(
    time_h: &Array2<f64>,
    wavelet_h: &Array2<f64>,
    expert: &Expert,
) -> (Array2<f64>, Array2<f64>) {
    let (t, _) = ffn_forward(time_h.clone(), &expert.time);
    let (w, _) = ffn_forward(wavelet_h.clone(), &expert.wavelet);
    (t, w)
}

/// `n_experts * sum_e f_e * p_e`: `f_e` is the share of pairs whose top-k
/// contains `e`, `p_e` the mean full-softmax router probability of `e`.
/// Equals `top_k` under perfectly uniform routing.
pub fn load_balance_loss(logits: &Array2<f64>, routings: &[Routing]) -> f64 {
    let (fractions, mean_probs) = balance_statistics(logits, routings);
    logits.ncols() as f64 * fractions.dot(&mean_probs)
}

fn balance_statistics(logits: &Array2<f64>, routings: &[Routing]) -> (Array1<f64>, Array1<f64>) {
    let (n, e) = logits.dim();
    let mut fractions = Array1::zeros(e);
    for r in routings {
        for &x in &r.experts {
            fractions[x] += 1.0;
        }
    }
    fractions /= n as f64;
    let mut mean_probs = Array1::zeros(e);
    for row in logits.outer_iter() {
        mean_probs += &softmax(row);
    }
    mean_probs /= n as f64;
    (fractions, mean_probs)
}

struct Dispatch {
    rows: Vec<usize>,
    gates: Vec<f64>,
    time: FfnCache,
    wavelet: FfnCache,
    time_out: Array2<f64>,
    wavelet_out: Array2<f64>,
}

pub(crate) struct MoeCache {
    time_in: Array2<f64>,
    wavelet_in: Array2<f64>,
    time_inv: Vec<f64>,
    wavelet_inv: Vec<f64>,
    router: RouterCache,
    pub routings: Vec<Routing>,
    fractions: Array1<f64>,
    dispatch: Vec<Option<Dispatch>>,
    shared: Option<(FfnCache, FfnCache)>,
    pub balance: f64,
}

fn gather(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Pre-normalized MoE sublayer with residual connection.
pub(crate) fn moe_forward(
    time_h: Array2<f64>,
    wavelet_h: Array2<f64>,
    layer: &Layer,
    config: &ModelConfig,
    frozen: Option<&[Vec<usize>]>,
) -> (Array2<f64>, Array2<f64>, MoeCache) {
    let n = time_h.nrows();
    let (ut, time_inv) = rmsnorm_forward(&time_h, &layer.time_moe_norm);
    let (uw, wavelet_inv) = rmsnorm_forward(&wavelet_h, &layer.wavelet_moe_norm);
    let z = concatenate(Axis(1), &[ut.view(), uw.view()]).expect("same row count");
    let router = router_forward(z, &layer.router);
    let routings: Vec<Routing> = router
        .logits
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            select_experts(
                row.as_slice().expect("contiguous"),
                config.top_k_experts,
                frozen.map(|f| f[i].as_slice()),
            )
        })
        .collect();
    let (fractions, mean_probs) = balance_statistics(&router.logits, &routings);
    let balance = config.n_experts as f64 * fractions.dot(&mean_probs);

    let mut time_out = time_h.clone();
    let mut wavelet_out = wavelet_h.clone();
    let mut dispatch = Vec::with_capacity(config.n_experts);
    for (e, expert) in layer.experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut gates = Vec::new();
        for (i, r) in routings.iter().enumerate() {
            if let Some(slot) = r.experts.iter().position(|&x| x == e) {
                rows.push(i);
                gates.push(r.gates[slot]);
            }
        }
        if rows.is_empty() {
            dispatch.push(None);
            continue;
        }
        let (t_out, t_cache) = ffn_forward(gather(&ut, &rows), &expert.time);
        let (w_out, w_cache) = ffn_forward(gather(&uw, &rows), &expert.wavelet);
        for (r, (&i, &g)) in rows.iter().zip(&gates).enumerate() {
            time_out.row_mut(i).scaled_add(g, &t_out.row(r));
            wavelet_out.row_mut(i).scaled_add(g, &w_out.row(r));
        }
        dispatch.push(Some(Dispatch {
            rows,
            gates,
            time: t_cache,
            wavelet: w_cache,
            time_out: t_out,
            wavelet_out: w_out,
        }));
    }
    let shared = layer.shared_expert.as_ref().map(|expert| {
        let (t_out, t_cache) = ffn_forward(ut.clone(), &expert.time);
        let (w_out, w_cache) = ffn_forward(uw.clone(), &expert.wavelet);
        time_out += &t_out;
        wavelet_out += &w_out;
        (t_cache, w_cache)
    });
    debug_assert_eq!(routings.len(), n);
    (
        time_out,
        wavelet_out,
        MoeCache {
            time_in: time_h,
            wavelet_in: wavelet_h,
            time_inv,
            wavelet_inv,
            router,
            routings,
            fractions,
            dispatch,
            shared,
            balance,
        },
    )
}

/// `balance_grad` is `dL/d(balance of this layer)`.
pub(crate) fn moe_backward(
    cache: &MoeCache,
    layer: &Layer,
    dtime: &Array2<f64>,
    dwavelet: &Array2<f64>,
    balance_grad: f64,
    grad: &mut Layer,
) -> (Array2<f64>, Array2<f64>) {
    let n = dtime.nrows();
    let d = dtime.ncols();
    let n_experts = layer.experts.len();
    let mut dut = Array2::zeros((n, d));
    let mut duw = Array2::zeros((n, d));

    if let (Some((t_cache, w_cache)), Some(expert), Some(g)) = (
        cache.shared.as_ref(),
        layer.shared_expert.as_ref(),
        grad.shared_expert.as_mut(),
    ) {
        dut += &ffn_backward(t_cache, &expert.time, dtime, &mut g.time);
        duw += &ffn_backward(w_cache, &expert.wavelet, dwavelet, &mut g.wavelet);
    }

    // dL/dgate for every (position, expert) pair that was routed
    let mut dgates = Array2::<f64>::zeros((n, n_experts));
    for (e, slot) in cache.dispatch.iter().enumerate() {
        let Some(disp) = slot else { continue };
        let expert = &layer.experts[e];
        let g = &mut grad.experts[e];
        let mut dt_out = gather(dtime, &disp.rows);
        let mut dw_out = gather(dwavelet, &disp.rows);
        for (r, &i) in disp.rows.iter().enumerate() {
            dgates[[i, e]] = dtime.row(i).dot(&disp.time_out.row(r))
                + dwavelet.row(i).dot(&disp.wavelet_out.row(r));
            dt_out.row_mut(r).mapv_inplace(|v| v * disp.gates[r]);
            dw_out.row_mut(r).mapv_inplace(|v| v * disp.gates[r]);
        }
        let dt_in = ffn_backward(&disp.time, &expert.time, &dt_out, &mut g.time);
        let dw_in = ffn_backward(&disp.wavelet, &expert.wavelet, &dw_out, &mut g.wavelet);
        for (r, &i) in disp.rows.iter().enumerate() {
            dut.row_mut(i).scaled_add(1.0, &dt_in.row(r));
            duw.row_mut(i).scaled_add(1.0, &dw_in.row(r));
        }
    }

    let mut dlogits = Array2::<f64>::zeros((n, n_experts));
    let balance_weight = cache.fractions.mapv(|f| balance_grad * n_experts as f64 * f / n as f64);
    for (i, routing) in cache.routings.iter().enumerate() {
        let dg: Vec<f64> = routing.experts.iter().map(|&e| dgates[[i, e]]).collect();
        let inner: f64 = routing.gates.iter().zip(&dg).map(|(g, d)| g * d).sum();
        for ((&e, &g), &dgi) in routing.experts.iter().zip(&routing.gates).zip(&dg) {
            dlogits[[i, e]] += g * (dgi - inner);
        }
        if balance_grad != 0.0 {
            let probs = softmax(cache.router.logits.row(i));
            let inner = probs.dot(&balance_weight);
            for e in 0..n_experts {
                dlogits[[i, e]] += probs[e] * (balance_weight[e] - inner);
            }
        }
    }
    let dz = router_backward(&cache.router, &layer.router, &dlogits, &mut grad.router);
    dut += &dz.slice(s![.., ..d]);
    duw += &dz.slice(s![.., d..]);

    let dt_in = rmsnorm_backward(
        &cache.time_in,
        &layer.time_moe_norm,
        &cache.time_inv,
        &dut,
        &mut grad.time_moe_norm,
    ) + dtime;
    let dw_in = rmsnorm_backward(
        &cache.wavelet_in,
        &layer.wavelet_moe_norm,
        &cache.wavelet_inv,
        &duw,
        &mut grad.wavelet_moe_norm,
    ) + dwavelet;
    (dt_in, dw_in)
}

/// Result of a standalone MoE sublayer evaluation.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub time: Array2<f64>,
    pub wavelet: Array2<f64>,
    pub balance_loss: f64,
    pub routings: Vec<Routing>,
}

pub fn moe_layer(
    time_h: &Array2<f64>,
    wavelet_h: &Array2<f64>,
    layer: &Layer,
    config: &ModelConfig,
) -> MoeOutput {
    let (time, wavelet, cache) = moe_forward(time_h.clone(), wavelet_h.clone(), layer, config, None);
    MoeOutput {
        time,
        wavelet,
        balance_loss: cache.balance,
        routings: cache.routings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::weights::{init_model, FeedForward, Linear};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_router(d: usize, e: usize) -> Router {
        Router {
            hidden: Linear {
                weight: Array2::zeros((2 * d, d)),
                bias: Array2::zeros((1, d)),
            },
            logits: Linear {
                weight: Array2::zeros((d, e)),
                bias: Array2::zeros((1, e)),
            },
        }
    }

    #[test]
    fn equal_logits_pick_first_two() {
        let r = route_pair(&[0.3; 4], &[-0.1; 4], &zero_router(4, 6), 2);
        assert_eq!(r.experts, vec![0, 1]);
        assert_eq!(r.gates, vec![0.5, 0.5]);
    }

    #[test]
    fn closed_form_gates() {
        let r = select_experts(&[2.0, 1.0, 0.0, -1.0], 2, None);
        let e = std::f64::consts::E;
        assert_eq!(r.experts, vec![0, 1]);
        assert!((r.gates[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((r.gates[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn gates_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = select_experts(&logits, 2, None);
            assert!((r.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.gates.iter().all(|&g| g > 0.0));
            assert_ne!(r.experts[0], r.experts[1]);
        }
    }

    /// Hand-evaluated 2-dim branch: up = I, bias 0, down = [[1, 2], [3, 4]].
    #[test]
    fn branch_hand_example() {
        let ffn = FeedForward {
            up: Linear {
                weight: Array2::eye(2),
                bias: Array2::zeros((1, 2)),
            },
            down: Linear {
                weight: ndarray::array![[1.0, 2.0], [3.0, 4.0]],
                bias: ndarray::array![[0.5, -0.5]],
            },
        };
        let expert = Expert {
            time: ffn.clone(),
            wavelet: ffn,
        };
        let x = ndarray::array![[1.0, -1.0]];
        let (t, _) = expert_apply(&x, &x, &expert);
        // gelu(1) = 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), gelu(-1) = -1 + gelu(1)
        let g1 = 0.5 * (1.0 + (0.797_884_560_802_865_4f64 * 1.044_715).tanh());
        let gm1 = g1 - 1.0;
        let expected = [g1 + 3.0 * gm1 + 0.5, 2.0 * g1 + 4.0 * gm1 - 0.5];
        assert!((t[[0, 0]] - expected[0]).abs() < 1e-14);
        assert!((t[[0, 1]] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn branches_are_independent() {
        let c = ModelConfig::tiny();
        let w = init_model(&c).unwrap();
        let expert = &w.layers[0].experts[1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = c.hidden_size;
        let th = Array2::from_shape_simple_fn((3, d), || rng.random_range(-1.0..1.0));
        let wh = Array2::from_shape_simple_fn((3, d), || rng.random_range(-1.0..1.0));
        let (t1, _) = expert_apply(&th, &wh, expert);
        let (t2, _) = expert_apply(&th, &(&wh * 3.0 + 1.0), expert);
        assert_eq!(t1, t2);

        let mut zero = expert.clone();
        for ffn in [&mut zero.time, &mut zero.wavelet] {
            for lin in [&mut ffn.up, &mut ffn.down] {
                lin.weight.fill(0.0);
                lin.bias.fill(0.0);
            }
        }
        let (t0, w0) = expert_apply(&th, &wh, &zero);
        assert!(t0.iter().chain(w0.iter()).all(|&v| v == 0.0));
    }

    /// Monte-Carlo: random logits give uniform routing and a loss near top_k;
    /// a router that always favours expert 0 scores strictly higher.
    #[test]
    fn balance_loss_uniform_and_collapsed() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let logits = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-3.0..3.0));
        let routings: Vec<_> = logits
            .outer_iter()
            .map(|r| select_experts(r.as_slice().unwrap(), 2, None))
            .collect();
        let uniform = load_balance_loss(&logits, &routings);
        assert!((uniform - 2.0).abs() / 2.0 < 0.05, "uniform {uniform}");

        let mut skewed = logits.clone();
        skewed.column_mut(0).mapv_inplace(|v| v + 10.0);
        let routings: Vec<_> = skewed
            .outer_iter()
            .map(|r| select_experts(r.as_slice().unwrap(), 2, None))
            .collect();
        let collapsed = load_balance_loss(&skewed, &routings);
        assert!(collapsed > uniform, "{collapsed} vs {uniform}");
    }

    #[test]
    fn pathways_share_experts() {
        let c = ModelConfig::tiny();
        let w = init_model(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = c.hidden_size;
        let th = Array2::from_shape_simple_fn((16, d), || rng.random_range(-1.0..1.0));
        let wh = Array2::from_shape_simple_fn((16, d), || rng.random_range(-1.0..1.0));
        let out = moe_layer(&th, &wh, &w.layers[0], &c);
        assert_eq!(out.routings.len(), 16);
        for r in &out.routings {
            assert_eq!(r.experts.len(), 2);
        }
    }
}
