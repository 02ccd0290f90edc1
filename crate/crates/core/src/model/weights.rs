use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

/// Two-layer feed-forward branch `d -> f -> d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

/// An expert owns one branch per pathway; branches never mix.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub time: FeedForward,
    pub wavelet: FeedForward,
}

/// Multi-head projections, all `d x d` and bias-free.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

/// MLP gate over the concatenated token pair, `2d -> d_r -> n_experts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub hidden: Linear,
    pub logits: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub time_attn_norm: Array2<f64>,
    pub wavelet_attn_norm: Array2<f64>,
    pub time_moe_norm: Array2<f64>,
    pub wavelet_moe_norm: Array2<f64>,
    pub time_attention: Attention,
    pub wavelet_attention: Attention,
    pub router: Router,
    pub experts: Vec<Expert>,
    pub shared_expert: Option<Expert>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub time_embed: Linear,
    pub wavelet_embed: Linear,
    pub layers: Vec<Layer>,
    pub time_final_norm: Array2<f64>,
    pub wavelet_final_norm: Array2<f64>,
    pub time_head: Linear,
    pub wavelet_head: Linear,
}

/// Gradients share the weights' layout.
pub type GradientSet = ModelWeights;

#[derive(Debug, Clone, Copy)]
enum Slot {
    Weight { fan_in: usize },
    Bias,
    Gain,
}

struct Builder<'a> {
    fill: &'a mut dyn FnMut(Slot, usize, usize) -> Array2<f64>,
}

impl Builder<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        (self.fill)(Slot::Weight { fan_in: rows }, rows, cols)
    }

    fn gain(&mut self, d: usize) -> Array2<f64> {
        (self.fill)(Slot::Gain, 1, d)
    }

    fn linear(&mut self, inputs: usize, outputs: usize) -> Linear {
        Linear {
            weight: self.matrix(inputs, outputs),
            bias: (self.fill)(Slot::Bias, 1, outputs),
        }
    }

    fn ffn(&mut self, d: usize, f: usize) -> FeedForward {
        FeedForward {
            up: self.linear(d, f),
            down: self.linear(f, d),
        }
    }

    fn expert(&mut self, d: usize, f: usize) -> Expert {
        Expert {
            time: self.ffn(d, f),
            wavelet: self.ffn(d, f),
        }
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention {
            query: self.matrix(d, d),
            key: self.matrix(d, d),
            value: self.matrix(d, d),
            output: self.matrix(d, d),
        }
    }

    fn model(&mut self, c: &ModelConfig) -> ModelWeights {
        let d = c.hidden_size;
        let p = c.patch_length;
        let time_embed = self.linear(p, d);
        let wavelet_embed = self.linear(p, d);
        let layers = (0..c.n_layers)
            .map(|_| Layer {
                time_attn_norm: self.gain(d),
                wavelet_attn_norm: self.gain(d),
                time_moe_norm: self.gain(d),
                wavelet_moe_norm: self.gain(d),
                time_attention: self.attention(d),
                wavelet_attention: self.attention(d),
                router: Router {
                    hidden: self.linear(2 * d, c.router_hidden),
                    logits: self.linear(c.router_hidden, c.n_experts),
                },
                experts: (0..c.n_experts).map(|_| self.expert(d, c.ffn_dim)).collect(),
                shared_expert: c
                    .use_shared_expert
                    .then(|| self.expert(d, c.shared_ffn_dim)),
            })
            .collect();
        ModelWeights {
            time_embed,
            wavelet_embed,
            layers,
            time_final_norm: self.gain(d),
            wavelet_final_norm: self.gain(d),
            time_head: self.linear(d, p),
            wavelet_head: self.linear(d, p),
        }
    }
}

/// Deterministic initialization: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases 0, normalization gains 1. Values are rounded to the f32 grid so a
/// checkpoint stores them losslessly.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fill = |slot: Slot, rows: usize, cols: usize| match slot {
        Slot::Weight { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || {
                round_f32(rng.random_range(-bound..bound))
            })
        }
        Slot::Bias => Array2::zeros((rows, cols)),
        Slot::Gain => Array2::ones((rows, cols)),
    };
    Ok(Builder { fill: &mut fill }.model(config))
}

pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

macro_rules! push_linear {
    ($out:ident, $prefix:expr, $lin:expr, $($mut_:tt)?) => {{
        let lin = $lin;
        let prefix = $prefix;
        $out.push((format!("{prefix}.weight"), &$($mut_)? lin.weight));
        $out.push((format!("{prefix}.bias"), &$($mut_)? lin.bias));
    }};
}

macro_rules! visit_model {
    ($self:ident, $iter:ident, $as_ref:ident, $($mut_:tt)?) => {{
        let mut out = Vec::new();
        push_linear!(out, "time_embed", &$($mut_)? $self.time_embed, $($mut_)?);
        push_linear!(out, "wavelet_embed", &$($mut_)? $self.wavelet_embed, $($mut_)?);
        for (l, layer) in $self.layers.$iter().enumerate() {
            let pre = format!("layers.{l}");
            out.push((format!("{pre}.time_attn_norm"), &$($mut_)? layer.time_attn_norm));
            out.push((format!("{pre}.wavelet_attn_norm"), &$($mut_)? layer.wavelet_attn_norm));
            out.push((format!("{pre}.time_moe_norm"), &$($mut_)? layer.time_moe_norm));
            out.push((format!("{pre}.wavelet_moe_norm"), &$($mut_)? layer.wavelet_moe_norm));
            for (name, attn) in [
                ("time_attention", &$($mut_)? layer.time_attention),
                ("wavelet_attention", &$($mut_)? layer.wavelet_attention),
            ] {
                out.push((format!("{pre}.{name}.query"), &$($mut_)? attn.query));
                out.push((format!("{pre}.{name}.key"), &$($mut_)? attn.key));
                out.push((format!("{pre}.{name}.value"), &$($mut_)? attn.value));
                out.push((format!("{pre}.{name}.output"), &$($mut_)? attn.output));
            }
            push_linear!(out, format!("{pre}.router.hidden"), &$($mut_)? layer.router.hidden, $($mut_)?);
            push_linear!(out, format!("{pre}.router.logits"), &$($mut_)? layer.router.logits, $($mut_)?);
            let experts = layer
                .experts
                .$iter()
                .enumerate()
                .map(|(e, x)| (format!("{pre}.experts.{e}"), x))
                .chain(layer.shared_expert.$as_ref().map(|x| (format!("{pre}.shared_expert"), x)));
            for (name, expert) in experts {
                for (branch, ffn) in [("time", &$($mut_)? expert.time), ("wavelet", &$($mut_)? expert.wavelet)] {
                    push_linear!(out, format!("{name}.{branch}.up"), &$($mut_)? ffn.up, $($mut_)?);
                    push_linear!(out, format!("{name}.{branch}.down"), &$($mut_)? ffn.down, $($mut_)?);
                }
            }
        }
        out.push(("time_final_norm".to_string(), &$($mut_)? $self.time_final_norm));
        out.push(("wavelet_final_norm".to_string(), &$($mut_)? $self.wavelet_final_norm));
        push_linear!(out, "time_head", &$($mut_)? $self.time_head, $($mut_)?);
        push_linear!(out, "wavelet_head", &$($mut_)? $self.wavelet_head, $($mut_)?);
        out
    }};
}

impl ModelWeights {
    /// All-zero tensors with the layout implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut fill = |_: Slot, rows: usize, cols: usize| Array2::zeros((rows, cols));
        Builder { fill: &mut fill }.model(config)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        visit_model!(self, iter, as_ref,)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        visit_model!(self, iter_mut, as_mut, mut)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelWeights, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Flat `(tensor index, element index)` addressing for sampled checks.
    pub fn get_flat(&self, tensor: usize, index: usize) -> f64 {
        let tensors = self.tensors();
        tensors[tensor].1.as_slice().expect("standard layout")[index]
    }

    pub fn set_flat(&mut self, tensor: usize, index: usize, value: f64) {
        let mut tensors = self.tensors_mut();
        tensors[tensor].1.as_slice_mut().expect("standard layout")[index] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::count_params;

    #[test]
    fn deterministic_init() {
        let c = ModelConfig::tiny();
        assert_eq!(init_model(&c).unwrap(), init_model(&c).unwrap());
        let mut other = c.clone();
        other.seed = 1;
        assert_ne!(init_model(&c).unwrap(), init_model(&other).unwrap());
    }

    #[test]
    fn init_bounds_and_gains() {
        let c = ModelConfig::tiny();
        let w = init_model(&c).unwrap();
        assert!(w.all_finite());
        let bound = 1.0 / (c.hidden_size as f64).sqrt();
        assert!(w.layers[0].time_attention.query.iter().all(|v| v.abs() <= bound));
        assert!(w.layers[1].time_moe_norm.iter().all(|&v| v == 1.0));
        assert!(w.time_head.bias.iter().all(|&v| v == 0.0));
        let grid = w.time_embed.weight.iter().all(|&v| v == round_f32(v));
        assert!(grid);
    }

    #[test]
    fn enumeration_matches_formula() {
        for shared in [true, false] {
            let mut c = ModelConfig::tiny();
            c.use_shared_expert = shared;
            let w = ModelWeights::zeros(&c);
            assert_eq!(w.num_params(), count_params(&c).total);
        }
    }

    #[test]
    fn tensor_names_unique() {
        let w = ModelWeights::zeros(&ModelConfig::tiny());
        let names: std::collections::HashSet<_> = w.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), w.tensors().len());
    }
}
