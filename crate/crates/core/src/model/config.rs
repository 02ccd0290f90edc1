use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavelet::WaveletFamily;

/// Architecture hyperparameters plus the loss weights the model owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k_experts: usize,
    pub hidden_size: usize,
    /// Hidden width of each routed expert branch.
    pub ffn_dim: usize,
    /// Hidden width of each shared-expert branch.
    pub shared_ffn_dim: usize,
    /// Hidden width of the router MLP.
    pub router_hidden: usize,
    pub patch_length: usize,
    pub top_k_attention: usize,
    pub use_shared_expert: bool,
    pub load_balance_coeff: f64,
    pub wavelet_loss_weight: f64,
    pub wavelet: String,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Published 12-layer configuration (~259M total / ~89M activated
    /// parameters with the half-width shared expert).
    pub fn full() -> Self {
        Self {
            n_layers: 12,
            n_heads: 12,
            n_experts: 8,
            top_k_experts: 2,
            hidden_size: 384,
            ffn_dim: 1536,
            shared_ffn_dim: 768,
            router_hidden: 384,
            patch_length: 8,
            top_k_attention: 10,
            use_shared_expert: true,
            load_balance_coeff: 0.01,
            wavelet_loss_weight: 1.0,
            wavelet: "bior2.2".into(),
            seed: 0,
        }
    }

    /// Small profile used for desk-scale training and tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            n_experts: 4,
            top_k_experts: 2,
            hidden_size: 32,
            ffn_dim: 64,
            shared_ffn_dim: 32,
            router_hidden: 32,
            patch_length: 8,
            top_k_attention: 10,
            use_shared_expert: true,
            load_balance_coeff: 0.01,
            wavelet_loss_weight: 1.0,
            wavelet: "bior2.2".into(),
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn wavelet_family(&self) -> Result<WaveletFamily> {
        self.wavelet.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("top_k_experts", self.top_k_experts),
            ("hidden_size", self.hidden_size),
            ("ffn_dim", self.ffn_dim),
            ("router_hidden", self.router_hidden),
            ("patch_length", self.patch_length),
            ("top_k_attention", self.top_k_attention),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.use_shared_expert && self.shared_ffn_dim == 0 {
            return Err(Error::config("shared_ffn_dim must be positive"));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "head dimension {} must be even for rotary phases",
                self.head_dim()
            )));
        }
        if self.top_k_experts > self.n_experts {
            return Err(Error::config(format!(
                "top_k_experts {} exceeds n_experts {}",
                self.top_k_experts, self.n_experts
            )));
        }
        if self.patch_length % 4 != 0 {
            return Err(Error::config(format!(
                "patch_length {} must be a multiple of 4 for level-2 alignment",
                self.patch_length
            )));
        }
        if !(self.load_balance_coeff >= 0.0 && self.load_balance_coeff.is_finite()) {
            return Err(Error::config("load_balance_coeff must be finite and >= 0"));
        }
        if !(self.wavelet_loss_weight >= 0.0 && self.wavelet_loss_weight.is_finite()) {
            return Err(Error::config("wavelet_loss_weight must be finite and >= 0"));
        }
        self.wavelet_family()?;
        Ok(())
    }

    /// Flat key/value rendering used by the checkpoint header.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object()
            .expect("struct serializes to object")
            .iter()
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect()
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for (k, v) in pairs {
            let parsed: serde_json::Value = serde_json::from_str(v)
                .map_err(|e| Error::format(format!("config value for {k}: {e}")))?;
            map.insert(k.clone(), parsed);
        }
        serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::format(format!("config block: {e}")))
    }
}

/// Closed-form parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub activated: usize,
    pub blocks: Vec<(String, usize)>,
}

fn linear(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}

/// One dual-branch expert: two `d -> f -> d` feed-forward networks.
pub fn expert_params(d: usize, f: usize) -> usize {
    2 * (linear(d, f) + linear(f, d))
}

pub fn count_params(config: &ModelConfig) -> ParamCount {
    let d = config.hidden_size;
    let p = config.patch_length;
    let e = config.n_experts;
    let embed = 2 * linear(p, d);
    let attention = 2 * 4 * d * d;
    let norms = 4 * d;
    let router = linear(2 * d, config.router_hidden) + linear(config.router_hidden, e);
    let routed = e * expert_params(d, config.ffn_dim);
    let shared = if config.use_shared_expert {
        expert_params(d, config.shared_ffn_dim)
    } else {
        0
    };
    let final_norm = 2 * d;
    let heads = 2 * linear(d, p);

    let layers = config.n_layers;
    let blocks = vec![
        ("embeddings".to_string(), embed),
        ("attention".to_string(), layers * attention),
        ("norms".to_string(), layers * norms + final_norm),
        ("router".to_string(), layers * router),
        ("routed_experts".to_string(), layers * routed),
        ("shared_expert".to_string(), layers * shared),
        ("heads".to_string(), heads),
    ];
    let total = blocks.iter().map(|(_, n)| n).sum();
    let idle = layers * (e - config.top_k_experts) * expert_params(d, config.ffn_dim);
    ParamCount {
        total,
        activated: total - idle,
        blocks,
    }
}
