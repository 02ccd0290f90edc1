//! The dual-path mixture-of-experts network.

pub mod attention;
pub mod config;
pub mod forward;
pub mod moe;
pub mod ops;
pub mod weights;

pub use attention::{sparse_causal_attention, AttentionOutput, KeySelection};
pub use config::{count_params, ModelConfig, ParamCount};
pub use forward::{
    attention_maps, forward, forward_with_selections, gradients, loss_with_selections,
    ForwardTrace, Selections,
};
pub use moe::{expert_apply, load_balance_loss, moe_layer, route_pair, MoeOutput, Routing};
pub use ops::Rope;
pub use weights::{init_model, GradientSet, ModelWeights};
