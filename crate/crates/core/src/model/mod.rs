//! Patch embedding and the dual-branch block-attention-residual transformer.

mod attention;
mod bar;
mod block;
mod branch;
mod embed;
mod moe;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{linear_attention, linear_attention_graph, qk_normalize, rope_rotate, rope_table};
pub use bar::{bar_aggregate, bar_aggregate_graph, BarParams};
pub use block::{layer_norm_graph, BlockOutput, BlockParams};
pub use branch::{BarTrace, BlockSummary, Branch, DualBranch};
pub use embed::{patch_count, patch_matrix, PatchEmbed, TokenSequence};
pub use moe::{moe_ffn, route_top_k, Expert, MoeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub blocks_branch1: usize,
    pub blocks_branch2: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Hidden width of each SwiGLU expert.
    pub d_ff: usize,
    /// Width of the residual-routing query/key projections.
    pub d_r: usize,
    pub gamma_q: f64,
    pub gamma_k: f64,
    pub rope_base: f64,
    pub eps: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            patch_len: 4,
            patch_stride: 4,
            blocks_branch1: 2,
            blocks_branch2: 2,
            n_experts: 4,
            top_k: 2,
            d_ff: 64,
            d_r: 16,
            gamma_q: 1.0,
            gamma_k: 1.0,
            rope_base: 10000.0,
            eps: 1e-6,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!("need 1 ≤ top_k ≤ n_experts, got {} of {}", self.top_k, self.n_experts));
        }
        if self.patch_len == 0 || self.patch_stride == 0 {
            return bad("patch_len and patch_stride must be positive".into());
        }
        if self.patch_len > window_len {
            return bad(format!("patch_len {} exceeds window length {window_len}", self.patch_len));
        }
        if self.blocks_branch1 == 0 || self.blocks_branch2 == 0 {
            return bad("each branch needs at least one block".into());
        }
        if self.d_r == 0 || self.d_ff == 0 {
            return bad("d_r and d_ff must be positive".into());
        }
        if !(self.eps >= 0.0) || !(self.rope_base > 0.0) {
            return bad("eps must be nonnegative and rope_base positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let c = ModelConfig::default();
        assert!(c.validate(8).is_ok());
        assert!(c.validate(3).is_err());
        assert!(ModelConfig { d_model: 7, ..c.clone() }.validate(8).is_err());
        assert!(ModelConfig { top_k: 5, ..c.clone() }.validate(8).is_err());
        assert!(ModelConfig { top_k: 0, ..c.clone() }.validate(8).is_err());
        assert!(ModelConfig { dropout: 1.0, ..c }.validate(8).is_err());
    }
}
