use rand_chacha::ChaCha8Rng;

use super::block::BlockParams;
use super::embed::PatchEmbed;
use super::ModelConfig;
use crate::dataio::CHANNELS;
use crate::error::Result;
use crate::forward::Forward;
use crate::numcore::{Tensor, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Pooled digest of a block input.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSummary<F> {
    pub vector: Vec<F>,
    pub depth: usize,
}

/// BAR weights and retrieved-vector norms of every block that had predecessors.
#[derive(Clone, Debug, PartialEq)]
pub struct BarTrace<F> {
    pub alphas: Vec<Vec<F>>,
    pub retrieved_norms: Vec<F>,
}

impl<F> Default for BarTrace<F> {
    fn default() -> Self {
        Self {
            alphas: Vec::new(),
            retrieved_norms: Vec::new(),
        }
    }
}

/// A stack of blocks with cross-depth retrieval.
#[derive(Clone, Debug)]
pub struct Branch {
    pub blocks: Vec<BlockParams>,
}

impl Branch {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        n_blocks: usize,
        cfg: &ModelConfig,
    ) -> Self {
        Self {
            blocks: (0..n_blocks)
                .map(|l| BlockParams::new(ps, rng, &format!("{prefix}.block{l}"), cfg))
                .collect(),
        }
    }

    /// Runs every block; block `ℓ` retrieves from the mean-pooled inputs of blocks `0..ℓ`.
    pub fn forward<F: Scalar>(
        &self,
        f: &mut Forward<F>,
        tokens: Var,
        positions: &[usize],
    ) -> Result<(Var, BarTrace<F>, Vec<BlockSummary<F>>)> {
        let mut h = tokens;
        let mut history: Vec<Var> = Vec::with_capacity(self.blocks.len());
        let mut summaries = Vec::with_capacity(self.blocks.len());
        let mut trace = BarTrace::default();
        for (depth, block) in self.blocks.iter().enumerate() {
            let out = block.forward(f, h, positions, &history)?;
            if let (Some(a), Some(r)) = (out.alphas, out.retrieved) {
                trace.alphas.push(f.value(a).data().to_vec());
                trace.retrieved_norms.push(f.value(r).norm());
            }
            let summary = f.g.mean_rows(h);
            summaries.push(BlockSummary {
                vector: f.value(summary).data().to_vec(),
                depth,
            });
            history.push(summary);
            h = out.out;
        }
        Ok((h, trace, summaries))
    }
}

/// Shared patch embedding feeding two independently parameterized branches.
#[derive(Clone, Debug)]
pub struct DualBranch {
    pub embed: PatchEmbed,
    pub branch1: Branch,
    pub branch2: Branch,
}

impl DualBranch {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        Self {
            embed: PatchEmbed::new(ps, rng, "embed", cfg.patch_len, cfg.patch_stride, CHANNELS.len(), cfg.d_model),
            branch1: Branch::new(ps, rng, "branch1", cfg.blocks_branch1, cfg),
            branch2: Branch::new(ps, rng, "branch2", cfg.blocks_branch2, cfg),
        }
    }

    /// Returns the `N × 2d` channel concatenation of both branch outputs.
    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, window: &Tensor<F>) -> Result<(Var, [BarTrace<F>; 2])> {
        let (tokens, positions) = self.embed.forward(f, window)?;
        let (h1, t1, _) = self.branch1.forward(f, tokens, &positions)?;
        let (h2, t2, _) = self.branch2.forward(f, tokens, &positions)?;
        Ok((f.g.concat_cols(&[h1, h2])?, [t1, t2]))
    }
}
