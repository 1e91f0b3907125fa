use rand_chacha::ChaCha8Rng;

use super::attention::{linear_attention_graph, rope_table};
use super::bar::{bar_aggregate_graph, BarParams};
use super::moe::MoeParams;
use super::ModelConfig;
use crate::error::Result;
use crate::forward::Forward;
use crate::numcore::{Graph, ParamId, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Row-wise layer normalization with affine `gamma`, `beta` (`1 × d`).
pub fn layer_norm_graph<F: Scalar>(g: &mut Graph<F>, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
    let z = g.standardize_rows(x, eps);
    let z = g.mul_row(z, gamma)?;
    g.add_row(z, beta)
}

/// Parameters of one block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub gamma_q: ParamId,
    pub gamma_k: ParamId,
    pub bar: BarParams,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub moe: MoeParams,
    pub wg: ParamId,
    pub bg: ParamId,
    pub eps: f64,
    pub rope_base: f64,
}

/// Result of one block.
pub struct BlockOutput {
    pub out: Var,
    /// BAR weights over predecessors (`1 × j`), absent for the first block.
    pub alphas: Option<Var>,
    /// Retrieved residual vector (`1 × d`), absent for the first block.
    pub retrieved: Option<Var>,
}

impl BlockParams {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut mat = |ps: &mut ParamStore<F>, name: &str, r, c, fan| ps.add_uniform(format!("{prefix}.{name}"), r, c, fan, rng);
        let wq = mat(ps, "attn.wq", d, d, d);
        let wk = mat(ps, "attn.wk", d, d, d);
        let wv = mat(ps, "attn.wv", d, d, d);
        let wo = mat(ps, "attn.wo", d, d, d);
        let wg = mat(ps, "gate.w", 2 * d, d, 2 * d);
        let bg = mat(ps, "gate.b", 1, d, 2 * d);
        Self {
            wq,
            wk,
            wv,
            wo,
            gamma_q: ps.add_full(format!("{prefix}.attn.gamma_q"), 1, 1, cfg.gamma_q),
            gamma_k: ps.add_full(format!("{prefix}.attn.gamma_k"), 1, 1, cfg.gamma_k),
            bar: BarParams::new(ps, rng, &format!("{prefix}.bar"), d, cfg.d_r),
            ln_gamma: ps.add_full(format!("{prefix}.ln.gamma"), 1, d, 1.0),
            ln_beta: ps.add_full(format!("{prefix}.ln.beta"), 1, d, 0.0),
            moe: MoeParams::new(ps, rng, &format!("{prefix}.moe"), d, cfg.d_ff, cfg.n_experts, cfg.top_k, cfg.eps),
            wg,
            bg,
            eps: cfg.eps,
            rope_base: cfg.rope_base,
        }
    }

    /// `h` is `N × d`; `history` holds `1 × d` summaries of earlier blocks.
    pub fn forward<F: Scalar>(
        &self,
        f: &mut Forward<F>,
        h: Var,
        positions: &[usize],
        history: &[Var],
    ) -> Result<BlockOutput> {
        let eps = F::lit(self.eps);
        let (_, d) = f.g.dims(h);
        let (wq, wk, wv, wo) = (f.param(self.wq), f.param(self.wk), f.param(self.wv), f.param(self.wo));
        let (gq, gk) = (f.param(self.gamma_q), f.param(self.gamma_k));

        let q = f.g.matmul(h, wq)?;
        let k = f.g.matmul(h, wk)?;
        let v = f.g.matmul(h, wv)?;
        let q = f.g.row_normalize(q, eps);
        let q = f.g.scale_by(q, gq)?;
        let k = f.g.row_normalize(k, eps);
        let k = f.g.scale_by(k, gk)?;
        let rot = rope_table(positions, d, F::lit(self.rope_base))?;
        let q = f.g.rotate_pairs(q, rot.clone())?;
        let k = f.g.rotate_pairs(k, rot)?;
        let a = linear_attention_graph(&mut f.g, q, k, v, eps)?;
        let a = f.g.matmul(a, wo)?;
        let a = f.dropout(a);
        let z = f.g.add(h, a)?;

        let (u, alphas, retrieved) = if history.is_empty() {
            (z, None, None)
        } else {
            let c = f.g.mean_rows(z);
            let b = f.g.concat_rows(history)?;
            let (bq, bk, bv) = (f.param(self.bar.wq), f.param(self.bar.wk), f.param(self.bar.wv));
            let (r, alpha) = bar_aggregate_graph(&mut f.g, c, b, bq, bk, bv, self.bar.d_r)?;
            (f.g.add_row(z, r)?, Some(alpha), Some(r))
        };

        let (lg, lb) = (f.param(self.ln_gamma), f.param(self.ln_beta));
        let un = layer_norm_graph(&mut f.g, u, lg, lb, eps)?;
        let m = self.moe.forward(f, un)?;
        let (wg, bg) = (f.param(self.wg), f.param(self.bg));
        let um = f.g.concat_cols(&[u, m])?;
        let gate = f.g.linear(um, wg, Some(bg))?;
        let gate = f.g.sigmoid(gate);
        let gm = f.g.mul(gate, m)?;
        let out = f.g.add(u, gm)?;
        Ok(BlockOutput {
            out,
            alphas,
            retrieved,
        })
    }
}
