use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::forward::Forward;
use crate::numcore::{ParamId, Tensor, Unary, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Biasless SwiGLU expert `[SiLU(x W_u) ⊙ (x W_v)] W_o`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub wu: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// Router plus experts of a sparse feed-forward layer.
#[derive(Clone, Debug)]
pub struct MoeParams {
    pub router: ParamId,
    pub experts: Vec<Expert>,
    pub top_k: usize,
    pub eps: f64,
}

/// Indices of the `k` largest probabilities, largest first; ties keep the lower index.
pub fn route_top_k<F: Scalar>(probs: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

impl MoeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        d_ff: usize,
        n_experts: usize,
        top_k: usize,
        eps: f64,
    ) -> Self {
        let router = ps.add_uniform(format!("{prefix}.router"), d, n_experts, d, rng);
        let experts = (0..n_experts)
            .map(|e| Expert {
                wu: ps.add_uniform(format!("{prefix}.expert{e}.wu"), d, d_ff, d, rng),
                wv: ps.add_uniform(format!("{prefix}.expert{e}.wv"), d, d_ff, d, rng),
                wo: ps.add_uniform(format!("{prefix}.expert{e}.wo"), d_ff, d, d_ff, rng),
            })
            .collect();
        Self {
            router,
            experts,
            top_k,
            eps,
        }
    }

    /// Routes every row of `x` (`N × d`) to its top-k experts.
    /// Only selected (token, expert) pairs are evaluated.
    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, x: Var) -> Result<Var> {
        let (n, _) = f.g.dims(x);
        let e_count = self.experts.len();
        let router = f.param(self.router);
        let logits = f.g.matmul(x, router)?;
        let probs = f.g.softmax_rows(logits);

        let pv = f.value(probs).clone();
        let mut mask = vec![F::zero(); n * e_count];
        let mut tokens_of: Vec<Vec<usize>> = vec![Vec::new(); e_count];
        for t in 0..n {
            for e in route_top_k(pv.row(t), self.top_k) {
                mask[t * e_count + e] = F::one();
                tokens_of[e].push(t);
            }
        }
        // π = p / Σ_selected p, guarded against a vanishing denominator
        let mask = f.g.constant(Tensor::matrix(n, e_count, mask));
        let kept = f.g.mul(probs, mask)?;
        let total = f.g.sum_cols(kept);
        let eps = F::lit(self.eps);
        let total = if f.value(total).data().iter().all(|&s| s >= eps) {
            total
        } else {
            f.g.add_const(total, eps)
        };
        let pi = f.g.div_col(kept, total)?;

        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows = &tokens_of[e];
            if rows.is_empty() {
                continue;
            }
            f.expert_evals += rows.len();
            let xe = f.g.gather_rows(x, rows)?;
            let (wu, wv, wo) = (f.param(expert.wu), f.param(expert.wv), f.param(expert.wo));
            let u = f.g.matmul(xe, wu)?;
            let u = f.g.unary(u, Unary::Silu);
            let v = f.g.matmul(xe, wv)?;
            let h = f.g.mul(u, v)?;
            let y = f.g.matmul(h, wo)?;
            let w = f.g.gather_rows(pi, rows)?;
            let w = f.g.gather_cols(w, &[e])?;
            let y = f.g.mul_col(y, w)?;
            let y = f.g.scatter_rows(y, rows, n)?;
            out = Some(match out {
                Some(acc) => f.g.add(acc, y)?,
                None => y,
            });
        }
        Ok(out.expect("top_k ≥ 1 selects at least one expert"))
    }
}

/// Applies the layer to a single token; returns the output and the number of
/// experts evaluated.
pub fn moe_ffn<F: Scalar>(x: &[F], ps: &ParamStore<F>, moe: &MoeParams) -> Result<(Vec<F>, usize)> {
    let mut f = Forward::eval(ps);
    let xv = f.g.constant(Tensor::row_vector(x.to_vec()));
    let y = moe.forward(&mut f, xv)?;
    Ok((f.value(y).data().to_vec(), f.expert_evals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layer(d: usize, e: usize, k: usize) -> (ParamStore<f64>, MoeParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new();
        let m = MoeParams::new(&mut ps, &mut rng, "moe", d, 6, e, k, 1e-9);
        (ps, m)
    }

    #[test]
    fn top_k_rule() {
        assert_eq!(route_top_k(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
        assert_eq!(route_top_k(&[0.5, 0.3, 0.2], 2), vec![0, 1]);
        assert_eq!(route_top_k(&[0.1, 0.6, 0.3], 1), vec![1]);
        assert_eq!(route_top_k(&[0.2, 0.4, 0.4], 2), vec![1, 2]);
    }

    #[test]
    fn zero_token_gives_zero() {
        let (ps, m) = layer(4, 3, 2);
        let (y, evals) = moe_ffn(&[0.0; 4], &ps, &m).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(evals, 2);
    }

    #[test]
    fn renormalized_mixture_matches_manual_sum() {
        let (mut ps, m) = layer(3, 3, 2);
        // router logits ln(0.5), ln(0.3), ln(0.2) via x = (1, 0, 0)
        *ps.get_mut(m.router) = Tensor::matrix(
            3,
            3,
            vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        let x = [1.0, 0.0, 0.0];
        let (y, evals) = moe_ffn(&x, &ps, &m).unwrap();
        assert_eq!(evals, 2);
        let expert = |e: usize| -> Vec<f64> {
            let ex = &m.experts[e];
            let (wu, wv, wo) = (ps.get(ex.wu), ps.get(ex.wv), ps.get(ex.wo));
            let h: Vec<f64> = (0..6)
                .map(|j| {
                    let u = wu.get(0, j);
                    let v = wv.get(0, j);
                    u / (1.0 + (-u).exp()) * v
                })
                .collect();
            (0..3).map(|c| (0..6).map(|j| h[j] * wo.get(j, c)).sum()).collect()
        };
        let (e0, e1) = (expert(0), expert(1));
        for c in 0..3 {
            let expect = 0.625 * e0[c] + 0.375 * e1[c];
            assert!((y[c] - expect).abs() < 1e-12, "{c}: {} vs {expect}", y[c]);
        }
    }
}
