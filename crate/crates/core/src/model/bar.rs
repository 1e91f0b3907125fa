use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, Tensor, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Residual-routing projections of one block.
#[derive(Clone, Debug)]
pub struct BarParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub d_r: usize,
}

impl BarParams {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str, d: usize, d_r: usize) -> Self {
        Self {
            wq: ps.add_uniform(format!("{prefix}.wq"), d, d_r, d, rng),
            wk: ps.add_uniform(format!("{prefix}.wk"), d, d_r, d, rng),
            wv: ps.add_uniform(format!("{prefix}.wv"), d, d, d, rng),
            d_r,
        }
    }
}

/// Scores `s_j = (c W_q)·(B_j W_k)/√d_r`, weights `α = softmax(s)` and the
/// retrieved vector `r = Σ α_j B_j W_v`.
///
/// `c` is `1 × d`, `history` is `j × d` (one summary per row).
/// Returns `(r, α)` with `r: 1 × d` and `α: 1 × j`.
pub fn bar_aggregate_graph<F: Scalar>(
    g: &mut Graph<F>,
    c: Var,
    history: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    d_r: usize,
) -> Result<(Var, Var)> {
    let q = g.matmul(c, wq)?;
    let k = g.matmul(history, wk)?;
    let kt = g.transpose(k);
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, F::one() / F::from_usize(d_r).unwrap().sqrt());
    let alpha = g.softmax_rows(s);
    let v = g.matmul(history, wv)?;
    let r = g.matmul(alpha, v)?;
    Ok((r, alpha))
}

/// Plain-value form of [`bar_aggregate_graph`].
pub fn bar_aggregate<F: Scalar>(
    c: &[F],
    history: &[Vec<F>],
    wq: &Tensor<F>,
    wk: &Tensor<F>,
    wv: &Tensor<F>,
) -> Result<(Vec<F>, Vec<F>)> {
    if history.is_empty() {
        return Err(Error::Domain("block-attention residual needs at least one predecessor".into()));
    }
    let mut g = Graph::new();
    let cv = g.constant(Tensor::row_vector(c.to_vec()));
    let h = g.constant(Tensor::from_rows(history)?);
    let (q, k, v) = (g.constant(wq.clone()), g.constant(wk.clone()), g.constant(wv.clone()));
    let (r, a) = bar_aggregate_graph(&mut g, cv, h, q, k, v, wq.cols())?;
    Ok((g.value(r).data().to_vec(), g.value(a).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_scores_average_projected_summaries() {
        let wq = Tensor::<f64>::zeros(&[2, 2]);
        let wk = Tensor::identity(2);
        let wv = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, -1.0]);
        let hist = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]];
        let (r, a) = bar_aggregate(&[0.3, 0.4], &hist, &wq, &wk, &wv).unwrap();
        assert!(a.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        // projected rows (1,2), (0,−1), (2,2) → mean (1, 1)
        assert!((r[0] - 1.0).abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_predecessor() {
        let wq = Tensor::<f64>::identity(2);
        let wk = Tensor::identity(2);
        let wv = Tensor::matrix(2, 2, vec![0.5, 0.0, 1.0, 3.0]);
        let (r, a) = bar_aggregate(&[9.0, -4.0], &[vec![2.0, 1.0]], &wq, &wk, &wv).unwrap();
        assert_eq!(a, vec![1.0]);
        assert!((r[0] - 2.0).abs() < 1e-15 && (r[1] - 3.0).abs() < 1e-15);
        assert!(bar_aggregate(&[1.0, 1.0], &[], &wq, &wk, &wv).is_err());
    }

    #[test]
    fn dominant_score() {
        // d_r = 1 so the score is the plain product; scores (0, 0, 20)
        let wq = Tensor::matrix(1, 1, vec![1.0]);
        let wk = Tensor::matrix(1, 1, vec![1.0]);
        let wv = Tensor::matrix(1, 1, vec![3.0]);
        let hist = vec![vec![0.0], vec![0.0], vec![20.0]];
        let (r, a) = bar_aggregate(&[1.0], &hist, &wq, &wk, &wv).unwrap();
        let small = 1.0 / (2.0 + 20f64.exp());
        assert!((a[0] - small).abs() < 1e-20 && (a[0] - 2.06e-9).abs() < 1e-11);
        assert!((r[0] - 60.0).abs() <= 1e-7 * 60.0);
    }
}
