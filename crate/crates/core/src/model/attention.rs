use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Unary, Var};
use crate::scalar::Scalar;

/// Scales each vector to `γ·v/(‖v‖₂ + eps)`.
pub fn qk_normalize<F: Scalar>(q: &[F], k: &[F], gamma_q: F, gamma_k: F, eps: F) -> (Vec<F>, Vec<F>) {
    let mut g = Graph::new();
    let mut norm = |v: &[F], gamma: F| {
        let x = g.constant(Tensor::row_vector(v.to_vec()));
        let gm = g.constant(Tensor::scalar(gamma));
        let n = g.row_normalize(x, eps);
        let y = g.scale_by(n, gm).expect("scalar gamma");
        g.value(y).data().to_vec()
    };
    (norm(q, gamma_q), norm(k, gamma_k))
}

/// `(cos, sin)` of `pos·θ_m` with `θ_m = base^(−2m/d)`, for every position and
/// pair `m = 1..=d/2` (pairs are counted from one).
pub fn rope_table<F: Scalar>(positions: &[usize], d: usize, base: F) -> Result<Vec<(F, F)>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("rotary width must be even, got {d}")));
    }
    let df = F::from_usize(d).unwrap();
    let freqs: Vec<F> = (1..=d / 2)
        .map(|m| base.powf(-F::lit(2.0) * F::from_usize(m).unwrap() / df))
        .collect();
    Ok(positions
        .iter()
        .flat_map(|&p| {
            let pf = F::from_usize(p).unwrap();
            freqs.iter().map(move |&th| {
                let a = pf * th;
                (a.cos(), a.sin())
            })
        })
        .collect())
}

/// Rotates feature pair `m` of `v` by `pos·θ_m`.
pub fn rope_rotate<F: Scalar>(v: &[F], pos: usize, base: F) -> Result<Vec<F>> {
    let rot = rope_table(&[pos], v.len(), base)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(v.to_vec()));
    let y = g.rotate_pairs(x, rot)?;
    Ok(g.value(y).data().to_vec())
}

/// Kernelized attention `φ(Q)(φ(K)ᵀV)` normalized by `φ(Q)·Σφ(K) + eps`, with `φ = ELU + 1`.
pub fn linear_attention_graph<F: Scalar>(g: &mut Graph<F>, q: Var, k: Var, v: Var, eps: F) -> Result<Var> {
    let fq = g.unary(q, Unary::EluPlusOne);
    let fk = g.unary(k, Unary::EluPlusOne);
    let fkt = g.transpose(fk);
    let kv = g.matmul(fkt, v)?;
    let num = g.matmul(fq, kv)?;
    let ksum = g.sum_rows(fk);
    let ksum_t = g.transpose(ksum);
    let den = g.matmul(fq, ksum_t)?;
    let den = g.add_const(den, eps);
    g.div_col(num, den)
}

pub fn linear_attention<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = linear_attention_graph(&mut g, q, k, v, eps)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn qk_examples() {
        let (q, k) = qk_normalize::<f64>(&[1.0, 0.0], &[3.0, 4.0], 1.0, 2.0, 0.0);
        assert_eq!(q, vec![1.0, 0.0]);
        assert!((k[0] - 1.2).abs() < 1e-15 && (k[1] - 1.6).abs() < 1e-15);
        let (z, _) = qk_normalize(&[3.0, -2.0], &[1.0, 1.0], 0.0, 1.0, 1e-6);
        assert!(z.iter().all(|&x| x == 0.0));
        let (z, _) = qk_normalize::<f64>(&[0.0, 0.0], &[1.0, 1.0], 1.0, 1.0, 1e-6);
        assert!(z.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rope_examples() {
        let v = [0.3, -1.2, 2.0, 0.5];
        assert_eq!(rope_rotate(&v, 0, 10000.0).unwrap(), v.to_vec());
        let r = rope_rotate(&v, 37, 10000.0).unwrap();
        let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((n(&r) - n(&v)).abs() < 1e-12);
        // d = 2, base 2/π → θ₁ = π/2: (1, 0) turns to (0, 1)
        let r = rope_rotate(&[1.0, 0.0], 1, 2.0 / PI).unwrap();
        assert!(r[0].abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1, 10000.0).is_err());
        // d = 4: θ₁ = base^(−1/2), θ₂ = base^(−1)
        let t = rope_table(&[1], 4, 100.0).unwrap();
        assert!((t[0].0 - 0.1f64.cos()).abs() < 1e-15);
        assert!((t[1].0 - 0.01f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn attention_single_token_and_identical_keys() {
        let q = Tensor::matrix(1, 2, vec![0.4, -0.3]);
        let k = Tensor::matrix(1, 2, vec![-1.0, 2.0]);
        let v = Tensor::matrix(1, 2, vec![5.0, -7.0]);
        let out = linear_attention(&q, &k, &v, 0.0).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-14);

        let q = Tensor::<f64>::matrix(3, 2, vec![0.1, 0.2, -0.5, 0.9, 1.5, -2.0]);
        let k = Tensor::matrix(3, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]);
        let v = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let out = linear_attention(&q, &k, &v, 0.0).unwrap();
        for r in 0..3 {
            assert!((out.get(r, 0) - 3.0).abs() < 1e-12 && (out.get(r, 1) - 5.0).abs() < 1e-12);
        }
    }
}
