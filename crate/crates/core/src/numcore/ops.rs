//! Plain (non-recording) kernels used outside of training graphs.

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Numerically stable softmax with max subtraction.
pub fn softmax<F: Scalar>(logits: &[F]) -> Result<Vec<F>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("softmax of non-finite logits".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked<F: Scalar>(logits: &[F]) -> Vec<F> {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::fmax);
    let exps: Vec<F> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: F = exps.iter().copied().sum::<F>();
    exps.into_iter().map(|e| e / s).collect()
}

/// Row-wise layer normalization over the last dimension followed by the
/// affine map `gamma ⊙ x̂ + beta`.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let (r, c) = x.dims();
    if c == 0 {
        return Err(Error::Domain("layer norm over an empty dimension".into()));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "layer norm affine length {}/{} vs feature width {}",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    let n = F::from_usize(c).unwrap();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        for j in 0..c {
            out.push((row[j] - mean) * inv * gamma.data()[j] + beta.data()[j]);
        }
    }
    Ok(Tensor::matrix(r, c, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax(&[2.5f64, 2.5, 2.5]).unwrap();
        for p in s {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[-7.0f64]).unwrap(), vec![1.0]);
        let s = softmax(&[0.0f64, 3.0f64.ln()]).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::row_vector(vec![1.0f64; 2]);
        let b = Tensor::row_vector(vec![0.0f64; 2]);
        let out = layer_norm(&Tensor::row_vector(vec![4.0, 4.0]), &g, &b, 1e-6).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        let out = layer_norm(&Tensor::row_vector(vec![-1.0, 1.0]), &g, &b, 1e-14).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-12 && (out.data()[1] - 1.0).abs() < 1e-12);
        // mean 1, population std 1
        let out = layer_norm(&Tensor::row_vector(vec![0.0, 2.0]), &g, &b, 0.0).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
        let empty = Tensor::<f64>::zeros(&[1, 0]);
        let e = Tensor::<f64>::zeros(&[1, 0]);
        assert!(layer_norm(&empty, &e, &e, 1e-6).is_err());
    }
}
