use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::numcore::{ParamId, Tensor, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Embedded tokens with the start index of the patch each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<F> {
    pub tokens: Tensor<F>,
    pub positions: Vec<usize>,
}

/// `⌊(L − P)/stride⌋ + 1`.
pub fn patch_count(window_len: usize, patch_len: usize, stride: usize) -> usize {
    (window_len - patch_len) / stride + 1
}

/// Flattens every `P × M` patch of a window into one row.
pub fn patch_matrix<F: Scalar>(
    window: &Tensor<F>,
    patch_len: usize,
    stride: usize,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let (l, m) = window.dims();
    if patch_len == 0 || stride == 0 || patch_len > l {
        return Err(Error::Config(format!(
            "patch length {patch_len} / stride {stride} invalid for window length {l}"
        )));
    }
    let n = patch_count(l, patch_len, stride);
    let positions: Vec<usize> = (0..n).map(|k| k * stride).collect();
    let mut data = Vec::with_capacity(n * patch_len * m);
    for &s in &positions {
        data.extend_from_slice(&window.data()[s * m..(s + patch_len) * m]);
    }
    Ok((Tensor::matrix(n, patch_len * m, data), positions))
}

/// Affine projection of flattened patches to the model width.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub w: ParamId,
    pub b: ParamId,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new<F: Scalar>(
        ps: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        patch_len: usize,
        stride: usize,
        channels: usize,
        d_model: usize,
    ) -> Self {
        let fan_in = patch_len * channels;
        Self {
            w: ps.add_uniform(format!("{prefix}.w"), fan_in, d_model, fan_in, rng),
            b: ps.add_uniform(format!("{prefix}.b"), 1, d_model, fan_in, rng),
            patch_len,
            stride,
        }
    }

    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, window: &Tensor<F>) -> Result<(Var, Vec<usize>)> {
        let (patches, positions) = patch_matrix(window, self.patch_len, self.stride)?;
        let x = f.g.constant(patches);
        let w = f.param(self.w);
        let b = f.param(self.b);
        Ok((f.g.linear(x, w, Some(b))?, positions))
    }

    pub fn embed<F: Scalar>(&self, ps: &ParamStore<F>, window: &Tensor<F>) -> Result<TokenSequence<F>> {
        let mut f = Forward::eval(ps);
        let (v, positions) = self.forward(&mut f, window)?;
        Ok(TokenSequence {
            tokens: f.value(v).clone(),
            positions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn token_counts() {
        let w = Tensor::<f64>::zeros(&[8, 9]);
        assert_eq!(patch_matrix(&w, 4, 4).unwrap().0.rows(), 2);
        let (p, pos) = patch_matrix(&w, 4, 2).unwrap();
        assert_eq!((p.rows(), p.cols()), (3, 36));
        assert_eq!(pos, vec![0, 2, 4]);
        assert!(patch_matrix(&w, 9, 1).is_err());
        for l in 1..40 {
            for pl in 1..=l {
                for s in 1..6 {
                    assert_eq!(patch_count(l, pl, s), (0..).take_while(|k| k * s + pl <= l).count());
                }
            }
        }
    }

    #[test]
    fn patches_are_contiguous_rows() {
        let w = Tensor::matrix(4, 2, (0..8).map(f64::from).collect());
        let (p, _) = patch_matrix(&w, 2, 1).unwrap();
        assert_eq!(p.row(1), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn zero_window_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let e = PatchEmbed::new(&mut ps, &mut rng, "e", 4, 4, 9, 6);
        *ps.get_mut(e.b) = Tensor::zeros(&[1, 6]);
        let t = e.embed(&ps, &Tensor::zeros(&[8, 9])).unwrap();
        assert_eq!(t.tokens.dims(), (2, 6));
        assert!(t.tokens.data().iter().all(|&x| x == 0.0));
        assert_eq!(t.positions, vec![0, 4]);
    }
}
