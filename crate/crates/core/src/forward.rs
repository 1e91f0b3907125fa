//! Forward-pass context shared by all model components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::{Graph, ParamId, Tensor, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Batch statistics observed by a normalization layer during a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub name: String,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// A graph under construction plus the parameters and mode it reads from.
pub struct Forward<'a, F: Scalar> {
    pub g: Graph<F>,
    pub ps: &'a ParamStore<F>,
    pub training: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
    /// Number of (token, expert) evaluations performed by MoE layers.
    pub expert_evals: usize,
    pub batch_stats: Vec<BatchStats<F>>,
}

impl<'a, F: Scalar> Forward<'a, F> {
    /// Evaluation mode: no dropout, stored normalization statistics.
    pub fn eval(ps: &'a ParamStore<F>) -> Self {
        Self {
            g: Graph::new(),
            ps,
            training: false,
            dropout: None,
            expert_evals: 0,
            batch_stats: Vec::new(),
        }
    }

    /// Training mode; dropout is active when `rate > 0`.
    pub fn train(ps: &'a ParamStore<F>, rate: f64, seed: u64) -> Self {
        let dropout = (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed)));
        Self {
            training: true,
            dropout,
            ..Self::eval(ps)
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(id, self.ps.get(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.g.value(v)
    }

    /// Inverted dropout.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let rate = *rate;
        let (r, c) = self.g.dims(x);
        let keep = F::lit(1.0 / (1.0 - rate));
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let mask = self.g.constant(Tensor::matrix(r, c, mask));
        self.g.mul(x, mask).expect("mask shape")
    }
}
