//! Forecasting head, circular losses and wrapped-phase metrics.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::CircularTarget;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::model::layer_norm_graph;
use crate::numcore::{Graph, ParamId, Tensor, Unary, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 32, eps: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub eps: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, eps: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !(eps >= 0.0) {
            return Err(Error::Config("loss: lambda and eps must be nonnegative".into()));
        }
        Ok(Self { lambda, eps })
    }
}

/// One next-step prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Forecast<F> {
    pub cos_hat: F,
    pub sin_hat: F,
    pub cos_norm: F,
    pub sin_norm: F,
    pub phi_hat: F,
    /// Raw output was `(0, 0)`: the angle is defined only by the guard.
    pub degenerate: bool,
}

impl<F: Scalar> Forecast<F> {
    pub fn from_values(raw: &[F], normed: &[F]) -> Self {
        Self {
            cos_hat: raw[0],
            sin_hat: raw[1],
            cos_norm: normed[0],
            sin_norm: normed[1],
            phi_hat: normed[1].atan2(normed[0]),
            degenerate: raw[0] == F::zero() && raw[1] == F::zero(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub eps: f64,
}

impl Head {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, d_in: usize, cfg: &HeadConfig) -> Self {
        let h = cfg.hidden;
        Self {
            ln_gamma: ps.add_full("head.ln.gamma", 1, d_in, 1.0),
            ln_beta: ps.add_full("head.ln.beta", 1, d_in, 0.0),
            w1: ps.add_uniform("head.mlp.w1", d_in, h, d_in, rng),
            b1: ps.add_uniform("head.mlp.b1", 1, h, d_in, rng),
            w2: ps.add_uniform("head.mlp.w2", h, 2, h, rng),
            b2: ps.add_uniform("head.mlp.b2", 1, 2, h, rng),
            eps: cfg.eps,
        }
    }

    /// Layer norm → mean pooling → GELU MLP → `(cos, sin)`; returns the raw
    /// and circle-normalized `1 × 2` outputs.
    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, q: Var) -> Result<(Var, Var)> {
        let eps = F::lit(self.eps);
        let (g, b) = (f.param(self.ln_gamma), f.param(self.ln_beta));
        let x = layer_norm_graph(&mut f.g, q, g, b, eps)?;
        let pooled = f.g.mean_rows(x);
        let (w1, b1, w2, b2) = (f.param(self.w1), f.param(self.b1), f.param(self.w2), f.param(self.b2));
        let h = f.g.linear(pooled, w1, Some(b1))?;
        let h = f.g.unary(h, Unary::Gelu);
        let raw = f.g.linear(h, w2, Some(b2))?;
        let normed = f.g.row_normalize(raw, eps);
        Ok((raw, normed))
    }

    pub fn predict<F: Scalar>(&self, ps: &ParamStore<F>, q: &Tensor<F>) -> Result<Forecast<F>> {
        let mut f = Forward::eval(ps);
        let qv = f.g.constant(q.clone());
        let (raw, normed) = self.forward(&mut f, qv)?;
        Ok(Forecast::from_values(f.value(raw).data(), f.value(normed).data()))
    }
}

/// Squared chord length between the predicted and true `(cos, sin)` pairs.
pub fn circular_loss<F: Scalar>(pred: (F, F), target: &CircularTarget<F>) -> F {
    let dc = pred.0 - target.cos_c;
    let ds = pred.1 - target.sin_c;
    dc * dc + ds * ds
}

/// `1 − p·y / (‖p‖‖y‖ + eps)`.
pub fn cosine_loss<F: Scalar>(pred: (F, F), target: &CircularTarget<F>, eps: F) -> F {
    let dot = pred.0 * target.cos_c + pred.1 * target.sin_c;
    let np = pred.0.hypot(pred.1);
    let ny = target.cos_c.hypot(target.sin_c);
    F::one() - dot / (np * ny + eps)
}

pub fn total_loss<F: Scalar>(pred: (F, F), target: &CircularTarget<F>, cfg: &LossConfig) -> F {
    circular_loss(pred, target) + F::lit(cfg.lambda) * cosine_loss(pred, target, F::lit(cfg.eps))
}

/// Differentiable [`total_loss`] of a `1 × 2` prediction node.
pub fn total_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    pred: Var,
    target: &CircularTarget<F>,
    cfg: &LossConfig,
) -> Result<Var> {
    let y = g.constant(target.to_tensor());
    let diff = g.sub(pred, y)?;
    let sq = g.mul(diff, diff)?;
    let circ = g.sum_all(sq);
    if cfg.lambda == 0.0 {
        return Ok(circ);
    }
    let py = g.mul(pred, y)?;
    let dot = g.sum_all(py);
    let np = g.row_norm(pred);
    let ny = target.cos_c.hypot(target.sin_c);
    let den = g.scale(np, ny);
    let den = g.add_const(den, F::lit(cfg.eps));
    let cos = g.div(dot, den)?;
    let neg = g.scale(cos, -F::lit(cfg.lambda));
    let reg = g.add_const(neg, F::lit(cfg.lambda));
    g.add(circ, reg)
}

/// Wrapped-phase error summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n_samples: usize,
}

/// `e = atan2(sin Δ, cos Δ)` for `Δ = φ̂ − φ`, then MSE, MAE and RMSE of `e`.
pub fn wrapped_error_metrics<F: Scalar>(phi_hat: &[F], phi_true: &[F]) -> Result<Metrics> {
    if phi_hat.is_empty() || phi_hat.len() != phi_true.len() {
        return Err(Error::Domain(format!(
            "metrics need equal non-empty lists, got {} and {}",
            phi_hat.len(),
            phi_true.len()
        )));
    }
    let n = phi_hat.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &t) in phi_hat.iter().zip(phi_true) {
        let d = (p - t).to_f64_lossy();
        let e = d.sin().atan2(d.cos());
        se += e * e;
        ae += e.abs();
    }
    let mse = se / n;
    Ok(Metrics {
        mse,
        mae: ae / n,
        rmse: mse.sqrt(),
        n_samples: phi_hat.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn t(phi: f64) -> CircularTarget<f64> {
        CircularTarget::from_angle(phi)
    }

    #[test]
    fn forecast_examples() {
        let f = Forecast::from_values(&[3.0, 4.0], &[0.6, 0.8]);
        assert_eq!(f.phi_hat, 0.8f64.atan2(0.6));
        assert_eq!(Forecast::from_values(&[1.0, 0.0], &[1.0, 0.0]).phi_hat, 0.0);
        assert!(Forecast::from_values(&[0.0, 0.0], &[0.0, 0.0]).degenerate);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(circular_loss((1.0, 0.0), &t(0.0)), 0.0);
        assert!((circular_loss((-1.0, 0.0), &t(0.0)) - 4.0).abs() < 1e-15);
        assert!((circular_loss((1.0, 0.0), &t(0.5)) - (2.0 - 2.0 * 0.5f64.cos())).abs() < 1e-15);
        assert!(cosine_loss((1.0, 0.0), &t(0.0), 0.0).abs() < 1e-15);
        assert!((cosine_loss((0.0, 1.0), &t(0.0), 0.0) - 1.0).abs() < 1e-15);
        assert!((cosine_loss((-1.0, 0.0), &t(0.0), 0.0) - 2.0).abs() < 1e-15);
        let cfg = LossConfig::new(0.1, 0.0).unwrap();
        assert!((total_loss((0.0, 1.0), &t(0.0), &cfg) - 2.1).abs() < 1e-15);
        assert!(total_loss((0.6, 0.8), &CircularTarget::<f64> { cos_c: 0.6, sin_c: 0.8 }, &cfg).abs() < 1e-15);
        assert!(LossConfig::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn graph_loss_agrees_with_formula() {
        for lambda in [0.0, 0.3] {
            let cfg = LossConfig::new(lambda, 1e-6).unwrap();
            let pred = (0.3, -0.7);
            let target = t(1.9);
            let mut g = Graph::new();
            let p = g.constant(Tensor::row_vector(vec![pred.0, pred.1]));
            let l = total_loss_graph(&mut g, p, &target, &cfg).unwrap();
            assert!((g.scalar(l) - total_loss(pred, &target, &cfg)).abs() < 1e-14);
        }
    }

    #[test]
    fn metric_examples() {
        let m = wrapped_error_metrics(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert_eq!((m.mse, m.mae, m.rmse), (0.0, 0.0, 0.0));
        let m = wrapped_error_metrics(&[PI - 0.1], &[-PI + 0.1]).unwrap();
        assert!((m.mae - 0.2).abs() < 1e-12);
        let m = wrapped_error_metrics(&[0.5, -0.5], &[0.0, 0.0]).unwrap();
        assert!((m.mse - 0.25).abs() < 1e-15 && (m.mae - 0.5).abs() < 1e-15 && (m.rmse - 0.5).abs() < 1e-15);
        assert_eq!(m.n_samples, 2);
        assert!(wrapped_error_metrics::<f64>(&[], &[]).is_err());
        assert!(wrapped_error_metrics(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn head_output_is_on_the_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::<f64>::new();
        let head = Head::new(&mut ps, &mut rng, 5, &HeadConfig::default());
        let q = Tensor::matrix(3, 5, (0..15).map(|i| (i as f64 * 0.7).sin()).collect());
        let fc = head.predict(&ps, &q).unwrap();
        let raw = fc.cos_hat.hypot(fc.sin_hat);
        let expect = raw / (raw + 1e-6);
        assert!((fc.cos_norm.hypot(fc.sin_norm) - expect).abs() < 1e-12);
        assert!((expect - 1.0).abs() < 1e-4);
        assert!(fc.phi_hat > -PI && fc.phi_hat <= PI);
    }
}
