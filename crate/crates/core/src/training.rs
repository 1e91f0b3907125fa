//! AdamW optimization with global-norm clipping and early stopping, plus the
//! reference baselines.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::head::{wrapped_error_metrics, LossConfig, Metrics};
use crate::network::{Network, NetworkConfig};
use crate::numcore::Tensor;
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub window_len: usize,
    /// Weight of the cosine-alignment term.
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 15,
            clip_norm: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            window_len: 8,
            lambda: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr, clip_norm and adam_eps must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return bad("weight_decay and lambda must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.window_len < 2 {
            return bad("window_len must be at least 2");
        }
        Ok(())
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: i32,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(ps: &ParamStore<F>, cfg: &TrainConfig) -> Self {
        let zeros = |ps: &ParamStore<F>| (0..ps.len()).map(|i| Tensor::zeros(ps.get(i).shape())).collect();
        Self {
            lr: F::lit(cfg.lr),
            beta1: F::lit(cfg.beta1),
            beta2: F::lit(cfg.beta2),
            eps: F::lit(cfg.adam_eps),
            weight_decay: F::lit(cfg.weight_decay),
            m: zeros(ps),
            v: zeros(ps),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
    pub fn step(&mut self, ps: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != ps.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), ps.len())));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NumericalAbort(format!("non-finite gradient for {}", ps.name(i))));
        }
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = ps.get_mut(i);
            for (((th, mi), vi), &gi) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *th -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *th);
            }
        }
        Ok(())
    }
}

pub fn global_norm<F: Scalar>(grads: &[Tensor<F>]) -> F {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x * x)
        .sum::<F>()
        .sqrt()
}

/// Rescales all gradients when their global norm exceeds `max_norm`.
/// Returns the norms before and after clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut [Tensor<F>], max_norm: F) -> (F, F) {
    let pre = global_norm(grads);
    if pre > max_norm {
        let s = max_norm / pre;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    (pre, global_norm(grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    /// Largest global gradient norm after clipping during the epoch.
    pub max_clipped_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test: Metrics,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Trained network, its best parameters and the run report.
pub struct TrainedModel<F: Scalar> {
    pub network: Network,
    pub params: ParamStore<F>,
    pub report: RunReport,
}

fn batch_gradients<F: Scalar>(
    net: &Network,
    ps: &ParamStore<F>,
    batch: &[&Sample<F>],
    loss: &LossConfig,
    dropout: f64,
    dropout_seed: u64,
) -> Result<(F, Vec<Tensor<F>>, Vec<crate::forward::BatchStats<F>>)> {
    let mut f = Forward::train(ps, dropout, dropout_seed);
    let l = net.batch_loss(&mut f, batch, loss)?;
    let value = f.g.scalar(l);
    if !value.is_finite() {
        return Err(Error::NumericalAbort(format!("loss is {value}")));
    }
    let grads = f.g.backward(l)?;
    let mut out: Vec<Tensor<F>> = (0..ps.len()).map(|i| Tensor::zeros(ps.get(i).shape())).collect();
    for (id, var) in f.g.param_vars() {
        if let Some(g) = grads.wrt(var) {
            out[id] = Tensor::new(ps.get(id).shape().to_vec(), g.data().to_vec())?;
        }
    }
    Ok((value, out, std::mem::take(&mut f.batch_stats)))
}

/// Wrapped-phase metrics of the network on `samples`.
pub fn evaluate<F: Scalar>(net: &Network, ps: &ParamStore<F>, samples: &[Sample<F>]) -> Result<Metrics> {
    let preds = net.predict(ps, samples)?;
    let phi_hat: Vec<F> = preds.iter().map(|p| p.phi_hat).collect();
    let phi: Vec<F> = samples.iter().map(|s| s.target.angle()).collect();
    wrapped_error_metrics(&phi_hat, &phi)
}

/// Trains on `split.train`, early-stops on validation MAE and reports test metrics
/// with the best parameters restored.
pub fn train<F: Scalar>(split: &DatasetSplit<F>, net_cfg: &NetworkConfig, tc: &TrainConfig) -> Result<TrainedModel<F>> {
    tc.validate()?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Domain(format!("every split needs samples, got {:?}", split.sizes())));
    }
    let start = Instant::now();
    let loss_cfg = LossConfig::new(tc.lambda, net_cfg.head.eps)?;
    let (net, mut ps) = Network::new::<F>(net_cfg, tc.window_len, tc.seed)?;
    let mut opt = AdamW::new(&ps, tc);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed_0001));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(0x5eed_0002));
    let clip = F::lit(tc.clip_norm);

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<F>)> = None;
    let mut stopped_early = false;
    let mut aborted = None;

    'epochs: for epoch in 0..tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut max_norm = 0.0f64;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample<F>> = chunk.iter().map(|&i| &split.train[i]).collect();
            let seed = dropout_rng.next_u64();
            let (value, mut grads, stats) =
                match batch_gradients(&net, &ps, &batch, &loss_cfg, net_cfg.model.dropout, seed) {
                    Ok(r) => r,
                    Err(Error::NumericalAbort(m)) => {
                        aborted = Some(format!("epoch {epoch}: {m}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
            let (_, post) = clip_gradients(&mut grads, clip);
            max_norm = max_norm.max(post.to_f64_lossy());
            if let Err(Error::NumericalAbort(m)) = opt.step(&mut ps, &grads) {
                aborted = Some(format!("epoch {epoch}: {m}"));
                break 'epochs;
            }
            net.qfm.update_running(&mut ps, &stats);
            loss_sum += value.to_f64_lossy() * batch.len() as f64;
        }
        let val_mae = evaluate(&net, &ps, &split.val)?.mae;
        if !val_mae.is_finite() {
            aborted = Some(format!("epoch {epoch}: validation MAE is {val_mae}"));
            break;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            val_mae,
            max_clipped_grad_norm: max_norm,
        });
        match &best {
            Some((_, b, _)) if val_mae >= *b => {}
            _ => best = Some((epoch, val_mae, ps.clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= tc.patience {
            stopped_early = epoch + 1 < tc.max_epochs;
            break;
        }
    }

    let best_epoch = match best {
        Some((e, _, params)) => {
            ps = params;
            e
        }
        None => 0,
    };
    let test = evaluate(&net, &ps, &split.test)?;
    Ok(TrainedModel {
        network: net,
        params: ps,
        report: RunReport {
            epochs,
            best_epoch,
            stopped_early,
            test,
            aborted,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    })
}

/// Predicts `δφ_{t+1} = δφ_t`.
pub fn persistence_baseline<F: Scalar>(samples: &[Sample<F>]) -> Result<Metrics> {
    let phi_hat: Vec<F> = samples.iter().map(|s| s.last_delta_phi).collect();
    let phi: Vec<F> = samples.iter().map(|s| s.target.angle()).collect();
    wrapped_error_metrics(&phi_hat, &phi)
}

/// Circular mean of the training targets.
pub fn circular_mean<F: Scalar>(train: &[Sample<F>]) -> Result<F> {
    let (s, c) = train.iter().fold((F::zero(), F::zero()), |(s, c), x| {
        (s + x.target.sin_c, c + x.target.cos_c)
    });
    if s == F::zero() && c == F::zero() {
        return Err(Error::Domain("circular mean of an empty or balanced set".into()));
    }
    Ok(s.atan2(c))
}

/// Predicts the training targets' circular mean for every sample.
pub fn circular_mean_baseline<F: Scalar>(train: &[Sample<F>], samples: &[Sample<F>]) -> Result<Metrics> {
    let mu = circular_mean(train)?;
    let phi_hat = vec![mu; samples.len()];
    let phi: Vec<F> = samples.iter().map(|s| s.target.angle()).collect();
    wrapped_error_metrics(&phi_hat, &phi)
}
