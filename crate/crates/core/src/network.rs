//! The full forecaster: embedding, dual branches, fusion, feature map and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{Sample, CHANNELS};
use crate::error::Result;
use crate::forward::Forward;
use crate::fusion::{Fusion, FusionConfig, FusionGates};
use crate::head::{total_loss_graph, Forecast, Head, HeadConfig, LossConfig};
use crate::model::{BarTrace, DualBranch, ModelConfig};
use crate::numcore::{Objective, Tensor, Var};
use crate::params::ParamStore;
use crate::qfm::{Qfm, QfmConfig};
use crate::scalar::Scalar;

/// Architecture settings of every stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkConfig {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub qfm: QfmConfig,
    pub head: HeadConfig,
}

impl NetworkConfig {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        self.model.validate(window_len)?;
        self.fusion.validate()?;
        self.qfm.validate()
    }
}

/// Graph nodes produced for one sample.
pub struct SampleNodes<F> {
    pub raw: Var,
    pub pred: Var,
    pub traces: [BarTrace<F>; 2],
    pub gates: FusionGates<F>,
    pub angles: Vec<Var>,
    pub maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub window_len: usize,
    pub dual: DualBranch,
    pub fusion: Fusion,
    pub qfm: Qfm,
    pub head: Head,
}

impl Network {
    /// Builds the network and its freshly initialized parameters.
    pub fn new<F: Scalar>(cfg: &NetworkConfig, window_len: usize, seed: u64) -> Result<(Self, ParamStore<F>)> {
        cfg.validate(window_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let dual = DualBranch::new(&mut ps, &mut rng, &cfg.model);
        let fusion = Fusion::new(&mut ps, &mut rng, 2 * cfg.model.d_model, &cfg.fusion);
        let qfm = Qfm::new(&mut ps, &mut rng, cfg.fusion.d_out, &cfg.qfm);
        let head = Head::new(&mut ps, &mut rng, cfg.qfm.d_q, &cfg.head);
        Ok((
            Self {
                cfg: cfg.clone(),
                window_len,
                dual,
                fusion,
                qfm,
                head,
            },
            ps,
        ))
    }

    pub fn n_channels(&self) -> usize {
        CHANNELS.len()
    }

    /// Forward pass over a batch of windows. The feature-map normalization
    /// sees the token rows of the whole batch at once.
    pub fn forward_batch<F: Scalar>(&self, f: &mut Forward<F>, windows: &[&Tensor<F>]) -> Result<Vec<SampleNodes<F>>> {
        let mut partial = Vec::with_capacity(windows.len());
        let mut yqs = Vec::with_capacity(windows.len());
        for w in windows {
            let (branches, traces) = self.dual.forward(f, w)?;
            let (fused, gates) = self.fusion.forward(f, &[branches])?;
            let pre = self.qfm.pre(f, fused)?;
            yqs.push(pre.yq);
            partial.push((traces, gates, pre.angles, pre.maps));
        }
        let all = f.g.concat_rows(&yqs)?;
        let q_all = self.qfm.post(f, all)?;
        let mut out = Vec::with_capacity(windows.len());
        let mut offset = 0;
        for ((traces, gates, angles, maps), yq) in partial.into_iter().zip(&yqs) {
            let rows = f.g.dims(*yq).0;
            let q = f.g.slice_rows(q_all, offset, rows)?;
            offset += rows;
            let (raw, pred) = self.head.forward(f, q)?;
            out.push(SampleNodes {
                raw,
                pred,
                traces,
                gates,
                angles,
                maps,
            });
        }
        Ok(out)
    }

    /// Mean total loss over the batch.
    pub fn batch_loss<F: Scalar>(
        &self,
        f: &mut Forward<F>,
        samples: &[&Sample<F>],
        loss: &LossConfig,
    ) -> Result<Var> {
        let windows: Vec<&Tensor<F>> = samples.iter().map(|s| &s.features.values).collect();
        let nodes = self.forward_batch(f, &windows)?;
        let mut terms = Vec::with_capacity(nodes.len());
        for (n, s) in nodes.iter().zip(samples) {
            terms.push(total_loss_graph(&mut f.g, n.pred, &s.target, loss)?);
        }
        let stacked = f.g.concat_rows(&terms)?;
        let sum = f.g.sum_all(stacked);
        Ok(f.g.scale(sum, F::one() / F::from_usize(samples.len()).unwrap()))
    }

    /// Evaluation-mode prediction for one window.
    pub fn predict_one<F: Scalar>(&self, ps: &ParamStore<F>, window: &Tensor<F>) -> Result<Forecast<F>> {
        let mut f = Forward::eval(ps);
        let nodes = self.forward_batch(&mut f, &[window])?;
        let n = &nodes[0];
        Ok(Forecast::from_values(f.value(n.raw).data(), f.value(n.pred).data()))
    }

    /// Evaluation-mode predictions, parallel across samples.
    pub fn predict<F: Scalar>(&self, ps: &ParamStore<F>, samples: &[Sample<F>]) -> Result<Vec<Forecast<F>>> {
        samples
            .par_iter()
            .map(|s| self.predict_one(ps, &s.features.values))
            .collect()
    }

    /// Evaluation-mode diagnostics for one window.
    pub fn inspect<F: Scalar>(&self, ps: &ParamStore<F>, window: &Tensor<F>) -> Result<Inspection<F>> {
        let mut f = Forward::eval(ps);
        let nodes = self.forward_batch(&mut f, &[window])?;
        let n = nodes.into_iter().next().expect("one sample");
        Ok(Inspection {
            forecast: Forecast::from_values(f.value(n.raw).data(), f.value(n.pred).data()),
            angles: n.angles.iter().map(|&v| f.value(v).clone()).collect(),
            maps: n.maps.iter().map(|&v| f.value(v).clone()).collect(),
            traces: n.traces,
            gates: n.gates,
            expert_evals: f.expert_evals,
        })
    }
}

/// Intermediate values of one evaluation pass.
#[derive(Clone, Debug)]
pub struct Inspection<F> {
    pub forecast: Forecast<F>,
    pub angles: Vec<Tensor<F>>,
    pub maps: Vec<Tensor<F>>,
    pub traces: [BarTrace<F>; 2],
    pub gates: FusionGates<F>,
    pub expert_evals: usize,
}

/// Mean batch loss as a function of the flattened parameters, for gradient
/// checking. Runs in training mode with dropout off so the feature-map
/// normalization differentiates through the batch statistics.
pub struct NetworkObjective<'a, F: Scalar> {
    pub net: &'a Network,
    pub params: &'a ParamStore<F>,
    pub samples: Vec<&'a Sample<F>>,
    pub loss: LossConfig,
}

impl<F: Scalar> NetworkObjective<'_, F> {
    fn with_params<T>(&self, flat: &[F], k: impl FnOnce(&ParamStore<F>) -> Result<T>) -> Result<T> {
        let mut ps = self.params.clone();
        ps.set_flat(flat)?;
        k(&ps)
    }
}

impl<F: Scalar> Objective<F> for NetworkObjective<'_, F> {
    fn evaluate(&self, flat: &[F]) -> Result<F> {
        self.with_params(flat, |ps| {
            let mut f = Forward::train(ps, 0.0, 0);
            let l = self.net.batch_loss(&mut f, &self.samples, &self.loss)?;
            Ok(f.g.scalar(l))
        })
    }

    fn gradient(&self, flat: &[F]) -> Result<Vec<F>> {
        self.with_params(flat, |ps| {
            let mut f = Forward::train(ps, 0.0, 0);
            let l = self.net.batch_loss(&mut f, &self.samples, &self.loss)?;
            let grads = f.g.backward(l)?;
            let mut out: Vec<Tensor<F>> = (0..ps.len()).map(|i| Tensor::zeros(ps.get(i).shape())).collect();
            for (id, var) in f.g.param_vars() {
                if let Some(g) = grads.wrt(var) {
                    out[id] = g.clone();
                }
            }
            Ok(out.into_iter().flat_map(|t| t.into_data()).collect())
        })
    }
}
