//! Simulated multi-head quantum feature mapping: RY angle encoding, ring-CNOT
//! entanglement and exact Pauli-Z readout, followed by a residual mixer and a
//! normalized MLP post-processing block.

mod circuit;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use circuit::{expectation_jacobian, expectations, run_circuit, run_layers, ExpectationOp, StateVector};

use crate::error::{Error, Result};
use crate::forward::{BatchStats, Forward};
use crate::numcore::{ParamId, Tensor, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QfmConfig {
    pub n_qubits: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub d_q: usize,
    /// Hidden width of the post-processing MLP.
    pub mlp_hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for QfmConfig {
    fn default() -> Self {
        Self {
            n_qubits: 4,
            depth: 2,
            n_heads: 3,
            d_q: 16,
            mlp_hidden: 32,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl QfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_qubits < 2 {
            return Err(Error::Config("qfm: ring entanglement needs at least two qubits".into()));
        }
        if self.n_heads == 0 || self.depth == 0 || self.d_q == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("qfm: heads, depth, d_q and mlp_hidden must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("qfm: bn_momentum must lie in [0, 1] and bn_eps be positive".into()));
        }
        Ok(())
    }
}

const RUNNING_MEAN: &str = "qfm.bn.running_mean";
const RUNNING_VAR: &str = "qfm.bn.running_var";

/// Per-sample intermediate values of the feature map.
pub struct QfmPre {
    /// Projected latent `Z` (`T × d_q`).
    pub z: Var,
    /// Encoding angles per head (`T × n_q`).
    pub angles: Vec<Var>,
    /// Measurement maps per head (`T × n_q`).
    pub maps: Vec<Var>,
    /// Residual mixer output `Y_q = Z + Linear_m(concat maps)`.
    pub yq: Var,
}

#[derive(Clone, Debug)]
pub struct Qfm {
    pub cfg: QfmConfig,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    pub heads: Vec<(ParamId, ParamId)>,
    pub w_mix: ParamId,
    pub b_mix: ParamId,
    pub bn_scale: ParamId,
    pub bn_shift: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Qfm {
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, d_in: usize, cfg: &QfmConfig) -> Self {
        let (dq, nq, h) = (cfg.d_q, cfg.n_qubits, cfg.mlp_hidden);
        let w_proj = ps.add_uniform("qfm.proj.w", d_in, dq, d_in, rng);
        let b_proj = ps.add_uniform("qfm.proj.b", 1, dq, d_in, rng);
        let heads = (0..cfg.n_heads)
            .map(|k| {
                (
                    ps.add_uniform(format!("qfm.head{k}.w"), dq, nq, dq, rng),
                    ps.add_uniform(format!("qfm.head{k}.b"), 1, nq, dq, rng),
                )
            })
            .collect();
        let kin = cfg.n_heads * nq;
        let w_mix = ps.add_uniform("qfm.mix.w", kin, dq, kin, rng);
        let b_mix = ps.add_uniform("qfm.mix.b", 1, dq, kin, rng);
        let bn_scale = ps.add_full("qfm.bn.scale", 1, dq, 1.0);
        let bn_shift = ps.add_full("qfm.bn.shift", 1, dq, 0.0);
        ps.add_buffer(RUNNING_MEAN, Tensor::zeros(&[1, dq]));
        ps.add_buffer(RUNNING_VAR, Tensor::full(&[1, dq], F::one()));
        Self {
            cfg: cfg.clone(),
            w_proj,
            b_proj,
            heads,
            w_mix,
            b_mix,
            bn_scale,
            bn_shift,
            w1: ps.add_uniform("qfm.mlp.w1", dq, h, dq, rng),
            b1: ps.add_uniform("qfm.mlp.b1", 1, h, dq, rng),
            w2: ps.add_uniform("qfm.mlp.w2", h, dq, h, rng),
            b2: ps.add_uniform("qfm.mlp.b2", 1, dq, h, rng),
        }
    }

    /// Projection, per-head circuits and the residual mixer for one sample.
    pub fn pre<F: Scalar>(&self, f: &mut Forward<F>, fused: Var) -> Result<QfmPre> {
        let (w, b) = (f.param(self.w_proj), f.param(self.b_proj));
        let z = f.g.linear(fused, w, Some(b))?;
        let mut angles = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.heads.len());
        for &(hw, hb) in &self.heads {
            let (w, b) = (f.param(hw), f.param(hb));
            let theta = f.g.linear(z, w, Some(b))?;
            let m = f.g.custom(theta, Box::new(ExpectationOp { depth: self.cfg.depth }))?;
            angles.push(theta);
            maps.push(m);
        }
        let cat = f.g.concat_cols(&maps)?;
        let (w, b) = (f.param(self.w_mix), f.param(self.b_mix));
        let mix = f.g.linear(cat, w, Some(b))?;
        let yq = f.g.add(z, mix)?;
        Ok(QfmPre { z, angles, maps, yq })
    }

    /// Feature-wise normalization, ReLU MLP and second residual: `Q = Y_q + MLP(BN(Y_q))`.
    ///
    /// `yq` stacks the token rows of every sample in the batch. In training
    /// mode the rows' own statistics are used and recorded; otherwise the
    /// running statistics are applied.
    pub fn post<F: Scalar>(&self, f: &mut Forward<F>, yq: Var) -> Result<Var> {
        let eps = F::lit(self.cfg.bn_eps);
        let normed = if f.training {
            let (v, mean, var) = f.g.standardize_cols(yq, eps);
            f.batch_stats.push(BatchStats {
                name: "qfm.bn".into(),
                mean,
                var,
            });
            v
        } else {
            let rm = f.ps.buffer(RUNNING_MEAN).expect("registered").clone();
            let rv = f.ps.buffer(RUNNING_VAR).expect("registered");
            let neg = f.g.constant(rm.map(|m| -m));
            let inv = f.g.constant(rv.map(|v| F::one() / (v + eps).sqrt()));
            let c = f.g.add_row(yq, neg)?;
            f.g.mul_row(c, inv)?
        };
        let (s, t) = (f.param(self.bn_scale), f.param(self.bn_shift));
        let y = f.g.mul_row(normed, s)?;
        let y = f.g.add_row(y, t)?;
        let (w1, b1, w2, b2) = (f.param(self.w1), f.param(self.b1), f.param(self.w2), f.param(self.b2));
        let h = f.g.linear(y, w1, Some(b1))?;
        let h = f.g.relu(h);
        let p = f.g.linear(h, w2, Some(b2))?;
        f.g.add(yq, p)
    }

    /// Folds recorded batch statistics into the running estimates.
    pub fn update_running<F: Scalar>(&self, ps: &mut ParamStore<F>, stats: &[BatchStats<F>]) {
        let m = F::lit(self.cfg.bn_momentum);
        for s in stats.iter().filter(|s| s.name == "qfm.bn") {
            for (name, batch) in [(RUNNING_MEAN, &s.mean), (RUNNING_VAR, &s.var)] {
                let buf = ps.buffer_mut(name).expect("registered");
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (F::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Plain-value head maps: angles and measurements for every head, given `Z`.
    pub fn head_maps<F: Scalar>(&self, ps: &ParamStore<F>, z: &Tensor<F>) -> Result<(Vec<Tensor<F>>, Vec<Tensor<F>>)> {
        let mut f = Forward::eval(ps);
        let zv = f.g.constant(z.clone());
        let mut angles = Vec::new();
        let mut maps = Vec::new();
        for &(hw, hb) in &self.heads {
            let (w, b) = (f.param(hw), f.param(hb));
            let theta = f.g.linear(zv, w, Some(b))?;
            let m = f.g.custom(theta, Box::new(ExpectationOp { depth: self.cfg.depth }))?;
            angles.push(f.value(theta).clone());
            maps.push(f.value(m).clone());
        }
        Ok((angles, maps))
    }
}

/// Pearson correlation between the columns of `x` (`T × c`).
/// Entries involving a constant column are `None`.
pub fn pearson_matrix<F: Scalar>(x: &Tensor<F>) -> Result<Vec<Vec<Option<F>>>> {
    let (t, c) = x.dims();
    if t < 2 {
        return Err(Error::Domain("correlation needs at least two rows".into()));
    }
    let tf = F::from_usize(t).unwrap();
    let cols: Vec<Vec<F>> = (0..c).map(|j| (0..t).map(|i| x.get(i, j)).collect()).collect();
    let centred: Vec<Vec<F>> = cols
        .iter()
        .map(|col| {
            let mean = col.iter().copied().sum::<F>() / tf;
            col.iter().map(|&v| v - mean).collect()
        })
        .collect();
    let ss: Vec<F> = centred.iter().map(|c| c.iter().map(|&v| v * v).sum::<F>()).collect();
    let scale = cols
        .iter()
        .map(|c| c.iter().fold(F::zero(), |m, v| m.fmax(v.abs())))
        .collect::<Vec<F>>();
    let degenerate = |j: usize| ss[j].sqrt() <= F::lit(1e-12) * (F::one() + scale[j]);
    let mut out = vec![vec![None; c]; c];
    for a in 0..c {
        for b in 0..c {
            if degenerate(a) || degenerate(b) {
                continue;
            }
            let cov: F = centred[a].iter().zip(&centred[b]).map(|(&p, &q)| p * q).sum::<F>();
            let r = if a == b { F::one() } else { cov / (ss[a] * ss[b]).sqrt() };
            out[a][b] = Some(r.fmax(-F::one()).fmin(F::one()));
        }
    }
    Ok(out)
}

/// Correlation diagnostics per head: encoding angles (before the circuit)
/// and measurement maps (after it).
pub fn correlation_maps<F: Scalar>(
    angles: &[Tensor<F>],
    maps: &[Tensor<F>],
) -> Result<(Vec<Vec<Vec<Option<F>>>>, Vec<Vec<Vec<Option<F>>>>)> {
    let pre = angles.iter().map(pearson_matrix).collect::<Result<_>>()?;
    let post = maps.iter().map(pearson_matrix).collect::<Result<_>>()?;
    Ok((pre, post))
}
