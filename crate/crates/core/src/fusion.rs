//! Hierarchical fusion of branch outputs: concat projection, multiscale
//! channel attention, multiscale temporal (spatial) attention, output projection.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::numcore::{Graph, ParamId, Tensor, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Which attention pathways are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    CaSa,
    Sa,
    Ca,
    None,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [Self::CaSa, Self::Sa, Self::Ca, Self::None];

    pub fn channel_attention(self) -> bool {
        matches!(self, Self::CaSa | Self::Ca)
    }

    pub fn spatial_attention(self) -> bool {
        matches!(self, Self::CaSa | Self::Sa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CaSa => "ca_sa",
            Self::Sa => "sa",
            Self::Ca => "ca",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_out: usize,
    pub kernel_sizes: Vec<usize>,
    /// Bottleneck ratio of the channel gate.
    pub reduction: usize,
    pub variant: FusionVariant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_out: 32,
            kernel_sizes: vec![3, 5, 7],
            reduction: 4,
            variant: FusionVariant::CaSa,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.reduction == 0 {
            return Err(Error::Config("fusion: d_out and reduction must be positive".into()));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("fusion: kernel sizes must be odd".into()));
        }
        Ok(())
    }
}

/// Linear-in → multiscale depthwise temporal convolution → linear-out.
#[derive(Clone, Debug)]
pub struct Pathway {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub kernels: Vec<ParamId>,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl Pathway {
    fn new<F: Scalar>(ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str, d: usize, ks: &[usize]) -> Self {
        Self {
            w_in: ps.add_uniform(format!("{prefix}.in.w"), d, d, d, rng),
            b_in: ps.add_uniform(format!("{prefix}.in.b"), 1, d, d, rng),
            kernels: ks
                .iter()
                .map(|&k| ps.add_uniform(format!("{prefix}.conv{k}"), d, k, k, rng))
                .collect(),
            w_out: ps.add_uniform(format!("{prefix}.out.w"), d, d, d, rng),
            b_out: ps.add_uniform(format!("{prefix}.out.b"), 1, d, d, rng),
        }
    }

    fn forward<F: Scalar>(&self, f: &mut Forward<F>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.w_in), f.param(self.b_in));
        let h = f.g.linear(x, w, Some(b))?;
        let ks: Vec<Var> = self.kernels.iter().map(|&k| f.param(k)).collect();
        let h = multiscale_conv_graph(&mut f.g, h, &ks)?;
        let (w, b) = (f.param(self.w_out), f.param(self.b_out));
        f.g.linear(h, w, Some(b))
    }
}

/// Sum of depthwise temporal convolutions, one per kernel (`c × k` each).
pub fn multiscale_conv_graph<F: Scalar>(g: &mut Graph<F>, x: Var, kernels: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &k in kernels {
        let y = g.depthwise_conv(x, k)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    acc.ok_or_else(|| Error::Config("multiscale convolution needs at least one kernel".into()))
}

pub fn multiscale_conv<F: Scalar>(x: &Tensor<F>, kernels: &[Tensor<F>]) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ks: Vec<Var> = kernels.iter().map(|k| g.constant(k.clone())).collect();
    let y = multiscale_conv_graph(&mut g, xv, &ks)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub path: Pathway,
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub path: Pathway,
    /// `2 × 1` weights over (mean, max) channel pools.
    pub w: ParamId,
    pub b: ParamId,
}

/// Gates observed during one fusion pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionGates<F> {
    /// Channel gate `a_c` (`1 × d`).
    pub channel: Option<Vec<F>>,
    /// Temporal gate `a_s` (one entry per time step).
    pub spatial: Option<Vec<F>>,
}

impl<F> Default for FusionGates<F> {
    fn default() -> Self {
        Self {
            channel: None,
            spatial: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub ca: Option<ChannelAttention>,
    pub sa: Option<SpatialAttention>,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl Fusion {
    /// `c_in` is the total width of the concatenated branch outputs.
    pub fn new<F: Scalar>(ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng, c_in: usize, cfg: &FusionConfig) -> Self {
        let d = cfg.d_out;
        let w_f = ps.add_uniform("fusion.proj.w", c_in, d, c_in, rng);
        let b_f = ps.add_uniform("fusion.proj.b", 1, d, c_in, rng);
        let ca = cfg.variant.channel_attention().then(|| {
            let hidden = (d / cfg.reduction).max(1);
            ChannelAttention {
                path: Pathway::new(ps, rng, "fusion.ca", d, &cfg.kernel_sizes),
                w1: ps.add_uniform("fusion.ca.gate.w1", d, hidden, d, rng),
                w2: ps.add_uniform("fusion.ca.gate.w2", hidden, d, hidden, rng),
            }
        });
        let sa = cfg.variant.spatial_attention().then(|| SpatialAttention {
            path: Pathway::new(ps, rng, "fusion.sa", d, &cfg.kernel_sizes),
            w: ps.add_uniform("fusion.sa.gate.w", 2, 1, 2, rng),
            b: ps.add_uniform("fusion.sa.gate.b", 1, 1, 2, rng),
        });
        Self {
            w_f,
            b_f,
            ca,
            sa,
            w_o: ps.add_uniform("fusion.out.w", d, d, d, rng),
            b_o: ps.add_uniform("fusion.out.b", 1, d, d, rng),
        }
    }

    /// Channel concat of `inputs` followed by the fusion projection.
    pub fn project<F: Scalar>(&self, f: &mut Forward<F>, inputs: &[Var]) -> Result<Var> {
        let cat = f.g.concat_cols(inputs)?;
        let (w, b) = (f.param(self.w_f), f.param(self.b_f));
        f.g.linear(cat, w, Some(b))
    }

    /// `X₁ = X₀ + Ĉ ⊙ a_c` with `a_c = σ(W₂ ReLU(W₁ mean_t Ĉ))`; identity when disabled.
    pub fn channel_attention<F: Scalar>(&self, f: &mut Forward<F>, x0: Var, gates: &mut FusionGates<F>) -> Result<Var> {
        let Some(ca) = &self.ca else { return Ok(x0) };
        let c = ca.path.forward(f, x0)?;
        let z = f.g.mean_rows(c);
        let (w1, w2) = (f.param(ca.w1), f.param(ca.w2));
        let h = f.g.matmul(z, w1)?;
        let h = f.g.relu(h);
        let a = f.g.matmul(h, w2)?;
        let a = f.g.sigmoid(a);
        gates.channel = Some(f.value(a).data().to_vec());
        let corr = f.g.mul_row(c, a)?;
        f.g.add(x0, corr)
    }

    /// `X₂ = X₁ + Ŝ ⊙ a_s` with `a_s = σ([mean_c Ŝ, max_c Ŝ] w + b)`; identity when disabled.
    pub fn spatial_attention<F: Scalar>(&self, f: &mut Forward<F>, x1: Var, gates: &mut FusionGates<F>) -> Result<Var> {
        let Some(sa) = &self.sa else { return Ok(x1) };
        let s = sa.path.forward(f, x1)?;
        let avg = f.g.mean_cols(s);
        let max = f.g.max_cols(s);
        let pooled = f.g.concat_cols(&[avg, max])?;
        let (w, b) = (f.param(sa.w), f.param(sa.b));
        let a = f.g.linear(pooled, w, Some(b))?;
        let a = f.g.sigmoid(a);
        gates.spatial = Some(f.value(a).data().to_vec());
        let corr = f.g.mul_col(s, a)?;
        f.g.add(x1, corr)
    }

    pub fn forward<F: Scalar>(&self, f: &mut Forward<F>, inputs: &[Var]) -> Result<(Var, FusionGates<F>)> {
        let mut gates = FusionGates::default();
        let x0 = self.project(f, inputs)?;
        let x1 = self.channel_attention(f, x0, &mut gates)?;
        let x2 = self.spatial_attention(f, x1, &mut gates)?;
        let (w, b) = (f.param(self.w_o), f.param(self.b_o));
        Ok((f.g.linear(x2, w, Some(b))?, gates))
    }

    /// Plain-value convenience wrapper around [`Fusion::forward`].
    pub fn fuse<F: Scalar>(&self, ps: &ParamStore<F>, inputs: &[Tensor<F>]) -> Result<(Tensor<F>, FusionGates<F>)> {
        let mut f = Forward::eval(ps);
        let vars: Vec<Var> = inputs.iter().map(|t| f.g.constant(t.clone())).collect();
        let (y, gates) = self.forward(&mut f, &vars)?;
        Ok((f.value(y).clone(), gates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(variant: FusionVariant, c_in: usize, d: usize) -> (ParamStore<f64>, Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamStore::new();
        let cfg = FusionConfig { d_out: d, variant, ..Default::default() };
        let fu = Fusion::new(&mut ps, &mut rng, c_in, &cfg);
        (ps, fu)
    }

    #[test]
    fn variant_names() {
        for v in FusionVariant::ALL {
            assert_eq!(FusionVariant::parse(v.as_str()).unwrap(), v);
        }
        assert!(FusionVariant::parse("both").is_err());
        assert!(FusionConfig { kernel_sizes: vec![3, 4], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn averaging_projection() {
        let (mut ps, fu) = build(FusionVariant::None, 4, 2);
        *ps.get_mut(fu.w_f) = Tensor::matrix(4, 2, vec![0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5]);
        *ps.get_mut(fu.b_f) = Tensor::zeros(&[1, 2]);
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 4.0, 4.0]);
        let mut f = Forward::eval(&ps);
        let a = f.g.constant(x.clone());
        let b = f.g.constant(x.clone());
        let y = fu.project(&mut f, &[a, b]).unwrap();
        assert!(f.value(y).max_abs_diff(&x) < 1e-15);
        let short = f.g.constant(Tensor::zeros(&[2, 2]));
        assert!(fu.project(&mut f, &[a, short]).is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::matrix(5, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let ks = vec![
            Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]),
            Tensor::zeros(&[1, 5]),
            Tensor::zeros(&[1, 7]),
        ];
        assert_eq!(multiscale_conv(&x, &ks).unwrap(), x);
        let zero: Vec<Tensor<f64>> = [3, 5, 7].iter().map(|&k| Tensor::zeros(&[1, k])).collect();
        assert!(multiscale_conv(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ablations_change_only_their_parameters() {
        let (full, _) = build(FusionVariant::CaSa, 8, 4);
        let (none, _) = build(FusionVariant::None, 8, 4);
        let (ca, _) = build(FusionVariant::Ca, 8, 4);
        let names = |ps: &ParamStore<f64>| -> Vec<(String, Vec<usize>)> {
            (0..ps.len()).map(|i| (ps.name(i).to_string(), ps.get(i).shape().to_vec())).collect()
        };
        let full_n = names(&full);
        for (n, shape) in names(&none).into_iter().chain(names(&ca)) {
            assert!(full_n.contains(&(n, shape)));
        }
        assert!(names(&none).iter().all(|(n, _)| !n.starts_with("fusion.ca") && !n.starts_with("fusion.sa")));
    }
}
