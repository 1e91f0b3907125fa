//! Synthetic stream generation, look-back windows, splits and channel normalization.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fringe::{PhaseResult, ShotRecord};
use crate::numcore::{wrap, Tensor};
use crate::scalar::Scalar;

/// Input channels of every window, in column order.
pub const CHANNELS: [&str; 9] = [
    "elapsed_time",
    "dt",
    "theta",
    "rho",
    "phi_rt",
    "delta_phi",
    "aux_a",
    "aux_c",
    "aux_r",
];

/// Column of the historical residual phase in [`CHANNELS`].
pub const DELTA_PHI_CHANNEL: usize = 5;

/// Parameters of the synthetic interferometer stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_shots: usize,
    pub p0_true: f64,
    pub c_true: f64,
    /// Scan phase increment per shot (rad).
    pub theta_step: f64,
    pub drift_amp: f64,
    /// Drift period in shots.
    pub drift_period: f64,
    pub ar_coeff: f64,
    /// Innovation scale of the residual AR(1) process and of the ρ readout noise.
    pub noise_sigma: f64,
    /// Slope of the real-time phase ramp (rad per shot).
    pub rt_rate: f64,
    pub rt_offset: f64,
    /// Constant part of the true residual phase.
    pub residual_offset: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_shots: 4000,
            p0_true: 0.5,
            c_true: 0.2,
            theta_step: 0.9,
            drift_amp: 0.5,
            drift_period: 200.0,
            ar_coeff: 0.8,
            noise_sigma: 0.05,
            rt_rate: 0.002,
            rt_offset: 0.0,
            residual_offset: 0.0,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.n_shots == 0 {
            return bad("n_shots must be positive");
        }
        if !(self.p0_true > 0.0 && self.p0_true < 1.0) {
            return bad("p0_true must lie in (0, 1)");
        }
        if !(self.c_true >= 0.0) {
            return bad("c_true must be nonnegative");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative");
        }
        if !(self.drift_period > 0.0) {
            return bad("drift_period must be positive");
        }
        let finite = [
            self.theta_step,
            self.drift_amp,
            self.ar_coeff,
            self.rt_rate,
            self.rt_offset,
            self.residual_offset,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("parameters must be finite");
        }
        Ok(())
    }
}

/// Generates a shot stream together with the true wrapped residual phase of every shot.
///
/// The residual phase is a sinusoidal drift plus an AR(1) process; the
/// real-time estimate follows a slow linear ramp; the population ratio
/// follows the fringe `P₀ + 2C cos(θ + φ_AI)` with additive Gaussian noise,
/// clipped to `[0, 1]`.
pub fn generate_stream<F: Scalar>(cfg: &GeneratorConfig) -> Result<(Vec<ShotRecord<F>>, Vec<F>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let tau = std::f64::consts::TAU;
    let mut ar = 0.0f64;
    let mut shots = Vec::with_capacity(cfg.n_shots);
    let mut truth = Vec::with_capacity(cfg.n_shots);
    for i in 0..cfg.n_shots {
        let fi = i as f64;
        let theta = wrap(fi * cfg.theta_step);
        ar = cfg.ar_coeff * ar + cfg.noise_sigma * normal();
        let delta = wrap(
            cfg.residual_offset + cfg.drift_amp * (tau * fi / cfg.drift_period).sin() + ar,
        );
        let phi_rt = wrap(cfg.rt_offset + cfg.rt_rate * fi);
        let phi_ai = wrap(phi_rt + delta);
        let raw = cfg.p0_true + 2.0 * cfg.c_true * (theta + phi_ai).cos() + cfg.noise_sigma * normal();
        let aux_a = 2.0 * cfg.c_true + cfg.noise_sigma * normal();
        let aux_c = cfg.c_true + cfg.noise_sigma * normal();
        shots.push(ShotRecord {
            iter: i as i64,
            theta: F::lit(theta),
            rho: F::lit(raw.clamp(0.0, 1.0)),
            phi_rt: F::lit(phi_rt),
            aux_a: F::lit(aux_a),
            aux_c: F::lit(aux_c),
            aux_r: F::lit(raw),
        });
        truth.push(F::lit(delta));
    }
    Ok((shots, truth))
}

/// A look-back window: `L × M` channel values ending at shot `t_end`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<F> {
    pub values: Tensor<F>,
    pub channel_names: &'static [&'static str],
    pub t_end: usize,
}

/// `(cos δφ, sin δφ)` target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircularTarget<F> {
    pub cos_c: F,
    pub sin_c: F,
}

impl<F: Scalar> CircularTarget<F> {
    pub fn from_angle(phi: F) -> Self {
        Self {
            cos_c: phi.cos(),
            sin_c: phi.sin(),
        }
    }

    pub fn angle(&self) -> F {
        self.sin_c.atan2(self.cos_c)
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::row_vector(vec![self.cos_c, self.sin_c])
    }
}

/// One supervised pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<F> {
    pub features: FeatureMatrix<F>,
    pub target: CircularTarget<F>,
    /// Shot index of the target (`t_end + 1`).
    pub target_index: usize,
    /// Unnormalized residual phase at `t_end`.
    pub last_delta_phi: F,
}

impl<F: Scalar> Sample<F> {
    /// Converts every value to another scalar type through `f64`.
    pub fn cast<G: Scalar>(&self) -> Sample<G> {
        let c = |x: F| G::lit(x.to_f64_lossy());
        Sample {
            features: FeatureMatrix {
                values: self.features.values.cast(),
                channel_names: self.features.channel_names,
                t_end: self.features.t_end,
            },
            target: CircularTarget {
                cos_c: c(self.target.cos_c),
                sin_c: c(self.target.sin_c),
            },
            target_index: self.target_index,
            last_delta_phi: c(self.last_delta_phi),
        }
    }
}

fn channel_rows<F: Scalar>(shots: &[ShotRecord<F>], phases: &[PhaseResult<F>]) -> Vec<[F; 9]> {
    let n = shots.len();
    (0..n)
        .map(|i| {
            let s = &shots[i];
            let elapsed = F::lit((s.iter - shots[0].iter) as f64);
            let dt = if i > 0 {
                F::lit((s.iter - shots[i - 1].iter) as f64)
            } else if n > 1 {
                F::lit((shots[1].iter - shots[0].iter) as f64)
            } else {
                F::one()
            };
            let dphi = phases[i].delta_phi.map_or(F::nan(), |a| a.value());
            [elapsed, dt, s.theta, s.rho, s.phi_rt, dphi, s.aux_a, s.aux_c, s.aux_r]
        })
        .collect()
}

/// Builds stride-1 windows of length `window_len` with next-step targets.
/// Windows touching a missing phase (inputs or target) are dropped.
pub fn build_windows<F: Scalar>(
    shots: &[ShotRecord<F>],
    phases: &[PhaseResult<F>],
    window_len: usize,
) -> Result<Vec<Sample<F>>> {
    if window_len < 2 {
        return Err(Error::Config("window length must be at least 2".into()));
    }
    if phases.len() != shots.len() {
        return Err(Error::Shape(format!(
            "{} phases for {} shots",
            phases.len(),
            shots.len()
        )));
    }
    let n = shots.len();
    if n < window_len + 1 {
        return Ok(Vec::new());
    }
    let rows = channel_rows(shots, phases);
    let ok: Vec<bool> = phases.iter().map(PhaseResult::is_ok).collect();
    let mut out = Vec::new();
    for t in window_len - 1..n - 1 {
        let start = t + 1 - window_len;
        if !ok[start..=t + 1].iter().all(|&b| b) {
            continue;
        }
        let mut values = Vec::with_capacity(window_len * CHANNELS.len());
        for row in &rows[start..=t] {
            values.extend_from_slice(row);
        }
        let target = phases[t + 1].delta_phi.expect("ok phase").value();
        out.push(Sample {
            features: FeatureMatrix {
                values: Tensor::matrix(window_len, CHANNELS.len(), values),
                channel_names: &CHANNELS,
                t_end: t,
            },
            target: CircularTarget::from_angle(target),
            target_index: t + 1,
            last_delta_phi: rows[t][DELTA_PHI_CHANNEL],
        });
    }
    Ok(out)
}

/// Per-channel affine normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats<F> {
    pub mean: Vec<F>,
    pub std: Vec<F>,
}

/// Channels with a standard deviation below this are only mean-centred.
pub const MIN_CHANNEL_STD: f64 = 1e-8;

impl<F: Scalar> NormStats<F> {
    pub fn identity(m: usize) -> Self {
        Self {
            mean: vec![F::zero(); m],
            std: vec![F::one(); m],
        }
    }

    /// Mean and population standard deviation over every row of every window.
    pub fn from_samples(samples: &[Sample<F>]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Domain("normalization statistics need training rows".into()));
        };
        let m = first.features.values.cols();
        let mut count = 0usize;
        let mut mean = vec![F::zero(); m];
        for s in samples {
            let v = &s.features.values;
            for r in 0..v.rows() {
                for (acc, &x) in mean.iter_mut().zip(v.row(r)) {
                    *acc += x;
                }
                count += 1;
            }
        }
        let nf = F::from_usize(count).unwrap();
        for x in &mut mean {
            *x /= nf;
        }
        let mut var = vec![F::zero(); m];
        for s in samples {
            let v = &s.features.values;
            for r in 0..v.rows() {
                for (j, &x) in v.row(r).iter().enumerate() {
                    var[j] += (x - mean[j]) * (x - mean[j]);
                }
            }
        }
        let std = var.into_iter().map(|v| (v / nf).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Tensor<F>) -> Tensor<F> {
        let m = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % m;
            *v -= self.mean[j];
            if self.std[j] >= F::lit(MIN_CHANNEL_STD) {
                *v /= self.std[j];
            }
        }
        out
    }
}

/// Time-ordered train/validation/test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<F> {
    pub train: Vec<Sample<F>>,
    pub val: Vec<Sample<F>>,
    pub test: Vec<Sample<F>>,
    /// Statistics of the most recent [`normalize`] call (identity before).
    pub norm_stats: NormStats<F>,
}

impl<F: Scalar> DatasetSplit<F> {
    /// Splits windows in time order by the given train and validation fractions.
    pub fn time_ordered(samples: Vec<Sample<F>>, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(Error::Config("split fractions must be positive and sum to ≤ 1".into()));
        }
        let n = samples.len();
        let n_train = (n as f64 * train_frac).floor() as usize;
        let n_val = (n as f64 * val_frac).floor() as usize;
        let m = samples
            .first()
            .map_or(CHANNELS.len(), |s| s.features.values.cols());
        let mut rest = samples;
        let test = rest.split_off((n_train + n_val).min(n));
        let val = rest.split_off(n_train.min(rest.len()));
        Ok(Self {
            train: rest,
            val,
            test,
            norm_stats: NormStats::identity(m),
        })
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Z-scores every channel with statistics from the training windows only.
pub fn normalize<F: Scalar>(split: &DatasetSplit<F>) -> Result<DatasetSplit<F>> {
    let stats = NormStats::from_samples(&split.train)?;
    let apply = |v: &[Sample<F>]| -> Vec<Sample<F>> {
        v.iter()
            .map(|s| {
                let mut s = s.clone();
                s.features.values = stats.apply(&s.features.values);
                s
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: apply(&split.train),
        val: apply(&split.val),
        test: apply(&split.test),
        norm_stats: stats,
    })
}

/// Summary written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_shots: usize,
    pub n_missing_phases: usize,
    pub window_len: usize,
    pub n_windows: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub channels: Vec<String>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl DatasetManifest {
    pub fn new<F: Scalar>(
        n_shots: usize,
        n_missing_phases: usize,
        window_len: usize,
        split: &DatasetSplit<F>,
    ) -> Self {
        let (train, val, test) = split.sizes();
        Self {
            n_shots,
            n_missing_phases,
            window_len,
            n_windows: train + val + test,
            train,
            val,
            test,
            channels: CHANNELS.iter().map(|s| s.to_string()).collect(),
            norm_mean: split.norm_stats.mean.iter().map(|x| x.to_f64_lossy()).collect(),
            norm_std: split.norm_stats.std.iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fringe::{reconstruct_stream, FringeConfig, PhaseStatus};
    use crate::numcore::Angle;

    fn quiet() -> GeneratorConfig {
        GeneratorConfig {
            n_shots: 100,
            noise_sigma: 0.0,
            drift_amp: 0.0,
            ar_coeff: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn quiet_generator_follows_the_prior() {
        let cfg = quiet();
        let (shots, truth) = generate_stream::<f64>(&cfg).unwrap();
        assert!(truth.iter().all(|&d| d.abs() < 1e-15));
        for s in &shots {
            let expect = cfg.p0_true + 2.0 * cfg.c_true * (s.theta + s.phi_rt).cos();
            assert!((s.rho - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_is_seeded() {
        let cfg = GeneratorConfig { n_shots: 300, ..Default::default() };
        let a = generate_stream::<f64>(&cfg).unwrap();
        let b = generate_stream::<f64>(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_stream::<f64>(&GeneratorConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn generator_mean_population() {
        let cfg = GeneratorConfig {
            n_shots: 2000,
            noise_sigma: 0.01,
            ..Default::default()
        };
        let (shots, _) = generate_stream::<f64>(&cfg).unwrap();
        let mean = shots.iter().map(|s| s.rho).sum::<f64>() / shots.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn generator_validation() {
        for cfg in [
            GeneratorConfig { c_true: -0.1, ..Default::default() },
            GeneratorConfig { p0_true: 1.0, ..Default::default() },
            GeneratorConfig { noise_sigma: -1.0, ..Default::default() },
            GeneratorConfig { n_shots: 0, ..Default::default() },
        ] {
            assert!(generate_stream::<f64>(&cfg).is_err());
        }
    }

    fn ok_phases(n: usize) -> Vec<PhaseResult<f64>> {
        (0..n)
            .map(|i| PhaseResult {
                iter: i as i64,
                phi_ai: Some(Angle::from_wrapped(0.0)),
                delta_phi: Some(Angle::from_wrapped(0.01 * i as f64)),
                status: PhaseStatus::Ok,
            })
            .collect()
    }

    #[test]
    fn window_counts_and_leakage() {
        let (shots, _) = generate_stream::<f64>(&quiet()).unwrap();
        let l = 8;
        let phases = ok_phases(l + 1);
        let w = build_windows(&shots[..l + 1], &phases, l).unwrap();
        assert_eq!(w.len(), 1);
        let phases = ok_phases(100);
        let w = build_windows(&shots, &phases, l).unwrap();
        assert_eq!(w.len(), 100 - l);
        for s in &w {
            assert_eq!(s.target_index, s.features.t_end + 1);
            assert_eq!(s.features.values.rows(), l);
            // last row belongs to t_end, target comes from t_end + 1
            let last = s.features.values.row(l - 1)[DELTA_PHI_CHANNEL];
            assert!((last - 0.01 * s.features.t_end as f64).abs() < 1e-15);
            assert!((s.target.angle() - 0.01 * s.target_index as f64).abs() < 1e-12);
            let t = s.target;
            assert!((t.cos_c.powi(2) + t.sin_c.powi(2) - 1.0).abs() < 1e-9);
        }
        assert!(build_windows(&shots[..5], &ok_phases(5), l).unwrap().is_empty());
        assert!(build_windows(&shots, &ok_phases(100), 1).is_err());
    }

    #[test]
    fn missing_phase_drops_covering_windows() {
        let (shots, _) = generate_stream::<f64>(&quiet()).unwrap();
        let l = 6;
        let clean = build_windows(&shots, &ok_phases(100), l).unwrap();
        let mut phases = ok_phases(100);
        phases[50] = PhaseResult::missing(50, PhaseStatus::MissingDegenerateAmplitude);
        let dirty = build_windows(&shots, &phases, l).unwrap();
        // brute force: windows t with t-L+1 <= 50 <= t+1
        let covering = (l - 1..99).filter(|&t| t + 1 >= 50 && t + 1 - l <= 50).count();
        assert_eq!(clean.len() - dirty.len(), covering);
        assert_eq!(covering, l + 1);
    }

    #[test]
    fn normalization_rules() {
        let (shots, _) = generate_stream::<f64>(&GeneratorConfig { n_shots: 400, ..Default::default() }).unwrap();
        let phases = reconstruct_stream(&shots, &FringeConfig::default()).unwrap();
        let samples = build_windows(&shots, &phases, 8).unwrap();
        let split = DatasetSplit::time_ordered(samples, 0.7, 0.15).unwrap();
        let max_train = split.train.iter().map(|s| s.target_index).max().unwrap();
        let min_val = split.val.iter().map(|s| s.target_index).min().unwrap();
        let max_val = split.val.iter().map(|s| s.target_index).max().unwrap();
        let min_test = split.test.iter().map(|s| s.target_index).min().unwrap();
        assert!(max_train < min_val && max_val < min_test);

        let norm = normalize(&split).unwrap();
        // dt is constant: centred, not scaled
        assert!(norm.norm_stats.std[1] < MIN_CHANNEL_STD);
        assert!(norm.train.iter().all(|s| (0..8).all(|r| s.features.values.get(r, 1) == 0.0)));
        let again = NormStats::from_samples(&norm.train).unwrap();
        for j in 0..CHANNELS.len() {
            assert!(again.mean[j].abs() < 1e-9);
            if j != 1 {
                assert!((again.std[j] - 1.0).abs() < 1e-6);
            }
        }
        // normalizing standardized data is a no-op
        let twice = normalize(&norm).unwrap();
        assert!(twice.train[3].features.values.max_abs_diff(&norm.train[3].features.values) < 1e-9);
        // targets untouched
        assert_eq!(norm.test[0].target, split.test[0].target);
    }

    #[test]
    fn stats_apply_by_definition() {
        let stats = NormStats { mean: vec![3.0], std: vec![2.0] };
        let out = stats.apply(&Tensor::matrix(1, 1, vec![5.0]));
        assert_eq!(out.data(), &[1.0]);
        let empty: DatasetSplit<f64> = DatasetSplit::time_ordered(Vec::new(), 0.7, 0.15).unwrap();
        assert!(normalize(&empty).is_err());
    }
}
