//! Quick self-check of the theorem and oracle suites, for the `selftest`
//! subcommand. Each check compares library kernels against straight-line
//! reference code kept in this module.

use std::f64::consts::PI;

use f128::f128;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ExperimentConfig;
use crate::dataio::{generate_stream, CircularTarget, GeneratorConfig};
use crate::fringe::{reconstruct_stream, FringeConfig, PhaseStatus};
use crate::head::{circular_loss, total_loss, wrapped_error_metrics, LossConfig};
use crate::model::bar_aggregate;
use crate::network::{Network, NetworkObjective};
use crate::numcore::{grad_check, Tensor};
use crate::pipeline;
use crate::qfm::{expectations, run_circuit};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

pub fn run_all() -> Vec<Check> {
    vec![
        bar_theorems(),
        qfm_oracle(),
        measurement_bounds(),
        loss_identities(),
        fringe_exactness(),
        gradient_integrity(),
    ]
}

fn gauss(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    scale * rng.sample::<f64, _>(StandardNormal)
}

fn rows(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..r).map(|_| (0..c).map(|_| gauss(rng, scale)).collect()).collect()
}

fn row_times(v: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
    (0..m[0].len()).map(|j| (0..v.len()).map(|i| v[i] * m[i][j]).sum()).collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn bar_theorems() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut dev, mut sum_gap, mut excess, mut dom) = (0.0f64, 0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut positive = true;
    for _ in 0..300 {
        let d = rng.random_range(1..=12);
        let d_r = rng.random_range(1..=d);
        let n = rng.random_range(1..=6);
        let c = rows(&mut rng, 1, d, 1.0).remove(0);
        let hist = rows(&mut rng, n, d, 1.0);
        let (wq, wk, wv) = (rows(&mut rng, d, d_r, 0.5), rows(&mut rng, d, d_r, 0.5), rows(&mut rng, d, d, 0.5));
        let t = |m: &Vec<Vec<f64>>| Tensor::from_rows(m).expect("rectangular");
        let (r, alpha) = match bar_aggregate(&c, &hist, &t(&wq), &t(&wk), &t(&wv)) {
            Ok(x) => x,
            Err(e) => return Check::new("block retrieval theorems", false, e.to_string()),
        };

        let q = row_times(&c, &wq);
        let s: Vec<f64> = hist
            .iter()
            .map(|b| row_times(b, &wk).iter().zip(&q).map(|(x, y)| x * y).sum::<f64>() / (d_r as f64).sqrt())
            .collect();
        let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let a_ref: Vec<f64> = e.iter().map(|x| x / z).collect();
        let v: Vec<Vec<f64>> = hist.iter().map(|b| row_times(b, &wv)).collect();
        let r_ref: Vec<f64> = (0..d).map(|k| (0..n).map(|j| a_ref[j] * v[j][k]).sum()).collect();

        for (x, y) in alpha.iter().zip(&a_ref).chain(r.iter().zip(&r_ref)) {
            dev = dev.max((x - y).abs());
        }
        positive &= alpha.iter().all(|&a| a > 0.0);
        sum_gap = sum_gap.max((alpha.iter().sum::<f64>() - 1.0).abs());
        excess = excess.max(l2(&r) - v.iter().map(|x| l2(x)).fold(0.0, f64::max));
        if n > 1 {
            let j = (0..n).fold(0, |b, i| if s[i] > s[b] { i } else { b });
            let second = (0..n).filter(|&i| i != j).map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
            let bound = 1.0 / (1.0 + (n - 1) as f64 * (second - s[j]).exp());
            dom = dom.max(bound - alpha[j]);
        }
    }
    let passed = dev <= 1e-12 && positive && sum_gap <= 1e-10 && excess <= 1e-9 && dom <= 1e-12;
    Check::new(
        "block retrieval theorems",
        passed,
        format!("oracle dev {dev:.1e}, |Σα−1| {sum_gap:.1e}, ‖r‖−M {excess:.1e}, dominance slack {dom:.1e}"),
    )
}

/// Dense real unitary for one `[RY, ring CNOT]` layer, qubit 0 as the most
/// significant bit.
fn dense_layer(angles: &[f64]) -> Vec<Vec<f64>> {
    let n = angles.len();
    let dim = 1usize << n;
    let bit = |idx: usize, q: usize| (idx >> (n - 1 - q)) & 1;
    let mut u = vec![vec![0.0; dim]; dim];
    for (row, u_row) in u.iter_mut().enumerate() {
        for (col, entry) in u_row.iter_mut().enumerate() {
            let mut p = 1.0;
            for (q, &th) in angles.iter().enumerate() {
                let (s, c) = (th / 2.0).sin_cos();
                p *= match (bit(row, q), bit(col, q)) {
                    (0, 0) | (1, 1) => c,
                    (0, 1) => -s,
                    _ => s,
                };
            }
            *entry = p;
        }
    }
    for r in 0..n {
        let t = (r + 1) % n;
        let perm: Vec<usize> = (0..dim)
            .map(|i| if bit(i, r) == 1 { i ^ (1 << (n - 1 - t)) } else { i })
            .collect();
        u = (0..dim).map(|i| u[perm[i]].clone()).collect();
    }
    u
}

fn dense_state(angles: &[f64], depth: usize) -> Vec<f64> {
    let u = dense_layer(angles);
    let mut psi = vec![0.0; u.len()];
    psi[0] = 1.0;
    for _ in 0..depth {
        psi = u.iter().map(|row| row.iter().zip(&psi).map(|(a, b)| a * b).sum()).collect();
    }
    psi
}

fn qfm_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut dev = 0.0f64;
    for n in 2..=4 {
        for depth in 1..=2 {
            for _ in 0..25 {
                let angles: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0 * PI..2.0 * PI)).collect();
                let reference = dense_state(&angles, depth);
                match run_circuit(&angles, depth) {
                    Ok(psi) => {
                        for (a, b) in psi.amplitudes().iter().zip(&reference) {
                            dev = dev.max((a.re - b).abs()).max(a.im.abs());
                        }
                    }
                    Err(e) => return Check::new("feature-map simulator", false, e.to_string()),
                }
            }
        }
    }
    Check::new("feature-map simulator", dev <= 1e-10, format!("max amplitude deviation vs dense unitaries {dev:.1e}"))
}

fn measurement_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = f64::NEG_INFINITY;
    let mut outside = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=6);
        let depth = rng.random_range(1..=4);
        let angles: Vec<f64> = (0..n).map(|_| gauss(&mut rng, 4.0)).collect();
        let m = match expectations(&angles, depth) {
            Ok(m) => m,
            Err(e) => return Check::new("measurement bounds", false, e.to_string()),
        };
        outside += m.iter().filter(|x| x.abs() > 1.0).count();
        worst = worst.max(l2(&m) - (n as f64).sqrt());
    }
    Check::new(
        "measurement bounds",
        outside == 0 && worst <= 0.0,
        format!("{outside} expectations outside [−1, 1], max ‖m‖−√n_q {worst:.3}"),
    )
}

fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let plain = LossConfig::new(0.0, 1e-6).expect("valid");
    let (mut lam, mut chord, mut shift) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let phi = rng.random_range(-PI..PI);
        let y = CircularTarget::from_angle(phi);
        let p = (gauss(&mut rng, 2.0), gauss(&mut rng, 2.0));
        lam = lam.max((total_loss(p, &y, &plain) - circular_loss(p, &y)).abs());
        let psi = rng.random_range(-PI..PI);
        chord = chord.max((circular_loss((psi.cos(), psi.sin()), &y) - (2.0 - 2.0 * (psi - phi).cos())).abs());
        let k = rng.random_range(-3i32..=3) as f64;
        if let (Ok(a), Ok(b)) = (wrapped_error_metrics(&[psi], &[phi]), wrapped_error_metrics(&[psi + 2.0 * PI * k], &[phi])) {
            shift = shift.max((a.mae - b.mae).abs()).max((a.mse - b.mse).abs());
        } else {
            return Check::new("loss identities", false, "metric evaluation failed".into());
        }
    }
    Check::new(
        "loss identities",
        lam <= 1e-12 && chord <= 1e-12 && shift <= 1e-9,
        format!("λ=0 gap {lam:.1e}, chord gap {chord:.1e}, 2πk shift {shift:.1e}"),
    )
}

fn fringe_exactness() -> Check {
    let base = GeneratorConfig {
        n_shots: 200,
        c_true: 0.2,
        noise_sigma: 0.0,
        drift_amp: 0.0,
        ar_coeff: 0.0,
        rt_rate: 0.0,
        rt_offset: 0.7,
        residual_offset: 0.0,
        ..GeneratorConfig::default()
    };
    let fc = FringeConfig::default();
    let run = |g: &GeneratorConfig| -> crate::Result<_> {
        let (shots, truth) = generate_stream::<f64>(g)?;
        Ok((reconstruct_stream(&shots, &fc)?, truth))
    };
    let (res, truth) = match run(&base) {
        Ok(x) => x,
        Err(e) => return Check::new("fringe reconstruction", false, e.to_string()),
    };
    let mut err = 0.0f64;
    let mut ok = 0;
    for (r, &t) in res.iter().zip(&truth) {
        if let Some(d) = r.delta_phi {
            ok += 1;
            let diff = d.value() - t;
            err = err.max(diff.sin().atan2(diff.cos()).abs());
        }
    }
    let flat = match run(&GeneratorConfig { c_true: 0.0, ..base.clone() }) {
        Ok((r, _)) => r,
        Err(e) => return Check::new("fringe reconstruction", false, e.to_string()),
    };
    let degenerate = flat.iter().filter(|r| r.status == PhaseStatus::MissingDegenerateAmplitude).count();
    Check::new(
        "fringe reconstruction",
        ok == res.len() && err <= 1e-8 && degenerate == flat.len(),
        format!("{ok}/{} recovered, max error {err:.1e}; zero contrast {degenerate}/{} degenerate", res.len(), flat.len()),
    )
}

fn gradient_integrity() -> Check {
    let overrides: Vec<String> = [
        "generator.n_shots=120",
        "train.window_len=4",
        "train.lambda=0.1",
        "model.d_model=4",
        "model.d_r=2",
        "model.d_ff=4",
        "model.n_experts=2",
        "model.top_k=1",
        "model.dropout=0.0",
        "fusion.d_out=4",
        "qfm.d_q=4",
        "qfm.n_qubits=2",
        "qfm.n_heads=1",
        "qfm.mlp_hidden=4",
        "head.hidden=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let result = (|| -> crate::Result<(usize, f64)> {
        let cfg = ExperimentConfig::from_toml_str("", &overrides)?;
        let data = pipeline::prepare(&cfg)?;
        let samples: Vec<_> = data.split.train.iter().take(2).map(|s| s.cast::<f128>()).collect();
        let (net, ps) = Network::new::<f128>(&cfg.network(), cfg.train.window_len, cfg.train.seed)?;
        let obj = NetworkObjective {
            net: &net,
            params: &ps,
            samples: samples.iter().collect(),
            loss: LossConfig::new(cfg.train.lambda, cfg.head.eps)?,
        };
        let r = grad_check(&obj, &ps.flatten(), f128::lit(1e-5))?;
        Ok((r.param_count, r.max_rel_error.to_f64().unwrap_or(f64::NAN)))
    })();
    match result {
        Ok((n, e)) => Check::new(
            "gradient integrity",
            e <= 1e-4,
            format!("{n} parameters, binary128, h=1e-5: max relative error {e:.1e}"),
        ),
        Err(e) => Check::new("gradient integrity", false, e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_layer_is_orthogonal() {
        let u = dense_layer(&[0.3, -1.1, 2.0]);
        for i in 0..u.len() {
            for j in 0..u.len() {
                let dot: f64 = (0..u.len()).map(|k| u[k][i] * u[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_checks_pass() {
        for c in [bar_theorems(), qfm_oracle(), measurement_bounds(), loss_identities(), fringe_exactness()] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
