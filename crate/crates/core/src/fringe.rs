//! Per-shot atomic phase reconstruction from interferometric fringes.
//!
//! Each shot is inverted against a fringe `P(θ) = P₀ + a cos θ + b sin θ`
//! fitted by least squares on a centred window of neighbouring shots. The
//! arccos inversion yields two candidate phases; the real-time classical
//! estimate acts as a circular prior that picks one of them.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{wrap, Angle};
use crate::scalar::Scalar;

/// One interferometer shot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShotRecord<F> {
    pub iter: i64,
    /// Applied Raman scan phase (rad).
    pub theta: F,
    /// Population ratio.
    pub rho: F,
    /// Real-time classical phase estimate (rad).
    pub phi_rt: F,
    pub aux_a: F,
    pub aux_c: F,
    pub aux_r: F,
}

/// Least-squares fringe coefficients for one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FringeFit<F> {
    pub p0_hat: F,
    pub a_hat: F,
    pub b_hat: F,
    /// `sqrt(a_hat² + b_hat²)`, twice the fitted contrast.
    pub r_hat: F,
    pub window_size: usize,
}

impl<F: Scalar> FringeFit<F> {
    pub fn contrast(&self) -> F {
        self.r_hat * F::lit(0.5)
    }

    /// Phase of the fitted fringe, `atan2(−b, a)`.
    pub fn phase(&self) -> F {
        (-self.b_hat).atan2(self.a_hat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseStatus {
    Ok,
    MissingInsufficientWindow,
    MissingDegenerateAmplitude,
}

impl PhaseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseStatus::Ok => "ok",
            PhaseStatus::MissingInsufficientWindow => "missing_insufficient_window",
            PhaseStatus::MissingDegenerateAmplitude => "missing_degenerate_amplitude",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(PhaseStatus::Ok),
            "missing_insufficient_window" => Ok(PhaseStatus::MissingInsufficientWindow),
            "missing_degenerate_amplitude" => Ok(PhaseStatus::MissingDegenerateAmplitude),
            other => Err(Error::Format(format!("unknown phase status {other:?}"))),
        }
    }
}

/// Reconstructed phase for one shot. Phase fields are `None` unless `status` is `Ok`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseResult<F> {
    pub iter: i64,
    pub phi_ai: Option<Angle<F>>,
    pub delta_phi: Option<Angle<F>>,
    pub status: PhaseStatus,
}

impl<F: Scalar> PhaseResult<F> {
    pub fn missing(iter: i64, status: PhaseStatus) -> Self {
        Self {
            iter,
            phi_ai: None,
            delta_phi: None,
            status,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == PhaseStatus::Ok
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FringeConfig {
    /// Neighbours on each side of a shot used for its local fit.
    pub window_half_width: usize,
    pub min_points: usize,
    /// Fitted amplitudes at or below this are treated as degenerate.
    pub eps_amp: f64,
}

impl Default for FringeConfig {
    fn default() -> Self {
        Self {
            window_half_width: 10,
            min_points: 5,
            eps_amp: 1e-3,
        }
    }
}

const MAX_CONDITION: f64 = 1e12;

/// Solves `A x = b` for a 3×3 system by elimination with partial pivoting.
fn solve3<F: Scalar>(a: [[F; 3]; 3], b: [F; 3]) -> Option<[F; 3]> {
    let mut m = [[F::zero(); 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        if m[pivot][col] == F::zero() {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                let v = m[col][k];
                m[row][k] -= f * v;
            }
        }
    }
    let mut x = [F::zero(); 3];
    for i in (0..3).rev() {
        let mut s = m[i][3];
        for k in i + 1..3 {
            s -= m[i][k] * x[k];
        }
        x[i] = s / m[i][i];
    }
    Some(x)
}

fn norm1<F: Scalar>(a: &[[F; 3]; 3]) -> F {
    (0..3)
        .map(|j| (0..3).map(|i| a[i][j].abs()).sum::<F>())
        .fold(F::zero(), F::fmax)
}

/// 1-norm condition number of a 3×3 matrix; infinite when singular.
fn condition3<F: Scalar>(a: &[[F; 3]; 3]) -> F {
    let mut inv = [[F::zero(); 3]; 3];
    for j in 0..3 {
        let mut e = [F::zero(); 3];
        e[j] = F::one();
        match solve3(*a, e) {
            Some(col) => {
                for i in 0..3 {
                    inv[i][j] = col[i];
                }
            }
            None => return F::infinity(),
        }
    }
    norm1(a) * norm1(&inv)
}

/// Fits `P(θ) = P₀ + a cos θ + b sin θ` to `(θ_i, ρ_i)` through the 3×3 normal equations.
pub fn fit_fringe_window<F: Scalar>(
    window: &[ShotRecord<F>],
    min_points: usize,
) -> Result<FringeFit<F>> {
    let need = min_points.max(3);
    if window.len() < need {
        return Err(Error::InsufficientWindow {
            got: window.len(),
            need,
        });
    }
    let mut xtx = [[F::zero(); 3]; 3];
    let mut xtp = [F::zero(); 3];
    for s in window {
        let row = [F::one(), s.theta.cos(), s.theta.sin()];
        for i in 0..3 {
            for j in 0..3 {
                xtx[i][j] += row[i] * row[j];
            }
            xtp[i] += row[i] * s.rho;
        }
    }
    let cond = condition3(&xtx);
    if !(cond <= F::lit(MAX_CONDITION)) {
        return Err(Error::DegenerateFit(cond.to_f64_lossy()));
    }
    let beta = solve3(xtx, xtp).ok_or(Error::DegenerateFit(f64::INFINITY))?;
    let (a_hat, b_hat) = (beta[1], beta[2]);
    Ok(FringeFit {
        p0_hat: beta[0],
        a_hat,
        b_hat,
        r_hat: a_hat.hypot(b_hat),
        window_size: window.len(),
    })
}

/// The two phases consistent with `ρ` under the fitted fringe: `(d − θ, −d − θ)`, wrapped.
pub fn phase_candidates<F: Scalar>(shot: &ShotRecord<F>, fit: &FringeFit<F>) -> (F, F) {
    let u = ((shot.rho - fit.p0_hat) / fit.r_hat).fmax(-F::one()).fmin(F::one());
    let d = u.acos();
    (wrap(d - shot.theta), wrap(-d - shot.theta))
}

/// Inverts one shot against a fitted fringe and selects the candidate closest
/// to the real-time prior (ties go to the `d − θ` branch).
pub fn invert_shot<F: Scalar>(shot: &ShotRecord<F>, fit: &FringeFit<F>, eps_amp: F) -> PhaseResult<F> {
    if !(fit.r_hat > eps_amp) {
        return PhaseResult::missing(shot.iter, PhaseStatus::MissingDegenerateAmplitude);
    }
    let (c1, c2) = phase_candidates(shot, fit);
    let d1 = wrap(c1 - shot.phi_rt).abs();
    let d2 = wrap(c2 - shot.phi_rt).abs();
    let phi_ai = if d1 <= d2 { c1 } else { c2 };
    PhaseResult {
        iter: shot.iter,
        phi_ai: Some(Angle::from_wrapped(phi_ai)),
        delta_phi: Some(Angle::from_wrapped(wrap(phi_ai - shot.phi_rt))),
        status: PhaseStatus::Ok,
    }
}

/// Reconstructs phases for a whole stream, one local fit per shot.
pub fn reconstruct_stream<F: Scalar>(
    shots: &[ShotRecord<F>],
    cfg: &FringeConfig,
) -> Result<Vec<PhaseResult<F>>> {
    if shots.is_empty() {
        return Err(Error::Domain("empty shot stream".into()));
    }
    if shots.windows(2).any(|w| w[1].iter <= w[0].iter) {
        return Err(Error::Domain("shot iterations must be strictly increasing".into()));
    }
    let n = shots.len();
    let eps = F::lit(cfg.eps_amp);
    let results = (0..n)
        .into_par_iter()
        .map(|i| {
            let lo = i.saturating_sub(cfg.window_half_width);
            let hi = (i + cfg.window_half_width).min(n - 1);
            let window = &shots[lo..=hi];
            match fit_fringe_window(window, cfg.min_points) {
                Ok(fit) => invert_shot(&shots[i], &fit, eps),
                Err(Error::InsufficientWindow { .. }) => {
                    PhaseResult::missing(shots[i].iter, PhaseStatus::MissingInsufficientWindow)
                }
                Err(_) => {
                    PhaseResult::missing(shots[i].iter, PhaseStatus::MissingDegenerateAmplitude)
                }
            }
        })
        .collect();
    Ok(results)
}

#[derive(Serialize, Deserialize)]
struct ShotRow {
    iter: i64,
    theta: f64,
    rho: f64,
    phi_rt: f64,
    a: f64,
    c: f64,
    r: f64,
}

/// Reads the `iter,theta,rho,phi_rt,a,c,r` shot format.
pub fn read_shots<F: Scalar, R: Read>(reader: R) -> Result<Vec<ShotRecord<F>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["iter", "theta", "rho", "phi_rt", "a", "c", "r"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!(
            "expected header {}, found {}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: ShotRow = row?;
        if !r.theta.is_finite() || !r.phi_rt.is_finite() {
            return Err(Error::Format(format!("non-finite phase at iter {}", r.iter)));
        }
        out.push(ShotRecord {
            iter: r.iter,
            theta: F::lit(r.theta),
            rho: F::lit(r.rho),
            phi_rt: F::lit(r.phi_rt),
            aux_a: F::lit(r.a),
            aux_c: F::lit(r.c),
            aux_r: F::lit(r.r),
        });
    }
    Ok(out)
}

pub fn write_shots<F: Scalar, W: Write>(writer: W, shots: &[ShotRecord<F>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(writer);
    for s in shots {
        w.serialize(ShotRow {
            iter: s.iter,
            theta: s.theta.to_f64_lossy(),
            rho: s.rho.to_f64_lossy(),
            phi_rt: s.phi_rt.to_f64_lossy(),
            a: s.aux_a.to_f64_lossy(),
            c: s.aux_c.to_f64_lossy(),
            r: s.aux_r.to_f64_lossy(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `iter,phi_ai,delta_phi,status`; missing phases are empty fields.
pub fn write_phases<F: Scalar, W: Write>(writer: W, phases: &[PhaseResult<F>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["iter", "phi_ai", "delta_phi", "status"])?;
    let fmt = |a: Option<Angle<F>>| a.map(|v| v.value().to_f64_lossy().to_string()).unwrap_or_default();
    for p in phases {
        w.write_record([
            p.iter.to_string(),
            fmt(p.phi_ai),
            fmt(p.delta_phi),
            p.status.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_phases<F: Scalar, R: Read>(reader: R) -> Result<Vec<PhaseResult<F>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Format("phase rows need 4 fields".into()));
        }
        let iter: i64 = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad iter {:?}", &rec[0])))?;
        let status = PhaseStatus::parse(&rec[3])?;
        let parse = |s: &str| -> Result<Option<Angle<F>>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(|v| Some(Angle::from_wrapped(F::lit(v))))
                    .map_err(|_| Error::Format(format!("bad phase {s:?}")))
            }
        };
        out.push(PhaseResult {
            iter,
            phi_ai: parse(&rec[1])?,
            delta_phi: parse(&rec[2])?,
            status,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn shot(iter: i64, theta: f64, rho: f64, phi_rt: f64) -> ShotRecord<f64> {
        ShotRecord {
            iter,
            theta,
            rho,
            phi_rt,
            aux_a: 0.0,
            aux_c: 0.0,
            aux_r: rho,
        }
    }

    fn fringe(p0: f64, c: f64, phi: f64, thetas: &[f64]) -> Vec<ShotRecord<f64>> {
        thetas
            .iter()
            .enumerate()
            .map(|(i, &t)| shot(i as i64, t, p0 + 2.0 * c * (t + phi).cos(), phi))
            .collect()
    }

    #[test]
    fn exact_fit_on_noiseless_fringe() {
        let thetas: Vec<f64> = (0..8).map(|i| i as f64 * PI / 4.0).collect();
        let fit = fit_fringe_window(&fringe(0.5, 0.2, 0.3, &thetas), 5).unwrap();
        assert!((fit.p0_hat - 0.5).abs() < 1e-10);
        assert!((fit.a_hat - 0.4 * 0.3f64.cos()).abs() < 1e-10);
        assert!((fit.b_hat + 0.4 * 0.3f64.sin()).abs() < 1e-10);
        assert!((fit.r_hat - 0.4).abs() < 1e-10);
        assert!((fit.phase() - 0.3).abs() < 1e-10);
        assert_eq!(fit.window_size, 8);
    }

    #[test]
    fn constant_signal_has_zero_amplitude() {
        let thetas: Vec<f64> = (0..8).map(|i| i as f64 * PI / 4.0).collect();
        let fit = fit_fringe_window(&fringe(0.5, 0.0, 0.0, &thetas), 5).unwrap();
        assert!((fit.p0_hat - 0.5).abs() < 1e-12);
        assert!(fit.r_hat.abs() < 1e-12);
        assert!((fit.r_hat.powi(2) - fit.a_hat.powi(2) - fit.b_hat.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        let few = fringe(0.5, 0.2, 0.0, &[0.0, 1.0, 2.0]);
        assert!(matches!(
            fit_fringe_window(&few, 5),
            Err(Error::InsufficientWindow { got: 3, need: 5 })
        ));
        let same = fringe(0.5, 0.2, 0.0, &[1.0; 6]);
        assert!(matches!(fit_fringe_window(&same, 5), Err(Error::DegenerateFit(_))));
        // congruent mod 2π is just as degenerate
        let cong = fringe(0.5, 0.2, 0.0, &[1.0, 1.0 + 2.0 * PI, 1.0 - 2.0 * PI, 1.0, 1.0]);
        assert!(fit_fringe_window(&cong, 5).is_err());
    }

    fn fit_of(p0: f64, r: f64) -> FringeFit<f64> {
        FringeFit {
            p0_hat: p0,
            a_hat: r,
            b_hat: 0.0,
            r_hat: r,
            window_size: 10,
        }
    }

    #[test]
    fn inversion_at_fringe_midpoint() {
        let res = invert_shot(&shot(0, 0.0, 0.5, 1.4), &fit_of(0.5, 0.4), 1e-3);
        assert_eq!(res.status, PhaseStatus::Ok);
        assert!((res.phi_ai.unwrap().value() - PI / 2.0).abs() < 1e-12);
        // π/2 − 1.4
        assert!((res.delta_phi.unwrap().value() - 0.170_796_326_794_896_6).abs() < 1e-12);
    }

    #[test]
    fn inversion_at_fringe_extrema() {
        let res = invert_shot(&shot(0, 0.0, 0.9, 0.0), &fit_of(0.5, 0.4), 1e-3);
        assert_eq!(res.phi_ai.unwrap().value(), 0.0);
        assert_eq!(res.delta_phi.unwrap().value(), 0.0);
        let res = invert_shot(&shot(0, 0.0, 0.1, 3.0), &fit_of(0.5, 0.4), 1e-3);
        assert!((res.phi_ai.unwrap().value() + PI).abs() < 1e-12);
        let expect = wrap(-PI - 3.0);
        assert!((res.delta_phi.unwrap().value() - expect).abs() < 1e-12);
    }

    #[test]
    fn degenerate_amplitude_is_missing() {
        let res = invert_shot(&shot(3, 0.0, 0.5, 0.0), &fit_of(0.5, 1e-4), 1e-3);
        assert_eq!(res.status, PhaseStatus::MissingDegenerateAmplitude);
        assert!(res.phi_ai.is_none() && res.delta_phi.is_none());
    }

    #[test]
    fn stream_edge_cases() {
        let short = fringe(0.5, 0.2, 0.1, &[0.0, 1.0, 2.0]);
        let res = reconstruct_stream(&short, &FringeConfig::default()).unwrap();
        assert!(res.iter().all(|r| r.status == PhaseStatus::MissingInsufficientWindow));
        let thetas: Vec<f64> = (0..40).map(|i| i as f64 * 0.9).collect();
        let flat = fringe(0.5, 0.0, 0.1, &thetas);
        let res = reconstruct_stream(&flat, &FringeConfig::default()).unwrap();
        assert!(res.iter().all(|r| r.status == PhaseStatus::MissingDegenerateAmplitude));
        assert!(reconstruct_stream::<f64>(&[], &FringeConfig::default()).is_err());
    }

    #[test]
    fn noiseless_stream_recovers_constant_phase() {
        let thetas: Vec<f64> = (0..60).map(|i| i as f64 * 0.9).collect();
        let phi = 1.1;
        let offset = 0.4;
        let mut shots = fringe(0.45, 0.15, phi, &thetas);
        for s in &mut shots {
            s.phi_rt = phi - offset;
        }
        let res = reconstruct_stream(&shots, &FringeConfig::default()).unwrap();
        let mut mirrored = 0;
        for (r, s) in res.iter().zip(&shots) {
            // the mirror branch −2θ − φ sits at offset − 2(θ + φ) from the prior
            let mirror = wrap(offset - 2.0 * (s.theta + phi));
            let got = r.phi_ai.unwrap().value();
            if mirror.abs() < offset - 1e-6 {
                mirrored += 1;
                assert!((got - wrap(-2.0 * s.theta - phi)).abs() < 1e-8);
            } else if mirror.abs() > offset + 1e-6 {
                assert!((got - phi).abs() < 1e-8);
                assert!((r.delta_phi.unwrap().value() - offset).abs() < 1e-8);
            }
        }
        assert!(mirrored < res.len() / 2);
    }

    #[test]
    fn csv_round_trip() {
        let thetas: Vec<f64> = (0..12).map(|i| i as f64 * 0.9).collect();
        let shots = fringe(0.45, 0.15, 0.2, &thetas);
        let mut buf = Vec::new();
        write_shots(&mut buf, &shots).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("iter,theta,rho,phi_rt,a,c,r\n"));
        let back: Vec<ShotRecord<f64>> = read_shots(buf.as_slice()).unwrap();
        assert_eq!(back, shots);

        let phases = reconstruct_stream(&shots, &FringeConfig { window_half_width: 3, min_points: 6, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_phases(&mut buf, &phases).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,phi_ai,delta_phi,status\n"));
        assert!(text.contains(",,missing_insufficient_window"));
        let back: Vec<PhaseResult<f64>> = read_phases(buf.as_slice()).unwrap();
        assert_eq!(back, phases);
    }

    #[test]
    fn rejects_bad_header() {
        let text = "iter,theta,rho\n0,0.0,0.5\n";
        assert!(read_shots::<f64, _>(text.as_bytes()).is_err());
    }
}
