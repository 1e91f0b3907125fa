use num_complex::Complex;

use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Tensor};
use crate::scalar::Scalar;

/// Dense `2^n` amplitude vector. Qubit 0 is the most significant bit of the
/// basis index.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector<F> {
    n_qubits: usize,
    amps: Vec<Complex<F>>,
}

impl<F: Scalar> StateVector<F> {
    /// `|0…0⟩`.
    pub fn zero(n_qubits: usize) -> Self {
        let mut amps = vec![Complex::new(F::zero(), F::zero()); 1 << n_qubits];
        amps[0] = Complex::new(F::one(), F::zero());
        Self { n_qubits, amps }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex<F>] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> F {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<F>()
    }

    fn mask(&self, q: usize) -> usize {
        1 << (self.n_qubits - 1 - q)
    }

    /// `RY(θ) = [[cos θ/2, −sin θ/2], [sin θ/2, cos θ/2]]` on qubit `q`.
    pub fn apply_ry(&mut self, q: usize, theta: F) {
        let m = self.mask(q);
        let half = theta * F::lit(0.5);
        let (s, c) = half.sin_cos();
        for i in 0..self.amps.len() {
            if i & m == 0 {
                let a0 = self.amps[i];
                let a1 = self.amps[i | m];
                self.amps[i] = a0.scale(c) - a1.scale(s);
                self.amps[i | m] = a0.scale(s) + a1.scale(c);
            }
        }
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) {
        let cm = self.mask(control);
        let tm = self.mask(target);
        for i in 0..self.amps.len() {
            if i & cm != 0 && i & tm == 0 {
                self.amps.swap(i, i | tm);
            }
        }
    }

    /// CNOT from each qubit to its ring successor, in ascending qubit order.
    pub fn apply_ring(&mut self) {
        for r in 0..self.n_qubits {
            self.apply_cnot(r, (r + 1) % self.n_qubits);
        }
    }

    /// `⟨Z_r⟩` for every qubit.
    pub fn measure_z(&self) -> Result<Vec<F>> {
        let norm = self.norm_sqr();
        if (norm - F::one()).abs() > F::lit(1e-8) {
            return Err(Error::Consistency(format!("state norm {norm} deviates from 1")));
        }
        let mut out = vec![F::zero(); self.n_qubits];
        for (i, a) in self.amps.iter().enumerate() {
            let p = a.norm_sqr();
            for (r, o) in out.iter_mut().enumerate() {
                if i & self.mask(r) == 0 {
                    *o += p;
                } else {
                    *o -= p;
                }
            }
        }
        Ok(out)
    }
}

/// Runs one `[RY layer, ring CNOT]` block per entry of `layers`.
pub fn run_layers<F: Scalar>(layers: &[Vec<F>]) -> Result<StateVector<F>> {
    let n = layers.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(Error::Config(format!("circuit needs at least two qubits, got {n}")));
    }
    if layers.iter().any(|l| l.len() != n) {
        return Err(Error::Shape("every layer needs one angle per qubit".into()));
    }
    let mut psi = StateVector::zero(n);
    for layer in layers {
        for (q, &theta) in layer.iter().enumerate() {
            psi.apply_ry(q, theta);
        }
        psi.apply_ring();
    }
    Ok(psi)
}

/// Re-uploads the same angles in each of `depth` layers.
pub fn run_circuit<F: Scalar>(angles: &[F], depth: usize) -> Result<StateVector<F>> {
    if depth == 0 {
        return Err(Error::Config("circuit depth must be at least 1".into()));
    }
    run_layers(&vec![angles.to_vec(); depth])
}

pub fn expectations<F: Scalar>(angles: &[F], depth: usize) -> Result<Vec<F>> {
    run_circuit(angles, depth)?.measure_z()
}

/// Derivatives `∂⟨Z_r⟩/∂θ_s` (row `r`, column `s`) by the two-term
/// parameter-shift rule, summed over every layer in which `θ_s` appears.
pub fn expectation_jacobian<F: Scalar>(angles: &[F], depth: usize) -> Result<Vec<Vec<F>>> {
    let n = angles.len();
    let shift = F::FRAC_PI_2();
    let mut jac = vec![vec![F::zero(); n]; n];
    let base = vec![angles.to_vec(); depth];
    for s in 0..n {
        for l in 0..depth {
            let mut plus = base.clone();
            plus[l][s] += shift;
            let mut minus = base.clone();
            minus[l][s] -= shift;
            let ep = run_layers(&plus)?.measure_z()?;
            let em = run_layers(&minus)?.measure_z()?;
            for r in 0..n {
                jac[r][s] += (ep[r] - em[r]) * F::lit(0.5);
            }
        }
    }
    Ok(jac)
}

/// Graph node mapping a `T × n_q` angle matrix to its `T × n_q` expectations.
pub struct ExpectationOp {
    pub depth: usize,
}

impl<F: Scalar> CustomOp<F> for ExpectationOp {
    fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let (t, n) = input.dims();
        let mut out = Vec::with_capacity(t * n);
        for i in 0..t {
            out.extend(expectations(input.row(i), self.depth)?);
        }
        Ok(Tensor::matrix(t, n, out))
    }

    fn backward(&self, input: &Tensor<F>, _output: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
        let (t, n) = input.dims();
        let mut grad = Vec::with_capacity(t * n);
        for i in 0..t {
            let jac = expectation_jacobian(input.row(i), self.depth).expect("validated in forward");
            let go = grad_out.row(i);
            grad.extend((0..n).map(|s| (0..n).map(|r| go[r] * jac[r][s]).sum::<F>()));
        }
        Tensor::matrix(t, n, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

    fn real(psi: &StateVector<f64>) -> Vec<f64> {
        psi.amplitudes().iter().map(|a| a.re).collect()
    }

    #[test]
    fn zero_angles_stay_in_ground_state() {
        for depth in 1..4 {
            let psi = run_circuit(&[0.0; 3], depth).unwrap();
            assert_eq!(real(&psi)[0], 1.0);
            assert_eq!(psi.measure_z().unwrap(), vec![1.0; 3]);
        }
    }

    #[test]
    fn two_qubit_examples() {
        let psi = run_circuit(&[PI, 0.0], 1).unwrap();
        let a = real(&psi);
        assert!(a[0].abs() < 1e-15 && (a[1] - 1.0).abs() < 1e-15 && a[2].abs() < 1e-15 && a[3].abs() < 1e-15);

        let psi = run_circuit(&[FRAC_PI_2, 0.0], 1).unwrap();
        let a = real(&psi);
        assert!((a[0] - FRAC_1_SQRT_2).abs() < 1e-15 && (a[1] - FRAC_1_SQRT_2).abs() < 1e-15);
        let m = psi.measure_z().unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15 && m[1].abs() < 1e-15);
        assert!(run_circuit(&[0.3], 1).is_err());
        assert!(run_circuit(&[0.3, 0.1], 0).is_err());
    }

    #[test]
    fn uniform_superposition_measures_zero() {
        let mut psi = StateVector::<f64>::zero(3);
        for q in 0..3 {
            psi.apply_ry(q, FRAC_PI_2);
        }
        assert!(psi.measure_z().unwrap().iter().all(|m| m.abs() < 1e-15));
    }

    #[test]
    fn unnormalized_state_is_rejected() {
        let mut psi = StateVector::<f64>::zero(2);
        psi.amps[1] = Complex::new(0.5, 0.0);
        assert!(matches!(psi.measure_z(), Err(Error::Consistency(_))));
    }

    #[test]
    fn parameter_shift_matches_differences() {
        let angles = [0.3f64, -1.1, 2.2];
        let jac = expectation_jacobian(&angles, 2).unwrap();
        let h = 1e-6;
        for s in 0..3 {
            let mut p = angles;
            p[s] += h;
            let mut m = angles;
            m[s] -= h;
            let ep = expectations(&p, 2).unwrap();
            let em = expectations(&m, 2).unwrap();
            for r in 0..3 {
                let fd = (ep[r] - em[r]) / (2.0 * h);
                assert!((fd - jac[r][s]).abs() < 1e-8, "r{r} s{s}: {fd} vs {}", jac[r][s]);
            }
        }
    }
}
