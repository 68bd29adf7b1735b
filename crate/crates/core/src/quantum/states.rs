use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::channel::NoiseChannel;
use crate::error::{Error, Result};
use crate::linalg::complex::{ComplexMatrix, ZERO};
use crate::povm::validate_density;

pub const MAX_DENSE_STATE_QUBITS: usize = 12;

/// Validated density matrix on `n_qubits` qubits.
#[derive(Clone, Debug)]
pub struct DenseState {
    n_qubits: usize,
    rho: ComplexMatrix,
}

impl DenseState {
    pub fn new(rho: ComplexMatrix) -> Result<Self> {
        validate_density(&rho, 1e-10)?;
        let n_qubits = rho.rows().trailing_zeros() as usize;
        Ok(Self { n_qubits, rho })
    }

    pub fn from_pure(psi: &[Complex64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!(
                "state vector norm² is {norm}, not 1"
            )));
        }
        if !psi.len().is_power_of_two() || psi.len() < 2 {
            return Err(Error::Validation(format!(
                "state vector length {} is not a power of two",
                psi.len()
            )));
        }
        // outer products are Hermitian PSD by construction
        Ok(Self {
            n_qubits: psi.len().trailing_zeros() as usize,
            rho: ComplexMatrix::outer(psi),
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn rho(&self) -> &ComplexMatrix {
        &self.rho
    }

    pub fn purity(&self) -> f64 {
        self.rho.trace_product(&self.rho).re
    }
}

fn check_range(n: usize) -> Result<()> {
    if !(2..=MAX_DENSE_STATE_QUBITS).contains(&n) {
        return Err(Error::Validation(format!(
            "dense states need 2 <= n <= {MAX_DENSE_STATE_QUBITS}, got {n}"
        )));
    }
    Ok(())
}

pub fn ghz_vector(n: usize) -> Vec<Complex64> {
    let dim = 1usize << n;
    let mut psi = vec![ZERO; dim];
    let a = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    psi[0] = a;
    psi[dim - 1] = a;
    psi
}

pub fn w_vector(n: usize) -> Vec<Complex64> {
    let dim = 1usize << n;
    let mut psi = vec![ZERO; dim];
    let a = Complex64::new(1.0 / (n as f64).sqrt(), 0.0);
    for k in 0..n {
        psi[1 << k] = a;
    }
    psi
}

pub fn ghz_dense(n: usize) -> Result<DenseState> {
    check_range(n)?;
    DenseState::from_pure(&ghz_vector(n))
}

pub fn w_dense(n: usize) -> Result<DenseState> {
    check_range(n)?;
    DenseState::from_pure(&w_vector(n))
}

/// Applies the channel independently to every qubit.
pub fn apply_channel_dense(state: &DenseState, channel: &NoiseChannel) -> Result<DenseState> {
    channel.validate()?;
    let n = state.n_qubits;
    let mut rho = state.rho.clone();
    for k in 0..n {
        rho = channel.apply_to_qubit(&rho, n, k)?;
    }
    Ok(DenseState { n_qubits: n, rho })
}

/// `H |x⟩` for the open transverse-field Ising chain
/// `H = Σ Z_i Z_{i+1} + h Σ X_i`; qubit 0 is the most significant bit.
fn tfic_apply(n: usize, field: f64, x: &[f64], out: &mut [f64]) {
    let dim = 1usize << n;
    for (basis, o) in out.iter_mut().enumerate().take(dim) {
        let mut diag = 0.0;
        for i in 0..n - 1 {
            let a = (basis >> (n - 1 - i)) & 1;
            let b = (basis >> (n - 2 - i)) & 1;
            diag += if a == b { 1.0 } else { -1.0 };
        }
        let mut acc = diag * x[basis];
        for i in 0..n {
            acc += field * x[basis ^ (1 << (n - 1 - i))];
        }
        *o = acc;
    }
}

/// Ground energy and real ground-state vector of the transverse-field Ising
/// chain with open boundaries.
pub fn tfic_ground(n: usize, field: f64) -> Result<(f64, Vec<f64>)> {
    if n < 2 {
        return Err(Error::Validation(format!("TFIC needs n >= 2, got {n}")));
    }
    if n > MAX_DENSE_STATE_QUBITS {
        return Err(Error::Unsupported(format!(
            "TFIC ground states beyond {MAX_DENSE_STATE_QUBITS} sites need DMRG, which is not provided"
        )));
    }
    let dim = 1usize << n;
    let (energy, mut psi) = if dim <= 256 {
        dense_ground(n, field, dim)?
    } else {
        lanczos_ground(n, field, dim)?
    };
    // fix the global sign: largest-magnitude amplitude positive
    let pivot = psi
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if psi[pivot] < 0.0 {
        psi.iter_mut().for_each(|x| *x = -*x);
    }
    Ok((energy, psi))
}

fn dense_ground(n: usize, field: f64, dim: usize) -> Result<(f64, Vec<f64>)> {
    let mut h = vec![0.0; dim * dim];
    let mut e = vec![0.0; dim];
    let mut col = vec![0.0; dim];
    for j in 0..dim {
        e.fill(0.0);
        e[j] = 1.0;
        tfic_apply(n, field, &e, &mut col);
        for i in 0..dim {
            h[i * dim + j] = col[i];
        }
    }
    let eig = ComplexMatrix::from_real(dim, dim, &h)?.hermitian_eig()?;
    let psi = eig.vector(0).iter().map(|z| z.re).collect();
    Ok((eig.values[0], psi))
}

/// Lanczos with full reorthogonalization from a fixed pseudo-random start.
fn lanczos_ground(n: usize, field: f64, dim: usize) -> Result<(f64, Vec<f64>)> {
    let max_iter = 400.min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(0x7f1c);
    let mut q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut q);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; dim];
    let mut last = (0.0, Vec::new());
    for it in 0..max_iter {
        tfic_apply(n, field, &basis[it], &mut w);
        let alpha = dot(&w, &basis[it]);
        alphas.push(alpha);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let beta = dot(&w, &w).sqrt();
        let k = alphas.len();
        if k % 8 == 0 || beta < 1e-12 || k == max_iter {
            let (theta, y) = tridiagonal_lowest(&alphas, &betas)?;
            let residual = beta * y[k - 1].abs();
            last = (theta, y);
            if residual < 1e-12 {
                break;
            }
        }
        if beta < 1e-12 {
            break;
        }
        betas.push(beta);
        let next: Vec<f64> = w.iter().map(|x| x / beta).collect();
        basis.push(next);
    }
    let (theta, y) = last;
    let mut psi = vec![0.0; dim];
    for (coef, b) in y.iter().zip(&basis) {
        psi.iter_mut().zip(b).for_each(|(p, x)| *p += coef * x);
    }
    normalize(&mut psi);
    Ok((theta, psi))
}

fn tridiagonal_lowest(alphas: &[f64], betas: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = alphas.len();
    let mut t = vec![0.0; k * k];
    for i in 0..k {
        t[i * k + i] = alphas[i];
        if i + 1 < k {
            t[i * k + i + 1] = betas[i];
            t[(i + 1) * k + i] = betas[i];
        }
    }
    let eig = ComplexMatrix::from_real(k, k, &t)?.hermitian_eig()?;
    Ok((eig.values[0], eig.vector(0).iter().map(|z| z.re).collect()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let nrm = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= nrm);
}

/// `⟨ψ|H|ψ⟩` for a real vector.
pub fn tfic_energy(n: usize, field: f64, psi: &[f64]) -> f64 {
    let mut out = vec![0.0; psi.len()];
    tfic_apply(n, field, psi, &mut out);
    dot(psi, &out) / dot(psi, psi)
}

/// Density matrix of the TFIC ground state.
pub fn tfic_ground_state(n: usize, field: f64) -> Result<DenseState> {
    let (_, psi) = tfic_ground(n, field)?;
    let psi: Vec<Complex64> = psi.into_iter().map(|x| Complex64::new(x, 0.0)).collect();
    DenseState::from_pure(&psi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ghz_and_w_entries() {
        let g = ghz_dense(2).unwrap();
        assert!((g.rho().get(0, 0).re - 0.5).abs() < 1e-15);
        let w = w_dense(2).unwrap();
        assert!((w.rho().get(1, 2).re - 0.5).abs() < 1e-15);
        assert!((g.purity() - 1.0).abs() < 1e-12);
        assert!((w.purity() - 1.0).abs() < 1e-12);
        assert!(ghz_dense(1).is_err());
        assert!(w_dense(13).is_err());
    }

    #[test]
    fn two_site_tfic_energy() {
        let (e, psi) = tfic_ground(2, 1.0).unwrap();
        assert!((e + 5.0_f64.sqrt()).abs() < 1e-12);
        assert!((tfic_energy(2, 1.0, &psi) - e).abs() < 1e-10);
    }

    #[test]
    fn tfic_energy_per_site_decreases() {
        let mut prev = f64::INFINITY;
        for n in 2..=8 {
            let (e, psi) = tfic_ground(n, 1.0).unwrap();
            assert!((tfic_energy(n, 1.0, &psi) - e).abs() < 1e-10);
            let per_site = e / n as f64;
            assert!(per_site < prev, "n={n}: {per_site} vs {prev}");
            prev = per_site;
        }
    }

    #[test]
    fn lanczos_agrees_with_dense_solver() {
        // 9 sites is the first size routed through Lanczos
        let (e9, psi9) = tfic_ground(9, 1.0).unwrap();
        assert!((tfic_energy(9, 1.0, &psi9) - e9).abs() < 1e-10);
        let (e_dense, _) = dense_ground(8, 1.0, 256).unwrap();
        let (e_lanczos, _) = lanczos_ground(8, 1.0, 256).unwrap();
        assert!((e_dense - e_lanczos).abs() < 1e-10);
        assert!(matches!(tfic_ground(13, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn channels_preserve_trace_and_hermiticity() {
        let ghz = ghz_dense(3).unwrap();
        for step in 0..=10 {
            let p = step as f64 / 10.0;
            for ch in [NoiseChannel::depolarize(p), NoiseChannel::bitflip(p)] {
                let out = apply_channel_dense(&ghz, &ch).unwrap();
                assert!((out.rho().trace().re - 1.0).abs() < 1e-12);
                assert!(out.rho().is_hermitian(1e-12));
            }
        }
        let same = apply_channel_dense(&ghz, &NoiseChannel::depolarize(0.0)).unwrap();
        assert!(same.rho().frobenius_distance(ghz.rho()) < 1e-15);
    }
}
