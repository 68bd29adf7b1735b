//! Single-qubit informationally complete POVMs and the conversion between
//! outcome distributions and density matrices.
//!
//! Outcome strings `a = (a_1, …, a_N)` are indexed in base-`m` with `a_1` the
//! most significant digit; density matrices use the matching convention with
//! qubit 1 as the most significant bit.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::complex::{invert_real, ComplexMatrix, ZERO};
use crate::quantum::NoiseChannel;

/// Largest register for which a joint effect is materialized.
pub const MAX_JOINT_EFFECT_QUBITS: usize = 12;
/// Largest register for dense probability tables and reconstructions.
pub const MAX_DENSE_QUBITS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PovmKind {
    /// Symmetric informationally complete frame with Bloch vectors on a
    /// regular tetrahedron.
    Tetra,
    /// Three scaled projectors onto |0⟩, |+⟩, |+i⟩ and the remainder.
    Pauli4,
}

impl PovmKind {
    pub fn build(self) -> LocalPovm {
        match self {
            PovmKind::Tetra => LocalPovm::tetrahedral(),
            PovmKind::Pauli4 => LocalPovm::pauli4(),
        }
    }
}

impl std::str::FromStr for PovmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tetra" => Ok(PovmKind::Tetra),
            "pauli4" => Ok(PovmKind::Pauli4),
            other => Err(Error::Validation(format!("unknown povm '{other}'"))),
        }
    }
}

impl std::fmt::Display for PovmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PovmKind::Tetra => "tetra",
            PovmKind::Pauli4 => "pauli4",
        })
    }
}

/// A local measurement with `m` effects on one qubit.
#[derive(Clone, Debug)]
pub struct LocalPovm {
    effects: Vec<ComplexMatrix>,
    /// `T[a][a'] = Re tr(M^a M^a')`, row-major `m×m`.
    t_local: Vec<f64>,
    t_local_inv: Vec<f64>,
}

impl LocalPovm {
    /// Validates the effects and precomputes the overlap matrix and its inverse.
    pub fn from_effects(effects: Vec<ComplexMatrix>) -> Result<Self> {
        if effects.is_empty() {
            return Err(Error::Validation("POVM needs at least one effect".into()));
        }
        let mut total = ComplexMatrix::zeros(2, 2);
        for (a, e) in effects.iter().enumerate() {
            if e.rows() != 2 || e.cols() != 2 {
                return Err(Error::Validation(format!("effect {a} is not 2x2")));
            }
            if !e.is_hermitian(1e-12) {
                return Err(Error::Validation(format!("effect {a} is not Hermitian")));
            }
            let eig = e.hermitian_eig()?;
            if eig.values[0] < -1e-12 {
                return Err(Error::Validation(format!(
                    "effect {a} is not positive semidefinite (eigenvalue {:.3e})",
                    eig.values[0]
                )));
            }
            total = total.add(e);
        }
        if total.frobenius_distance(&ComplexMatrix::identity(2)) > 1e-12 {
            return Err(Error::Validation(
                "effects do not sum to the identity".into(),
            ));
        }
        let m = effects.len();
        let mut t_local = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                t_local[a * m + b] = effects[a].trace_product(&effects[b]).re;
            }
        }
        let t_local_inv = pseudo_inverse_symmetric(m, &t_local)?;
        Ok(Self {
            effects,
            t_local,
            t_local_inv,
        })
    }

    /// Effects `¼(I + s·σ)` for the four tetrahedron vertices `s`, with `s_0 = ẑ`.
    pub fn tetrahedral() -> Self {
        let r = 2.0_f64.sqrt();
        let vertices = [
            [0.0, 0.0, 1.0],
            [2.0 * r / 3.0, 0.0, -1.0 / 3.0],
            [-r / 3.0, (2.0_f64 / 3.0).sqrt(), -1.0 / 3.0],
            [-r / 3.0, -(2.0_f64 / 3.0).sqrt(), -1.0 / 3.0],
        ];
        let effects = vertices
            .iter()
            .map(|s| bloch_operator(0.25, 0.25, s))
            .collect();
        Self::from_effects(effects).expect("tetrahedral frame is a valid IC-POVM")
    }

    /// `⅓|0⟩⟨0|`, `⅓|+⟩⟨+|`, `⅓|+i⟩⟨+i|` and the complement.
    pub fn pauli4() -> Self {
        let third = 1.0 / 3.0;
        let m0 = bloch_operator(third / 2.0, third / 2.0, &[0.0, 0.0, 1.0]);
        let m1 = bloch_operator(third / 2.0, third / 2.0, &[1.0, 0.0, 0.0]);
        let m2 = bloch_operator(third / 2.0, third / 2.0, &[0.0, 1.0, 0.0]);
        let m3 = ComplexMatrix::identity(2).sub(&m0).sub(&m1).sub(&m2);
        Self::from_effects(vec![m0, m1, m2, m3]).expect("Pauli-4 frame is a valid IC-POVM")
    }

    pub fn m(&self) -> usize {
        self.effects.len()
    }

    pub fn effects(&self) -> &[ComplexMatrix] {
        &self.effects
    }

    pub fn effect(&self, a: usize) -> &ComplexMatrix {
        &self.effects[a]
    }

    pub fn t_local(&self) -> &[f64] {
        &self.t_local
    }

    /// Moore–Penrose inverse of [`Self::t_local`]; the true inverse for an
    /// informationally complete frame.
    pub fn t_local_inv(&self) -> &[f64] {
        &self.t_local_inv
    }

    pub fn is_informationally_complete(&self) -> bool {
        let m = self.m();
        (0..m).all(|i| {
            (0..m).all(|j| {
                let s: f64 = (0..m)
                    .map(|k| self.t_local[i * m + k] * self.t_local_inv[k * m + j])
                    .sum();
                (s - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8
            })
        })
    }

    /// `M^{a_1} ⊗ … ⊗ M^{a_N}`.
    pub fn joint_effect(&self, outcome: &[usize]) -> Result<ComplexMatrix> {
        if outcome.len() > MAX_JOINT_EFFECT_QUBITS {
            return Err(Error::SizeGuard {
                what: "qubits",
                got: outcome.len(),
                limit: MAX_JOINT_EFFECT_QUBITS,
            });
        }
        self.check_outcome(outcome)?;
        let mut acc = ComplexMatrix::identity(1);
        for &a in outcome {
            acc = acc.kron(&self.effects[a]);
        }
        Ok(acc)
    }

    fn check_outcome(&self, outcome: &[usize]) -> Result<()> {
        match outcome.iter().find(|&&a| a >= self.m()) {
            Some(&a) => Err(Error::Validation(format!(
                "outcome {a} outside [0, {})",
                self.m()
            ))),
            None => Ok(()),
        }
    }

    /// `P(a) = tr(ρ M^a)` for every outcome string, base-`m` ordered.
    pub fn probs_from_density(&self, rho: &ComplexMatrix) -> Result<Vec<f64>> {
        let n = qubits_of(rho)?;
        if n > MAX_DENSE_QUBITS {
            return Err(Error::SizeGuard {
                what: "qubits",
                got: n,
                limit: MAX_DENSE_QUBITS,
            });
        }
        validate_density(rho, 1e-10)?;
        Ok(self.probs_from_operator(rho, n))
    }

    /// Contracts one site at a time; no joint effect is ever formed.
    pub(crate) fn probs_from_operator(&self, rho: &ComplexMatrix, n: usize) -> Vec<f64> {
        let m = self.m();
        let mut buf: Vec<Complex64> = rho.data().to_vec();
        let mut prefixes = 1usize;
        let mut dim = 1usize << n;
        for _ in 0..n {
            let half = dim / 2;
            let mut next = vec![ZERO; prefixes * m * half * half];
            for p in 0..prefixes {
                let block = &buf[p * dim * dim..(p + 1) * dim * dim];
                for (a, eff) in self.effects.iter().enumerate() {
                    let out = &mut next[(p * m + a) * half * half..(p * m + a + 1) * half * half];
                    for i in 0..2 {
                        for j in 0..2 {
                            // tr over this site: Σ_ij X[(i,r),(j,c)] M_ji
                            let w = eff.get(j, i);
                            if w == ZERO {
                                continue;
                            }
                            for r in 0..half {
                                let src = &block[(i * half + r) * dim + j * half
                                    ..(i * half + r) * dim + j * half + half];
                                let dst = &mut out[r * half..(r + 1) * half];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += w * s;
                                }
                            }
                        }
                    }
                }
            }
            buf = next;
            prefixes *= m;
            dim = half;
        }
        buf.into_iter().map(|z| z.re).collect()
    }

    /// Inverts measurement statistics: `ρ = Σ_a q_a M^a` with `q = T⁻¹ P`, the
    /// inverse applied one site at a time.
    pub fn density_from_probs(&self, probs: &[f64], n_qubits: usize) -> Result<Reconstruction> {
        if n_qubits > MAX_DENSE_QUBITS {
            return Err(Error::SizeGuard {
                what: "qubits",
                got: n_qubits,
                limit: MAX_DENSE_QUBITS,
            });
        }
        let m = self.m();
        let expected = m.pow(n_qubits as u32);
        if probs.len() != expected {
            return Err(Error::Shape {
                op: "density_from_probs",
                lhs: vec![probs.len()],
                rhs: vec![expected],
            });
        }
        let total: f64 = probs.iter().sum();
        let warning =
            ((total - 1.0).abs() > 1e-6).then(|| format!("probabilities sum to {total:.9}, not 1"));

        let q = apply_per_site(probs, m, n_qubits, &self.t_local_inv);

        // Build ρ from the last site inwards: layout [prefix] × [dim × dim].
        let mut buf: Vec<Complex64> = q.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut prefixes = expected;
        let mut dim = 1usize;
        for _ in 0..n_qubits {
            let parents = prefixes / m;
            let big = dim * 2;
            let mut next = vec![ZERO; parents * big * big];
            for p in 0..parents {
                let out = &mut next[p * big * big..(p + 1) * big * big];
                for (a, eff) in self.effects.iter().enumerate() {
                    let src = &buf[(p * m + a) * dim * dim..(p * m + a + 1) * dim * dim];
                    for i in 0..2 {
                        for j in 0..2 {
                            let w = eff.get(i, j);
                            if w == ZERO {
                                continue;
                            }
                            for r in 0..dim {
                                let s = &src[r * dim..(r + 1) * dim];
                                let d = &mut out[(i * dim + r) * big + j * dim
                                    ..(i * dim + r) * big + j * dim + dim];
                                for (dv, sv) in d.iter_mut().zip(s) {
                                    *dv += w * sv;
                                }
                            }
                        }
                    }
                }
            }
            buf = next;
            prefixes = parents;
            dim = big;
        }
        let rho = ComplexMatrix::from_vec(dim, dim, buf)?;
        Ok(Reconstruction { rho, warning })
    }

    /// Folds a local channel into the effects through its adjoint, so that
    /// `tr(ℰ(ρ) M) = tr(ρ ℰ†(M))`.
    pub fn adjoint_channel_effects(&self, channel: &NoiseChannel) -> Result<Self> {
        channel.validate()?;
        let effects = self
            .effects
            .iter()
            .map(|e| channel.apply_adjoint_single(e))
            .collect::<Result<Vec<_>>>()?;
        Self::from_effects(effects)
    }
}

/// Output of [`LocalPovm::density_from_probs`].
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub rho: ComplexMatrix,
    /// Set when the input distribution was not normalized.
    pub warning: Option<String>,
}

/// `c·I + k·(s·σ)`.
fn bloch_operator(c: f64, k: f64, s: &[f64; 3]) -> ComplexMatrix {
    let z = |re: f64, im: f64| Complex64::new(re, im);
    ComplexMatrix::from_vec(
        2,
        2,
        vec![
            z(c + k * s[2], 0.0),
            z(k * s[0], -k * s[1]),
            z(k * s[0], k * s[1]),
            z(c - k * s[2], 0.0),
        ],
    )
    .expect("2x2")
}

/// Pseudo-inverse of a real symmetric PSD matrix; eigenvalues below
/// `1e-12·λ_max` are treated as zero.
fn pseudo_inverse_symmetric(m: usize, t: &[f64]) -> Result<Vec<f64>> {
    if let Ok(inv) = invert_real(m, t) {
        return Ok(inv);
    }
    let eig = ComplexMatrix::from_real(m, m, t)?.hermitian_eig()?;
    let cutoff = 1e-12 * eig.values.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let pinv = eig.map_values(|x| if x.abs() > cutoff { 1.0 / x } else { 0.0 });
    Ok(pinv.data().iter().map(|z| z.re).collect())
}

/// Applies the same `m×m` matrix along every one of the `n` base-`m` axes.
pub(crate) fn apply_per_site(v: &[f64], m: usize, n: usize, mat: &[f64]) -> Vec<f64> {
    let mut cur = v.to_vec();
    let mut tmp = vec![0.0; cur.len()];
    for site in 0..n {
        let inner = m.pow((n - 1 - site) as u32);
        let outer = cur.len() / (inner * m);
        tmp.fill(0.0);
        for o in 0..outer {
            for a in 0..m {
                for b in 0..m {
                    let w = mat[a * m + b];
                    if w == 0.0 {
                        continue;
                    }
                    let src = (o * m + b) * inner;
                    let dst = (o * m + a) * inner;
                    for t in 0..inner {
                        tmp[dst + t] += w * cur[src + t];
                    }
                }
            }
        }
        std::mem::swap(&mut cur, &mut tmp);
    }
    cur
}

pub(crate) fn qubits_of(rho: &ComplexMatrix) -> Result<usize> {
    let dim = rho.rows();
    if !rho.is_square() || dim == 0 || !dim.is_power_of_two() {
        return Err(Error::Validation(format!(
            "density matrix must be square with power-of-two size, got {}x{}",
            rho.rows(),
            rho.cols()
        )));
    }
    Ok(dim.trailing_zeros() as usize)
}

/// Checks Hermiticity, unit trace and positivity, each within `tol`.
pub fn validate_density(rho: &ComplexMatrix, tol: f64) -> Result<()> {
    qubits_of(rho)?;
    let herr = rho.hermiticity_error();
    if herr > tol {
        return Err(Error::Validation(format!(
            "density matrix is not Hermitian (deviation {herr:.3e})"
        )));
    }
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > tol || tr.im.abs() > tol {
        return Err(Error::Validation(format!(
            "density matrix trace is {tr:.12}, not 1"
        )));
    }
    if !rho.is_psd(tol) {
        return Err(Error::Validation(
            "density matrix is not positive semidefinite".into(),
        ));
    }
    Ok(())
}
