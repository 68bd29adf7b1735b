//! Open-boundary matrix product states for pure targets, with exact outcome
//! probabilities and exact sequential sampling under a local POVM.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::complex::{ComplexMatrix, ONE, ZERO};
use crate::povm::LocalPovm;

/// One site tensor `A[l][s][r]` with physical dimension 2.
#[derive(Clone, Debug)]
pub struct SiteTensor {
    left: usize,
    right: usize,
    data: Vec<Complex64>,
}

impl SiteTensor {
    pub fn zeros(left: usize, right: usize) -> Self {
        Self {
            left,
            right,
            data: vec![ZERO; left * 2 * right],
        }
    }

    #[inline]
    pub fn get(&self, l: usize, s: usize, r: usize) -> Complex64 {
        self.data[(l * 2 + s) * self.right + r]
    }

    pub fn set(&mut self, l: usize, s: usize, r: usize, v: Complex64) {
        self.data[(l * 2 + s) * self.right + r] = v;
    }
}

#[derive(Clone, Debug)]
pub struct Mps {
    sites: Vec<SiteTensor>,
}

/// Bra/ket environment, `χ_bra × χ_ket`.
type Env = Vec<Complex64>;

impl Mps {
    pub fn new(sites: Vec<SiteTensor>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Validation("MPS needs at least one site".into()));
        }
        if sites[0].left != 1 || sites[sites.len() - 1].right != 1 {
            return Err(Error::Validation(
                "boundary bonds must have dimension 1".into(),
            ));
        }
        for (i, w) in sites.windows(2).enumerate() {
            if w[0].right != w[1].left {
                return Err(Error::Validation(format!(
                    "bond mismatch between sites {i} and {}",
                    i + 1
                )));
            }
        }
        Ok(Self { sites })
    }

    /// Product state with one normalized single-qubit amplitude pair per site.
    pub fn product(kets: &[[Complex64; 2]]) -> Result<Self> {
        let sites = kets
            .iter()
            .map(|k| {
                let mut t = SiteTensor::zeros(1, 1);
                t.set(0, 0, 0, k[0]);
                t.set(0, 1, 0, k[1]);
                t
            })
            .collect();
        Self::new(sites)
    }

    pub fn n_qubits(&self) -> usize {
        self.sites.len()
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites[..self.sites.len() - 1]
            .iter()
            .map(|s| s.right)
            .collect()
    }

    pub fn amplitude(&self, bits: &[usize]) -> Complex64 {
        assert_eq!(bits.len(), self.n_qubits());
        let mut vec = vec![ONE];
        for (site, &s) in self.sites.iter().zip(bits) {
            let mut next = vec![ZERO; site.right];
            for (l, v) in vec.iter().enumerate() {
                for (r, nx) in next.iter_mut().enumerate() {
                    *nx += v * site.get(l, s, r);
                }
            }
            vec = next;
        }
        vec[0]
    }

    /// Full state vector, qubit 0 most significant. Only sensible for small `n`.
    pub fn to_dense_vector(&self) -> Result<Vec<Complex64>> {
        let n = self.n_qubits();
        if n > 20 {
            return Err(Error::SizeGuard {
                what: "qubits",
                got: n,
                limit: 20,
            });
        }
        Ok((0..1usize << n)
            .map(|idx| {
                let bits: Vec<usize> = (0..n).map(|k| (idx >> (n - 1 - k)) & 1).collect();
                self.amplitude(&bits)
            })
            .collect())
    }

    /// `⟨ψ|ψ⟩`.
    pub fn norm_sqr(&self) -> f64 {
        let id = ComplexMatrix::identity(2);
        let mut env: Env = vec![ONE];
        for site in &self.sites {
            env = transfer_left(&env, site, &id);
        }
        env[0].re
    }

    /// `⟨ψ| M^{a_1} ⊗ … ⊗ M^{a_N} |ψ⟩` by left-to-right transfer matrices.
    pub fn outcome_prob(&self, povm: &LocalPovm, outcome: &[usize]) -> Result<f64> {
        if outcome.len() != self.n_qubits() {
            return Err(Error::Shape {
                op: "mps_outcome_prob",
                lhs: vec![outcome.len()],
                rhs: vec![self.n_qubits()],
            });
        }
        let mut env: Env = vec![ONE];
        for (site, &a) in self.sites.iter().zip(outcome) {
            if a >= povm.m() {
                return Err(Error::Validation(format!(
                    "outcome {a} outside [0, {})",
                    povm.m()
                )));
            }
            env = transfer_left(&env, site, povm.effect(a));
        }
        Ok(env[0].re)
    }

    /// Bond-dimension-2 GHZ state `(|0…0⟩ + |1…1⟩)/√2`.
    pub fn ghz(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Validation(format!("GHZ needs n >= 2, got {n}")));
        }
        let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let mut sites = Vec::with_capacity(n);
        let mut first = SiteTensor::zeros(1, 2);
        first.set(0, 0, 0, h);
        first.set(0, 1, 1, h);
        sites.push(first);
        for _ in 1..n - 1 {
            let mut mid = SiteTensor::zeros(2, 2);
            mid.set(0, 0, 0, ONE);
            mid.set(1, 1, 1, ONE);
            sites.push(mid);
        }
        let mut last = SiteTensor::zeros(2, 1);
        last.set(0, 0, 0, ONE);
        last.set(1, 1, 0, ONE);
        sites.push(last);
        Self::new(sites)
    }

    /// Bond-dimension-2 W state; the bond index counts excitations seen so far.
    pub fn w(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Validation(format!("W needs n >= 2, got {n}")));
        }
        let c = Complex64::new(1.0 / (n as f64).sqrt(), 0.0);
        let mut sites = Vec::with_capacity(n);
        let mut first = SiteTensor::zeros(1, 2);
        first.set(0, 0, 0, c);
        first.set(0, 1, 1, c);
        sites.push(first);
        for _ in 1..n - 1 {
            let mut mid = SiteTensor::zeros(2, 2);
            mid.set(0, 0, 0, ONE);
            mid.set(0, 1, 1, ONE);
            mid.set(1, 0, 1, ONE);
            sites.push(mid);
        }
        let mut last = SiteTensor::zeros(2, 1);
        last.set(0, 1, 0, ONE);
        last.set(1, 0, 0, ONE);
        sites.push(last);
        Self::new(sites)
    }
}

/// `L'[b', k'] = Σ L[b, k] conj(A[b, s, b']) M[s, s'] A[k, s', k']`.
fn transfer_left(env: &[Complex64], site: &SiteTensor, effect: &ComplexMatrix) -> Env {
    let (dl, dr) = (site.left, site.right);
    // first contract the ket side: X[b, s, k'] = Σ_{k, s'} L[b, k] M[s, s'] A[k, s', k']
    let mut x = vec![ZERO; dl * 2 * dr];
    for b in 0..dl {
        for k in 0..dl {
            let lv = env[b * dl + k];
            if lv == ZERO {
                continue;
            }
            for s in 0..2 {
                for sp in 0..2 {
                    let w = lv * effect.get(s, sp);
                    if w == ZERO {
                        continue;
                    }
                    for kp in 0..dr {
                        x[(b * 2 + s) * dr + kp] += w * site.get(k, sp, kp);
                    }
                }
            }
        }
    }
    let mut out = vec![ZERO; dr * dr];
    for b in 0..dl {
        for s in 0..2 {
            for bp in 0..dr {
                let a = site.get(b, s, bp).conj();
                if a == ZERO {
                    continue;
                }
                for kp in 0..dr {
                    out[bp * dr + kp] += a * x[(b * 2 + s) * dr + kp];
                }
            }
        }
    }
    out
}

/// `R[b, k] = Σ conj(A[b, s, b']) M[s, s'] A[k, s', k'] R'[b', k']`.
fn transfer_right(env: &[Complex64], site: &SiteTensor, effect: &ComplexMatrix) -> Env {
    let (dl, dr) = (site.left, site.right);
    // Y[k, s, b'] = Σ_{s', k'} M[s, s'] A[k, s', k'] R'[b', k']
    let mut y = vec![ZERO; dl * 2 * dr];
    for k in 0..dl {
        for s in 0..2 {
            for sp in 0..2 {
                let m = effect.get(s, sp);
                if m == ZERO {
                    continue;
                }
                for kp in 0..dr {
                    let a = m * site.get(k, sp, kp);
                    if a == ZERO {
                        continue;
                    }
                    for bp in 0..dr {
                        y[(k * 2 + s) * dr + bp] += a * env[bp * dr + kp];
                    }
                }
            }
        }
    }
    let mut out = vec![ZERO; dl * dl];
    for b in 0..dl {
        for k in 0..dl {
            let mut acc = ZERO;
            for s in 0..2 {
                for bp in 0..dr {
                    acc += site.get(b, s, bp).conj() * y[(k * 2 + s) * dr + bp];
                }
            }
            out[b * dl + k] = acc;
        }
    }
    out
}

fn contract(left: &[Complex64], right: &[Complex64]) -> f64 {
    left.iter()
        .zip(right)
        .map(|(l, r)| l * r)
        .sum::<Complex64>()
        .re
}

/// Exact sequential sampler over POVM outcomes of a normalized MPS.
///
/// Right environments are built once with the identity effect; they stay
/// valid for any complete set of effects, including noise-folded ones.
#[derive(Clone, Debug)]
pub struct MpsSampler {
    mps: Mps,
    povm: LocalPovm,
    right_envs: Vec<Env>,
}

impl MpsSampler {
    pub fn new(mps: Mps, povm: LocalPovm) -> Result<Self> {
        let norm = mps.norm_sqr();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Validation(format!(
                "MPS is not normalized (norm² {norm})"
            )));
        }
        let id = ComplexMatrix::identity(2);
        let n = mps.n_qubits();
        let mut right_envs = vec![Vec::new(); n + 1];
        right_envs[n] = vec![ONE];
        for i in (0..n).rev() {
            right_envs[i] = transfer_right(&right_envs[i + 1], &mps.sites[i], &id);
        }
        Ok(Self {
            mps,
            povm,
            right_envs,
        })
    }

    pub fn mps(&self) -> &Mps {
        &self.mps
    }

    pub fn povm(&self) -> &LocalPovm {
        &self.povm
    }

    pub fn prob(&self, outcome: &[usize]) -> Result<f64> {
        self.mps.outcome_prob(&self.povm, outcome)
    }

    /// Conditional distribution of `a_i` given the environment left of site `i`.
    fn conditional(&self, env: &[Complex64], i: usize) -> Result<(Vec<f64>, Vec<Env>)> {
        let m = self.povm.m();
        let mut weights = Vec::with_capacity(m);
        let mut envs = Vec::with_capacity(m);
        for a in 0..m {
            let next = transfer_left(env, &self.mps.sites[i], self.povm.effect(a));
            weights.push(contract(&next, &self.right_envs[i + 1]));
            envs.push(next);
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::Numerical(format!(
                "prefix probability {total:e} at site {i}"
            )));
        }
        for w in weights.iter_mut() {
            *w /= total;
            if *w < -1e-12 {
                return Err(Error::Numerical(format!(
                    "negative conditional probability {w:e} at site {i}"
                )));
            }
            *w = w.max(0.0);
        }
        Ok((weights, envs))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let n = self.mps.n_qubits();
        let mut env: Env = vec![ONE];
        let mut outcome = Vec::with_capacity(n);
        for i in 0..n {
            let (probs, mut envs) = self.conditional(&env, i)?;
            let a = sample_categorical(&probs, rng);
            outcome.push(a);
            let mut next = std::mem::take(&mut envs[a]);
            // rescale so that ⟨L|R⟩ = 1; keeps long chains away from underflow
            let z = contract(&next, &self.right_envs[i + 1]);
            next.iter_mut().for_each(|x| *x /= z);
            env = next;
        }
        Ok(outcome)
    }

    /// Conditional distributions along a fixed outcome string (diagnostics).
    pub fn conditionals_along(&self, outcome: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut env: Env = vec![ONE];
        let mut out = Vec::with_capacity(outcome.len());
        for (i, &a) in outcome.iter().enumerate() {
            let (probs, mut envs) = self.conditional(&env, i)?;
            out.push(probs);
            let mut next = std::mem::take(&mut envs[a]);
            let z = contract(&next, &self.right_envs[i + 1]);
            next.iter_mut().for_each(|x| *x /= z);
            env = next;
        }
        Ok(out)
    }
}

/// Inverse-CDF draw from a normalized probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::states::{ghz_vector, w_vector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ghz_amplitudes() {
        let mps = Mps::ghz(3).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((mps.amplitude(&[0, 0, 0]).re - h).abs() < 1e-15);
        assert!((mps.amplitude(&[1, 1, 1]).re - h).abs() < 1e-15);
        assert_eq!(mps.amplitude(&[0, 1, 0]), ZERO);
        assert_eq!(mps.bond_dims(), vec![2, 2]);
    }

    #[test]
    fn w_amplitudes() {
        let mps = Mps::w(4).unwrap();
        assert!((mps.amplitude(&[0, 0, 0, 1]).re - 0.5).abs() < 1e-15);
        assert_eq!(mps.amplitude(&[0, 1, 0, 1]), ZERO);
    }

    #[test]
    fn dense_contraction_matches_state_vectors() {
        for n in 2..=10 {
            let g = Mps::ghz(n).unwrap().to_dense_vector().unwrap();
            let w = Mps::w(n).unwrap().to_dense_vector().unwrap();
            for (a, b) in g.iter().zip(ghz_vector(n)) {
                assert!((a - b).norm() < 1e-10);
            }
            for (a, b) in w.iter().zip(w_vector(n)) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn large_chains_stay_normalized() {
        assert!((Mps::ghz(50).unwrap().norm_sqr() - 1.0).abs() < 1e-10);
        assert!((Mps::w(50).unwrap().norm_sqr() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn outcome_probabilities_are_complete() {
        let povm = LocalPovm::tetrahedral();
        let mps = Mps::w(3).unwrap();
        let mut total = 0.0;
        for idx in 0..64 {
            let o = [idx / 16, (idx / 4) % 4, idx % 4];
            total += mps.outcome_prob(&povm, &o).unwrap();
        }
        assert!((total - 1.0).abs() < 1e-10);
        let ghz = Mps::ghz(2).unwrap();
        assert!((ghz.outcome_prob(&povm, &[0, 0]).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn ghz50_matches_closed_form() {
        // P(a) = ½(Π⟨0|M|0⟩ + Π⟨1|M|1⟩ + 2 Re Π⟨0|M|1⟩)
        let povm = LocalPovm::tetrahedral();
        let mps = Mps::ghz(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let outcome: Vec<usize> = if trial == 0 {
                vec![0; 50]
            } else {
                (0..50).map(|_| rng.random_range(0..4)).collect()
            };
            let mut alpha = ONE;
            let mut beta = ONE;
            let mut gamma = ONE;
            for &a in &outcome {
                let e = povm.effect(a);
                alpha *= e.get(0, 0);
                beta *= e.get(1, 1);
                gamma *= e.get(0, 1);
            }
            let closed = 0.5 * (alpha.re + beta.re + 2.0 * gamma.re);
            let got = mps.outcome_prob(&povm, &outcome).unwrap();
            assert!(
                (got - closed).abs() <= 1e-12 * closed.abs().max(1e-300),
                "{got:e} vs {closed:e}"
            );
        }
        let p0 = mps.outcome_prob(&povm, &[0; 50]).unwrap();
        assert!((p0 - 0.5 * 0.5_f64.powi(50)).abs() < 1e-30);
    }

    #[test]
    fn product_state_conditionals_are_history_free() {
        let povm = LocalPovm::tetrahedral();
        let mps = Mps::product(&[[ONE, ZERO]; 5]).unwrap();
        let sampler = MpsSampler::new(mps.clone(), povm.clone()).unwrap();
        let expect = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for outcome in [[0, 1, 2, 3, 0], [3, 3, 1, 0, 2]] {
            for cond in sampler.conditionals_along(&outcome).unwrap() {
                for (x, y) in cond.iter().zip(expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn samples_have_right_shape() {
        let povm = LocalPovm::tetrahedral();
        let mps = Mps::w(50).unwrap();
        let sampler = MpsSampler::new(mps.clone(), povm.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = sampler.sample(&mut rng).unwrap();
            assert_eq!(s.len(), 50);
            assert!(s.iter().all(|&a| a < 4));
        }
    }

    #[test]
    fn ghz2_sampling_frequency() {
        let povm = LocalPovm::tetrahedral();
        let mps = Mps::ghz(2).unwrap();
        let sampler = MpsSampler::new(mps.clone(), povm.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 1_000_000;
        let mut counts = [0usize; 16];
        for _ in 0..draws {
            let s = sampler.sample(&mut rng).unwrap();
            counts[s[0] * 4 + s[1]] += 1;
        }
        let p = 0.125;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = counts[0] as f64 / draws as f64;
        assert!((freq - p).abs() < 4.0 * sigma, "{freq} vs {p}");
        let tv: f64 = (0..16)
            .map(|idx| {
                let exact = mps.outcome_prob(&povm, &[idx / 4, idx % 4]).unwrap();
                (counts[idx] as f64 / draws as f64 - exact).abs()
            })
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.005, "tv {tv}");
    }
}
