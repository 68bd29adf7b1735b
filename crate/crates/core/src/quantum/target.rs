//! Exact outcome distributions of target states, with noise folded into the
//! POVM effects. Small systems use a dense probability table, GHZ and W
//! beyond that use their bond-dimension-2 MPS.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::channel::NoiseChannel;
use super::mps::{sample_categorical, Mps, MpsSampler};
use super::states::{ghz_dense, tfic_ground_state, w_dense, DenseState};
use crate::error::{Error, Result};
use crate::povm::{LocalPovm, MAX_DENSE_QUBITS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "family")]
pub enum StateFamily {
    Ghz,
    W,
    Tfic { field: f64 },
}

impl std::fmt::Display for StateFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Ghz => write!(f, "ghz"),
            Self::W => write!(f, "w"),
            Self::Tfic { field } if *field == 1.0 => write!(f, "tfic"),
            Self::Tfic { field } => write!(f, "tfic:{field}"),
        }
    }
}

impl std::str::FromStr for StateFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ghz" => Ok(Self::Ghz),
            "w" => Ok(Self::W),
            "tfic" => Ok(Self::Tfic { field: 1.0 }),
            other => match other.strip_prefix("tfic:") {
                Some(h) => h
                    .parse()
                    .map(|field| Self::Tfic { field })
                    .map_err(|_| Error::Validation(format!("bad TFIC field '{h}'"))),
                None => Err(Error::Validation(format!(
                    "unknown state '{other}' (expected ghz, w or tfic)"
                ))),
            },
        }
    }
}

/// A concrete measured state: family, size and optional local noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub state: StateFamily,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseChannel>,
}

impl TargetSpec {
    pub fn new(state: StateFamily, n: usize) -> Self {
        Self {
            state,
            n,
            noise: None,
        }
    }

    pub fn with_noise(mut self, noise: Option<NoiseChannel>) -> Self {
        self.noise = noise;
        self
    }

    /// Noiseless dense density matrix, for quantum-fidelity comparisons.
    pub fn dense_state(&self) -> Result<DenseState> {
        match self.state {
            StateFamily::Ghz => ghz_dense(self.n),
            StateFamily::W => w_dense(self.n),
            StateFamily::Tfic { field } => tfic_ground_state(self.n, field),
        }
    }

    /// Density matrix after the local noise channel, if any.
    pub fn noisy_dense_state(&self) -> Result<DenseState> {
        let clean = self.dense_state()?;
        match &self.noise {
            Some(ch) => super::states::apply_channel_dense(&clean, ch),
            None => Ok(clean),
        }
    }
}

#[derive(Clone, Debug)]
enum Repr {
    Dense { probs: Vec<f64>, cdf: Vec<f64> },
    Mps(MpsSampler),
}

/// Exact measurement distribution `P(a)` of a target under a local POVM.
#[derive(Clone, Debug)]
pub struct Target {
    spec: TargetSpec,
    povm: LocalPovm,
    repr: Repr,
}

impl Target {
    pub fn new(spec: TargetSpec, base_povm: &LocalPovm) -> Result<Self> {
        if spec.n < 2 {
            return Err(Error::Validation(format!(
                "targets need n >= 2, got {}",
                spec.n
            )));
        }
        let povm = match &spec.noise {
            Some(ch) => base_povm.adjoint_channel_effects(ch)?,
            None => base_povm.clone(),
        };
        let repr = if spec.n <= MAX_DENSE_QUBITS {
            let state = spec.dense_state()?;
            // exact zeros come out as roundoff of either sign
            let probs: Vec<f64> = povm
                .probs_from_operator(state.rho(), spec.n)
                .into_iter()
                .map(|p| p.max(0.0))
                .collect();
            let mut acc = 0.0;
            let cdf = probs
                .iter()
                .map(|&p| {
                    acc += p;
                    acc
                })
                .collect();
            Repr::Dense { probs, cdf }
        } else {
            let mps = match spec.state {
                StateFamily::Ghz => Mps::ghz(spec.n)?,
                StateFamily::W => Mps::w(spec.n)?,
                StateFamily::Tfic { .. } => {
                    return Err(Error::Unsupported(format!(
                        "TFIC sampling is limited to {MAX_DENSE_QUBITS} qubits; larger chains need DMRG"
                    )))
                }
            };
            Repr::Mps(MpsSampler::new(mps, povm.clone())?)
        };
        Ok(Self { spec, povm, repr })
    }

    pub fn spec(&self) -> &TargetSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    /// The effective (noise-folded) POVM.
    pub fn povm(&self) -> &LocalPovm {
        &self.povm
    }

    pub fn prob(&self, outcome: &[usize]) -> Result<f64> {
        if outcome.len() != self.spec.n {
            return Err(Error::Shape {
                op: "target_prob",
                lhs: vec![outcome.len()],
                rhs: vec![self.spec.n],
            });
        }
        match &self.repr {
            Repr::Dense { probs, .. } => {
                let m = self.povm.m();
                let mut idx = 0;
                for &a in outcome {
                    if a >= m {
                        return Err(Error::Validation(format!("outcome {a} outside [0, {m})")));
                    }
                    idx = idx * m + a;
                }
                Ok(probs[idx])
            }
            Repr::Mps(s) => s.prob(outcome),
        }
    }

    /// Full base-`m` ordered table, when one is held in memory.
    pub fn table(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Dense { probs, .. } => Some(probs),
            Repr::Mps(_) => None,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<usize>> {
        match &self.repr {
            Repr::Dense { cdf, .. } => {
                let total = *cdf.last().expect("non-empty table");
                let u = rng.random::<f64>() * total;
                let mut idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                // never land on a zero-probability entry through rounding at the top
                while idx > 0 && cdf[idx] == cdf[idx - 1] {
                    idx -= 1;
                }
                Ok(index_to_outcome(idx, self.povm.m(), self.spec.n))
            }
            Repr::Mps(s) => s.sample(rng),
        }
    }
}

/// Base-`m` digits of `idx`, most significant first.
pub fn index_to_outcome(mut idx: usize, m: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for slot in out.iter_mut().rev() {
        *slot = idx % m;
        idx /= m;
    }
    out
}

pub fn outcome_to_index(outcome: &[usize], m: usize) -> usize {
    outcome.iter().fold(0, |acc, &a| acc * m + a)
}

/// Draws one outcome from an explicit table (used by tests and baselines).
pub fn sample_table(probs: &[f64], m: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    index_to_outcome(sample_categorical(probs, rng), m, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn family_parsing() {
        assert_eq!("ghz".parse::<StateFamily>().unwrap(), StateFamily::Ghz);
        assert_eq!(
            "tfic:0.5".parse::<StateFamily>().unwrap(),
            StateFamily::Tfic { field: 0.5 }
        );
        assert_eq!(StateFamily::Tfic { field: 1.0 }.to_string(), "tfic");
        assert!("cluster".parse::<StateFamily>().is_err());
    }

    #[test]
    fn mps_route_matches_dense_for_all_outcomes() {
        let povm = LocalPovm::tetrahedral();
        for n in 2..=8 {
            for (family, mps) in [(StateFamily::Ghz, Mps::ghz(n)), (StateFamily::W, Mps::w(n))] {
                let mps = mps.unwrap();
                let target = Target::new(TargetSpec::new(family, n), &povm).unwrap();
                let table = target.table().unwrap();
                for (idx, &p) in table.iter().enumerate() {
                    let o = index_to_outcome(idx, 4, n);
                    let q = mps.outcome_prob(&povm, &o).unwrap();
                    assert!((p - q).abs() < 1e-9, "n={n} idx={idx}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn noise_routes_commute() {
        let povm = LocalPovm::tetrahedral();
        for n in 2..=4 {
            for ch in [NoiseChannel::depolarize(0.1), NoiseChannel::bitflip(0.5)] {
                let spec = TargetSpec::new(StateFamily::W, n).with_noise(Some(ch));
                let noisy = spec.noisy_dense_state().unwrap();
                let direct = povm.probs_from_density(noisy.rho()).unwrap();
                let folded = Target::new(spec, &povm).unwrap();
                for (a, b) in direct.iter().zip(folded.table().unwrap()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn large_targets_use_mps() {
        let povm = LocalPovm::tetrahedral();
        let t = Target::new(TargetSpec::new(StateFamily::Ghz, 30), &povm).unwrap();
        assert!(t.table().is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = t.sample(&mut rng).unwrap();
        assert!(t.prob(&s).unwrap() > 0.0);
        let tfic = Target::new(TargetSpec::new(StateFamily::Tfic { field: 1.0 }, 11), &povm);
        assert!(matches!(tfic, Err(Error::Unsupported(_))));
    }

    #[test]
    fn index_round_trip() {
        for idx in 0..256 {
            assert_eq!(outcome_to_index(&index_to_outcome(idx, 4, 4), 4), idx);
        }
    }
}
