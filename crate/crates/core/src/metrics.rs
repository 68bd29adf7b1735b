//! Reconstruction quality: classical fidelity, KL divergence, perplexity, quantum fidelity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_target, OutcomeRecord};
use crate::error::{Error, Result};
use crate::inference::{
    enumerate_probs, model_log_factors, model_log_probs, sample_batch, ProbConvention,
};
use crate::linalg::ComplexMatrix;
use crate::model::LmQstModel;
use crate::povm::LocalPovm;
use crate::quantum::Target;

/// Largest N for which F_c and KL are computed by enumeration, and F_q at all.
pub const EXACT_MAX_QUBITS: usize = 6;
pub const DEFAULT_EVAL_SAMPLES: usize = 100_000;
const EIG_FLOOR: f64 = 1e-12;

/// Mean and standard error of the mean (0 for exact values).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Self { mean, stderr: 0.0 }
    }

    /// Sample mean and standard error; empty input gives NaN.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self {
                mean,
                stderr: f64::NAN,
            };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMethod {
    Enumeration,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityEstimate {
    pub fc: Estimate,
    /// Model samples with `P_true(a) = 0`; each contributes 0 to the mean.
    pub zero_true: usize,
}

/// `E_{a~P_true}[log(P/P_true)]` as printed (`printed` ≤ 0) and its negation `forward`,
/// which is `D_KL(P_true || P)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub printed: Estimate,
    pub forward: Estimate,
    /// True samples the model assigns probability 0; excluded from the mean.
    pub infinite: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub ppl: f64,
    /// Records with a zero conditional; excluded from the mean.
    pub infinite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_qubits: usize,
    pub method: EvalMethod,
    pub convention: ProbConvention,
    /// Samples drawn per Monte-Carlo quantity (and for perplexity).
    pub n_eval_samples: usize,
    pub fc: Estimate,
    pub fc_zero_true: usize,
    pub kl: Estimate,
    pub kl_forward: Estimate,
    pub kl_infinite: usize,
    pub ppl: f64,
    pub ppl_infinite: usize,
    pub fq: Option<f64>,
    /// Whether the reconstructed density matrix had negative eigenvalues clipped.
    pub psd_projected: Option<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub n_eval: usize,
    pub seed: u64,
    /// Use enumeration for F_c and KL when N is at most this.
    pub exact_up_to: usize,
    pub quantum_fidelity: bool,
    pub convention: ProbConvention,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_eval: DEFAULT_EVAL_SAMPLES,
            seed: 0,
            exact_up_to: EXACT_MAX_QUBITS,
            quantum_fidelity: false,
            convention: ProbConvention::FixedLength,
        }
    }
}

/// `Σ_a P(a)·sqrt(P_true(a)/P(a))` over a full table.
pub fn classical_fidelity_exact(p_model: &[f64], p_true: &[f64]) -> f64 {
    p_model
        .iter()
        .zip(p_true)
        .filter(|(p, t)| **p > 0.0 && **t > 0.0)
        .map(|(p, t)| (p * t).sqrt())
        .sum()
}

/// `Σ_a P_true(a)·log(P(a)/P_true(a))`, the printed KL form; `-inf` if the model misses support.
pub fn kl_printed_exact(p_model: &[f64], p_true: &[f64]) -> f64 {
    p_model
        .iter()
        .zip(p_true)
        .filter(|(_, t)| **t > 0.0)
        .map(|(p, t)| {
            if *p > 0.0 {
                t * (p / t).ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .sum()
}

/// Monte-Carlo F_c over `n_eval` model samples.
pub fn classical_fidelity_mc(
    model: &LmQstModel,
    true_prob: impl Fn(&[usize]) -> Result<f64> + Sync,
    n: usize,
    n_eval: usize,
    seed: u64,
) -> Result<FidelityEstimate> {
    if n_eval == 0 {
        return Err(Error::Validation("n_eval must be at least 1".into()));
    }
    let samples = sample_batch(model, n, n_eval, seed)?;
    let logp = model_log_probs(model, &samples, ProbConvention::FixedLength)?;
    let pt: Vec<f64> = samples
        .par_iter()
        .map(|a| true_prob(a))
        .collect::<Result<_>>()?;
    let zero_true = pt.iter().filter(|&&t| t <= 0.0).count();
    let ratios: Vec<f64> = pt
        .iter()
        .zip(&logp)
        .map(|(&t, &lp)| {
            if t > 0.0 {
                (0.5 * (t.ln() - lp)).exp()
            } else {
                0.0
            }
        })
        .collect();
    Ok(FidelityEstimate {
        fc: Estimate::from_samples(&ratios),
        zero_true,
    })
}

/// Monte-Carlo KL over records drawn from the truth, with their true probabilities.
pub fn kl_mc(
    model: &LmQstModel,
    records: &[OutcomeRecord],
    true_probs: &[f64],
) -> Result<KlEstimate> {
    let logp = model_log_probs(model, records, ProbConvention::FixedLength)?;
    let mut terms = Vec::with_capacity(records.len());
    let mut infinite = 0;
    for (&lp, &t) in logp.iter().zip(true_probs) {
        if lp == f64::NEG_INFINITY {
            infinite += 1;
        } else if t > 0.0 {
            terms.push(lp - t.ln());
        }
    }
    let printed = Estimate::from_samples(&terms);
    Ok(KlEstimate {
        printed,
        forward: Estimate {
            mean: -printed.mean,
            stderr: printed.stderr,
        },
        infinite,
    })
}

/// Mean over records of `exp(-mean log-conditional)`, from per-record conditional log-probs.
pub fn perplexity_from_factors(factors: &[Vec<f64>]) -> Perplexity {
    let mut infinite = 0;
    let mut per_record = Vec::with_capacity(factors.len());
    for f in factors {
        if f.contains(&f64::NEG_INFINITY) {
            infinite += 1;
            continue;
        }
        per_record.push((-f.iter().sum::<f64>() / f.len() as f64).exp());
    }
    Perplexity {
        ppl: per_record.iter().sum::<f64>() / per_record.len() as f64,
        infinite,
    }
}

pub fn perplexity(
    model: &LmQstModel,
    records: &[OutcomeRecord],
    conv: ProbConvention,
) -> Result<Perplexity> {
    Ok(perplexity_from_factors(&model_log_factors(
        model, records, conv,
    )?))
}

/// Clips negative eigenvalues and renormalizes the trace; reports whether clipping occurred.
pub fn psd_project(rho: &ComplexMatrix) -> Result<(ComplexMatrix, bool)> {
    let eig = rho.hermitian_eig()?;
    let negative = eig.values.iter().any(|&x| x < -1e-12);
    if !negative {
        return Ok((rho.clone(), false));
    }
    let kept: f64 = eig.values.iter().map(|x| x.max(0.0)).sum();
    if !(kept > 0.0) {
        return Err(Error::Numerical(
            "density matrix has no positive spectrum".into(),
        ));
    }
    Ok((eig.map_values(|x| x.max(0.0) / kept), true))
}

/// `[tr sqrt(sqrt(τ) σ sqrt(τ))]²` for positive semidefinite `τ`, `σ`.
pub fn uhlmann_fidelity(tau: &ComplexMatrix, sigma: &ComplexMatrix) -> Result<f64> {
    if tau.rows() != sigma.rows() || !tau.is_square() || !sigma.is_square() {
        return Err(Error::Shape {
            op: "uhlmann_fidelity",
            lhs: vec![tau.rows(), tau.cols()],
            rhs: vec![sigma.rows(), sigma.cols()],
        });
    }
    // eigenvalues this far below the largest are eigensolver roundoff; under a square root
    // they would otherwise add ~1e-8 per dimension
    let floor = |values: &[f64]| EIG_FLOOR * values.iter().cloned().fold(0.0, f64::max);
    let tau_eig = tau.hermitian_eig()?;
    let cut = floor(&tau_eig.values);
    let sqrt_tau = tau_eig.map_values(|x| if x > cut { x.sqrt() } else { 0.0 });
    let inner = sqrt_tau.matmul(sigma)?.matmul(&sqrt_tau)?;
    let inner = inner.add(&inner.adjoint()).scale(0.5);
    let values = inner.hermitian_eig()?.values;
    let cut = floor(&values);
    let tr: f64 = values.iter().filter(|&&x| x > cut).map(|x| x.sqrt()).sum();
    Ok(tr * tr)
}

/// The model's measurement distribution turned into a physical density matrix.
pub fn model_density(
    model: &LmQstModel,
    povm: &LocalPovm,
    n: usize,
) -> Result<(ComplexMatrix, bool)> {
    if n > EXACT_MAX_QUBITS {
        return Err(Error::Unsupported(format!(
            "quantum fidelity needs the full 4^N table; N = {n} exceeds {EXACT_MAX_QUBITS}"
        )));
    }
    let probs = enumerate_probs(model, n, ProbConvention::FixedLength)?;
    let rec = povm.density_from_probs(&probs, n)?;
    psd_project(&rec.rho)
}

/// F_q between the reconstructed state and `truth`, plus the projection flag.
pub fn quantum_fidelity(
    model: &LmQstModel,
    povm: &LocalPovm,
    truth: &ComplexMatrix,
) -> Result<(f64, bool)> {
    let n = truth.rows().trailing_zeros() as usize;
    let (rho, projected) = model_density(model, povm, n)?;
    Ok((uhlmann_fidelity(&rho, truth)?, projected))
}

/// Every metric for a single-state model against `target`.
///
/// F_q, when requested, reconstructs with `base_povm` (the noise-free frame the data was
/// measured in) and compares with the noisy dense state.
pub fn evaluate(
    model: &LmQstModel,
    target: &Target,
    base_povm: &LocalPovm,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let n = target.n();
    if opts.n_eval == 0 {
        return Err(Error::Validation("n_eval must be at least 1".into()));
    }
    let truth_records = sample_target(target, opts.n_eval, opts.seed)?;
    let truth_probs: Vec<f64> = truth_records
        .par_iter()
        .map(|a| target.prob(a))
        .collect::<Result<_>>()?;
    let ppl = perplexity(model, &truth_records, opts.convention)?;

    let exact = n <= opts.exact_up_to && target.table().is_some();
    let (method, fc, fc_zero_true, kl) = if exact {
        let p_true = target.table().expect("checked above");
        let p_model = enumerate_probs(model, n, ProbConvention::FixedLength)?;
        let printed = kl_printed_exact(&p_model, p_true);
        let zero_true = 0;
        (
            EvalMethod::Enumeration,
            Estimate::exact(classical_fidelity_exact(&p_model, p_true)),
            zero_true,
            KlEstimate {
                printed: Estimate::exact(printed),
                forward: Estimate::exact(-printed),
                infinite: usize::from(printed == f64::NEG_INFINITY),
            },
        )
    } else {
        // a separate stream so model samples do not reuse the truth sampler's draws
        let fid = classical_fidelity_mc(
            model,
            |a| target.prob(a),
            n,
            opts.n_eval,
            opts.seed ^ 0x5eed_f00d,
        )?;
        let kl = kl_mc(model, &truth_records, &truth_probs)?;
        (EvalMethod::MonteCarlo, fid.fc, fid.zero_true, kl)
    };

    let (fq, psd_projected) = if opts.quantum_fidelity {
        let truth = target.spec().noisy_dense_state()?;
        let (f, p) = quantum_fidelity(model, base_povm, truth.rho())?;
        (Some(f), Some(p))
    } else {
        (None, None)
    };

    Ok(MetricReport {
        n_qubits: n,
        method,
        convention: opts.convention,
        n_eval_samples: opts.n_eval,
        fc,
        fc_zero_true,
        kl: kl.printed,
        kl_forward: kl.forward,
        kl_infinite: kl.infinite,
        ppl: ppl.ppl,
        ppl_infinite: ppl.infinite,
        fq,
        psd_projected,
    })
}

/// Prefix marginals of a full `m^n` table: entry `k` has `m^k` values.
fn prefix_marginals(table: &[f64], m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); n + 1];
    out[n] = table.to_vec();
    for k in (0..n).rev() {
        out[k] = out[k + 1].chunks(m).map(|c| c.iter().sum()).collect();
    }
    out
}

/// Every metric for an explicit probability table used as the model (a lookup baseline).
pub fn evaluate_table(
    p_model: &[f64],
    target: &Target,
    base_povm: &LocalPovm,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let n = target.n();
    let m = base_povm.m();
    if p_model.len() != m.pow(n as u32) {
        return Err(Error::Shape {
            op: "evaluate_table",
            lhs: vec![p_model.len()],
            rhs: vec![m, n],
        });
    }
    let p_true = target
        .table()
        .ok_or_else(|| Error::Unsupported(format!("no probability table for N = {n}")))?;
    let marg = prefix_marginals(p_model, m, n);
    let records = sample_target(target, opts.n_eval, opts.seed)?;
    let factors: Vec<Vec<f64>> = records
        .iter()
        .map(|a| {
            let mut idx = 0;
            a.iter()
                .enumerate()
                .map(|(k, &x)| {
                    let parent = marg[k][idx];
                    idx = idx * m + x;
                    (marg[k + 1][idx] / parent).ln()
                })
                .collect()
        })
        .collect();
    let ppl = perplexity_from_factors(&factors);
    let printed = kl_printed_exact(p_model, p_true);
    let (fq, psd_projected) = if opts.quantum_fidelity {
        if n > EXACT_MAX_QUBITS {
            return Err(Error::Unsupported(format!(
                "quantum fidelity is capped at N = {EXACT_MAX_QUBITS}"
            )));
        }
        let (rho, projected) = psd_project(&base_povm.density_from_probs(p_model, n)?.rho)?;
        let truth = target.spec().noisy_dense_state()?;
        (Some(uhlmann_fidelity(&rho, truth.rho())?), Some(projected))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        n_qubits: n,
        method: EvalMethod::Enumeration,
        convention: opts.convention,
        n_eval_samples: opts.n_eval,
        fc: Estimate::exact(classical_fidelity_exact(p_model, p_true)),
        fc_zero_true: 0,
        kl: Estimate::exact(printed),
        kl_forward: Estimate::exact(-printed),
        kl_infinite: usize::from(printed == f64::NEG_INFINITY),
        ppl: ppl.ppl,
        ppl_infinite: ppl.infinite,
        fq,
        psd_projected,
    })
}
