//! Exact autoregressive sampling and model probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{OutcomeRecord, Vocab};
use crate::error::{Error, Result};
use crate::model::LmQstModel;
use crate::povm::MAX_DENSE_QUBITS;
use crate::quantum::target::index_to_outcome;

/// Sequences per forward pass and per RNG stream.
const CHUNK: usize = 256;
const MIN_MASS: f64 = 1e-9;

/// Which factors make up the probability of an outcome string.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbConvention {
    /// Outcome conditionals renormalized over the `m` outcome tokens; no eos factor.
    /// This is the mass function of [`sample_outcomes`].
    #[default]
    #[serde(rename = "restricted")]
    FixedLength,
    /// As `FixedLength`, times the unrestricted conditional of eos after the last outcome.
    WithEos,
    /// Every conditional after the first renormalized over outcome tokens plus eos, with the
    /// eos factor included unless the record fills the S-2 outcome slots. This is the mass
    /// function of [`sample_until_eos`].
    Terminated,
}

impl std::fmt::Display for ProbConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FixedLength => "restricted",
            Self::WithEos => "with-eos",
            Self::Terminated => "terminated",
        })
    }
}

impl std::str::FromStr for ProbConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "restricted" | "fixed-length" => Ok(Self::FixedLength),
            "with-eos" => Ok(Self::WithEos),
            "terminated" => Ok(Self::Terminated),
            _ => Err(Error::Validation(format!(
                "unknown probability convention {s:?}"
            ))),
        }
    }
}

pub fn vocab_of(model: &LmQstModel) -> Vocab {
    Vocab::new(model.config().vocab_size - 3)
}

fn check_length(model: &LmQstModel, n: usize, extra: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation(
            "outcome length must be at least 1".into(),
        ));
    }
    let s = model.config().seq_len;
    if n + extra > s {
        return Err(Error::RecordTooLong {
            len: n,
            seq_len: s,
            needed: n + extra,
        });
    }
    Ok(())
}

/// Restricted, renormalized conditional over `allowed` token ids from one row of log-probs.
fn restricted(row: &[f64], allowed: &[usize], position: usize) -> Result<Vec<f64>> {
    let mut p: Vec<f64> = allowed.iter().map(|&t| row[t].exp()).collect();
    let mass: f64 = p.iter().sum();
    if !(mass >= MIN_MASS) {
        return Err(Error::DegenerateModel { position, mass });
    }
    p.iter_mut().for_each(|x| *x /= mass);
    Ok(p)
}

fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Draws `rngs.len()` records of `n` outcomes with one forward pass per step.
fn sample_chunk(
    model: &LmQstModel,
    n: usize,
    rngs: &mut [&mut ChaCha8Rng],
) -> Result<Vec<OutcomeRecord>> {
    let vocab = vocab_of(model);
    let v = vocab.size();
    let allowed: Vec<usize> = (0..vocab.m).collect();
    let batch = rngs.len();
    let mut records = vec![Vec::with_capacity(n); batch];
    for i in 0..n {
        let seq = i + 1;
        let mut tokens = Vec::with_capacity(batch * seq);
        for r in &records {
            tokens.push(vocab.sos());
            tokens.extend_from_slice(r);
        }
        let logp = model.log_conditionals(&tokens, batch, seq)?;
        for (b, (rec, rng)) in records.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let row = &logp.data()[(b * seq + i) * v..(b * seq + i + 1) * v];
            let p = restricted(row, &allowed, i)?;
            rec.push(draw(&p, &mut **rng));
        }
    }
    Ok(records)
}

/// One record of `n` outcomes: each conditional is restricted to outcome tokens,
/// renormalized and sampled by inverse CDF.
pub fn sample_outcomes(
    model: &LmQstModel,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OutcomeRecord> {
    check_length(model, n, 2)?;
    Ok(sample_chunk(model, n, &mut [rng])?.remove(0))
}

/// `count` records, batched and parallel; the result depends only on `seed`.
pub fn sample_batch(
    model: &LmQstModel,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<OutcomeRecord>> {
    check_length(model, n, 2)?;
    let chunks: Vec<Vec<OutcomeRecord>> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(count - c * CHUNK);
            let mut base = ChaCha8Rng::seed_from_u64(seed);
            base.set_stream(c as u64 + 1);
            // one generator per chunk, consumed in record order within each step
            let mut rngs: Vec<ChaCha8Rng> = (0..len)
                .map(|_| ChaCha8Rng::seed_from_u64(base.random()))
                .collect();
            let mut refs: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
            sample_chunk(model, n, &mut refs)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Variable-length sampling: conditionals are restricted to outcome tokens plus eos, and the
/// record ends at eos or once it holds S-2 outcomes. At least one outcome is always drawn.
pub fn sample_until_eos(model: &LmQstModel, rng: &mut ChaCha8Rng) -> Result<OutcomeRecord> {
    let max_n = model.config().seq_len.saturating_sub(2);
    check_length(model, max_n, 2)?;
    let vocab = vocab_of(model);
    let v = vocab.size();
    let outcomes: Vec<usize> = (0..vocab.m).collect();
    let mut with_eos = outcomes.clone();
    with_eos.push(vocab.eos());
    let mut tokens = vec![vocab.sos()];
    for i in 0..max_n {
        let logp = model.log_conditionals(&tokens, 1, tokens.len())?;
        let row = &logp.data()[i * v..(i + 1) * v];
        let allowed = if i == 0 { &outcomes } else { &with_eos };
        let p = restricted(row, allowed, i)?;
        let t = allowed[draw(&p, rng)];
        if t == vocab.eos() {
            break;
        }
        tokens.push(t);
    }
    tokens.remove(0);
    Ok(tokens)
}

fn log_prob_row(row: &[f64], target: usize, allowed: &[usize], position: usize) -> Result<f64> {
    let mass: f64 = allowed.iter().map(|&t| row[t].exp()).sum();
    if !(mass >= MIN_MASS) {
        return Err(Error::DegenerateModel { position, mass });
    }
    Ok(row[target] - mass.ln())
}

/// Per-factor log-probabilities of equal-length outcome strings in one forward pass.
fn factors_same_length(
    model: &LmQstModel,
    outcomes: &[&OutcomeRecord],
    conv: ProbConvention,
) -> Result<Vec<Vec<f64>>> {
    let vocab = vocab_of(model);
    let v = vocab.size();
    let n = outcomes[0].len();
    let seq = if conv == ProbConvention::FixedLength {
        n
    } else {
        n + 1
    };
    let mut tokens = Vec::with_capacity(outcomes.len() * seq);
    for a in outcomes {
        tokens.push(vocab.sos());
        tokens.extend_from_slice(&a[..seq - 1]);
    }
    if let Some(&bad) = outcomes
        .iter()
        .flat_map(|a| a.iter())
        .find(|&&t| !vocab.is_outcome(t))
    {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab: vocab.m,
        });
    }
    let logp = model.log_conditionals(&tokens, outcomes.len(), seq)?;
    let outcome_ids: Vec<usize> = (0..vocab.m).collect();
    let mut with_eos = outcome_ids.clone();
    with_eos.push(vocab.eos());
    let all: Vec<usize> = (0..v).collect();

    outcomes
        .iter()
        .enumerate()
        .map(|(b, a)| {
            let row = |i: usize| &logp.data()[(b * seq + i) * v..(b * seq + i + 1) * v];
            let mut lp = Vec::with_capacity(n + 1);
            for (i, &t) in a.iter().enumerate() {
                let allowed = match conv {
                    ProbConvention::Terminated if i > 0 => &with_eos,
                    _ => &outcome_ids,
                };
                lp.push(log_prob_row(row(i), t, allowed, i)?);
            }
            match conv {
                ProbConvention::FixedLength => {}
                ProbConvention::WithEos => lp.push(log_prob_row(row(n), vocab.eos(), &all, n)?),
                ProbConvention::Terminated => {
                    if n < model.config().seq_len - 2 {
                        lp.push(log_prob_row(row(n), vocab.eos(), &with_eos, n)?);
                    }
                }
            }
            Ok(lp)
        })
        .collect()
}

/// Log-probabilities of arbitrary outcome strings, batched by length.
pub fn model_log_probs(
    model: &LmQstModel,
    outcomes: &[OutcomeRecord],
    conv: ProbConvention,
) -> Result<Vec<f64>> {
    Ok(model_log_factors(model, outcomes, conv)?
        .into_iter()
        .map(|f| f.iter().sum())
        .collect())
}

/// The individual conditional log-probabilities whose sum is [`model_log_probs`]: one per
/// outcome, plus the eos factor where the convention has one.
pub fn model_log_factors(
    model: &LmQstModel,
    outcomes: &[OutcomeRecord],
    conv: ProbConvention,
) -> Result<Vec<Vec<f64>>> {
    for a in outcomes {
        check_length(model, a.len(), 2)?;
    }
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by_key(|&i| outcomes[i].len());
    let groups: Vec<Vec<usize>> = order
        .chunk_by(|&i, &j| outcomes[i].len() == outcomes[j].len())
        .flat_map(|g| g.chunks(CHUNK).map(<[usize]>::to_vec))
        .collect();
    let results: Vec<Vec<Vec<f64>>> = groups
        .par_iter()
        .map(|g| {
            let refs: Vec<&OutcomeRecord> = g.iter().map(|&i| &outcomes[i]).collect();
            factors_same_length(model, &refs, conv)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); outcomes.len()];
    for (g, r) in groups.iter().zip(results) {
        for (&i, lp) in g.iter().zip(r) {
            out[i] = lp;
        }
    }
    Ok(out)
}

pub fn model_prob(
    model: &LmQstModel,
    outcome: &OutcomeRecord,
    conv: ProbConvention,
) -> Result<f64> {
    Ok(model_log_probs(model, std::slice::from_ref(outcome), conv)?[0].exp())
}

/// Probabilities of all `m^n` outcome strings in base-`m` index order.
pub fn enumerate_probs(model: &LmQstModel, n: usize, conv: ProbConvention) -> Result<Vec<f64>> {
    if n > MAX_DENSE_QUBITS {
        return Err(Error::SizeGuard {
            what: "enumerated qubits",
            got: n,
            limit: MAX_DENSE_QUBITS,
        });
    }
    let m = vocab_of(model).m;
    let all: Vec<OutcomeRecord> = (0..m.pow(n as u32))
        .map(|i| index_to_outcome(i, m, n))
        .collect();
    Ok(model_log_probs(model, &all, conv)?
        .into_iter()
        .map(f64::exp)
        .collect())
}
