//! Measurement datasets: exact sampling from target states, token encoding,
//! and the mixed-length multi-state builder.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::povm::PovmKind;
use crate::quantum::{NoiseChannel, StateFamily, Target, TargetSpec};

pub const DATASET_SCHEMA: u32 = 1;

/// Samples per RNG stream; keeps datasets identical for any thread count.
const CHUNK: usize = 1024;

/// Token ids: outcomes `0..m`, then `sos`, `eos`, `pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub m: usize,
}

impl Vocab {
    pub fn new(m: usize) -> Self {
        Self { m }
    }

    pub fn sos(&self) -> usize {
        self.m
    }

    pub fn eos(&self) -> usize {
        self.m + 1
    }

    pub fn pad(&self) -> usize {
        self.m + 2
    }

    pub fn size(&self) -> usize {
        self.m + 3
    }

    pub fn is_outcome(&self, id: usize) -> bool {
        id < self.m
    }
}

pub type OutcomeRecord = Vec<usize>;

/// Where the records came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Source {
    Single {
        target: TargetSpec,
    },
    Multi {
        state: StateFamily,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise: Option<NoiseChannel>,
        buckets: Vec<LengthBucket>,
    },
    /// Model samples or externally supplied records.
    External {
        #[serde(default)]
        note: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: u32,
    pub generator: String,
    pub source: Source,
    pub povm: PovmKind,
    pub m: usize,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<OutcomeRecord>,
}

impl Dataset {
    pub fn new(
        source: Source,
        povm: PovmKind,
        m: usize,
        seed: u64,
        records: Vec<OutcomeRecord>,
    ) -> Self {
        Self {
            meta: DatasetMeta {
                schema: DATASET_SCHEMA,
                generator: format!("lmqst {}", env!("CARGO_PKG_VERSION")),
                source,
                povm,
                m,
                seed,
                count: records.len(),
            },
            records,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.meta.m)
    }

    pub fn max_len(&self) -> usize {
        self.records.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Number of records of each length.
    pub fn length_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.len()).or_insert(0) += 1;
        }
        h
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &self.meta)?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))??;
        let meta: DatasetMeta = serde_json::from_str(&first)?;
        if meta.schema > DATASET_SCHEMA {
            return Err(Error::Format(format!(
                "dataset schema {} is newer than supported {DATASET_SCHEMA}",
                meta.schema
            )));
        }
        let mut records = Vec::with_capacity(meta.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: OutcomeRecord = serde_json::from_str(&line)?;
            if let Some(&bad) = r.iter().find(|&&a| a >= meta.m) {
                return Err(Error::Format(format!(
                    "record {} has outcome {bad} outside [0, {})",
                    i + 1,
                    meta.m
                )));
            }
            records.push(r);
        }
        if records.len() != meta.count {
            return Err(Error::Format(format!(
                "metadata announces {} records, file has {}",
                meta.count,
                records.len()
            )));
        }
        Ok(Self { meta, records })
    }
}

/// `(sos, a_1..a_N, eos, pad, …)` of length exactly `seq_len`.
pub fn encode_fixed(
    records: &[OutcomeRecord],
    vocab: Vocab,
    seq_len: usize,
) -> Result<Vec<Vec<usize>>> {
    records
        .iter()
        .map(|r| {
            if r.len() + 2 > seq_len {
                return Err(Error::RecordTooLong {
                    len: r.len(),
                    seq_len,
                    needed: r.len() + 2,
                });
            }
            let mut seq = Vec::with_capacity(seq_len);
            seq.push(vocab.sos());
            seq.extend_from_slice(r);
            seq.push(vocab.eos());
            seq.resize(seq_len, vocab.pad());
            Ok(seq)
        })
        .collect()
}

/// Strips `sos`, `eos` and `pad` from a fixed-encoded sequence.
pub fn decode_fixed(seq: &[usize], vocab: Vocab) -> Result<OutcomeRecord> {
    if seq.first() != Some(&vocab.sos()) {
        return Err(Error::Format("sequence does not start with sos".into()));
    }
    let body = &seq[1..];
    let end = body
        .iter()
        .position(|&t| t == vocab.eos())
        .ok_or_else(|| Error::Format("sequence has no eos".into()))?;
    if let Some(&t) = body[..end].iter().find(|&&t| !vocab.is_outcome(t)) {
        return Err(Error::Format(format!("non-outcome token {t} before eos")));
    }
    Ok(body[..end].to_vec())
}

/// Shuffles records, renders each as `(sos, a…, eos)`, concatenates and cuts
/// into windows of `seq_len`; a trailing remainder becomes one padded window.
pub fn encode_concat_chop(
    records: &[OutcomeRecord],
    vocab: Vocab,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if records.is_empty() {
        return Err(Error::Validation(
            "cannot encode an empty record set".into(),
        ));
    }
    if seq_len < 2 {
        return Err(Error::Validation(format!(
            "sequence length {seq_len} is too short"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut stream = Vec::with_capacity(records.iter().map(|r| r.len() + 2).sum());
    for &i in &order {
        stream.push(vocab.sos());
        stream.extend_from_slice(&records[i]);
        stream.push(vocab.eos());
    }
    let mut windows: Vec<Vec<usize>> = stream.chunks(seq_len).map(<[usize]>::to_vec).collect();
    if let Some(last) = windows.last_mut() {
        last.resize(seq_len, vocab.pad());
    }
    Ok(windows)
}

/// Runs `f(rng)` for `count` samples, with one RNG stream per fixed-size chunk.
fn sample_parallel<F>(count: usize, seed: u64, f: F) -> Result<Vec<OutcomeRecord>>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<OutcomeRecord> + Sync,
{
    let chunks: Vec<Vec<OutcomeRecord>> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(count);
            (lo..hi).map(|i| f(i, &mut rng)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// `count` i.i.d. records from `target`; identical for any thread count.
pub fn sample_target(target: &Target, count: usize, seed: u64) -> Result<Vec<OutcomeRecord>> {
    sample_parallel(count, seed, |_, rng| target.sample(rng))
}

/// I.i.d. outcome records from the exact measurement distribution of `spec`.
pub fn generate_single_state(
    spec: TargetSpec,
    povm: PovmKind,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::Validation("n_samples must be at least 1".into()));
    }
    let base = povm.build();
    let target = Target::new(spec, &base)?;
    let records = sample_target(&target, n_samples, seed)?;
    Ok(Dataset::new(
        Source::Single { target: spec },
        povm,
        base.m(),
        seed,
        records,
    ))
}

/// Lengths `lo..=hi` sharing one proportion of the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: usize,
    pub proportion: f64,
}

const fn bucket(lo: usize, hi: usize, proportion: f64) -> LengthBucket {
    LengthBucket { lo, hi, proportion }
}

/// Sequence-length proportions of the WikiText corpus, in ten buckets, as
/// printed (five decimals; they sum to 0.99996). Use [`wikitext_buckets`]
/// for the normalized table.
pub const WIKITEXT_BUCKETS: [LengthBucket; 10] = [
    bucket(2, 5, 0.41490),
    bucket(6, 10, 0.15452),
    bucket(11, 15, 0.18046),
    bucket(16, 20, 0.12480),
    bucket(21, 25, 0.06842),
    bucket(26, 30, 0.03427),
    bucket(31, 35, 0.01393),
    bucket(36, 40, 0.00547),
    bucket(41, 45, 0.00193),
    bucket(46, 50, 0.00126),
];

/// The WikiText table rescaled to sum to one.
pub fn wikitext_buckets() -> Vec<LengthBucket> {
    let total: f64 = WIKITEXT_BUCKETS.iter().map(|b| b.proportion).sum();
    WIKITEXT_BUCKETS
        .iter()
        .map(|b| bucket(b.lo, b.hi, b.proportion / total))
        .collect()
}

pub fn validate_buckets(buckets: &[LengthBucket]) -> Result<()> {
    if buckets.is_empty() {
        return Err(Error::Validation("length table is empty".into()));
    }
    for b in buckets {
        if b.lo < 2 || b.hi < b.lo {
            return Err(Error::Validation(format!(
                "bad length bucket {}-{}",
                b.lo, b.hi
            )));
        }
        if !(b.proportion >= 0.0) {
            return Err(Error::Validation(format!(
                "bucket {}-{} has proportion {}",
                b.lo, b.hi, b.proportion
            )));
        }
    }
    let total: f64 = buckets.iter().map(|b| b.proportion).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "proportions sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Drops lengths above `max_n`, clips the straddling bucket, and rescales
/// the remaining proportions to sum to one.
pub fn truncate_buckets(buckets: &[LengthBucket], max_n: usize) -> Result<Vec<LengthBucket>> {
    let kept: Vec<LengthBucket> = buckets
        .iter()
        .filter(|b| b.lo <= max_n)
        .map(|b| bucket(b.lo, b.hi.min(max_n), b.proportion))
        .collect();
    let total: f64 = kept.iter().map(|b| b.proportion).sum();
    if kept.is_empty() || total <= 0.0 {
        return Err(Error::Validation(format!(
            "no length bucket starts at or below {max_n}"
        )));
    }
    Ok(kept
        .into_iter()
        .map(|b| bucket(b.lo, b.hi, b.proportion / total))
        .collect())
}

/// Largest-remainder apportionment of `total` over the proportions.
pub fn bucket_counts(total: usize, proportions: &[f64]) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let quotas: Vec<f64> = proportions.iter().map(|p| total as f64 * p / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Mixed-length dataset over one state family: per-bucket counts are fixed
/// by apportionment, lengths are uniform inside each bucket.
pub fn build_multistate(
    state: StateFamily,
    noise: Option<NoiseChannel>,
    povm: PovmKind,
    total_samples: usize,
    buckets: &[LengthBucket],
    seed: u64,
) -> Result<Dataset> {
    validate_buckets(buckets)?;
    if total_samples == 0 {
        return Err(Error::Validation("total_samples must be at least 1".into()));
    }
    let counts = bucket_counts(
        total_samples,
        &buckets.iter().map(|b| b.proportion).collect::<Vec<_>>(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lengths = Vec::with_capacity(total_samples);
    for (b, &c) in buckets.iter().zip(&counts) {
        for _ in 0..c {
            lengths.push(rng.random_range(b.lo..=b.hi));
        }
    }
    let base = povm.build();
    let mut distinct: Vec<usize> = lengths.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let targets: BTreeMap<usize, Target> = distinct
        .into_par_iter()
        .map(|n| Target::new(TargetSpec::new(state, n).with_noise(noise), &base).map(|t| (n, t)))
        .collect::<Result<_>>()?;
    let records = sample_parallel(total_samples, seed, |i, rng| {
        targets[&lengths[i]].sample(rng)
    })?;
    Ok(Dataset::new(
        Source::Multi {
            state,
            noise,
            buckets: buckets.to_vec(),
        },
        povm,
        base.m(),
        seed,
        records,
    ))
}
