//! Scripted desk-scale experiments shared by `reproduce` and the acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    build_multistate, encode_concat_chop, encode_fixed, generate_single_state, truncate_buckets,
    wikitext_buckets, Vocab,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricReport};
use crate::model::{LmQstModel, ModelConfig};
use crate::povm::PovmKind;
use crate::quantum::{NoiseChannel, StateFamily, Target, TargetSpec};
use crate::training::{EpochMetrics, TrainConfig, Trainer};

pub const FC_THRESHOLD: f64 = 0.99;
pub const SAMPLE_GRID: [usize; 5] = [2_500, 5_000, 10_000, 20_000, 40_000];

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes `rows` to `dir/name` when a directory is given.
pub fn write_csv<T: Serialize>(dir: Option<&Path>, name: &str, rows: &[T]) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One single-state training run: data generation, training, per-epoch evaluation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SingleRun {
    pub target: TargetSpec,
    pub povm: PovmKind,
    pub n_samples: usize,
    /// Seeds data generation, initialization and batching.
    pub seed: u64,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub train: TrainConfig,
    /// Truth samples used for KL and perplexity each epoch.
    pub eval_samples: usize,
    pub exact_up_to: usize,
    pub quantum_fidelity: bool,
    /// Stop once F_c reaches this value.
    pub stop_at_fc: Option<f64>,
}

impl SingleRun {
    /// L=4, d=64, h=4, Ns=2·10⁴, 20 epochs, exact F_c up to N=6.
    pub fn desk(target: TargetSpec, seed: u64) -> Self {
        Self {
            target,
            povm: PovmKind::Tetra,
            n_samples: 20_000,
            seed,
            layers: 4,
            d_model: 64,
            heads: 4,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval_samples: 5_000,
            exact_up_to: 6,
            quantum_fidelity: false,
            stop_at_fc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub loss: f64,
    pub fc: f64,
    pub kl: f64,
    pub kl_forward: f64,
    pub ppl: f64,
    pub fq: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SingleRunResult {
    pub epochs: Vec<EpochEval>,
    /// First epoch with F_c ≥ 0.99.
    pub reached: Option<usize>,
    pub final_report: Option<MetricReport>,
}

impl SingleRunResult {
    pub fn best_fc(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.fc)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn last(&self) -> Option<&EpochEval> {
        self.epochs.last()
    }
}

pub fn run_single(run: &SingleRun, run_dir: Option<&Path>) -> Result<SingleRunResult> {
    let n = run.target.n;
    let data = generate_single_state(run.target, run.povm, run.n_samples, run.seed)?;
    let vocab = Vocab::new(4);
    let seq_len = n + 2;
    let seqs = encode_fixed(&data.records, vocab, seq_len)?;
    let cfg = ModelConfig::new(run.layers, run.d_model, run.heads, seq_len, vocab.size());
    let mut model = LmQstModel::new(cfg, run.seed)?;
    let base = run.povm.build();
    let target = Target::new(run.target, &base)?;
    let opts = EvalOptions {
        n_eval: run.eval_samples,
        seed: run.seed.wrapping_add(0x0e7a1),
        exact_up_to: run.exact_up_to,
        quantum_fidelity: run.quantum_fidelity,
        ..EvalOptions::default()
    };
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        data.write_jsonl(&dir.join("data.jsonl"))?;
    }

    let mut reports: Vec<MetricReport> = Vec::new();
    let log = Trainer::new(run.train)
        .with_run_dir_opt(run_dir)
        .with_hook(|m, _| {
            let r = evaluate(m, &target, &base, &opts)?;
            let stop = run.stop_at_fc.is_some_and(|t| r.fc.mean >= t);
            let out = EpochMetrics {
                fc: Some(r.fc.mean),
                kl: Some(r.kl.mean),
                ppl: Some(r.ppl),
                stop,
            };
            reports.push(r);
            Ok(out)
        })
        .train(&mut model, &seqs, vocab)?;

    let epochs: Vec<EpochEval> = log
        .rows
        .iter()
        .zip(&reports)
        .map(|(row, r)| EpochEval {
            epoch: row.epoch,
            loss: row.loss,
            fc: r.fc.mean,
            kl: r.kl.mean,
            kl_forward: r.kl_forward.mean,
            ppl: r.ppl,
            fq: r.fq,
        })
        .collect();
    let reached = epochs
        .iter()
        .find(|e| e.fc >= FC_THRESHOLD)
        .map(|e| e.epoch);
    Ok(SingleRunResult {
        epochs,
        reached,
        final_report: reports.pop(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub state: String,
    pub n: usize,
    pub seed: u64,
    pub epoch: usize,
    pub loss: f64,
    pub fc: f64,
    pub kl: f64,
    pub kl_forward: f64,
    pub ppl: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceSummary {
    pub state: String,
    pub n: usize,
    pub seeds_reaching: usize,
    pub seeds: usize,
    pub best_fc: Vec<f64>,
}

/// Pure GHZ and W at each `n`, one run per seed, stopping at F_c ≥ 0.99 when `early_stop`.
pub fn convergence_small(
    ns: &[usize],
    seeds: &[u64],
    early_stop: bool,
    out: Option<&Path>,
) -> Result<(Vec<ConvergenceRow>, Vec<ConvergenceSummary>)> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for family in [StateFamily::Ghz, StateFamily::W] {
        for &n in ns {
            let mut best = Vec::new();
            let mut reaching = 0;
            for &seed in seeds {
                let mut run = SingleRun::desk(TargetSpec::new(family, n), seed);
                if early_stop {
                    run.stop_at_fc = Some(FC_THRESHOLD);
                }
                let res = run_single(&run, None)?;
                reaching += usize::from(res.reached.is_some());
                best.push(res.best_fc());
                rows.extend(res.epochs.iter().map(|e| ConvergenceRow {
                    state: family.to_string(),
                    n,
                    seed,
                    epoch: e.epoch,
                    loss: e.loss,
                    fc: e.fc,
                    kl: e.kl,
                    kl_forward: e.kl_forward,
                    ppl: e.ppl,
                }));
            }
            summary.push(ConvergenceSummary {
                state: family.to_string(),
                n,
                seeds_reaching: reaching,
                seeds: seeds.len(),
                best_fc: best,
            });
        }
    }
    write_csv(out, "convergence.csv", &rows)?;
    Ok((rows, summary))
}

/// Smallest grid entry whose run reaches F_c ≥ 0.99, assuming success is monotone in Ns.
pub fn minimal_samples(
    grid: &[usize],
    mut passes: impl FnMut(usize) -> Result<bool>,
) -> Result<Option<usize>> {
    let (mut lo, mut hi) = (0, grid.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if passes(grid[mid])? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(grid.get(lo).copied())
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub state: String,
    pub gamma: f64,
    pub n: usize,
    pub seed: u64,
    /// Empty when no grid entry reached the threshold.
    pub ns_star: Option<usize>,
}

pub fn sample_scaling(
    family: StateFamily,
    ns: &[usize],
    gammas: &[f64],
    seeds: &[u64],
    grid: &[usize],
    out: Option<&Path>,
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &gamma in gammas {
        let noise = (gamma > 0.0).then(|| NoiseChannel::depolarize(gamma));
        for &n in ns {
            for &seed in seeds {
                let target = TargetSpec::new(family, n).with_noise(noise);
                let ns_star = minimal_samples(grid, |count| {
                    let mut run = SingleRun::desk(target, seed);
                    run.n_samples = count;
                    run.exact_up_to = 8;
                    run.stop_at_fc = Some(FC_THRESHOLD);
                    Ok(run_single(&run, None)?.reached.is_some())
                })?;
                rows.push(ScalingRow {
                    state: family.to_string(),
                    gamma,
                    n,
                    seed,
                    ns_star,
                });
            }
        }
    }
    write_csv(out, "sample_scaling.csv", &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseRow {
    pub channel: String,
    pub strength: f64,
    pub seed: u64,
    pub epoch: usize,
    pub fc: f64,
    pub fq: Option<f64>,
    pub kl: f64,
    pub ppl: f64,
}

/// Final-epoch metrics of one noisy run.
#[derive(Clone, Debug, Serialize)]
pub struct NoiseSummary {
    pub channel: String,
    pub strength: f64,
    pub seed: u64,
    pub fc: f64,
    pub fq: f64,
}

/// GHZ at `n` under each channel and strength, F_q tracked every epoch.
pub fn noise_sweep(
    n: usize,
    channels: &[NoiseChannel],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<(Vec<NoiseRow>, Vec<NoiseSummary>)> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for ch in channels {
        for &seed in seeds {
            let noise = (ch.strength > 0.0).then_some(*ch);
            let mut run =
                SingleRun::desk(TargetSpec::new(StateFamily::Ghz, n).with_noise(noise), seed);
            run.quantum_fidelity = true;
            let res = run_single(&run, None)?;
            let kind = ch.kind.to_string();
            rows.extend(res.epochs.iter().map(|e| NoiseRow {
                channel: kind.clone(),
                strength: ch.strength,
                seed,
                epoch: e.epoch,
                fc: e.fc,
                fq: e.fq,
                kl: e.kl,
                ppl: e.ppl,
            }));
            let last = res
                .last()
                .ok_or_else(|| Error::Training("no epochs were run".into()))?;
            summary.push(NoiseSummary {
                channel: kind,
                strength: ch.strength,
                seed,
                fc: last.fc,
                fq: last.fq.unwrap_or(f64::NAN),
            });
        }
    }
    write_csv(out, "noise_epochs.csv", &rows)?;
    write_csv(out, "noise_sweep.csv", &summary)?;
    Ok((rows, summary))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiRun {
    pub family: StateFamily,
    pub noise: Option<NoiseChannel>,
    pub povm: PovmKind,
    pub total_samples: usize,
    pub max_n: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub train: TrainConfig,
    /// Model samples per length for Monte-Carlo F_c above `exact_up_to`.
    pub eval_samples: usize,
    pub exact_up_to: usize,
    pub seed: u64,
}

impl MultiRun {
    /// GHZ family N ∈ 2..10, 10⁵ samples, L=4, d=128, h=4, S=64.
    pub fn desk(seed: u64) -> Self {
        Self {
            family: StateFamily::Ghz,
            noise: None,
            povm: PovmKind::Tetra,
            total_samples: 100_000,
            max_n: 10,
            layers: 4,
            d_model: 128,
            heads: 4,
            seq_len: 64,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            eval_samples: 20_000,
            exact_up_to: 6,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LengthFidelity {
    pub n: usize,
    pub fc: f64,
    pub stderr: f64,
    pub samples_in_data: usize,
}

pub fn run_multistate(
    run: &MultiRun,
    run_dir: Option<&Path>,
) -> Result<(LmQstModel, Vec<LengthFidelity>)> {
    let buckets = truncate_buckets(&wikitext_buckets(), run.max_n)?;
    let data = build_multistate(
        run.family,
        run.noise,
        run.povm,
        run.total_samples,
        &buckets,
        run.seed,
    )?;
    let vocab = Vocab::new(4);
    let seqs = encode_concat_chop(&data.records, vocab, run.seq_len, run.seed)?;
    let cfg = ModelConfig::new(
        run.layers,
        run.d_model,
        run.heads,
        run.seq_len,
        vocab.size(),
    );
    let mut model = LmQstModel::new(cfg, run.seed)?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        data.write_jsonl(&dir.join("data.jsonl"))?;
    }
    Trainer::new(run.train)
        .with_run_dir_opt(run_dir)
        .train(&mut model, &seqs, vocab)?;

    let hist = data.length_histogram();
    let lo = buckets.first().map_or(2, |b| b.lo);
    let base = run.povm.build();
    let mut out = Vec::new();
    for n in lo..=run.max_n {
        let target = Target::new(TargetSpec::new(run.family, n).with_noise(run.noise), &base)?;
        let opts = EvalOptions {
            n_eval: run.eval_samples,
            seed: run.seed.wrapping_add(n as u64),
            exact_up_to: run.exact_up_to,
            ..EvalOptions::default()
        };
        let r = evaluate(&model, &target, &base, &opts)?;
        out.push(LengthFidelity {
            n,
            fc: r.fc.mean,
            stderr: r.fc.stderr,
            samples_in_data: hist.get(&n).copied().unwrap_or(0),
        });
    }
    write_csv(run_dir, "per_length_fc.csv", &out)?;
    Ok((model, out))
}
