use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use lmqst::datagen::{
    build_multistate, encode_concat_chop, encode_fixed, generate_single_state, truncate_buckets,
    wikitext_buckets, Dataset, Source,
};
use lmqst::experiments::{
    convergence_small, noise_sweep, run_multistate, sample_scaling, MultiRun, FC_THRESHOLD,
    SAMPLE_GRID,
};
use lmqst::inference::{sample_batch, sample_until_eos, vocab_of, ProbConvention};
use lmqst::linalg::ComplexMatrix;
use lmqst::metrics::{
    evaluate, evaluate_table, psd_project, EvalOptions, MetricReport, EXACT_MAX_QUBITS,
};
use lmqst::model::{LmQstModel, ModelConfig};
use lmqst::povm::PovmKind;
use lmqst::quantum::{NoiseChannel, StateFamily, Target, TargetSpec};
use lmqst::training::{EpochMetrics, StepDecay, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "lmqst",
    version,
    about = "Transformer quantum state tomography from POVM outcome data"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "LMQST_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a measurement-outcome dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Draw outcome records from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint against a target state.
    Eval(EvalArgs),
    /// Reconstruct the density matrix a checkpoint describes.
    Reconstruct(ReconstructArgs),
    /// Run a scripted experiment and write its tables.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct StateArgs {
    /// ghz, w, tfic or tfic:<field>; a `-family` suffix selects mixed lengths.
    #[arg(long)]
    state: String,
    #[arg(long)]
    n: Option<usize>,
    /// e.g. depolarize:0.2 or bitflip:0.1
    #[arg(long)]
    noise: Option<NoiseChannel>,
    #[arg(long, default_value = "tetra")]
    povm: PovmKind,
}

impl StateArgs {
    fn family(&self) -> Result<(StateFamily, bool)> {
        let (name, multi) = match self.state.strip_suffix("-family") {
            Some(base) => (base, true),
            None => (self.state.as_str(), false),
        };
        Ok((name.parse()?, multi))
    }

    fn single(&self) -> Result<TargetSpec> {
        let (family, multi) = self.family()?;
        if multi {
            bail!(
                "--state {} names a family; this command needs a single state",
                self.state
            );
        }
        let n = self.n.ok_or_else(|| anyhow!("--n is required"))?;
        Ok(TargetSpec::new(family, n).with_noise(self.noise))
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    state: StateArgs,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `single` (fixed N) or `wikitext` (bucketed mixed-length proportions).
    #[arg(long, default_value = "single")]
    dist: String,
    /// Largest record length for `--dist wikitext`.
    #[arg(long, default_value_t = 50)]
    max_n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory for config.json, log.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "L", default_value_t = 4)]
    layers: usize,
    #[arg(long = "d", default_value_t = 64)]
    d_model: usize,
    #[arg(long = "h", default_value_t = 4)]
    heads: usize,
    /// Sequence length; defaults to record length + 2, or 64 for mixed lengths
    /// (which are concatenated and chopped).
    #[arg(long = "S")]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Multiply the learning rate by --lr-decay-factor every this many epochs.
    #[arg(long, requires = "lr_decay_factor")]
    lr_decay_every: Option<usize>,
    #[arg(long, requires = "lr_decay_every")]
    lr_decay_factor: Option<f64>,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the residual connections around attention and feed-forward.
    #[arg(long)]
    no_residual: bool,
    /// Truth samples for per-epoch KL and perplexity (single-state data only).
    #[arg(long, default_value_t = 5_000)]
    eval_samples: usize,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Stop once F_c reaches this value.
    #[arg(long)]
    stop_at_fc: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Outcomes per record; required unless --until-eos.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1_000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "tetra")]
    povm: PovmKind,
    /// Variable-length records ending at eos.
    #[arg(long)]
    until_eos: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; omit with --baseline.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// `truth` scores the exact probability table as if it were a model.
    #[arg(long)]
    baseline: Option<String>,
    #[command(flatten)]
    state: StateArgs,
    #[arg(long, default_value_t = lmqst::metrics::DEFAULT_EVAL_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enumerate all outcomes for F_c and KL (N ≤ 10).
    #[arg(long, conflicts_with = "monte_carlo")]
    exact: bool,
    /// Always use Monte-Carlo estimates.
    #[arg(long)]
    monte_carlo: bool,
    /// Also compute quantum fidelity (N ≤ 6).
    #[arg(long)]
    fq: bool,
    #[arg(long, default_value = "restricted")]
    convention: ProbConvention,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append one row per call to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of qubits; defaults to S-2.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value = "tetra")]
    povm: PovmKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproduceArgs {
    /// convergence-small, sample-scaling, noise-sweep or multistate
    experiment: String,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds (0, 1, ...).
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Smaller sizes for a quick look; thresholds are still reported.
    #[arg(long)]
    quick: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Reproduce(a) => cmd_reproduce(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let (family, multi) = a.state.family()?;
    let data = match (a.dist.as_str(), multi) {
        ("single", false) => {
            generate_single_state(a.state.single()?, a.state.povm, a.samples, a.seed)?
        }
        ("wikitext", _) => {
            let buckets = truncate_buckets(&wikitext_buckets(), a.max_n)?;
            build_multistate(
                family,
                a.state.noise,
                a.state.povm,
                a.samples,
                &buckets,
                a.seed,
            )?
        }
        ("single", true) => bail!("--state {} needs --dist wikitext", a.state.state),
        (d, _) => bail!("unknown --dist {d:?} (expected single or wikitext)"),
    };
    data.write_jsonl(&a.out)?;
    eprintln!(
        "wrote {} records to {}",
        data.records.len(),
        a.out.display()
    );
    if let Source::Multi { .. } = data.meta.source {
        for (len, count) in data.length_histogram() {
            eprintln!("  N={len:>2}: {count}");
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data =
        Dataset::read_jsonl(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let vocab = data.vocab();
    let longest = data.max_len();
    let single = match data.meta.source {
        Source::Single { target } => Some(target),
        _ => None,
    };
    let uniform = data.records.iter().all(|r| r.len() == longest);
    let seq_len = a.seq_len.unwrap_or(if uniform { longest + 2 } else { 64 });
    if seq_len < longest + 2 {
        bail!("--S {seq_len} is too short: the longest record has {longest} outcomes, so S must be at least {}", longest + 2);
    }
    let seqs = if uniform {
        encode_fixed(&data.records, vocab, seq_len)?
    } else {
        encode_concat_chop(&data.records, vocab, seq_len, a.seed)?
    };
    let mut cfg = ModelConfig::new(a.layers, a.d_model, a.heads, seq_len, vocab.size());
    cfg.residual = !a.no_residual;
    let mut model = LmQstModel::new(cfg, a.seed)?;
    eprintln!(
        "model: {} parameters, {} training sequences",
        model.param_count(),
        seqs.len()
    );

    let train = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        eval_every: a.eval_every,
        lr_decay: a
            .lr_decay_every
            .zip(a.lr_decay_factor)
            .map(|(every_epochs, factor)| StepDecay {
                every_epochs,
                factor,
            }),
        ..TrainConfig::default()
    };
    let base = data.meta.povm.build();
    let target = single.map(|t| Target::new(t, &base)).transpose()?;
    let opts = EvalOptions {
        n_eval: a.eval_samples,
        seed: a.seed.wrapping_add(1),
        ..EvalOptions::default()
    };
    let mut trainer = Trainer::new(train).with_run_dir(&a.out);
    if let Some(target) = &target {
        let stop_at = a.stop_at_fc;
        let base = &base;
        trainer = trainer.with_hook(move |m, epoch| {
            let r = evaluate(m, target, base, &opts)?;
            eprintln!(
                "epoch {epoch}: fc {:.5} kl {:.5} ppl {:.4}",
                r.fc.mean, r.kl.mean, r.ppl
            );
            Ok(EpochMetrics {
                fc: Some(r.fc.mean),
                kl: Some(r.kl.mean),
                ppl: Some(r.ppl),
                stop: stop_at.is_some_and(|t| r.fc.mean >= t),
            })
        });
    }
    let log = trainer.train(&mut model, &seqs, vocab)?;
    if let Some(last) = log.rows.last() {
        eprintln!(
            "finished epoch {} in {:.1}s, loss {:.5}",
            last.epoch, last.seconds, last.loss
        );
    }
    model.save(&a.out.join("final.ckpt"))?;
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = LmQstModel::load(&a.ckpt)?;
    let m = vocab_of(&model).m;
    let records = if a.until_eos {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        (0..a.count)
            .map(|_| sample_until_eos(&model, &mut rng))
            .collect::<lmqst::Result<Vec<_>>>()?
    } else {
        let n =
            a.n.ok_or_else(|| anyhow!("--n is required unless --until-eos is given"))?;
        sample_batch(&model, n, a.count, a.seed)?
    };
    let note = format!("samples from {}", a.ckpt.display());
    Dataset::new(Source::External { note }, a.povm, m, a.seed, records).write_jsonl(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalCsvRow<'a> {
    ckpt: &'a str,
    state: &'a str,
    n: usize,
    fc: f64,
    fc_stderr: f64,
    kl: f64,
    kl_forward: f64,
    ppl: f64,
    fq: Option<f64>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let spec = a.state.single()?;
    if a.fq && spec.n > EXACT_MAX_QUBITS {
        bail!(
            "--fq needs the full 4^N table and is limited to N <= {EXACT_MAX_QUBITS} (got N = {})",
            spec.n
        );
    }
    let base = a.state.povm.build();
    let target = Target::new(spec, &base)?;
    let opts = EvalOptions {
        n_eval: a.samples,
        seed: a.seed,
        exact_up_to: if a.exact {
            lmqst::povm::MAX_DENSE_QUBITS
        } else if a.monte_carlo {
            0
        } else {
            EXACT_MAX_QUBITS
        },
        quantum_fidelity: a.fq,
        convention: a.convention,
    };
    let (report, label): (MetricReport, String) = match (&a.ckpt, a.baseline.as_deref()) {
        (Some(path), None) => {
            let model = LmQstModel::load(path)?;
            let s = model.config().seq_len;
            if spec.n + 2 > s {
                bail!(
                    "checkpoint has S = {s}; it cannot describe {} outcomes",
                    spec.n
                );
            }
            (
                evaluate(&model, &target, &base, &opts)?,
                path.display().to_string(),
            )
        }
        (None, Some("truth")) => {
            let table = target
                .table()
                .ok_or_else(|| {
                    anyhow!(
                        "the truth baseline needs N <= {}",
                        lmqst::povm::MAX_DENSE_QUBITS
                    )
                })?
                .to_vec();
            (
                evaluate_table(&table, &target, &base, &opts)?,
                "baseline:truth".into(),
            )
        }
        (None, Some(other)) => bail!("unknown baseline {other:?} (expected truth)"),
        (Some(_), Some(_)) => bail!("--ckpt and --baseline are mutually exclusive"),
        (None, None) => bail!("one of --ckpt or --baseline is required"),
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(path) = &a.csv {
        let fresh = !path.exists();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        w.serialize(EvalCsvRow {
            ckpt: &label,
            state: &spec.state.to_string(),
            n: spec.n,
            fc: report.fc.mean,
            fc_stderr: report.fc.stderr,
            kl: report.kl.mean,
            kl_forward: report.kl_forward.mean,
            ppl: report.ppl,
            fq: report.fq,
        })?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MatrixJson {
    dim: usize,
    /// Row-major `[re, im]` pairs.
    entries: Vec<[f64; 2]>,
}

impl From<&ComplexMatrix> for MatrixJson {
    fn from(m: &ComplexMatrix) -> Self {
        Self {
            dim: m.rows(),
            entries: m.data().iter().map(|c: &Complex64| [c.re, c.im]).collect(),
        }
    }
}

#[derive(Serialize)]
struct ReconstructionJson {
    n_qubits: usize,
    povm: PovmKind,
    raw: MatrixJson,
    projected: MatrixJson,
    psd_projected: bool,
    raw_min_eigenvalue: f64,
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let model = LmQstModel::load(&a.ckpt)?;
    let n = a.n.unwrap_or(model.config().seq_len.saturating_sub(2));
    if n > EXACT_MAX_QUBITS {
        bail!("reconstruction enumerates 4^N outcomes and is limited to N <= {EXACT_MAX_QUBITS} (got N = {n})");
    }
    let povm = a.povm.build();
    let probs = lmqst::inference::enumerate_probs(&model, n, ProbConvention::FixedLength)?;
    let raw = povm.density_from_probs(&probs, n)?.rho;
    let (projected, flagged) = psd_project(&raw)?;
    let min_eig = raw
        .hermitian_eig()?
        .values
        .first()
        .copied()
        .unwrap_or(f64::NAN);
    let out = ReconstructionJson {
        n_qubits: n,
        povm: a.povm,
        raw: (&raw).into(),
        projected: (&projected).into(),
        psd_projected: flagged,
        raw_min_eigenvalue: min_eig,
    };
    std::fs::write(&a.out, serde_json::to_string_pretty(&out)? + "\n")?;
    println!("trace {:.12}", raw.trace().re);
    println!("min eigenvalue {min_eig:.6e}");
    println!("projected trace {:.12}", projected.trace().re);
    Ok(())
}

#[derive(Serialize)]
struct Check {
    criterion: String,
    pass: bool,
    detail: String,
}

fn check(criterion: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        criterion: criterion.into(),
        pass,
        detail: detail.into(),
    }
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    let seeds: Vec<u64> = (0..a.seeds.max(1)).collect();
    let out = a.out.as_path();
    std::fs::create_dir_all(out)?;
    let checks = match a.experiment.as_str() {
        "convergence-small" => {
            let ns: &[usize] = if a.quick { &[2, 4] } else { &[2, 4, 6] };
            let (_, summary) = convergence_small(ns, &seeds, false, Some(out))?;
            write_json(out, "summary.json", &summary)?;
            let need = 2.min(seeds.len());
            summary
                .iter()
                .map(|s| {
                    check(
                        format!("{} N={} reaches fc >= {FC_THRESHOLD}", s.state, s.n),
                        s.seeds_reaching >= need,
                        format!(
                            "{}/{} seeds, best fc {:?}",
                            s.seeds_reaching, s.seeds, s.best_fc
                        ),
                    )
                })
                .collect()
        }
        "sample-scaling" => {
            let ns: &[usize] = if a.quick { &[2, 4] } else { &[2, 4, 6, 8] };
            let rows = sample_scaling(
                StateFamily::Ghz,
                ns,
                &[0.0],
                &seeds[..1],
                &SAMPLE_GRID,
                Some(out),
            )?;
            let stars: Vec<Option<usize>> = rows.iter().map(|r| r.ns_star).collect();
            let monotone = stars.windows(2).all(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => a <= b,
                (None, Some(_)) => false,
                _ => true,
            });
            let last = rows.last().and_then(|r| r.ns_star);
            vec![
                check("Ns* non-decreasing in N", monotone, format!("{stars:?}")),
                check(
                    format!("Ns*(N={}) <= 20000", ns[ns.len() - 1]),
                    last.is_some_and(|x| x <= 20_000),
                    format!("{last:?}"),
                ),
            ]
        }
        "noise-sweep" => {
            let strengths = if a.quick {
                vec![0.1, 0.2]
            } else {
                vec![0.0, 0.1, 0.2, 0.3]
            };
            let channels: Vec<NoiseChannel> = strengths
                .iter()
                .map(|&p| NoiseChannel::depolarize(p))
                .chain(strengths.iter().map(|&p| NoiseChannel::bitflip(p)))
                .collect();
            let (_, summary) = noise_sweep(4, &channels, &seeds, Some(out))?;
            summary
                .iter()
                .map(|s| {
                    check(
                        format!(
                            "{}:{} seed {} fc >= 0.97 and fq >= fc - 0.05",
                            s.channel, s.strength, s.seed
                        ),
                        s.fc >= 0.97 && s.fq >= s.fc - 0.05,
                        format!("fc {:.4} fq {:.4}", s.fc, s.fq),
                    )
                })
                .collect()
        }
        "multistate" => {
            let mut run = MultiRun::desk(seeds[0]);
            if a.quick {
                run.total_samples = 20_000;
                run.max_n = 6;
                run.d_model = 64;
                run.seq_len = 32;
                run.train.epochs = 5;
            }
            let (_, per_length) = run_multistate(&run, Some(out))?;
            per_length
                .iter()
                .map(|r| {
                    check(
                        format!("N={} fc >= 0.90", r.n),
                        r.fc >= 0.90,
                        format!("fc {:.4} ± {:.4}", r.fc, r.stderr),
                    )
                })
                .collect()
        }
        other => bail!("unknown experiment {other:?}"),
    };
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {} ({})",
            if c.pass { "PASS" } else { "FAIL" },
            c.criterion,
            c.detail
        );
        failed += usize::from(!c.pass);
    }
    write_json(out, "checks.json", &checks)?;
    println!(
        "{}/{} checks passed; tables in {}",
        checks.len() - failed,
        checks.len(),
        out.display()
    );
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(dir.join(name))?;
    writeln!(f, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}
