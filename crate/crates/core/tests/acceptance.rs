//! Acceptance criteria, one PASS/FAIL line each. Criteria 7-9 train full desk-scale models
//! and dominate the runtime.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use lmqst::datagen::{generate_single_state, Vocab};
use lmqst::experiments::{
    minimal_samples, run_multistate, run_single, MultiRun, SingleRun, FC_THRESHOLD, SAMPLE_GRID,
};
use lmqst::inference::{enumerate_probs, sample_batch, ProbConvention};
use lmqst::linalg::{ComplexMatrix, Tape};
use lmqst::metrics::{classical_fidelity_exact, kl_printed_exact, perplexity, uhlmann_fidelity};
use lmqst::model::{LmQstModel, ModelConfig};
use lmqst::povm::PovmKind;
use lmqst::quantum::target::{index_to_outcome, outcome_to_index};
use lmqst::quantum::{
    apply_channel_dense, ghz_dense, w_dense, DenseState, Mps, NoiseChannel, StateFamily, Target,
    TargetSpec,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> lmqst::Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn census() -> lmqst::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bad = Vec::new();
    for _ in 0..10 {
        let heads = rng.random_range(1..=4);
        let d = heads * rng.random_range(1..=8);
        let layers = rng.random_range(1..=4);
        let v = rng.random_range(5..=12);
        let s = rng.random_range(3..=10);
        let m = LmQstModel::new(ModelConfig::new(layers, d, heads, s, v), 0)?;
        let formula = (13 * d * d + 5 * d) * layers + d * v;
        if m.param_count() != formula {
            bad.push((layers, d, v, m.param_count(), formula));
        }
    }
    let spot = LmQstModel::new(ModelConfig::new(4, 64, 4, 8, 7), 0)?.param_count();
    outcome(
        bad.is_empty() && spot == 214_720,
        format!("L=4 d=64 |V|=7 -> {spot}; mismatches {bad:?}"),
    )
}

/// Central differences with step 1e-5. Relative error is measured per parameter tensor,
/// since single entries near zero sit below the roundoff floor of the quotient. At the
/// default 0.02 init the attention gradients are ~1e-10 and many ReLU inputs sit within a
/// step of the kink, so the weights are drawn wider.
fn gradient_check() -> lmqst::Result<Outcome> {
    let vocab = Vocab::new(4);
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for seed in 0..5u64 {
        let mut cfg = ModelConfig::new(2, 8, 4, 6, vocab.size());
        cfg.init_std = 0.5;
        let mut m = LmQstModel::new(cfg, 50 + seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = 3;
        let mut tokens = Vec::new();
        for _ in 0..batch {
            let n = rng.random_range(1..=4);
            tokens.push(vocab.sos());
            tokens.extend((0..n).map(|_| rng.random_range(0..4)));
            tokens.push(vocab.eos());
            tokens.extend(std::iter::repeat_n(vocab.pad(), 4 - n));
        }
        let analytic: Vec<Vec<f64>> = {
            let mut tape = Tape::new();
            let (vars, loss, _) = m.nll_tape(&mut tape, &tokens, batch, vocab, true)?;
            let g = tape.backward(loss)?;
            vars.0
                .iter()
                .map(|v| {
                    g.get(*v)
                        .expect("every parameter feeds the loss")
                        .data()
                        .to_vec()
                })
                .collect()
        };
        let n_params = m.params_mut().len();
        for p in 0..n_params {
            let mut diff2 = 0.0;
            let mut num2 = 0.0;
            for i in 0..analytic[p].len() {
                let orig = m.params_mut()[p].data()[i];
                let mut at = |x: f64| -> lmqst::Result<f64> {
                    m.params_mut()[p].data_mut()[i] = x;
                    let mut t = Tape::new();
                    let (_, l, _) = m.nll_tape(&mut t, &tokens, batch, vocab, false)?;
                    Ok(t.value(l).data()[0])
                };
                let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
                m.params_mut()[p].data_mut()[i] = orig;
                diff2 += (numeric - analytic[p][i]).powi(2);
                num2 += numeric * numeric;
            }
            let ana2: f64 = analytic[p].iter().map(|a| a * a).sum();
            let scale = num2.max(ana2).sqrt();
            if scale > 0.0 {
                let rel = diff2.sqrt() / scale;
                worst = worst.max(rel);
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 5 seeds, all parameter tensors"),
    )
}

fn causality() -> lmqst::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    let mut worst_sum = 0.0_f64;
    for trial in 0..100 {
        let heads = rng.random_range(1..=4);
        let cfg = ModelConfig::new(
            rng.random_range(1..=3),
            heads * rng.random_range(1..=4),
            heads,
            rng.random_range(3..=9),
            7,
        );
        let s = cfg.seq_len;
        let m = LmQstModel::new(cfg, trial)?;
        let tokens: Vec<usize> = (0..s).map(|_| rng.random_range(0..7)).collect();
        let j = rng.random_range(1..s);
        let mut perturbed = tokens.clone();
        perturbed[j] = (tokens[j] + rng.random_range(1..7)) % 7;
        let a = m.forward(&tokens)?;
        let b = m.forward(&perturbed)?;
        let v = 7;
        if a.data()[..j * v] != b.data()[..j * v] {
            failures += 1;
        }
        for row in a.data().chunks(v).chain(b.data().chunks(v)) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(
        failures == 0 && worst_sum <= 1e-12,
        format!("{failures}/100 prefix changes, max |row sum - 1| = {worst_sum:.1e}"),
    )
}

fn random_density(n: usize, rng: &mut ChaCha8Rng) -> lmqst::Result<ComplexMatrix> {
    let dim = 1 << n;
    let g = ComplexMatrix::from_vec(
        dim,
        dim,
        (0..dim * dim)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect(),
    )?;
    let r = g.matmul(&g.adjoint())?;
    let tr = r.trace().re;
    Ok(r.scale(1.0 / tr))
}

fn povm_round_trip() -> lmqst::Result<Outcome> {
    let povm = PovmKind::Tetra.build();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for k in 0..50 {
        let n = 1 + k % 3;
        let rho = random_density(n, &mut rng)?;
        let probs = povm.probs_from_density(&rho)?;
        let back = povm.density_from_probs(&probs, n)?.rho;
        worst = worst.max(back.frobenius_distance(&rho));
    }
    let t = povm.t_local();
    let ti = povm.t_local_inv();
    let mut const_err = 0.0_f64;
    for a in 0..4 {
        for b in 0..4 {
            let (want_t, want_ti) = if a == b {
                (0.25, 5.0)
            } else {
                (1.0 / 12.0, -1.0)
            };
            const_err = const_err
                .max((t[a * 4 + b] - want_t).abs())
                .max((ti[a * 4 + b] - want_ti).abs());
        }
    }
    outcome(
        worst < 1e-8 && const_err < 1e-12,
        format!("max Frobenius error {worst:.1e}; T / T^-1 constants off by {const_err:.1e}"),
    )
}

fn mps_dense() -> lmqst::Result<Outcome> {
    let povm = PovmKind::Tetra.build();
    let mut worst = 0.0_f64;
    for n in 2..=8 {
        for (mps, dense) in [(Mps::ghz(n)?, ghz_dense(n)?), (Mps::w(n)?, w_dense(n)?)] {
            let table = povm.probs_from_density(dense.rho())?;
            for (idx, p) in table.iter().enumerate() {
                let q = mps.outcome_prob(&povm, &index_to_outcome(idx, 4, n))?;
                worst = worst.max((p - q).abs());
            }
        }
    }
    let mut noise_worst = 0.0_f64;
    for n in 2..=6 {
        for family in [StateFamily::Ghz, StateFamily::W] {
            for p in [0.1, 0.5] {
                for ch in [NoiseChannel::depolarize(p), NoiseChannel::bitflip(p)] {
                    let spec = TargetSpec::new(family, n);
                    let on_state: DenseState = apply_channel_dense(&spec.dense_state()?, &ch)?;
                    let direct = povm.probs_from_density(on_state.rho())?;
                    let folded = povm
                        .adjoint_channel_effects(&ch)?
                        .probs_from_density(spec.dense_state()?.rho())?;
                    for (a, b) in direct.iter().zip(&folded) {
                        noise_worst = noise_worst.max((a - b).abs());
                    }
                }
            }
        }
    }
    outcome(
        worst < 1e-9 && noise_worst < 1e-10,
        format!("MPS vs dense {worst:.1e} (n <= 8); channel routes {noise_worst:.1e} (n <= 6)"),
    )
}

fn sampler_exactness() -> lmqst::Result<Outcome> {
    let mut cfg = ModelConfig::new(2, 8, 2, 4, 7);
    cfg.init_std = 0.3;
    let m = LmQstModel::new(cfg, 11)?;
    let p = enumerate_probs(&m, 2, ProbConvention::FixedLength)?;
    let draws = 1_000_000;
    let mut freq = vec![0.0; 16];
    for r in sample_batch(&m, 2, draws, 7)? {
        freq[outcome_to_index(&r, 4)] += 1.0 / draws as f64;
    }
    let tv = 0.5 * p.iter().zip(&freq).map(|(a, b)| (a - b).abs()).sum::<f64>();

    let mut min_pvalue = 1.0_f64;
    for family in [StateFamily::Ghz, StateFamily::W] {
        for n in [2, 3] {
            let spec = TargetSpec::new(family, n);
            let target = Target::new(spec, &PovmKind::Tetra.build())?;
            let table = target.table().expect("dense route").to_vec();
            let count = 200_000;
            let data = generate_single_state(spec, PovmKind::Tetra, count, 100 + n as u64)?;
            let mut obs = vec![0.0; table.len()];
            for r in &data.records {
                obs[outcome_to_index(r, 4)] += 1.0;
            }
            let mut stat = 0.0;
            let mut cells = 0;
            for (o, p) in obs.iter().zip(&table) {
                if *p > 1e-14 {
                    let e = p * count as f64;
                    stat += (o - e).powi(2) / e;
                    cells += 1;
                } else if *o > 0.0 {
                    stat = f64::INFINITY;
                }
            }
            let dist = ChiSquared::new((cells - 1) as f64)
                .map_err(|e| lmqst::Error::Numerical(e.to_string()))?;
            min_pvalue = min_pvalue.min(1.0 - dist.cdf(stat));
        }
    }
    outcome(
        tv < 0.005 && min_pvalue > 1e-3,
        format!("TV {tv:.4} at 1e6 draws; smallest datagen chi-square p-value {min_pvalue:.3}"),
    )
}

fn convergence() -> lmqst::Result<Outcome> {
    let mut lines = Vec::new();
    let mut all = true;
    for family in [StateFamily::Ghz, StateFamily::W] {
        for n in [2, 4, 6] {
            let mut reached = Vec::new();
            for seed in 0..3 {
                let t = Instant::now();
                let mut run = SingleRun::desk(TargetSpec::new(family, n), seed);
                run.stop_at_fc = Some(FC_THRESHOLD);
                let res = run_single(&run, None)?;
                eprintln!(
                    "  [7] {family} N={n} seed {seed}: best fc {:.4}, reached at {:?} ({:.0}s)",
                    res.best_fc(),
                    res.reached,
                    t.elapsed().as_secs_f64()
                );
                reached.push(res.reached);
            }
            let ok = reached.iter().filter(|r| r.is_some()).count() >= 2;
            all &= ok;
            lines.push(format!("{family}{n}:{reached:?}"));
        }
    }

    let mut stars = Vec::new();
    for n in [2, 4, 6, 8] {
        let t = Instant::now();
        let star = minimal_samples(&SAMPLE_GRID, |count| {
            let mut run = SingleRun::desk(TargetSpec::new(StateFamily::Ghz, n), 0);
            run.n_samples = count;
            run.exact_up_to = 8;
            run.stop_at_fc = Some(FC_THRESHOLD);
            let res = run_single(&run, None)?;
            eprintln!("  [7] GHZ N={n} Ns={count}: best fc {:.4}", res.best_fc());
            Ok(res.reached.is_some())
        })?;
        eprintln!(
            "  [7] Ns*(N={n}) = {star:?} ({:.0}s)",
            t.elapsed().as_secs_f64()
        );
        stars.push(star);
    }
    let monotone = stars.windows(2).all(|w| match (w[0], w[1]) {
        (Some(a), Some(b)) => a <= b,
        (None, Some(_)) => false,
        _ => true,
    });
    let proxy = monotone && stars[3].is_some_and(|s| s <= 20_000);
    outcome(
        all && proxy,
        format!(
            "epochs reaching fc>=0.99 {}; Ns* over N=2,4,6,8 {stars:?}",
            lines.join(" ")
        ),
    )
}

fn noise() -> lmqst::Result<Outcome> {
    let channels = [
        NoiseChannel::depolarize(0.1),
        NoiseChannel::bitflip(0.1),
        NoiseChannel::depolarize(0.2),
        NoiseChannel::bitflip(0.2),
    ];
    let mut seeds_ok = 0;
    let mut details = Vec::new();
    for seed in 0..3 {
        let mut finals = Vec::new();
        for ch in channels {
            let t = Instant::now();
            let mut run = SingleRun::desk(
                TargetSpec::new(StateFamily::Ghz, 4).with_noise(Some(ch)),
                seed,
            );
            run.quantum_fidelity = true;
            let res = run_single(&run, None)?;
            let last = res.last().expect("20 epochs ran").clone();
            let fq = last.fq.expect("fq requested");
            eprintln!(
                "  [8] {ch} seed {seed}: fc {:.4} fq {fq:.4} ({:.0}s)",
                last.fc,
                t.elapsed().as_secs_f64()
            );
            finals.push((last.fc, fq));
        }
        let (dp1, bf1, dp2, bf2) = (finals[0], finals[1], finals[2], finals[3]);
        let ok = dp1.0 >= 0.97
            && bf1.0 >= 0.97
            && dp1.1 >= dp1.0 - 0.05
            && bf1.1 >= bf1.0 - 0.05
            && bf2.0 <= dp2.0 + 0.02;
        seeds_ok += usize::from(ok);
        details.push(format!(
            "seed{seed}: dp.1 {:.4}/{:.4} bf.1 {:.4}/{:.4} dp.2 {:.4} bf.2 {:.4}",
            dp1.0, dp1.1, bf1.0, bf1.1, dp2.0, bf2.0
        ));
    }
    outcome(
        seeds_ok >= 2,
        format!("{seeds_ok}/3 seeds (fc/fq): {}", details.join("; ")),
    )
}

fn multistate() -> lmqst::Result<Outcome> {
    let t = Instant::now();
    let (_, per_length) = run_multistate(&MultiRun::desk(0), None)?;
    let worst = per_length
        .iter()
        .map(|r| r.fc)
        .fold(f64::INFINITY, f64::min);
    let listing: Vec<String> = per_length
        .iter()
        .map(|r| format!("{}:{:.3}", r.n, r.fc))
        .collect();
    eprintln!(
        "  [9] multistate finished in {:.0}s",
        t.elapsed().as_secs_f64()
    );
    outcome(
        per_length.len() == 9 && worst >= 0.90,
        format!("per-length fc {}", listing.join(" ")),
    )
}

fn metric_identities() -> lmqst::Result<Outcome> {
    let mut cfg = ModelConfig::new(2, 8, 2, 4, 7);
    cfg.init_std = 0.3;
    let m = LmQstModel::new(cfg, 4)?;
    let p = enumerate_probs(&m, 2, ProbConvention::FixedLength)?;
    let fc = classical_fidelity_exact(&p, &p);
    let kl = kl_printed_exact(&p, &p);
    let uniform = LmQstModel::zeros(ModelConfig::new(1, 8, 2, 5, 7))?;
    let records: Vec<Vec<usize>> = (0..64).map(|i| index_to_outcome(i, 4, 3)).collect();
    let ppl = perplexity(&uniform, &records, ProbConvention::FixedLength)?.ppl;
    let ghz = ghz_dense(3)?;
    let fq_self = uhlmann_fidelity(ghz.rho(), ghz.rho())?;
    let zero = ComplexMatrix::diag(&[1.0, 0.0]);
    let mixed = ComplexMatrix::identity(2).scale(0.5);
    let fq_half = uhlmann_fidelity(&mixed, &zero)?;
    let ok = (fc - 1.0).abs() <= 1e-9
        && kl.abs() <= 1e-9
        && (ppl - 4.0).abs() <= 1e-9
        && (fq_self - 1.0).abs() <= 1e-9
        && (fq_half - 0.5).abs() <= 1e-9;
    outcome(
        ok,
        format!("F_c(P,P)={fc:.12} KL(P,P)={kl:.1e} PPL(uniform)={ppl:.12} F_q(t,t)={fq_self:.12} F_q(I/2,|0>)={fq_half:.12}"),
    )
}

type Criterion = (&'static str, fn() -> lmqst::Result<Outcome>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 parameter census", census),
        ("2 gradient vs finite differences", gradient_check),
        ("3 causality and normalization", causality),
        ("4 POVM round trip and constants", povm_round_trip),
        ("5 MPS/dense and noise-route agreement", mps_dense),
        ("6 sampler exactness", sampler_exactness),
        ("7 convergence and sample scaling", convergence),
        ("8 noisy GHZ reconstruction", noise),
        ("9 multi-state desk scale", multistate),
        ("10 metric identities", metric_identities),
    ];
    // LMQST_ACCEPTANCE=1,2,10 runs a subset
    let only: Option<Vec<String>> = std::env::var("LMQST_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let mut failed = 0;
    for (name, f) in criteria {
        let id = name.split(' ').next().unwrap_or_default();
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} [{name}] {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
