use std::path::Path;
use std::process::{Command, Output};

use lmqst::datagen::{Dataset, Source};
use lmqst::model::LmQstModel;

fn lmqst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmqst"))
        .current_dir(dir)
        .env("LMQST_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lmqst(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_writes_counted_dataset_with_noise_metadata() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "gen",
            "--state",
            "ghz",
            "--n",
            "6",
            "--samples",
            "20000",
            "--seed",
            "1",
            "--out",
            "a.jsonl",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 20_001);

    ok(
        dir.path(),
        &[
            "gen",
            "--state",
            "ghz",
            "--n",
            "4",
            "--noise",
            "depolarize:0.2",
            "--samples",
            "100",
            "--out",
            "b.jsonl",
        ],
    );
    let d = Dataset::read_jsonl(&dir.path().join("b.jsonl")).unwrap();
    match d.meta.source {
        Source::Single { target } => {
            assert_eq!(target.noise.unwrap().to_string(), "depolarize:0.2")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn gen_family_follows_wikitext_table() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "gen",
            "--state",
            "ghz-family",
            "--dist",
            "wikitext",
            "--samples",
            "100000",
            "--out",
            "m.jsonl",
        ],
    );
    let d = Dataset::read_jsonl(&dir.path().join("m.jsonl")).unwrap();
    let hist = d.length_histogram();
    let bucket = |lo: usize, hi: usize| -> usize {
        (lo..=hi).map(|n| hist.get(&n).copied().unwrap_or(0)).sum()
    };
    assert_eq!(bucket(2, 5), 41_492);
    assert_eq!(bucket(46, 50), 126);
    assert_eq!(d.records.len(), 100_000);
}

#[test]
fn invalid_combinations_fail_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmqst(
        dir.path(),
        &[
            "gen",
            "--state",
            "ghz",
            "--samples",
            "10",
            "--out",
            "x.jsonl",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n"));

    ok(
        dir.path(),
        &[
            "gen",
            "--state",
            "w",
            "--n",
            "4",
            "--samples",
            "50",
            "--out",
            "d.jsonl",
        ],
    );
    let out = lmqst(
        dir.path(),
        &["train", "--data", "d.jsonl", "--out", "run", "--S", "5"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 6"));

    let out = lmqst(
        dir.path(),
        &[
            "eval",
            "--baseline",
            "truth",
            "--state",
            "ghz",
            "--n",
            "7",
            "--fq",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("N <= 6"));
}

#[test]
fn zero_epochs_and_reruns_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen",
            "--state",
            "ghz",
            "--n",
            "3",
            "--samples",
            "600",
            "--seed",
            "2",
            "--out",
            "d.jsonl",
        ],
    );
    let small = [
        "--d",
        "16",
        "--L",
        "2",
        "--eval-samples",
        "200",
        "--seed",
        "5",
    ];
    let args = |out: &'static str, epochs: &'static str| {
        let mut v = vec![
            "train", "--data", "d.jsonl", "--out", out, "--epochs", epochs,
        ];
        v.extend(small);
        v
    };
    ok(p, &args("zero", "0"));
    let init = LmQstModel::load(&p.join("zero/epoch-0.ckpt")).unwrap();
    assert_eq!(LmQstModel::load(&p.join("zero/final.ckpt")).unwrap(), init);

    ok(p, &args("r1", "2"));
    ok(p, &args("r2", "2"));
    let log1 = std::fs::read_to_string(p.join("r1/log.csv")).unwrap();
    assert_eq!(log1, std::fs::read_to_string(p.join("r2/log.csv")).unwrap());
    assert_eq!(log1.lines().count(), 3);
    assert_eq!(
        std::fs::read(p.join("r1/final.ckpt")).unwrap(),
        std::fs::read(p.join("r2/final.ckpt")).unwrap()
    );
}

#[test]
fn eval_reports_convention_fq_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen",
            "--state",
            "ghz",
            "--n",
            "2",
            "--samples",
            "300",
            "--out",
            "d.jsonl",
        ],
    );
    ok(
        p,
        &[
            "train", "--data", "d.jsonl", "--out", "run", "--epochs", "0", "--d", "16",
        ],
    );
    let json = ok(
        p,
        &[
            "eval",
            "--ckpt",
            "run/final.ckpt",
            "--state",
            "ghz",
            "--n",
            "2",
            "--exact",
            "--fq",
            "--samples",
            "500",
            "--csv",
            "e.csv",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["method"], "enumeration");
    assert_eq!(v["convention"], "restricted");
    assert!(v["fq"].as_f64().is_some());
    ok(
        p,
        &[
            "eval",
            "--ckpt",
            "run/final.ckpt",
            "--state",
            "ghz",
            "--n",
            "2",
            "--samples",
            "500",
            "--csv",
            "e.csv",
        ],
    );
    assert_eq!(
        std::fs::read_to_string(p.join("e.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let json = ok(
        p,
        &[
            "eval",
            "--baseline",
            "truth",
            "--state",
            "w",
            "--n",
            "3",
            "--samples",
            "500",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!((v["fc"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn sample_output_is_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen",
            "--state",
            "ghz",
            "--n",
            "3",
            "--samples",
            "100",
            "--out",
            "d.jsonl",
        ],
    );
    ok(
        p,
        &[
            "train", "--data", "d.jsonl", "--out", "run", "--epochs", "0", "--d", "16",
        ],
    );
    ok(
        p,
        &[
            "sample",
            "--ckpt",
            "run/final.ckpt",
            "--n",
            "3",
            "--count",
            "40",
            "--out",
            "s.jsonl",
        ],
    );
    let d = Dataset::read_jsonl(&p.join("s.jsonl")).unwrap();
    assert_eq!(d.records.len(), 40);
    assert!(d
        .records
        .iter()
        .all(|r| r.len() == 3 && r.iter().all(|&a| a < 4)));
    ok(
        p,
        &[
            "sample",
            "--ckpt",
            "run/final.ckpt",
            "--until-eos",
            "--count",
            "20",
            "--out",
            "v.jsonl",
        ],
    );
    let d = Dataset::read_jsonl(&p.join("v.jsonl")).unwrap();
    assert!(d.records.iter().all(|r| (1..=3).contains(&r.len())));
}

#[test]
fn reconstruct_recovers_single_qubit_state() {
    use lmqst::datagen::OutcomeRecord;
    use lmqst::linalg::ComplexMatrix;
    use lmqst::povm::PovmKind;
    use lmqst::quantum::mps::sample_categorical;
    use num_complex::Complex64;
    use rand::SeedableRng;

    // |0><0| measured directly; the state families start at two qubits
    let povm = PovmKind::Tetra.build();
    let zero = ComplexMatrix::outer(&[Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
    let probs = povm.probs_from_density(&zero).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let records: Vec<OutcomeRecord> = (0..100_000)
        .map(|_| vec![sample_categorical(&probs, &mut rng)])
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let note = "|0> on one qubit".to_string();
    Dataset::new(Source::External { note }, PovmKind::Tetra, 4, 3, records)
        .write_jsonl(&p.join("d.jsonl"))
        .unwrap();

    ok(
        p,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--out",
            "run",
            "--epochs",
            "8",
            "--lr",
            "0.01",
            "--lr-decay-every",
            "2",
            "--lr-decay-factor",
            "0.3",
            "--batch",
            "1024",
            "--d",
            "16",
            "--L",
            "1",
        ],
    );
    let stdout = ok(
        p,
        &[
            "reconstruct",
            "--ckpt",
            "run/final.ckpt",
            "--out",
            "rho.json",
        ],
    );
    assert!(
        stdout.contains("projected trace 1.000000000000"),
        "{stdout}"
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("rho.json")).unwrap()).unwrap();
    let e = |i: usize, k: usize| v["projected"]["entries"][i][k].as_f64().unwrap();
    assert!(
        (e(0, 0) - 1.0).abs() < 1e-2 && e(3, 0).abs() < 1e-2,
        "{}",
        v["projected"]
    );
    assert!(e(1, 0).hypot(e(1, 1)) < 1e-2, "{}", v["projected"]);
}

#[test]
fn reconstruct_of_untrained_model_is_near_maximally_mixed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "gen",
            "--state",
            "ghz",
            "--n",
            "2",
            "--samples",
            "100",
            "--out",
            "d.jsonl",
        ],
    );
    ok(
        p,
        &[
            "train", "--data", "d.jsonl", "--out", "run", "--epochs", "0",
        ],
    );
    ok(
        p,
        &[
            "reconstruct",
            "--ckpt",
            "run/final.ckpt",
            "--out",
            "rho.json",
        ],
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("rho.json")).unwrap()).unwrap();
    // init_std 0.02 keeps every conditional within a few percent of 1/4
    for (i, entry) in v["raw"]["entries"].as_array().unwrap().iter().enumerate() {
        let expect = if i % 5 == 0 { 0.25 } else { 0.0 };
        assert!(
            (entry[0].as_f64().unwrap() - expect).abs() < 0.05,
            "{entry}"
        );
    }
}
