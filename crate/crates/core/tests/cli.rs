//! End-to-end runs of the command-line front end on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

use rffcil::cli::{
    cmd_gen_corpus, cmd_pretrain, cmd_report, cmd_run, GenCorpusArgs, PretrainArgs, ReportArgs, RunArgs, BACKBONE_FILE,
    FEATURES_FILE, METRICS_FILE,
};
use rffcil::corpus::Corpus;
use rffcil::engine::{Method, CONFIG_KEYS};
use rffcil::metrics::{FeatureDump, FeatureSource, METRICS_COLUMNS};

const SMALL_CONFIG: &str =
    "base_classes = 2\nstep_classes = 2\nn_stages = 3\nframes_per_class = 40\nepochs = 3\nbatch_size = 16\n";

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn corpus(&self) -> std::path::PathBuf {
        self.dir.path().join("corpus")
    }
    fn backbone(&self) -> std::path::PathBuf {
        self.dir.path().join("bb").join(BACKBONE_FILE)
    }
    fn config(&self) -> std::path::PathBuf {
        self.dir.path().join("small.txt")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        cmd_gen_corpus(&GenCorpusArgs {
            seed: 3,
            out: f.corpus(),
            pretrain_classes: 4,
            incremental_classes: 6,
            frames_per_class: 40,
            min_frames: 20,
        })
        .unwrap();
        cmd_pretrain(&PretrainArgs {
            seed: 3,
            corpus: f.corpus(),
            out: f.dir.path().join("bb"),
            epochs: Some(2),
            gate: Some(0.0),
        })
        .unwrap();
        fs::write(f.config(), SMALL_CONFIG).unwrap();
        f
    })
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rffcil")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_args(f: &Fixture, out: &Path, method: Option<Method>) -> RunArgs {
    RunArgs {
        config: Some(f.config()),
        seed: None,
        method,
        corpus: f.corpus(),
        backbone: f.backbone(),
        out: out.to_path_buf(),
    }
}

#[test]
fn corpus_generation_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = bin(&[
            "gen-corpus",
            "--seed",
            "9",
            "--out",
            s(&dir.path().join(name)),
            "--pretrain-classes",
            "2",
            "--incremental-classes",
            "3",
        ]);
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("seed: 9"));
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(
            fs::read(dir.path().join("a").join(&n)).unwrap(),
            fs::read(dir.path().join("b").join(&n)).unwrap()
        );
    }
    let corpus = Corpus::load(&dir.path().join("a")).unwrap();
    assert!(corpus.pretrain.ids().is_disjoint(&corpus.incremental.ids()));
    for c in &corpus.incremental.classes {
        assert_eq!((c.train.len(), c.test.len()), (140, 60));
    }
}

#[test]
fn run_writes_every_artifact_and_reports() {
    let f = fixture();
    let out = f.dir.path().join("run_proposed");
    let run = cmd_run(&run_args(f, &out, None)).unwrap();
    assert_eq!(run.rows.len(), 3);
    for name in [
        "metrics.csv",
        "subsets.csv",
        "ledger.csv",
        "schedule.csv",
        "config.txt",
        "bank.gmmb",
        "stage_0.rfck",
        "stage_2.rfck",
    ] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    let config = fs::read_to_string(out.join("config.txt")).unwrap();
    assert_eq!(config.lines().count(), CONFIG_KEYS.len());

    let report = cmd_report(&ReportArgs { run: out.clone() }).unwrap();
    let mean = run.rows.iter().map(|r| r.acc_all_seen).sum::<f64>() / 3.0;
    assert!(report.contains(&format!("A_mean = {mean:.6}")), "{report}");
    assert!(report.contains("exemplar_bytes_peak = 0"));

    // Accuracy over all seen classes is the sample-weighted subset mean.
    for r in &run.rows {
        let n: usize = r.subset_samples.iter().sum();
        let weighted: f64 = r
            .subset_accuracy
            .iter()
            .zip(&r.subset_samples)
            .map(|(a, &k)| a * k as f64)
            .sum::<f64>()
            / n as f64;
        assert!((weighted - r.acc_all_seen).abs() < 1e-12);
    }
    // Exemplar-free: nothing from earlier stages' raw training frames is read again.
    assert_eq!(run.old_train_reads(), 0);
}

#[test]
fn dump_features_tags_sources_and_counts() {
    let f = fixture();
    let run_dir = f.dir.path().join("run_dump");
    cmd_run(&run_args(f, &run_dir, None)).unwrap();
    let out = f.dir.path().join("dump");
    let o = bin(&[
        "dump-features",
        "--corpus",
        s(&f.corpus()),
        "--backbone",
        s(&f.backbone()),
        "--run",
        s(&run_dir),
        "--out",
        s(&out),
        "--count",
        "3",
        "--pseudo",
        "50",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = FeatureDump::from_csv(&fs::read_to_string(out.join(FEATURES_FILE)).unwrap()).unwrap();
    let labels: std::collections::BTreeSet<u32> = dump.rows.iter().map(|r| r.0).collect();
    assert_eq!(labels.len(), 3);
    for l in labels {
        let pseudo = dump
            .rows
            .iter()
            .filter(|r| r.0 == l && r.1 == FeatureSource::Pseudo)
            .count();
        let real = dump
            .rows
            .iter()
            .filter(|r| r.0 == l && r.1 == FeatureSource::Real)
            .count();
        assert_eq!(pseudo, 50);
        assert_eq!(real, 28);
    }
    assert_eq!(
        fs::read_to_string(out.join(FEATURES_FILE))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .split(',')
            .count(),
        132 + 2
    );

    let bad = bin(&[
        "dump-features",
        "--corpus",
        s(&f.corpus()),
        "--backbone",
        s(&f.backbone()),
        "--run",
        s(&run_dir),
        "--out",
        s(&out),
        "--classes",
        "123456",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("123456"));
}

#[test]
fn finetune_shares_the_first_stage_with_proposed() {
    let f = fixture();
    let p = cmd_run(&run_args(f, &f.dir.path().join("p0"), Some(Method::Proposed))).unwrap();
    let ft = cmd_run(&run_args(f, &f.dir.path().join("f0"), Some(Method::Finetune))).unwrap();
    assert_eq!(p.rows[0].acc_all_seen, ft.rows[0].acc_all_seen);
    assert_eq!(p.rows[0].subset_accuracy, ft.rows[0].subset_accuracy);
    assert_eq!(p.models[0], ft.models[0]);
    assert!(!f.dir.path().join("f0").join("bank.gmmb").exists());
}

#[test]
fn exit_codes_follow_error_kinds() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());

    let bad_cfg = tmp.path().join("bad.txt");
    fs::write(&bad_cfg, "n_stages = zero\n").unwrap();
    let o = bin(&[
        "run",
        "--config",
        s(&bad_cfg),
        "--corpus",
        s(&f.corpus()),
        "--backbone",
        s(&f.backbone()),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config error"));

    // Schedule larger than the pool.
    let big = tmp.path().join("big.txt");
    fs::write(&big, "base_classes = 5\nstep_classes = 5\nn_stages = 2\n").unwrap();
    let o = bin(&[
        "run",
        "--config",
        s(&big),
        "--corpus",
        s(&f.corpus()),
        "--backbone",
        s(&f.backbone()),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = bin(&[
        "run",
        "--method",
        "ewc",
        "--corpus",
        s(&f.corpus()),
        "--backbone",
        s(&f.backbone()),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = bin(&[
        "pretrain",
        "--corpus",
        s(&f.corpus()),
        "--out",
        out,
        "--epochs",
        "1",
        "--gate",
        "1.01",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("underfit"));

    let o = bin(&[
        "run",
        "--corpus",
        s(&tmp.path().join("missing")),
        "--backbone",
        s(&f.backbone()),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(4));
    let o = bin(&["report", "--run", s(&tmp.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn seed_override_is_announced_and_recorded() {
    let f = fixture();
    let out = f.dir.path().join("seeded");
    let o = bin(&[
        "run",
        "--config",
        s(&f.config()),
        "--seed",
        "17",
        "--corpus",
        s(&f.corpus()),
        "--backbone",
        s(&f.backbone()),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("seed: 17\n"));
    assert!(fs::read_to_string(out.join("config.txt"))
        .unwrap()
        .contains("seed = 17"));
}
