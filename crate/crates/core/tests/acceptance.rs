//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;

use rffcil::adapt::{mse_align, w2_gaussian, AdapterParams, GaussianMoments};
use rffcil::backbone::FrozenBackbone;
use rffcil::cli::{
    cmd_dump_features, cmd_gen_corpus, cmd_pretrain, load_backbone, write_run, DumpArgs, GenCorpusArgs, PretrainArgs,
    BACKBONE_FILE, FEATURES_FILE,
};
use rffcil::corpus::Corpus;
use rffcil::engine::{run_scenario, Method, ReplayBudget, ScenarioConfig, ScenarioRun};
use rffcil::gmm::{
    encode_record, fit_em, match_components, storage_bytes, DiagGmm, EmConfig, BANK_RECORD_HEADER_BYTES,
};
use rffcil::metrics::{coverage, metrics_csv, summary, FeatureDump};
use rffcil::numeric::{kl_divergence, softmax, Rng};
use rffcil::signal::{
    apply_mask_pair, generate_population, max_mask_len, random_frame_pair, sample_mask_spec, MaskSide, FRAME_LEN,
};

const SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Shared artifacts: one corpus, one pretrained backbone, and the seeded
/// desk benchmark runs.
struct Bench {
    dir: PathBuf,
    corpus: Corpus,
    backbone: FrozenBackbone,
    proposed: ScenarioRun,
    proposed_time: Duration,
    rerun: ScenarioRun,
    finetune: ScenarioRun,
    replay: ScenarioRun,
}

impl Bench {
    fn build(dir: &Path) -> Bench {
        let corpus_dir = dir.join("corpus");
        let corpus = cmd_gen_corpus(&GenCorpusArgs {
            seed: SEED,
            out: corpus_dir,
            pretrain_classes: 50,
            incremental_classes: 60,
            frames_per_class: 200,
            min_frames: 100,
        })
        .expect("corpus");
        cmd_pretrain(&PretrainArgs {
            seed: SEED,
            corpus: dir.join("corpus"),
            out: dir.join("bb"),
            epochs: None,
            gate: None,
        })
        .expect("pretrain");
        let backbone = load_backbone(&dir.join("bb").join(BACKBONE_FILE)).expect("backbone");
        let config = ScenarioConfig::default();
        let with = |method, budget| ScenarioConfig {
            method,
            replay_budget: budget,
            ..config.clone()
        };

        let t = Instant::now();
        let proposed = run_scenario(&config, &backbone, &corpus.incremental).expect("proposed run");
        let proposed_time = t.elapsed();
        let rerun = run_scenario(&config, &backbone, &corpus.incremental).expect("proposed rerun");
        let finetune = run_scenario(
            &with(Method::Finetune, config.replay_budget),
            &backbone,
            &corpus.incremental,
        )
        .expect("finetune run");
        let replay = run_scenario(
            &with(Method::ReplayOracle, ReplayBudget::Unlimited),
            &backbone,
            &corpus.incremental,
        )
        .expect("replay run");
        Bench {
            dir: dir.to_path_buf(),
            corpus,
            backbone,
            proposed,
            proposed_time,
            rerun,
            finetune,
            replay,
        }
    }
}

fn criterion_1() -> Outcome {
    let bytes = storage_bytes(2, 132, 4);
    let gmm = DiagGmm::new(vec![0.5, 0.5], vec![0.0; 264], vec![1.0; 264], 132).unwrap();
    let payload = encode_record(7, &gmm).len() - BANK_RECORD_HEADER_BYTES;
    outcome(
        bytes == 2120 && payload == 2120 && gmm.storage_bytes(4) == 2120,
        format!("storage_bytes = {bytes}, serialized payload = {payload}"),
    )
}

fn criterion_2() -> Outcome {
    const D: usize = 8;
    const N: usize = 5000;
    let (mut monotone, mut recovered, mut strict) = (0, 0, 0);
    let mut worst_drop = 0.0f64;
    for problem in 0..100u64 {
        let mut rng = Rng::new(SEED, 1000 + problem);
        let w0 = rng.uniform_range(0.3, 0.7);
        let mut means = vec![0.0; 2 * D];
        let mut vars = vec![0.0; 2 * D];
        for i in 0..D {
            means[i] = rng.uniform_range(-3.0, 3.0);
            // Second component offset by at least 2.5 in every dimension.
            let sign = if rng.bit() { 1.0 } else { -1.0 };
            means[D + i] = means[i] + sign * rng.uniform_range(2.5, 4.0);
            vars[i] = rng.uniform_range(0.5, 1.5);
            vars[D + i] = rng.uniform_range(0.5, 1.5);
        }
        let truth = DiagGmm::new(vec![w0, 1.0 - w0], means, vars, D).unwrap();
        let data = truth.sample(N, &mut rng);
        let (fit, trace) = fit_em(&data, &EmConfig::default(), &mut rng.derive(1)).unwrap();
        let drop = trace
            .log_likelihood
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::NEG_INFINITY, f64::max);
        worst_drop = worst_drop.max(drop);
        if drop <= 1e-7 {
            monotone += 1;
        }
        if fit.n_components() != 2 {
            continue;
        }
        let order = match_components(&fit, &truth);
        let ok = (0..2).all(|k| {
            let j = order[k];
            let rms = ((0..D).map(|i| (fit.mean(j)[i] - truth.mean(k)[i]).powi(2)).sum::<f64>() / D as f64).sqrt();
            rms <= 0.05 && (fit.weights()[j] - truth.weights()[k]).abs() <= 0.02
        });
        if ok {
            recovered += 1;
        }
        // Informational: every single coordinate within 0.05.
        if (0..2).all(|k| (0..D).all(|i| (fit.mean(order[k])[i] - truth.mean(k)[i]).abs() <= 0.05)) {
            strict += 1;
        }
    }
    outcome(
        monotone == 100 && recovered >= 95,
        format!("monotone {monotone}/100 (largest drop {worst_drop:.2e}), recovered {recovered}/100 (rms per dim; every coordinate within 0.05 in {strict}/100)"),
    )
}

fn criterion_3() -> Outcome {
    let g = |m: Vec<f64>, v: Vec<f64>| GaussianMoments::new(m, v).unwrap();
    let same = w2_gaussian(&g(vec![1.0, -2.0], vec![0.5, 2.0]), &g(vec![1.0, -2.0], vec![0.5, 2.0])).unwrap();
    let shift = w2_gaussian(&g(vec![0.0], vec![1.0]), &g(vec![3.0], vec![1.0])).unwrap();
    let diag = w2_gaussian(&g(vec![0.5, 0.5], vec![1.0, 1.0]), &g(vec![0.5, 0.5], vec![4.0, 4.0])).unwrap();
    let closed = same.abs() <= 1e-9 && (shift - 9.0).abs() <= 1e-9 && (diag - 2.0).abs() <= 1e-9;

    let mut rng = Rng::new(SEED, 3);
    let (mut kl_err, mut mse_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let k = 2 + rng.below(15);
        let p = softmax(&(0..k).map(|_| 3.0 * rng.normal()).collect::<Vec<_>>()).unwrap();
        let q = softmax(&(0..k).map(|_| 3.0 * rng.normal()).collect::<Vec<_>>()).unwrap();
        let direct: f64 = p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum();
        kl_err = kl_err.max((kl_divergence(&p, &q).unwrap() - direct).abs());

        let (n, d) = (1 + rng.below(20), 1 + rng.below(20));
        let mut batch = || {
            (0..n)
                .map(|_| (0..d).map(|_| rng.normal()).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        };
        let (a, b) = (batch(), batch());
        let mut total = 0.0;
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y) {
                total += (u - v) * (u - v);
            }
        }
        mse_err = mse_err.max((mse_align(&a, &b).unwrap() - total / n as f64).abs());
    }
    outcome(
        closed && kl_err <= 1e-12 && mse_err <= 1e-12,
        format!(
            "w2 = ({same:e}, {shift}, {diag}); max |kl - oracle| = {kl_err:.1e}; max |mse - oracle| = {mse_err:.1e}"
        ),
    )
}

fn criterion_4() -> Outcome {
    const TRIALS: usize = 100_000;
    let mut rng = Rng::new(SEED, 4);
    let devices = generate_population(4, 1, &mut rng).unwrap();
    let frames: Vec<_> = (0..64)
        .map(|i| random_frame_pair(&devices[i % devices.len()], (10.0, 30.0), &mut rng).unwrap())
        .collect();
    let max_k = max_mask_len(FRAME_LEN);
    let mut k_counts = vec![0usize; max_k + 1];
    let mut starts = 0usize;
    let mut violations = 0usize;
    let zero = Complex64::new(0.0, 0.0);
    for trial in 0..TRIALS {
        let pair = &frames[trial % frames.len()];
        let spec = sample_mask_spec(FRAME_LEN, &mut rng).unwrap();
        let out = apply_mask_pair(pair, &spec).unwrap();
        // Changed positions must lie inside an edge-anchored run of at most
        // `max_k` samples that is entirely zero in the output. The clean
        // reference already has exact zeros, so the changed set itself may
        // be fragmented.
        for (before, after) in [(&pair.x, &out.x), (&pair.x_hat, &out.x_hat)] {
            let changed: Vec<usize> = (0..FRAME_LEN)
                .filter(|&i| before.samples[i] != after.samples[i])
                .collect();
            let (Some(&first), Some(&last)) = (changed.first(), changed.last()) else {
                continue;
            };
            let run = if first < FRAME_LEN - 1 - last {
                0..last + 1
            } else {
                first..FRAME_LEN
            };
            if run.len() > max_k || run.clone().any(|i| after.samples[i] != zero) {
                violations += 1;
            }
        }
        if spec.length > max_k {
            violations += 1;
        } else {
            k_counts[spec.length] += 1;
        }
        if spec.side == MaskSide::Start {
            starts += 1;
        }
    }
    let expect = 1.0 / (max_k + 1) as f64;
    let k_dev = k_counts
        .iter()
        .map(|&c| (c as f64 / TRIALS as f64 - expect).abs())
        .fold(0.0, f64::max);
    let side_dev = (starts as f64 / TRIALS as f64 - 0.5).abs();
    outcome(
        violations == 0 && max_k == 18 && k_dev <= 0.01 && side_dev <= 0.01,
        format!("violations {violations}, max k {max_k}, max |freq(k) - 1/19| = {k_dev:.4}, |freq(start) - 1/2| = {side_dev:.4}"),
    )
}

fn criterion_5(b: &Bench) -> Outcome {
    let (p_last, p_mean) = summary(&b.proposed.rows);
    let (f_last, _) = summary(&b.finetune.rows);
    let (_, r_mean) = summary(&b.replay.rows);
    let p_exemplar = b.proposed.rows.iter().map(|r| r.exemplar_bytes).max().unwrap_or(0);
    let r_exemplar = b.replay.rows.iter().map(|r| r.exemplar_bytes).max().unwrap_or(0);
    let shape = b.proposed.rows.len() == 6 && b.proposed.rows.last().map(|r| r.classes_seen) == Some(60);
    let pass = shape
        && p_last >= 0.85
        && f_last <= 0.40
        && (p_mean - r_mean).abs() <= 0.05
        && p_exemplar == 0
        && r_exemplar > 1_000_000
        && b.proposed_time < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "proposed A_last {p_last:.4} A_mean {p_mean:.4}; finetune A_last {f_last:.4}; replay A_mean {r_mean:.4}; \
             exemplar bytes proposed {p_exemplar} replay {r_exemplar}; proposed run {:.1}s",
            b.proposed_time.as_secs_f64()
        ),
    )
}

fn criterion_6(b: &Bench) -> Outcome {
    let kls: Vec<f64> = b
        .proposed
        .diagnostics
        .iter()
        .skip(1)
        .filter_map(|d| d.boundary_kl)
        .collect();
    let worst = kls.iter().copied().fold(0.0, f64::max);
    outcome(
        kls.len() == b.proposed.rows.len() - 1 && worst <= 0.05,
        format!(
            "per-stage KL {:?}, max {worst:.4}",
            kls.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion_7(b: &Bench) -> Outcome {
    let mses: Vec<f64> = b
        .proposed
        .diagnostics
        .iter()
        .skip(1)
        .filter_map(|d| d.distill_heldout_mse)
        .collect();
    let worst = mses.iter().copied().fold(0.0, f64::max);
    let mut rng = Rng::new(SEED, 7);
    let identity = (0..20).all(|_| {
        let adapter = AdapterParams::new(132, &mut rng).unwrap();
        let x: Vec<f64> = (0..132).map(|_| 5.0 * rng.normal()).collect();
        adapter.forward(&x).unwrap() == x
    });
    outcome(
        mses.len() == b.proposed.rows.len() - 1 && worst <= 1e-2 && identity,
        format!(
            "per-stage held-out MSE {:?}, max {worst:.4}; identity at init {identity}",
            mses.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

/// Metrics CSV without the wall-clock column, which measures the machine
/// rather than the computation.
fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_8(b: &Bench) -> Outcome {
    let (a, c) = (metrics_csv(&b.proposed.rows), metrics_csv(&b.rerun.rows));
    let same_metrics = without_timing(&a) == without_timing(&c);
    let same_ledger = b.proposed.ledger.to_csv() == b.rerun.ledger.to_csv();
    let same_models = b.proposed.models == b.rerun.models;
    let mut bank_a = Vec::new();
    let mut bank_b = Vec::new();
    b.proposed.bank.write_to(&mut bank_a).unwrap();
    b.rerun.bank.write_to(&mut bank_b).unwrap();
    let same_bank = bank_a == bank_b;
    outcome(
        same_metrics && same_ledger && same_models && same_bank,
        format!(
            "metrics (all columns but wall_seconds) {same_metrics}, ledger {same_ledger}, models {same_models}, bank {same_bank}"
        ),
    )
}

fn criterion_9(b: &Bench) -> Outcome {
    let run_dir = b.dir.join("run");
    write_run(&b.proposed, &run_dir).unwrap();
    let out = b.dir.join("dump");
    let written = cmd_dump_features(&DumpArgs {
        seed: SEED,
        corpus: b.dir.join("corpus"),
        backbone: b.dir.join("bb").join(BACKBONE_FILE),
        run: run_dir,
        out: out.clone(),
        classes: Vec::new(),
        count: 5,
        pseudo: 500,
    })
    .unwrap();
    let dump = FeatureDump::from_csv(&fs::read_to_string(out.join(FEATURES_FILE)).unwrap()).unwrap();
    let mut pseudo_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (label, source, _) in &dump.rows {
        if source.as_str() == "pseudo" {
            *pseudo_counts.entry(*label).or_default() += 1;
        }
    }
    let cov = coverage(&dump).unwrap();
    let ratio = cov.worst_ratio();
    let dump_ok = dump.rows.len() == written.rows.len()
        && pseudo_counts.len() == 5
        && pseudo_counts.values().all(|&n| n == 500)
        && b.backbone.feature_dim() == dump.dim()
        && b.corpus.incremental.classes.len() == 60;
    outcome(
        dump_ok && ratio <= 0.5,
        format!(
            "classes {:?}, worst centroid gap / mean inter-class distance = {ratio:.4}",
            pseudo_counts.keys().collect::<Vec<_>>()
        ),
    )
}

fn report(n: usize, name: &str, o: &Outcome, failures: &mut usize) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        *failures += 1;
    }
    println!("criterion {n} [{name}]: {tag} ({})", o.detail);
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters: nothing to enumerate here.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut failures = 0;
    report(1, "GMM storage arithmetic", &criterion_1(), &mut failures);
    report(2, "EM correctness", &criterion_2(), &mut failures);
    report(3, "closed-form distances", &criterion_3(), &mut failures);
    report(4, "augmentation contract", &criterion_4(), &mut failures);

    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let bench = Bench::build(dir.path());
    println!("benchmark fixture built in {:.1}s", t.elapsed().as_secs_f64());
    report(5, "desk forgetting benchmark", &criterion_5(&bench), &mut failures);
    report(6, "boundary preservation", &criterion_6(&bench), &mut failures);
    report(7, "distillation fidelity", &criterion_7(&bench), &mut failures);
    report(8, "determinism", &criterion_8(&bench), &mut failures);
    report(9, "pseudo-feature coverage", &criterion_9(&bench), &mut failures);

    println!("acceptance: {} passed, {failures} failed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
