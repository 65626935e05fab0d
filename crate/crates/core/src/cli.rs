//! Command-line front end. Each subcommand is a plain function over parsed
//! arguments so tests can drive it without spawning a process.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{pretrain, FrozenBackbone, PretrainConfig, PretrainReport};
use crate::checkpoint::Checkpoint;
use crate::corpus::{generate_corpus, train_count, Corpus, CorpusConfig};
use crate::engine::{run_scenario, Method, ScenarioConfig, ScenarioRun};
use crate::gmm::ClassBank;
use crate::metrics::{metrics_csv, read_metrics_csv, subsets_csv, summary, FeatureDump, FeatureSource};
use crate::numeric::Rng;
use crate::{Error, Result};

pub const BACKBONE_FILE: &str = "backbone.rfck";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain_report.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUBSETS_FILE: &str = "subsets.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const BANK_FILE: &str = "bank.gmmb";
pub const FEATURES_FILE: &str = "features.csv";

// Stream ids under the root seed, one per subcommand.
const STREAM_PRETRAIN: u64 = 7;
const STREAM_DUMP: u64 = 11;

#[derive(Debug, Parser)]
#[command(
    name = "rffcil",
    version,
    about = "Exemplar-free class-incremental learning for RF fingerprints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic pretraining and incremental corpora.
    GenCorpus(GenCorpusArgs),
    /// Pretrain and freeze the feature extractor.
    Pretrain(PretrainArgs),
    /// Run a class-incremental scenario.
    Run(RunArgs),
    /// Dump real and sampled pseudo-features for external visualization.
    DumpFeatures(DumpArgs),
    /// Summarize a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub pretrain_classes: usize,
    #[arg(long, default_value_t = 60)]
    pub incremental_classes: usize,
    #[arg(long, default_value_t = 200)]
    pub frames_per_class: usize,
    /// Classes with fewer frames are dropped.
    #[arg(long, default_value_t = 100)]
    pub min_frames: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Held-out accuracy the extractor must reach.
    #[arg(long)]
    pub gate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's method.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    /// Directory of a finished proposed-method run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Explicit classes, comma separated. Defaults to a seeded random pick.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<u32>,
    /// Number of classes to pick when none are given.
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    /// Pseudo-features sampled per class.
    #[arg(long, default_value_t = 500)]
    pub pseudo: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(&a).map(|_| ()),
        Command::Pretrain(a) => cmd_pretrain(&a).map(|_| ()),
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::DumpFeatures(a) => cmd_dump_features(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a).map(|text| print!("{text}")),
    }
}

fn announce_seed(seed: u64) {
    println!("seed: {seed}");
}

pub fn cmd_gen_corpus(args: &GenCorpusArgs) -> Result<Corpus> {
    announce_seed(args.seed);
    let config = CorpusConfig {
        pretrain_classes: args.pretrain_classes,
        incremental_classes: args.incremental_classes,
        frames_per_class: args.frames_per_class,
        min_frames: args.min_frames,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&config, args.seed)?;
    corpus.save(&args.out)?;
    println!(
        "corpus: {} pretrain classes, {} incremental classes -> {}",
        corpus.pretrain.classes.len(),
        corpus.incremental.classes.len(),
        args.out.display()
    );
    Ok(corpus)
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<(FrozenBackbone, PretrainReport)> {
    announce_seed(args.seed);
    let corpus = Corpus::load(&args.corpus)?;
    let mut config = PretrainConfig::default();
    if let Some(e) = args.epochs {
        config.sgd.epochs = e;
    }
    if let Some(g) = args.gate {
        config.gate_accuracy = g;
    }
    let (backbone, report) = pretrain(
        &corpus.pretrain.train_pairs(),
        &corpus.pretrain.test_pairs(),
        &corpus.incremental.ids(),
        &config,
        &mut Rng::new(args.seed, STREAM_PRETRAIN),
    )?;
    fs::create_dir_all(&args.out)?;
    backbone.to_checkpoint().save(&args.out.join(BACKBONE_FILE))?;
    let text = format!(
        "classes = {}\ntrain_accuracy = {:.6}\nheldout_accuracy = {:.6}\ngate = {}\nfeature_dim = {}\nchecksum = {:016x}\n",
        report.classes,
        report.train_accuracy,
        report.heldout_accuracy,
        config.gate_accuracy,
        backbone.feature_dim(),
        backbone.checksum()
    );
    fs::write(args.out.join(PRETRAIN_REPORT_FILE), &text)?;
    print!("{text}");
    Ok((backbone, report))
}

pub fn load_backbone(path: &Path) -> Result<FrozenBackbone> {
    FrozenBackbone::from_checkpoint(&Checkpoint::load(path)?)
}

/// Config from `--config` (or defaults) with command-line overrides applied.
pub fn effective_config(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut config = match &args.config {
        Some(p) => ScenarioConfig::from_file(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(m) = args.method {
        config.method = m;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_run(args: &RunArgs) -> Result<ScenarioRun> {
    let config = effective_config(args)?;
    announce_seed(config.seed);
    let corpus = Corpus::load(&args.corpus)?;
    let backbone = load_backbone(&args.backbone)?;
    let run = run_scenario(&config, &backbone, &corpus.incremental)?;
    write_run(&run, &args.out)?;
    let (last, mean) = summary(&run.rows);
    println!("method: {}", config.method);
    print!("{}", metrics_csv(&run.rows));
    println!("A_last = {last:.6}\nA_mean = {mean:.6}");
    Ok(run)
}

/// Persist every artifact of a run under `dir`.
pub fn write_run(run: &ScenarioRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), run.config.to_text())?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(&run.rows))?;
    fs::write(dir.join(SUBSETS_FILE), subsets_csv(&run.rows))?;
    fs::write(dir.join(LEDGER_FILE), run.ledger.to_csv())?;
    let mut sched = String::from("stage,class\n");
    for (t, classes) in run.schedule.iter().enumerate() {
        for c in classes {
            let _ = writeln!(sched, "{t},{c}");
        }
    }
    fs::write(dir.join(SCHEDULE_FILE), sched)?;
    for (t, model) in run.models.iter().enumerate() {
        let mut ck = Checkpoint::default();
        model.adapter.to_checkpoint("adapter", &mut ck);
        model.classifier.to_checkpoint("classifier", &mut ck);
        ck.save(&dir.join(format!("stage_{t}.rfck")))?;
    }
    if run.config.method == Method::Proposed {
        run.bank.save(&dir.join(BANK_FILE))?;
    }
    Ok(())
}

/// Real train features and sampled pseudo-features for the chosen classes,
/// both in backbone feature space.
pub fn dump_features(
    corpus: &Corpus,
    backbone: &FrozenBackbone,
    bank: &ClassBank,
    frames_per_class: usize,
    classes: &[u32],
    pseudo_per_class: usize,
    seed: u64,
) -> Result<FeatureDump> {
    let root = Rng::new(seed, STREAM_DUMP);
    let train_len = train_count(frames_per_class, 0.7).max(1);
    let mut dump = FeatureDump::default();
    for &c in classes {
        let gmm = &bank.get(c).ok_or(Error::BankIncomplete { class: c })?.gmm;
        let frames = corpus
            .incremental
            .class(c)
            .ok_or_else(|| Error::InvalidArgument(format!("class {c} not in corpus")))?;
        let real = backbone.extract_batch(&frames.train[..frames.train.len().min(train_len)], 0)?;
        dump.push_all(&real, FeatureSource::Real);
        let pseudo = gmm.sample_features(pseudo_per_class, c, 0, &mut root.derive(c as u64));
        dump.push_all(&pseudo, FeatureSource::Pseudo);
    }
    Ok(dump)
}

/// Seeded pick of `count` classes from the bank.
pub fn pick_classes(bank: &ClassBank, count: usize, seed: u64) -> Result<Vec<u32>> {
    let mut all: Vec<u32> = bank.classes().collect();
    if count == 0 || count > all.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {count} classes from a bank of {}",
            all.len()
        )));
    }
    Rng::new(seed, STREAM_DUMP).derive(0).shuffle(&mut all);
    all.truncate(count);
    all.sort_unstable();
    Ok(all)
}

pub fn cmd_dump_features(args: &DumpArgs) -> Result<FeatureDump> {
    announce_seed(args.seed);
    let config = ScenarioConfig::from_file(&args.run.join(CONFIG_FILE))?;
    let bank = ClassBank::load(&args.run.join(BANK_FILE))?;
    let classes = if args.classes.is_empty() {
        pick_classes(&bank, args.count, args.seed)?
    } else {
        let unique: BTreeSet<u32> = args.classes.iter().copied().collect();
        if unique.len() != args.classes.len() {
            return Err(Error::InvalidArgument("duplicate class in --classes".into()));
        }
        args.classes.clone()
    };
    let corpus = Corpus::load(&args.corpus)?;
    let backbone = load_backbone(&args.backbone)?;
    let dump = dump_features(
        &corpus,
        &backbone,
        &bank,
        config.frames_per_class,
        &classes,
        args.pseudo,
        args.seed,
    )?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(FEATURES_FILE), dump.to_csv())?;
    println!(
        "features: {} rows over classes {:?} -> {}",
        dump.rows.len(),
        classes,
        args.out.join(FEATURES_FILE).display()
    );
    Ok(dump)
}

/// Headline numbers of a finished run, recomputed from its CSVs.
pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let rows = read_metrics_csv(&args.run.join(METRICS_FILE))?;
    let last = rows
        .last()
        .ok_or_else(|| Error::Format("metrics file has no rows".into()))?;
    let acc: Vec<f64> = rows.iter().map(|r| r["acc_all_seen"]).collect();
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    let total = |col: &str| rows.iter().map(|r| r[col]).sum::<f64>();
    let peak = |col: &str| rows.iter().map(|r| r[col]).fold(0.0, f64::max);
    let mut out = String::new();
    let _ = writeln!(out, "stages = {}", rows.len());
    let _ = writeln!(out, "classes_seen = {}", last["classes_seen"]);
    let _ = writeln!(out, "A_last = {:.6}", last["acc_all_seen"]);
    let _ = writeln!(out, "A_mean = {mean:.6}");
    let _ = writeln!(out, "forgetting_last = {:.6}", last["forgetting"]);
    let _ = writeln!(out, "adapter_bytes_total = {}", total("adapter_bytes"));
    let _ = writeln!(out, "gmm_bytes_total = {}", total("gmm_bytes"));
    let _ = writeln!(out, "exemplar_bytes_peak = {}", peak("exemplar_bytes"));
    let _ = writeln!(out, "wall_seconds_total = {:.3}", total("wall_seconds"));
    Ok(out)
}
