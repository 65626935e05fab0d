//! Scenario driver: the B{b}S{s} schedule, the per-stage loop for the
//! proposed method and both baselines, evaluation, and storage accounting.
//!
//! Proposed method, stage `t`:
//! 1. train a stage adapter and the expanded classifier on the new classes;
//! 2. fit one diagonal mixture per new class;
//! 3. distill the stage adapter and the previous teachers into a student,
//!    rehearsing old classes with pseudo-features;
//! 4. fine-tune the classifier on real and pseudo-features;
//! 5. adopt the student for inference.
//!
//! Stage 0 stops after step 2 and uses its adapter directly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::adapt::{
    accuracy, boundary_kl, distill_student, finetune_classifier, sample_pseudo, train_stage, AdapterParams,
    ClassifierParams, LogitScope, Reference, StageTeacher, TrainConfig,
};
use crate::backbone::{FeatureVector, FrozenBackbone, DEFAULT_FEATURE_DIM};
use crate::corpus::{train_count, Pool};
use crate::error::{Error, Result};
use crate::gmm::{fit_class_bank, ClassBank, EmConfig, DEFAULT_COMPONENTS};
use crate::metrics::{compute_forgetting, MetricsRow};
use crate::numeric::Rng;
use crate::signal::{apply_mask_pair, record_bytes, sample_mask_spec, FramePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Exemplar-free: mixture rehearsal plus adapter distillation.
    Proposed,
    /// Train on the current stage only.
    Finetune,
    /// Rehearse stored raw frames.
    ReplayOracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Proposed => "proposed",
            Method::Finetune => "finetune",
            Method::ReplayOracle => "replay_oracle",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "finetune" => Ok(Method::Finetune),
            "replay_oracle" | "replay" => Ok(Method::ReplayOracle),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected proposed, finetune or replay_oracle)"
            ))),
        }
    }
}

/// Exemplar memory size for the replay baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplayBudget {
    Unlimited,
    Frames(usize),
}

impl fmt::Display for ReplayBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayBudget::Unlimited => f.write_str("unlimited"),
            ReplayBudget::Frames(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub base_classes: usize,
    pub step_classes: usize,
    pub n_stages: usize,
    pub frames_per_class: usize,
    pub seed: u64,
    pub method: Method,
    pub replay_budget: ReplayBudget,
    pub train: TrainConfig,
    pub merge_teachers: bool,
    pub gmm_components: usize,
    pub feature_dim: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            base_classes: 10,
            step_classes: 10,
            n_stages: 6,
            frames_per_class: 200,
            seed: 42,
            method: Method::Proposed,
            replay_budget: ReplayBudget::Frames(2000),
            train: TrainConfig::default(),
            merge_teachers: true,
            gmm_components: DEFAULT_COMPONENTS,
            feature_dim: DEFAULT_FEATURE_DIM,
        }
    }
}

pub const CONFIG_KEYS: [&str; 17] = [
    "base_classes",
    "step_classes",
    "n_stages",
    "frames_per_class",
    "seed",
    "method",
    "replay_budget",
    "learning_rate",
    "epochs",
    "batch_size",
    "lambda_w2",
    "lambda_kl",
    "temperature",
    "adapter_lr_scale",
    "merge_teachers",
    "gmm_components",
    "feature_dim",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ScenarioConfig {
    /// Parse `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ScenarioConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "base_classes" => self.base_classes = parse_value(key, value)?,
            "step_classes" => self.step_classes = parse_value(key, value)?,
            "n_stages" => self.n_stages = parse_value(key, value)?,
            "frames_per_class" => self.frames_per_class = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "method" => self.method = value.parse()?,
            "replay_budget" => {
                self.replay_budget = if value == "unlimited" {
                    ReplayBudget::Unlimited
                } else {
                    ReplayBudget::Frames(parse_value(key, value)?)
                }
            }
            "learning_rate" => self.train.sgd.learning_rate = parse_value(key, value)?,
            "epochs" => self.train.sgd.epochs = parse_value(key, value)?,
            "batch_size" => self.train.sgd.batch_size = parse_value(key, value)?,
            "lambda_w2" => self.train.lambda_w2 = parse_value(key, value)?,
            "adapter_lr_scale" => self.train.adapter_lr_scale = parse_value(key, value)?,
            "lambda_kl" => self.train.lambda_kl = parse_value(key, value)?,
            "temperature" => self.train.temperature = parse_value(key, value)?,
            "merge_teachers" => self.merge_teachers = parse_value(key, value)?,
            "gmm_components" => self.gmm_components = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::Config("n_stages must be at least 1".into()));
        }
        if self.base_classes == 0 {
            return Err(Error::Config("base_classes must be at least 1".into()));
        }
        if self.n_stages > 1 && self.step_classes == 0 {
            return Err(Error::Config("step_classes must be at least 1".into()));
        }
        if self.frames_per_class < 2 {
            return Err(Error::Config("frames_per_class must be at least 2".into()));
        }
        if self.gmm_components == 0 {
            return Err(Error::Config("gmm_components must be at least 1".into()));
        }
        if let ReplayBudget::Frames(0) = self.replay_budget {
            if self.method == Method::ReplayOracle {
                return Err(Error::Config("replay_budget must be positive".into()));
            }
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Total classes the schedule introduces: `b + (T − 1)·s`.
    pub fn total_classes(&self) -> usize {
        self.base_classes + (self.n_stages - 1) * self.step_classes
    }

    /// Canonical `key = value` text; parses back to the same config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        format!(
            "base_classes = {}\nstep_classes = {}\nn_stages = {}\nframes_per_class = {}\nseed = {}\nmethod = {}\n\
             replay_budget = {}\nlearning_rate = {}\nepochs = {}\nbatch_size = {}\nlambda_w2 = {}\nlambda_kl = {}\n\
             temperature = {}\nadapter_lr_scale = {}\nmerge_teachers = {}\ngmm_components = {}\nfeature_dim = {}\n",
            self.base_classes,
            self.step_classes,
            self.n_stages,
            self.frames_per_class,
            self.seed,
            self.method,
            self.replay_budget,
            t.sgd.learning_rate,
            t.sgd.epochs,
            t.sgd.batch_size,
            t.lambda_w2,
            t.lambda_kl,
            t.temperature,
            t.adapter_lr_scale,
            self.merge_teachers,
            self.gmm_components,
            self.feature_dim
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One access to raw frames through the scenario's loader.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRead {
    pub stage: usize,
    pub class: u32,
    pub split: Split,
    pub frames: usize,
}

/// Every raw-frame access goes through here and is logged.
struct FrameLoader<'a> {
    pool: &'a Pool,
    train_len: usize,
    test_len: usize,
    reads: Vec<FrameRead>,
}

impl<'a> FrameLoader<'a> {
    fn new(pool: &'a Pool, frames_per_class: usize) -> Self {
        let train_len = train_count(frames_per_class, 0.7).max(1);
        Self {
            pool,
            train_len,
            test_len: frames_per_class.saturating_sub(train_len).max(1),
            reads: Vec::new(),
        }
    }

    fn read(&mut self, stage: usize, class: u32, split: Split) -> Result<&'a [FramePair]> {
        let c = self
            .pool
            .class(class)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class} not in corpus")))?;
        let frames = match split {
            Split::Train => &c.train[..c.train.len().min(self.train_len)],
            Split::Test => &c.test[..c.test.len().min(self.test_len)],
        };
        self.reads.push(FrameRead {
            stage,
            class,
            split,
            frames: frames.len(),
        });
        Ok(frames)
    }
}

/// Storage attributed to one stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LedgerEntry {
    pub stage: usize,
    /// Adapter stored by this stage.
    pub adapter_bytes: usize,
    /// Mixtures added by this stage.
    pub gmm_bytes: usize,
    /// Exemplar memory held after this stage.
    pub exemplar_bytes: usize,
    /// Inference adapter plus classifier after this stage.
    pub model_bytes: usize,
    /// Adapters and mixtures stored so far plus current exemplar memory.
    pub cumulative_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StorageLedger {
    pub entries: Vec<LedgerEntry>,
}

impl StorageLedger {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,adapter_bytes,gmm_bytes,exemplar_bytes,model_bytes,cumulative_bytes\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.stage, e.adapter_bytes, e.gmm_bytes, e.exemplar_bytes, e.model_bytes, e.cumulative_bytes
            ));
        }
        out
    }

    pub fn total_adapter_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.adapter_bytes).sum()
    }

    pub fn total_gmm_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.gmm_bytes).sum()
    }

    pub fn peak_exemplar_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.exemplar_bytes).max().unwrap_or(0)
    }
}

/// Diagnostics beyond the metrics CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageDiagnostics {
    pub stage: usize,
    pub train_loss: Vec<f64>,
    /// Accuracy of the stage adapter and classifier on the stage's own
    /// training features, right after stage training.
    pub train_accuracy: f64,
    pub distill_initial_loss: Option<f64>,
    pub distill_loss: Vec<f64>,
    /// Student versus routed teachers on fresh pseudo-features.
    pub distill_heldout_mse: Option<f64>,
    pub finetune_loss: Vec<f64>,
    pub min_pseudo_accuracy: Option<f64>,
    /// Mean posterior KL between the previous and current model on fresh
    /// pseudo-features of old classes.
    pub boundary_kl: Option<f64>,
    /// Classes whose mixture fit converged before the iteration cap.
    pub gmm_converged: usize,
    pub gmm_fitted: usize,
}

/// The trained inference model after one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageModel {
    pub adapter: AdapterParams,
    pub classifier: ClassifierParams,
}

#[derive(Clone, Debug)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    /// Classes introduced at each stage.
    pub schedule: Vec<Vec<u32>>,
    pub rows: Vec<MetricsRow>,
    pub diagnostics: Vec<StageDiagnostics>,
    pub ledger: StorageLedger,
    pub frame_reads: Vec<FrameRead>,
    pub models: Vec<StageModel>,
    pub bank: ClassBank,
}

impl ScenarioRun {
    /// Stage at which `class` was introduced.
    pub fn stage_of(&self, class: u32) -> Option<usize> {
        self.schedule.iter().position(|s| s.contains(&class))
    }

    /// Raw training frames of classes from earlier stages read during
    /// training at a later stage.
    pub fn old_train_reads(&self) -> usize {
        self.frame_reads
            .iter()
            .filter(|r| r.split == Split::Train && self.stage_of(r.class).is_some_and(|s| s < r.stage))
            .map(|r| r.frames)
            .sum()
    }
}

/// Storage summary of a finished run.
pub fn ledger_report(run: &ScenarioRun) -> &StorageLedger {
    &run.ledger
}

/// State visible to an observer after each stage.
pub struct StageView<'a> {
    pub stage: usize,
    pub model: &'a StageModel,
    pub bank: &'a ClassBank,
}

const TAG_ORDER: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_STAGE: u64 = 100;

/// Seeded class order over the pool, cut to the schedule.
pub fn schedule(config: &ScenarioConfig, pool: &Pool) -> Result<Vec<Vec<u32>>> {
    config.validate()?;
    let needed = config.total_classes();
    let available = pool.classes.len();
    if needed > available {
        return Err(Error::ClassBudget { needed, available });
    }
    let mut ids: Vec<u32> = pool.classes.iter().map(|c| c.device_id).collect();
    Rng::new(config.seed, 0).derive(TAG_ORDER).shuffle(&mut ids);
    let mut out = vec![ids[..config.base_classes].to_vec()];
    for t in 1..config.n_stages {
        let start = config.base_classes + (t - 1) * config.step_classes;
        out.push(ids[start..start + config.step_classes].to_vec());
    }
    Ok(out)
}

/// Real features of `frames` plus one randomly masked copy of each.
fn augmented_features(
    backbone: &FrozenBackbone,
    frames: &[FramePair],
    stage: usize,
    rng: &mut Rng,
) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    let masked = frames
        .iter()
        .map(|p| {
            let spec = sample_mask_spec(p.x.len(), rng)?;
            apply_mask_pair(p, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        backbone.extract_batch(frames, stage)?,
        backbone.extract_batch(&masked, stage)?,
    ))
}

/// Exemplar memory of the replay baseline: raw frames per class, each list
/// in a random order fixed when the class was learned.
#[derive(Default)]
struct ExemplarMemory {
    frames: BTreeMap<u32, Vec<FramePair>>,
}

impl ExemplarMemory {
    fn shrink_to(&mut self, budget: ReplayBudget) {
        if let ReplayBudget::Frames(b) = budget {
            let quota = b / self.frames.len().max(1);
            for v in self.frames.values_mut() {
                v.truncate(quota);
            }
        }
    }

    fn bytes(&self) -> usize {
        self.frames.values().flatten().map(|p| record_bytes(p.x.len())).sum()
    }
}

fn evaluate(
    model: &StageModel,
    test: &BTreeMap<u32, Vec<FeatureVector>>,
    schedule: &[Vec<u32>],
    stage: usize,
) -> Result<(f64, Vec<f64>, Vec<usize>)> {
    let mut subset_acc = Vec::with_capacity(stage + 1);
    let mut subset_n = Vec::with_capacity(stage + 1);
    let (mut correct, mut total) = (0.0, 0usize);
    for classes in &schedule[..=stage] {
        let feats: Vec<FeatureVector> = classes.iter().flat_map(|c| test[c].iter().cloned()).collect();
        let acc = accuracy(&model.adapter, &model.classifier, &feats)?;
        correct += acc * feats.len() as f64;
        total += feats.len();
        subset_acc.push(acc);
        subset_n.push(feats.len());
    }
    Ok((correct / total.max(1) as f64, subset_acc, subset_n))
}

fn group_by_class(feats: &[FeatureVector]) -> BTreeMap<u32, Vec<FeatureVector>> {
    let mut g: BTreeMap<u32, Vec<FeatureVector>> = BTreeMap::new();
    for f in feats {
        g.entry(f.label).or_default().push(f.clone());
    }
    g
}

/// Run one scenario end to end.
pub fn run_scenario(config: &ScenarioConfig, backbone: &FrozenBackbone, pool: &Pool) -> Result<ScenarioRun> {
    run_scenario_observed(config, backbone, pool, &mut |_| {})
}

/// Naive fine-tuning baseline: `config` with the method forced.
pub fn baseline_finetune(config: &ScenarioConfig, backbone: &FrozenBackbone, pool: &Pool) -> Result<ScenarioRun> {
    let c = ScenarioConfig {
        method: Method::Finetune,
        ..config.clone()
    };
    run_scenario(&c, backbone, pool)
}

/// Exemplar replay baseline: `config` with the method forced.
pub fn baseline_replay(config: &ScenarioConfig, backbone: &FrozenBackbone, pool: &Pool) -> Result<ScenarioRun> {
    let c = ScenarioConfig {
        method: Method::ReplayOracle,
        ..config.clone()
    };
    run_scenario(&c, backbone, pool)
}

/// [`run_scenario`] with a callback after every stage.
pub fn run_scenario_observed(
    config: &ScenarioConfig,
    backbone: &FrozenBackbone,
    pool: &Pool,
    observer: &mut dyn FnMut(&StageView<'_>),
) -> Result<ScenarioRun> {
    config.validate()?;
    if backbone.feature_dim() != config.feature_dim {
        return Err(Error::Config(format!(
            "feature_dim {} does not match the backbone's {}",
            config.feature_dim,
            backbone.feature_dim()
        )));
    }
    let sched = schedule(config, pool)?;
    if let (Method::ReplayOracle, ReplayBudget::Frames(b)) = (config.method, config.replay_budget) {
        if b < config.total_classes() {
            return Err(Error::Config(format!(
                "replay_budget {b} cannot hold one exemplar for each of {} classes",
                config.total_classes()
            )));
        }
    }

    let root = Rng::new(config.seed, 0);
    let aug_root = root.derive(TAG_AUGMENT);
    let em = EmConfig {
        n_components: config.gmm_components,
        ..EmConfig::default()
    };
    let dim = config.feature_dim;
    let mut loader = FrameLoader::new(pool, config.frames_per_class);
    let mut test_feats: BTreeMap<u32, Vec<FeatureVector>> = BTreeMap::new();
    let mut bank = ClassBank::default();
    let mut memory = ExemplarMemory::default();
    let mut teachers: Vec<StageTeacher> = Vec::new();
    let mut models: Vec<StageModel> = Vec::new();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut ledger = StorageLedger::default();
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut cumulative = 0usize;

    for (t, new_classes) in sched.iter().enumerate() {
        let started = Instant::now();
        let srng = root.derive(TAG_STAGE + t as u64);
        let mut diag = StageDiagnostics {
            stage: t,
            ..StageDiagnostics::default()
        };

        // Current-stage data: the only raw training frames read this stage,
        // apart from the replay baseline's own exemplar memory.
        let mut real = Vec::new();
        let mut train = Vec::new();
        for &c in new_classes {
            let frames = loader.read(t, c, Split::Train)?;
            let (r, m) = augmented_features(backbone, frames, t, &mut aug_root.derive(c as u64))?;
            train.extend(r.iter().cloned());
            train.extend(m);
            real.extend(r);
            let tf = loader.read(t, c, Split::Test)?;
            test_feats.insert(c, backbone.extract_batch(tf, t)?);
            if config.method == Method::ReplayOracle {
                let mut keep = frames.to_vec();
                srng.derive(7).derive(c as u64).shuffle(&mut keep);
                memory.frames.insert(c, keep);
            }
        }
        let old_classes: Vec<u32> = sched[..t].iter().flatten().copied().collect();

        let previous = models.last().cloned();
        let (mut adapter, mut classifier) = match &previous {
            None => (
                AdapterParams::new(dim, &mut srng.derive(0))?,
                ClassifierParams::new(dim, new_classes, &mut srng.derive(1))?,
            ),
            Some(m) => {
                let mut c = m.classifier.clone();
                c.expand(new_classes, &mut srng.derive(1))?;
                c.weight_align(old_classes.len());
                (m.adapter.clone(), c)
            }
        };

        let (scope, stage_data) = match config.method {
            Method::Proposed => (LogitScope::StageClasses, train.clone()),
            Method::Finetune => (LogitScope::AllClasses, train.clone()),
            Method::ReplayOracle => {
                memory.shrink_to(config.replay_budget);
                let mut data = train.clone();
                for &c in &old_classes {
                    let (r, m) =
                        augmented_features(backbone, &memory.frames[&c], t, &mut srng.derive(8).derive(c as u64))?;
                    data.extend(r);
                    data.extend(m);
                }
                (LogitScope::AllClasses, data)
            }
        };
        let report = train_stage(
            &stage_data,
            &mut adapter,
            &mut classifier,
            &config.train,
            scope,
            &mut srng.derive(2),
        )?;
        diag.train_loss = report.epoch_loss;
        diag.train_accuracy = accuracy(&adapter, &classifier, &train)?;

        let mut adapter_bytes = 0;
        let mut gmm_bytes = 0;
        let model = if config.method == Method::Proposed {
            let fitted = fit_class_bank(&group_by_class(&real), &em, t, &srng.derive(3))?;
            gmm_bytes = fitted.storage_bytes(4);
            diag.gmm_fitted = fitted.len();
            diag.gmm_converged = fitted.iter().filter(|(_, e)| e.trace.converged).count();
            bank.absorb(fitted)?;
            adapter_bytes = adapter.payload_bytes();

            match &previous {
                None => {
                    teachers.push(StageTeacher {
                        adapter: adapter.clone(),
                        stages: [0].into(),
                    });
                    StageModel { adapter, classifier }
                }
                Some(prev) => {
                    teachers.push(StageTeacher {
                        adapter: adapter.clone(),
                        stages: [t].into(),
                    });
                    let mut student = prev.adapter.clone();
                    let dr = distill_student(
                        &teachers,
                        &mut student,
                        &bank,
                        &old_classes,
                        &train,
                        t,
                        &config.train,
                        &mut srng.derive(4),
                    )?;
                    diag.distill_initial_loss = Some(dr.initial_loss);
                    diag.distill_loss = dr.epoch_loss;
                    diag.distill_heldout_mse = Some(dr.heldout_mse);

                    let reference = Reference {
                        adapter: &prev.adapter,
                        classifier: &prev.classifier,
                    };
                    let fr = finetune_classifier(
                        &mut classifier,
                        &student,
                        Some(&reference),
                        &bank,
                        &old_classes,
                        &train,
                        &config.train,
                        &mut srng.derive(5),
                    )?;
                    diag.finetune_loss = fr.epoch_loss;
                    diag.min_pseudo_accuracy = fr.pseudo_accuracy.values().copied().reduce(f64::min);
                    let probe = sample_pseudo(&bank, &old_classes, 50, &srng.derive(6))?;
                    diag.boundary_kl = Some(boundary_kl(&reference, &student, &classifier, &probe)?);

                    if config.merge_teachers {
                        teachers = vec![StageTeacher {
                            adapter: student.clone(),
                            stages: (0..=t).collect(),
                        }];
                    }
                    StageModel {
                        adapter: student,
                        classifier,
                    }
                }
            }
        } else {
            StageModel { adapter, classifier }
        };

        let (acc_all, subset_acc, subset_n) = evaluate(&model, &test_feats, &sched, t)?;
        history.push(subset_acc.clone());
        let forgetting = *compute_forgetting(&history)?.last().expect("non-empty history");
        let exemplar_bytes = memory.bytes();
        cumulative += adapter_bytes + gmm_bytes;
        ledger.entries.push(LedgerEntry {
            stage: t,
            adapter_bytes,
            gmm_bytes,
            exemplar_bytes,
            model_bytes: model.adapter.payload_bytes() + model.classifier.payload_bytes(),
            cumulative_bytes: cumulative + exemplar_bytes,
        });
        log::info!(
            "{} stage {t}: {} classes, acc {:.4}, forgetting {:.4}",
            config.method,
            model.classifier.n_classes(),
            acc_all,
            forgetting
        );
        rows.push(MetricsRow {
            stage: t,
            classes_seen: model.classifier.n_classes(),
            acc_all_seen: acc_all,
            subset_accuracy: subset_acc,
            subset_samples: subset_n,
            forgetting,
            adapter_bytes,
            gmm_bytes,
            exemplar_bytes,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        diagnostics.push(diag);
        observer(&StageView {
            stage: t,
            model: &model,
            bank: &bank,
        });
        models.push(model);
    }

    Ok(ScenarioRun {
        config: config.clone(),
        schedule: sched,
        rows,
        diagnostics,
        ledger,
        frame_reads: loader.reads,
        models,
        bank,
    })
}
