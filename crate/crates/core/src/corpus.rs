//! Pretraining and incremental corpora: generation, 70/30 splits, and the
//! on-disk directory layout.
//!
//! A corpus directory holds, per pool (`pretrain`, `incremental`):
//! `<pool>.manifest` (one profile per line), and for each split
//! `<pool>_<split>.rffc` with the impaired frames and
//! `<pool>_<split>_ref.rffc` with the matching reconstructions, record for
//! record.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::Rng;
use crate::signal::{
    generate_population_with, manifest_line, parse_manifest_line, random_frame_pair, read_record, write_record,
    DeviceProfile, FramePair, DEFAULT_MIN_SEPARATION, DEFAULT_SNR_DB, MANIFEST_HEADER,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub pretrain_classes: usize,
    pub incremental_classes: usize,
    pub frames_per_class: usize,
    pub train_fraction: f64,
    /// Classes with fewer generated frames than this are dropped.
    pub min_frames: usize,
    /// Per-device frame counts are drawn from
    /// `[frames_per_class·(1 − jitter), frames_per_class]`.
    pub frame_count_jitter: f64,
    pub pretrain_first_id: u32,
    pub incremental_first_id: u32,
    pub snr_db: (f64, f64),
    pub min_separation: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pretrain_classes: 50,
            incremental_classes: 60,
            frames_per_class: 200,
            train_fraction: 0.7,
            min_frames: 100,
            frame_count_jitter: 0.0,
            pretrain_first_id: 0,
            incremental_first_id: 100_000,
            snr_db: DEFAULT_SNR_DB,
            min_separation: DEFAULT_MIN_SEPARATION,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassFrames {
    pub device_id: u32,
    pub train: Vec<FramePair>,
    pub test: Vec<FramePair>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub profiles: Vec<DeviceProfile>,
    /// Ascending device id.
    pub classes: Vec<ClassFrames>,
}

impl Pool {
    pub fn ids(&self) -> BTreeSet<u32> {
        self.classes.iter().map(|c| c.device_id).collect()
    }

    pub fn class(&self, id: u32) -> Option<&ClassFrames> {
        self.classes.iter().find(|c| c.device_id == id)
    }

    pub fn train_pairs(&self) -> Vec<FramePair> {
        self.classes.iter().flat_map(|c| c.train.iter().cloned()).collect()
    }

    pub fn test_pairs(&self) -> Vec<FramePair> {
        self.classes.iter().flat_map(|c| c.test.iter().cloned()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub pretrain: Pool,
    pub incremental: Pool,
}

/// Train count for a class of `n` frames.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64) * train_fraction).round() as usize
}

fn ranges_overlap(a: u32, n_a: usize, b: u32, n_b: usize) -> bool {
    let (a0, a1) = (a as u64, a as u64 + n_a as u64);
    let (b0, b1) = (b as u64, b as u64 + n_b as u64);
    a0 < b1 && b0 < a1
}

fn generate_pool(profiles: Vec<DeviceProfile>, config: &CorpusConfig, root: &Rng) -> Result<Pool> {
    let classes: Vec<Option<ClassFrames>> = profiles
        .par_iter()
        .map(|p| {
            let mut rng = root.derive(p.device_id as u64);
            let lo = (config.frames_per_class as f64 * (1.0 - config.frame_count_jitter)).ceil() as usize;
            let n = if lo >= config.frames_per_class {
                config.frames_per_class
            } else {
                lo + rng.below(config.frames_per_class - lo + 1)
            };
            if n < config.min_frames || n == 0 {
                return Ok(None);
            }
            let mut frames = (0..n)
                .map(|_| random_frame_pair(p, config.snr_db, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let test = frames.split_off(train_count(n, config.train_fraction));
            Ok(Some(ClassFrames {
                device_id: p.device_id,
                train: frames,
                test,
            }))
        })
        .collect::<Result<_>>()?;
    let classes: Vec<ClassFrames> = classes.into_iter().flatten().collect();
    let kept: BTreeSet<u32> = classes.iter().map(|c| c.device_id).collect();
    let dropped = profiles.len() - kept.len();
    if dropped > 0 {
        log::info!("dropped {dropped} classes below {} frames", config.min_frames);
    }
    Ok(Pool {
        profiles: profiles.into_iter().filter(|p| kept.contains(&p.device_id)).collect(),
        classes,
    })
}

pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if ranges_overlap(
        config.pretrain_first_id,
        config.pretrain_classes,
        config.incremental_first_id,
        config.incremental_classes,
    ) {
        return Err(Error::InvalidArgument(
            "pretrain and incremental device id ranges overlap".into(),
        ));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {} must be in (0, 1)",
            config.train_fraction
        )));
    }
    if !(0.0..1.0).contains(&config.frame_count_jitter) {
        return Err(Error::InvalidArgument("frame count jitter must be in [0, 1)".into()));
    }
    let root = Rng::new(seed, 0x636f_7270);
    // Both pools are drawn from one population so the separation guarantee
    // holds across them.
    let total = config.pretrain_classes + config.incremental_classes;
    let mut all = generate_population_with(total, 0, config.min_separation, &mut root.derive(0))?;
    let mut incremental = all.split_off(config.pretrain_classes);
    for (i, p) in all.iter_mut().enumerate() {
        p.device_id = config.pretrain_first_id + i as u32;
    }
    for (i, p) in incremental.iter_mut().enumerate() {
        p.device_id = config.incremental_first_id + i as u32;
    }
    Ok(Corpus {
        pretrain: generate_pool(all, config, &root.derive(1))?,
        incremental: generate_pool(incremental, config, &root.derive(2))?,
    })
}

fn write_frames(path: &Path, frames: impl Iterator<Item = crate::signal::SignalFrame>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in frames {
        write_record(&mut w, &f)?;
    }
    w.flush()?;
    Ok(())
}

fn read_frames(path: &Path) -> Result<Vec<crate::signal::SignalFrame>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(f) = read_record(&mut r)? {
        out.push(f);
    }
    Ok(out)
}

fn save_pool(dir: &Path, name: &str, pool: &Pool) -> Result<()> {
    let mut m = BufWriter::new(File::create(dir.join(format!("{name}.manifest")))?);
    writeln!(m, "{MANIFEST_HEADER}")?;
    for p in &pool.profiles {
        writeln!(m, "{}", manifest_line(p))?;
    }
    m.flush()?;
    for split in ["train", "test"] {
        let pairs = || {
            pool.classes.iter().flat_map(move |c| {
                if split == "train" {
                    c.train.iter()
                } else {
                    c.test.iter()
                }
            })
        };
        write_frames(&dir.join(format!("{name}_{split}.rffc")), pairs().map(|p| p.x.clone()))?;
        write_frames(
            &dir.join(format!("{name}_{split}_ref.rffc")),
            pairs().map(|p| p.x_hat.clone()),
        )?;
    }
    Ok(())
}

fn load_pool(dir: &Path, name: &str) -> Result<Pool> {
    let manifest = BufReader::new(File::open(dir.join(format!("{name}.manifest")))?);
    let mut profiles = Vec::new();
    for line in manifest.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        profiles.push(parse_manifest_line(line)?);
    }
    let mut classes: Vec<ClassFrames> = profiles
        .iter()
        .map(|p| ClassFrames {
            device_id: p.device_id,
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for split in ["train", "test"] {
        let xs = read_frames(&dir.join(format!("{name}_{split}.rffc")))?;
        let hats = read_frames(&dir.join(format!("{name}_{split}_ref.rffc")))?;
        if xs.len() != hats.len() {
            return Err(Error::Format(format!(
                "{name}_{split}: {} frames but {} reconstructions",
                xs.len(),
                hats.len()
            )));
        }
        for (x, x_hat) in xs.into_iter().zip(hats) {
            let class = classes
                .iter_mut()
                .find(|c| c.device_id == x.device_id)
                .ok_or_else(|| Error::Format(format!("frame for unknown device {}", x.device_id)))?;
            let mut x_hat = x_hat;
            x_hat.snr_db = f64::INFINITY;
            let pair = FramePair { x, x_hat };
            if split == "train" {
                class.train.push(pair);
            } else {
                class.test.push(pair);
            }
        }
    }
    Ok(Pool { profiles, classes })
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_pool(dir, "pretrain", &self.pretrain)?;
        save_pool(dir, "incremental", &self.incremental)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let corpus = Self {
            pretrain: load_pool(dir, "pretrain")?,
            incremental: load_pool(dir, "incremental")?,
        };
        if !corpus.pretrain.ids().is_disjoint(&corpus.incremental.ids()) {
            return Err(Error::Format("pretrain and incremental pools share device ids".into()));
        }
        Ok(corpus)
    }
}
