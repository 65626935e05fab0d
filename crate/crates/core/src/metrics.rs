//! Per-stage metrics, forgetting, and the CSV files a run emits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::backbone::FeatureVector;
use crate::error::{Error, Result};
use crate::numeric::squared_distance;

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub stage: usize,
    pub classes_seen: usize,
    /// Accuracy over the test samples of every class seen so far.
    pub acc_all_seen: f64,
    /// Accuracy on the classes introduced at each stage `0..=stage`.
    pub subset_accuracy: Vec<f64>,
    /// Test samples behind each entry of `subset_accuracy`.
    pub subset_samples: Vec<usize>,
    pub forgetting: f64,
    pub adapter_bytes: usize,
    pub gmm_bytes: usize,
    pub exemplar_bytes: usize,
    pub wall_seconds: f64,
}

pub const METRICS_COLUMNS: [&str; 8] = [
    "stage",
    "classes_seen",
    "acc_all_seen",
    "forgetting",
    "adapter_bytes",
    "gmm_bytes",
    "exemplar_bytes",
    "wall_seconds",
];

/// Forgetting after each stage: the mean, over subsets learned at earlier
/// stages, of the best accuracy that subset ever had minus its current
/// accuracy. Row `t` of `history` holds the accuracies of subsets `0..=t`
/// after stage `t`. The first stage has forgetting 0.
pub fn compute_forgetting(history: &[Vec<f64>]) -> Result<Vec<f64>> {
    for (t, row) in history.iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::shape("accuracy history row", t + 1, row.len()));
        }
    }
    Ok((0..history.len())
        .map(|t| {
            if t == 0 {
                return 0.0;
            }
            let total: f64 = (0..t)
                .map(|j| {
                    let best = (j..t).map(|s| history[s][j]).fold(f64::NEG_INFINITY, f64::max);
                    best - history[t][j]
                })
                .sum();
            total / t as f64
        })
        .collect())
}

/// Final-stage accuracy and mean accuracy over stages.
pub fn summary(rows: &[MetricsRow]) -> (f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0);
    }
    let last = rows[rows.len() - 1].acc_all_seen;
    let mean = rows.iter().map(|r| r.acc_all_seen).sum::<f64>() / rows.len() as f64;
    (last, mean)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{},{:.3}",
            r.stage,
            r.classes_seen,
            r.acc_all_seen,
            r.forgetting,
            r.adapter_bytes,
            r.gmm_bytes,
            r.exemplar_bytes,
            r.wall_seconds
        );
    }
    out
}

/// Per-stage subset accuracies in long form: `stage,subset,samples,accuracy`.
pub fn subsets_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("stage,subset,samples,accuracy\n");
    for r in rows {
        for (j, (a, n)) in r.subset_accuracy.iter().zip(&r.subset_samples).enumerate() {
            let _ = writeln!(out, "{},{},{},{:.6}", r.stage, j, n, a);
        }
    }
    out
}

/// Parsed metrics CSV, one map per row keyed by column.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<BTreeMap<String, f64>>> {
    let file = BufReader::new(fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols != METRICS_COLUMNS {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad metrics value {v:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != cols.len() {
            return Err(Error::shape("metrics row", cols.len(), vals.len()));
        }
        rows.push(cols.iter().map(|c| c.to_string()).zip(vals).collect());
    }
    Ok(rows)
}

/// Where a dumped feature came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Real,
    Pseudo,
}

impl FeatureSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::Real => "real",
            FeatureSource::Pseudo => "pseudo",
        }
    }
}

/// Rows for external visualization: label, source, then the feature values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureDump {
    pub rows: Vec<(u32, FeatureSource, Vec<f64>)>,
}

impl FeatureDump {
    pub fn push_all(&mut self, feats: &[FeatureVector], source: FeatureSource) {
        self.rows
            .extend(feats.iter().map(|f| (f.label, source, f.values.clone())));
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.2.len())
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("label,source");
        for i in 0..d {
            let _ = write!(out, ",f{i}");
        }
        out.push('\n');
        for (label, source, values) in &self.rows {
            let _ = write!(out, "{label},{}", source.as_str());
            for v in values {
                let _ = write!(out, ",{v:.8e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty feature dump".into()))?;
        let columns = header.split(',').count();
        if columns < 3 || !header.starts_with("label,source,") {
            return Err(Error::Format(format!("unexpected feature dump header {header:?}")));
        }
        let mut dump = FeatureDump::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns {
                return Err(Error::shape("feature dump row", columns, fields.len()));
            }
            let label = fields[0]
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("bad label {:?}", fields[0])))?;
            let source = match fields[1] {
                "real" => FeatureSource::Real,
                "pseudo" => FeatureSource::Pseudo,
                other => return Err(Error::Format(format!("bad source {other:?}"))),
            };
            let values = fields[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad value {v:?}"))))
                .collect::<Result<_>>()?;
            dump.rows.push((label, source, values));
        }
        Ok(dump)
    }
}

/// Per-class distance between the real and pseudo centroids, and the mean
/// pairwise distance between real centroids of different classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    pub centroid_gap: BTreeMap<u32, f64>,
    pub mean_inter_class: f64,
}

impl Coverage {
    /// Largest real/pseudo gap relative to the inter-class distance.
    pub fn worst_ratio(&self) -> f64 {
        self.centroid_gap.values().fold(0.0, |a: f64, &b| a.max(b)) / self.mean_inter_class
    }
}

pub fn coverage(dump: &FeatureDump) -> Result<Coverage> {
    let mut sums: BTreeMap<(u32, bool), (Vec<f64>, usize)> = BTreeMap::new();
    for (label, source, values) in &dump.rows {
        let e = sums
            .entry((*label, *source == FeatureSource::Pseudo))
            .or_insert_with(|| (vec![0.0; values.len()], 0));
        for (s, v) in e.0.iter_mut().zip(values) {
            *s += v;
        }
        e.1 += 1;
    }
    let centroid = |key: (u32, bool)| -> Option<Vec<f64>> {
        sums.get(&key).map(|(s, n)| s.iter().map(|v| v / *n as f64).collect())
    };
    let labels: Vec<u32> = sums.keys().filter(|k| !k.1).map(|k| k.0).collect();
    let mut gaps = BTreeMap::new();
    for &l in &labels {
        let real = centroid((l, false)).expect("label from real rows");
        let pseudo =
            centroid((l, true)).ok_or_else(|| Error::InvalidArgument(format!("class {l} has no pseudo rows")))?;
        gaps.insert(l, squared_distance(&real, &pseudo).sqrt());
    }
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("coverage needs at least two classes".into()));
    }
    let reals: Vec<Vec<f64>> = labels.iter().map(|&l| centroid((l, false)).unwrap()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..reals.len() {
        for j in i + 1..reals.len() {
            total += squared_distance(&reals[i], &reals[j]).sqrt();
            pairs += 1;
        }
    }
    Ok(Coverage {
        centroid_gap: gaps,
        mean_inter_class: total / pairs as f64,
    })
}
