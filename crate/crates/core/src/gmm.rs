//! Diagonal-covariance Gaussian mixtures over backbone features.
//!
//! `p(x) = Σ_k π_k Π_i N(x_i | μ_{k,i}, σ²_{k,i})`, evaluated in log space.
//! Fitting is plain EM (responsibilities, weights, means, per-dimension
//! variances) with k-means++ seeding and a per-dimension variance floor.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::FeatureVector;
use crate::checkpoint::{read_u16, read_u32};
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, squared_distance, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const DEFAULT_COMPONENTS: usize = 2;

/// Per-dimension floor is this times the data variance of that dimension.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-6;
const VARIANCE_FLOOR_MIN: f64 = 1e-12;

/// Bytes needed to store one mixture: `K × (2D + 1) × bytes_per_float`.
pub fn storage_bytes(n_components: usize, dim: usize, bytes_per_float: usize) -> usize {
    n_components * (2 * dim + 1) * bytes_per_float
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGmm {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl DiagGmm {
    /// `means` and `variances` are `K × D`, row-major.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        let k = weights.len();
        if k == 0 || dim == 0 {
            return Err(Error::EmptyInput("mixture parameters"));
        }
        if means.len() != k * dim {
            return Err(Error::shape("DiagGmm means", k * dim, means.len()));
        }
        if variances.len() != k * dim {
            return Err(Error::shape("DiagGmm variances", k * dim, variances.len()));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| w.is_nan() || *w <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be positive and sum to 1, got {weights:?}"
            )));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(
                "mixture has non-finite mean or non-positive variance".into(),
            ));
        }
        Ok(Self {
            dim,
            weights,
            means,
            variances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    /// `Σ_k π_k μ_k`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (k, w) in self.weights.iter().enumerate() {
            for (mi, v) in m.iter_mut().zip(self.mean(k)) {
                *mi += w * v;
            }
        }
        m
    }

    fn component_log_density(&self, k: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mu), var) in x.iter().zip(self.mean(k)).zip(self.variance(k)) {
            let d = xi - mu;
            acc += LN_2PI + var.ln() + d * d / var;
        }
        -0.5 * acc
    }

    fn weighted_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[k].ln() + self.component_log_density(k, x);
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::shape("log_density", self.dim, x.len()));
        }
        let mut buf = vec![0.0; self.n_components()];
        self.weighted_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Ancestral sampling: component by weight, then independent normals
    /// per dimension.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one(&self, rng: &mut Rng) -> Vec<f64> {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut k = self.n_components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.mean(k)
            .iter()
            .zip(self.variance(k))
            .map(|(m, v)| m + v.sqrt() * rng.normal())
            .collect()
    }

    pub fn sample_features(&self, n: usize, label: u32, stage: usize, rng: &mut Rng) -> Vec<FeatureVector> {
        (0..n)
            .map(|_| FeatureVector::new(self.sample_one(rng), label, stage))
            .collect()
    }

    pub fn storage_bytes(&self, bytes_per_float: usize) -> usize {
        storage_bytes(self.n_components(), self.dim, bytes_per_float)
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub n_components: usize,
    /// Stop once the relative log-likelihood gain drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_components: DEFAULT_COMPONENTS,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmTrace {
    /// Total data log-likelihood at the start of each iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Too few samples for the requested components; fitted with one.
    pub reduced_components: bool,
    /// Every sample identical; single component at the floor variance.
    pub degenerate: bool,
}

/// Per-dimension variance floors for `data`.
pub fn variance_floor<T: AsRef<[f64]>>(data: &[T]) -> Vec<f64> {
    let (mean, var) = moments(data);
    let _ = mean;
    var.iter()
        .map(|v| VARIANCE_FLOOR_RATIO * v.max(VARIANCE_FLOOR_MIN))
        .collect()
}

fn moments<T: AsRef<[f64]>>(data: &[T]) -> (Vec<f64>, Vec<f64>) {
    let dim = data[0].as_ref().len();
    let n = data.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in data {
        for (m, v) in mean.iter_mut().zip(x.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for x in data {
        for ((s, v), m) in var.iter_mut().zip(x.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn kmeans_pp_seeds<T: AsRef<[f64]>>(data: &[T], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut seeds = vec![rng.below(data.len())];
    let mut d2: Vec<f64> = data
        .iter()
        .map(|x| squared_distance(x.as_ref(), data[seeds[0]].as_ref()))
        .collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = data.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(data.len())
        };
        seeds.push(next);
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(squared_distance(x.as_ref(), data[next].as_ref()));
        }
    }
    seeds
}

/// Fit a diagonal mixture by EM.
pub fn fit_em<T: AsRef<[f64]>>(data: &[T], config: &EmConfig, rng: &mut Rng) -> Result<(DiagGmm, EmTrace)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("EM input"));
    }
    if config.n_components == 0 {
        return Err(Error::InvalidArgument("EM needs at least one component".into()));
    }
    let dim = data[0].as_ref().len();
    if dim == 0 {
        return Err(Error::EmptyInput("EM feature dimension"));
    }
    if let Some(bad) = data.iter().find(|x| x.as_ref().len() != dim) {
        return Err(Error::shape("fit_em", dim, bad.as_ref().len()));
    }
    if data.iter().any(|x| x.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("EM input contains non-finite values".into()));
    }
    let n = data.len();
    let (data_mean, data_var) = moments(data);
    let floor: Vec<f64> = data_var
        .iter()
        .map(|v| VARIANCE_FLOOR_RATIO * v.max(VARIANCE_FLOOR_MIN))
        .collect();
    let mut trace = EmTrace::default();

    if data_var.iter().all(|&v| v == 0.0) {
        log::warn!("degenerate EM input: all {n} samples identical");
        trace.degenerate = true;
        trace.converged = true;
        let gmm = DiagGmm::new(vec![1.0], data_mean, floor, dim)?;
        return Ok((gmm, trace));
    }

    let mut k = config.n_components;
    if n < k {
        log::warn!("{n} samples for {k} components; fitting a single component");
        trace.reduced_components = true;
        k = 1;
    }

    let seeds = kmeans_pp_seeds(data, k, rng);
    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<f64> = seeds.iter().flat_map(|&s| data[s].as_ref().to_vec()).collect();
    let mut variances: Vec<f64> = (0..k)
        .flat_map(|_| data_var.iter().zip(&floor).map(|(v, f)| v.max(*f)))
        .collect();

    let mut resp = vec![0.0; n * k];
    let mut buf = vec![0.0; k];
    for iter in 0..config.max_iter.max(1) {
        let gmm = DiagGmm {
            dim,
            weights: weights.clone(),
            means: means.clone(),
            variances: variances.clone(),
        };
        // Step 1: responsibilities.
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            gmm.weighted_log_densities(x.as_ref(), &mut buf);
            let lse = log_sum_exp(&buf);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (buf[j] - lse).exp();
            }
        }
        trace.iterations = iter + 1;
        let prev = trace.log_likelihood.last().copied();
        trace.log_likelihood.push(ll);
        if let Some(prev) = prev {
            if ll - prev < config.tol * prev.abs().max(1.0) {
                trace.converged = true;
                break;
            }
        }
        if iter + 1 == config.max_iter {
            break;
        }

        // Steps 2-4: weights, means, diagonal variances.
        let mut nk = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                nk[j] += resp[i * k + j];
            }
        }
        let alive: Vec<usize> = (0..k).filter(|&j| nk[j] > 1e-10 * n as f64).collect();
        if alive.len() < k {
            log::warn!("EM component collapsed; continuing with {} components", alive.len());
            let keep = |v: &[f64], stride: usize| -> Vec<f64> {
                alive
                    .iter()
                    .flat_map(|&j| v[j * stride..(j + 1) * stride].to_vec())
                    .collect()
            };
            resp = (0..n)
                .flat_map(|i| alive.iter().map(|&j| resp[i * k + j]).collect::<Vec<_>>())
                .collect();
            nk = keep(&nk, 1);
            means = keep(&means, dim);
            variances = keep(&variances, dim);
            k = alive.len();
            buf.truncate(k);
        }
        let total: f64 = nk.iter().sum();
        weights = nk.iter().map(|v| v / total).collect();
        means.iter_mut().for_each(|m| *m = 0.0);
        for (i, x) in data.iter().enumerate() {
            for j in 0..k {
                let r = resp[i * k + j];
                for (m, v) in means[j * dim..(j + 1) * dim].iter_mut().zip(x.as_ref()) {
                    *m += r * v;
                }
            }
        }
        for j in 0..k {
            means[j * dim..(j + 1) * dim].iter_mut().for_each(|m| *m /= nk[j]);
        }
        variances.iter_mut().for_each(|v| *v = 0.0);
        for (i, x) in data.iter().enumerate() {
            for j in 0..k {
                let r = resp[i * k + j];
                let mu = &means[j * dim..(j + 1) * dim];
                for ((s, v), m) in variances[j * dim..(j + 1) * dim].iter_mut().zip(x.as_ref()).zip(mu) {
                    *s += r * (v - m) * (v - m);
                }
            }
        }
        for j in 0..k {
            for (s, f) in variances[j * dim..(j + 1) * dim].iter_mut().zip(&floor) {
                *s = (*s / nk[j]).max(*f);
            }
        }
    }
    let gmm = DiagGmm::new(weights, means, variances, dim)?;
    Ok((gmm, trace))
}

/// Pairing of fitted components to reference components, by greedy
/// nearest-mean matching. `result[k]` is the reference index matched to
/// fitted component `k`.
pub fn match_components(fitted: &DiagGmm, reference: &DiagGmm) -> Vec<usize> {
    let kf = fitted.n_components();
    let kr = reference.n_components();
    let mut pairs: Vec<(f64, usize, usize)> = (0..kf)
        .flat_map(|a| (0..kr).map(move |b| (a, b)))
        .map(|(a, b)| (squared_distance(fitted.mean(a), reference.mean(b)), a, b))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out = vec![usize::MAX; kf];
    let mut used = vec![false; kr];
    for (_, a, b) in pairs {
        if out[a] == usize::MAX && !used[b] {
            out[a] = b;
            used[b] = true;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub gmm: DiagGmm,
    /// Stage in which the class was learned.
    pub stage: usize,
    pub trace: EmTrace,
}

/// Per-class mixtures, one entry per learned class. Entries are never
/// replaced once inserted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassBank {
    entries: BTreeMap<u32, BankEntry>,
}

impl ClassBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: u32) -> Option<&BankEntry> {
        self.entries.get(&class)
    }

    pub fn contains(&self, class: u32) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &BankEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, class: u32, entry: BankEntry) -> Result<()> {
        if self.entries.contains_key(&class) {
            return Err(Error::InvalidArgument(format!("class {class} already in bank")));
        }
        self.entries.insert(class, entry);
        Ok(())
    }

    /// Move every entry of `other` in. A duplicate class is an error and
    /// leaves the bank untouched.
    pub fn absorb(&mut self, other: ClassBank) -> Result<()> {
        if let Some(&class) = other.entries.keys().find(|c| self.entries.contains_key(c)) {
            return Err(Error::InvalidArgument(format!("class {class} already in bank")));
        }
        for (class, entry) in other.entries {
            self.insert(class, entry)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.gmm.dim())
    }

    pub fn storage_bytes(&self, bytes_per_float: usize) -> usize {
        self.entries
            .values()
            .map(|e| e.gmm.storage_bytes(bytes_per_float))
            .sum()
    }

    /// Mixture for `class`, or the `bank incomplete` error.
    pub fn require(&self, class: u32) -> Result<&BankEntry> {
        self.get(class).ok_or(Error::BankIncomplete { class })
    }
}

/// Fit one mixture per class. Each class draws from its own stream
/// `root.derive(class)`, so the result does not depend on class order.
pub fn fit_class_bank(
    groups: &BTreeMap<u32, Vec<FeatureVector>>,
    config: &EmConfig,
    stage: usize,
    root: &Rng,
) -> Result<ClassBank> {
    let fitted: Vec<(u32, BankEntry)> = groups
        .par_iter()
        .map(|(&class, feats)| {
            if feats.is_empty() {
                return Err(Error::Class {
                    class,
                    source: Box::new(Error::EmptyInput("class features")),
                });
            }
            let mut rng = root.derive(class as u64);
            let (gmm, trace) = fit_em(feats, config, &mut rng).map_err(|e| Error::Class {
                class,
                source: Box::new(e),
            })?;
            Ok((class, BankEntry { gmm, stage, trace }))
        })
        .collect::<Result<_>>()?;
    let mut bank = ClassBank::default();
    for (class, entry) in fitted {
        bank.insert(class, entry)?;
    }
    Ok(bank)
}

pub const BANK_MAGIC: &[u8; 4] = b"GMMB";
pub const BANK_VERSION: u16 = 1;
pub const BANK_HEADER_BYTES: usize = 14;
pub const BANK_RECORD_HEADER_BYTES: usize = 6;

/// Encode one class record: `class_id u32`, `K u16`, then π, μ, σ² as `f32`.
pub fn encode_record(class: u32, gmm: &DiagGmm) -> Vec<u8> {
    let mut buf = Vec::with_capacity(BANK_RECORD_HEADER_BYTES + gmm.storage_bytes(4));
    buf.extend_from_slice(&class.to_le_bytes());
    buf.extend_from_slice(&(gmm.n_components() as u16).to_le_bytes());
    for v in gmm.weights.iter().chain(&gmm.means).chain(&gmm.variances) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

impl ClassBank {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = self.dim().unwrap_or(0);
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (class, entry) in &self.entries {
            w.write_all(&encode_record(*class, &entry.gmm))?;
        }
        Ok(())
    }

    /// Read a bank file. Stages are not stored and come back as 0; weights
    /// are renormalized after the `f32` round trip.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format("bad GMM bank magic".into()));
        }
        let version = read_u16(r)?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported GMM bank version {version}")));
        }
        let dim = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut bank = ClassBank::default();
        for _ in 0..count {
            let class = read_u32(r)?;
            let k = read_u16(r)? as usize;
            let mut raw = vec![0u8; 4 * k * (2 * dim + 1)];
            r.read_exact(&mut raw)?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let mut weights = vals[..k].to_vec();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let means = vals[k..k + k * dim].to_vec();
            let variances = vals[k + k * dim..].to_vec();
            let gmm = DiagGmm::new(weights, means, variances, dim).map_err(|e| Error::Class {
                class,
                source: Box::new(e),
            })?;
            bank.insert(
                class,
                BankEntry {
                    gmm,
                    stage: 0,
                    trace: EmTrace::default(),
                },
            )?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
