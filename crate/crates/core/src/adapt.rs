//! Stage adapter, classifier head, and the losses that train them.
//!
//! Features from the frozen backbone pass through a residual bottleneck
//! adapter, then a standardization layer and a dense classifier. Old classes
//! are rehearsed with pseudo-features drawn from the class bank; stage
//! adapters are merged into one student by routed distillation.

use std::collections::{BTreeMap, BTreeSet};

use crate::backbone::FeatureVector;
use crate::checkpoint::{Blob, Checkpoint};
use crate::error::{Error, Result};
use crate::gmm::ClassBank;
use crate::numeric::{
    cosine_lr, cross_entropy_grad, kl_unchecked, sgd_step, softmax, softmax_unchecked, Matrix, Rng, SgdConfig, SgdState,
};

/// Bottleneck width is `dim / ADAPTER_REDUCTION`.
pub const ADAPTER_REDUCTION: usize = 4;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Residual bottleneck `x + γ · up(relu(down(x)))`.
///
/// Parameters are stored flat: down weight `[hidden × dim]`, down bias,
/// up weight `[dim × hidden]`, up bias, then `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

struct AdapterCache {
    hidden: Vec<Vec<f64>>,
    branch: Vec<Vec<f64>>,
}

impl AdapterParams {
    /// He-initialized down-projection, zero up-projection, `γ = 1`; the
    /// result is the identity map.
    pub fn new(dim: usize, rng: &mut Rng) -> Result<Self> {
        let hidden = dim / ADAPTER_REDUCTION;
        if hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature dim {dim} too small for an adapter"
            )));
        }
        let mut a = Self {
            dim,
            hidden,
            params: vec![0.0; 2 * dim * hidden + hidden + dim + 1],
        };
        let std = (2.0 / dim as f64).sqrt();
        a.params[..hidden * dim]
            .iter_mut()
            .for_each(|w| *w = std * rng.normal());
        let s = a.scale_offset();
        a.params[s] = 1.0;
        Ok(a)
    }

    fn down_b(&self) -> usize {
        self.hidden * self.dim
    }
    fn up_w(&self) -> usize {
        self.down_b() + self.hidden
    }
    fn up_b(&self) -> usize {
        self.up_w() + self.dim * self.hidden
    }
    fn scale_offset(&self) -> usize {
        self.up_b() + self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Serialized parameter bytes at 4 bytes per value.
    pub fn payload_bytes(&self) -> usize {
        4 * self.params.len()
    }

    pub fn scale(&self) -> f64 {
        self.params[self.scale_offset()]
    }

    pub fn set_scale(&mut self, scale: f64) {
        let s = self.scale_offset();
        self.params[s] = scale;
    }

    pub fn down_weight(&self) -> &[f64] {
        &self.params[..self.down_b()]
    }

    pub fn down_bias(&self) -> &[f64] {
        &self.params[self.down_b()..self.up_w()]
    }

    pub fn up_weight(&self) -> &[f64] {
        &self.params[self.up_w()..self.up_b()]
    }

    pub fn up_bias(&self) -> &[f64] {
        &self.params[self.up_b()..self.scale_offset()]
    }

    /// Mutable view of every parameter, in storage order.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (d, h) = (self.dim, self.hidden);
        let wd = self.down_weight();
        let bd = self.down_bias();
        let hid: Vec<f64> = (0..h)
            .map(|j| (bd[j] + dot(&wd[j * d..(j + 1) * d], x)).max(0.0))
            .collect();
        let wu = self.up_weight();
        let bu = self.up_bias();
        let branch: Vec<f64> = (0..d).map(|r| bu[r] + dot(&wu[r * h..(r + 1) * h], &hid)).collect();
        let g = self.scale();
        let out = x.iter().zip(&branch).map(|(xi, b)| xi + g * b).collect();
        (out, hid, branch)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape("adapter_forward", self.dim, x.len()));
        }
        Ok(self.forward_cached(x).0)
    }

    fn forward_batch_cached(&self, xs: &[&[f64]]) -> (Vec<Vec<f64>>, AdapterCache) {
        let mut outs = Vec::with_capacity(xs.len());
        let mut cache = AdapterCache {
            hidden: Vec::with_capacity(xs.len()),
            branch: Vec::with_capacity(xs.len()),
        };
        for x in xs {
            let (o, h, b) = self.forward_cached(x);
            outs.push(o);
            cache.hidden.push(h);
            cache.branch.push(b);
        }
        (outs, cache)
    }

    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if let Some(x) = xs.iter().find(|x| x.len() != self.dim) {
            return Err(Error::shape("adapter_forward", self.dim, x.len()));
        }
        Ok(xs.iter().map(|x| self.forward_cached(x).0).collect())
    }

    /// Accumulate parameter gradients given `d_out` for each sample.
    fn backward(&self, xs: &[&[f64]], cache: &AdapterCache, d_out: &[Vec<f64>], grad: &mut [f64]) {
        let (d, h) = (self.dim, self.hidden);
        let g = self.scale();
        let (down_b, up_w, up_b, s_off) = (self.down_b(), self.up_w(), self.up_b(), self.scale_offset());
        let wu = self.up_weight();
        for (i, x) in xs.iter().enumerate() {
            let dy = &d_out[i];
            let hid = &cache.hidden[i];
            grad[s_off] += dot(dy, &cache.branch[i]);
            let mut d_hid = vec![0.0; h];
            for r in 0..d {
                let db = g * dy[r];
                if db == 0.0 {
                    continue;
                }
                grad[up_b + r] += db;
                let gw = &mut grad[up_w + r * h..up_w + (r + 1) * h];
                let w = &wu[r * h..(r + 1) * h];
                for j in 0..h {
                    gw[j] += db * hid[j];
                    d_hid[j] += db * w[j];
                }
            }
            for j in 0..h {
                if hid[j] <= 0.0 || d_hid[j] == 0.0 {
                    continue;
                }
                grad[down_b + j] += d_hid[j];
                let gw = &mut grad[j * d..(j + 1) * d];
                for (gk, xk) in gw.iter_mut().zip(x.iter()) {
                    *gk += d_hid[j] * xk;
                }
            }
        }
    }

    pub fn to_checkpoint(&self, prefix: &str, ck: &mut Checkpoint) {
        let (d, h) = (self.dim, self.hidden);
        ck.push(Blob::new(
            format!("{prefix}.down.weight"),
            vec![h, d],
            self.down_weight().to_vec(),
        ));
        ck.push(Blob::new(
            format!("{prefix}.down.bias"),
            vec![h],
            self.down_bias().to_vec(),
        ));
        ck.push(Blob::new(
            format!("{prefix}.up.weight"),
            vec![d, h],
            self.up_weight().to_vec(),
        ));
        ck.push(Blob::new(format!("{prefix}.up.bias"), vec![d], self.up_bias().to_vec()));
        ck.push(Blob::new(format!("{prefix}.scale"), vec![1], vec![self.scale()]));
    }

    pub fn from_checkpoint(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let down = ck.get(&format!("{prefix}.down.weight"))?;
        if down.shape.len() != 2 {
            return Err(Error::Format(format!("{prefix}.down.weight must be rank 2")));
        }
        let (h, d) = (down.shape[0], down.shape[1]);
        let mut params = down.data.clone();
        for (name, len) in [("down.bias", h), ("up.weight", d * h), ("up.bias", d), ("scale", 1)] {
            let b = ck.get(&format!("{prefix}.{name}"))?;
            if b.data.len() != len {
                return Err(Error::shape("adapter checkpoint", len, b.data.len()));
            }
            params.extend_from_slice(&b.data);
        }
        Ok(Self {
            dim: d,
            hidden: h,
            params,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standardization layer followed by a dense map to one logit per learned
/// class. Rows are ordered by the stage in which their class was added.
///
/// Parameters are stored flat: scale `[dim]`, shift `[dim]`, weight
/// `[classes × dim]`, bias `[classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    dim: usize,
    labels: Vec<u32>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    params: Vec<f64>,
}

struct BnCache {
    normalized: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    train: bool,
}

impl ClassifierParams {
    pub fn new(dim: usize, labels: &[u32], rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput("classifier feature dimension"));
        }
        let mut c = Self {
            dim,
            labels: Vec::new(),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            params: [vec![1.0; dim], vec![0.0; dim]].concat(),
        };
        c.expand(labels, rng)?;
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn index_of(&self, label: u32) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn payload_bytes(&self) -> usize {
        4 * (self.params.len() + 2 * self.dim)
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    fn w_off(&self) -> usize {
        2 * self.dim
    }

    fn b_off(&self) -> usize {
        2 * self.dim + self.labels.len() * self.dim
    }

    pub fn weight_row(&self, k: usize) -> &[f64] {
        let o = self.w_off() + k * self.dim;
        &self.params[o..o + self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.b_off()..]
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.n_classes())
            .map(|k| dot(self.weight_row(k), self.weight_row(k)).sqrt())
            .collect()
    }

    /// Set a whole weight row and its bias.
    pub fn set_row(&mut self, k: usize, weight: &[f64], bias: f64) -> Result<()> {
        if weight.len() != self.dim || k >= self.n_classes() {
            return Err(Error::shape("set_row", self.dim, weight.len()));
        }
        let o = self.w_off() + k * self.dim;
        self.params[o..o + self.dim].copy_from_slice(weight);
        let b = self.b_off();
        self.params[b + k] = bias;
        Ok(())
    }

    /// Copy existing rows and append Xavier-initialized rows for `labels`.
    pub fn expand(&mut self, labels: &[u32], rng: &mut Rng) -> Result<()> {
        let mut seen: BTreeSet<u32> = self.labels.iter().copied().collect();
        for &l in labels {
            if !seen.insert(l) {
                return Err(Error::InvalidArgument(format!(
                    "class {l} already has a classifier row"
                )));
            }
        }
        let d = self.dim;
        let old_k = self.n_classes();
        let new_k = old_k + labels.len();
        let std = (2.0 / (d + new_k) as f64).sqrt();
        let mut params = self.params[..self.b_off()].to_vec();
        for _ in 0..labels.len() * d {
            params.push(std * rng.normal());
        }
        params.extend_from_slice(self.bias());
        params.extend(std::iter::repeat_n(0.0, labels.len()));
        self.params = params;
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    /// Rescale rows `old_count..` so their mean norm equals the mean norm of
    /// rows `..old_count`. A no-op without old rows.
    pub fn weight_align(&mut self, old_count: usize) {
        let k = self.n_classes();
        if old_count == 0 || old_count >= k {
            return;
        }
        let norms = self.row_norms();
        let old_mean = norms[..old_count].iter().sum::<f64>() / old_count as f64;
        let new_mean = norms[old_count..].iter().sum::<f64>() / (k - old_count) as f64;
        if new_mean == 0.0 {
            return;
        }
        let ratio = old_mean / new_mean;
        let (w, d) = (self.w_off(), self.dim);
        self.params[w + old_count * d..w + k * d]
            .iter_mut()
            .for_each(|v| *v *= ratio);
    }

    fn standardize_eval(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let norm: Vec<f64> = (0..d).map(|i| (x[i] - self.running_mean[i]) * inv[i]).collect();
        (norm, inv)
    }

    fn affine(&self, normalized: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| self.params[i] * normalized[i] + self.params[d + i])
            .collect()
    }

    fn dense(&self, z: &[f64]) -> Vec<f64> {
        let b = self.bias();
        (0..self.n_classes())
            .map(|k| b[k] + dot(self.weight_row(k), z))
            .collect()
    }

    /// Inference logits, using the running statistics.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape("classify", self.dim, x.len()));
        }
        let (norm, _) = self.standardize_eval(x);
        Ok(self.dense(&self.affine(&norm)))
    }

    /// Posterior over learned classes.
    pub fn classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        softmax(&self.logits(x)?)
    }

    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        let z = self.logits(x)?;
        let best = (0..z.len()).fold(0, |b, k| if z[k] > z[b] { k } else { b });
        Ok(self.labels[best])
    }

    /// Batch forward. In training mode the batch statistics are used and the
    /// running statistics updated.
    fn forward_batch(&mut self, ys: &[Vec<f64>], train: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, BnCache) {
        let d = self.dim;
        let n = ys.len();
        let (mean, var) = if train {
            let mut mean = vec![0.0; d];
            for y in ys {
                for (m, v) in mean.iter_mut().zip(y) {
                    *m += v / n as f64;
                }
            }
            let mut var = vec![0.0; d];
            for y in ys {
                for i in 0..d {
                    var[i] += (y[i] - mean[i]).powi(2) / n as f64;
                }
            }
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            for i in 0..d {
                self.running_mean[i] = (1.0 - BN_MOMENTUM) * self.running_mean[i] + BN_MOMENTUM * mean[i];
                self.running_var[i] = (1.0 - BN_MOMENTUM) * self.running_var[i] + BN_MOMENTUM * var[i] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let normalized: Vec<Vec<f64>> = ys
            .iter()
            .map(|y| (0..d).map(|i| (y[i] - mean[i]) * inv_std[i]).collect())
            .collect();
        let zs: Vec<Vec<f64>> = normalized.iter().map(|x| self.affine(x)).collect();
        let logits = zs.iter().map(|z| self.dense(z)).collect();
        (
            logits,
            zs,
            BnCache {
                normalized,
                inv_std,
                train,
            },
        )
    }

    /// Accumulate parameter gradients and return the gradient with respect
    /// to the classifier inputs.
    fn backward(&self, zs: &[Vec<f64>], cache: &BnCache, d_logits: &Matrix, grad: &mut [f64]) -> Vec<Vec<f64>> {
        let d = self.dim;
        let k = self.n_classes();
        let n = zs.len();
        let (w_off, b_off) = (self.w_off(), self.b_off());
        let mut d_norm = vec![vec![0.0; d]; n];
        for i in 0..n {
            let mut dz = vec![0.0; d];
            for c in 0..k {
                let g = d_logits.get(i, c);
                if g == 0.0 {
                    continue;
                }
                grad[b_off + c] += g;
                let w = self.weight_row(c);
                let gw = &mut grad[w_off + c * d..w_off + (c + 1) * d];
                for j in 0..d {
                    gw[j] += g * zs[i][j];
                    dz[j] += g * w[j];
                }
            }
            for j in 0..d {
                grad[j] += dz[j] * cache.normalized[i][j];
                grad[d + j] += dz[j];
                d_norm[i][j] = dz[j] * self.params[j];
            }
        }
        if !cache.train {
            return d_norm
                .into_iter()
                .map(|r| r.iter().zip(&cache.inv_std).map(|(a, s)| a * s).collect())
                .collect();
        }
        let mut sum = vec![0.0; d];
        let mut sum_x = vec![0.0; d];
        for (g_row, x_row) in d_norm.iter().zip(&cache.normalized) {
            for j in 0..d {
                sum[j] += g_row[j];
                sum_x[j] += g_row[j] * x_row[j];
            }
        }
        (0..n)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        cache.inv_std[j] / n as f64
                            * (n as f64 * d_norm[i][j] - sum[j] - cache.normalized[i][j] * sum_x[j])
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_checkpoint(&self, prefix: &str, ck: &mut Checkpoint) {
        let (d, k) = (self.dim, self.n_classes());
        ck.push(Blob::new(
            format!("{prefix}.labels"),
            vec![k],
            self.labels.iter().map(|&l| l as f64).collect(),
        ));
        ck.push(Blob::new(
            format!("{prefix}.norm.running_mean"),
            vec![d],
            self.running_mean.clone(),
        ));
        ck.push(Blob::new(
            format!("{prefix}.norm.running_var"),
            vec![d],
            self.running_var.clone(),
        ));
        ck.push(Blob::new(
            format!("{prefix}.norm.scale"),
            vec![d],
            self.params[..d].to_vec(),
        ));
        ck.push(Blob::new(
            format!("{prefix}.norm.shift"),
            vec![d],
            self.params[d..2 * d].to_vec(),
        ));
        ck.push(Blob::new(
            format!("{prefix}.dense.weight"),
            vec![k, d],
            self.params[self.w_off()..self.b_off()].to_vec(),
        ));
        ck.push(Blob::new(format!("{prefix}.dense.bias"), vec![k], self.bias().to_vec()));
    }

    pub fn from_checkpoint(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let labels: Vec<u32> = ck
            .get(&format!("{prefix}.labels"))?
            .data
            .iter()
            .map(|&v| v as u32)
            .collect();
        let weight = ck.get(&format!("{prefix}.dense.weight"))?;
        if weight.shape.len() != 2 || weight.shape[0] != labels.len() {
            return Err(Error::Format(format!(
                "{prefix}.dense.weight has shape {:?}",
                weight.shape
            )));
        }
        let d = weight.shape[1];
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let b = ck.get(&format!("{prefix}.{name}"))?;
            if b.data.len() != len {
                return Err(Error::shape("classifier checkpoint", len, b.data.len()));
            }
            Ok(b.data.clone())
        };
        let params = [
            get("norm.scale", d)?,
            get("norm.shift", d)?,
            weight.data.clone(),
            get("dense.bias", labels.len())?,
        ]
        .concat();
        Ok(Self {
            dim: d,
            running_mean: get("norm.running_mean", d)?,
            running_var: get("norm.running_var", d)?,
            labels,
            params,
        })
    }
}

/// Mean and per-dimension variance of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::shape("GaussianMoments", mean.len(), var.len()));
        }
        if var.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidArgument("negative variance".into()));
        }
        Ok(Self { mean, var })
    }

    /// Biased batch moments.
    pub fn from_batch(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("moment batch"));
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("GaussianMoments::from_batch", d, r.len()));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for i in 0..d {
                var[i] += (r[i] - mean[i]).powi(2) / n;
            }
        }
        Ok(Self { mean, var })
    }
}

/// `(1/N) Σ_i ‖a_i − b_i‖²`.
pub fn mse_align(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mse_align batch", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("mse_align batch"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::shape("mse_align row", x.len(), y.len()));
        }
        total += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(total / a.len() as f64)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// `‖m₁ − m₂‖² + Σ_i (√c₁ᵢ − √c₂ᵢ)²`.
pub fn w2_gaussian(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.var.len() != b.var.len() || a.mean.len() != a.var.len() {
        return Err(Error::shape("w2_gaussian", a.mean.len(), b.mean.len()));
    }
    if a.var.iter().chain(&b.var).any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::InvalidArgument("negative variance".into()));
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let cov: f64 = a
        .var
        .iter()
        .zip(&b.var)
        .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
        .sum();
    Ok(mean + cov)
}

/// Distillation loss and its gradient with respect to the student outputs:
/// `mse_align(s, t) + λ · w2_gaussian(moments(s), moments(t))`.
pub fn alignment_loss_grad(student: &[Vec<f64>], teacher: &[Vec<f64>], lambda_w2: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mse = mse_align(student, teacher)?;
    let n = student.len() as f64;
    let mut grad: Vec<Vec<f64>> = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| s.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / n).collect())
        .collect();
    if lambda_w2 == 0.0 {
        return Ok((mse, grad));
    }
    let ms = GaussianMoments::from_batch(student)?;
    let mt = GaussianMoments::from_batch(teacher)?;
    let w2 = w2_gaussian(&ms, &mt)?;
    let d = ms.mean.len();
    // d/dy of Σ(√c_s − √c_t)² through the biased variance, guarded near 0.
    let var_coef: Vec<f64> = (0..d)
        .map(|i| {
            let ss = ms.var[i].sqrt();
            if ss > 1e-12 {
                1.0 - mt.var[i].sqrt() / ss
            } else {
                0.0
            }
        })
        .collect();
    for (g, s) in grad.iter_mut().zip(student) {
        for i in 0..d {
            g[i] += lambda_w2 * (2.0 * (ms.mean[i] - mt.mean[i]) + var_coef[i] * 2.0 * (s[i] - ms.mean[i])) / n;
        }
    }
    Ok((mse + lambda_w2 * w2, grad))
}

/// Hyperparameters shared by the stage-training, distillation and
/// fine-tuning phases.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub lambda_w2: f64,
    pub lambda_kl: f64,
    pub temperature: f64,
    /// Multiplier on the learning rate for adapter parameters during stage
    /// training. Keeps each stage's adjustment small so the stage adapters
    /// stay close enough to be merged by distillation.
    pub adapter_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 64,
                epochs: 20,
                weight_decay: 5e-4,
            },
            lambda_w2: 0.1,
            lambda_kl: 1.0,
            temperature: 2.0,
            adapter_lr_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.sgd.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be at least 2".into()));
        }
        if !(self.adapter_lr_scale >= 0.0 && self.adapter_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bad adapter_lr_scale {}",
                self.adapter_lr_scale
            )));
        }
        if !(self.lambda_w2 >= 0.0 && self.lambda_kl >= 0.0 && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bad loss weights: lambda_w2 {}, lambda_kl {}, temperature {}",
                self.lambda_w2, self.lambda_kl, self.temperature
            )));
        }
        Ok(())
    }
}

/// Which logits the stage cross-entropy competes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitScope {
    /// Only the classes present in the stage data.
    StageClasses,
    /// Every learned class.
    AllClasses,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseReport {
    pub epoch_loss: Vec<f64>,
}

fn label_indices(classifier: &ClassifierParams, feats: &[FeatureVector]) -> Result<Vec<usize>> {
    feats
        .iter()
        .map(|f| {
            classifier
                .index_of(f.label)
                .ok_or_else(|| Error::InvalidArgument(format!("class {} has no classifier row", f.label)))
        })
        .collect()
}

/// Train adapter and classifier jointly by cross-entropy on `features`.
/// Standardization statistics come from each batch and update the running
/// statistics.
pub fn train_stage(
    features: &[FeatureVector],
    adapter: &mut AdapterParams,
    classifier: &mut ClassifierParams,
    config: &TrainConfig,
    scope: LogitScope,
    rng: &mut Rng,
) -> Result<PhaseReport> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyInput("stage features"));
    }
    if let Some(f) = features.iter().find(|f| f.dim() != adapter.dim()) {
        return Err(Error::shape("train_stage", adapter.dim(), f.dim()));
    }
    let targets = label_indices(classifier, features)?;
    let active: Vec<usize> = match scope {
        LogitScope::AllClasses => (0..classifier.n_classes()).collect(),
        LogitScope::StageClasses => targets.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let col_of: BTreeMap<usize, usize> = active.iter().enumerate().map(|(c, &k)| (k, c)).collect();

    let mut a_state = SgdState::new(adapter.param_count());
    let mut c_state = SgdState::new(classifier.params.len());
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut report = PhaseReport::default();
    let epochs = config.sgd.epochs;
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        let sgd = SgdConfig {
            learning_rate: cosine_lr(config.sgd.learning_rate, epoch, epochs),
            ..config.sgd.clone()
        };
        let a_sgd = SgdConfig {
            learning_rate: sgd.learning_rate * config.adapter_lr_scale,
            ..sgd.clone()
        };
        let (mut loss_sum, mut batches) = (0.0, 0);
        for batch in order.chunks(config.sgd.batch_size) {
            // Batch statistics need at least two samples.
            if batch.len() < 2 && features.len() >= 2 {
                continue;
            }
            let xs: Vec<&[f64]> = batch.iter().map(|&i| features[i].values.as_slice()).collect();
            let (ys, a_cache) = adapter.forward_batch_cached(&xs);
            let (logits, zs, bn) = classifier.forward_batch(&ys, true);
            let mut sub = Matrix::zeros(batch.len(), active.len());
            for (i, row) in logits.iter().enumerate() {
                for (c, &k) in active.iter().enumerate() {
                    sub.set(i, c, row[k]);
                }
            }
            let labels: Vec<usize> = batch.iter().map(|&i| col_of[&targets[i]]).collect();
            let (loss, d_sub) = cross_entropy_grad(&sub, &labels)?;
            loss_sum += loss;
            batches += 1;
            let mut d_logits = Matrix::zeros(batch.len(), classifier.n_classes());
            for i in 0..batch.len() {
                for (c, &k) in active.iter().enumerate() {
                    d_logits.set(i, k, d_sub.get(i, c));
                }
            }
            let mut c_grad = vec![0.0; classifier.params.len()];
            let d_ys = classifier.backward(&zs, &bn, &d_logits, &mut c_grad);
            let mut a_grad = vec![0.0; adapter.param_count()];
            adapter.backward(&xs, &a_cache, &d_ys, &mut a_grad);
            sgd_step(&mut classifier.params, &c_grad, &sgd, &mut c_state)?;
            sgd_step(&mut adapter.params, &a_grad, &a_sgd, &mut a_state)?;
        }
        report.epoch_loss.push(loss_sum / batches.max(1) as f64);
    }
    if !adapter.params.iter().chain(&classifier.params).all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    Ok(report)
}

/// Fraction of `features` whose predicted class is their label.
pub fn accuracy(adapter: &AdapterParams, classifier: &ClassifierParams, features: &[FeatureVector]) -> Result<f64> {
    if features.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for f in features {
        if classifier.predict(&adapter.forward(&f.values)?)? == f.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

/// A frozen adapter together with the stages whose data it answers for.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTeacher {
    pub adapter: AdapterParams,
    pub stages: BTreeSet<usize>,
}

fn teacher_for(teachers: &[StageTeacher], stage: usize) -> Result<usize> {
    teachers
        .iter()
        .position(|t| t.stages.contains(&stage))
        .ok_or_else(|| Error::InvalidArgument(format!("no teacher covers stage {stage}")))
}

/// Draws pseudo-features for rehearsal: slot `j` of a batch belongs to
/// class `classes[(offset + j) % len]`, with a fresh random offset per batch,
/// so every batch is balanced over `classes` to within one sample.
struct PseudoSampler<'a> {
    bank: &'a ClassBank,
    classes: Vec<u32>,
    rng: Rng,
}

impl<'a> PseudoSampler<'a> {
    fn new(bank: &'a ClassBank, classes: &[u32], rng: Rng) -> Result<Self> {
        for &c in classes {
            bank.require(c)?;
        }
        Ok(Self {
            bank,
            classes: classes.to_vec(),
            rng,
        })
    }

    fn draw(&mut self, n: usize) -> Vec<FeatureVector> {
        if self.classes.is_empty() {
            return Vec::new();
        }
        let offset = self.rng.below(self.classes.len());
        (0..n)
            .map(|j| {
                let class = self.classes[(offset + j) % self.classes.len()];
                let entry = self.bank.get(class).expect("checked at construction");
                FeatureVector::new(entry.gmm.sample_one(&mut self.rng), class, entry.stage)
            })
            .collect()
    }
}

/// Pseudo-features per class for validation reports.
pub fn sample_pseudo(bank: &ClassBank, classes: &[u32], per_class: usize, rng: &Rng) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let entry = bank.require(c)?;
        let mut r = rng.derive(c as u64);
        out.extend(entry.gmm.sample_features(per_class, c, entry.stage, &mut r));
    }
    Ok(out)
}

/// Indices `0..n` split into minibatches of the real-data half-size.
fn real_batches(n: usize, half: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(half.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillReport {
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
    /// Mean squared student/teacher gap on fresh pseudo-features of every
    /// banked class, each routed to its stage teacher.
    pub heldout_mse: f64,
}

/// Global gradient-norm cap for distillation. The squared-error objective
/// is much stiffer than cross-entropy along the adapter scale, and plain SGD
/// with momentum diverges within a few steps at the shared learning rate.
const DISTILL_CLIP_NORM: f64 = 5.0;

fn clip_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
}

/// Distill `teachers` into `student`. Batches are half current-stage real
/// features (routed to the teacher of `current_stage`) and half
/// pseudo-features of `old_classes` (routed to the teacher of the stage
/// that learned each class).
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    teachers: &[StageTeacher],
    student: &mut AdapterParams,
    bank: &ClassBank,
    old_classes: &[u32],
    current: &[FeatureVector],
    current_stage: usize,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<DistillReport> {
    config.validate()?;
    if teachers.is_empty() {
        return Err(Error::InvalidArgument("distillation needs at least one teacher".into()));
    }
    if current.is_empty() {
        return Err(Error::EmptyInput("current-stage features"));
    }
    let current_teacher = teacher_for(teachers, current_stage)?;
    let mut sampler = PseudoSampler::new(bank, old_classes, rng.derive(1))?;
    for &c in old_classes {
        teacher_for(teachers, bank.require(c)?.stage)?;
    }
    let half = (config.sgd.batch_size / 2).max(1);
    let mut state = SgdState::new(student.param_count());
    let mut report = DistillReport::default();
    let mut shuffle_rng = rng.derive(2);
    let epochs = config.sgd.epochs;
    let mut first = true;
    for epoch in 0..epochs {
        // Pure function matching: no weight decay.
        let sgd = SgdConfig {
            learning_rate: cosine_lr(config.sgd.learning_rate, epoch, epochs),
            weight_decay: 0.0,
            ..config.sgd.clone()
        };
        let (mut loss_sum, mut batches) = (0.0, 0);
        for idx in real_batches(current.len(), half, &mut shuffle_rng) {
            let pseudo = sampler.draw(if old_classes.is_empty() { 0 } else { idx.len() });
            let mut xs: Vec<&[f64]> = idx.iter().map(|&i| current[i].values.as_slice()).collect();
            let mut route: Vec<usize> = vec![current_teacher; idx.len()];
            for p in &pseudo {
                xs.push(&p.values);
                route.push(teacher_for(teachers, p.stage)?);
            }
            let targets: Vec<Vec<f64>> = xs
                .iter()
                .zip(&route)
                .map(|(x, &t)| teachers[t].adapter.forward_cached(x).0)
                .collect();
            let (outs, cache) = student.forward_batch_cached(&xs);
            let (loss, d_out) = alignment_loss_grad(&outs, &targets, config.lambda_w2)?;
            if first {
                report.initial_loss = loss;
                first = false;
            }
            loss_sum += loss;
            batches += 1;
            let mut grad = vec![0.0; student.param_count()];
            student.backward(&xs, &cache, &d_out, &mut grad);
            clip_norm(&mut grad, DISTILL_CLIP_NORM);
            sgd_step(&mut student.params, &grad, &sgd, &mut state)?;
        }
        report.epoch_loss.push(loss_sum / batches.max(1) as f64);
    }
    if !student.params.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("distillation diverged".into()));
    }
    let eval_classes: Vec<u32> = bank
        .iter()
        .filter(|(_, e)| e.stage <= current_stage)
        .map(|(c, _)| c)
        .collect();
    report.heldout_mse = routed_mse(teachers, student, bank, &eval_classes, 50, &rng.derive(3))?;
    Ok(report)
}

/// Mean `‖student(f) − teacher(f)‖²` over `per_class` pseudo-features of
/// each class, each routed to the teacher of its stage.
pub fn routed_mse(
    teachers: &[StageTeacher],
    student: &AdapterParams,
    bank: &ClassBank,
    classes: &[u32],
    per_class: usize,
    rng: &Rng,
) -> Result<f64> {
    let feats = sample_pseudo(bank, classes, per_class, rng)?;
    if feats.is_empty() {
        return Ok(0.0);
    }
    let mut s = Vec::with_capacity(feats.len());
    let mut t = Vec::with_capacity(feats.len());
    for f in &feats {
        s.push(student.forward(&f.values)?);
        t.push(teachers[teacher_for(teachers, f.stage)?].adapter.forward(&f.values)?);
    }
    mse_align(&s, &t)
}

/// The previous stage's inference model, whose posteriors the fine-tuned
/// classifier is held to on old-class pseudo-features.
pub struct Reference<'a> {
    pub adapter: &'a AdapterParams,
    pub classifier: &'a ClassifierParams,
}

/// Posterior of `reference` over the current classifier's rows, with zero
/// mass on rows the reference does not have.
fn padded_posterior(reference: &Reference<'_>, rows: usize, x: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let z = reference.classifier.logits(&reference.adapter.forward(x)?)?;
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    let mut p = softmax(&scaled)?;
    p.resize(rows, 0.0);
    Ok(p)
}

/// Mean `KL(reference ‖ current)` posterior divergence at temperature 1 over
/// `features`, padding the reference with zeros for classes it lacks.
pub fn boundary_kl(
    reference: &Reference<'_>,
    adapter: &AdapterParams,
    classifier: &ClassifierParams,
    features: &[FeatureVector],
) -> Result<f64> {
    if features.is_empty() {
        return Ok(0.0);
    }
    if !classifier.labels.starts_with(reference.classifier.labels()) {
        return Err(Error::InvalidArgument(
            "reference classes are not a prefix of the classifier's".into(),
        ));
    }
    let mut total = 0.0;
    for f in features {
        let p = padded_posterior(reference, classifier.n_classes(), &f.values, 1.0)?;
        let q = classifier.classify(&adapter.forward(&f.values)?)?;
        total += kl_unchecked(&p, &q);
    }
    Ok(total / features.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub epoch_loss: Vec<f64>,
    /// Accuracy on fresh pseudo-features, per old class.
    pub pseudo_accuracy: BTreeMap<u32, f64>,
}

/// Fine-tune the classifier with the student adapter fixed and the running
/// statistics frozen. Batches are half current-stage real features and half
/// pseudo-features spread over `old_classes`. With a reference model and
/// `λ_kl > 0`, pseudo-features also pay `λ_kl · KL(reference ‖ classifier)`
/// at the configured temperature.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classifier(
    classifier: &mut ClassifierParams,
    student: &AdapterParams,
    reference: Option<&Reference<'_>>,
    bank: &ClassBank,
    old_classes: &[u32],
    current: &[FeatureVector],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<FinetuneReport> {
    config.validate()?;
    if current.is_empty() {
        return Err(Error::EmptyInput("current-stage features"));
    }
    let k = classifier.n_classes();
    if let Some(r) = reference {
        if !classifier.labels.starts_with(r.classifier.labels()) {
            return Err(Error::InvalidArgument(
                "reference classes are not a prefix of the classifier's".into(),
            ));
        }
    }
    let real_targets = label_indices(classifier, current)?;
    let real_out: Vec<Vec<f64>> = current
        .iter()
        .map(|f| student.forward(&f.values))
        .collect::<Result<_>>()?;
    let mut sampler = PseudoSampler::new(bank, old_classes, rng.derive(1))?;
    let mut shuffle_rng = rng.derive(2);
    let half = (config.sgd.batch_size / 2).max(1);
    let temp = config.temperature;
    let mut state = SgdState::new(classifier.params.len());
    let mut report = FinetuneReport::default();
    let epochs = config.sgd.epochs;
    for epoch in 0..epochs {
        let sgd = SgdConfig {
            learning_rate: cosine_lr(config.sgd.learning_rate, epoch, epochs),
            ..config.sgd.clone()
        };
        let (mut loss_sum, mut batches) = (0.0, 0);
        for idx in real_batches(current.len(), half, &mut shuffle_rng) {
            let pseudo = sampler.draw(if old_classes.is_empty() { 0 } else { idx.len() });
            let mut ys: Vec<Vec<f64>> = idx.iter().map(|&i| real_out[i].clone()).collect();
            let mut targets: Vec<usize> = idx.iter().map(|&i| real_targets[i]).collect();
            let n_real = ys.len();
            for p in &pseudo {
                ys.push(student.forward(&p.values)?);
                targets.push(
                    classifier
                        .index_of(p.label)
                        .ok_or_else(|| Error::InvalidArgument(format!("class {} has no classifier row", p.label)))?,
                );
            }
            let (logits, zs, bn) = classifier.forward_batch(&ys, false);
            let lm = Matrix::from_rows(&logits)?;
            let (mut loss, mut d_logits) = cross_entropy_grad(&lm, &targets)?;
            if let (Some(r), true) = (reference, config.lambda_kl > 0.0 && !pseudo.is_empty()) {
                let m = pseudo.len() as f64;
                for (j, p) in pseudo.iter().enumerate() {
                    let i = n_real + j;
                    let target = padded_posterior(r, k, &p.values, temp)?;
                    let scaled: Vec<f64> = logits[i].iter().map(|v| v / temp).collect();
                    let q = softmax_unchecked(&scaled);
                    loss += config.lambda_kl * kl_unchecked(&target, &q) / m;
                    for c in 0..k {
                        let g = d_logits.get(i, c) + config.lambda_kl * (q[c] - target[c]) / (temp * m);
                        d_logits.set(i, c, g);
                    }
                }
            }
            loss_sum += loss;
            batches += 1;
            let mut grad = vec![0.0; classifier.params.len()];
            classifier.backward(&zs, &bn, &d_logits, &mut grad);
            sgd_step(&mut classifier.params, &grad, &sgd, &mut state)?;
        }
        report.epoch_loss.push(loss_sum / batches.max(1) as f64);
    }
    if !classifier.params.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let val = sample_pseudo(bank, old_classes, 100, &rng.derive(3))?;
    for &c in old_classes {
        let feats: Vec<FeatureVector> = val.iter().filter(|f| f.label == c).cloned().collect();
        report.pseudo_accuracy.insert(c, accuracy(student, classifier, &feats)?);
    }
    Ok(report)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::gmm::{fit_class_bank, EmConfig};

    fn random_vec(rng: &mut Rng, n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|_| s * rng.normal()).collect()
    }

    fn perturbed_adapter(dim: usize, rng: &mut Rng) -> AdapterParams {
        let mut a = AdapterParams::new(dim, rng).unwrap();
        for v in a.params_mut() {
            *v += 0.3 * rng.normal();
        }
        a
    }

    #[test]
    fn adapter_starts_as_identity() {
        let mut rng = Rng::new(1, 0);
        let a = AdapterParams::new(132, &mut rng).unwrap();
        assert_eq!(a.hidden(), 33);
        for _ in 0..20 {
            let x = random_vec(&mut rng, 132, 5.0);
            assert_eq!(a.forward(&x).unwrap(), x);
        }
        let mut b = perturbed_adapter(12, &mut rng);
        b.set_scale(0.0);
        let x = random_vec(&mut rng, 12, 1.0);
        assert_eq!(b.forward(&x).unwrap(), x);
        assert!(b.forward(&x[..5]).is_err());
    }

    #[test]
    fn adapter_matches_scalar_recomputation() {
        let mut rng = Rng::new(2, 0);
        let a = perturbed_adapter(8, &mut rng);
        let (d, h) = (8, 2);
        for _ in 0..50 {
            let x = random_vec(&mut rng, d, 1.0);
            let mut hid = [0.0; 2];
            for (j, hj) in hid.iter_mut().enumerate() {
                let mut s = a.down_bias()[j];
                for (k, xk) in x.iter().enumerate() {
                    s += a.down_weight()[j * d + k] * xk;
                }
                *hj = if s > 0.0 { s } else { 0.0 };
            }
            let got = a.forward(&x).unwrap();
            for r in 0..d {
                let mut s = a.up_bias()[r];
                for j in 0..h {
                    s += a.up_weight()[r * h + j] * hid[j];
                }
                assert!((got[r] - (x[r] + a.scale() * s)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3, 0);
        let a = perturbed_adapter(8, &mut rng);
        let xs_owned: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 8, 1.0)).collect();
        let xs: Vec<&[f64]> = xs_owned.iter().map(|v| v.as_slice()).collect();
        let probe: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 8, 1.0)).collect();
        let loss =
            |a: &AdapterParams| -> f64 { xs.iter().zip(&probe).map(|(x, p)| dot(&a.forward(x).unwrap(), p)).sum() };
        let (_, cache) = a.forward_batch_cached(&xs);
        let mut grad = vec![0.0; a.param_count()];
        a.backward(&xs, &cache, &probe, &mut grad);
        let h = 1e-5;
        for i in 0..a.param_count() {
            let mut p = a.clone();
            p.params[i] += h;
            let mut m = a.clone();
            m.params[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    fn batch_loss(c: &ClassifierParams, ys: &[Vec<f64>], probe: &Matrix, train: bool) -> f64 {
        let mut c = c.clone();
        let (logits, _, _) = c.forward_batch(ys, train);
        logits
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(k, v)| v * probe.get(i, k)).sum::<f64>())
            .sum()
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let mut rng = Rng::new(4, 0);
        let mut c = ClassifierParams::new(5, &[10, 11, 12], &mut rng).unwrap();
        for v in c.params.iter_mut() {
            *v += 0.2 * rng.normal();
        }
        c.running_mean = random_vec(&mut rng, 5, 1.0);
        c.running_var = (0..5).map(|_| 0.5 + rng.uniform()).collect();
        let ys: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 5, 2.0)).collect();
        let probe = Matrix::from_rows(&(0..6).map(|_| random_vec(&mut rng, 3, 1.0)).collect::<Vec<_>>()).unwrap();
        for train in [false, true] {
            let mut work = c.clone();
            let (_, zs, bn) = work.forward_batch(&ys, train);
            let mut grad = vec![0.0; c.params.len()];
            let d_in = c.backward(&zs, &bn, &probe, &mut grad);
            let h = 1e-5;
            for i in 0..c.params.len() {
                let mut p = c.clone();
                p.params[i] += h;
                let mut m = c.clone();
                m.params[i] -= h;
                let fd = (batch_loss(&p, &ys, &probe, train) - batch_loss(&m, &ys, &probe, train)) / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                    "train={train} param {i}"
                );
            }
            for n in 0..ys.len() {
                for j in 0..5 {
                    let mut p = ys.clone();
                    p[n][j] += h;
                    let mut m = ys.clone();
                    m[n][j] -= h;
                    let fd = (batch_loss(&c, &p, &probe, train) - batch_loss(&c, &m, &probe, train)) / (2.0 * h);
                    assert!(
                        (fd - d_in[n][j]).abs() <= 1e-5 * fd.abs().max(1.0),
                        "train={train} input {n},{j}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_posterior() {
        let mut rng = Rng::new(5, 0);
        let mut c = ClassifierParams::new(4, &[1, 2, 3, 4, 5], &mut rng).unwrap();
        let w = c.w_off();
        c.params[w..].iter_mut().for_each(|v| *v = 0.0);
        let p = c.classify(&random_vec(&mut rng, 4, 3.0)).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let mut c = ClassifierParams::new(4, &[1, 2, 3], &mut rng).unwrap();
        c.params.iter_mut().for_each(|v| *v += rng.normal());
        let p = c.classify(&random_vec(&mut rng, 4, 3.0)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(c.classify(&[0.0; 3]).is_err());
    }

    #[test]
    fn weight_align_rescales_new_rows_only() {
        let mut rng = Rng::new(6, 0);
        let mut c = ClassifierParams::new(2, &[0, 1], &mut rng).unwrap();
        c.set_row(0, &[1.0, 0.0], 0.0).unwrap();
        c.set_row(1, &[0.0, 1.0], 0.0).unwrap();
        c.expand(&[2, 3], &mut rng).unwrap();
        c.set_row(2, &[2.0, 0.0], 0.0).unwrap();
        c.set_row(3, &[0.0, -2.0], 0.0).unwrap();
        c.weight_align(2);
        assert_eq!(c.weight_row(2), &[1.0, 0.0]);
        assert_eq!(c.weight_row(3), &[0.0, -1.0]);

        let before = c.clone();
        c.weight_align(2);
        assert_eq!(before, c);
        c.weight_align(0);
        assert_eq!(before, c);

        for _ in 0..20 {
            let mut c = ClassifierParams::new(7, &[0, 1, 2], &mut rng).unwrap();
            c.expand(&[3, 4, 5, 6], &mut rng).unwrap();
            let w = c.w_off();
            c.params[w..].iter_mut().for_each(|v| *v = 3.0 * rng.normal());
            let old: Vec<Vec<f64>> = (0..3).map(|k| c.weight_row(k).to_vec()).collect();
            c.weight_align(3);
            for (k, row) in old.iter().enumerate() {
                assert_eq!(c.weight_row(k), row.as_slice());
            }
            let n = c.row_norms();
            let om = n[..3].iter().sum::<f64>() / 3.0;
            let nm = n[3..].iter().sum::<f64>() / 4.0;
            assert!((om - nm).abs() < 1e-9);
        }
        assert!(c.expand(&[0], &mut rng).is_err());
    }

    #[test]
    fn closed_form_distances() {
        let g = |m: Vec<f64>, v: Vec<f64>| GaussianMoments::new(m, v).unwrap();
        let a = g(vec![1.0, 2.0], vec![0.5, 3.0]);
        assert_eq!(w2_gaussian(&a, &a).unwrap(), 0.0);
        assert!((w2_gaussian(&g(vec![0.0], vec![1.0]), &g(vec![3.0], vec![1.0])).unwrap() - 9.0).abs() < 1e-12);
        assert!(
            (w2_gaussian(&g(vec![0.0, 0.0], vec![1.0, 1.0]), &g(vec![0.0, 0.0], vec![4.0, 4.0])).unwrap() - 2.0).abs()
                < 1e-12
        );
        assert!(GaussianMoments::new(vec![0.0], vec![-1.0]).is_err());
        let bad = GaussianMoments {
            mean: vec![0.0],
            var: vec![-1.0],
        };
        assert!(w2_gaussian(&bad, &g(vec![0.0], vec![1.0])).is_err());
        assert!(w2_gaussian(&g(vec![0.0], vec![1.0]), &g(vec![0.0, 1.0], vec![1.0, 1.0])).is_err());

        let x = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(mse_align(&x, &x).unwrap(), 0.0);
        assert_eq!(mse_align(&[vec![0.0, 1.0, 0.0]], &[vec![0.0; 3]]).unwrap(), 1.0);
        assert!(mse_align(&x, &x[..1]).is_err());
    }

    #[test]
    fn w2_is_symmetric_and_zero_only_on_equal_moments() {
        let mut rng = Rng::new(7, 0);
        for _ in 0..100 {
            let a =
                GaussianMoments::new(random_vec(&mut rng, 4, 1.0), (0..4).map(|_| rng.uniform()).collect()).unwrap();
            let b =
                GaussianMoments::new(random_vec(&mut rng, 4, 1.0), (0..4).map(|_| rng.uniform()).collect()).unwrap();
            let ab = w2_gaussian(&a, &b).unwrap();
            assert_eq!(ab, w2_gaussian(&b, &a).unwrap());
            assert!(ab > 1e-12);
        }
    }

    #[test]
    fn alignment_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8, 0);
        let s: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 3, 1.0)).collect();
        let t: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 3, 2.0)).collect();
        for lambda in [0.0, 0.1, 1.0] {
            let (loss, grad) = alignment_loss_grad(&s, &t, lambda).unwrap();
            if lambda == 0.0 {
                assert_eq!(loss, mse_align(&s, &t).unwrap());
            }
            let h = 1e-5;
            for n in 0..6 {
                for j in 0..3 {
                    let mut p = s.clone();
                    p[n][j] += h;
                    let mut m = s.clone();
                    m[n][j] -= h;
                    let fd = (alignment_loss_grad(&p, &t, lambda).unwrap().0
                        - alignment_loss_grad(&m, &t, lambda).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - grad[n][j]).abs() <= 1e-5 * fd.abs().max(1.0));
                }
            }
        }
    }

    /// Well-separated Gaussian blobs, one per label.
    fn blobs(labels: &[u32], per_class: usize, dim: usize, stage: usize, rng: &mut Rng) -> Vec<FeatureVector> {
        let mut out = Vec::new();
        for &l in labels {
            let mut crng = Rng::new(99, l as u64);
            let center = random_vec(&mut crng, dim, 3.0);
            for _ in 0..per_class {
                let v = center.iter().map(|c| c + rng.normal()).collect();
                out.push(FeatureVector::new(v, l, stage));
            }
        }
        out
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            sgd: SgdConfig {
                epochs,
                batch_size: 32,
                ..TrainConfig::default().sgd
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_training_fits_separable_classes_deterministically() {
        let mut rng = Rng::new(9, 0);
        let feats = blobs(&[0, 1, 2, 3], 60, 16, 0, &mut rng);
        let run = || {
            let mut r = Rng::new(10, 0);
            let mut a = AdapterParams::new(16, &mut r).unwrap();
            let mut c = ClassifierParams::new(16, &[0, 1, 2, 3], &mut r).unwrap();
            let rep = train_stage(
                &feats,
                &mut a,
                &mut c,
                &small_config(10),
                LogitScope::StageClasses,
                &mut r,
            )
            .unwrap();
            (a, c, rep)
        };
        let (a, c, rep) = run();
        assert!(accuracy(&a, &c, &feats).unwrap() >= 0.99);
        assert!(rep.epoch_loss.last().unwrap() < &rep.epoch_loss[0]);
        let (a2, c2, _) = run();
        assert_eq!(a, a2);
        assert_eq!(c, c2);

        let single = blobs(&[5], 20, 16, 0, &mut rng);
        let mut r = Rng::new(11, 0);
        let mut a = AdapterParams::new(16, &mut r).unwrap();
        let mut c = ClassifierParams::new(16, &[5], &mut r).unwrap();
        train_stage(
            &single,
            &mut a,
            &mut c,
            &small_config(2),
            LogitScope::StageClasses,
            &mut r,
        )
        .unwrap();
        assert_eq!(accuracy(&a, &c, &single).unwrap(), 1.0);
        assert!(matches!(
            train_stage(&[], &mut a, &mut c, &small_config(2), LogitScope::StageClasses, &mut r),
            Err(Error::EmptyInput(_))
        ));
    }

    fn bank_for(feats: &[FeatureVector], stage: usize) -> ClassBank {
        let mut groups: BTreeMap<u32, Vec<FeatureVector>> = BTreeMap::new();
        for f in feats {
            groups.entry(f.label).or_default().push(f.clone());
        }
        fit_class_bank(&groups, &EmConfig::default(), stage, &Rng::new(1, 1)).unwrap()
    }

    #[test]
    fn distillation_from_a_single_teacher_starts_at_zero() {
        let mut rng = Rng::new(12, 0);
        let feats = blobs(&[0, 1], 40, 8, 0, &mut rng);
        let bank = bank_for(&feats, 0);
        let teacher = perturbed_adapter(8, &mut rng);
        let teachers = vec![StageTeacher {
            adapter: teacher.clone(),
            stages: [0].into(),
        }];
        let mut student = teacher.clone();
        let rep = distill_student(
            &teachers,
            &mut student,
            &bank,
            &[],
            &feats,
            0,
            &small_config(2),
            &mut rng,
        )
        .unwrap();
        assert_eq!(rep.initial_loss, 0.0);
        assert!(rep.heldout_mse < 1e-20);
    }

    #[test]
    fn identical_teachers_are_learned() {
        let mut rng = Rng::new(13, 0);
        let old = blobs(&[0, 1], 80, 32, 0, &mut rng);
        let new = blobs(&[2, 3], 80, 32, 1, &mut rng);
        let mut bank = bank_for(&old, 0);
        bank.absorb(bank_for(&new, 1)).unwrap();
        // Teachers share the student's starting point and differ from it in
        // the residual branch, as after one stage of training.
        let base = AdapterParams::new(32, &mut rng).unwrap();
        let mut t = base.clone();
        let (lo, hi) = (t.up_w(), t.scale_offset());
        for v in &mut t.params_mut()[lo..hi] {
            *v += 0.05 * rng.normal();
        }
        let teachers = vec![
            StageTeacher {
                adapter: t.clone(),
                stages: [0].into(),
            },
            StageTeacher {
                adapter: t.clone(),
                stages: [1].into(),
            },
        ];
        let mut student = base.clone();
        let cfg = TrainConfig {
            lambda_w2: 0.0,
            sgd: SgdConfig {
                learning_rate: 0.02,
                ..small_config(300).sgd
            },
            ..TrainConfig::default()
        };
        let rep = distill_student(&teachers, &mut student, &bank, &[0, 1], &new, 1, &cfg, &mut rng).unwrap();
        assert!(rep.heldout_mse <= 1e-4, "held-out mse {}", rep.heldout_mse);

        let err = distill_student(&teachers, &mut student, &bank, &[0, 1, 9], &new, 1, &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::BankIncomplete { class: 9 }));
        assert!(err.to_string().contains("bank incomplete"));
    }

    #[test]
    fn finetune_restores_old_classes() {
        let mut rng = Rng::new(14, 0);
        let old = blobs(&[0, 1, 2], 80, 8, 0, &mut rng);
        let new = blobs(&[3, 4], 80, 8, 1, &mut rng);
        let cfg = small_config(15);
        let mut a = AdapterParams::new(8, &mut rng).unwrap();
        let mut c = ClassifierParams::new(8, &[0, 1, 2], &mut rng).unwrap();
        train_stage(&old, &mut a, &mut c, &cfg, LogitScope::StageClasses, &mut rng).unwrap();
        let bank = bank_for(&old, 0);
        let prev = c.clone();

        c.expand(&[3, 4], &mut rng).unwrap();
        c.weight_align(3);
        let mut naive = c.clone();
        let mut na = a.clone();
        train_stage(&new, &mut na, &mut naive, &cfg, LogitScope::AllClasses, &mut rng).unwrap();
        assert!(accuracy(&na, &naive, &old).unwrap() < 0.5);

        let reference = Reference {
            adapter: &a,
            classifier: &prev,
        };
        let rep = finetune_classifier(&mut c, &a, Some(&reference), &bank, &[0, 1, 2], &new, &cfg, &mut rng).unwrap();
        assert!(
            rep.pseudo_accuracy.values().all(|&v| v >= 0.95),
            "{:?}",
            rep.pseudo_accuracy
        );
        assert!(accuracy(&a, &c, &old).unwrap() >= 0.95);
        assert!(accuracy(&a, &c, &new).unwrap() >= 0.95);
        let pseudo = sample_pseudo(&bank, &[0, 1, 2], 50, &Rng::new(3, 3)).unwrap();
        assert!(boundary_kl(&reference, &a, &c, &pseudo).unwrap() < 0.05);

        // Balanced assembly: over many batches, every old class gets the
        // same number of slots to within one per batch.
        let mut sampler = PseudoSampler::new(&bank, &[0, 1, 2], Rng::new(5, 5)).unwrap();
        let mut counts = BTreeMap::new();
        for _ in 0..1000 {
            let mut batch_counts = BTreeMap::new();
            for f in sampler.draw(32) {
                *batch_counts.entry(f.label).or_insert(0usize) += 1;
            }
            let (lo, hi) = (
                batch_counts.values().min().unwrap(),
                batch_counts.values().max().unwrap(),
            );
            assert!(hi - lo <= 1);
            for (k, v) in batch_counts {
                *counts.entry(k).or_insert(0usize) += v;
            }
        }
        let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
        assert!((*hi - *lo) as f64 / 32_000.0 < 0.02, "{counts:?}");
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut rng = Rng::new(15, 0);
        let a = perturbed_adapter(12, &mut rng);
        let mut c = ClassifierParams::new(12, &[100_000, 100_001], &mut rng).unwrap();
        c.running_mean = random_vec(&mut rng, 12, 1.0);
        let mut ck = Checkpoint::default();
        a.to_checkpoint("adapter", &mut ck);
        c.to_checkpoint("classifier", &mut ck);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let a2 = AdapterParams::from_checkpoint("adapter", &back).unwrap();
        let c2 = ClassifierParams::from_checkpoint("classifier", &back).unwrap();
        assert_eq!(a2.param_count(), a.param_count());
        assert_eq!(c2.labels(), c.labels());
        let x = random_vec(&mut rng, 12, 1.0);
        let (pa, pb) = (
            c.classify(&a.forward(&x).unwrap()).unwrap(),
            c2.classify(&a2.forward(&x).unwrap()).unwrap(),
        );
        for (p, q) in pa.iter().zip(&pb) {
            assert!((p - q).abs() < 1e-4);
        }
        assert_eq!(
            AdapterParams::new(132, &mut rng).unwrap().payload_bytes(),
            4 * (2 * 132 * 33 + 33 + 132 + 1)
        );
    }
}
