//! Twin-difference feature extractor.
//!
//! The same network `F` is applied to the impaired frame and to its clean
//! reconstruction, and the feature is `F(x) − F(x̂)`. `F` is two strided
//! 1-D convolutions (2→16→32 channels, kernel 7, stride 2, ReLU), global
//! average pooling, and a dense map to `D` outputs.
//!
//! Training happens once, on a pretraining population; [`Backbone::freeze`]
//! then yields a [`FrozenBackbone`] that only extracts.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::checkpoint::{self, Blob, Checkpoint};
use crate::error::{Error, Result};
use crate::numeric::{cosine_lr, cross_entropy_grad, sgd_step, Matrix, Rng, SgdConfig, SgdState};
use crate::signal::{apply_mask_pair, sample_mask_spec, FramePair};

pub const DEFAULT_FEATURE_DIM: usize = 132;

const IN_CHANNELS: usize = 2;
const C1: usize = 16;
const C2: usize = 32;
const KERNEL: usize = 7;
const STRIDE: usize = 2;

/// Fixed partition of each minibatch for parallel gradient accumulation;
/// the reduction order never depends on the thread count.
const GRAD_CHUNKS: usize = 8;

fn conv_out(len: usize) -> usize {
    (len - KERNEL) / STRIDE + 1
}

/// One backbone output: `F(x) − F(x̂)` with its class label and the stage
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: u32,
    pub stage: usize,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, label: u32, stage: usize) -> Self {
        Self { values, label, stage }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    frame_len: usize,
    dim: usize,
    l1: usize,
    l2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wd: usize,
    bd: usize,
    total: usize,
}

impl Layout {
    fn new(frame_len: usize, dim: usize) -> Self {
        let l1 = conv_out(frame_len);
        let l2 = conv_out(l1);
        let w1 = 0;
        let b1 = w1 + C1 * IN_CHANNELS * KERNEL;
        let w2 = b1 + C1;
        let b2 = w2 + C2 * C1 * KERNEL;
        let wd = b2 + C2;
        let bd = wd + dim * C2;
        let total = bd + dim;
        Self {
            frame_len,
            dim,
            l1,
            l2,
            w1,
            b1,
            w2,
            b2,
            wd,
            bd,
            total,
        }
    }
}

/// Trainable extractor parameters, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    layout_dims: (usize, usize),
    params: Vec<f64>,
}

struct Trunk {
    a1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
}

impl Backbone {
    /// He-initialized convolutions, Xavier-initialized dense layer.
    pub fn new(frame_len: usize, feature_dim: usize, rng: &mut Rng) -> Result<Self> {
        if frame_len < 2 * KERNEL + STRIDE || feature_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone needs frame_len >= {} and feature_dim > 0",
                2 * KERNEL + STRIDE
            )));
        }
        let lay = Layout::new(frame_len, feature_dim);
        let mut params = vec![0.0; lay.total];
        let he1 = (2.0 / (IN_CHANNELS * KERNEL) as f64).sqrt();
        params[lay.w1..lay.b1].iter_mut().for_each(|w| *w = he1 * rng.normal());
        let he2 = (2.0 / (C1 * KERNEL) as f64).sqrt();
        params[lay.w2..lay.b2].iter_mut().for_each(|w| *w = he2 * rng.normal());
        let xav = (2.0 / (C2 + feature_dim) as f64).sqrt();
        params[lay.wd..lay.bd].iter_mut().for_each(|w| *w = xav * rng.normal());
        Ok(Self {
            layout_dims: (frame_len, feature_dim),
            params,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(self.layout_dims.0, self.layout_dims.1)
    }

    pub fn frame_len(&self) -> usize {
        self.layout_dims.0
    }

    pub fn feature_dim(&self) -> usize {
        self.layout_dims.1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Round parameters to `f32` and stop training.
    pub fn freeze(mut self) -> FrozenBackbone {
        checkpoint::quantize_f32(&mut self.params);
        FrozenBackbone(self)
    }

    fn trunk(&self, input: &[f64]) -> Trunk {
        let lay = self.layout();
        let p = &self.params;
        let len = lay.frame_len;
        let mut a1 = vec![0.0; C1 * lay.l1];
        for o in 0..C1 {
            let bias = p[lay.b1 + o];
            for t in 0..lay.l1 {
                let mut z = bias;
                for c in 0..IN_CHANNELS {
                    let w = &p[lay.w1 + (o * IN_CHANNELS + c) * KERNEL..][..KERNEL];
                    let x = &input[c * len + STRIDE * t..][..KERNEL];
                    z += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                a1[o * lay.l1 + t] = z.max(0.0);
            }
        }
        let mut a2 = vec![0.0; C2 * lay.l2];
        let mut pooled = vec![0.0; C2];
        for o in 0..C2 {
            let bias = p[lay.b2 + o];
            let mut acc = 0.0;
            for t in 0..lay.l2 {
                let mut z = bias;
                for c in 0..C1 {
                    let w = &p[lay.w2 + (o * C1 + c) * KERNEL..][..KERNEL];
                    let x = &a1[c * lay.l1 + STRIDE * t..][..KERNEL];
                    z += w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                let a = z.max(0.0);
                a2[o * lay.l2 + t] = a;
                acc += a;
            }
            pooled[o] = acc / lay.l2 as f64;
        }
        Trunk { a1, a2, pooled }
    }

    /// Accumulate conv-parameter gradients given `d loss / d pooled`.
    fn trunk_backward(&self, input: &[f64], trunk: &Trunk, d_pooled: &[f64], grads: &mut [f64]) {
        let lay = self.layout();
        let p = &self.params;
        let len = lay.frame_len;
        let mut d_a1 = vec![0.0; C1 * lay.l1];
        for o in 0..C2 {
            let dz_base = d_pooled[o] / lay.l2 as f64;
            if dz_base == 0.0 {
                continue;
            }
            for t in 0..lay.l2 {
                if trunk.a2[o * lay.l2 + t] <= 0.0 {
                    continue;
                }
                grads[lay.b2 + o] += dz_base;
                for c in 0..C1 {
                    let off = lay.w2 + (o * C1 + c) * KERNEL;
                    let a_off = c * lay.l1 + STRIDE * t;
                    for k in 0..KERNEL {
                        grads[off + k] += dz_base * trunk.a1[a_off + k];
                        d_a1[a_off + k] += dz_base * p[off + k];
                    }
                }
            }
        }
        for o in 0..C1 {
            for t in 0..lay.l1 {
                let idx = o * lay.l1 + t;
                if trunk.a1[idx] <= 0.0 {
                    continue;
                }
                let dz = d_a1[idx];
                if dz == 0.0 {
                    continue;
                }
                grads[lay.b1 + o] += dz;
                for c in 0..IN_CHANNELS {
                    let off = lay.w1 + (o * IN_CHANNELS + c) * KERNEL;
                    let x_off = c * len + STRIDE * t;
                    for k in 0..KERNEL {
                        grads[off + k] += dz * input[x_off + k];
                    }
                }
            }
        }
    }

    fn check_pair(&self, pair: &FramePair) -> Result<()> {
        let len = self.frame_len();
        for f in [&pair.x, &pair.x_hat] {
            if f.len() != len {
                return Err(Error::shape("backbone frame length", len, f.len()));
            }
        }
        Ok(())
    }

    fn diff_pooled(&self, pair: &FramePair) -> (Vec<f64>, Vec<f64>, Trunk, Trunk) {
        let in_x = pair.x.to_channels();
        let in_h = pair.x_hat.to_channels();
        let tx = self.trunk(&in_x);
        let th = self.trunk(&in_h);
        (in_x, in_h, tx, th)
    }

    fn dense(&self, diff: &[f64]) -> Vec<f64> {
        let lay = self.layout();
        let wd = &self.params[lay.wd..lay.bd];
        (0..lay.dim)
            .map(|i| wd[i * C2..(i + 1) * C2].iter().zip(diff).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn feature_values(&self, pair: &FramePair) -> Vec<f64> {
        let tx = self.trunk(&pair.x.to_channels());
        let th = self.trunk(&pair.x_hat.to_channels());
        let diff: Vec<f64> = tx.pooled.iter().zip(&th.pooled).map(|(a, b)| a - b).collect();
        // The dense bias cancels in the difference.
        self.dense(&diff)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let lay = self.layout();
        let p = &self.params;
        let mut ck = Checkpoint::default();
        ck.push(Blob::new("meta.frame_len", vec![1], vec![lay.frame_len as f64]));
        ck.push(Blob::new(
            "conv1.weight",
            vec![C1, IN_CHANNELS, KERNEL],
            p[lay.w1..lay.b1].to_vec(),
        ));
        ck.push(Blob::new("conv1.bias", vec![C1], p[lay.b1..lay.w2].to_vec()));
        ck.push(Blob::new(
            "conv2.weight",
            vec![C2, C1, KERNEL],
            p[lay.w2..lay.b2].to_vec(),
        ));
        ck.push(Blob::new("conv2.bias", vec![C2], p[lay.b2..lay.wd].to_vec()));
        ck.push(Blob::new("dense.weight", vec![lay.dim, C2], p[lay.wd..lay.bd].to_vec()));
        ck.push(Blob::new("dense.bias", vec![lay.dim], p[lay.bd..].to_vec()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let frame_len = ck.get("meta.frame_len")?.data[0] as usize;
        let dim = ck.get("dense.bias")?.data.len();
        let lay = Layout::new(frame_len, dim);
        let mut params = Vec::with_capacity(lay.total);
        for (name, expect) in [
            ("conv1.weight", lay.b1 - lay.w1),
            ("conv1.bias", lay.w2 - lay.b1),
            ("conv2.weight", lay.b2 - lay.w2),
            ("conv2.bias", lay.wd - lay.b2),
            ("dense.weight", lay.bd - lay.wd),
            ("dense.bias", lay.total - lay.bd),
        ] {
            let blob = ck.get(name)?;
            if blob.data.len() != expect {
                return Err(Error::shape("backbone checkpoint blob", expect, blob.data.len()));
            }
            params.extend_from_slice(&blob.data);
        }
        Ok(Self {
            layout_dims: (frame_len, dim),
            params,
        })
    }
}

/// Extractor whose parameters can no longer change.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone(Backbone);

impl FrozenBackbone {
    pub fn feature_dim(&self) -> usize {
        self.0.feature_dim()
    }

    pub fn frame_len(&self) -> usize {
        self.0.frame_len()
    }

    pub fn param_count(&self) -> usize {
        self.0.param_count()
    }

    pub fn checksum(&self) -> u64 {
        checkpoint::checksum(self.0.params())
    }

    /// `F(x) − F(x̂)` for one pair.
    pub fn extract(&self, pair: &FramePair, stage: usize) -> Result<FeatureVector> {
        self.0.check_pair(pair)?;
        Ok(FeatureVector::new(self.0.feature_values(pair), pair.x.device_id, stage))
    }

    /// Parallel [`extract`](Self::extract), output in input order.
    pub fn extract_batch(&self, pairs: &[FramePair], stage: usize) -> Result<Vec<FeatureVector>> {
        pairs.par_iter().map(|p| self.extract(p, stage)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.0.to_checkpoint()
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Backbone::from_checkpoint(ck)?.freeze())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub feature_dim: usize,
    pub sgd: SgdConfig,
    /// Probability of replacing a training pair with a randomly masked copy.
    pub mask_prob: f64,
    pub gate_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            feature_dim: DEFAULT_FEATURE_DIM,
            sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                batch_size: 64,
                epochs: 30,
                weight_decay: 1e-4,
            },
            mask_prob: 0.5,
            gate_accuracy: 0.90,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub classes: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub epoch_loss: Vec<f64>,
}

/// Train the extractor with a throwaway linear head over the pretraining
/// classes, check the held-out gate, and freeze.
///
/// `reserved_ids` are the incremental-pool device ids; any overlap with the
/// pretraining labels is rejected before training.
pub fn pretrain(
    train: &[FramePair],
    heldout: &[FramePair],
    reserved_ids: &BTreeSet<u32>,
    config: &PretrainConfig,
    rng: &mut Rng,
) -> Result<(FrozenBackbone, PretrainReport)> {
    config.sgd.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("pretrain corpus"));
    }
    let labels: BTreeSet<u32> = train.iter().map(|p| p.x.device_id).collect();
    if let Some(id) = labels.iter().find(|id| reserved_ids.contains(id)) {
        return Err(Error::InvalidArgument(format!(
            "pretrain class {id} overlaps the incremental pool"
        )));
    }
    let index: BTreeMap<u32, usize> = labels.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let classes = index.len();
    let frame_len = train[0].x.len();
    let mut net = Backbone::new(frame_len, config.feature_dim, &mut rng.derive(1))?;
    for p in train.iter().chain(heldout) {
        net.check_pair(p)?;
    }

    let dim = config.feature_dim;
    // Head layout: weight [classes × dim] then bias.
    let mut head = vec![0.0; classes * dim + classes];
    let xav = (1.0 / dim as f64).sqrt();
    let mut init_rng = rng.derive(2);
    head[..classes * dim]
        .iter_mut()
        .for_each(|w| *w = xav * init_rng.normal());

    let mut net_state = SgdState::new(net.param_count());
    let mut head_state = SgdState::new(head.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng.derive(3);
    let mut mask_rng = rng.derive(4);
    let mut epoch_loss = Vec::with_capacity(config.sgd.epochs);
    let lay = net.layout();

    for epoch in 0..config.sgd.epochs {
        shuffle_rng.shuffle(&mut order);
        let lr = cosine_lr(config.sgd.learning_rate, epoch, config.sgd.epochs);
        let sgd = SgdConfig {
            learning_rate: lr,
            ..config.sgd.clone()
        };
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.sgd.batch_size) {
            let pairs: Vec<FramePair> = batch
                .iter()
                .map(|&i| {
                    if mask_rng.uniform() < config.mask_prob {
                        let spec = sample_mask_spec(frame_len, &mut mask_rng)?;
                        apply_mask_pair(&train[i], &spec)
                    } else {
                        Ok(train[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let targets: Vec<usize> = pairs.iter().map(|p| index[&p.x.device_id]).collect();

            let forwards: Vec<_> = pairs
                .par_iter()
                .map(|p| {
                    let (in_x, in_h, tx, th) = net.diff_pooled(p);
                    let diff: Vec<f64> = tx.pooled.iter().zip(&th.pooled).map(|(a, b)| a - b).collect();
                    let feat = net.dense(&diff);
                    (in_x, in_h, tx, th, diff, feat)
                })
                .collect();
            let n = pairs.len();
            let mut logits = Matrix::zeros(n, classes);
            for (i, f) in forwards.iter().enumerate() {
                let feat = &f.5;
                for c in 0..classes {
                    let w = &head[c * dim..(c + 1) * dim];
                    logits.set(
                        i,
                        c,
                        head[classes * dim + c] + w.iter().zip(feat).map(|(a, b)| a * b).sum::<f64>(),
                    );
                }
            }
            let (loss, d_logits) = cross_entropy_grad(&logits, &targets)?;
            loss_sum += loss;
            batches += 1;

            let mut head_grad = vec![0.0; head.len()];
            let mut d_feats = vec![vec![0.0; dim]; n];
            for i in 0..n {
                let feat = &forwards[i].5;
                for c in 0..classes {
                    let g = d_logits.get(i, c);
                    if g == 0.0 {
                        continue;
                    }
                    head_grad[classes * dim + c] += g;
                    let w = &head[c * dim..(c + 1) * dim];
                    let hg = &mut head_grad[c * dim..(c + 1) * dim];
                    for j in 0..dim {
                        hg[j] += g * feat[j];
                        d_feats[i][j] += g * w[j];
                    }
                }
            }

            let chunk = n.div_ceil(GRAD_CHUNKS).max(1);
            let partials: Vec<Vec<f64>> = (0..n)
                .collect::<Vec<_>>()
                .par_chunks(chunk)
                .map(|idx| {
                    let mut g = vec![0.0; net.param_count()];
                    for &i in idx {
                        let (in_x, in_h, tx, th, diff, _) = &forwards[i];
                        let df = &d_feats[i];
                        let wd = &net.params[lay.wd..lay.bd];
                        let mut d_pooled = vec![0.0; C2];
                        for r in 0..dim {
                            if df[r] == 0.0 {
                                continue;
                            }
                            let gw = &mut g[lay.wd + r * C2..lay.wd + (r + 1) * C2];
                            for c in 0..C2 {
                                gw[c] += df[r] * diff[c];
                                d_pooled[c] += df[r] * wd[r * C2 + c];
                            }
                        }
                        net.trunk_backward(in_x, tx, &d_pooled, &mut g);
                        let neg: Vec<f64> = d_pooled.iter().map(|v| -v).collect();
                        net.trunk_backward(in_h, th, &neg, &mut g);
                    }
                    g
                })
                .collect();
            let mut net_grad = vec![0.0; net.param_count()];
            for part in &partials {
                for (a, b) in net_grad.iter_mut().zip(part) {
                    *a += b;
                }
            }
            sgd_step(&mut net.params, &net_grad, &sgd, &mut net_state)?;
            sgd_step(&mut head, &head_grad, &sgd, &mut head_state)?;
        }
        let mean = loss_sum / batches.max(1) as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }

    // Rescale the dense layer so training features have unit mean
    // per-dimension second moment; the head absorbs the inverse scale.
    let sq: f64 = train
        .par_iter()
        .map(|p| net.feature_values(p).iter().map(|v| v * v).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let rms = (sq / (train.len() * dim) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        net.params[lay.wd..lay.bd].iter_mut().for_each(|w| *w /= rms);
        head[..classes * dim].iter_mut().for_each(|w| *w *= rms);
    }

    let frozen = net.freeze();
    let accuracy = |pairs: &[FramePair]| -> Result<f64> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let feats = frozen.extract_batch(pairs, 0)?;
        let mut correct = 0usize;
        for f in &feats {
            let best = (0..classes)
                .map(|c| {
                    let w = &head[c * dim..(c + 1) * dim];
                    head[classes * dim + c] + w.iter().zip(&f.values).map(|(a, b)| a * b).sum::<f64>()
                })
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
                )
                .0;
            if index.get(&f.label) == Some(&best) {
                correct += 1;
            }
        }
        Ok(correct as f64 / pairs.len() as f64)
    };
    let report = PretrainReport {
        classes,
        train_accuracy: accuracy(train)?,
        heldout_accuracy: accuracy(heldout)?,
        epoch_loss,
    };
    log::info!(
        "pretrain: {} classes, train acc {:.4}, held-out acc {:.4}",
        classes,
        report.train_accuracy,
        report.heldout_accuracy
    );
    if report.heldout_accuracy < config.gate_accuracy {
        return Err(Error::PretrainUnderfit {
            accuracy: report.heldout_accuracy,
            gate: config.gate_accuracy,
        });
    }
    Ok((frozen, report))
}
