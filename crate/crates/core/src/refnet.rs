//! A small 1-D convolutional age-group classifier on fixed-length crops,
//! trained with focal or cross-entropy loss, and its input-gradient
//! saliency maps.
//!
//! Blocks are convolution (odd kernel, "same" padding, stride) followed by
//! SiLU; a global pooling layer feeds a linear head. Gradients are computed
//! by hand-written backpropagation in `f64`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;

pub const NET_FS: u32 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub crop_len: usize,
    pub blocks: Vec<ConvBlock>,
    pub pooling: Pooling,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for NetSpec {
    fn default() -> Self {
        let b = |filters| ConvBlock {
            filters,
            kernel: 7,
            stride: 2,
        };
        NetSpec {
            crop_len: 300,
            blocks: vec![b(16), b(32), b(32), b(64)],
            pooling: Pooling::Average,
            n_classes: 15,
            seed: 0,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.crop_len == 0 || self.n_classes < 2 || self.blocks.is_empty() {
            return Err(Error::invalid("net needs a crop length, two classes and one block"));
        }
        for b in &self.blocks {
            if b.kernel % 2 == 0 || b.filters == 0 || b.stride == 0 {
                return Err(Error::invalid(format!("bad conv block {b:?}: kernels must be odd")));
            }
        }
        Ok(())
    }

    fn lengths(&self) -> Vec<usize> {
        let mut l = vec![self.crop_len];
        for b in &self.blocks {
            let last = *l.last().unwrap();
            l.push((last - 1) / b.stride + 1);
        }
        l
    }

    fn channels(&self) -> Vec<usize> {
        std::iter::once(1)
            .chain(self.blocks.iter().map(|b| b.filters))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w: usize,
    b: usize,
}

fn layouts(spec: &NetSpec) -> (Vec<Layout>, Layout, usize) {
    let ch = spec.channels();
    let mut off = 0;
    let mut out = Vec::new();
    for (i, blk) in spec.blocks.iter().enumerate() {
        let w = off;
        off += blk.filters * ch[i] * blk.kernel;
        let b = off;
        off += blk.filters;
        out.push(Layout { w, b });
    }
    let w = off;
    off += spec.n_classes * ch[ch.len() - 1];
    let b = off;
    off += spec.n_classes;
    (out, Layout { w, b }, off)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Network parameters as one flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub spec: NetSpec,
    pub params: Vec<f64>,
}

struct Cache {
    /// Input of every block, then the last block's output.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
    logits: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    c_in: usize,
    l_in: usize,
    w: &[f64],
    b: &[f64],
    blk: ConvBlock,
    l_out: usize,
) -> Vec<f64> {
    let k = blk.kernel;
    let pad = k / 2;
    let mut out = vec![0.0; blk.filters * l_out];
    for o in 0..blk.filters {
        let row = &mut out[o * l_out..(o + 1) * l_out];
        row.fill(b[o]);
        for c in 0..c_in {
            let wk = &w[(o * c_in + c) * k..(o * c_in + c + 1) * k];
            let x = &input[c * l_in..(c + 1) * l_in];
            for (t, acc) in row.iter_mut().enumerate() {
                let start = (t * blk.stride) as isize - pad as isize;
                let j0 = (-start).max(0) as usize;
                let j1 = k.min((l_in as isize - start).max(0) as usize);
                let mut s = 0.0;
                for j in j0..j1 {
                    s += wk[j] * x[(start + j as isize) as usize];
                }
                *acc += s;
            }
        }
    }
    out
}

impl Net {
    /// He-normal initialized weights, zero biases.
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let (blocks, head, n) = layouts(&spec);
        let ch = spec.channels();
        let mut params = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for (i, (blk, lay)) in spec.blocks.iter().zip(&blocks).enumerate() {
            let fan_in = (ch[i] * blk.kernel) as f64;
            let d = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            for p in &mut params[lay.w..lay.b] {
                *p = d.sample(&mut rng);
            }
        }
        let fan_in = *ch.last().unwrap() as f64;
        let d = Normal::new(0.0, (1.0 / fan_in).sqrt()).unwrap();
        for p in &mut params[head.w..head.b] {
            *p = d.sample(&mut rng);
        }
        Ok(Net { spec, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn forward_cache(&self, x: &[f64]) -> Cache {
        let spec = &self.spec;
        let (blocks, head, _) = layouts(spec);
        let lens = spec.lengths();
        let ch = spec.channels();
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::new();
        for (i, (blk, lay)) in spec.blocks.iter().zip(&blocks).enumerate() {
            let z = conv_forward(
                &acts[i],
                ch[i],
                lens[i],
                &self.params[lay.w..lay.b],
                &self.params[lay.b..lay.b + blk.filters],
                *blk,
                lens[i + 1],
            );
            acts.push(z.iter().map(|v| silu(*v)).collect());
            pre.push(z);
        }
        let c = *ch.last().unwrap();
        let l = *lens.last().unwrap();
        let last = acts.last().unwrap();
        let mut pooled = vec![0.0; c];
        let mut argmax = vec![0; c];
        for k in 0..c {
            let row = &last[k * l..(k + 1) * l];
            match spec.pooling {
                Pooling::Average => pooled[k] = row.iter().sum::<f64>() / l as f64,
                Pooling::Max => {
                    let m = eval::argmax(row);
                    argmax[k] = m;
                    pooled[k] = row[m];
                }
            }
        }
        let logits = (0..spec.n_classes)
            .map(|o| self.params[head.b + o] + (0..c).map(|k| self.params[head.w + o * c + k] * pooled[k]).sum::<f64>())
            .collect();
        Cache {
            acts,
            pre,
            pooled,
            argmax,
            logits,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_crop(x)?;
        Ok(self.forward_cache(x).logits)
    }

    fn check_crop(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.crop_len {
            return Err(Error::LengthMismatch {
                expected: self.spec.crop_len,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Gradients of `sum_o dlogits[o] * logit_o` w.r.t. parameters and input.
    fn backward(&self, cache: &Cache, dlogits: &[f64], want_params: bool) -> (Vec<f64>, Vec<f64>) {
        let spec = &self.spec;
        let (blocks, head, n) = layouts(spec);
        let lens = spec.lengths();
        let ch = spec.channels();
        let mut g = if want_params { vec![0.0; n] } else { Vec::new() };
        let c = *ch.last().unwrap();
        let mut dpooled = vec![0.0; c];
        for (o, &d) in dlogits.iter().enumerate() {
            if want_params {
                g[head.b + o] += d;
                for k in 0..c {
                    g[head.w + o * c + k] += d * cache.pooled[k];
                }
            }
            for k in 0..c {
                dpooled[k] += d * self.params[head.w + o * c + k];
            }
        }
        let l = *lens.last().unwrap();
        let mut dact = vec![0.0; c * l];
        for k in 0..c {
            match spec.pooling {
                Pooling::Average => dact[k * l..(k + 1) * l].fill(dpooled[k] / l as f64),
                Pooling::Max => dact[k * l + cache.argmax[k]] = dpooled[k],
            }
        }
        for i in (0..spec.blocks.len()).rev() {
            let blk = spec.blocks[i];
            let lay = blocks[i];
            let (c_in, l_in, l_out) = (ch[i], lens[i], lens[i + 1]);
            let dz: Vec<f64> = dact.iter().zip(&cache.pre[i]).map(|(d, z)| d * silu_grad(*z)).collect();
            let input = &cache.acts[i];
            let k = blk.kernel;
            let pad = k / 2;
            let mut din = vec![0.0; c_in * l_in];
            for o in 0..blk.filters {
                let dzo = &dz[o * l_out..(o + 1) * l_out];
                if want_params {
                    g[lay.b + o] += dzo.iter().sum::<f64>();
                }
                for cc in 0..c_in {
                    let wbase = lay.w + (o * c_in + cc) * k;
                    let x = &input[cc * l_in..(cc + 1) * l_in];
                    let dx = &mut din[cc * l_in..(cc + 1) * l_in];
                    for (t, &d) in dzo.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let start = (t * blk.stride) as isize - pad as isize;
                        let j0 = (-start).max(0) as usize;
                        let j1 = k.min((l_in as isize - start).max(0) as usize);
                        for j in j0..j1 {
                            let idx = (start + j as isize) as usize;
                            if want_params {
                                g[wbase + j] += d * x[idx];
                            }
                            dx[idx] += d * self.params[wbase + j];
                        }
                    }
                }
            }
            dact = din;
        }
        (g, dact)
    }

    /// Loss of one crop and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, x: &[f64], label: usize, loss: &LossSpec, weight: f64) -> Result<(f64, Vec<f64>)> {
        self.check_crop(x)?;
        let cache = self.forward_cache(x);
        let (l, dlogits) = compute_loss(&cache.logits, label, loss, weight)?;
        Ok((l, self.backward(&cache, &dlogits, true).0))
    }

    /// d(logit of `class`)/d(input).
    pub fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check_crop(x)?;
        if class >= self.spec.n_classes {
            return Err(Error::ClassOutOfRange {
                class,
                n_classes: self.spec.n_classes,
            });
        }
        let cache = self.forward_cache(x);
        let mut d = vec![0.0; self.spec.n_classes];
        d[class] = 1.0;
        Ok(self.backward(&cache, &d, false).1)
    }

    pub fn predict_crop(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(crate::gbdt::softmax(&self.forward(x)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let net: Net = serde_json::from_str(&s)?;
        net.spec.validate()?;
        if net.params.len() != layouts(&net.spec).2 {
            return Err(Error::invalid("parameter count does not match the net spec"));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    Focal { gamma: f64 },
}

impl LossSpec {
    pub fn focal() -> Self {
        LossSpec::Focal { gamma: 2.0 }
    }

    /// Default initial learning rate for this loss.
    pub fn default_lr(&self) -> f64 {
        match self {
            LossSpec::CrossEntropy => 1e-2,
            LossSpec::Focal { .. } => 1e-5,
        }
    }
}

/// Weighted cross-entropy or focal loss of one sample and its gradient
/// w.r.t. the logits.
pub fn compute_loss(logits: &[f64], label: usize, loss: &LossSpec, weight: f64) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::ClassOutOfRange {
            class: label,
            n_classes: logits.len(),
        });
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let log_py = logits[label] - lse;
    let p: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    let py = p[label];
    let (value, scale) = match *loss {
        LossSpec::CrossEntropy => (-weight * log_py, weight),
        LossSpec::Focal { gamma } => {
            if gamma < 0.0 {
                return Err(Error::invalid("focal gamma must be non-negative"));
            }
            let q = 1.0 - py;
            let mod_factor = q.powf(gamma);
            let slope = if gamma > 0.0 && q > 0.0 {
                gamma * q.powf(gamma - 1.0) * py * log_py
            } else {
                0.0
            };
            (-weight * mod_factor * log_py, weight * (mod_factor - slope))
        }
    };
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| scale * (pj - if j == label { 1.0 } else { 0.0 }))
        .collect();
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub loss: LossSpec,
    pub class_weights: Option<Vec<f64>>,
    /// Initial learning rate; the loss's default when absent.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    /// Random crops drawn from every training record per epoch.
    pub crops_per_record: usize,
    /// Evenly spaced fixed crops per validation record.
    pub valid_crops_per_record: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            loss: LossSpec::focal(),
            class_weights: None,
            lr: None,
            weight_decay: 1e-2,
            max_epochs: 20,
            plateau_patience: 2,
            plateau_factor: 0.1,
            early_stop_patience: 3,
            batch_size: 32,
            crops_per_record: 8,
            valid_crops_per_record: 4,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn initial_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.loss.default_lr())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_auc: Option<f64>,
    pub improved: bool,
    pub lr_reduced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trained {
    pub net: Net,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Labelled 100 Hz signals.
#[derive(Debug, Clone, Copy)]
pub struct CropData<'a> {
    pub signals: &'a [Vec<f64>],
    pub labels: &'a [usize],
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            params[i] -= lr * (update + wd * params[i]);
        }
    }
}

fn check_data(d: &CropData<'_>, spec: &NetSpec) -> Result<()> {
    if d.signals.len() != d.labels.len() {
        return Err(Error::LengthMismatch {
            expected: d.labels.len(),
            actual: d.signals.len(),
        });
    }
    if let Some(s) = d.signals.iter().find(|s| s.len() < spec.crop_len) {
        return Err(Error::TooShort(format!(
            "{} samples, crop needs {}",
            s.len(),
            spec.crop_len
        )));
    }
    if let Some(&l) = d.labels.iter().find(|&&l| l >= spec.n_classes) {
        return Err(Error::ClassOutOfRange {
            class: l,
            n_classes: spec.n_classes,
        });
    }
    Ok(())
}

/// Evenly spaced crop starts, first at 0 and last at the end.
pub fn fixed_crop_starts(len: usize, crop_len: usize, n: usize) -> Vec<usize> {
    let span = len - crop_len;
    if n <= 1 {
        return vec![span / 2];
    }
    (0..n).map(|i| i * span / (n - 1)).collect()
}

/// Mean loss over every crop, computed in parallel with an ordered sum.
fn mean_loss(
    net: &Net,
    crops: &[(usize, usize)],
    data: &CropData<'_>,
    cfg: &FitConfig,
    weights: &[f64],
) -> Result<f64> {
    let crop_len = net.spec.crop_len;
    let losses = crops
        .par_iter()
        .map(|&(r, s)| {
            let logits = net.forward(&data.signals[r][s..s + crop_len])?;
            Ok(compute_loss(&logits, data.labels[r], &cfg.loss, weights[data.labels[r]])?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mini-batch AdamW training on random crops. The learning rate drops by
/// `plateau_factor` after `plateau_patience` epochs without validation-loss
/// improvement; training stops after `early_stop_patience` such epochs and
/// the best weights are restored.
pub fn fit(train: CropData<'_>, valid: Option<CropData<'_>>, spec: &NetSpec, cfg: &FitConfig) -> Result<Trained> {
    check_data(&train, spec)?;
    if let Some(v) = &valid {
        check_data(v, spec)?;
    }
    if train.signals.is_empty() {
        return Err(Error::invalid("no training records"));
    }
    let weights = match &cfg.class_weights {
        Some(w) => {
            if w.len() != spec.n_classes || w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid("class weights must be positive, one per class"));
            }
            let mut counts = vec![0usize; spec.n_classes];
            for &l in train.labels {
                counts[l] += 1;
            }
            if let Some(c) = counts.iter().position(|&c| c == 0) {
                return Err(Error::EmptyClass(c));
            }
            w.clone()
        }
        None => vec![1.0; spec.n_classes],
    };
    let mut net = Net::new(spec.clone())?;
    let mut opt = AdamW::new(net.n_params());
    let mut lr = cfg.initial_lr();
    let crop_len = spec.crop_len;
    let valid_crops: Vec<(usize, usize)> = valid
        .map(|v| {
            v.signals
                .iter()
                .enumerate()
                .flat_map(|(r, s)| {
                    fixed_crop_starts(s.len(), crop_len, cfg.valid_crops_per_record)
                        .into_iter()
                        .map(move |st| (r, st))
                })
                .collect()
        })
        .unwrap_or_default();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut since_reduce = 0;

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut crops: Vec<(usize, usize)> = Vec::new();
        for (r, s) in train.signals.iter().enumerate() {
            for _ in 0..cfg.crops_per_record {
                crops.push((r, rng.random_range(0..=s.len() - crop_len)));
            }
        }
        crops.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in crops.chunks(cfg.batch_size.max(1)) {
            let per_sample = batch
                .par_iter()
                .map(|&(r, s)| {
                    let y = train.labels[r];
                    net.loss_and_grad(&train.signals[r][s..s + crop_len], y, &cfg.loss, weights[y])
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; net.n_params()];
            for (l, g) in &per_sample {
                epoch_loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if lr != 0.0 {
                opt.step(&mut net.params, &grad, lr, cfg.weight_decay);
            }
        }
        let train_loss = epoch_loss / crops.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged in epoch {epoch}")));
        }
        let (valid_loss, valid_auc) = match valid {
            Some(v) => {
                let vl = mean_loss(&net, &valid_crops, &v, cfg, &weights)?;
                let probs = v
                    .signals
                    .par_iter()
                    .map(|s| {
                        let starts = fixed_crop_starts(s.len(), crop_len, cfg.valid_crops_per_record);
                        mean_probs(&net, s, &starts)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(vl), eval::macro_auc(&probs, v.labels).ok().map(|a| a.macro_auc))
            }
            None => (None, None),
        };
        let monitored = valid_loss.unwrap_or(train_loss);
        let improved = best.as_ref().map_or(true, |(b, _, _)| monitored < *b);
        let mut lr_reduced = false;
        if improved {
            best = Some((monitored, epoch, net.params.clone()));
            since_best = 0;
            since_reduce = 0;
        } else {
            since_best += 1;
            since_reduce += 1;
            if since_reduce >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                lr_reduced = true;
                since_reduce = 0;
            }
        }
        log::info!("epoch {epoch}: train {train_loss:.4} valid {valid_loss:?} auc {valid_auc:?} lr {lr:e}");
        history.push(EpochRecord {
            epoch,
            lr: if lr_reduced { lr / cfg.plateau_factor } else { lr },
            train_loss,
            valid_loss,
            valid_auc,
            improved,
            lr_reduced,
        });
        if since_best >= cfg.early_stop_patience {
            break;
        }
    }
    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, _, params)) = best {
        net.params = params;
    }
    Ok(Trained {
        net,
        history,
        best_epoch,
    })
}

fn mean_probs(net: &Net, signal: &[f64], starts: &[usize]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; net.spec.n_classes];
    for &s in starts {
        for (a, p) in acc.iter_mut().zip(net.predict_crop(&signal[s..s + net.spec.crop_len])?) {
            *a += p;
        }
    }
    acc.iter_mut().for_each(|a| *a /= starts.len() as f64);
    Ok(acc)
}

/// Starts of the non-overlapping crops tiling a signal from its beginning.
pub fn tile_starts(len: usize, crop_len: usize) -> Vec<usize> {
    (0..len / crop_len).map(|i| i * crop_len).collect()
}

/// Mean of per-crop softmax outputs over non-overlapping crops.
pub fn predict_record(net: &Net, signal: &[f64]) -> Result<Vec<f64>> {
    if signal.len() < net.spec.crop_len {
        return Err(Error::TooShort(format!(
            "{} samples, one crop needs {}",
            signal.len(),
            net.spec.crop_len
        )));
    }
    mean_probs(net, signal, &tile_starts(signal.len(), net.spec.crop_len))
}

/// Saliency of one crop in the interchange layout. Also the form in which
/// attributions from external models are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    #[serde(default)]
    pub crop_id: String,
    pub record_id: String,
    pub fs: u32,
    pub crop_start: usize,
    pub signal: Vec<f64>,
    pub attribution: Vec<f64>,
    pub target_class: usize,
}

impl AttributionMap {
    pub fn validate(&self) -> Result<()> {
        if self.signal.len() != self.attribution.len() {
            return Err(Error::LengthMismatch {
                expected: self.signal.len(),
                actual: self.attribution.len(),
            });
        }
        if self.attribution.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("attribution values must be non-negative"));
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Vec<AttributionMap>> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let maps: Vec<AttributionMap> = serde_json::from_str(&s)?;
        for m in &maps {
            m.validate()?;
        }
        Ok(maps)
    }
}

/// |d logit / d input| for `target` (the predicted class when `None`).
pub fn saliency(net: &Net, crop: &[f64], target: Option<usize>) -> Result<(Vec<f64>, usize)> {
    let class = match target {
        Some(c) => c,
        None => eval::argmax(&net.forward(crop)?),
    };
    let g = net.input_gradient(crop, class)?;
    Ok((g.into_iter().map(f64::abs).collect(), class))
}

pub fn saliency_map(
    net: &Net,
    record_id: &str,
    signal: &[f64],
    crop_start: usize,
    target: Option<usize>,
) -> Result<AttributionMap> {
    let crop = signal
        .get(crop_start..crop_start + net.spec.crop_len)
        .ok_or_else(|| Error::TooShort(format!("crop at {crop_start} exceeds the signal")))?;
    let (attribution, target_class) = saliency(net, crop, target)?;
    Ok(AttributionMap {
        crop_id: format!("{record_id}@{crop_start}"),
        record_id: record_id.to_string(),
        fs: NET_FS,
        crop_start,
        signal: crop.to_vec(),
        attribution,
        target_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> NetSpec {
        NetSpec {
            crop_len: 40,
            blocks: vec![
                ConvBlock {
                    filters: 3,
                    kernel: 5,
                    stride: 2,
                },
                ConvBlock {
                    filters: 4,
                    kernel: 3,
                    stride: 2,
                },
            ],
            pooling: Pooling::Average,
            n_classes: 3,
            seed: 5,
        }
    }

    fn crop(len: usize, phase: f64) -> Vec<f64> {
        (0..len)
            .map(|i| (i as f64 * 0.3 + phase).sin() + 0.2 * (i as f64 * 1.7).cos())
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn focal_collapses_to_ce() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let (a, ga) = compute_loss(&z, 1, &LossSpec::CrossEntropy, 1.7).unwrap();
        let (b, gb) = compute_loss(&z, 1, &LossSpec::Focal { gamma: 0.0 }, 1.7).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(rel_err(&ga, &gb) < 1e-12);
    }

    #[test]
    fn focal_saturated_is_zero() {
        let (l, g) = compute_loss(&[800.0, 0.0, 0.0], 0, &LossSpec::focal(), 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let z = vec![0.3, -1.2, 2.5, 0.7, -0.4];
        for loss in [
            LossSpec::CrossEntropy,
            LossSpec::focal(),
            LossSpec::Focal { gamma: 0.5 },
        ] {
            let (_, g) = compute_loss(&z, 3, &loss, 0.8).unwrap();
            let h = 1e-6;
            let fd: Vec<f64> = (0..z.len())
                .map(|j| {
                    let mut p = z.clone();
                    let mut m = z.clone();
                    p[j] += h;
                    m[j] -= h;
                    (compute_loss(&p, 3, &loss, 0.8).unwrap().0 - compute_loss(&m, 3, &loss, 0.8).unwrap().0)
                        / (2.0 * h)
                })
                .collect();
            assert!(rel_err(&g, &fd) < 1e-6, "{loss:?}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        for pooling in [Pooling::Average, Pooling::Max] {
            let spec = NetSpec {
                pooling,
                ..small_spec()
            };
            let mut net = Net::new(spec).unwrap();
            let x = crop(40, 0.4);
            let loss = LossSpec::focal();
            let (_, g) = net.loss_and_grad(&x, 2, &loss, 1.3).unwrap();
            let h = 1e-5;
            let fd: Vec<f64> = (0..net.n_params())
                .map(|i| {
                    let orig = net.params[i];
                    net.params[i] = orig + h;
                    let lp = net.loss_and_grad(&x, 2, &loss, 1.3).unwrap().0;
                    net.params[i] = orig - h;
                    let lm = net.loss_and_grad(&x, 2, &loss, 1.3).unwrap().0;
                    net.params[i] = orig;
                    (lp - lm) / (2.0 * h)
                })
                .collect();
            assert!(rel_err(&g, &fd) < 1e-5, "{pooling:?}: {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Net::new(small_spec()).unwrap();
        let x = crop(40, 1.1);
        let g = net.input_gradient(&x, 1).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += h;
                m[i] -= h;
                (net.forward(&p).unwrap()[1] - net.forward(&m).unwrap()[1]) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&g, &fd) < 1e-5);
    }

    #[test]
    fn zero_head_gives_zero_saliency() {
        let mut net = Net::new(small_spec()).unwrap();
        let (_, head, _) = layouts(&net.spec);
        net.params[head.w..head.b].fill(0.0);
        let (s, _) = saliency(&net, &crop(40, 0.0), Some(0)).unwrap();
        assert_eq!(s.len(), 40);
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn record_prediction_is_crop_mean() {
        let net = Net::new(small_spec()).unwrap();
        let a = crop(40, 0.0);
        let b = crop(40, 2.0);
        let mut rec = a.clone();
        rec.extend(&b);
        rec.extend([0.0; 7]);
        let p = net.predict_crop(&a).unwrap();
        let q = net.predict_crop(&b).unwrap();
        let r = predict_record(&net, &rec).unwrap();
        for k in 0..3 {
            assert!((r[k] - (p[k] + q[k]) / 2.0).abs() < 1e-15);
        }
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(predict_record(&net, &a).unwrap(), p);
        assert!(predict_record(&net, &a[..39]).is_err());
    }

    #[test]
    fn even_kernels_rejected() {
        let mut spec = small_spec();
        spec.blocks[0].kernel = 4;
        assert!(Net::new(spec).is_err());
    }

    fn toy_data() -> (Vec<Vec<f64>>, Vec<usize>) {
        let signals: Vec<Vec<f64>> = (0..12)
            .map(|i| crop(80, i as f64).iter().map(|v| v * (1.0 + (i % 3) as f64)).collect())
            .collect();
        let labels = (0..12).map(|i| i % 3).collect();
        (signals, labels)
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (s, l) = toy_data();
        let d = CropData {
            signals: &s,
            labels: &l,
        };
        let cfg = FitConfig {
            lr: Some(0.0),
            max_epochs: 3,
            ..FitConfig::default()
        };
        let t = fit(d, Some(d), &small_spec(), &cfg).unwrap();
        assert_eq!(t.net, Net::new(small_spec()).unwrap());
    }

    #[test]
    fn training_is_reproducible_and_scheduled() {
        let (s, l) = toy_data();
        let d = CropData {
            signals: &s,
            labels: &l,
        };
        let cfg = FitConfig {
            loss: LossSpec::CrossEntropy,
            max_epochs: 12,
            batch_size: 4,
            ..FitConfig::default()
        };
        let a = fit(d, Some(d), &small_spec(), &cfg).unwrap();
        let b = fit(d, Some(d), &small_spec(), &cfg).unwrap();
        assert_eq!(a, b);
        // Replay the schedule from the history.
        let mut bad = 0;
        let mut bad_since_reduce = 0;
        for (i, e) in a.history.iter().enumerate() {
            if e.improved {
                bad = 0;
                bad_since_reduce = 0;
                assert!(!e.lr_reduced);
            } else {
                bad += 1;
                bad_since_reduce += 1;
                assert_eq!(e.lr_reduced, bad_since_reduce == 2, "epoch {i}");
                if e.lr_reduced {
                    bad_since_reduce = 0;
                }
            }
            if bad == 3 {
                assert_eq!(i + 1, a.history.len());
            }
        }
        let weighted = FitConfig {
            class_weights: Some(vec![1.0; 3]),
            ..cfg
        };
        let l2 = vec![0usize; 12];
        assert!(matches!(
            fit(
                CropData {
                    signals: &s,
                    labels: &l2
                },
                None,
                &small_spec(),
                &weighted
            ),
            Err(Error::EmptyClass(1))
        ));
    }
}
