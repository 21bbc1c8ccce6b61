//! The training loop and its contract pieces: warmup + multi-step learning
//! rate schedule, masked cross-entropy, AdamW with decoupled weight decay
//! and global gradient-norm clipping, deterministic batch sampling, periodic
//! validation with best-checkpoint tracking, and whole-image evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricReport, IGNORE_LABEL};
use crate::model::{normalize_images, save_checkpoint, Model};
use crate::nn::{read_tensors, write_tensors, Scalar};
use crate::rng::derived_rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer and schedule settings. Defaults are the full-scale contract;
/// desk-scale runs shrink `total_iters`, `batch_size` and `crop_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub warmup_start_lr: f64,
    pub milestones: Vec<u64>,
    pub decay_gamma: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    /// Validate (and consider checkpointing) every this many iterations.
    pub val_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            warmup_iters: 1000,
            warmup_start_lr: 1e-5,
            milestones: vec![30_000, 36_000],
            decay_gamma: 0.1,
            weight_decay: 0.005,
            grad_clip_norm: 1.0,
            total_iters: 40_000,
            batch_size: 8,
            crop_size: 64,
            val_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.warmup_start_lr > 0.0 && self.decay_gamma > 0.0) {
            return Err(Error::validation("learning rates and decay must be positive"));
        }
        if self.weight_decay < 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::validation(
                "weight decay must be non-negative and the clip norm positive",
            ));
        }
        if self.total_iters == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::validation(
                "total_iters, batch_size and crop_size must be positive",
            ));
        }
        if self.val_every == 0 {
            return Err(Error::validation("val_every must be positive"));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("milestones must be strictly increasing"));
        }
        if let Some(&first) = self.milestones.first() {
            if !(self.warmup_iters < first && first < self.total_iters) {
                return Err(Error::validation(format!(
                    "milestones must satisfy warmup ({}) < first milestone ({first}) < \
                     total iterations ({})",
                    self.warmup_iters, self.total_iters
                )));
            }
        }
        Ok(())
    }
}

/// The piecewise learning-rate schedule: linear warmup from
/// `warmup_start_lr` to `base_lr` over `warmup_iters`, then `base_lr`
/// decayed by `decay_gamma` at each milestone.
pub fn lr_at(iter: u64, config: &TrainConfig) -> Result<f64> {
    if iter >= config.total_iters {
        return Err(Error::validation(format!(
            "iteration {iter} is outside the schedule (total {})",
            config.total_iters
        )));
    }
    if iter < config.warmup_iters {
        let t = iter as f64 / config.warmup_iters as f64;
        return Ok(config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * t);
    }
    let mut lr = config.base_lr;
    for &m in &config.milestones {
        if m <= iter {
            lr *= config.decay_gamma;
        }
    }
    Ok(lr)
}

/// Mean per-pixel cross-entropy over non-ignored pixels, computed in f64,
/// plus the gradient of that mean with respect to the logits.
pub fn cross_entropy_loss<S: Scalar>(
    logits: &Array4<S>,
    targets: &Array3<u8>,
) -> Result<(f64, Array4<S>)> {
    let (b, c, h, w) = logits.dim();
    if targets.dim() != (b, h, w) {
        return Err(Error::validation(format!(
            "loss: logits {:?} do not match targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let valid = targets.iter().filter(|&&t| t != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::validation("loss: every pixel is ignored"));
    }
    let inv_n = 1.0 / valid as f64;
    let mut loss = 0.0;
    let mut dlogits = Array4::<S>::zeros((b, c, h, w));
    let mut probs = vec![0.0f64; c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let t = targets[[bi, y, x]];
                if t == IGNORE_LABEL {
                    continue;
                }
                let t = usize::from(t);
                if t >= c {
                    return Err(Error::validation(format!(
                        "loss: target class {t} out of range for {c} classes"
                    )));
                }
                let mut max = f64::NEG_INFINITY;
                for ci in 0..c {
                    max = max.max(logits[[bi, ci, y, x]].to_f64());
                }
                let mut denom = 0.0;
                for ci in 0..c {
                    let e = (logits[[bi, ci, y, x]].to_f64() - max).exp();
                    probs[ci] = e;
                    denom += e;
                }
                loss -= (probs[t] / denom).ln();
                for ci in 0..c {
                    let p = probs[ci] / denom;
                    let indicator = if ci == t { 1.0 } else { 0.0 };
                    dlogits[[bi, ci, y, x]] = S::from_f64((p - indicator) * inv_n);
                }
            }
        }
    }
    Ok((loss * inv_n, dlogits))
}

/// AdamW state: f64 first/second moments per parameter plus the step count.
pub struct AdamW {
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay update:
    /// `p ← p − lr·(m̂/(√v̂ + ε) + weight_decay·p)`.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut crate::nn::ParamStore<S>,
        grads: &BTreeMap<String, ArrayD<S>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.t += 1;
        let mc = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let vc = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let shape = params.get(&name)?.shape().to_vec();
            let g: ArrayD<f64> = match grads.get(&name) {
                Some(g) => g.mapv(<S as Scalar>::to_f64),
                None => ArrayD::zeros(shape.clone()),
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(shape.clone()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(shape));
            Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            });
            Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            });
            let p = params.get_mut(&name)?;
            Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let pv = p.to_f64();
                let update = (m / mc) / ((v / vc).sqrt() + ADAM_EPS) + weight_decay * pv;
                *p = S::from_f64(pv - lr * update);
            });
        }
        Ok(())
    }

    /// Serialize the moments for checkpoint extra sections.
    pub fn to_sections(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut m_bytes = Vec::new();
        write_tensors(&mut m_bytes, &self.m)
            .map_err(|e| Error::validation(format!("optimizer state: {e}")))?;
        let mut v_bytes = Vec::new();
        write_tensors(&mut v_bytes, &self.v)
            .map_err(|e| Error::validation(format!("optimizer state: {e}")))?;
        Ok(vec![
            ("adam_m".to_owned(), m_bytes),
            ("adam_v".to_owned(), v_bytes),
        ])
    }

    /// Rebuild from checkpoint sections; `t` is the number of completed steps.
    pub fn from_sections(m_bytes: &[u8], v_bytes: &[u8], t: u64) -> Result<Self> {
        Ok(AdamW {
            m: read_tensors(&mut &*m_bytes)?,
            v: read_tensors(&mut &*v_bytes)?,
            t,
        })
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new()
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

/// What a finished (or resumed-and-finished) training run reports.
pub struct TrainOutcome {
    pub history: Vec<IterRecord>,
    pub best_val_miou: f64,
    pub best_iteration: u64,
    /// Path of the best-validation checkpoint, when a directory was given.
    pub best_checkpoint: Option<PathBuf>,
    /// Path of the final-state checkpoint (resume point), when a directory
    /// was given.
    pub last_checkpoint: Option<PathBuf>,
}

/// Optimizer state + next iteration, for resuming an interrupted run.
pub struct ResumePoint {
    pub start_iter: u64,
    pub optimizer: AdamW,
}

impl ResumePoint {
    pub fn fresh() -> Self {
        ResumePoint {
            start_iter: 0,
            optimizer: AdamW::new(),
        }
    }

    /// Read a resume point from a checkpoint's extra sections and iteration.
    pub fn from_checkpoint(
        sections: &BTreeMap<String, Vec<u8>>,
        iteration: u64,
    ) -> Result<Self> {
        let m = sections
            .get("adam_m")
            .ok_or_else(|| Error::validation("checkpoint is missing the adam_m section"))?;
        let v = sections
            .get("adam_v")
            .ok_or_else(|| Error::validation("checkpoint is missing the adam_v section"))?;
        Ok(ResumePoint {
            start_iter: iteration,
            optimizer: AdamW::from_sections(m, v, iteration)?,
        })
    }
}

fn sample_batch<S: Scalar>(
    train: &[LabeledImage],
    config: &TrainConfig,
    iter: u64,
) -> Result<(Array4<S>, Array3<u8>)> {
    let crop = config.crop_size;
    let mut rng = derived_rng(config.seed, "batch", iter);
    // Draw distinct samples whenever the set is large enough: duplicated
    // images in a batch skew the batch-norm statistics (identical copies
    // shrink the apparent variance), which corrupts the running buffers
    // used at evaluation time.
    let indices: Vec<usize> = if config.batch_size <= train.len() {
        rand::seq::index::sample(&mut rng, train.len(), config.batch_size).into_vec()
    } else {
        (0..config.batch_size)
            .map(|_| rng.random_range(0..train.len()))
            .collect()
    };
    let mut images = Vec::with_capacity(config.batch_size);
    let mut targets = Array3::zeros((config.batch_size, crop, crop));
    for (b, &index) in indices.iter().enumerate() {
        let sample = &train[index];
        let y0 = rng.random_range(0..=sample.height() - crop);
        let x0 = rng.random_range(0..=sample.width() - crop);
        images.push(
            sample
                .image
                .slice(ndarray::s![y0..y0 + crop, x0..x0 + crop, ..])
                .to_owned(),
        );
        targets
            .index_axis_mut(Axis(0), b)
            .assign(&sample.mask.slice(ndarray::s![y0..y0 + crop, x0..x0 + crop]));
    }
    let refs: Vec<&Array3<u8>> = images.iter().collect();
    Ok((normalize_images(&refs)?, targets))
}

/// Whole-image evaluation: evaluation-mode forward per sample, argmax, one
/// confusion matrix over the whole set.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[LabeledImage]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::validation("evaluate: empty dataset"));
    }
    let num_classes = model.config().num_classes;
    let mut matrix = ConfusionMatrix::new(num_classes);
    for sample in samples {
        sample.check_classes(num_classes)?;
        let pred = model.predict(&sample.image)?;
        matrix.accumulate(pred.view(), sample.mask.view())?;
    }
    matrix.report()
}

/// Run (or resume) the training loop. Deterministic under
/// (`config.seed`, data order): batches are derived per iteration, so a
/// resumed run replays exactly the iterations an uninterrupted run would.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    config: &TrainConfig,
    resume: ResumePoint,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::validation("train: datasets must be non-empty"));
    }
    let num_classes = model.config().num_classes;
    for s in train_set {
        s.check_classes(num_classes)?;
        if s.height() < config.crop_size || s.width() < config.crop_size {
            return Err(Error::validation(format!(
                "train: sample {} is {}x{}, smaller than the {} crop",
                s.id,
                s.height(),
                s.width(),
                config.crop_size
            )));
        }
    }
    if resume.start_iter >= config.total_iters {
        return Err(Error::validation(format!(
            "resume iteration {} is not before total_iters {}",
            resume.start_iter, config.total_iters
        )));
    }

    let mut log: Option<std::io::BufWriter<std::fs::File>> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train.log");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };

    let mut optimizer = resume.optimizer;
    let mut history = Vec::new();
    let mut best_val_miou = f64::NEG_INFINITY;
    let mut best_iteration = 0;
    let mut best_checkpoint = None;
    for iter in resume.start_iter..config.total_iters {
        let lr = lr_at(iter, config)?;
        let (batch, targets) = sample_batch::<S>(train_set, config, iter)?;
        let (mut g, logits, _) = model.forward(&batch, true)?;
        let (loss, dlogits) = cross_entropy_loss(g.value(logits), &targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: iter as usize });
        }
        let mut grads = g.backward(logits, dlogits)?;
        let updates = g.take_buffer_updates();
        drop(g);
        model.apply_buffer_updates(updates)?;

        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Divergence { iteration: iter as usize });
        }
        if norm > config.grad_clip_norm {
            grads.scale(S::from_f64(config.grad_clip_norm / norm));
        }
        optimizer.step(&mut model.params, &grads.params, lr, config.weight_decay)?;

        history.push(IterRecord { iteration: iter, lr, loss });
        if let Some(log) = log.as_mut() {
            writeln!(log, "iter={iter} lr={lr:.10e} loss={loss:.10e}")
                .map_err(|e| Error::io("train.log", e))?;
        }

        let completed = iter + 1;
        if completed % config.val_every == 0 || completed == config.total_iters {
            let report = evaluate(model, val_set)?;
            if report.miou > best_val_miou {
                best_val_miou = report.miou;
                best_iteration = iter;
                if let Some(dir) = out_dir {
                    let path = dir.join("best.ckpt");
                    save_checkpoint(&path, model, completed, &section_refs(&optimizer)?)?;
                    best_checkpoint = Some(path);
                }
            }
        }
    }

    let last_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("last.ckpt");
            save_checkpoint(&path, model, config.total_iters, &section_refs(&optimizer)?)?;
            Some(path)
        }
        None => None,
    };
    if let Some(log) = log.as_mut() {
        log.flush().map_err(|e| Error::io("train.log", e))?;
    }
    Ok(TrainOutcome {
        history,
        best_val_miou,
        best_iteration,
        best_checkpoint,
        last_checkpoint,
    })
}

fn section_refs(optimizer: &AdamW) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let sections = optimizer.to_sections()?;
    let mut out = Vec::new();
    for (name, bytes) in sections {
        let name: &'static str = match name.as_str() {
            "adam_m" => "adam_m",
            "adam_v" => "adam_v",
            other => {
                return Err(Error::validation(format!(
                    "unexpected optimizer section {other}"
                )))
            }
        };
        out.push((name, bytes));
    }
    Ok(out)
}
