//! SGD training loop with momentum, weight decay, a multi-step LR schedule,
//! and end-of-epoch callbacks (the attack engine plugs in there).

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub milestones: Vec<usize>,
    pub lr_gamma: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Random crop (pad 4) + horizontal flip, applied per batch draw.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // CIFAR-style backdoor-training defaults; callers compress the
        // schedule for smaller runs.
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 200,
            milestones: vec![100, 150],
            lr_gamma: 0.1,
            batch_size: 128,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut prev: Option<usize> = None;
        for &m in &self.milestones {
            if m >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {m} is not below epochs {}",
                    self.epochs
                )));
            }
            if let Some(p) = prev {
                if m <= p {
                    return Err(Error::Config("milestones must be strictly increasing".into()));
                }
            }
            prev = Some(m);
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_acc: f64,
}

/// End-of-epoch hook. Invoked exactly once per epoch, after the
/// optimizer's last step of that epoch.
pub trait EpochCallback {
    fn on_epoch_end(&mut self, model: &mut Model, epoch: usize) -> Result<()>;
}

/// Trains a copy of `model` on `(images, labels)` and returns it with the
/// per-epoch history. Deterministic for a fixed seed.
pub fn train(
    model: &Model,
    images: &Tensor,
    labels: &[u32],
    config: &TrainConfig,
    callbacks: &mut [&mut dyn EpochCallback],
) -> Result<(Model, Vec<EpochStats>)> {
    config.validate()?;
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 || labels.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let classes = model.meta.class_count as u32;
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let mut trained = model.clone();
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok((trained, history));
    }

    let mut velocity: Vec<Option<Tensor>> = vec![None; trained.params.len()];
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut shuffle_rng = SeededRng::derive(config.seed, 0x5f5f ^ epoch as u64);
        shuffle_rng.shuffle(&mut indices);
        let mut aug_rng = SeededRng::derive(config.seed, 0xa76 ^ epoch as u64);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + config.batch_size).min(n);
            let batch_idx = &indices[start..end];
            let (batch, targets) =
                assemble_batch(images, labels, batch_idx, config.augment, &mut aug_rng);
            let (loss, batch_correct, grads) = trained.train_step_grads(&batch, &targets)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: format!("loss became {loss} at sample offset {start}"),
                });
            }
            loss_sum += loss * batch_idx.len() as f64;
            correct += batch_correct;
            seen += batch_idx.len();
            sgd_step(&mut trained, &grads.by_param, &mut velocity, lr, config);
            start = end;
        }

        for cb in callbacks.iter_mut() {
            cb.on_epoch_end(&mut trained, epoch)?;
        }
        trained.meta.epoch = (epoch + 1) as u32;
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: 100.0 * correct as f64 / seen as f64,
        });
    }
    Ok((trained, history))
}

fn sgd_step(
    model: &mut Model,
    grads: &[Option<Tensor>],
    velocity: &mut [Option<Tensor>],
    lr: f32,
    config: &TrainConfig,
) {
    for idx in 0..model.params.len() {
        if !model.params.entry(idx).trainable {
            continue;
        }
        let Some(grad) = grads[idx].as_ref() else {
            continue;
        };
        let vel = velocity[idx].get_or_insert_with(|| Tensor::zeros(grad.shape()));
        let w = model.params.get_mut(idx);
        for ((wi, gi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(vel.data_mut())
        {
            let g = gi + config.weight_decay * *wi;
            *vi = config.momentum * *vi + g;
            *wi -= lr * *vi;
        }
    }
}

/// Gathers a batch by index, optionally applying pad-4 random crop and
/// horizontal flip. Augmentation draws are consumed per sample in order,
/// so batch content is independent of batch size boundaries.
fn assemble_batch(
    images: &Tensor,
    labels: &[u32],
    batch_idx: &[usize],
    augment: bool,
    aug_rng: &mut SeededRng,
) -> (Tensor, Vec<u32>) {
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut data = Vec::with_capacity(batch_idx.len() * per);
    let mut targets = Vec::with_capacity(batch_idx.len());
    for &i in batch_idx {
        let src = &images.data()[i * per..(i + 1) * per];
        if augment {
            let dy = aug_rng.index(9) as isize - 4;
            let dx = aug_rng.index(9) as isize - 4;
            let flip = aug_rng.bool(0.5);
            let mut out = vec![0.0f32; per];
            for ch in 0..c {
                for y in 0..h {
                    let sy = y as isize + dy;
                    for x in 0..w {
                        let sx = x as isize + dx;
                        let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[(ch * h + sy as usize) * w + sx as usize]
                        };
                        let tx = if flip { w - 1 - x } else { x };
                        out[(ch * h + y) * w + tx] = v;
                    }
                }
            }
            data.extend_from_slice(&out);
        } else {
            data.extend_from_slice(src);
        }
        targets.push(labels[i]);
    }
    let mut shape = vec![batch_idx.len()];
    shape.extend_from_slice(&s[1..]);
    (
        Tensor::from_vec(&shape, data).expect("batch assembly preserves validity"),
        targets,
    )
}

/// Convenience wrapper: clean accuracy of a snapshot on a labeled set.
pub fn eval_accuracy(model: &Model, images: &Tensor, labels: &[u32]) -> Result<f64> {
    model.accuracy(images, labels, 256)
}
