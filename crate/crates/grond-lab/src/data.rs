//! Dataset ingestion, the synthetic desk-scale dataset, and poisoned-set
//! construction.

use std::fs;
use std::io::Write;
use std::path::Path;

use grond_core::rng::SeededRng;
use grond_core::tensor::Tensor;
use grond_core::Model;

use crate::error::{Error, Result};
use crate::triggers::{apply_trigger_with, Trigger};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// Images in [0,1] (N,C,H,W) with integer labels in [0, class_count).
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub split_tag: SplitTag,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<u32>,
        split_tag: SplitTag,
        class_count: usize,
    ) -> Result<LabeledDataset> {
        let n = *images
            .shape()
            .first()
            .ok_or_else(|| Error::Argument("images tensor has no batch dimension".into()))?;
        if images.shape().len() != 4 {
            return Err(Error::Argument(format!(
                "expected NCHW images, got shape {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::Argument(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Argument("image values must lie in [0,1]".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            split_tag,
            class_count,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.sample(i)
    }

    pub fn with_tag(mut self, tag: SplitTag) -> LabeledDataset {
        self.split_tag = tag;
        self
    }

    pub fn subset(&self, indices: &[usize], tag: SplitTag) -> Result<LabeledDataset> {
        let samples: Vec<Tensor> = indices.iter().map(|&i| self.images.sample(i)).collect();
        let images = Tensor::stack(&samples)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(images, labels, tag, self.class_count)
    }

    /// Seeded random split: `n` samples into the first set, rest stay.
    pub fn split_off(&self, n: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if n > self.n() {
            return Err(Error::Argument(format!(
                "cannot split {n} samples from a set of {}",
                self.n()
            )));
        }
        let mut idx: Vec<usize> = (0..self.n()).collect();
        SeededRng::derive(seed, 0x5b117).shuffle(&mut idx);
        let (head, tail) = idx.split_at(n);
        let mut head = head.to_vec();
        let mut tail = tail.to_vec();
        head.sort_unstable();
        tail.sort_unstable();
        Ok((
            self.subset(&head, SplitTag::Val)?,
            self.subset(&tail, self.split_tag)?,
        ))
    }

    /// Seeded sample of `n` indices, e.g. a defender's clean subset.
    pub fn sample_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n()).collect();
        SeededRng::derive(seed, 0x5a3b1e).shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        idx
    }
}

const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST_FILE: &str = "test_batch.bin";
const CIFAR10_RECORD: usize = 3073; // 1 label byte + 3*32*32 pixels
const CIFAR10_PER_BATCH: usize = 10_000;

/// Loads the standard CIFAR10 binary batches: 50,000 train and 10,000 test
/// images, 3x32x32, scaled to [0,1].
pub fn load_cifar10(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train_images = Vec::with_capacity(5 * CIFAR10_PER_BATCH * 3072);
    let mut train_labels = Vec::with_capacity(5 * CIFAR10_PER_BATCH);
    for file in CIFAR10_TRAIN_FILES {
        read_cifar_batch(&root.join(file), &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::with_capacity(CIFAR10_PER_BATCH * 3072);
    let mut test_labels = Vec::with_capacity(CIFAR10_PER_BATCH);
    read_cifar_batch(&root.join(CIFAR10_TEST_FILE), &mut test_images, &mut test_labels)?;

    let train = LabeledDataset::new(
        Tensor::from_vec(&[train_labels.len(), 3, 32, 32], train_images)?,
        train_labels,
        SplitTag::Train,
        10,
    )?;
    let test = LabeledDataset::new(
        Tensor::from_vec(&[test_labels.len(), 3, 32, 32], test_images)?,
        test_labels,
        SplitTag::Test,
        10,
    )?;
    Ok((train, test))
}

fn read_cifar_batch(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<u32>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        file: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if bytes.len() != CIFAR10_RECORD * CIFAR10_PER_BATCH {
        return Err(Error::Ingestion {
            file: path.to_path_buf(),
            detail: format!(
                "expected {} bytes ({} records), got {}",
                CIFAR10_RECORD * CIFAR10_PER_BATCH,
                CIFAR10_PER_BATCH,
                bytes.len()
            ),
        });
    }
    let mut per_class = [0usize; 10];
    for record in bytes.chunks_exact(CIFAR10_RECORD) {
        let label = record[0];
        if label > 9 {
            return Err(Error::Ingestion {
                file: path.to_path_buf(),
                detail: format!("label byte {label} out of range"),
            });
        }
        per_class[label as usize] += 1;
        labels.push(label as u32);
        images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    if per_class.iter().sum::<usize>() != CIFAR10_PER_BATCH {
        return Err(Error::Ingestion {
            file: path.to_path_buf(),
            detail: "per-class counts do not sum to the batch size".into(),
        });
    }
    Ok(())
}

/// Per-pixel RMS amplitude of the class watermark around the gray
/// background, and the per-pixel noise sigma. The ratio is what makes
/// the task accurate yet adversarially sensitive at /255-scale budgets:
/// accuracy comes from aggregating hundreds of weak pixels, so no single
/// margin survives an l-inf perturbation a few times the amplitude.
pub const SYNTHETIC_SIGNAL_RMS: f32 = 0.030;
pub const SYNTHETIC_NOISE_SIGMA: f32 = 0.10;

/// Deterministic desk-scale dataset: each class is a dense field of soft
/// color blobs (a smoothed random pattern at small amplitude) on a gray
/// background, plus per-pixel noise. Class geometry depends only on the
/// class index and `side`; the seed drives the noise, so two seeds give
/// train/test splits of the same task.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if side < 8 {
        return Err(Error::Argument(format!("side must be at least 8, got {side}")));
    }
    if per_class == 0 {
        return Err(Error::Argument("per_class must be positive".into()));
    }
    let mut rng = SeededRng::derive(seed, 0x5e7);
    let mut samples = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let base = class_prototype(class, side);
        for _ in 0..per_class {
            let mut img = base.clone();
            for v in img.data_mut() {
                *v = (*v + rng.normal(0.0, SYNTHETIC_NOISE_SIGMA)).clamp(0.0, 1.0);
            }
            samples.push(img);
            labels.push(class as u32);
        }
    }
    LabeledDataset::new(
        Tensor::stack(&samples)?,
        labels,
        SplitTag::Train,
        classes,
    )
}

/// Noise-free class prototype; nearest-centroid reference classifiers in
/// the tests are built against fresh draws of these.
pub fn class_prototype(class: usize, side: usize) -> Tensor {
    let mut geo = SeededRng::derive(0xc1a55, class as u64);
    let mut raw = vec![0.0f32; 3 * side * side];
    geo.fill_normal(&mut raw, 0.0, 1.0);
    // 3x3 smoothing per channel turns the iid field into soft blobs.
    let mut smooth = vec![0.0f32; raw.len()];
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0f32;
                let mut wsum = 0.0f32;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if yy < 0 || xx < 0 || yy >= side as i32 || xx >= side as i32 {
                            continue;
                        }
                        let w = if dy == 0 && dx == 0 { 2.0 } else { 1.0 };
                        acc += w * raw[(c * side + yy as usize) * side + xx as usize];
                        wsum += w;
                    }
                }
                smooth[(c * side + y) * side + x] = acc / wsum;
            }
        }
    }
    let rms = (smooth.iter().map(|v| (v * v) as f64).sum::<f64>() / smooth.len() as f64)
        .sqrt() as f32;
    let mut img = Tensor::filled(&[3, side, side], 0.5);
    for (o, v) in img.data_mut().iter_mut().zip(&smooth) {
        *o = (*o + SYNTHETIC_SIGNAL_RMS * v / rms).clamp(0.08, 0.92);
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Poisoned samples keep their true labels (drawn from the target class).
    Clean,
    /// Poisoned samples are drawn anywhere and relabeled to the target.
    Dirty,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PoisonPlan {
    pub target_class: u32,
    pub rate: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl PoisonPlan {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Argument(format!(
                "poisoning rate {} outside [0,1]",
                self.rate
            )));
        }
        if self.target_class as usize >= class_count {
            return Err(Error::Argument(format!(
                "target class {} out of range for {class_count} classes",
                self.target_class
            )));
        }
        Ok(())
    }
}

/// Number of poisoned samples for a rate over the whole training set.
pub fn poison_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

#[derive(Clone, Debug)]
pub struct PoisonedDataset {
    /// The poisoned dataset: trigger applied and (in dirty mode) labels
    /// rewritten at `poisoned_indices`; everything else bit-identical to
    /// the base.
    pub data: LabeledDataset,
    /// Sorted, unique indices of poisoned samples.
    pub poisoned_indices: Vec<usize>,
    pub trigger_ref: String,
}

impl PoisonedDataset {
    pub fn poisoned_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.data.n()];
        for &i in &self.poisoned_indices {
            flags[i] = true;
        }
        flags
    }

    /// Audit export: one poisoned index per line.
    pub fn export_indices(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &i in &self.poisoned_indices {
            out.push_str(&format!("{i}\n"));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::Ingestion {
            file: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        f.write_all(out.as_bytes()).map_err(|e| Error::Ingestion {
            file: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(())
    }
}

/// Builds D_p: selects round(rate * N) samples (seeded, without
/// replacement), applies the trigger to them, clips to [0,1], and rewrites
/// labels in dirty mode. `surrogate` is required only for the per-sample
/// PGD trigger, which synthesizes a fresh perturbation per image.
pub fn build_poisoned(
    base: &LabeledDataset,
    trigger: &Trigger,
    plan: &PoisonPlan,
    surrogate: Option<&Model>,
) -> Result<PoisonedDataset> {
    plan.validate(base.class_count)?;
    let count = poison_count(plan.rate, base.n());
    let mut candidates: Vec<usize> = match plan.label_mode {
        LabelMode::Clean => (0..base.n())
            .filter(|&i| base.labels[i] == plan.target_class)
            .collect(),
        LabelMode::Dirty => (0..base.n()).collect(),
    };
    if count > candidates.len() {
        return Err(Error::Capacity {
            needed: count,
            available: candidates.len(),
        });
    }
    SeededRng::derive(plan.seed, 0xb01).shuffle(&mut candidates);
    let mut chosen: Vec<usize> = candidates.into_iter().take(count).collect();
    chosen.sort_unstable();

    let mut images = base.images.clone();
    let mut labels = base.labels.clone();
    let shape = base.image_shape();
    let per: usize = shape.iter().product();
    for &i in &chosen {
        let poisoned = apply_trigger_with(trigger, &base.image(i), surrogate, i as u64)?;
        images.data_mut()[i * per..(i + 1) * per].copy_from_slice(poisoned.data());
        if plan.label_mode == LabelMode::Dirty {
            labels[i] = plan.target_class;
        }
    }
    let data = LabeledDataset::new(images, labels, base.split_tag, base.class_count)?;
    Ok(PoisonedDataset {
        data,
        poisoned_indices: chosen,
        trigger_ref: trigger.reference(),
    })
}
