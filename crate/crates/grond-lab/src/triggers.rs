//! Trigger generators and the application rule G_x.
//!
//! UPGD synthesizes one universal perturbation by targeted sign-step PGD
//! on a surrogate model; the per-sample PGD baseline regenerates a fresh
//! perturbation per image (at poisoning and at test time); random noise,
//! a checkerboard patch, and a Gaussian blend pattern round out the
//! baseline set.

use std::fs;
use std::path::Path;

use grond_core::rng::SeededRng;
use grond_core::tensor::Tensor;
use grond_core::Model;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

pub const BUDGET_SLACK: f32 = 1e-7;

/// Anything that exposes the cross-entropy input gradient toward a target
/// class. Models implement it; tests drive the generators with
/// closed-form maps.
pub trait GradientSource {
    /// Mean CE loss of the batch against `targets` plus d(loss)/d(input).
    fn loss_and_input_gradient(&self, batch: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)>;
    /// Top-1 accuracy percentage on a labeled batch.
    fn probe_accuracy(&self, images: &Tensor, labels: &[u32]) -> Result<f64>;
}

impl GradientSource for Model {
    fn loss_and_input_gradient(&self, batch: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)> {
        Ok(self.input_gradient(batch, targets)?)
    }

    fn probe_accuracy(&self, images: &Tensor, labels: &[u32]) -> Result<f64> {
        Ok(self.accuracy(images, labels, 256)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdditiveKind {
    Upgd,
    RandomNoise,
}

/// A poisoning transform plus its budget and provenance.
#[derive(Clone, Debug)]
pub enum Trigger {
    /// x -> clip(x + delta), with ||delta||_inf <= epsilon.
    Additive {
        kind: AdditiveKind,
        delta: Tensor,
        epsilon: f32,
        surrogate_ref: Option<String>,
        seed: u64,
    },
    /// Pixel overwrite of a small bitmap at a fixed anchor (row, col).
    Patch { bitmap: Tensor, anchor: (usize, usize) },
    /// x -> clip((1 - ratio) x + ratio * pattern).
    Blend {
        pattern: Tensor,
        ratio: f32,
        seed: u64,
    },
    /// Sample-wise targeted PGD, regenerated per image; needs a surrogate
    /// at application time.
    PgdPerSample {
        epsilon: f32,
        steps: usize,
        alpha: f32,
        target_class: u32,
        surrogate_ref: Option<String>,
        seed: u64,
    },
}

impl Trigger {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Trigger::Additive {
                kind: AdditiveKind::Upgd,
                ..
            } => "upgd",
            Trigger::Additive {
                kind: AdditiveKind::RandomNoise,
                ..
            } => "random_noise",
            Trigger::Patch { .. } => "patch",
            Trigger::Blend { .. } => "blend",
            Trigger::PgdPerSample { .. } => "pgd_per_sample",
        }
    }

    /// Short provenance string recorded by poisoned datasets and reports.
    pub fn reference(&self) -> String {
        match self {
            Trigger::Additive {
                epsilon,
                surrogate_ref,
                seed,
                ..
            } => format!(
                "{}(eps={epsilon},seed={seed},surrogate={})",
                self.kind_name(),
                surrogate_ref.as_deref().unwrap_or("none")
            ),
            Trigger::Patch { bitmap, anchor } => format!(
                "patch(side={},anchor={},{})",
                bitmap.shape()[1],
                anchor.0,
                anchor.1
            ),
            Trigger::Blend { ratio, seed, .. } => format!("blend(ratio={ratio},seed={seed})"),
            Trigger::PgdPerSample {
                epsilon,
                steps,
                alpha,
                target_class,
                seed,
                ..
            } => format!(
                "pgd_per_sample(eps={epsilon},steps={steps},alpha={alpha},t={target_class},seed={seed})"
            ),
        }
    }

    /// The l-inf budget for additive kinds.
    pub fn epsilon(&self) -> Option<f32> {
        match self {
            Trigger::Additive { epsilon, .. } | Trigger::PgdPerSample { epsilon, .. } => {
                Some(*epsilon)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UpgdConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub target_class: u32,
    pub seed: u64,
    /// Probe-batch accuracy below this flags the surrogate as undertrained.
    pub accuracy_floor: f64,
    /// Provenance string recorded on the trigger.
    pub surrogate_ref: String,
}

impl Default for UpgdConfig {
    fn default() -> Self {
        UpgdConfig {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            iterations: 0, // callers size this to the dataset; see epochs_of_batches
            batch_size: 256,
            target_class: 2,
            seed: 0,
            accuracy_floor: 0.5,
            surrogate_ref: String::from("unspecified"),
        }
    }
}

impl UpgdConfig {
    /// Iteration budget covering the training set `epochs` times.
    pub fn epochs_of_batches(mut self, n: usize, epochs: usize) -> Self {
        self.iterations = epochs * n.div_ceil(self.batch_size);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Argument("epsilon must be non-negative".into()));
        }
        if self.epsilon > 0.0 && !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::Argument(format!(
                "step size {} must lie in (0, epsilon={}]",
                self.alpha, self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration instrumentation of a UPGD run.
#[derive(Clone, Debug, Default)]
pub struct UpgdTrace {
    pub losses: Vec<f64>,
    /// max|delta| after each iteration's projection.
    pub max_abs: Vec<f32>,
    pub surrogate_probe_acc: f64,
    pub surrogate_warning: bool,
}

/// Algorithm: init delta uniformly in the epsilon-ball; each iteration
/// draws the next seeded batch, computes the cross-entropy of the
/// surrogate on x + delta against the constant target class, and takes a
/// projected descending sign step.
pub fn generate_upgd<S: GradientSource>(
    surrogate: &S,
    data: &LabeledDataset,
    config: &UpgdConfig,
) -> Result<(Trigger, UpgdTrace)> {
    config.validate()?;
    if data.n() == 0 {
        return Err(Error::Argument("cannot generate UPGD on an empty dataset".into()));
    }
    let shape = data.image_shape();
    let mut delta = Tensor::zeros(&shape);
    let mut rng = SeededRng::derive(config.seed, 0xde17a);
    rng.fill_uniform(delta.data_mut(), -config.epsilon, config.epsilon);

    let mut trace = UpgdTrace::default();

    // Probe the surrogate on one batch; a near-chance model still runs,
    // but the caller is warned that the trigger will carry little signal.
    let probe_n = data.n().min(config.batch_size.max(32));
    let probe_idx: Vec<usize> = (0..probe_n).collect();
    let probe = data.subset(&probe_idx, data.split_tag)?;
    let acc = surrogate.probe_accuracy(&probe.images, &probe.labels)? / 100.0;
    trace.surrogate_probe_acc = acc;
    trace.surrogate_warning = acc < config.accuracy_floor;

    let mut order: Vec<usize> = (0..data.n()).collect();
    let mut shuffle_rng = SeededRng::derive(config.seed, 0xba7c4);
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    for _ in 0..config.iterations {
        if cursor + config.batch_size > data.n() {
            shuffle_rng.shuffle(&mut order);
            cursor = 0;
        }
        let take = config.batch_size.min(data.n());
        let batch_idx = &order[cursor..(cursor + take).min(data.n())];
        cursor += take;

        let samples: Vec<Tensor> = batch_idx
            .iter()
            .map(|&i| {
                let mut img = data.images.sample(i);
                for (v, d) in img.data_mut().iter_mut().zip(delta.data()) {
                    *v += d;
                }
                img
            })
            .collect();
        let batch = Tensor::stack(&samples)?;
        let targets = vec![config.target_class; batch_idx.len()];
        let (loss, grad) = surrogate.loss_and_input_gradient(&batch, &targets)?;
        trace.losses.push(loss);

        // Mean gradient over the batch, then a projected sign step.
        let per: usize = shape.iter().product();
        for (j, d) in delta.data_mut().iter_mut().enumerate() {
            let mut g = 0.0f32;
            for s in 0..batch_idx.len() {
                g += grad.data()[s * per + j];
            }
            *d = (*d - config.alpha * g.signum() * ((g != 0.0) as u32 as f32))
                .clamp(-config.epsilon, config.epsilon);
        }
        let m = delta.max_abs();
        debug_assert!(m <= config.epsilon + BUDGET_SLACK);
        trace.max_abs.push(m);
    }

    if config.epsilon == 0.0 {
        // Degenerate ball: the only feasible point is zero.
        for v in delta.data_mut() {
            *v = 0.0;
        }
    }
    Ok((
        Trigger::Additive {
            kind: AdditiveKind::Upgd,
            delta,
            epsilon: config.epsilon,
            surrogate_ref: Some(config.surrogate_ref.clone()),
            seed: config.seed,
        },
        trace,
    ))
}

/// Targeted PGD perturbation for one image. Returns the perturbation
/// delta (not the perturbed image) plus the per-step loss trace.
pub fn generate_pgd_per_sample<S: GradientSource>(
    surrogate: &S,
    image: &Tensor,
    epsilon: f32,
    steps: usize,
    alpha: f32,
    target_class: u32,
    seed: u64,
) -> Result<(Tensor, Vec<f64>)> {
    if epsilon < 0.0 {
        return Err(Error::Argument("epsilon must be non-negative".into()));
    }
    if epsilon > 0.0 && !(alpha > 0.0 && alpha <= epsilon) {
        return Err(Error::Argument(format!(
            "step size {alpha} must lie in (0, epsilon={epsilon}]"
        )));
    }
    let mut delta = Tensor::zeros(image.shape());
    if epsilon == 0.0 {
        return Ok((delta, Vec::new()));
    }
    let mut rng = SeededRng::derive(seed, 0xb9d);
    rng.fill_uniform(delta.data_mut(), -epsilon, epsilon);

    let mut losses = Vec::with_capacity(steps);
    let mut shape = vec![1usize];
    shape.extend_from_slice(image.shape());
    for _ in 0..steps {
        let mut adv = image.clone();
        for (v, d) in adv.data_mut().iter_mut().zip(delta.data()) {
            *v += d;
        }
        let batch = adv.reshaped(&shape)?;
        let (loss, grad) = surrogate.loss_and_input_gradient(&batch, &[target_class])?;
        losses.push(loss);
        for (d, g) in delta.data_mut().iter_mut().zip(grad.data()) {
            *d = (*d - alpha * g.signum() * ((*g != 0.0) as u32 as f32))
                .clamp(-epsilon, epsilon);
        }
        debug_assert!(delta.max_abs() <= epsilon + BUDGET_SLACK);
    }
    Ok((delta, losses))
}

/// Black/white checkerboard patch, bottom-right by default.
pub fn make_patch_trigger(
    image_shape: [usize; 3],
    side: usize,
    anchor: Option<(usize, usize)>,
) -> Result<Trigger> {
    let (h, w) = (image_shape[1], image_shape[2]);
    if side == 0 {
        return Err(Error::Argument("patch side must be at least 1".into()));
    }
    let anchor = anchor.unwrap_or((h.saturating_sub(side), w.saturating_sub(side)));
    if anchor.0 + side > h || anchor.1 + side > w {
        return Err(Error::Argument(format!(
            "patch {side}x{side} at {anchor:?} exceeds {h}x{w} image bounds"
        )));
    }
    let mut bitmap = Tensor::zeros(&[side, side]);
    for i in 0..side {
        for j in 0..side {
            bitmap.data_mut()[i * side + j] = ((i + j) % 2 == 0) as u32 as f32;
        }
    }
    Ok(Trigger::Patch { bitmap, anchor })
}

/// Random Gaussian pattern blended at the given ratio.
pub fn make_blend_trigger(image_shape: [usize; 3], ratio: f32, seed: u64) -> Result<Trigger> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Argument(format!(
            "blend ratio {ratio} must lie in [0, 1)"
        )));
    }
    let mut pattern = Tensor::zeros(&image_shape);
    let mut rng = SeededRng::derive(seed, 0xb1e2d);
    for v in pattern.data_mut() {
        *v = rng.normal(0.5, 0.25).clamp(0.0, 1.0);
    }
    Ok(Trigger::Blend {
        pattern,
        ratio,
        seed,
    })
}

/// Uniform noise in the epsilon-ball, fixed at construction.
pub fn make_noise_trigger(image_shape: [usize; 3], epsilon: f32, seed: u64) -> Result<Trigger> {
    if epsilon < 0.0 {
        return Err(Error::Argument("epsilon must be non-negative".into()));
    }
    let mut delta = Tensor::zeros(&image_shape);
    let mut rng = SeededRng::derive(seed, 0x4015e);
    rng.fill_uniform(delta.data_mut(), -epsilon, epsilon);
    Ok(Trigger::Additive {
        kind: AdditiveKind::RandomNoise,
        delta,
        epsilon,
        surrogate_ref: None,
        seed,
    })
}

/// G_x for the static trigger kinds. Pure; output stays in [0,1].
pub fn apply_trigger(trigger: &Trigger, image: &Tensor) -> Result<Tensor> {
    match trigger {
        Trigger::Additive { delta, .. } => {
            if delta.shape() != image.shape() {
                return Err(Error::Argument(format!(
                    "trigger shape {:?} does not match image {:?}",
                    delta.shape(),
                    image.shape()
                )));
            }
            let mut out = image.clone();
            for (v, d) in out.data_mut().iter_mut().zip(delta.data()) {
                *v = (*v + d).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        Trigger::Patch { bitmap, anchor } => {
            if image.shape().len() != 3 {
                return Err(Error::Argument(format!(
                    "patch application expects a (C,H,W) image, got {:?}",
                    image.shape()
                )));
            }
            let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
            let side = bitmap.shape()[0];
            if anchor.0 + side > h || anchor.1 + side > w {
                return Err(Error::Argument(format!(
                    "patch at {anchor:?} exceeds {h}x{w} image"
                )));
            }
            let mut out = image.clone();
            for ch in 0..c {
                for i in 0..side {
                    for j in 0..side {
                        out.data_mut()[(ch * h + anchor.0 + i) * w + anchor.1 + j] =
                            bitmap.data()[i * side + j];
                    }
                }
            }
            Ok(out)
        }
        Trigger::Blend { pattern, ratio, .. } => {
            if pattern.shape() != image.shape() {
                return Err(Error::Argument(format!(
                    "blend pattern shape {:?} does not match image {:?}",
                    pattern.shape(),
                    image.shape()
                )));
            }
            let mut out = image.clone();
            for (v, p) in out.data_mut().iter_mut().zip(pattern.data()) {
                *v = ((1.0 - ratio) * *v + ratio * p).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        Trigger::PgdPerSample { .. } => Err(Error::Argument(
            "per-sample PGD triggers need a surrogate; use apply_trigger_with".into(),
        )),
    }
}

/// G_x for every kind. `sample_tag` makes per-sample PGD draws distinct
/// and reproducible per image.
pub fn apply_trigger_with(
    trigger: &Trigger,
    image: &Tensor,
    surrogate: Option<&Model>,
    sample_tag: u64,
) -> Result<Tensor> {
    match trigger {
        Trigger::PgdPerSample {
            epsilon,
            steps,
            alpha,
            target_class,
            seed,
            ..
        } => {
            let surrogate = surrogate.ok_or_else(|| {
                Error::Argument("per-sample PGD application requires a surrogate model".into())
            })?;
            let (delta, _) = generate_pgd_per_sample(
                surrogate,
                image,
                *epsilon,
                *steps,
                *alpha,
                *target_class,
                seed.wrapping_add(sample_tag),
            )?;
            let mut out = image.clone();
            for (v, d) in out.data_mut().iter_mut().zip(delta.data()) {
                *v = (*v + d).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        _ => apply_trigger(trigger, image),
    }
}

/// Trigger file: `manifest` (key = value) plus a payload blob in the
/// snapshot tensor format.
pub fn save_trigger(trigger: &Trigger, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| grond_core::Error::io(dir, e))?;
    let mut manifest = format!("magic = grond-trigger\nkind = {}\n", trigger.kind_name());
    let payload: Option<&Tensor> = match trigger {
        Trigger::Additive {
            delta,
            epsilon,
            surrogate_ref,
            seed,
            ..
        } => {
            manifest.push_str(&format!("epsilon = {epsilon}\nseed = {seed}\n"));
            if let Some(r) = surrogate_ref {
                manifest.push_str(&format!("surrogate_ref = {r}\n"));
            }
            Some(delta)
        }
        Trigger::Patch { bitmap, anchor } => {
            manifest.push_str(&format!("anchor = {},{}\n", anchor.0, anchor.1));
            Some(bitmap)
        }
        Trigger::Blend { pattern, ratio, seed } => {
            manifest.push_str(&format!("ratio = {ratio}\nseed = {seed}\n"));
            Some(pattern)
        }
        Trigger::PgdPerSample {
            epsilon,
            steps,
            alpha,
            target_class,
            surrogate_ref,
            seed,
        } => {
            manifest.push_str(&format!(
                "epsilon = {epsilon}\nsteps = {steps}\nalpha = {alpha}\ntarget_class = {target_class}\nseed = {seed}\n"
            ));
            if let Some(r) = surrogate_ref {
                manifest.push_str(&format!("surrogate_ref = {r}\n"));
            }
            None
        }
    };
    if let Some(t) = payload {
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("payload_shape = {shape}\n"));
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join("payload.bin");
        fs::write(&path, bytes).map_err(|e| grond_core::Error::io(&path, e))?;
    }
    let path = dir.join("manifest");
    fs::write(&path, manifest).map_err(|e| grond_core::Error::io(&path, e))?;
    Ok(())
}

pub fn load_trigger(dir: &Path) -> Result<Trigger> {
    let manifest_path = dir.join("manifest");
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| grond_core::Error::io(&manifest_path, e))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let bad = |detail: String| Error::Ingestion {
        file: manifest_path.clone(),
        detail,
    };
    if kv.get("magic").map(String::as_str) != Some("grond-trigger") {
        return Err(bad("missing or wrong magic".into()));
    }
    let kind = kv
        .get("kind")
        .cloned()
        .ok_or_else(|| bad("missing kind".into()))?;
    let parse_f32 = |kv: &std::collections::BTreeMap<String, String>, k: &str| -> Result<f32> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing or bad {k}")))
    };
    let parse_u64 = |kv: &std::collections::BTreeMap<String, String>, k: &str| -> Result<u64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing or bad {k}")))
    };
    let payload = |kv: &std::collections::BTreeMap<String, String>| -> Result<Tensor> {
        let shape: Vec<usize> = kv
            .get("payload_shape")
            .ok_or_else(|| bad("missing payload_shape".into()))?
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape dim {d}"))))
            .collect::<Result<_>>()?;
        let path = dir.join("payload.bin");
        let bytes = fs::read(&path).map_err(|e| grond_core::Error::io(&path, e))?;
        let want: usize = shape.iter().product::<usize>() * 4;
        if bytes.len() != want {
            return Err(Error::Ingestion {
                file: path,
                detail: format!("payload is {} bytes, expected {want}", bytes.len()),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor::from_vec(&shape, values)?)
    };
    match kind.as_str() {
        "upgd" | "random_noise" => Ok(Trigger::Additive {
            kind: if kind == "upgd" {
                AdditiveKind::Upgd
            } else {
                AdditiveKind::RandomNoise
            },
            delta: payload(&kv)?,
            epsilon: parse_f32(&kv, "epsilon")?,
            surrogate_ref: kv.get("surrogate_ref").cloned(),
            seed: parse_u64(&kv, "seed")?,
        }),
        "patch" => {
            let anchor = kv
                .get("anchor")
                .and_then(|v| v.split_once(','))
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
                .ok_or_else(|| bad("missing or bad anchor".into()))?;
            Ok(Trigger::Patch {
                bitmap: payload(&kv)?,
                anchor,
            })
        }
        "blend" => Ok(Trigger::Blend {
            pattern: payload(&kv)?,
            ratio: parse_f32(&kv, "ratio")?,
            seed: parse_u64(&kv, "seed")?,
        }),
        "pgd_per_sample" => Ok(Trigger::PgdPerSample {
            epsilon: parse_f32(&kv, "epsilon")?,
            steps: parse_u64(&kv, "steps")? as usize,
            alpha: parse_f32(&kv, "alpha")?,
            target_class: parse_u64(&kv, "target_class")? as u32,
            surrogate_ref: kv.get("surrogate_ref").cloned(),
            seed: parse_u64(&kv, "seed")?,
        }),
        other => Err(bad(format!("unknown trigger kind {other:?}"))),
    }
}
