//! Diagnostics: BA/ASR evaluation, trigger-activation change (TAC),
//! benign/backdoor feature decoupling, weight-change reports, and feature
//! export for external 2-D embedding.

use std::fs;
use std::path::Path;

use grond_core::layers::softmax_cross_entropy;
use grond_core::model::slice_batch;
use grond_core::tensor::Tensor;
use grond_core::Model;

use crate::abi::{ChannelScoreTable, ScoreKind};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::triggers::{apply_trigger_with, Trigger};

/// Benign accuracy and attack success rate, both percentages. ASR counts
/// triggered samples of non-target true class that land on the target.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AttackMetrics {
    pub ba: f64,
    pub asr: f64,
    pub n_clean: usize,
    pub n_triggered: usize,
}

const EVAL_BATCH: usize = 256;

pub fn evaluate(
    model: &Model,
    test_set: &LabeledDataset,
    trigger: &Trigger,
    surrogate: Option<&Model>,
    target_class: u32,
) -> Result<AttackMetrics> {
    if test_set.n() == 0 {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let ba = model.accuracy(&test_set.images, &test_set.labels, EVAL_BATCH)?;

    let non_target: Vec<usize> = (0..test_set.n())
        .filter(|&i| test_set.labels[i] != target_class)
        .collect();
    if non_target.is_empty() {
        return Err(Error::Argument(
            "every evaluation sample belongs to the target class; ASR undefined".into(),
        ));
    }
    let mut hits = 0usize;
    for chunk in non_target.chunks(EVAL_BATCH) {
        let samples: Vec<Tensor> = chunk
            .iter()
            .map(|&i| apply_trigger_with(trigger, &test_set.image(i), surrogate, i as u64))
            .collect::<Result<_>>()?;
        let batch = Tensor::stack(&samples)?;
        let preds = model.predict(&batch, EVAL_BATCH)?;
        hits += preds.iter().filter(|&&p| p == target_class).count();
    }
    Ok(AttackMetrics {
        ba,
        asr: 100.0 * hits as f64 / non_target.len() as f64,
        n_clean: test_set.n(),
        n_triggered: non_target.len(),
    })
}

/// TAC: per channel of `layer_tag`, the mean over the subset of the L2
/// norm (over the flattened feature map) of clean-minus-triggered
/// activations, post BN+ReLU.
pub fn compute_tac(
    model: &Model,
    clean_subset: &LabeledDataset,
    trigger: &Trigger,
    surrogate: Option<&Model>,
    layer_tag: &str,
) -> Result<ChannelScoreTable> {
    if clean_subset.n() == 0 {
        return Err(Error::Argument("TAC subset is empty".into()));
    }
    let mut sums: Vec<f64> = Vec::new();
    let n = clean_subset.n();
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let clean = slice_batch(&clean_subset.images, start, end);
        let triggered: Vec<Tensor> = (start..end)
            .map(|i| apply_trigger_with(trigger, &clean_subset.image(i), surrogate, i as u64))
            .collect::<Result<_>>()?;
        let triggered = Tensor::stack(&triggered)?;
        let f_clean = model.forward_features(&clean, layer_tag)?;
        let f_trig = model.forward_features(&triggered, layer_tag)?;
        let shape = f_clean.shape();
        let (b, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product::<usize>().max(1);
        if sums.is_empty() {
            sums = vec![0.0; c];
        }
        for s in 0..b {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let mut acc = 0.0f64;
                for j in 0..plane {
                    let d = (f_clean.data()[base + j] - f_trig.data()[base + j]) as f64;
                    acc += d * d;
                }
                sums[ch] += acc.sqrt();
            }
        }
        start = end;
    }
    let scores: Vec<f32> = sums.iter().map(|&s| (s / n as f64) as f32).collect();
    Ok(ChannelScoreTable::from_scores(
        ScoreKind::Tac,
        vec![(layer_tag.to_string(), scores)],
    ))
}

/// Mask over the pooled penultimate features splitting them into benign
/// and backdoor parts.
#[derive(Clone, Debug)]
pub struct FeatureMask {
    pub mask: Tensor,
    pub lambda: f32,
    /// Mean cross-entropy of head(g(x) * m) against the true labels.
    pub benign_loss: f64,
    /// Mean cross-entropy of head(g(x) * (1 - m)), reported unnegated.
    pub backdoor_loss: f64,
    pub objective_trace: Vec<f64>,
}

pub const DECOUPLE_LAMBDA: f32 = 0.72;
pub const DECOUPLE_LR: f32 = 0.01;
pub const DECOUPLE_EPOCHS: usize = 20;

/// The frozen classification head the mask optimization runs against.
pub struct HeadView {
    /// (C, D) weight matrix.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl HeadView {
    pub fn of_model(model: &Model) -> Result<HeadView> {
        Ok(HeadView {
            weight: model.params.by_name("head.weight")?.clone(),
            bias: model.params.by_name("head.bias")?.data().to_vec(),
        })
    }
}

/// Loss and mask gradient of one objective term with features f = g * m.
/// d/dm CE(head(g*m), y) = g * (W^T (p - onehot)) / n.
fn masked_term(
    head: &HeadView,
    feats: &Tensor,
    labels: &[u32],
    mask: &[f32],
    invert: bool,
) -> Result<(f64, Vec<f32>)> {
    let (n, d) = (feats.shape()[0], feats.shape()[1]);
    let c = head.weight.shape()[0];
    let mut masked = feats.clone();
    for s in 0..n {
        for j in 0..d {
            let m = if invert { 1.0 - mask[j] } else { mask[j] };
            masked.data_mut()[s * d + j] *= m;
        }
    }
    let logits = grond_core::layers::linear_forward(&masked, &head.weight, &head.bias)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    // grad wrt masked features: dlogits (n,c) x W (c,d)
    let mut dfeat = vec![0.0f32; n * d];
    for s in 0..n {
        for j in 0..d {
            let mut acc = 0.0f32;
            for k in 0..c {
                acc += dlogits.data()[s * c + k] * head.weight.data()[k * d + j];
            }
            dfeat[s * d + j] = acc;
        }
    }
    let mut dmask = vec![0.0f32; d];
    let sign = if invert { -1.0 } else { 1.0 };
    for s in 0..n {
        for j in 0..d {
            dmask[j] += sign * dfeat[s * d + j] * feats.data()[s * d + j];
        }
    }
    Ok((loss, dmask))
}

/// Objective value, both loss terms, and the mask gradient at `mask`:
/// CE(m) - CE(1-m) + lambda * ||m||_1.
pub fn decouple_objective(
    head: &HeadView,
    feats: &Tensor,
    labels: &[u32],
    mask: &[f32],
    lambda: f32,
) -> Result<(f64, f64, f64, Vec<f32>)> {
    let (benign, g1) = masked_term(head, feats, labels, mask, false)?;
    let (backdoor, g2) = masked_term(head, feats, labels, mask, true)?;
    // m is clamped to [0,1], so |m| = m and the l1 subgradient is +lambda.
    let l1: f64 = mask.iter().map(|&m| m as f64).sum::<f64>() * lambda as f64;
    let objective = benign - backdoor + l1;
    // The backdoor term enters the objective negated, so its gradient
    // contribution flips sign.
    let grad: Vec<f32> = g1
        .iter()
        .zip(&g2)
        .map(|(a, b)| a - b + lambda)
        .collect();
    Ok((objective, benign, backdoor, grad))
}

/// Mask optimization against an explicit head and feature matrix: Adam
/// steps with per-step clamping to [0,1], mask initialized at 0.5.
pub fn feature_decouple_from(
    head: &HeadView,
    feats: &Tensor,
    labels: &[u32],
    lambda: f32,
    epochs: usize,
    lr: f32,
) -> Result<FeatureMask> {
    let d = feats.shape()[1];
    let mut mask = vec![0.5f32; d];
    let (mut m1, mut m2) = (vec![0.0f32; d], vec![0.0f32; d]);
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let mut trace = Vec::with_capacity(epochs);
    for step in 1..=epochs {
        let (obj, _, _, grad) = decouple_objective(head, feats, labels, &mask, lambda)?;
        if !obj.is_finite() {
            return Err(Error::Optimization(format!(
                "decoupling objective became {obj} at step {step}; trace: {trace:?}"
            )));
        }
        trace.push(obj);
        for j in 0..d {
            m1[j] = b1 * m1[j] + (1.0 - b1) * grad[j];
            m2[j] = b2 * m2[j] + (1.0 - b2) * grad[j] * grad[j];
            let mh = m1[j] / (1.0 - b1.powi(step as i32));
            let vh = m2[j] / (1.0 - b2.powi(step as i32));
            mask[j] = (mask[j] - lr * mh / (vh.sqrt() + eps)).clamp(0.0, 1.0);
        }
    }
    // Loss terms at the final mask.
    let (_, benign, backdoor, _) = decouple_objective(head, feats, labels, &mask, lambda)?;
    Ok(FeatureMask {
        mask: Tensor::from_vec(&[d], mask)?,
        lambda,
        benign_loss: benign,
        backdoor_loss: backdoor,
        objective_trace: trace,
    })
}

/// Optimizes the feature mask over the model's pooled penultimate
/// features. The model is frozen; only the mask moves.
pub fn feature_decouple(
    model: &Model,
    clean_subset: &LabeledDataset,
    lambda: f32,
    epochs: usize,
    lr: f32,
) -> Result<FeatureMask> {
    if clean_subset.n() == 0 {
        return Err(Error::Argument("decoupling subset is empty".into()));
    }
    let feats = model.forward_features(&clean_subset.images, "pre_head")?;
    let head = HeadView::of_model(model)?;
    feature_decouple_from(&head, &feats, &clean_subset.labels, lambda, epochs, lr)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct WeightChangeRow {
    pub layer_id: String,
    pub channel: usize,
    pub delta_l2: f32,
}

/// Per-channel L2 norm of kernel differences between two snapshots of the
/// same architecture.
pub fn weight_change_report(before: &Model, after: &Model) -> Result<Vec<WeightChangeRow>> {
    if before.meta.arch_id != after.meta.arch_id
        || before.meta.width_div != after.meta.width_div
        || before.meta.class_count != after.meta.class_count
    {
        return Err(Error::Argument(format!(
            "snapshots disagree on architecture: {}/{} vs {}/{}",
            before.meta.arch_id, before.meta.width_div, after.meta.arch_id, after.meta.width_div
        )));
    }
    let mut rows = Vec::new();
    for (pa, pb) in before
        .conv_bn_pairs()
        .iter()
        .zip(after.conv_bn_pairs().iter())
    {
        let ka = before.params.get(pa.conv);
        let kb = after.params.get(pb.conv);
        let per: usize = ka.shape()[1..].iter().product();
        for k in 0..pa.out_ch {
            let mut acc = 0.0f64;
            for j in 0..per {
                let d = (ka.data()[k * per + j] - kb.data()[k * per + j]) as f64;
                acc += d * d;
            }
            rows.push(WeightChangeRow {
                layer_id: pa.layer_id.clone(),
                channel: k,
                delta_l2: acc.sqrt() as f32,
            });
        }
    }
    Ok(rows)
}

pub fn weight_change_csv(rows: &[WeightChangeRow], sorted: bool) -> String {
    let mut rows: Vec<&WeightChangeRow> = rows.iter().collect();
    if sorted {
        rows.sort_by(|a, b| b.delta_l2.total_cmp(&a.delta_l2));
    }
    let mut out = String::from("layer,channel,delta_l2\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.layer_id, r.channel, r.delta_l2));
    }
    out
}

/// CSV of per-sample features at `layer_tag` plus label and poisoned
/// flag, for external 2-D embedding. Deterministic bytes.
pub fn export_features(
    model: &Model,
    data: &LabeledDataset,
    poisoned: &[bool],
    layer_tag: &str,
    path: &Path,
) -> Result<()> {
    if poisoned.len() != data.n() {
        return Err(Error::Argument(format!(
            "{} samples but {} poisoned flags",
            data.n(),
            poisoned.len()
        )));
    }
    let mut out = String::new();
    let mut dims_written = false;
    let n = data.n();
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let batch = slice_batch(&data.images, start, end);
        let feats = model.forward_features(&batch, layer_tag)?;
        let d: usize = feats.shape()[1..].iter().product();
        if !dims_written {
            for j in 0..d {
                out.push_str(&format!("f{j},"));
            }
            out.push_str("label,poisoned\n");
            dims_written = true;
        }
        for s in 0..(end - start) {
            for j in 0..d {
                out.push_str(&format!("{},", feats.data()[s * d + j]));
            }
            out.push_str(&format!(
                "{},{}\n",
                data.labels[start + s],
                poisoned[start + s] as u8
            ));
        }
        start = end;
    }
    fs::write(path, out).map_err(|e| grond_core::Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SplitTag};
    use crate::triggers::{make_noise_trigger, make_patch_trigger};
    use grond_core::build_model;
    use grond_core::train::{train, TrainConfig};

    /// Model that predicts a constant class: zero features, biased head.
    fn constant_classifier(classes: usize, target: u32) -> Model {
        let mut model = build_model("convnet", classes, 0.125, 0, [3, 8, 8]).unwrap();
        for name in ["conv1", "conv2", "conv3", "conv4"] {
            for v in model
                .params
                .by_name_mut(&format!("{name}.weight"))
                .unwrap()
                .data_mut()
            {
                *v = 0.0;
            }
        }
        for i in 1..=4 {
            for v in model
                .params
                .by_name_mut(&format!("bn{i}.gamma"))
                .unwrap()
                .data_mut()
            {
                *v = 0.0;
            }
        }
        let bias = model.params.by_name_mut("head.bias").unwrap();
        for (j, v) in bias.data_mut().iter_mut().enumerate() {
            *v = if j as u32 == target { 5.0 } else { 0.0 };
        }
        model
    }

    #[test]
    fn constant_target_classifier_scores_chance_ba_full_asr() {
        let test = make_synthetic(10, 10, 8, 1).unwrap().with_tag(SplitTag::Test);
        let model = constant_classifier(10, 2);
        let trigger = make_noise_trigger([3, 8, 8], 0.03, 0).unwrap();
        let m = evaluate(&model, &test, &trigger, None, 2).unwrap();
        assert_eq!(m.ba, 10.0);
        assert_eq!(m.asr, 100.0);
        assert_eq!(m.n_triggered, 90);
    }

    #[test]
    fn zero_trigger_on_a_perfect_classifier_gives_zero_asr() {
        let train_set = make_synthetic(2, 40, 8, 3).unwrap();
        let test_set = make_synthetic(2, 20, 8, 4).unwrap().with_tag(SplitTag::Test);
        let model = build_model("convnet", 2, 0.125, 5, [3, 8, 8]).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            epochs: 10,
            milestones: vec![],
            batch_size: 16,
            augment: false,
            seed: 1,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &train_set.images, &train_set.labels, &cfg, &mut [])
            .unwrap();
        assert_eq!(trained.accuracy(&test_set.images, &test_set.labels, 64).unwrap(), 100.0);
        let zero = make_noise_trigger([3, 8, 8], 0.0, 0).unwrap();
        let m = evaluate(&trained, &test_set, &zero, None, 1).unwrap();
        assert_eq!(m.asr, 0.0, "triggered inputs equal clean inputs");
    }

    #[test]
    fn three_sample_metrics_match_hand_count() {
        // Constant-2 classifier; labels [2, 0, 1]: BA = 1/3, and of the
        // two non-target samples both land on 2 -> ASR = 100.
        let imgs = Tensor::stack(&[
            Tensor::filled(&[3, 8, 8], 0.3),
            Tensor::filled(&[3, 8, 8], 0.6),
            Tensor::filled(&[3, 8, 8], 0.9),
        ])
        .unwrap();
        let ds = LabeledDataset::new(imgs, vec![2, 0, 1], SplitTag::Test, 3).unwrap();
        let model = constant_classifier(3, 2);
        let trigger = make_patch_trigger([3, 8, 8], 2, None).unwrap();
        let m = evaluate(&model, &ds, &trigger, None, 2).unwrap();
        assert!((m.ba - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.asr, 100.0);
        assert_eq!(m.n_clean, 3);
        assert_eq!(m.n_triggered, 2);
    }

    #[test]
    fn empty_eval_set_is_an_argument_error() {
        let model = constant_classifier(3, 0);
        let trigger = make_noise_trigger([3, 8, 8], 0.01, 0).unwrap();
        let imgs = Tensor::filled(&[1, 3, 8, 8], 0.5);
        let ds = LabeledDataset::new(imgs, vec![0], SplitTag::Test, 3).unwrap();
        // All samples in the target class: ASR denominator empty.
        assert!(matches!(
            evaluate(&model, &ds, &trigger, None, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn tac_is_zero_for_a_zero_trigger() {
        let model = build_model("convnet", 4, 0.125, 3, [3, 8, 8]).unwrap();
        let subset = make_synthetic(4, 8, 8, 2).unwrap();
        let zero = make_noise_trigger([3, 8, 8], 0.0, 0).unwrap();
        let table = compute_tac(&model, &subset, &zero, None, "conv4").unwrap();
        assert!(table.layer("conv4").unwrap().scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn tac_matches_a_hand_forward_pass() {
        // conv1 channel 0 reads input channel 0 through the center tap
        // only; BN is identity (gamma=1, beta=0, rm=0, rv=1-eps). TAC of a
        // one-image subset is then the L2 norm of the clean-minus-
        // triggered center-tap response.
        let mut model = build_model("convnet", 2, 0.125, 0, [3, 8, 8]).unwrap();
        {
            let kernel = model.params.by_name_mut("conv1.weight").unwrap();
            for v in kernel.data_mut() {
                *v = 0.0;
            }
            kernel.data_mut()[4] = 1.5; // [out0,in0,1,1]
        }
        let eps = grond_core::layers::BN_EPS;
        model.params.by_name_mut("bn1.running_var").unwrap().data_mut()[0] = 1.0 - eps;
        let base = make_synthetic(2, 1, 8, 7).unwrap();
        let one = base.subset(&[0], SplitTag::Test).unwrap();
        let trigger = make_patch_trigger([3, 8, 8], 3, None).unwrap();
        let table = compute_tac(&model, &one, &trigger, None, "conv1").unwrap();

        let img = one.image(0);
        let trig = crate::triggers::apply_trigger(&trigger, &img).unwrap();
        let mut acc = 0.0f64;
        for y in 0..8 {
            for x in 0..8 {
                let a = (1.5 * img.data()[y * 8 + x]).max(0.0);
                let b = (1.5 * trig.data()[y * 8 + x]).max(0.0);
                acc += ((a - b) as f64).powi(2);
            }
        }
        let expect = acc.sqrt() as f32;
        let got = table.layer("conv1").unwrap().scores[0];
        assert!((got - expect).abs() <= 1e-4, "TAC {got} vs hand {expect}");
    }

    #[test]
    fn decouple_terms_at_closed_masks() {
        // m = all-ones: benign term is the full-feature loss and the
        // backdoor term is the zero-feature loss.
        let model = build_model("convnet", 3, 0.125, 8, [3, 8, 8]).unwrap();
        let subset = make_synthetic(3, 5, 8, 1).unwrap();
        let feats = model.forward_features(&subset.images, "pre_head").unwrap();
        let head = HeadView::of_model(&model).unwrap();
        let d = feats.shape()[1];
        let (_, benign, backdoor, _) =
            decouple_objective(&head, &feats, &subset.labels, &vec![1.0; d], 0.0).unwrap();
        // Full-feature loss via the model's own logits.
        let logits = model.logits(&subset.images).unwrap();
        let (full_loss, _) = softmax_cross_entropy(&logits, &subset.labels).unwrap();
        assert!((benign - full_loss).abs() < 1e-6);
        // Zero-feature loss: bias-only logits.
        let zero_feats = Tensor::zeros(&[subset.n(), d]);
        let zl = grond_core::layers::linear_forward(&zero_feats, &head.weight, &head.bias)
            .unwrap();
        let (zero_loss, _) = softmax_cross_entropy(&zl, &subset.labels).unwrap();
        assert!((backdoor - zero_loss).abs() < 1e-6);
    }

    #[test]
    fn decouple_gradient_matches_finite_differences() {
        // Strong-signal instance: a trained-looking head over explicit
        // features, so both objective terms carry order-one gradients and
        // a sign error in either cannot hide under the tolerance.
        let mut rng = grond_core::rng::SeededRng::new(5);
        let (n, d, classes) = (12usize, 6usize, 3usize);
        let mut feats = Tensor::zeros(&[n, d]);
        rng.fill_uniform(feats.data_mut(), 0.2, 1.5);
        let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
        let mut w = Tensor::zeros(&[classes, d]);
        rng.fill_normal(w.data_mut(), 0.0, 1.2);
        let head = HeadView {
            weight: w,
            bias: vec![0.1, -0.2, 0.05],
        };
        let mask = vec![0.4f32; d];
        let (_, _, _, grad) = decouple_objective(&head, &feats, &labels, &mask, 0.3).unwrap();
        let h = 1e-2f32;
        for j in 0..d {
            let mut plus = mask.clone();
            plus[j] += h;
            let mut minus = mask.clone();
            minus[j] -= h;
            let (op, ..) = decouple_objective(&head, &feats, &labels, &plus, 0.3).unwrap();
            let (om, ..) = decouple_objective(&head, &feats, &labels, &minus, 0.3).unwrap();
            let fd = (op - om) / (2.0 * h as f64);
            assert!(
                (grad[j] as f64 - fd).abs() <= 5e-3 * fd.abs().max(0.2),
                "mask grad {j}: {} vs fd {fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn default_lambda_matches_reference_setting() {
        assert_eq!(DECOUPLE_LAMBDA, 0.72);
        assert_eq!(DECOUPLE_LR, 0.01);
        assert_eq!(DECOUPLE_EPOCHS, 20);
    }

    #[test]
    fn weight_change_rows_localize_a_known_perturbation() {
        let a = build_model("convnet", 4, 0.125, 6, [3, 8, 8]).unwrap();
        let mut b = a.clone();
        let bump = vec![0.5f32, -0.25, 0.1];
        {
            let kernel = b.params.by_name_mut("conv3.weight").unwrap();
            let per: usize = kernel.shape()[1..].iter().product();
            for (j, &v) in bump.iter().enumerate() {
                kernel.data_mut()[7 * per + j] += v;
            }
        }
        let rows = weight_change_report(&a, &b).unwrap();
        let expect: f32 = bump.iter().map(|v| v * v).sum::<f32>().sqrt();
        for r in &rows {
            if r.layer_id == "conv3" && r.channel == 7 {
                assert!((r.delta_l2 - expect).abs() <= 1e-6);
            } else {
                assert_eq!(r.delta_l2, 0.0, "{}:{}", r.layer_id, r.channel);
            }
        }
        // Identical snapshots: all zero.
        let rows = weight_change_report(&a, &a).unwrap();
        assert!(rows.iter().all(|r| r.delta_l2 == 0.0));
        // Arch mismatch rejected.
        let other = build_model("resnet18", 4, 0.125, 6, [3, 8, 8]).unwrap();
        assert!(matches!(
            weight_change_report(&a, &other),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn feature_export_writes_dim_plus_two_columns() {
        let model = build_model("convnet", 4, 1.0, 3, [3, 8, 8]).unwrap();
        let data = make_synthetic(4, 3, 8, 2).unwrap();
        let mut flags = vec![false; data.n()];
        flags[1] = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        export_features(&model, &data, &flags, "pre_head", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 12, "header plus one row per sample");
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 512 + 2);
        }
        // Poisoned flag column tracks the provided flags.
        let flag_col: Vec<&str> = lines[1..]
            .iter()
            .map(|l| l.rsplit(',').next().unwrap())
            .collect();
        assert_eq!(flag_col[1], "1");
        assert_eq!(flag_col[0], "0");
        // Re-export is byte-identical.
        let path2 = dir.path().join("features2.csv");
        export_features(&model, &data, &flags, "pre_head", &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
