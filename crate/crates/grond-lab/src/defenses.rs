//! The defender toolbox: data-free CLP pruning, vanilla fine-tuning,
//! TAC-threshold adaptive pruning, and batch-norm neuron noise. Every
//! defense is a pure snapshot transform returning a fresh model plus a
//! before/after report.

use std::time::Instant;

use grond_core::rng::SeededRng;
use grond_core::train::{train, TrainConfig};
use grond_core::Model;

use crate::abi::compute_uclc;
use crate::analysis::{compute_tac, evaluate};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::triggers::Trigger;

/// Evaluation context shared by all defenses: the held-out test set and
/// the attack trigger, so reports carry BA/ASR before and after.
pub struct EvalContext<'a> {
    pub test_set: &'a LabeledDataset,
    pub trigger: &'a Trigger,
    pub surrogate: Option<&'a Model>,
    pub target_class: u32,
}

impl EvalContext<'_> {
    fn metrics(&self, model: &Model) -> Result<(f64, f64)> {
        let m = evaluate(
            model,
            self.test_set,
            self.trigger,
            self.surrogate,
            self.target_class,
        )?;
        Ok((m.ba, m.asr))
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DefenseReport {
    pub defense_id: String,
    pub ba_before: f64,
    pub asr_before: f64,
    pub ba_after: f64,
    pub asr_after: f64,
    /// Pruned (layer, channel) pairs as "layer:channel", or a noise spec.
    pub pruned_or_noised: Vec<String>,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
}

impl DefenseReport {
    fn validate(self) -> Result<DefenseReport> {
        for (name, v) in [
            ("ba_before", self.ba_before),
            ("asr_before", self.asr_before),
            ("ba_after", self.ba_after),
            ("asr_after", self.asr_after),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Argument(format!("{name} = {v} outside [0, 100]")));
            }
        }
        Ok(self)
    }
}

/// Zeroes the kernel slice and the BN affine parameters of a channel.
fn prune_channel(model: &mut Model, pair_idx: usize, channel: usize) {
    let pair = model.conv_bn_pairs()[pair_idx].clone();
    let kernel = model.params.get_mut(pair.conv);
    let per: usize = kernel.shape()[1..].iter().product();
    kernel.data_mut()[channel * per..(channel + 1) * per].fill(0.0);
    model.params.get_mut(pair.gamma).data_mut()[channel] = 0.0;
    model.params.get_mut(pair.beta).data_mut()[channel] = 0.0;
}

/// Data-free channel-Lipschitz pruning: zero every channel whose UCLC
/// score exceeds its layer's mean + u_clp * std.
pub fn clp_defense(
    model: &Model,
    u_clp: f32,
    ctx: &EvalContext<'_>,
) -> Result<(Model, DefenseReport)> {
    if !(u_clp > 0.0) {
        return Err(Error::Argument(format!("u_clp must be positive, got {u_clp}")));
    }
    let start = Instant::now();
    let (ba_before, asr_before) = ctx.metrics(model)?;
    let table = compute_uclc(model)?;
    let flagged = table.flagged(u_clp);
    let mut pruned = model.clone();
    let mut pruned_ids = Vec::with_capacity(flagged.len());
    for (layer_id, channel) in &flagged {
        let pair_idx = pruned
            .conv_bn_pairs()
            .iter()
            .position(|p| &p.layer_id == layer_id)
            .expect("flagged layer exists");
        prune_channel(&mut pruned, pair_idx, *channel);
        pruned_ids.push(format!("{layer_id}:{channel}"));
    }
    let (ba_after, asr_after) = ctx.metrics(&pruned)?;
    let report = DefenseReport {
        defense_id: format!("clp(u={u_clp})"),
        ba_before,
        asr_before,
        ba_after,
        asr_after,
        pruned_or_noised: pruned_ids,
        wall_time_s: start.elapsed().as_secs_f64(),
        loss_trace: None,
    }
    .validate()?;
    Ok((pruned, report))
}

/// Full-network supervised fine-tuning on a small clean subset.
pub fn vanilla_finetune(
    model: &Model,
    clean_subset: &LabeledDataset,
    epochs: usize,
    lr: f32,
    ctx: &EvalContext<'_>,
) -> Result<(Model, DefenseReport)> {
    if clean_subset.n() == 0 {
        return Err(Error::Argument("fine-tuning subset is empty".into()));
    }
    let start = Instant::now();
    let (ba_before, asr_before) = ctx.metrics(model)?;
    let config = TrainConfig {
        lr,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs,
        milestones: vec![],
        lr_gamma: 0.1,
        batch_size: 128.min(clean_subset.n()),
        seed: 0x77,
        augment: false,
    };
    let (tuned, history) = train(
        model,
        &clean_subset.images,
        &clean_subset.labels,
        &config,
        &mut [],
    )?;
    let (ba_after, asr_after) = ctx.metrics(&tuned)?;
    let report = DefenseReport {
        defense_id: format!("vanilla_ft(epochs={epochs},lr={lr})"),
        ba_before,
        asr_before,
        ba_after,
        asr_after,
        pruned_or_noised: Vec::new(),
        wall_time_s: start.elapsed().as_secs_f64(),
        loss_trace: Some(history.iter().map(|h| h.train_loss).collect()),
    }
    .validate()?;
    Ok((tuned, report))
}

/// White-box adaptive pruning: zero channels of `layer_tag` whose TAC
/// (computed with the true attack trigger) exceeds `threshold`. A channel
/// of a residual stage is formed by several conv-BN pairs (the block
/// conv2s plus the stage entry), and all of them are zeroed; otherwise
/// the skip path would carry the channel straight past the prune.
pub fn tac_prune(
    model: &Model,
    trigger: &Trigger,
    surrogate: Option<&Model>,
    clean_subset: &LabeledDataset,
    threshold: f32,
    layer_tag: &str,
    ctx: &EvalContext<'_>,
) -> Result<(Model, DefenseReport)> {
    let start = Instant::now();
    let (ba_before, asr_before) = ctx.metrics(model)?;
    let table = compute_tac(model, clean_subset, trigger, surrogate, layer_tag)?;
    let layer = table
        .layer(layer_tag)
        .ok_or_else(|| Error::Argument(format!("TAC produced no layer {layer_tag}")))?;
    let pair_indices = stream_pairs_for_tag(model, layer_tag)?;
    let mut pruned = model.clone();
    let mut pruned_ids = Vec::new();
    for (k, &score) in layer.scores.iter().enumerate() {
        if score > threshold {
            for &pair_idx in &pair_indices {
                prune_channel(&mut pruned, pair_idx, k);
            }
            pruned_ids.push(format!("{layer_tag}:{k}"));
        }
    }
    let (ba_after, asr_after) = ctx.metrics(&pruned)?;
    let report = DefenseReport {
        defense_id: format!("tac_prune(threshold={threshold},layer={layer_tag})"),
        ba_before,
        asr_before,
        ba_after,
        asr_after,
        pruned_or_noised: pruned_ids,
        wall_time_s: start.elapsed().as_secs_f64(),
        loss_trace: None,
    }
    .validate()?;
    Ok((pruned, report))
}

/// Sweep over a threshold list, one report per threshold (each from a
/// fresh copy of the model).
#[allow(clippy::too_many_arguments)]
pub fn tac_prune_sweep(
    model: &Model,
    trigger: &Trigger,
    surrogate: Option<&Model>,
    clean_subset: &LabeledDataset,
    thresholds: &[f32],
    layer_tag: &str,
    ctx: &EvalContext<'_>,
) -> Result<Vec<(f32, DefenseReport)>> {
    if thresholds.is_empty() {
        return Err(Error::Argument("threshold list is empty".into()));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (_, report) = tac_prune(model, trigger, surrogate, clean_subset, t, layer_tag, ctx)?;
        out.push((t, report));
    }
    Ok(out)
}

pub fn sweep_csv(rows: &[(f32, DefenseReport)]) -> String {
    let mut out = String::from("threshold,ba,asr,pruned\n");
    for (t, r) in rows {
        out.push_str(&format!(
            "{t},{},{},{}\n",
            r.ba_after,
            r.asr_after,
            r.pruned_or_noised.len()
        ));
    }
    out
}

/// Conv-BN pairs that form the channel stream tapped by `layer_tag`: the
/// matching convN for the plain net; for a resnet stage, every block's
/// conv2 plus the stream entry (the stage's downsample, or the stem for
/// the identity-skip first stage).
fn stream_pairs_for_tag(model: &Model, layer_tag: &str) -> Result<Vec<usize>> {
    let pairs = model.conv_bn_pairs();
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let in_stage = p.layer_id.starts_with(&format!("{layer_tag}."));
        if p.layer_id == layer_tag
            || (in_stage && p.layer_id.ends_with(".conv2"))
            || (in_stage && p.layer_id.ends_with(".down.conv"))
            || (layer_tag == "stage1" && p.layer_id == "stem.conv")
            || (layer_tag == "stem" && p.layer_id == "stem.conv")
        {
            out.push(i);
        }
    }
    if out.is_empty() {
        return Err(Error::Argument(format!(
            "no conv block matches layer tag {layer_tag:?}; known: {:?}",
            pairs.iter().map(|p| &p.layer_id).collect::<Vec<_>>()
        )));
    }
    Ok(out)
}

/// Adds seeded uniform noise in [-eps, eps] to every BN scale and shift;
/// conv kernels and running statistics are untouched.
pub fn neuron_noise(
    model: &Model,
    eps_noise: f32,
    seed: u64,
    ctx: &EvalContext<'_>,
) -> Result<(Model, DefenseReport)> {
    if eps_noise < 0.0 {
        return Err(Error::Argument(format!(
            "eps_noise must be non-negative, got {eps_noise}"
        )));
    }
    let start = Instant::now();
    let (ba_before, asr_before) = ctx.metrics(model)?;
    let mut noised = model.clone();
    if eps_noise > 0.0 {
        let mut rng = SeededRng::derive(seed, 0x401);
        let pairs: Vec<_> = model.conv_bn_pairs().to_vec();
        for pair in &pairs {
            for idx in [pair.gamma, pair.beta] {
                for v in noised.params.get_mut(idx).data_mut() {
                    *v += rng.uniform(-eps_noise, eps_noise);
                }
            }
        }
    }
    let (ba_after, asr_after) = ctx.metrics(&noised)?;
    let report = DefenseReport {
        defense_id: format!("neuron_noise(eps={eps_noise},seed={seed})"),
        ba_before,
        asr_before,
        ba_after,
        asr_after,
        pruned_or_noised: vec![format!("bn_affine:uniform(+-{eps_noise})")],
        wall_time_s: start.elapsed().as_secs_f64(),
        loss_trace: None,
    }
    .validate()?;
    Ok((noised, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SplitTag};
    use crate::triggers::make_noise_trigger;
    use grond_core::build_model;

    fn ctx_fixture() -> (LabeledDataset, Trigger) {
        let test = make_synthetic(4, 10, 8, 30).unwrap().with_tag(SplitTag::Test);
        let trigger = make_noise_trigger([3, 8, 8], 0.03, 1).unwrap();
        (test, trigger)
    }

    #[test]
    fn clp_with_unreachable_threshold_changes_nothing() {
        let model = build_model("convnet", 4, 0.125, 1, [3, 8, 8]).unwrap();
        let (test, trigger) = ctx_fixture();
        let ctx = EvalContext {
            test_set: &test,
            trigger: &trigger,
            surrogate: None,
            target_class: 0,
        };
        let (pruned, report) = clp_defense(&model, 1e9, &ctx).unwrap();
        assert!(pruned.bits_eq(&model));
        assert!(report.pruned_or_noised.is_empty());
        assert_eq!(report.ba_before, report.ba_after);
        assert!(matches!(
            clp_defense(&model, 0.0, &ctx),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn clp_zeroes_exactly_the_reported_channels() {
        let mut model = build_model("convnet", 4, 0.125, 2, [3, 8, 8]).unwrap();
        {
            let kernel = model.params.by_name_mut("conv3.weight").unwrap();
            let per: usize = kernel.shape()[1..].iter().product();
            for v in &mut kernel.data_mut()[5 * per..6 * per] {
                *v = 1.5;
            }
        }
        let (test, trigger) = ctx_fixture();
        let ctx = EvalContext {
            test_set: &test,
            trigger: &trigger,
            surrogate: None,
            target_class: 0,
        };
        let before = model.clone();
        let (pruned, report) = clp_defense(&model, 3.0, &ctx).unwrap();
        assert!(model.bits_eq(&before), "input snapshot must stay unmodified");
        assert!(report.pruned_or_noised.contains(&"conv3:5".to_string()));
        let reported: std::collections::BTreeSet<String> =
            report.pruned_or_noised.iter().cloned().collect();
        for pair in pruned.conv_bn_pairs() {
            let kb = before.params.get(pair.conv);
            let ka = pruned.params.get(pair.conv);
            let per: usize = kb.shape()[1..].iter().product();
            for k in 0..pair.out_ch {
                let id = format!("{}:{k}", pair.layer_id);
                if reported.contains(&id) {
                    assert!(ka.data()[k * per..(k + 1) * per].iter().all(|&v| v == 0.0));
                    assert_eq!(pruned.params.get(pair.gamma).data()[k], 0.0);
                    assert_eq!(pruned.params.get(pair.beta).data()[k], 0.0);
                } else {
                    for j in 0..per {
                        assert_eq!(
                            ka.data()[k * per + j].to_bits(),
                            kb.data()[k * per + j].to_bits()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn defenses_commute_as_pure_transforms() {
        let model = build_model("convnet", 4, 0.125, 7, [3, 8, 8]).unwrap();
        let (test, trigger) = ctx_fixture();
        let ctx = EvalContext {
            test_set: &test,
            trigger: &trigger,
            surrogate: None,
            target_class: 0,
        };
        // Reports computed from the same input in either order agree.
        let (a1, _) = clp_defense(&model, 2.0, &ctx).unwrap();
        let (b1, _) = neuron_noise(&model, 0.1, 9, &ctx).unwrap();
        let (a2, _) = clp_defense(&model, 2.0, &ctx).unwrap();
        let (b2, _) = neuron_noise(&model, 0.1, 9, &ctx).unwrap();
        assert!(a1.bits_eq(&a2));
        assert!(b1.bits_eq(&b2));
    }

    #[test]
    fn neuron_noise_zero_is_identity_and_bound_holds() {
        let model = build_model("convnet", 4, 0.125, 3, [3, 8, 8]).unwrap();
        let (test, trigger) = ctx_fixture();
        let ctx = EvalContext {
            test_set: &test,
            trigger: &trigger,
            surrogate: None,
            target_class: 0,
        };
        let (same, report) = neuron_noise(&model, 0.0, 5, &ctx).unwrap();
        assert!(same.bits_eq(&model));
        assert_eq!(report.ba_before, report.ba_after);

        let eps = 0.3f32;
        let (noised, _) = neuron_noise(&model, eps, 5, &ctx).unwrap();
        for pair in model.conv_bn_pairs() {
            for idx in [pair.gamma, pair.beta] {
                for (a, b) in noised
                    .params
                    .get(idx)
                    .data()
                    .iter()
                    .zip(model.params.get(idx).data())
                {
                    assert!((a - b).abs() <= eps + 1e-6);
                }
            }
            // Kernels and running stats untouched.
            assert!(noised
                .params
                .get(pair.conv)
                .bits_eq(model.params.get(pair.conv)));
            assert!(noised
                .params
                .get(pair.running_mean)
                .bits_eq(model.params.get(pair.running_mean)));
        }
        assert!(matches!(
            neuron_noise(&model, -0.1, 5, &ctx),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn finetune_zero_epochs_keeps_the_model() {
        let model = build_model("convnet", 4, 0.125, 4, [3, 8, 8]).unwrap();
        let (test, trigger) = ctx_fixture();
        let subset = make_synthetic(4, 5, 8, 40).unwrap();
        let ctx = EvalContext {
            test_set: &test,
            trigger: &trigger,
            surrogate: None,
            target_class: 0,
        };
        let (tuned, report) = vanilla_finetune(&model, &subset, 0, 0.01, &ctx).unwrap();
        assert!(tuned.bits_eq(&model));
        assert_eq!(report.loss_trace.as_deref(), Some(&[][..]));
        let empty = LabeledDataset::new(
            grond_core::Tensor::filled(&[1, 3, 8, 8], 0.5),
            vec![0],
            SplitTag::Train,
            4,
        )
        .unwrap()
        .subset(&[], SplitTag::Train);
        assert!(empty.is_err() || vanilla_finetune(&model, &empty.unwrap(), 1, 0.01, &ctx).is_err());
    }

    #[test]
    fn tac_prune_infinite_threshold_is_identity_and_empty_sweep_errors() {
        let model = build_model("convnet", 4, 0.125, 8, [3, 8, 8]).unwrap();
        let (test, trigger) = ctx_fixture();
        let subset = make_synthetic(4, 5, 8, 41).unwrap();
        let ctx = EvalContext {
            test_set: &test,
            trigger: &trigger,
            surrogate: None,
            target_class: 0,
        };
        let (pruned, report) = tac_prune(
            &model,
            &trigger,
            None,
            &subset,
            f32::INFINITY,
            "conv4",
            &ctx,
        )
        .unwrap();
        assert!(pruned.bits_eq(&model));
        assert!(report.pruned_or_noised.is_empty());
        assert!(matches!(
            tac_prune_sweep(&model, &trigger, None, &subset, &[], "conv4", &ctx),
            Err(Error::Argument(_))
        ));
    }
}
