//! Parameter-space channel scoring (UCLC) and adversarial backdoor
//! injection: end-of-epoch flattening of channels whose scores sit more
//! than u standard deviations above their layer mean.

use grond_core::graph::ConvBnPair;
use grond_core::layers::BN_EPS;
use grond_core::tensor::Tensor;
use grond_core::train::{train, EpochCallback, EpochStats, TrainConfig};
use grond_core::Model;

use crate::analysis::{evaluate, AttackMetrics};
use crate::data::{build_poisoned, LabeledDataset, PoisonPlan};
use crate::error::{Error, Result};
use crate::triggers::Trigger;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Uclc,
    Tac,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct LayerScores {
    pub layer_id: String,
    pub scores: Vec<f32>,
    /// Population statistics over the layer's channels.
    pub mean: f32,
    pub std: f32,
}

/// Per-(layer, channel) scalar scores with layer-wise statistics.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ChannelScoreTable {
    pub score_kind: ScoreKind,
    pub layers: Vec<LayerScores>,
    /// Conv blocks without a trailing BN would be skipped and recorded
    /// here; the registered architectures have none.
    pub skipped_layers: Vec<String>,
}

impl ChannelScoreTable {
    pub fn from_scores(
        score_kind: ScoreKind,
        layers: Vec<(String, Vec<f32>)>,
    ) -> ChannelScoreTable {
        let layers = layers
            .into_iter()
            .map(|(layer_id, scores)| {
                let (mean, std) = population_stats(&scores);
                LayerScores {
                    layer_id,
                    scores,
                    mean,
                    std,
                }
            })
            .collect();
        ChannelScoreTable {
            score_kind,
            layers,
            skipped_layers: Vec::new(),
        }
    }

    pub fn layer(&self, layer_id: &str) -> Option<&LayerScores> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Channels with score strictly above mean + u * std of their layer.
    /// Monotone in u: a larger threshold flags a subset.
    pub fn flagged(&self, u: f32) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let threshold = layer.mean + u * layer.std;
            for (k, &s) in layer.scores.iter().enumerate() {
                if s > threshold {
                    out.push((layer.layer_id.clone(), k));
                }
            }
        }
        out
    }

    pub fn max_score(&self) -> f32 {
        self.layers
            .iter()
            .flat_map(|l| l.scores.iter().copied())
            .fold(0.0, f32::max)
    }

    /// CSV rows `layer,channel,score`; sorted mode orders by descending
    /// score within each layer.
    pub fn to_csv(&self, sorted: bool) -> String {
        let mut out = String::from("layer,channel,score\n");
        for layer in &self.layers {
            let mut rows: Vec<(usize, f32)> =
                layer.scores.iter().copied().enumerate().collect();
            if sorted {
                rows.sort_by(|a, b| b.1.total_cmp(&a.1));
            }
            for (k, s) in rows {
                out.push_str(&format!("{},{k},{s}\n", layer.layer_id));
            }
        }
        out
    }
}

pub fn population_stats(scores: &[f32]) -> (f32, f32) {
    if scores.is_empty() {
        return (0.0, 0.0);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = scores
        .iter()
        .map(|&s| {
            let d = s as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean as f32, var.sqrt() as f32)
}

/// Largest singular value of the channel kernel reshaped to
/// (C_in, kh*kw). Power iteration runs on the smaller Gram matrix in f64;
/// the iteration cap is sized for near-degenerate spectra, where the
/// per-step contraction (sigma2/sigma1)^2 approaches one.
pub fn spectral_norm_channel(kernel_rows: &[f32], rows: usize, cols: usize) -> f32 {
    debug_assert_eq!(kernel_rows.len(), rows * cols);
    let m = |r: usize, c: usize| kernel_rows[r * cols + c] as f64;
    // Gram over the smaller side.
    let dim = rows.min(cols);
    let mut gram = vec![0.0f64; dim * dim];
    if rows <= cols {
        // G = M M^T
        for i in 0..rows {
            for j in i..rows {
                let dot: f64 = (0..cols).map(|c| m(i, c) * m(j, c)).sum();
                gram[i * dim + j] = dot;
                gram[j * dim + i] = dot;
            }
        }
    } else {
        // G = M^T M
        for i in 0..cols {
            for j in i..cols {
                let dot: f64 = (0..rows).map(|r| m(r, i) * m(r, j)).sum();
                gram[i * dim + j] = dot;
                gram[j * dim + i] = dot;
            }
        }
    }
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    // Fixed pseudo-random start, almost surely not orthogonal to the top
    // eigenvector.
    let mut v: Vec<f64> = (0..dim)
        .map(|i| 1.0 + 0.37 * ((i * 2654435761_usize) % 97) as f64 / 97.0)
        .collect();
    let n0 = norm(&v);
    for a in v.iter_mut() {
        *a /= n0;
    }
    let mut lambda_prev = 0.0f64;
    let mut w = vec![0.0f64; dim];
    for _ in 0..20_000 {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = gram[i * dim..(i + 1) * dim]
                .iter()
                .zip(&v)
                .map(|(&g, &x)| g * x)
                .sum();
        }
        let lambda = norm(&w);
        if lambda == 0.0 {
            return 0.0;
        }
        for (x, &wi) in v.iter_mut().zip(&w) {
            *x = wi / lambda;
        }
        if (lambda - lambda_prev).abs() <= 1e-13 * lambda.max(1.0) {
            return lambda.sqrt() as f32;
        }
        lambda_prev = lambda;
    }
    lambda_prev.sqrt() as f32
}

fn channel_uclc(kernel: &Tensor, pair: &ConvBnPair, model: &Model, k: usize) -> f32 {
    let shape = kernel.shape(); // (C_out, C_in, kh, kw)
    let (c_in, kh, kw) = (shape[1], shape[2], shape[3]);
    let per = c_in * kh * kw;
    let slice = &kernel.data()[k * per..(k + 1) * per];
    let sigma_max = spectral_norm_channel(slice, c_in, kh * kw);
    let gamma = model.params.get(pair.gamma).data()[k];
    let var = model.params.get(pair.running_var).data()[k];
    (gamma.abs() / (var + BN_EPS).sqrt()) * sigma_max
}

/// Data-free channel scores: |gamma_k| / sqrt(running_var_k + eps) times
/// the largest singular value of the channel kernel. A pure function of
/// the snapshot.
pub fn compute_uclc(model: &Model) -> Result<ChannelScoreTable> {
    let pairs = model.conv_bn_pairs();
    if pairs.is_empty() {
        return Err(Error::Argument(
            "model has no conv blocks followed by batch norm".into(),
        ));
    }
    let mut layers = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let kernel = model.params.get(pair.conv);
        let scores: Vec<f32> = (0..pair.out_ch)
            .map(|k| channel_uclc(kernel, pair, model, k))
            .collect();
        layers.push((pair.layer_id.clone(), scores));
    }
    Ok(ChannelScoreTable::from_scores(ScoreKind::Uclc, layers))
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AbiConfig {
    /// Threshold multiplier u: channels above mean + u * std are flattened.
    pub u: f32,
    /// Apply period in epochs (the final epoch always applies).
    pub apply_every: usize,
}

impl Default for AbiConfig {
    fn default() -> Self {
        AbiConfig {
            u: 3.0,
            apply_every: 1,
        }
    }
}

impl AbiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u < 0.0 {
            return Err(Error::Argument(format!("u must be non-negative, got {}", self.u)));
        }
        if self.apply_every == 0 {
            return Err(Error::Argument("apply_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AbiReportRow {
    pub epoch: usize,
    pub layer_id: String,
    pub channel: usize,
    pub old_score: f32,
    pub new_score: f32,
}

pub fn abi_report_csv(rows: &[AbiReportRow]) -> String {
    let mut out = String::from("epoch,layer_id,channel,old_score,new_score\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.layer_id, r.channel, r.old_score, r.new_score
        ));
    }
    out
}

/// One flattening pass: per conv-BN layer, scores are computed on the
/// pre-step weights, channels above mean + u * std get their kernel slice
/// replaced by the elementwise mean kernel over all channels of that
/// layer (also from pre-step weights). BN parameters are untouched.
pub fn abi_step(model: &Model, config: &AbiConfig) -> Result<(Model, Vec<AbiReportRow>)> {
    abi_step_at_epoch(model, config, 0)
}

fn abi_step_at_epoch(
    model: &Model,
    config: &AbiConfig,
    epoch: usize,
) -> Result<(Model, Vec<AbiReportRow>)> {
    config.validate()?;
    let mut out = model.clone();
    let mut report = Vec::new();
    let pairs: Vec<ConvBnPair> = model.conv_bn_pairs().to_vec();
    for pair in &pairs {
        let kernel = model.params.get(pair.conv);
        let shape = kernel.shape().to_vec();
        let per: usize = shape[1..].iter().product();
        let scores: Vec<f32> = (0..pair.out_ch)
            .map(|k| channel_uclc(kernel, pair, model, k))
            .collect();
        let (mean, std) = population_stats(&scores);
        let threshold = mean + config.u * std;
        let flagged: Vec<usize> = (0..pair.out_ch)
            .filter(|&k| scores[k] > threshold)
            .collect();
        if flagged.is_empty() {
            continue;
        }
        // Elementwise mean kernel over all channels, from pre-step weights.
        let mut mean_kernel = vec![0.0f64; per];
        for k in 0..pair.out_ch {
            for (j, &v) in kernel.data()[k * per..(k + 1) * per].iter().enumerate() {
                mean_kernel[j] += v as f64;
            }
        }
        let mean_kernel: Vec<f32> = mean_kernel
            .iter()
            .map(|&v| (v / pair.out_ch as f64) as f32)
            .collect();
        for &k in &flagged {
            out.params.get_mut(pair.conv).data_mut()[k * per..(k + 1) * per]
                .copy_from_slice(&mean_kernel);
        }
        let new_kernel = out.params.get(pair.conv);
        for &k in &flagged {
            report.push(AbiReportRow {
                epoch,
                layer_id: pair.layer_id.clone(),
                channel: k,
                old_score: scores[k],
                new_score: channel_uclc(new_kernel, pair, &out, k),
            });
        }
    }
    Ok((out, report))
}

/// End-of-epoch hook wiring `abi_step` into the training loop.
pub struct AbiCallback {
    pub config: AbiConfig,
    total_epochs: usize,
    pub rows: Vec<AbiReportRow>,
}

impl AbiCallback {
    pub fn new(config: AbiConfig, total_epochs: usize) -> AbiCallback {
        AbiCallback {
            config,
            total_epochs,
            rows: Vec::new(),
        }
    }

    fn applies_at(&self, epoch: usize) -> bool {
        // The deployed model must carry the flattened-weights property,
        // so the final epoch always applies.
        (epoch + 1) % self.config.apply_every == 0 || epoch + 1 == self.total_epochs
    }
}

impl EpochCallback for AbiCallback {
    fn on_epoch_end(&mut self, model: &mut Model, epoch: usize) -> grond_core::Result<()> {
        if !self.applies_at(epoch) {
            return Ok(());
        }
        let (updated, mut rows) =
            abi_step_at_epoch(model, &self.config, epoch).map_err(|e| match e {
                Error::Core(c) => c,
                other => grond_core::Error::Argument(other.to_string()),
            })?;
        *model = updated;
        self.rows.append(&mut rows);
        Ok(())
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub val_ba: f64,
    pub val_asr: f64,
}

/// Full attack run output.
pub struct GrondOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub val_history: Vec<EpochEval>,
    pub abi_rows: Vec<AbiReportRow>,
    pub selected_epoch: usize,
    pub metrics: AttackMetrics,
    pub poisoned_indices: Vec<usize>,
}

/// Poison, train with the ABI end-of-epoch callback, select the best
/// checkpoint by clean validation accuracy, and evaluate on the test set.
/// `abi` None disables the callback (the trigger-only ablation).
#[allow(clippy::too_many_arguments)]
pub fn run_grond(
    victim: &Model,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    test_set: &LabeledDataset,
    trigger: &Trigger,
    surrogate: Option<&Model>,
    plan: &PoisonPlan,
    train_config: &TrainConfig,
    abi: Option<AbiConfig>,
) -> Result<GrondOutcome> {
    let poisoned = build_poisoned(train_set, trigger, plan, surrogate)?;

    struct ValTracker<'a> {
        val: &'a LabeledDataset,
        trigger: &'a Trigger,
        surrogate: Option<&'a Model>,
        target: u32,
        history: Vec<EpochEval>,
        best: Option<(f64, usize, Model)>,
    }
    impl EpochCallback for ValTracker<'_> {
        fn on_epoch_end(&mut self, model: &mut Model, epoch: usize) -> grond_core::Result<()> {
            let m = evaluate(model, self.val, self.trigger, self.surrogate, self.target)
                .map_err(|e| grond_core::Error::Argument(e.to_string()))?;
            self.history.push(EpochEval {
                epoch,
                val_ba: m.ba,
                val_asr: m.asr,
            });
            // Ties go to the later epoch: the most-trained checkpoint
            // among equally accurate ones.
            let better = match &self.best {
                Some((best_ba, _, _)) => m.ba >= *best_ba,
                None => true,
            };
            if better {
                self.best = Some((m.ba, epoch, model.clone()));
            }
            Ok(())
        }
    }

    let mut abi_cb = abi
        .map(|config| -> Result<AbiCallback> {
            config.validate()?;
            Ok(AbiCallback::new(config, train_config.epochs))
        })
        .transpose()?;
    let mut tracker = ValTracker {
        val: val_set,
        trigger,
        surrogate,
        target: plan.target_class,
        history: Vec::new(),
        best: None,
    };

    let trained = {
        // ABI runs before validation so checkpoints carry its effect.
        let mut callbacks: Vec<&mut dyn EpochCallback> = Vec::new();
        if let Some(cb) = abi_cb.as_mut() {
            callbacks.push(cb);
        }
        callbacks.push(&mut tracker);
        let (model, history) = train(
            victim,
            &poisoned.data.images,
            &poisoned.data.labels,
            train_config,
            &mut callbacks,
        )?;
        (model, history)
    };
    let (final_model, history) = trained;

    let (selected_epoch, selected) = match tracker.best.take() {
        Some((_, epoch, model)) => (epoch, model),
        None => (0, final_model),
    };
    let metrics = evaluate(&selected, test_set, trigger, surrogate, plan.target_class)?;
    Ok(GrondOutcome {
        model: selected,
        history,
        val_history: tracker.history,
        abi_rows: abi_cb.map(|cb| cb.rows).unwrap_or_default(),
        selected_epoch,
        metrics,
        poisoned_indices: poisoned.poisoned_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use grond_core::build_model;

    #[test]
    fn score_table_stats_and_flagging() {
        // 99 channels at 1.0 and one at 50.0: mean 1.49, population std
        // ~4.876, threshold at u=3 ~= 16.1 -> exactly the outlier flagged.
        let mut scores = vec![1.0f32; 99];
        scores.push(50.0);
        let table = ChannelScoreTable::from_scores(
            ScoreKind::Uclc,
            vec![("layer".to_string(), scores)],
        );
        let layer = table.layer("layer").unwrap();
        assert!((layer.mean - 1.49).abs() < 1e-6);
        assert!((layer.std - 4.8755).abs() < 1e-3, "std {}", layer.std);
        let flagged = table.flagged(3.0);
        assert_eq!(flagged, vec![("layer".to_string(), 99)]);
        // Recomputing the stats from the entries reproduces them.
        let (mean, std) = population_stats(&layer.scores);
        assert!((mean - layer.mean).abs() <= 1e-6);
        assert!((std - layer.std).abs() <= 1e-6);
    }

    #[test]
    fn uniform_scores_flag_nothing() {
        let table = ChannelScoreTable::from_scores(
            ScoreKind::Uclc,
            vec![("l".to_string(), vec![2.5; 32])],
        );
        assert!(table.flagged(0.0).is_empty(), "std 0 must flag no channel");
        assert!(table.flagged(3.0).is_empty());
    }

    #[test]
    fn flag_sets_are_monotone_in_u() {
        let mut rng = grond_core::rng::SeededRng::new(3);
        let mut scores = vec![0.0f32; 64];
        rng.fill_uniform(&mut scores, 0.0, 5.0);
        let table =
            ChannelScoreTable::from_scores(ScoreKind::Uclc, vec![("l".to_string(), scores)]);
        let mut prev = table.flagged(0.0);
        for u in [0.5f32, 1.0, 1.5, 2.0, 3.0, 5.0] {
            let cur = table.flagged(u);
            assert!(
                cur.iter().all(|c| prev.contains(c)),
                "flag set at u={u} is not a subset"
            );
            prev = cur;
        }
        assert!(table.flagged(f32::INFINITY).is_empty());
    }

    #[test]
    fn uclc_of_a_hand_set_kernel_is_its_magnitude() {
        // Zero every conv1 kernel, set one tap of channel 0 to w; with
        // gamma=1 and running_var=1-eps the score is exactly |w|.
        let mut model = build_model("convnet", 4, 0.125, 0, [3, 8, 8]).unwrap();
        let w = -2.25f32;
        {
            let kernel = model.params.by_name_mut("conv1.weight").unwrap();
            for v in kernel.data_mut() {
                *v = 0.0;
            }
            kernel.data_mut()[4] = w; // channel 0, input 0, center-ish tap
        }
        let eps = grond_core::layers::BN_EPS;
        model.params.by_name_mut("bn1.running_var").unwrap().data_mut()[0] = 1.0 - eps;
        let table = compute_uclc(&model).unwrap();
        let layer = table.layer("conv1").unwrap();
        assert!((layer.scores[0] - w.abs()).abs() <= 1e-5, "{}", layer.scores[0]);
        // All-zero channels score zero.
        assert_eq!(layer.scores[1], 0.0);
    }

    #[test]
    fn uclc_is_a_pure_function_of_the_snapshot() {
        let model = build_model("resnet18", 4, 0.125, 5, [3, 8, 8]).unwrap();
        let a = compute_uclc(&model).unwrap();
        let b = compute_uclc(&model).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.layer_id, lb.layer_id);
            assert_eq!(la.scores, lb.scores);
        }
        // Every conv of the resnet participates (stem + 16 block convs +
        // 3 downsamples).
        assert_eq!(a.layers.len(), 20);
        assert!(a.skipped_layers.is_empty());
    }

    #[test]
    fn abi_step_flattens_exactly_the_flagged_channels() {
        let mut model = build_model("convnet", 4, 0.125, 9, [3, 8, 8]).unwrap();
        // Make conv2 channel 3 a strong outlier.
        {
            let kernel = model.params.by_name_mut("conv2.weight").unwrap();
            let per: usize = kernel.shape()[1..].iter().product();
            for v in &mut kernel.data_mut()[3 * per..4 * per] {
                *v = 2.0;
            }
        }
        let before = model.clone();
        let (after, report) = abi_step(&model, &AbiConfig { u: 3.0, apply_every: 1 }).unwrap();
        assert!(!report.is_empty());
        assert!(report.iter().any(|r| r.layer_id == "conv2" && r.channel == 3));

        // Expected mean kernel over pre-step weights.
        let kernel = before.params.by_name("conv2.weight").unwrap();
        let per: usize = kernel.shape()[1..].iter().product();
        let out_ch = kernel.shape()[0];
        let mut mean = vec![0.0f64; per];
        for k in 0..out_ch {
            for (j, &v) in kernel.data()[k * per..(k + 1) * per].iter().enumerate() {
                mean[j] += v as f64;
            }
        }
        let mean: Vec<f32> = mean.iter().map(|&v| (v / out_ch as f64) as f32).collect();
        let after_kernel = after.params.by_name("conv2.weight").unwrap();
        for (j, &m) in mean.iter().enumerate() {
            assert!(
                (after_kernel.data()[3 * per + j] - m).abs() <= 1e-7,
                "flattened channel deviates from the pre-step layer mean"
            );
        }
        // Unflagged parameters are bit-identical; BN untouched.
        let flagged: std::collections::BTreeSet<(String, usize)> = report
            .iter()
            .map(|r| (r.layer_id.clone(), r.channel))
            .collect();
        for pair in before.conv_bn_pairs() {
            let ka = before.params.get(pair.conv);
            let kb = after.params.get(pair.conv);
            let per: usize = ka.shape()[1..].iter().product();
            for k in 0..pair.out_ch {
                if flagged.contains(&(pair.layer_id.clone(), k)) {
                    continue;
                }
                for j in 0..per {
                    assert_eq!(
                        ka.data()[k * per + j].to_bits(),
                        kb.data()[k * per + j].to_bits(),
                        "unflagged channel changed: {}:{k}",
                        pair.layer_id
                    );
                }
            }
            for idx in [pair.gamma, pair.beta, pair.running_mean, pair.running_var] {
                assert!(before.params.get(idx).bits_eq(after.params.get(idx)));
            }
        }
        // Report scores: old above threshold, new recomputed.
        for r in &report {
            assert!(r.old_score > r.new_score);
        }
    }

    #[test]
    fn abi_step_with_unreachable_threshold_is_identity() {
        let model = build_model("resnet18", 4, 0.125, 2, [3, 8, 8]).unwrap();
        let (after, report) = abi_step(&model, &AbiConfig { u: 1e9, apply_every: 1 }).unwrap();
        assert!(report.is_empty());
        assert!(after.bits_eq(&model));
        let (after, report) =
            abi_step(&model, &AbiConfig { u: f32::INFINITY, apply_every: 1 }).unwrap();
        assert!(report.is_empty());
        assert!(after.bits_eq(&model));
    }

    #[test]
    fn abi_config_validation() {
        assert!(AbiConfig { u: -0.1, apply_every: 1 }.validate().is_err());
        assert!(AbiConfig { u: 1.0, apply_every: 0 }.validate().is_err());
    }
}
