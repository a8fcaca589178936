//! Subcommand implementations over the lab library.

use std::fs;
use std::path::{Path, PathBuf};

use grond_core::{build_model, load_snapshot, save_snapshot, Model};
use grond_lab::abi::{abi_report_csv, compute_uclc, run_grond, AbiConfig};
use grond_lab::analysis::{
    self, compute_tac, evaluate, export_features, feature_decouple, weight_change_csv,
    weight_change_report,
};
use grond_lab::data::{
    build_poisoned, load_cifar10, make_synthetic, LabelMode, LabeledDataset, PoisonPlan, SplitTag,
};
use grond_lab::defenses::{
    clp_defense, neuron_noise, sweep_csv, tac_prune, tac_prune_sweep, vanilla_finetune,
    DefenseReport, EvalContext,
};
use grond_lab::triggers::{
    generate_upgd, load_trigger, make_blend_trigger, make_noise_trigger, make_patch_trigger,
    save_trigger, Trigger, UpgdConfig,
};

use crate::config::{
    parse_scale, DatasetKind, DefenseSection, ExperimentConfig, LabelModeConfig, ReportKind,
    TriggerKindConfig,
};
use crate::manifest::RunManifest;

pub struct Workspace {
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
}

/// Existing-output policy: a fresh dir is created; an existing dir is
/// reused only under --resume (same config hash) or wiped under --force.
pub fn open_workspace(
    config: ExperimentConfig,
    resume: bool,
    force: bool,
) -> anyhow::Result<Workspace> {
    let output_dir = config.output_dir.clone();
    let manifest_path = RunManifest::path(&output_dir);
    if output_dir.exists() && manifest_path.exists() {
        if force {
            fs::remove_dir_all(&output_dir)?;
        } else if !resume {
            anyhow::bail!(
                "output dir {} already holds a run; pass --resume to reuse it or --force to discard it",
                output_dir.display()
            );
        }
    }
    fs::create_dir_all(&output_dir)?;
    let manifest = RunManifest::load_or_new(&output_dir, &config.hash())?;
    Ok(Workspace {
        config,
        output_dir,
        manifest,
    })
}

pub struct DataBundle {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Workspace {
    pub fn load_data(&self) -> anyhow::Result<DataBundle> {
        let d = &self.config.data;
        let (train_full, test) = match d.dataset {
            DatasetKind::Synthetic => {
                let train = make_synthetic(d.classes, d.per_class, d.side, d.train_seed)?;
                let test = make_synthetic(d.classes, d.test_per_class, d.side, d.test_seed)?
                    .with_tag(SplitTag::Test);
                (train, test)
            }
            DatasetKind::Cifar10 => {
                let root = d
                    .root
                    .clone()
                    .or_else(|| std::env::var_os("GROND_DATA_ROOT").map(PathBuf::from))
                    .ok_or_else(|| {
                        anyhow::anyhow!(
                            "cifar10 needs data.root or the GROND_DATA_ROOT environment variable"
                        )
                    })?;
                load_cifar10(&root)?
            }
        };
        let (val, train) = train_full.split_off(d.val_size, self.config.seed)?;
        Ok(DataBundle { train, val, test })
    }

    fn image_shape(&self) -> [usize; 3] {
        match self.config.data.dataset {
            DatasetKind::Synthetic => [3, self.config.data.side, self.config.data.side],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    fn snapshot_dir(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn load_artifact_model(&self, name: &str) -> anyhow::Result<Model> {
        let rel = self
            .manifest
            .artifact(name)
            .ok_or_else(|| anyhow::anyhow!("run has no {name} artifact yet"))?;
        Ok(load_snapshot(&self.output_dir.join(rel))?)
    }

    fn finish(&mut self) -> anyhow::Result<()> {
        self.manifest.write(&self.output_dir)
    }
}

pub fn cmd_train_surrogate(ws: &mut Workspace) -> anyhow::Result<()> {
    let data = ws.load_data()?;
    let cfg = &ws.config;
    let dir = ws.snapshot_dir("surrogate");
    if dir.join("manifest").exists() {
        println!("surrogate: reusing {}", dir.display());
        return Ok(());
    }
    let scale = parse_scale(&cfg.surrogate.channel_scale)?;
    let fresh = build_model(
        &cfg.surrogate.arch,
        data.train.class_count,
        scale,
        cfg.seed,
        ws.image_shape(),
    )?;
    let tc = cfg.surrogate.train.to_train_config(cfg.seed);
    if tc.epochs == 0 {
        println!("warning: surrogate trained for 0 epochs; registering the fresh snapshot");
    }
    let (model, history) = grond_core::train(
        &fresh,
        &data.train.images,
        &data.train.labels,
        &tc,
        &mut [],
    )?;
    let val_acc = model.accuracy(&data.val.images, &data.val.labels, 256)?;
    save_snapshot(&model, &dir)?;
    let history_json = serde_json::json!({
        "val_accuracy": val_acc,
        "epochs": history.iter().map(|h| {
            serde_json::json!({"epoch": h.epoch, "lr": h.lr, "loss": h.train_loss, "acc": h.train_acc})
        }).collect::<Vec<_>>(),
    });
    fs::write(
        ws.output_dir.join("surrogate_history.json"),
        serde_json::to_string_pretty(&history_json)?,
    )?;
    ws.manifest.record("surrogate", "surrogate");
    ws.manifest
        .record("surrogate_history", "surrogate_history.json");
    ws.finish()?;
    println!("surrogate: trained, val accuracy {val_acc:.2}");
    Ok(())
}

/// Builds the configured trigger, training the surrogate first if the
/// kind needs one and none is registered.
pub fn cmd_gen_trigger(ws: &mut Workspace, kind_override: Option<TriggerKindConfig>) -> anyhow::Result<()> {
    let dir = ws.snapshot_dir("trigger");
    if dir.join("manifest").exists() {
        println!("trigger: reusing {}", dir.display());
        return Ok(());
    }
    let kind = kind_override.unwrap_or(ws.config.trigger.kind);
    let shape = ws.image_shape();
    let trigger = match kind {
        TriggerKindConfig::Patch => {
            make_patch_trigger(shape, ws.config.trigger.patch_side, None)?
        }
        TriggerKindConfig::Blend => {
            make_blend_trigger(shape, ws.config.trigger.blend_ratio, ws.config.seed)?
        }
        TriggerKindConfig::RandomNoise => {
            make_noise_trigger(shape, ws.config.epsilon(), ws.config.seed)?
        }
        TriggerKindConfig::PgdPerSample => Trigger::PgdPerSample {
            epsilon: ws.config.epsilon(),
            steps: ws.config.trigger.steps,
            alpha: ws.config.alpha(),
            target_class: ws.config.poison.target_class,
            surrogate_ref: Some("surrogate".into()),
            seed: ws.config.seed,
        },
        TriggerKindConfig::Upgd => {
            if ws.manifest.artifact("surrogate").is_none() {
                cmd_train_surrogate(ws)?;
            }
            let surrogate = ws.load_artifact_model("surrogate")?;
            let data = ws.load_data()?;
            let ucfg = UpgdConfig {
                epsilon: ws.config.epsilon(),
                alpha: ws.config.alpha(),
                iterations: 0,
                batch_size: ws.config.trigger.batch_size,
                target_class: ws.config.poison.target_class,
                seed: ws.config.seed,
                accuracy_floor: 0.5,
                surrogate_ref: "surrogate".into(),
            }
            .epochs_of_batches(data.train.n(), ws.config.trigger.iteration_epochs);
            let (trigger, trace) = generate_upgd(&surrogate, &data.train, &ucfg)?;
            if trace.surrogate_warning {
                println!(
                    "warning: surrogate probe accuracy {:.2} is below the configured floor; \
                     the trigger may carry little signal",
                    trace.surrogate_probe_acc
                );
            }
            fs::write(
                ws.output_dir.join("upgd_trace.csv"),
                {
                    let mut s = String::from("iteration,loss,max_abs\n");
                    for (i, (l, m)) in trace.losses.iter().zip(&trace.max_abs).enumerate() {
                        s.push_str(&format!("{i},{l},{m}\n"));
                    }
                    s
                },
            )?;
            ws.manifest.record("upgd_trace", "upgd_trace.csv");
            trigger
        }
    };
    save_trigger(&trigger, &dir)?;
    ws.manifest.record("trigger", "trigger");
    ws.finish()?;
    println!("trigger: {} written to {}", trigger.reference(), dir.display());
    Ok(())
}

/// The per-sample PGD trigger regenerates on the fly and needs the
/// surrogate at hand.
fn trigger_surrogate(ws: &Workspace, trigger: &Trigger) -> anyhow::Result<Option<Model>> {
    match trigger {
        Trigger::PgdPerSample { .. } => Ok(Some(ws.load_artifact_model("surrogate")?)),
        _ => Ok(None),
    }
}

pub fn cmd_attack(
    ws: &mut Workspace,
    no_abi: bool,
    kind_override: Option<TriggerKindConfig>,
) -> anyhow::Result<()> {
    if ws.manifest.artifact("trigger").is_none() {
        if matches!(
            kind_override.unwrap_or(ws.config.trigger.kind),
            TriggerKindConfig::Upgd | TriggerKindConfig::PgdPerSample
        ) && ws.manifest.artifact("surrogate").is_none()
        {
            cmd_train_surrogate(ws)?;
        }
        cmd_gen_trigger(ws, kind_override)?;
    }
    let trigger = load_trigger(&ws.output_dir.join("trigger"))?;
    let surrogate = trigger_surrogate(ws, &trigger)?;
    let data = ws.load_data()?;
    let cfg = &ws.config;

    let plan = PoisonPlan {
        target_class: cfg.poison.target_class,
        rate: cfg.poison.rate,
        label_mode: match cfg.poison.label_mode {
            LabelModeConfig::Clean => LabelMode::Clean,
            LabelModeConfig::Dirty => LabelMode::Dirty,
        },
        seed: cfg.seed,
    };
    let scale = parse_scale(&cfg.victim.channel_scale)?;
    let fresh = build_model(
        &cfg.victim.arch,
        data.train.class_count,
        scale,
        cfg.seed.wrapping_add(1),
        ws.image_shape(),
    )?;
    let tc = cfg.victim.train.to_train_config(cfg.seed.wrapping_add(2));
    let abi = if cfg.victim.abi && !no_abi {
        Some(AbiConfig {
            u: cfg.victim.u,
            apply_every: cfg.victim.apply_every,
        })
    } else {
        None
    };
    let outcome = run_grond(
        &fresh,
        &data.train,
        &data.val,
        &data.test,
        &trigger,
        surrogate.as_ref(),
        &plan,
        &tc,
        abi,
    )?;

    save_snapshot(&outcome.model, &ws.snapshot_dir("victim"))?;
    ws.manifest.record("victim", "victim");
    fs::write(
        ws.output_dir.join("abi_report.csv"),
        abi_report_csv(&outcome.abi_rows),
    )?;
    ws.manifest.record("abi_report", "abi_report.csv");
    let mut idx = String::new();
    for i in &outcome.poisoned_indices {
        idx.push_str(&format!("{i}\n"));
    }
    fs::write(ws.output_dir.join("poisoned_indices.txt"), idx)?;
    ws.manifest
        .record("poisoned_indices", "poisoned_indices.txt");

    let metrics = serde_json::json!({
        "ba": outcome.metrics.ba,
        "asr": outcome.metrics.asr,
        "n_clean": outcome.metrics.n_clean,
        "n_triggered": outcome.metrics.n_triggered,
        "selected_epoch": outcome.selected_epoch,
        "abi": abi_meta(&ws.config, no_abi),
        "val_history": outcome.val_history.iter().map(|e| {
            serde_json::json!({"epoch": e.epoch, "val_ba": e.val_ba, "val_asr": e.val_asr})
        }).collect::<Vec<_>>(),
    });
    fs::write(
        ws.output_dir.join("attack_metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    ws.manifest.record("attack_metrics", "attack_metrics.json");
    ws.finish()?;
    println!(
        "attack: ba {:.2} asr {:.2} (selected epoch {})",
        outcome.metrics.ba, outcome.metrics.asr, outcome.selected_epoch
    );
    Ok(())
}

fn abi_meta(cfg: &ExperimentConfig, no_abi: bool) -> serde_json::Value {
    if cfg.victim.abi && !no_abi {
        serde_json::json!({"enabled": true, "u": cfg.victim.u, "apply_every": cfg.victim.apply_every})
    } else {
        serde_json::json!({"enabled": false})
    }
}

pub fn cmd_defend(ws: &mut Workspace, model_path: Option<PathBuf>, jobs: usize) -> anyhow::Result<()> {
    let model = match &model_path {
        Some(p) => load_snapshot(p)?,
        None => ws.load_artifact_model("victim")?,
    };
    let trigger = load_trigger(&ws.output_dir.join("trigger"))?;
    let surrogate = trigger_surrogate(ws, &trigger)?;
    let data = ws.load_data()?;
    let ctx = EvalContext {
        test_set: &data.test,
        trigger: &trigger,
        surrogate: surrogate.as_ref(),
        target_class: ws.config.poison.target_class,
    };

    let mut reports: Vec<DefenseReport> = Vec::new();
    let mut current = model;
    for (i, defense) in ws.config.defenses.clone().iter().enumerate() {
        let (next, report) = match defense {
            DefenseSection::Clp { u } => clp_defense(&current, *u, &ctx)?,
            DefenseSection::Ft {
                epochs,
                lr,
                subset_fraction,
            } => {
                let n = ((data.train.n() as f64) * subset_fraction).round().max(1.0) as usize;
                let idx = data.train.sample_indices(n, ws.config.seed ^ 0xf7);
                let subset = data.train.subset(&idx, SplitTag::Train)?;
                vanilla_finetune(&current, &subset, *epochs, *lr, &ctx)?
            }
            DefenseSection::NeuronNoise { eps_noise } => {
                neuron_noise(&current, *eps_noise, ws.config.seed ^ 0x40, &ctx)?
            }
            DefenseSection::TacPrune {
                thresholds,
                layer,
                subset,
            } => {
                let idx = data.test.sample_indices(*subset, ws.config.seed ^ 0x7ac);
                let clean = data.test.subset(&idx, SplitTag::Test)?;
                if thresholds.len() > 1 {
                    let sweep = run_sweep(
                        &current, &trigger, surrogate.as_ref(), &clean, thresholds, layer, &ctx,
                        jobs,
                    )?;
                    let csv = sweep_csv(&sweep);
                    let name = format!("tac_sweep_{i}.csv");
                    fs::write(ws.output_dir.join(&name), csv)?;
                    ws.manifest.record(&format!("tac_sweep_{i}"), name.clone());
                    // The sweep reports; the chain continues unchanged.
                    let (_, last) = sweep.into_iter().last().expect("non-empty sweep");
                    (current.clone(), last)
                } else {
                    let t = thresholds.first().copied().unwrap_or(f32::INFINITY);
                    tac_prune(&current, &trigger, surrogate.as_ref(), &clean, t, layer, &ctx)?
                }
            }
        };
        println!(
            "defense {}: ba {:.2} -> {:.2}, asr {:.2} -> {:.2}",
            report.defense_id, report.ba_before, report.ba_after, report.asr_before,
            report.asr_after
        );
        let snap_name = format!("defended_{i}");
        save_snapshot(&next, &ws.snapshot_dir(&snap_name))?;
        ws.manifest.record(&snap_name, snap_name.clone());
        reports.push(report);
        current = next;
    }
    fs::write(
        ws.output_dir.join("defense_reports.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    ws.manifest
        .record("defense_reports", "defense_reports.json");
    ws.finish()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sweep(
    model: &Model,
    trigger: &Trigger,
    surrogate: Option<&Model>,
    clean: &LabeledDataset,
    thresholds: &[f32],
    layer: &str,
    ctx: &EvalContext<'_>,
    jobs: usize,
) -> anyhow::Result<Vec<(f32, DefenseReport)>> {
    if jobs <= 1 || thresholds.len() <= 1 {
        return Ok(tac_prune_sweep(
            model, trigger, surrogate, clean, thresholds, layer, ctx,
        )?);
    }
    // Fan the thresholds out across up to `jobs` worker threads; results
    // keep threshold order.
    let chunks: Vec<Vec<f32>> = thresholds
        .chunks(thresholds.len().div_ceil(jobs))
        .map(|c| c.to_vec())
        .collect();
    let mut out = Vec::with_capacity(thresholds.len());
    std::thread::scope(|scope| -> anyhow::Result<()> {
        let mut handles = Vec::new();
        for chunk in &chunks {
            handles.push(scope.spawn(move || {
                tac_prune_sweep(model, trigger, surrogate, clean, chunk, layer, ctx)
            }));
        }
        for h in handles {
            let part = h.join().map_err(|_| anyhow::anyhow!("sweep worker panicked"))??;
            out.extend(part);
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn cmd_analyze(
    ws: &mut Workspace,
    model_path: Option<PathBuf>,
    baseline: Option<PathBuf>,
    sorted: bool,
) -> anyhow::Result<()> {
    let model = match &model_path {
        Some(p) => load_snapshot(p)?,
        None => ws.load_artifact_model("victim")?,
    };
    let data = ws.load_data()?;
    let a = ws.config.analysis.clone();
    let reports = if a.reports.is_empty() {
        vec![ReportKind::Uclc, ReportKind::Tac]
    } else {
        a.reports.clone()
    };
    for kind in reports {
        match kind {
            ReportKind::Uclc => {
                let table = compute_uclc(&model)?;
                fs::write(ws.output_dir.join("uclc.csv"), table.to_csv(sorted))?;
                ws.manifest.record("uclc", "uclc.csv");
                println!("uclc: max score {:.4}", table.max_score());
            }
            ReportKind::Tac => {
                let trigger = load_trigger(&ws.output_dir.join("trigger"))?;
                let surrogate = trigger_surrogate(ws, &trigger)?;
                let idx = data.test.sample_indices(a.tac_subset, ws.config.seed ^ 0x7ac);
                let clean = data.test.subset(&idx, SplitTag::Test)?;
                let table = compute_tac(&model, &clean, &trigger, surrogate.as_ref(), &a.tac_layer)?;
                fs::write(ws.output_dir.join("tac.csv"), table.to_csv(sorted))?;
                ws.manifest.record("tac", "tac.csv");
                println!("tac[{}]: max {:.4}", a.tac_layer, table.max_score());
            }
            ReportKind::Features => {
                let trigger = load_trigger(&ws.output_dir.join("trigger"))?;
                let surrogate = trigger_surrogate(ws, &trigger)?;
                // Clean and triggered halves of a seeded sample.
                let idx = data.test.sample_indices(a.feature_samples, ws.config.seed ^ 0xfea);
                let clean = data.test.subset(&idx, SplitTag::Test)?;
                let plan = PoisonPlan {
                    target_class: ws.config.poison.target_class,
                    rate: 0.5,
                    label_mode: LabelMode::Dirty,
                    seed: ws.config.seed,
                };
                let poisoned = build_poisoned(&clean, &trigger, &plan, surrogate.as_ref())?;
                export_features(
                    &model,
                    &poisoned.data,
                    &poisoned.poisoned_flags(),
                    "pre_head",
                    &ws.output_dir.join("features.csv"),
                )?;
                ws.manifest.record("features", "features.csv");
                println!("features: {} rows exported", poisoned.data.n());
            }
            ReportKind::Decouple => {
                let n = ((data.train.n() as f64) * a.decouple_fraction).round().max(16.0) as usize;
                let idx = data.train.sample_indices(n, ws.config.seed ^ 0xdec);
                let subset = data.train.subset(&idx, SplitTag::Train)?;
                let mask = feature_decouple(
                    &model,
                    &subset,
                    a.decouple_lambda,
                    a.decouple_epochs,
                    a.decouple_lr,
                )?;
                let json = serde_json::json!({
                    "lambda": mask.lambda,
                    "benign_loss": mask.benign_loss,
                    "backdoor_loss": mask.backdoor_loss,
                    "objective_trace": mask.objective_trace,
                    "mask": mask.mask.data(),
                });
                fs::write(
                    ws.output_dir.join("decouple.json"),
                    serde_json::to_string_pretty(&json)?,
                )?;
                ws.manifest.record("decouple", "decouple.json");
                println!(
                    "decouple: benign loss {:.4}, backdoor loss {:.4}",
                    mask.benign_loss, mask.backdoor_loss
                );
            }
        }
    }
    if let Some(base) = baseline {
        let before = load_snapshot(&base)?;
        let rows = weight_change_report(&before, &model)?;
        fs::write(
            ws.output_dir.join("weight_change.csv"),
            weight_change_csv(&rows, false),
        )?;
        fs::write(
            ws.output_dir.join("weight_change_sorted.csv"),
            weight_change_csv(&rows, true),
        )?;
        ws.manifest.record("weight_change", "weight_change.csv");
        ws.manifest
            .record("weight_change_sorted", "weight_change_sorted.csv");
        println!("weight change: {} channels compared", rows.len());
    }
    ws.finish()?;
    Ok(())
}

pub fn cmd_evaluate(ws: &mut Workspace, model_path: Option<PathBuf>) -> anyhow::Result<()> {
    let model = match &model_path {
        Some(p) => load_snapshot(p)?,
        None => ws.load_artifact_model("victim")?,
    };
    let trigger = load_trigger(&ws.output_dir.join("trigger"))?;
    let surrogate = trigger_surrogate(ws, &trigger)?;
    let data = ws.load_data()?;
    let metrics = evaluate(
        &model,
        &data.test,
        &trigger,
        surrogate.as_ref(),
        ws.config.poison.target_class,
    )?;
    let json = serde_json::to_string_pretty(&metrics)?;
    fs::write(ws.output_dir.join("evaluate.json"), &json)?;
    ws.manifest.record("evaluate", "evaluate.json");
    ws.finish()?;
    println!("{json}");
    Ok(())
}

pub fn cmd_report(output_dir: &Path) -> anyhow::Result<()> {
    let manifest_path = RunManifest::path(output_dir);
    if !manifest_path.exists() {
        anyhow::bail!("no run manifest at {}", manifest_path.display());
    }
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    println!("run {}", output_dir.display());
    println!("  config hash : {}", manifest.config_hash);
    println!("  code version: {}", manifest.code_version);
    println!("  artifacts   :");
    for (name, rel) in &manifest.artifacts {
        println!("    {name:<20} {}", rel.display());
    }
    for metrics_name in ["attack_metrics", "evaluate"] {
        if let Some(rel) = manifest.artifact(metrics_name) {
            let text = fs::read_to_string(output_dir.join(rel))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            if let (Some(ba), Some(asr)) = (v.get("ba"), v.get("asr")) {
                println!("  {metrics_name}: ba {ba} asr {asr}");
            }
        }
    }
    if let Some(rel) = manifest.artifact("defense_reports") {
        let text = fs::read_to_string(output_dir.join(rel))?;
        let reports: Vec<DefenseReport> = serde_json::from_str(&text)?;
        for r in reports {
            println!(
                "  defense {}: ba {:.2}->{:.2} asr {:.2}->{:.2}",
                r.defense_id, r.ba_before, r.ba_after, r.asr_before, r.asr_after
            );
        }
    }
    Ok(())
}

/// Shared by tests: full analysis metrics of a snapshot without a run dir.
pub fn quick_metrics(
    model: &Model,
    test: &LabeledDataset,
    trigger: &Trigger,
    target: u32,
) -> anyhow::Result<analysis::AttackMetrics> {
    Ok(evaluate(model, test, trigger, None, target)?)
}
