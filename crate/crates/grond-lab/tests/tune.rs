//! Scratch tuning harness (not part of the suite; run with --ignored).

use grond_core::build_model;
use grond_core::train::TrainConfig;
use grond_lab::abi::{compute_uclc, run_grond, AbiConfig};
use grond_lab::analysis::{compute_tac, evaluate};
use grond_lab::data::{make_synthetic, LabelMode, PoisonPlan, SplitTag};
use grond_lab::defenses::{clp_defense, neuron_noise, tac_prune_sweep, vanilla_finetune, EvalContext};
use grond_lab::triggers::{generate_upgd, make_noise_trigger, make_patch_trigger, UpgdConfig};

#[test]
#[ignore]
fn full_pipeline() {
    let t0 = std::time::Instant::now();
    let classes = 8usize;
    let side = 12usize;
    let train_full = make_synthetic(classes, 250, side, 101).unwrap();
    let (val, train) = train_full.split_off(200, 7).unwrap();
    let test = make_synthetic(classes, 125, side, 202)
        .unwrap()
        .with_tag(SplitTag::Test);

    let tc = TrainConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs: 20,
        milestones: vec![14, 18],
        lr_gamma: 0.2,
        batch_size: 64,
        seed: 11,
        augment: false,
    };

    let sur0 = build_model("convnet", classes, 0.125, 31, [3, side, side]).unwrap();
    let (surrogate, _) =
        grond_core::train(&sur0, &train.images, &train.labels, &tc, &mut []).unwrap();
    println!(
        "surrogate acc {:.2} ({:?})",
        surrogate.accuracy(&test.images, &test.labels, 256).unwrap(),
        t0.elapsed()
    );

    let victim0 = build_model("resnet18", classes, 0.125, 41, [3, side, side]).unwrap();
    let (benign, _) =
        grond_core::train(&victim0, &train.images, &train.labels, &tc, &mut []).unwrap();
    println!(
        "benign resnet acc {:.2} ({:?})",
        benign.accuracy(&test.images, &test.labels, 256).unwrap(),
        t0.elapsed()
    );

    let shape = [3usize, side, side];
    let target = 2u32;
    let eps = 16.0 / 255.0;
    let ucfg = UpgdConfig {
        epsilon: eps,
        alpha: 2.0 / 255.0,
        target_class: target,
        seed: 5,
        batch_size: 128,
        surrogate_ref: "convnet".into(),
        ..UpgdConfig::default()
    }
    .epochs_of_batches(train.n(), 10);
    let (upgd, trace) = generate_upgd(&surrogate, &train, &ucfg).unwrap();
    let m = evaluate(&surrogate, &test, &upgd, None, target).unwrap();
    println!(
        "upgd: loss {:.2}->{:.2}, surrogate-asr {:.2} ({:?})",
        trace.losses.first().unwrap(),
        trace.losses.last().unwrap(),
        m.asr,
        t0.elapsed()
    );

    let patch = make_patch_trigger(shape, 3, None).unwrap();
    let dirty_plan = PoisonPlan {
        target_class: target,
        rate: 0.05,
        label_mode: LabelMode::Dirty,
        seed: 13,
    };
    let clean_plan = PoisonPlan {
        target_class: target,
        rate: 0.05,
        label_mode: LabelMode::Clean,
        seed: 13,
    };

    let badnets = run_grond(&victim0, &train, &val, &test, &patch, None, &dirty_plan, &tc, None)
        .unwrap();
    println!(
        "badnets: ba {:.2} asr {:.2} sel {} ({:?})",
        badnets.metrics.ba, badnets.metrics.asr, badnets.selected_epoch, t0.elapsed()
    );

    let grond = run_grond(
        &victim0,
        &train,
        &val,
        &test,
        &upgd,
        None,
        &clean_plan,
        &tc,
        Some(AbiConfig { u: 3.0, apply_every: 1 }),
    )
    .unwrap();
    println!(
        "grond(+abi): ba {:.2} asr {:.2} abi-rows {} ({:?})",
        grond.metrics.ba,
        grond.metrics.asr,
        grond.abi_rows.len(),
        t0.elapsed()
    );

    let noabi =
        run_grond(&victim0, &train, &val, &test, &upgd, None, &clean_plan, &tc, None).unwrap();
    println!(
        "grond(-abi): ba {:.2} asr {:.2} ({:?})",
        noabi.metrics.ba, noabi.metrics.asr, t0.elapsed()
    );

    let noise = make_noise_trigger(shape, eps, 5).unwrap();
    let noise_victim =
        run_grond(&victim0, &train, &val, &test, &noise, None, &clean_plan, &tc, None).unwrap();
    println!(
        "noise victim: ba {:.2} asr {:.2} ({:?})",
        noise_victim.metrics.ba, noise_victim.metrics.asr, t0.elapsed()
    );

    for (name, model, trig) in [
        ("badnets", &badnets.model, &patch),
        ("grond+abi", &grond.model, &upgd),
        ("grond-abi", &noabi.model, &upgd),
    ] {
        let ctx = EvalContext {
            test_set: &test,
            trigger: trig,
            surrogate: None,
            target_class: target,
        };
        let (_, rep) = clp_defense(model, 3.0, &ctx).unwrap();
        println!(
            "clp(u=3) {name}: ba {:.2}->{:.2} asr {:.2}->{:.2} pruned {}",
            rep.ba_before, rep.ba_after, rep.asr_before, rep.asr_after,
            rep.pruned_or_noised.len()
        );
    }

    for (name, model) in [
        ("benign", &benign),
        ("badnets", &badnets.model),
        ("grond+abi", &grond.model),
        ("grond-abi", &noabi.model),
    ] {
        let t = compute_uclc(model).unwrap();
        println!("uclc outliers(u=3) {name}: {}", t.flagged(3.0).len());
    }

    // TAC at the final stage + prune sweep.
    let subset_idx = test.sample_indices(128, 99);
    let subset = test.subset(&subset_idx, SplitTag::Test).unwrap();
    for (name, model, trig) in [
        ("benign(patch)", &benign, &patch),
        ("badnets(patch)", &badnets.model, &patch),
        ("grond+abi(upgd)", &grond.model, &upgd),
    ] {
        let t = compute_tac(model, &subset, trig, None, "stage4").unwrap();
        let layer = t.layer("stage4").unwrap();
        println!(
            "tac {name}: max {:.3} mean {:.3} outliers {}",
            t.max_score(),
            layer.mean,
            t.flagged(3.0).len()
        );
    }

    // TAC prune sweeps for badnets and grond.
    for (name, model, trig) in [
        ("badnets", &badnets.model, &patch),
        ("grond+abi", &grond.model, &upgd),
    ] {
        let ctx = EvalContext {
            test_set: &test,
            trigger: trig,
            surrogate: None,
            target_class: target,
        };
        let tac = compute_tac(model, &subset, trig, None, "stage4").unwrap();
        let max = tac.max_score();
        let thresholds: Vec<f32> = (0..12).map(|i| max * (i as f32) / 12.0).collect();
        let sweep =
            tac_prune_sweep(model, trig, None, &subset, &thresholds, "stage4", &ctx).unwrap();
        let line: Vec<String> = sweep
            .iter()
            .map(|(t, r)| format!("{t:.2}:ba{:.0}/asr{:.0}", r.ba_after, r.asr_after))
            .collect();
        println!("tac sweep {name}: {}", line.join(" "));
    }

    // Neuron noise at 0.3 on grond and benign.
    let ctx = EvalContext {
        test_set: &test,
        trigger: &upgd,
        surrogate: None,
        target_class: target,
    };
    let (_, rep) = neuron_noise(&grond.model, 0.3, 3, &ctx).unwrap();
    println!(
        "noise(0.3) grond: ba {:.2}->{:.2} asr {:.2}->{:.2}",
        rep.ba_before, rep.ba_after, rep.asr_before, rep.asr_after
    );
    let (_, rep) = neuron_noise(&benign, 0.3, 3, &ctx).unwrap();
    println!("noise(0.3) benign: ba {:.2}->{:.2}", rep.ba_before, rep.ba_after);

    // Vanilla FT on badnets (1% subset).
    let ft_idx = train.sample_indices(train.n() / 100, 55);
    let ft_subset = train.subset(&ft_idx, SplitTag::Train).unwrap();
    let ctxb = EvalContext {
        test_set: &test,
        trigger: &patch,
        surrogate: None,
        target_class: target,
    };
    let (_, rep) = vanilla_finetune(&badnets.model, &ft_subset, 20, 0.01, &ctxb).unwrap();
    println!(
        "ft badnets: ba {:.2}->{:.2} asr {:.2}->{:.2}",
        rep.ba_before, rep.ba_after, rep.asr_before, rep.asr_after
    );
    println!("total {:?}", t0.elapsed());
}
