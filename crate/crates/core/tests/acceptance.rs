//! Acceptance suite. Each test prints one pass/fail line for its criterion;
//! the heavyweight desk-scale training run is shared between the retrieval
//! and customization criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use m2mclip::autodiff::{finite_difference_check, ParamSet, Tape};
use m2mclip::data::{
    self, generate_dataset, ViewTag, Vocabulary,
};
use m2mclip::encoders::{count_parameters, Model, ModelConfig, Variant};
use m2mclip::error::Result;
use m2mclip::eval::{
    self, customize_branches, retrieval_recall, top_patch_mask, zero_shot_classify, FusionKind,
    FusionStrategy,
};
use m2mclip::losses::{self, LogitScale, LossKind, Reduction};
use m2mclip::matching::{plan_identity, MatchingPlan, PlanMode};
use m2mclip::tensor::{dot, Tensor};
use m2mclip::training::{
    load_dataset, save_checkpoint, train, LoadedDataset, TrainConfig, TrainOutcome,
};

fn report(criterion: &str, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness of every loss through every encoder.
// ---------------------------------------------------------------------------

fn tiny_config(variant: Variant, branches: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        width: 16,
        depth: 2,
        heads: 2,
        embed_dim: 8,
        branch_count: branches,
        variant,
        vocab_size: 8,
        max_text_tokens: 4,
        ffn_dim: 32,
        mlp_expanded_blocks: 2,
        ..ModelConfig::default()
    }
}

fn tiny_image(cfg: &ModelConfig, salt: f64) -> Tensor {
    let s = cfg.image_size;
    let data = (0..3 * s * s)
        .map(|i| ((i as f64 * 0.61 + salt).sin() * 0.5 + 0.5) * 0.9)
        .collect();
    Tensor::new(vec![3, s, s], data).unwrap()
}

/// Full pipeline loss on one tape: K images and K*M texts through the
/// encoders, stacked per branch/slot, scored with the learnable temperature.
fn pipeline_loss(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &[Tensor],
    texts: &[Vec<Vec<usize>>],
    loss_kind: LossKind,
    plan: &MatchingPlan,
    record: Option<&mut ParamSet>,
) -> Result<f64> {
    let model = Model {
        config: cfg.clone(),
        params: params.clone(),
    };
    let mut tape = Tape::new();
    let k = images.len();
    let slots = texts[0].len();
    let mut img_nodes = Vec::with_capacity(k);
    for img in images {
        img_nodes.push(model.encode_image_tape(&mut tape, img)?.embeddings);
    }
    let mut branch_mats = Vec::with_capacity(cfg.branch_count);
    for b in 0..cfg.branch_count {
        let mut rows = Vec::with_capacity(k);
        for &n in &img_nodes {
            rows.push(tape.slice_rows(n, b, 1)?);
        }
        branch_mats.push(tape.concat_rows(&rows)?);
    }
    let mut slot_mats = Vec::with_capacity(slots);
    for m in 0..slots {
        let mut rows = Vec::with_capacity(k);
        for sample in texts {
            rows.push(model.encode_text_tape(&mut tape, &sample[m])?);
        }
        slot_mats.push(tape.concat_rows(&rows)?);
    }
    let temp = tape.param(&model.params, model.params.lookup("temp.log_scale").unwrap());
    let scale = LogitScale::Node(tape.exp(temp));
    let loss_node = match loss_kind {
        LossKind::O2O => {
            losses::o2o_tape(&mut tape, branch_mats[0], slot_mats[0], scale, Reduction::MeanOverPairs)?
        }
        LossKind::O2M => {
            losses::o2m_tape(&mut tape, branch_mats[0], &slot_mats, scale, Reduction::MeanOverPairs)?
        }
        LossKind::M2M => losses::m2m_tape(
            &mut tape,
            &branch_mats,
            &slot_mats,
            plan,
            scale,
            Reduction::MeanOverPairs,
        )?,
    };
    if let Some(target) = record {
        let grads = tape.backward(loss_node)?;
        grads.accumulate_into(&tape, target);
    }
    Ok(tape.scalar_value(loss_node))
}

#[test]
fn criterion_01_gradient_correctness() {
    use rayon::prelude::*;
    let started = std::time::Instant::now();
    let k = 3;
    let slots = 2;
    let mut combos = Vec::new();
    for (variant, branches) in [(Variant::Vanilla, 1), (Variant::Cls, 2), (Variant::Mlp, 2)] {
        for loss_kind in [LossKind::O2O, LossKind::O2M, LossKind::M2M] {
            combos.push((variant, branches, loss_kind));
        }
    }
    // Each combo probes its own parameter clone; they are independent.
    let results: Vec<(String, f64)> = combos
        .par_iter()
        .map(|&(variant, branches, loss_kind)| {
            let cfg = tiny_config(variant, branches);
            let images: Vec<Tensor> = (0..k).map(|i| tiny_image(&cfg, i as f64)).collect();
            let texts: Vec<Vec<Vec<usize>>> = (0..k)
                .map(|i| {
                    (0..slots)
                        .map(|m| vec![(i + m) % 8, (i * 3 + m * 5) % 8, 1])
                        .collect()
                })
                .collect();
            // With one branch the multi-to-multi plan routes both slots to
            // branch 0; with two it is the identity.
            let plan = if branches == slots {
                plan_identity(slots, branches).unwrap()
            } else {
                MatchingPlan {
                    assignment: vec![0; slots],
                    mode: PlanMode::Free,
                }
            };
            let model = Model::new(cfg.clone(), 21).unwrap();
            let mut params = model.params.clone();
            params.zero_grads();
            let mut recorded = params.clone();
            pipeline_loss(&cfg, &params, &images, &texts, loss_kind, &plan, Some(&mut recorded))
                .unwrap();
            for i in 0..params.len() {
                params.get_mut(i).grad = recorded.get(i).grad.clone();
            }
            let err = finite_difference_check(
                |p| pipeline_loss(&cfg, p, &images, &texts, loss_kind, &plan, None),
                &mut params,
                1e-4,
            )
            .unwrap();
            (format!("{variant} H={branches} {loss_kind}"), err)
        })
        .collect();

    let mut worst_overall: f64 = 0.0;
    for (combo, err) in &results {
        println!("  {combo}: max rel err {err:.3e}");
        assert!(*err < 1e-4, "{combo}: gradient error {err} exceeds 1e-4");
        worst_overall = worst_overall.max(*err);
    }
    let elapsed = started.elapsed();
    report(
        "1 (gradient correctness)",
        worst_overall < 1e-4 && elapsed.as_secs() < 120,
        &format!("worst rel err {worst_overall:.3e} over 9 combos in {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: reduction identities.
// ---------------------------------------------------------------------------

fn unit_rows_seeded(seed: u64, k: usize, d: usize) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn mat(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn cube(rows: &[Vec<Vec<f64>>]) -> Tensor {
    let (k, m, d) = (rows.len(), rows[0].len(), rows[0][0].len());
    let data = rows.iter().flat_map(|r| r.concat()).collect();
    Tensor::new(vec![k, m, d], data).unwrap()
}

#[test]
fn criterion_02_reduction_identities() {
    let tau = 0.3;
    let k = 4;
    let v = unit_rows_seeded(31, k, 6);
    let t = unit_rows_seeded(32, k, 6);

    let mut worst: f64 = 0.0;
    for reduction in [Reduction::Sum, Reduction::MeanOverPairs] {
        let o2o = losses::loss_o2o(&mat(&v), &mat(&t), tau, reduction).unwrap();

        let tcube: Vec<Vec<Vec<f64>>> = t.iter().map(|r| vec![r.clone()]).collect();
        let o2m = losses::loss_o2m(&mat(&v), &cube(&tcube), tau, reduction).unwrap();
        worst = worst.max((o2m - o2o).abs());

        let vcube: Vec<Vec<Vec<f64>>> = v.iter().map(|r| vec![r.clone()]).collect();
        let plan = plan_identity(1, 1).unwrap();
        let m2m = losses::loss_m2m(&cube(&vcube), &cube(&tcube), &plan, tau, reduction).unwrap();
        worst = worst.max((m2m - o2o).abs());
    }
    let identities_ok = worst <= 1e-12;

    // Two disjoint problems stacked as branches sum under Sum reduction.
    let va = unit_rows_seeded(33, k, 6);
    let ta = unit_rows_seeded(34, k, 6);
    let vb = unit_rows_seeded(35, k, 6);
    let tb = unit_rows_seeded(36, k, 6);
    let vstack: Vec<Vec<Vec<f64>>> = (0..k).map(|i| vec![va[i].clone(), vb[i].clone()]).collect();
    let tstack: Vec<Vec<Vec<f64>>> = (0..k).map(|i| vec![ta[i].clone(), tb[i].clone()]).collect();
    let plan2 = plan_identity(2, 2).unwrap();
    let stacked =
        losses::loss_m2m(&cube(&vstack), &cube(&tstack), &plan2, tau, Reduction::Sum).unwrap();
    let parts = losses::loss_o2o(&mat(&va), &mat(&ta), tau, Reduction::Sum).unwrap()
        + losses::loss_o2o(&mat(&vb), &mat(&tb), tau, Reduction::Sum).unwrap();
    let stack_err = (stacked - parts).abs();

    report(
        "2 (reduction identities)",
        identities_ok && stack_err <= 1e-10,
        &format!("single-slot gap {worst:.2e}, stacked-sum gap {stack_err:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: chance level.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_chance_level() {
    // Uniform logits: positives equidistant from every anchor.
    let mut worst: f64 = 0.0;
    for k in 2..=5 {
        let mut anchors = vec![vec![0.0; k]; k];
        for (i, a) in anchors.iter_mut().enumerate() {
            a[i] = 1.0;
        }
        let p = vec![vec![1.0 / (k as f64).sqrt(); k]; k];
        let got = losses::infonce_direction(&mat(&anchors), &mat(&p), 0.7, Reduction::Sum).unwrap();
        worst = worst.max((got - k as f64 * (k as f64).ln()).abs());
        let per_pair =
            losses::infonce_direction(&mat(&anchors), &mat(&p), 0.7, Reduction::MeanOverPairs)
                .unwrap();
        worst = worst.max((per_pair - (k as f64).ln()).abs());

        // The three losses hit chance level too: pairs * ln K under Sum.
        let chance = (k as f64).ln();
        let o2o = losses::loss_o2o(&mat(&anchors), &mat(&p), 0.7, Reduction::Sum).unwrap();
        worst = worst.max((o2o - k as f64 * chance).abs());
        let slots = 2;
        let tcube: Vec<Vec<Vec<f64>>> = (0..k).map(|i| vec![p[i].clone(); slots]).collect();
        let o2m = losses::loss_o2m(&mat(&anchors), &cube(&tcube), 0.7, Reduction::Sum).unwrap();
        worst = worst.max((o2m - (k * slots) as f64 * chance).abs());
        let vcube: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|i| vec![anchors[i].clone(); slots])
            .collect();
        let plan = plan_identity(slots, slots).unwrap();
        let m2m =
            losses::loss_m2m(&cube(&vcube), &cube(&tcube), &plan, 0.7, Reduction::Sum).unwrap();
        worst = worst.max((m2m - (k * slots) as f64 * chance).abs());
    }
    let uniform_ok = worst <= 1e-12;

    // A freshly initialized model's first training step sits near ln K.
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(
        64,
        &[ViewTag::MainObject, ViewTag::Background],
        909,
        32,
        dir.path(),
    )
    .unwrap();
    let model_cfg = ModelConfig {
        image_size: 32,
        patch_size: 8,
        width: 32,
        depth: 2,
        heads: 2,
        embed_dim: 32,
        branch_count: 2,
        variant: Variant::Cls,
        vocab_size: Vocabulary::builtin().len(),
        ffn_dim: 64,
        mlp_expanded_blocks: 2,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        batch_size: 16,
        max_steps: Some(1),
        manifest: manifest.display().to_string(),
        loss_kind: LossKind::M2M,
        plan_mode: PlanMode::Identity,
        seed: 5,
        ..TrainConfig::default()
    };
    let outcome = train(&model_cfg, &train_cfg, None).unwrap();
    let first_loss = outcome.metrics[0].loss;
    let chance = (16.0f64).ln();
    let ratio = first_loss / chance;
    let fresh_ok = (0.8..=1.2).contains(&ratio);

    report(
        "3 (chance level)",
        uniform_ok && fresh_ok,
        &format!(
            "uniform-logit gap {worst:.2e}; first-step loss {first_loss:.4} vs ln K {chance:.4} (ratio {ratio:.3})"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: average-fusion linearity identity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_fusion_identity() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
    let h = 4;
    let d = 64;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let img_rows = unit_rows_seeded(rng.gen(), h, d);
        let text = unit_rows_seeded(rng.gen(), 1, d);
        let img = mat(&img_rows);
        let txt = mat(&text);
        let fused = eval::fuse_scores(&img, &txt, &FusionStrategy::new(FusionKind::Average), None)
            .unwrap()[0];
        let per_branch: f64 =
            (0..h).map(|b| dot(img.row(b), txt.row(0))).sum::<f64>() / h as f64;
        worst = worst.max((fused - per_branch).abs());
    }
    report(
        "4 (fusion identity)",
        worst <= 1e-13,
        &format!("worst |first-average - score-average| = {worst:.2e} over 1000 instances"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: parameter overhead.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_parameter_overhead() {
    let mut ok = true;
    let mut detail = String::new();
    for (variant, h) in [
        (Variant::Vanilla, 1),
        (Variant::Cls, 2),
        (Variant::Cls, 4),
        (Variant::Cls, 5),
        (Variant::Mlp, 2),
        (Variant::Mlp, 4),
    ] {
        let cfg = ModelConfig {
            variant,
            branch_count: h,
            vocab_size: Vocabulary::builtin().len(),
            ..ModelConfig::default()
        };
        let counted = count_parameters(&cfg).unwrap();
        let enumerated = Model::new(cfg.clone(), 0).unwrap().params.total_elements();
        ok &= counted.total == enumerated;
        match variant {
            Variant::Cls => {
                ok &= counted.branch_overhead == (h - 1) * cfg.width;
                ok &= counted.overhead_fraction < 0.001;
            }
            Variant::Mlp => {
                ok &= counted.branch_overhead
                    == (h - 1) * cfg.mlp_expanded_blocks * (cfg.ffn_dim * cfg.width + cfg.width);
                detail.push_str(&format!(
                    "mlp H={h} overhead fraction {:.4}; ",
                    counted.overhead_fraction
                ));
            }
            Variant::Vanilla => ok &= counted.branch_overhead == 0,
        }
    }
    report(
        "5 (parameter overhead)",
        ok,
        &format!("closed form equals enumeration on all configs; {detail}"),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6 and 7 share one desk-scale training run.
// ---------------------------------------------------------------------------

const DESK_TRAIN_SCENES: usize = 2000;
const DESK_TEST_SCENES: usize = 500;
const DESK_EPOCHS: usize = 5;
const DESK_SEED: u64 = 42;

/// The four trained views, style excluded; background sits in slot 3.
const DESK_VIEWS: [ViewTag; 4] = [
    ViewTag::Details,
    ViewTag::Nouns,
    ViewTag::MainObject,
    ViewTag::Background,
];
const BG_SLOT: usize = 3;
const BG_BRANCH: usize = 3;

struct TrainedEval {
    model: Model,
    enc: eval::EncodedEval,
}

struct DeskRun {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    test_data: LoadedDataset,
    o2m: TrainedEval,
    m2m: TrainedEval,
}

fn desk_model_config(variant: Variant, branches: usize) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 4, // 8x8 patch grid
        width: 64,
        depth: 4,
        heads: 4,
        embed_dim: 64,
        branch_count: branches,
        variant,
        vocab_size: Vocabulary::builtin().len(),
        ffn_dim: 256,
        mlp_expanded_blocks: 3,
        ..ModelConfig::default()
    }
}

fn desk_run() -> &'static DeskRun {
    static DESK: OnceLock<DeskRun> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train_manifest = generate_dataset(
            DESK_TRAIN_SCENES,
            &DESK_VIEWS,
            DESK_SEED,
            32,
            &dir.path().join("train"),
        )
        .unwrap();
        let test_manifest = generate_dataset(
            DESK_TEST_SCENES,
            &DESK_VIEWS,
            DESK_SEED + 1,
            32,
            &dir.path().join("test"),
        )
        .unwrap();
        let test_data = load_dataset(&test_manifest).unwrap();

        let base_train = TrainConfig {
            batch_size: 32,
            epochs: DESK_EPOCHS,
            seed: 7,
            reduction: Reduction::MeanOverPairs,
            manifest: train_manifest.display().to_string(),
            ..TrainConfig::default()
        };

        let run = |variant: Variant, branches: usize, loss: LossKind, plan: PlanMode| {
            let model_cfg = desk_model_config(variant, branches);
            let train_cfg = TrainConfig {
                loss_kind: loss,
                plan_mode: plan,
                ..base_train.clone()
            };
            let started = std::time::Instant::now();
            let TrainOutcome { checkpoint, metrics } = train(&model_cfg, &train_cfg, None).unwrap();
            let (model, _) = checkpoint.restore().unwrap();
            eprintln!(
                "  desk {loss} ({variant}): {} steps in {:.1?}, loss {:.4} -> {:.4}",
                metrics.len(),
                started.elapsed(),
                metrics.first().unwrap().loss,
                metrics.last().unwrap().loss,
            );
            let enc = eval::encode_dataset(&model, &test_data, 1).unwrap();
            TrainedEval { model, enc }
        };

        let o2m = run(Variant::Vanilla, 1, LossKind::O2M, PlanMode::Identity);
        let m2m = run(Variant::Cls, 4, LossKind::M2M, PlanMode::Identity);
        DeskRun {
            dir,
            test_data,
            o2m,
            m2m,
        }
    })
}

/// Background-view text-to-image retrieval against a gallery holding one
/// image per background class; exact-match galleries cap background recall
/// near chance because many images share a background.
fn background_t2i_r1(run: &DeskRun, te: &TrainedEval) -> f64 {
    let mut gallery_idx: Vec<usize> = Vec::new();
    let mut by_background: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, s) in run.test_data.samples.iter().enumerate() {
        let bg = s.scene.as_ref().unwrap().background_id;
        if let std::collections::btree_map::Entry::Vacant(e) = by_background.entry(bg) {
            e.insert(gallery_idx.len());
            gallery_idx.push(i);
        }
    }
    let gallery: Vec<Tensor> = gallery_idx.iter().map(|&i| te.enc.image_sets[i].clone()).collect();
    let queries: Vec<Tensor> = run
        .test_data
        .samples
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let t = &te.enc.texts[i][BG_SLOT];
            t.reshape(vec![1, t.len()]).unwrap()
        })
        .collect();
    let gt: Vec<usize> = run
        .test_data
        .samples
        .iter()
        .map(|s| by_background[&s.scene.as_ref().unwrap().background_id])
        .collect();
    let r = retrieval_recall(
        &queries,
        &gallery,
        &gt,
        &[1],
        &FusionStrategy::new(FusionKind::Average),
    )
    .unwrap();
    r[&1]
}

/// Mean exact-match R@1 across the four trained views, both directions.
fn overall_r1(te: &TrainedEval) -> (f64, f64) {
    let strategy = FusionStrategy::new(FusionKind::Average);
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for slot in 0..DESK_VIEWS.len() {
        let rep = eval::per_view_retrieval(&te.enc, slot, &strategy).unwrap();
        i2t += rep.i2t.r1;
        t2i += rep.t2i.r1;
    }
    (i2t / DESK_VIEWS.len() as f64, t2i / DESK_VIEWS.len() as f64)
}

#[test]
fn criterion_06_directional_retrieval() {
    let started = std::time::Instant::now();
    let run = desk_run();

    let o2m_bg = background_t2i_r1(run, &run.o2m);
    let m2m_bg = background_t2i_r1(run, &run.m2m);
    let (o2m_i2t, o2m_t2i) = overall_r1(&run.o2m);
    let (m2m_i2t, m2m_t2i) = overall_r1(&run.m2m);

    let bg_ok = m2m_bg >= o2m_bg + 10.0;
    let overall_ok = m2m_i2t >= o2m_i2t - 1.0 && m2m_t2i >= o2m_t2i - 1.0;
    let elapsed = started.elapsed();
    report(
        "6 (directional retrieval)",
        bg_ok && overall_ok && elapsed.as_secs() < 1800,
        &format!(
            "background T2I R@1 m2m {m2m_bg:.1} vs o2m {o2m_bg:.1} (needs +10); overall R@1 i2t {m2m_i2t:.1}/{o2m_i2t:.1}, t2i {m2m_t2i:.1}/{o2m_t2i:.1} (needs -1); {elapsed:.0?}"
        ),
    );
}

#[test]
fn criterion_07_customization_direction() {
    let run = desk_run();
    let te = &run.m2m;
    let labels: Vec<usize> = run
        .test_data
        .samples
        .iter()
        .map(|s| s.scene.as_ref().unwrap().object_id)
        .collect();
    let class_rows: Vec<Tensor> = (0..data::OBJECT_COUNT)
        .map(|o| {
            let tokens = Vocabulary::builtin().tokenize(&data::object_class_text(o));
            te.model.encode_text(&tokens).unwrap()
        })
        .collect();
    let class_texts = Tensor::stack_rows(&class_rows).unwrap();

    let all = FusionStrategy::new(FusionKind::Average);
    let without_background =
        FusionStrategy::with_subset(FusionKind::Average, (0..BG_BRANCH).collect());
    let (top1_all, _) =
        zero_shot_classify(&te.enc.image_sets, &labels, &class_texts, &all).unwrap();
    let (top1_subset, _) =
        zero_shot_classify(&te.enc.image_sets, &labels, &class_texts, &without_background).unwrap();

    // Excluding the background-matched branch must actually move the
    // customized embedding's class scores.
    let probe = &te.enc.image_sets[0];
    let full = customize_branches(probe, &(0..4).collect::<Vec<_>>()).unwrap();
    let partial = customize_branches(probe, &(0..BG_BRANCH).collect::<Vec<_>>()).unwrap();
    let vectors_differ = (0..class_texts.rows()).any(|c| {
        (dot(full.data(), class_texts.row(c)) - dot(partial.data(), class_texts.row(c))).abs()
            > 1e-12
    });

    report(
        "7 (customization direction)",
        top1_subset >= top1_all && vectors_differ,
        &format!(
            "object top-1 without background branch {top1_subset:.1} vs all branches {top1_all:.1}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: diversity direction.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_diversity_direction() {
    let dir = tempfile::tempdir().unwrap();
    let seed = 808;
    let five = generate_dataset(
        100,
        &ViewTag::ALL_CAPTIONED,
        seed,
        32,
        &dir.path().join("five"),
    )
    .unwrap();
    // The details/nouns pair draws on the same object and background nouns,
    // the near-duplicate control over the same scenes.
    let two = generate_dataset(
        100,
        &[ViewTag::Details, ViewTag::Nouns],
        seed,
        32,
        &dir.path().join("two"),
    )
    .unwrap();
    let five_stats = data::diversity_report(&data::ingest_jsonl(&five).unwrap()).unwrap();
    let two_stats = data::diversity_report(&data::ingest_jsonl(&two).unwrap()).unwrap();
    report(
        "8 (diversity direction)",
        five_stats.mean_pairwise_similarity < two_stats.mean_pairwise_similarity,
        &format!(
            "five-view mean similarity {:.4} < two-near-duplicate-view {:.4}",
            five_stats.mean_pairwise_similarity, two_stats.mean_pairwise_similarity
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: filtering rules.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_filtering_rules() {
    use m2mclip::data::{filter_captions, MultiTextSample};
    let vocab = Vocabulary::builtin();
    let make = |texts: Vec<(ViewTag, String)>| {
        let tokens = texts.iter().map(|(_, t)| vocab.tokenize(t)).collect();
        MultiTextSample {
            id: 0,
            image_rel: "img.ppm".into(),
            image_path: "img.ppm".into(),
            texts,
            tokens,
            scene: None,
        }
    };
    // Boundary: exactly 10 characters rejected, 11 kept.
    let sample = make(vec![
        (ViewTag::Details, "abcdefghij".into()),
        (ViewTag::Nouns, "abcdefghijk".into()),
    ]);
    let out = filter_captions(vec![sample], 10, None, None).unwrap();
    let boundary_ok = out.kept.len() == 1
        && out.kept[0].texts.len() == 1
        && out.kept[0].texts[0].0 == ViewTag::Nouns
        && out.rejected.len() == 1;

    // 78-token text raises the length error with its manifest line.
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(1, &[ViewTag::Details], 9, 32, dir.path()).unwrap();
    let long_text = vec!["disc"; 77].join(" ");
    let mut contents = std::fs::read_to_string(&manifest).unwrap();
    contents.push_str(&format!(
        "{{\"id\":1,\"image\":\"images/img_00000.ppm\",\"texts\":[{{\"view\":\"details\",\"text\":\"{long_text}\"}}],\"scene\":null}}\n"
    ));
    std::fs::write(&manifest, contents).unwrap();
    let too_long_ok = matches!(
        data::ingest_jsonl(&manifest),
        Err(m2mclip::Error::TextTooLong { line: 2, len: 78, .. })
    );

    report(
        "9 (filtering rules)",
        boundary_ok && too_long_ok,
        "10-char text rejected, 11-char kept, 78-token text raises the length error",
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: attention-mask cardinality and tie-breaks.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_attention_mask() {
    // Cardinality is ceil(0.2 P) for the three stated patch counts.
    let mut ok = true;
    for (p, expect) in [(16usize, 4usize), (64, 13), (196, 40)] {
        ok &= top_patch_mask(&vec![0.5; p], 0.2).len() == expect;
    }
    // Deterministic tie-break on uniform scores: lowest indices win.
    ok &= top_patch_mask(&vec![1.0; 64], 0.2) == (0..13).collect::<Vec<_>>();

    // End to end through a model for each grid size.
    let dir = tempfile::tempdir().unwrap();
    for (image_size, patch_size, p) in [(16usize, 4usize, 16usize), (32, 4, 64), (56, 4, 196)] {
        let cfg = ModelConfig {
            image_size,
            patch_size,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 8,
            branch_count: 2,
            variant: Variant::Cls,
            vocab_size: 8,
            max_text_tokens: 4,
            ffn_dim: 32,
            mlp_expanded_blocks: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), 3).unwrap();
        let image = tiny_image(&cfg, 0.5);
        let csv = dir.path().join(format!("att_{p}.csv"));
        let pgm = dir.path().join(format!("att_{p}.pgm"));
        let mask = eval::attention_mask(&model, &image, 1, &csv, &pgm).unwrap();
        ok &= mask.selected.len() == (0.2 * p as f64).ceil() as usize;
        ok &= mask.scores.len() == p;
        ok &= csv.is_file() && pgm.is_file();
    }
    report(
        "10 (attention mask)",
        ok,
        "cardinality ceil(0.2 P) for P in {16, 64, 196}; uniform ties pick the first indices",
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: end-to-end determinism.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_determinism() {
    // Full pipeline twice in fresh directories; the sample-ordered reduction
    // makes results thread-count invariant, and this run uses the default
    // single-thread mode.
    let run_once = |dir: &Path| -> (Vec<u8>, Vec<u8>, String) {
        let manifest = generate_dataset(
            64,
            &[ViewTag::MainObject, ViewTag::Background],
            77,
            32,
            &dir.join("data"),
        )
        .unwrap();
        let model_cfg = ModelConfig {
            image_size: 32,
            patch_size: 8,
            width: 32,
            depth: 2,
            heads: 2,
            embed_dim: 32,
            branch_count: 2,
            variant: Variant::Cls,
            vocab_size: Vocabulary::builtin().len(),
            ffn_dim: 64,
            mlp_expanded_blocks: 2,
            ..ModelConfig::default()
        };
        let train_cfg = TrainConfig {
            batch_size: 8,
            epochs: 25, // 8 steps per epoch over 64 samples: exactly 200 steps
            seed: 13,
            manifest: manifest.display().to_string(),
            loss_kind: LossKind::M2M,
            plan_mode: PlanMode::Identity,
            ..TrainConfig::default()
        };
        let outcome = train(&model_cfg, &train_cfg, None).unwrap();
        let ckpt_path = dir.join("checkpoint.bin");
        save_checkpoint(&outcome.checkpoint, &ckpt_path).unwrap();

        let (model, _) = outcome.checkpoint.restore().unwrap();
        let data = load_dataset(&manifest).unwrap();
        let enc = eval::encode_dataset(&model, &data, 1).unwrap();
        let mut reports = BTreeMap::new();
        for slot in 0..2 {
            reports.insert(
                enc.views[slot].name().to_string(),
                eval::per_view_retrieval(&enc, slot, &FusionStrategy::new(FusionKind::Average))
                    .unwrap(),
            );
        }
        (
            std::fs::read(&manifest).unwrap(),
            std::fs::read(&ckpt_path).unwrap(),
            serde_json::to_string_pretty(&reports).unwrap(),
        )
    };

    let dir = tempfile::tempdir().unwrap();
    let a = run_once(&dir.path().join("a"));
    let b = run_once(&dir.path().join("b"));
    report(
        "11 (determinism)",
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2,
        &format!(
            "manifest {} B, checkpoint {} B, and metric JSON identical across runs",
            a.0.len(),
            a.1.len()
        ),
    );
}
