use stn_ocr::data::{generate_scenes, load_dataset, make_dataset, split_dir, Placement, SceneSpec};
use stn_ocr::eval::evaluate;
use stn_ocr::model::ModelConfig;
use stn_ocr::optim::OptimizerConfig;
use stn_ocr::train::{run_curriculum, InitPolicy, StageConfig, TrainConfig, TrainOptions};

fn small_model() -> ModelConfig {
    ModelConfig {
        timesteps: 2,
        localization_filters: [4, 8, 8],
        recognition_filters: [4, 8, 8],
        blstm_hidden: 8,
        region_size: [16, 16],
        input_size: [32, 32],
        ..ModelConfig::default()
    }
}

fn stage(name: &str, n: usize, placement: Placement, optimizer: OptimizerConfig, init: InitPolicy) -> StageConfig {
    StageConfig {
        name: name.into(),
        scene: SceneSpec { canvas: [32, 32], n_regions: n, placement, digits: [1, 1], scale: [1, 1], jitter: 2, ..SceneSpec::default() },
        optimizer,
        epochs: 2,
        init,
        train_size: 32,
        eval_size: 16,
        ..StageConfig::default()
    }
}

fn quiet(cfg: &TrainConfig) -> stn_ocr::train::CurriculumResult {
    run_curriculum(cfg, &TrainOptions { deterministic: true, ..TrainOptions::default() }, &mut |_| {}).unwrap()
}

#[test]
fn published_sgd_rate_stays_finite_across_seeds() {
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            batch_size: 8,
            model: small_model(),
            stages: vec![stage("s0", 1, Placement::Centered, OptimizerConfig::sgd(1e-5, 0.9), InitPolicy::Fresh)],
        };
        let run = quiet(&cfg);
        for m in &run.stages[0].epochs {
            assert!(m.loss.is_finite() && m.eval_loss.is_finite(), "seed {seed}: {m:?}");
        }
    }
}

#[test]
fn carrying_weights_starts_from_a_lower_loss() {
    let warm = stage("s0", 1, Placement::Centered, OptimizerConfig::adam(3e-3), InitPolicy::Fresh);
    let next = |init| stage("s1", 1, Placement::Centered, OptimizerConfig::adam(1e-3), init);
    let base = TrainConfig { seed: 3, batch_size: 8, model: small_model(), stages: vec![StageConfig { epochs: 6, ..warm }] };
    let with = |init| {
        let mut cfg = base.clone();
        cfg.stages.push(StageConfig { epochs: 1, ..next(init) });
        quiet(&cfg).stages[1].epochs[0].loss
    };
    let carried = with(InitPolicy::CarryAll);
    let fresh = quiet(&TrainConfig {
        stages: vec![StageConfig { epochs: 1, ..next(InitPolicy::Fresh) }],
        ..base.clone()
    })
    .stages[0]
        .epochs[0]
        .loss;
    assert!(carried < fresh, "carried {carried} fresh {fresh}");
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let cfg = TrainConfig {
        seed: 5,
        batch_size: 8,
        model: small_model(),
        stages: vec![stage("s0", 1, Placement::Centered, OptimizerConfig::adam(1e-3), InitPolicy::Fresh)],
    };
    let model = quiet(&cfg).checkpoint.model;
    let before = model.clone();
    let scenes = generate_scenes(&cfg.stages[0].scene, 1000, 12).unwrap();
    let a = evaluate(&model, &scenes, 5).unwrap();
    let b = evaluate(&model, &scenes, 12).unwrap();
    assert_eq!(model, before);
    assert_eq!(a.texts, b.texts);
    assert!((a.seq_acc - b.seq_acc).abs() < 1e-12);
}

#[test]
fn training_from_a_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = stage("s0", 2, Placement::Grid, OptimizerConfig::adam(1e-3), InitPolicy::Fresh);
    let sizes = make_dataset(&s.scene, 20, [0.6, 0.2, 0.2], dir.path()).unwrap();
    assert_eq!(sizes, [12, 4, 4]);
    let test = load_dataset(&split_dir(dir.path(), "test"), None, Some([32, 32])).unwrap();
    let expected = generate_scenes(&s.scene, 16, 4).unwrap();
    for (got, want) in test.iter().zip(&expected) {
        assert_eq!(got.labels, want.labels);
        assert_eq!(got.boxes, want.boxes);
        assert!(got.image.max_abs_diff(&want.image) <= 0.5 / 255.0 + 1e-6);
    }

    s.data = Some(dir.path().to_path_buf());
    let cfg = TrainConfig { seed: 1, batch_size: 4, model: small_model(), stages: vec![s] };
    let run = quiet(&cfg);
    assert_eq!(run.checkpoint.progress.as_ref().unwrap().global_step, 2 * 3);
}

#[test]
fn curriculum_beats_scratch_on_the_grid() {
    let scene = |n, placement| SceneSpec { canvas: [32, 32], n_regions: n, placement, digits: [1, 1], scale: [1, 1], jitter: 1, noise: 0.1, ..SceneSpec::default() };
    let stage = |name: &str, n, placement, epochs, init| StageConfig {
        name: name.into(),
        scene: scene(n, placement),
        optimizer: OptimizerConfig::adam(3e-3),
        epochs,
        init,
        train_size: 256,
        eval_size: 16,
        ..StageConfig::default()
    };
    let run = |stages| {
        let cfg = TrainConfig { seed: 8, batch_size: 16, model: small_model(), stages };
        let model = quiet(&cfg).checkpoint.model;
        let held_out = generate_scenes(&scene(2, Placement::Grid), 1 << 41, 200).unwrap();
        evaluate(&model, &held_out, 50).unwrap().seq_acc
    };
    let curriculum = run(vec![
        stage("centered", 1, Placement::Centered, 12, InitPolicy::Fresh),
        stage("grid", 2, Placement::Grid, 12, InitPolicy::CarryAll),
    ]);
    let scratch = run(vec![stage("grid", 2, Placement::Grid, 24, InitPolicy::Fresh)]);
    eprintln!("curriculum {curriculum} scratch {scratch}");
    assert!(curriculum > scratch, "curriculum {curriculum} scratch {scratch}");
}
