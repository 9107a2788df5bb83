use super::*;
use crate::pipeline::config::RunConfig;
use crate::pipeline::synth::synth_corpus;

fn tiny_cfg(task: Task) -> RunConfig {
    let mut cfg = RunConfig::default_for(task);
    cfg.model.channels = 8;
    cfg.model.groups = 1;
    cfg.model.blocks_per_group = 1;
    cfg.model.state_size = 2;
    cfg.model.ca_reduction = 4;
    cfg.train.patch_size = 16;
    cfg.train.total_steps = 4;
    cfg.train.eval_interval = 2;
    cfg.train.holdout_count = 2;
    cfg
}

fn corpus(name: &str, count: usize, size: usize) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mambair-train-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    synth_corpus(&dir, count, size, 11).unwrap();
    dir
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = corpus("zero", 4, 16);
    let mut cfg = tiny_cfg(Task::Denoise);
    cfg.train.total_steps = 0;
    let out = dir.join("init.ckpt");
    train(&cfg, &dir, &out, &TrainOptions::default()).unwrap();
    let ck = Checkpoint::load(&out).unwrap();
    assert_eq!(ck.step, 0);
    let reference = Model::init(&cfg.model, cfg.train.seed).unwrap();
    for (entry, (name, t)) in ck.params.iter().zip(reference.state().iter()) {
        assert_eq!(entry.name, name);
        for (a, b) in entry.values.iter().zip(t.data().iter()) {
            assert_eq!(*a, *b as f32, "{name} differs from initialization");
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let dir = corpus("determinism", 4, 16);
    let cfg = tiny_cfg(Task::Denoise);
    let out1 = dir.join("a.ckpt");
    let out2 = dir.join("b.ckpt");
    train(&cfg, &dir, &out1, &TrainOptions::default()).unwrap();
    train(&cfg, &dir, &out2, &TrainOptions::default()).unwrap();
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_reproduces_uninterrupted_trajectory() {
    let dir = corpus("resume", 4, 16);
    let mut cfg = tiny_cfg(Task::Denoise);
    cfg.train.total_steps = 6;
    cfg.train.eval_interval = 3;

    let full = dir.join("full.ckpt");
    train(&cfg, &dir, &full, &TrainOptions::default()).unwrap();

    let half = dir.join("half.ckpt");
    train(
        &cfg,
        &dir,
        &half,
        &TrainOptions {
            stop_after_step: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(Checkpoint::load(&half).unwrap().step, 3);

    let resumed = dir.join("resumed.ckpt");
    train(
        &cfg,
        &dir,
        &resumed,
        &TrainOptions {
            resume_from: Some(half),
            ..Default::default()
        },
    )
    .unwrap();

    let a = std::fs::read(&full).unwrap();
    let b = std::fs::read(&resumed).unwrap();
    assert_eq!(a, b, "resumed run must match the uninterrupted one");
}

#[test]
fn loss_on_fixed_batch_decreases_after_training() {
    let dir = corpus("learns", 6, 16);
    let mut cfg = tiny_cfg(Task::Denoise);
    cfg.train.total_steps = 40;
    cfg.train.learning_rate = 1e-3;

    let images: Vec<Tensor> = list_images(&dir)
        .unwrap()
        .iter()
        .map(|p| image_read(p).unwrap())
        .collect();
    let model = Model::init(&cfg.model, cfg.train.seed).unwrap();
    model.state().set_grad_enabled(true);
    let mut adam = AdamState::new(model.state());

    let probe_loss = |model: &Model| -> f64 {
        // fixed probe batch: step id 999, never used for updates
        let mut tape = Tape::inference();
        train_step_loss(model, &cfg, &images, 999, &mut tape)
            .unwrap()
            .item()
    };

    let before = probe_loss(&model);
    let mut tape = Tape::new();
    for step in 1..=cfg.train.total_steps {
        let loss = train_step_loss(&model, &cfg, &images, step, &mut tape).unwrap();
        tape.backward(&loss).unwrap();
        let hyper = AdamHyper {
            lr: cfg.train.learning_rate,
            ..AdamHyper::default()
        };
        adam.step(model.state(), &hyper).unwrap();
        tape.clear();
    }
    let after = probe_loss(&model);
    assert!(
        after < before * 0.9,
        "fixed-batch loss did not improve: {before} -> {after}"
    );
}

#[test]
fn metrics_log_has_csv_header_and_rows() {
    let dir = corpus("log", 4, 16);
    let cfg = tiny_cfg(Task::Denoise);
    let out = dir.join("m.ckpt");
    let log = dir.join("metrics.csv");
    train(
        &cfg,
        &dir,
        &out,
        &TrainOptions {
            metrics_log: Some(log.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,psnr,ssim");
    assert_eq!(lines.len(), 3, "expected evals at steps 2 and 4");
    assert!(lines[1].starts_with("2,"));
    assert!(lines[2].starts_with("4,"));
}

#[test]
fn empty_data_dir_is_a_config_error() {
    let dir = std::env::temp_dir().join("mambair-train-empty");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = tiny_cfg(Task::Denoise);
    let err = train(&cfg, &dir, &dir.join("x.ckpt"), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, MirError::Config(_)));
}

#[test]
fn sr_training_runs_and_reports_baseline() {
    let dir = corpus("sr", 4, 16);
    let mut cfg = tiny_cfg(Task::SrX2);
    cfg.train.patch_size = 8;
    cfg.train.total_steps = 2;
    cfg.train.eval_interval = 2;
    let out = dir.join("sr.ckpt");
    let report = train(&cfg, &dir, &out, &TrainOptions::default()).unwrap();
    assert!(report.psnr_y.is_finite());
    assert!(report.baseline_psnr_y.is_finite());
    assert!(report.ssim_y <= 1.0);
}

#[test]
fn patch_clamps_to_image_and_scale() {
    let cfg = tiny_cfg(Task::SrX2);
    // image smaller than configured patch: clamp to image, then round
    // down to a multiple of the scale
    assert_eq!(effective_patch(&cfg, 13, 20), 12);
    assert_eq!(effective_patch(&cfg, 16, 16), 16);
    let cfg3 = tiny_cfg(Task::SrX3);
    assert_eq!(effective_patch(&cfg3, 16, 16), 15);
}
