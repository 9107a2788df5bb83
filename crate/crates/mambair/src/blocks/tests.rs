use super::*;
use crate::gradcheck;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
}

fn small_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy(Task::Denoise);
    cfg.channels = 8;
    cfg.groups = 2;
    cfg.blocks_per_group = 1;
    cfg.state_size = 4;
    cfg.ca_reduction = 4;
    cfg
}

// ── channel attention ────────────────────────────────────────────────

#[test]
fn ca_zero_weights_halve_input() {
    let mut rng = Rng::new(50);
    let mut tape = Tape::new();
    let c = 8;
    let x = rand_tensor(&mut rng, &[3, 3, c]);
    let w1 = Tensor::zeros(&[c, 2]);
    let b1 = Tensor::zeros(&[2]);
    let w2 = Tensor::zeros(&[2, c]);
    let b2 = Tensor::zeros(&[c]);
    let y = channel_attention(&mut tape, &x, &w1, &b1, &w2, &b2).unwrap();
    for (yv, xv) in y.to_vec().iter().zip(x.data().iter()) {
        assert!((yv - 0.5 * xv).abs() < 1e-15);
    }
}

#[test]
fn ca_zero_input_stays_zero() {
    let mut rng = Rng::new(51);
    let mut tape = Tape::new();
    let c = 4;
    let x = Tensor::zeros(&[5, 5, c]);
    let w1 = rand_tensor(&mut rng, &[c, 2]);
    let b1 = rand_tensor(&mut rng, &[2]);
    let w2 = rand_tensor(&mut rng, &[2, c]);
    let b2 = rand_tensor(&mut rng, &[c]);
    let y = channel_attention(&mut tape, &x, &w1, &b1, &w2, &b2).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn ca_gates_channels_with_unit_interval_scalars() {
    let mut rng = Rng::new(52);
    let mut tape = Tape::new();
    let c = 4;
    let (h, w) = (4, 6);
    let x = rand_tensor(&mut rng, &[h, w, c]);
    let w1 = rand_tensor(&mut rng, &[c, 2]);
    let b1 = rand_tensor(&mut rng, &[2]);
    let w2 = rand_tensor(&mut rng, &[2, c]);
    let b2 = rand_tensor(&mut rng, &[c]);
    let y = channel_attention(&mut tape, &x, &w1, &b1, &w2, &b2).unwrap();
    let xd = x.data();
    let yd = y.data();
    for ch in 0..c {
        // recover the per-channel scalar from the first nonzero pixel
        let mut gate = None;
        for p in 0..h * w {
            if xd[p * c + ch].abs() > 1e-9 {
                gate = Some(yd[p * c + ch] / xd[p * c + ch]);
                break;
            }
        }
        let gate = gate.expect("random input must have a nonzero entry");
        assert!(gate > 0.0 && gate < 1.0, "gate {gate} outside (0,1)");
        for p in 0..h * w {
            assert!((yd[p * c + ch] - gate * xd[p * c + ch]).abs() < 1e-12);
        }
    }
}

// ── vssm ─────────────────────────────────────────────────────────────

fn vssm_test_weights(c: usize, inner: usize, n: usize, dirs: usize, rng: &mut Rng) -> VssmWeights {
    VssmWeights {
        in_w: rand_tensor(rng, &[c, inner]),
        in_b: rand_tensor(rng, &[inner]),
        dw_w: rand_tensor(rng, &[3, 3, inner]),
        dw_b: rand_tensor(rng, &[inner]),
        scans: (0..dirs).map(|_| ScanParams::init(inner, n, rng)).collect(),
        ln_gamma: Tensor::filled(&[inner], 1.0),
        ln_beta: Tensor::zeros(&[inner]),
        gate_w: rand_tensor(rng, &[c, inner]),
        gate_b: rand_tensor(rng, &[inner]),
        out_w: rand_tensor(rng, &[inner, c]),
        out_b: rand_tensor(rng, &[c]),
    }
}

#[test]
fn vssm_zero_gate_leaves_bias_map() {
    let mut rng = Rng::new(53);
    let cfg = ModelConfig::toy(Task::Denoise);
    let (c, inner, n) = (4, 8, 4);
    let mut w = vssm_test_weights(c, inner, n, 4, &mut rng);
    w.gate_w = Tensor::zeros(&[c, inner]);
    w.gate_b = Tensor::zeros(&[inner]);
    let mut tape = Tape::new();
    let x = rand_tensor(&mut rng, &[3, 5, c]);
    let y = vssm_forward(&mut tape, &x, &w, &cfg).unwrap();
    let bias = w.out_b.to_vec();
    for px in y.to_vec().chunks(c) {
        for ch in 0..c {
            assert!((px[ch] - bias[ch]).abs() < 1e-15);
        }
    }
}

#[test]
fn vssm_preserves_shape() {
    let mut rng = Rng::new(54);
    let cfg = ModelConfig::toy(Task::Denoise);
    let (c, inner, n) = (4, 8, 4);
    let w = vssm_test_weights(c, inner, n, 4, &mut rng);
    let mut tape = Tape::inference();
    for (h, wd) in [(1, 1), (2, 7), (5, 3), (8, 8)] {
        let x = rand_tensor(&mut rng, &[h, wd, c]);
        let y = vssm_forward(&mut tape, &x, &w, &cfg).unwrap();
        assert_eq!(y.shape(), &[h, wd, c]);
    }
}

#[test]
fn vssm_gradients_match_finite_differences() {
    let mut rng = Rng::new(55);
    let mut cfg = ModelConfig::toy(Task::Denoise);
    cfg.channels = 8;
    cfg.state_size = 4;
    let (c, inner, n) = (8, 16, 4);
    let w = vssm_test_weights(c, inner, n, 4, &mut rng);
    let x = rand_tensor(&mut rng, &[4, 4, c]).with_grad();
    let probe = rand_tensor(&mut rng, &[4, 4, c]);
    for (_, t) in named_vssm_tensors(&w) {
        t.set_grad_enabled(true);
    }

    let forward = |tape: &mut Tape| -> Tensor {
        let y = vssm_forward(tape, &x, &w, &cfg).unwrap();
        let weighted = tape.mul(&y, &probe).unwrap();
        tape.sum_all(&weighted)
    };
    let mut tape = Tape::new();
    let loss = forward(&mut tape);
    tape.backward(&loss).unwrap();

    for (name, param) in named_vssm_tensors(&w).into_iter().chain([("x", &x)]) {
        let grad = param.grad().unwrap();
        let coords = gradcheck::sample_coords(param.numel(), 5);
        let worst = gradcheck::max_rel_error(param, &grad, &coords, 1e-4, || {
            let mut t = Tape::inference();
            forward(&mut t).item()
        });
        assert!(worst <= 1e-5, "{name}: max rel err {worst}");
    }
}

fn named_vssm_tensors(w: &VssmWeights) -> Vec<(&'static str, &Tensor)> {
    let mut v = vec![
        ("in_w", &w.in_w),
        ("in_b", &w.in_b),
        ("dw_w", &w.dw_w),
        ("dw_b", &w.dw_b),
        ("ln_gamma", &w.ln_gamma),
        ("ln_beta", &w.ln_beta),
        ("gate_w", &w.gate_w),
        ("gate_b", &w.gate_b),
        ("out_w", &w.out_w),
        ("out_b", &w.out_b),
    ];
    for sp in &w.scans {
        v.push(("scan.a_log", &sp.a_log));
        v.push(("scan.w_dt", &sp.w_dt));
        v.push(("scan.b_dt", &sp.b_dt));
        v.push(("scan.w_b", &sp.w_b));
        v.push(("scan.w_c", &sp.w_c));
        v.push(("scan.d", &sp.d));
    }
    v
}

// ── rssb ─────────────────────────────────────────────────────────────

/// With every learned weight at zero and unit skip scales, the block is
/// the identity (all biases are zero here, so no bias residue).
#[test]
fn rssb_zero_weights_is_identity_skip() {
    let cfg = small_config();
    let model = Model::init(&cfg, 7).unwrap();
    // zero out every parameter except the skip scales
    for (name, t) in model.state().iter() {
        if name.ends_with(".s") || name.ends_with(".s_prime") {
            continue;
        }
        for v in t.data_mut().iter_mut() {
            *v = 0.0;
        }
    }
    let mut rng = Rng::new(56);
    let f = rand_tensor(&mut rng, &[4, 4, cfg.channels]);
    let mut tape = Tape::new();
    let mut trace = ForwardTrace::default();
    let out = rssb_forward(&mut tape, &f, &model.groups[0].blocks[0], &cfg, &mut trace).unwrap();
    assert!(out.max_abs_diff(&f) < 1e-15);
}

#[test]
fn rssb_zero_scales_and_weights_gives_zero_map() {
    let cfg = small_config();
    let model = Model::init(&cfg, 7).unwrap();
    for (_, t) in model.state().iter() {
        for v in t.data_mut().iter_mut() {
            *v = 0.0;
        }
    }
    let mut rng = Rng::new(57);
    let f = rand_tensor(&mut rng, &[4, 4, cfg.channels]);
    let mut tape = Tape::new();
    let mut trace = ForwardTrace::default();
    let out = rssb_forward(&mut tape, &f, &model.groups[0].blocks[0], &cfg, &mut trace).unwrap();
    assert!(out.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn rssb_preserves_odd_shapes() {
    let mut cfg = ModelConfig::toy(Task::Denoise);
    cfg.channels = 16;
    let model = Model::init(&cfg, 8).unwrap();
    let mut rng = Rng::new(58);
    let f = rand_tensor(&mut rng, &[7, 5, 16]);
    let mut tape = Tape::inference();
    let mut trace = ForwardTrace::default();
    let out = rssb_forward(&mut tape, &f, &model.groups[0].blocks[0], &cfg, &mut trace).unwrap();
    assert_eq!(out.shape(), &[7, 5, 16]);
}

// ── full model ───────────────────────────────────────────────────────

#[test]
fn denoise_zero_weights_is_input_passthrough() {
    let cfg = small_config();
    let model = Model::init(&cfg, 9).unwrap();
    for (_, t) in model.state().iter() {
        for v in t.data_mut().iter_mut() {
            *v = 0.0;
        }
    }
    let mut rng = Rng::new(59);
    let input = rand_tensor(&mut rng, &[6, 6, 3]);
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &input).unwrap();
    assert!(out.max_abs_diff(&input) < 1e-15);
}

#[test]
fn sr2_doubles_spatial_size() {
    let mut cfg = ModelConfig::toy(Task::SrX2);
    cfg.channels = 16;
    let model = Model::init(&cfg, 10).unwrap();
    let mut rng = Rng::new(60);
    let input = rand_tensor(&mut rng, &[8, 8, 3]);
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &input).unwrap();
    assert_eq!(out.shape(), &[16, 16, 3]);
}

#[test]
fn sr3_and_sr4_scale_correctly() {
    for (task, expect) in [(Task::SrX3, 12), (Task::SrX4, 16)] {
        let mut cfg = ModelConfig::toy(task);
        cfg.channels = 16;
        cfg.groups = 1;
        cfg.blocks_per_group = 1;
        let model = Model::init(&cfg, 11).unwrap();
        let mut rng = Rng::new(61);
        let input = rand_tensor(&mut rng, &[4, 4, 3]);
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &input).unwrap();
        assert_eq!(out.shape(), &[expect, expect, 3]);
    }
}

#[test]
fn model_rejects_wrong_input_channels() {
    let cfg = small_config();
    let model = Model::init(&cfg, 12).unwrap();
    let input = Tensor::zeros(&[4, 4, 1]);
    let mut tape = Tape::inference();
    assert!(model.forward(&mut tape, &input).is_err());
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config();
    let model = Model::init(&cfg, 13).unwrap();
    let mut rng = Rng::new(62);
    let input = rand_tensor(&mut rng, &[5, 5, 3]);
    let mut tape = Tape::inference();
    let a = model.forward(&mut tape, &input).unwrap();
    let b = model.forward(&mut tape, &input).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());

    // identical seed, identical state, identical output
    let model2 = Model::init(&cfg, 13).unwrap();
    let c = model2.forward(&mut tape, &input).unwrap();
    assert_eq!(a.to_vec(), c.to_vec());
}

#[test]
fn ablations_shrink_parameter_count_and_change_forward() {
    let full_cfg = small_config();
    let mut bare_cfg = full_cfg.clone();
    bare_cfg.use_local_conv = false;
    bare_cfg.use_channel_attention = false;

    let full = Model::init(&full_cfg, 14).unwrap();
    let bare = Model::init(&bare_cfg, 14).unwrap();
    assert!(
        bare.state().total_params() < full.state().total_params(),
        "removing conv+CA must strictly decrease parameters"
    );

    let mut rng = Rng::new(63);
    let input = rand_tensor(&mut rng, &[6, 6, 3]);
    let mut tape = Tape::inference();
    let a = full.forward(&mut tape, &input).unwrap();
    let b = bare.forward(&mut tape, &input).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6, "ablation must change the output");
}

#[test]
fn mlp_variant_builds_and_runs() {
    let mut cfg = small_config();
    cfg.replace_with_mlp = true;
    let model = Model::init(&cfg, 15).unwrap();
    let mut rng = Rng::new(64);
    let input = rand_tensor(&mut rng, &[5, 4, 3]);
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &input).unwrap();
    assert_eq!(out.shape(), &[5, 4, 3]);
}

#[test]
fn parameter_count_formula_matches_construction() {
    for cfg in [
        ModelConfig::toy(Task::Denoise),
        ModelConfig::toy(Task::SrX2),
        {
            let mut c = small_config();
            c.replace_with_mlp = true;
            c
        },
        {
            let mut c = ModelConfig::toy(Task::SrX4);
            c.scan_directions = 2;
            c
        },
        {
            let mut c = ModelConfig::toy(Task::SrX3);
            c.shared_scan_params = true;
            c
        },
    ] {
        let model = Model::init(&cfg, 16).unwrap();
        assert_eq!(
            model.state().total_params(),
            parameter_count(&cfg),
            "formula disagrees for {cfg:?}"
        );
    }
}

#[test]
fn parameter_count_hand_derived_literal() {
    // C=4, 1 group x 1 block, N=2, expansion 2 (inner 8), bottleneck 4,
    // CA reduction 4, denoise, 3 input channels, 4 directions:
    //   shallow conv       3*3*3*4+4               = 112
    //   ln1                 8
    //   vssm in             4*8+8                  = 40
    //   vssm dwconv         9*8+8                  = 80
    //   scans 4 * (16 + 72 + 16 + 16 + 8)          = 512
    //   vssm ln             16
    //   vssm gate           40
    //   vssm out            8*4+4                  = 36
    //   s + ln2 + s'        4+8+4                  = 16
    //   local conv          37+40                  = 77
    //   ca                  5+8                    = 13
    //   group tail          3*3*4*4+4              = 148
    //   head conv           3*3*4*3+3              = 111
    // total = 112 + (8+40+80+512+16+40+36+16+77+13) + 148 + 111 = 1209
    let cfg = ModelConfig {
        task: Task::Denoise,
        in_channels: 3,
        channels: 4,
        groups: 1,
        blocks_per_group: 1,
        state_size: 2,
        expansion: 2.0,
        bottleneck_factor: 4,
        ca_reduction: 4,
        use_local_conv: true,
        use_channel_attention: true,
        replace_with_mlp: false,
        scan_directions: 4,
        shared_scan_params: false,
    };
    assert_eq!(parameter_count(&cfg), 1209);
    let model = Model::init(&cfg, 17).unwrap();
    assert_eq!(model.state().total_params(), 1209);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    // 2 groups x 1 block, C = 8, N = 4 toy model; 50 sampled parameters
    let cfg = small_config();
    let model = Model::init(&cfg, 18).unwrap();
    model.state().set_grad_enabled(true);
    let mut rng = Rng::new(65);
    let input = rand_tensor(&mut rng, &[6, 6, 3]);
    let target = rand_tensor(&mut rng, &[6, 6, 3]);

    let forward = |tape: &mut Tape| -> Tensor {
        let out = model.forward(tape, &input).unwrap();
        tape.charbonnier_loss(&out, &target, 1e-3).unwrap()
    };
    let mut tape = Tape::new();
    let loss = forward(&mut tape);
    tape.backward(&loss).unwrap();

    // spread 50 coordinate probes across the whole parameter list
    let names: Vec<&str> = model.state().iter().map(|(n, _)| n).collect();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for (i, name) in names.iter().enumerate() {
        if i % (names.len() / 50).max(1) != 0 {
            continue;
        }
        let param = model.state().get(name).unwrap();
        let grad = param.grad().unwrap();
        let coords = gradcheck::sample_coords(param.numel(), 1);
        let err = gradcheck::max_rel_error(param, &grad, &coords, 1e-4, || {
            let mut t = Tape::inference();
            forward(&mut t).item()
        });
        if err > worst {
            worst = err;
            worst_name = name;
        }
        checked += 1;
    }
    assert!(checked >= 50, "only {checked} parameters probed");
    assert!(worst <= 1e-4, "{worst_name}: max rel err {worst}");
}

#[test]
fn config_validation_rejects_bad_divisibility() {
    let mut cfg = ModelConfig::toy(Task::Denoise);
    cfg.channels = 10; // not divisible by ca_reduction 16
    assert!(cfg.validate().is_err());
    let mut cfg2 = ModelConfig::toy(Task::Denoise);
    cfg2.expansion = 1.3; // 1.3 * 16 = 20.8, not integral
    assert!(cfg2.validate().is_err());
    let mut cfg3 = ModelConfig::toy(Task::Denoise);
    cfg3.scan_directions = 3;
    assert!(cfg3.validate().is_err());
}

#[test]
fn trace_captures_last_vssm_output() {
    let cfg = small_config();
    let model = Model::init(&cfg, 19).unwrap();
    let mut rng = Rng::new(66);
    let input = rand_tensor(&mut rng, &[4, 4, 3]);
    let mut tape = Tape::inference();
    let mut trace = ForwardTrace::default();
    let _ = model.forward_traced(&mut tape, &input, &mut trace).unwrap();
    let captured = trace.last_vssm.expect("trace must capture a VSSM output");
    assert_eq!(captured.shape(), &[4, 4, cfg.channels]);
}

#[test]
fn sr_head_zero_weights_reduces_to_bilinear() {
    let mut cfg = ModelConfig::toy(Task::SrX2);
    cfg.channels = 16;
    cfg.groups = 1;
    cfg.blocks_per_group = 1;
    let model = Model::init(&cfg, 21).unwrap();
    for (_, t) in model.state().iter() {
        for v in t.data_mut().iter_mut() {
            *v = 0.0;
        }
    }
    let mut rng = Rng::new(67);
    let input = rand_tensor(&mut rng, &[6, 6, 3]);
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &input).unwrap();
    let bilinear = crate::pipeline::degrade::bilinear_upsample(&input, 2).unwrap();
    assert!(out.max_abs_diff(&bilinear) < 1e-15);
}
