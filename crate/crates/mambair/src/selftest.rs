//! The built-in verification suite behind `mambair selftest`: every
//! mathematical equivalence and invariant the crate is built around,
//! with one pass/fail line per check.

use crate::blocks::{Model, ModelConfig, Task};
use crate::diagnostics::{compute_erf, ErfInput};
use crate::error::Result;
use crate::gradcheck;
use crate::pipeline::augment::dihedral_apply;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::metrics::{luma_255, psnr_y, ssim_y};
use crate::rng::Rng;
use crate::scan2d::DirectionalSequences;
use crate::ssm::{
    discretize_zoh, random_lti, selective_project, selective_scan_parallel,
    selective_scan_sequential, ssm_convolutional, ssm_recurrent, BbarRule, SelectiveParams,
};
use crate::tensor::{Tape, Tensor};

type CheckResult = std::result::Result<(), String>;
type Check = (&'static str, fn() -> CheckResult);

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Recurrent and convolutional evaluations of 200 seeded stable LTI
/// systems agree to 1e-10.
pub fn check_form_equivalence() -> CheckResult {
    let mut rng = Rng::new(2024);
    for trial in 0..200 {
        let n = 1 + rng.below(8);
        let l = 1 + rng.below(64);
        let delta = rng.uniform_in(0.01, 1.0);
        let p = random_lti(n, &mut rng);
        let x: Vec<f64> = (0..l).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let disc = discretize_zoh(&p, delta).map_err(|e| e.to_string())?;
        let yr = ssm_recurrent(&disc, &p.c, p.d, &x, None).map_err(|e| e.to_string())?;
        let yc = ssm_convolutional(&p, delta, &x).map_err(|e| e.to_string())?;
        let diff = max_abs_diff(&yr, &yc);
        if diff > 1e-10 {
            return Err(format!("trial {trial}: recurrent vs convolutional {diff:.3e}"));
        }
    }
    Ok(())
}

/// Parallel scan equals the sequential recurrence (1e-12) on 200 seeded
/// instances and is bit-identical across repeats and worker counts.
pub fn check_scan_equivalence() -> CheckResult {
    let mut rng = Rng::new(2025);
    for trial in 0..200 {
        let c = 1 + rng.below(4);
        let n = 1 + rng.below(8);
        let l = 1 + rng.below(64);
        let p = SelectiveParams::init(c, n, &mut rng);
        let x: Vec<f64> = (0..l * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let tp = selective_project(&p, &x, l);
        let a = p.a();
        let seq = selective_scan_sequential(&x, &tp, &a, &p.d, c, n, BbarRule::FirstOrder)
            .map_err(|e| e.to_string())?;
        let mut reference: Option<Vec<f64>> = None;
        for workers in [1usize, 2, 4] {
            let par = selective_scan_parallel(
                &x,
                &tp,
                &a,
                &p.d,
                c,
                n,
                BbarRule::FirstOrder,
                workers,
            )
            .map_err(|e| e.to_string())?;
            let diff = max_abs_diff(&seq, &par);
            if diff > 1e-12 {
                return Err(format!(
                    "trial {trial}, workers {workers}: parallel vs sequential {diff:.3e}"
                ));
            }
            match &reference {
                None => reference = Some(par),
                Some(r) => {
                    if r != &par {
                        return Err(format!(
                            "trial {trial}: worker count {workers} changed bits"
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Autodiff vs central finite differences through the selective scan
/// (projections, state matrix, feedthrough).
pub fn check_scan_gradients() -> CheckResult {
    let (c, n, l) = (3, 4, 12);
    let mut rng = Rng::new(2026);
    let p = SelectiveParams::init(c, n, &mut rng);
    let x = Tensor::from_vec(
        &[l, c],
        (0..l * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    )
    .with_grad();
    let a_log = Tensor::from_vec(&[c, n], p.a_log.clone()).with_grad();
    let w_dt = Tensor::from_vec(&[c, c], p.w_dt.clone()).with_grad();
    let b_dt = Tensor::from_vec(&[c], p.b_dt.clone()).with_grad();
    let w_b = Tensor::from_vec(&[c, n], p.w_b.clone()).with_grad();
    let w_c = Tensor::from_vec(&[c, n], p.w_c.clone()).with_grad();
    let d = Tensor::from_vec(&[c], p.d.clone()).with_grad();
    let probe = Tensor::from_vec(
        &[l, c],
        (0..l * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
    );
    let forward = |tape: &mut Tape| -> Tensor {
        let dt_pre = tape.linear(&x, &w_dt, Some(&b_dt)).unwrap();
        let dt = tape.softplus(&dt_pre);
        let b = tape.linear(&x, &w_b, None).unwrap();
        let cp = tape.linear(&x, &w_c, None).unwrap();
        let a = tape.neg_exp(&a_log);
        let y = tape.selective_scan(&x, &dt, &b, &cp, &a, &d).unwrap();
        let weighted = tape.mul(&y, &probe).unwrap();
        tape.sum_all(&weighted)
    };
    let mut tape = Tape::new();
    let loss = forward(&mut tape);
    tape.backward(&loss).map_err(|e| e.to_string())?;
    for (name, param) in [
        ("a_log", &a_log),
        ("w_dt", &w_dt),
        ("b_dt", &b_dt),
        ("w_b", &w_b),
        ("w_c", &w_c),
        ("d", &d),
    ] {
        let grad = param.grad().ok_or(format!("{name}: no gradient"))?;
        let coords: Vec<usize> = (0..param.numel()).collect();
        let worst = gradcheck::max_rel_error(param, &grad, &coords, 1e-4, || {
            let mut t = Tape::inference();
            forward(&mut t).item()
        });
        if worst > 1e-5 {
            return Err(format!("{name}: max rel err {worst:.3e}"));
        }
    }
    Ok(())
}

/// Flatten/un-flatten index maps are bijections for every grid up to
/// 16x16.
pub fn check_permutation_soundness() -> CheckResult {
    for h in 1..=16usize {
        for w in 1..=16usize {
            let seqs = DirectionalSequences::new(h, w);
            for d in 0..4 {
                let mut seen = vec![false; h * w];
                for &p in seqs.perm[d].iter() {
                    if p >= h * w || seen[p] {
                        return Err(format!("{h}x{w} direction {d} is not a bijection"));
                    }
                    seen[p] = true;
                }
                for i in 0..h * w {
                    if seqs.inv[d][seqs.perm[d][i]] != i {
                        return Err(format!("{h}x{w} direction {d} inverse mismatch at {i}"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Known metric values: MSE-1 PSNR, SSIM self-identity, white-pixel Y.
pub fn check_metric_sanity() -> CheckResult {
    let a = Tensor::filled(&[16, 16, 1], 0.5);
    let b = Tensor::filled(&[16, 16, 1], 0.5 + 1.0 / 219.0);
    let psnr = psnr_y(&a, &b).map_err(|e| e.to_string())?;
    if (psnr - 48.1308).abs() > 1e-3 {
        return Err(format!("MSE-1 PSNR {psnr} != 48.1308"));
    }
    let ssim = ssim_y(&a, &a).map_err(|e| e.to_string())?;
    if ssim != 1.0 {
        return Err(format!("SSIM(x,x) = {ssim} != 1"));
    }
    if !psnr_y(&a, &a).map_err(|e| e.to_string())?.is_infinite() {
        return Err("PSNR(x,x) should be the +inf sentinel".into());
    }
    let white = Tensor::filled(&[1, 1, 3], 1.0);
    let y = luma_255(&white).map_err(|e| e.to_string())?[0];
    if (y - 235.0).abs() > 1e-3 {
        return Err(format!("white Y {y} != 235.0"));
    }
    Ok(())
}

/// Untrained toy model has gradient support on the whole 16x16 input;
/// the all-zero (identity) model concentrates on the center pixel.
pub fn check_global_erf() -> CheckResult {
    let mut cfg = ModelConfig::toy(Task::Denoise);
    cfg.channels = 8;
    cfg.groups = 1;
    cfg.blocks_per_group = 1;
    cfg.ca_reduction = 4;
    let model = Model::init(&cfg, 77).map_err(|e| e.to_string())?;
    let erf = compute_erf(&model, 16, ErfInput::FixedGray).map_err(|e| e.to_string())?;
    if let Some((i, &v)) = erf
        .raw
        .iter()
        .enumerate()
        .find(|(_, &v)| v <= 1e-12)
    {
        return Err(format!("position {i} has ERF magnitude {v:.3e}"));
    }
    Ok(())
}

/// Dihedral transforms compose into a group of order 8.
pub fn check_augment_group() -> CheckResult {
    let marker = Tensor::from_vec(&[4, 4, 1], (0..16).map(|v| v as f64).collect());
    let images: Vec<Vec<f64>> = (0..8)
        .map(|c| dihedral_apply(&marker, c).to_vec())
        .collect();
    for i in 0..8 {
        for j in (i + 1)..8 {
            if images[i] == images[j] {
                return Err(format!("codes {i} and {j} produce the same transform"));
            }
        }
    }
    for c1 in 0..8u8 {
        for c2 in 0..8u8 {
            let composed = dihedral_apply(&dihedral_apply(&marker, c1), c2).to_vec();
            if !(0..8).any(|c3| dihedral_apply(&marker, c3).to_vec() == composed) {
                return Err(format!("{c1} then {c2} is not one of the 8 codes"));
            }
        }
    }
    Ok(())
}

/// Checkpoint round trip: save -> load -> save is byte-identical.
pub fn check_checkpoint_roundtrip() -> CheckResult {
    let mut cfg = ModelConfig::toy(Task::Denoise);
    cfg.channels = 8;
    cfg.groups = 1;
    cfg.blocks_per_group = 1;
    cfg.ca_reduction = 4;
    let model = Model::init(&cfg, 5).map_err(|e| e.to_string())?;
    let ck = Checkpoint::capture(model.state(), None, 3, "task = denoise\n");
    let bytes = ck.to_bytes();
    let again = Checkpoint::from_bytes(&bytes)
        .map_err(|e| e.to_string())?
        .to_bytes();
    if bytes != again {
        return Err("save -> load -> save changed bytes".into());
    }
    Ok(())
}

/// All checks with display names, in execution order.
pub fn all_checks() -> Vec<Check> {
    vec![
        ("form_equivalence_200", check_form_equivalence),
        ("scan_equivalence_200", check_scan_equivalence),
        ("scan_gradients_vs_finite_differences", check_scan_gradients),
        ("permutation_soundness_16x16", check_permutation_soundness),
        ("metric_sanity", check_metric_sanity),
        ("global_erf_support", check_global_erf),
        ("augment_dihedral_group", check_augment_group),
        ("checkpoint_roundtrip", check_checkpoint_roundtrip),
    ]
}

/// Runs every check, printing one line per result. Returns Ok(true) if
/// everything passed.
pub fn run_selftest() -> Result<bool> {
    let mut all_ok = true;
    for (name, check) in all_checks() {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                all_ok = false;
            }
        }
    }
    Ok(all_ok)
}
