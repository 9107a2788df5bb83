//! Self-ensemble inference: average the model output over all eight
//! dihedral transforms of the input, each inverted before averaging.

use crate::blocks::Model;
use crate::error::{MirError, Result};
use crate::pipeline::augment::{dihedral_apply, dihedral_inverse};
use crate::pipeline::degrade::clamp01;
use crate::tensor::{Tape, Tensor};

pub fn self_ensemble_infer(model: &Model, input: &Tensor) -> Result<Tensor> {
    let mut acc: Option<Vec<f64>> = None;
    let mut out_shape: Vec<usize> = Vec::new();
    for code in 0..8u8 {
        let transformed = dihedral_apply(input, code);
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &transformed)?;
        let restored = dihedral_apply(&out, dihedral_inverse(code));
        match &mut acc {
            None => {
                out_shape = restored.shape().to_vec();
                acc = Some(restored.to_vec());
            }
            Some(buf) => {
                if restored.shape() != out_shape.as_slice() {
                    return Err(MirError::Shape(format!(
                        "ensemble transform {code} produced {:?}, expected {out_shape:?}",
                        restored.shape()
                    )));
                }
                for (a, v) in buf.iter_mut().zip(restored.data().iter()) {
                    *a += v;
                }
            }
        }
    }
    let mut buf = acc.expect("eight transforms always run");
    for v in buf.iter_mut() {
        *v /= 8.0;
    }
    Ok(Tensor::from_vec(&out_shape, buf))
}

/// Single-pass or ensemble restoration, clamped to [0,1].
pub fn restore_image(model: &Model, input: &Tensor, ensemble: bool) -> Result<Tensor> {
    let out = if ensemble {
        self_ensemble_infer(model, input)?
    } else {
        let mut tape = Tape::inference();
        model.forward(&mut tape, input)?
    };
    out.check_finite("restored image")?;
    Ok(clamp01(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{Model, ModelConfig, Task};
    use crate::pipeline::metrics::psnr_y;
    use crate::rng::Rng;

    fn identity_denoiser() -> Model {
        let mut cfg = ModelConfig::toy(Task::Denoise);
        cfg.channels = 8;
        cfg.groups = 1;
        cfg.blocks_per_group = 1;
        cfg.state_size = 2;
        cfg.ca_reduction = 4;
        let model = Model::init(&cfg, 1).unwrap();
        for (_, t) in model.state().iter() {
            for v in t.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        model
    }

    #[test]
    fn ensemble_of_identity_model_is_identity() {
        let model = identity_denoiser();
        let mut rng = Rng::new(100);
        let input = Tensor::from_vec(
            &[6, 6, 3],
            (0..108).map(|_| rng.uniform()).collect(),
        );
        let out = self_ensemble_infer(&model, &input).unwrap();
        assert!(out.max_abs_diff(&input) < 1e-12);
    }

    #[test]
    fn ensemble_of_equivariant_model_equals_plain_output() {
        // the all-zero-weight denoiser is the identity, which is
        // trivially equivariant under the dihedral group
        let model = identity_denoiser();
        let mut rng = Rng::new(101);
        let input = Tensor::from_vec(
            &[5, 5, 3],
            (0..75).map(|_| rng.uniform()).collect(),
        );
        let mut tape = Tape::inference();
        let plain = model.forward(&mut tape, &input).unwrap();
        let ens = self_ensemble_infer(&model, &input).unwrap();
        assert!(ens.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn ensemble_psnr_at_least_the_worst_transform() {
        // random (untrained) model: ensemble MSE <= mean per-transform
        // MSE by convexity, so ensemble PSNR >= min per-transform PSNR
        let mut cfg = ModelConfig::toy(Task::Denoise);
        cfg.channels = 8;
        cfg.groups = 1;
        cfg.blocks_per_group = 1;
        cfg.state_size = 4;
        cfg.ca_reduction = 4;
        let model = Model::init(&cfg, 33).unwrap();
        let mut rng = Rng::new(102);
        let clean = Tensor::from_vec(
            &[12, 12, 3],
            (0..432).map(|_| rng.uniform()).collect(),
        );
        let noisy = crate::pipeline::degrade::add_gaussian_noise(&clean, 0.1, &mut rng);

        let mut min_single = f64::INFINITY;
        for code in 0..8u8 {
            let t_in = dihedral_apply(&noisy, code);
            let mut tape = Tape::inference();
            let out = model.forward(&mut tape, &t_in).unwrap();
            let restored = clamp01(&dihedral_apply(&out, dihedral_inverse(code)));
            let p = psnr_y(&restored, &clean).unwrap();
            min_single = min_single.min(p);
        }
        let ens = restore_image(&model, &noisy, true).unwrap();
        let p_ens = psnr_y(&ens, &clean).unwrap();
        assert!(
            p_ens >= min_single - 1e-9,
            "ensemble {p_ens} dB < worst single {min_single} dB"
        );
    }
}
