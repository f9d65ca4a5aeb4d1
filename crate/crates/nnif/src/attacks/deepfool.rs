//! DeepFool: minimal perturbation via iterative linearization.

use ndarray::Array1;

use super::{clip_box, finish, AdversarialRecord, AttackConfig};
use crate::error::Result;
use crate::model::{argmax, ModelParams};

/// Walks toward the nearest linearized class boundary until the prediction
/// flips or `max_iter` runs out, then overshoots the accumulated
/// perturbation by `(1 + overshoot)` and clips to the box.
///
/// Per iteration at the current point: for every class `c != y` compute the
/// logit-difference gradient `w_c = grad Z_c - grad Z_y` and value
/// `f_c = Z_c - Z_y`; the boundary at distance `|f_c| / |w_c|` with the
/// smallest distance (ties to the lower class index) receives the step
/// `(|f_l| / |w_l|^2) w_l`. For an affine model one step lands exactly on
/// the boundary, so the whole attack reduces to the closed form
/// `(1 + overshoot) * (-f(x) / |w|^2) * w`.
pub fn deepfool(
    model: &ModelParams,
    x: ndarray::ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    cfg.validate()?;
    let k = model.class_count();
    let overshoot = 1.0 + cfg.overshoot;
    let mut r_total: Array1<f64> = Array1::zeros(x.len());

    for _ in 0..cfg.max_iter {
        let xi = &x.to_owned() + &(&r_total * overshoot);
        let trace = model.forward(xi.view())?;
        if argmax(trace.logits.view()) != y {
            break;
        }
        let jac = super::logit_jacobian(model, &trace)?;
        let mut best: Option<(f64, Array1<f64>, f64)> = None; // (dist, w, |f|)
        for c in 0..k {
            if c == y {
                continue;
            }
            let w = &jac.row(c) - &jac.row(y);
            let w_norm2 = w.dot(&w);
            if w_norm2 <= 0.0 {
                continue;
            }
            let f = trace.logits[c] - trace.logits[y];
            let dist = f.abs() / w_norm2.sqrt();
            if best.as_ref().map_or(true, |(d, ..)| dist < *d) {
                best = Some((dist, w, f.abs()));
            }
        }
        let Some((_, w, f_abs)) = best else {
            break; // all logit gradients coincide; no direction to move
        };
        let w_norm2 = w.dot(&w);
        let step = &w * (f_abs / w_norm2);
        let step_norm = step.dot(&step).sqrt();
        r_total += &step;
        if step_norm < 1e-15 {
            break; // sitting on the boundary with no overshoot to cross it
        }
    }

    let mut x_adv = &x.to_owned() + &(&r_total * overshoot);
    clip_box(&mut x_adv);
    finish(model, x, x_adv, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackName;
    use crate::model::{init_model, Activation, Layer, ModelParams};
    use ndarray::{array, Array2};

    fn df_cfg(overshoot: f64) -> AttackConfig {
        AttackConfig {
            attack: AttackName::Deepfool,
            overshoot,
            max_iter: 50,
            ..AttackConfig::default()
        }
    }

    /// Two-logit affine model: z0 = 0, z1 = w.x + b.
    fn affine_binary(w: &[f64], b: f64) -> ModelParams {
        let d = w.len();
        let mut weight = Array2::zeros((2, d));
        for (j, &wj) in w.iter().enumerate() {
            weight[[1, j]] = wj;
        }
        let layer = Layer {
            weight,
            bias: array![0.0, b],
            activation: Activation::Identity,
        };
        ModelParams::new(vec![layer], d).unwrap()
    }

    #[test]
    fn affine_case_matches_closed_form() {
        let w = [2.0, -1.0, 0.5];
        let b = -0.4;
        let model = affine_binary(&w, b);
        let x = array![0.6, 0.3, 0.4];
        // f(x) = w.x + b relative to class 0; pick the predicted side
        let fx: f64 = 2.0 * 0.6 - 1.0 * 0.3 + 0.5 * 0.4 - 0.4;
        assert!(fx > 0.0);
        let y = 1; // predicted class
        let eta = 0.05;
        let rec = deepfool(&model, x.view(), y, &df_cfg(eta)).unwrap();
        // closed form: (1+eta) * (-f/|w|^2) * w, measured from x
        let w_norm2: f64 = w.iter().map(|v| v * v).sum();
        for j in 0..3 {
            let expect = x[j] + (1.0 + eta) * (-fx / w_norm2) * w[j];
            assert!(
                (rec.x_adv[j] - expect.clamp(0.0, 1.0)).abs() < 1e-10,
                "dim {j}: {} vs {expect}",
                rec.x_adv[j]
            );
        }
        assert!(rec.success);
    }

    #[test]
    fn zero_overshoot_lands_on_linearized_boundary() {
        let w = [1.5, -0.8];
        let b = -0.3;
        let model = affine_binary(&w, b);
        let x = array![0.7, 0.2];
        let rec = deepfool(&model, x.view(), 1, &df_cfg(0.0)).unwrap();
        // |f(x_adv)| should vanish: the step puts the point exactly on the
        // boundary and eta = 0 adds nothing
        let f_adv = 1.5 * rec.x_adv[0] - 0.8 * rec.x_adv[1] - 0.3;
        assert!(f_adv.abs() <= 1e-8, "boundary miss {f_adv}");
    }

    #[test]
    fn trained_like_model_flips_prediction() {
        let model = init_model(&[4, 8, 6, 3], 6).unwrap();
        let x = array![0.4, 0.6, 0.5, 0.45];
        let y = model.predict(x.view()).unwrap();
        let rec = deepfool(&model, x.view(), y, &df_cfg(0.02)).unwrap();
        assert!(rec.x_adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if rec.success {
            assert_ne!(rec.pred_after, y);
        }
    }

    #[test]
    fn is_deterministic() {
        let model = init_model(&[4, 8, 3], 2).unwrap();
        let x = array![0.3, 0.55, 0.55, 0.62];
        let y = model.predict(x.view()).unwrap();
        let a = deepfool(&model, x.view(), y, &df_cfg(0.02)).unwrap();
        let b = deepfool(&model, x.view(), y, &df_cfg(0.02)).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }
}
