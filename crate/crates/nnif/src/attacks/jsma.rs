//! Jacobian-based saliency map attack.

use std::collections::BTreeSet;

use super::{finish, AdversarialRecord, AttackConfig};
use crate::error::{Error, Result};
use crate::model::{argmax, ModelParams};

/// Targeted saliency attack: repeatedly perturbs the feature *pair* whose
/// joint saliency most increases the target logit while decreasing the
/// others, by `theta_pix` per touch (clipped to the box), until the model
/// predicts the target or a budget runs out.
///
/// The target class defaults to `(y + 1) mod K`. The attack may touch at
/// most `floor(gamma * d)` distinct features over its whole run; a feature
/// pushed to a box wall stops being eligible in that direction. Both push
/// directions are scored; the best `(pair, direction)` wins, ties resolved
/// toward the positive direction and lower feature indices.
pub fn jsma(
    model: &ModelParams,
    x: ndarray::ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    cfg.validate()?;
    let k = model.class_count();
    if y >= k {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: k,
        });
    }
    let target = match cfg.target_class {
        Some(t) => {
            if t >= k {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    classes: k,
                });
            }
            t
        }
        None => (y + 1) % k,
    };
    let d = x.len();
    let budget = (cfg.gamma * d as f64).floor() as usize;
    let mut cur = x.to_owned();
    let mut touched: BTreeSet<usize> = BTreeSet::new();

    for _ in 0..cfg.max_iter {
        let trace = model.forward(cur.view())?;
        if argmax(trace.logits.view()) == target {
            break;
        }
        let jac = super::logit_jacobian(model, &trace)?;
        // alpha: target logit sensitivity; beta: summed sensitivity of the
        // other logits
        let mut alpha = vec![0.0; d];
        let mut beta = vec![0.0; d];
        for j in 0..d {
            alpha[j] = jac[[target, j]];
            for c in 0..k {
                if c != target {
                    beta[j] += jac[[c, j]];
                }
            }
        }
        // best (direction, p, q): positive direction first, then low indices,
        // so ties are deterministic
        let mut best: Option<(f64, f64, usize, usize)> = None;
        for &dir in &[1.0, -1.0] {
            let eligible: Vec<usize> = (0..d)
                .filter(|&j| if dir > 0.0 { cur[j] < 1.0 } else { cur[j] > 0.0 })
                .collect();
            for (ai, &p) in eligible.iter().enumerate() {
                for &q in &eligible[ai + 1..] {
                    let a = dir * (alpha[p] + alpha[q]);
                    let b = dir * (beta[p] + beta[q]);
                    if a > 0.0 && b < 0.0 {
                        let score = a * -b;
                        if best.map_or(true, |(s, ..)| score > s) {
                            best = Some((score, dir, p, q));
                        }
                    }
                }
            }
        }
        let Some((_, dir, p, q)) = best else {
            break; // saliency map exhausted
        };
        let newly = [p, q]
            .iter()
            .filter(|j| !touched.contains(j))
            .count();
        if touched.len() + newly > budget {
            break;
        }
        touched.insert(p);
        touched.insert(q);
        cur[p] = (cur[p] + dir * cfg.theta_pix).clamp(0.0, 1.0);
        cur[q] = (cur[q] + dir * cfg.theta_pix).clamp(0.0, 1.0);
    }

    let mut cfg_for_record = cfg.clone();
    cfg_for_record.targeted = true;
    cfg_for_record.target_class = Some(target);
    finish(model, x, cur, &cfg_for_record)
}
