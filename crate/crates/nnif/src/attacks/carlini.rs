//! Margin-loss optimization attacks: CW-L2, EAD, and the feature-space
//! white-box variant.
//!
//! All three minimize `distance(x_adv, x) + c * loss(x_adv)` where the loss
//! is the margin `max(Z_y - max_{j != y} Z_j, -kappa)` (classes swapped for
//! targeted runs), with an outer binary search on `c` that keeps the
//! smallest-distance success. CW-L2 optimizes in tanh space so iterates can
//! never leave the unit box; EAD runs ISTA directly on the input with an L1
//! shrinkage step. The white-box variant adds `weight * l_star` to the loss,
//! where `l_star` sums embedding-space distances to chosen helpful training
//! points, dragging the adversarial embedding into the region the detector
//! considers benign.

use ndarray::{Array1, ArrayView1, ArrayView2};

use super::{finish, sign_val, AdversarialRecord, AttackConfig, AttackName, EmbedNorm};
use crate::error::{Error, Result};
use crate::model::{argmax, ActivationTrace, ModelParams};

/// Margin loss value and, when the margin is unclamped, the logit seed of
/// its gradient.
fn margin_and_seed(
    logits: &Array1<f64>,
    y: usize,
    target: Option<usize>,
    kappa: f64,
) -> (f64, Option<Array1<f64>>) {
    let k = logits.len();
    let mut seed = Array1::zeros(k);
    let margin = match target {
        // targeted: push Z_t above every other logit
        Some(t) => {
            let mut runner = None;
            for j in 0..k {
                if j != t && runner.map_or(true, |(_, v)| logits[j] > v) {
                    runner = Some((j, logits[j]));
                }
            }
            let (j_star, z_star) = runner.expect("at least two classes");
            seed[j_star] = 1.0;
            seed[t] = -1.0;
            z_star - logits[t]
        }
        // untargeted: push Z_y below the best other logit
        None => {
            let mut runner = None;
            for j in 0..k {
                if j != y && runner.map_or(true, |(_, v)| logits[j] > v) {
                    runner = Some((j, logits[j]));
                }
            }
            let (j_star, z_star) = runner.expect("at least two classes");
            seed[y] = 1.0;
            seed[j_star] = -1.0;
            logits[y] - z_star
        }
    };
    if margin > -kappa {
        (margin, Some(seed))
    } else {
        (-kappa, None)
    }
}

fn resolve_target(cfg: &AttackConfig, y: usize, k: usize) -> Result<Option<usize>> {
    if !cfg.targeted {
        return Ok(None);
    }
    let t = cfg.target_class.unwrap_or((y + 1) % k);
    if t >= k {
        return Err(Error::LabelOutOfRange {
            label: t,
            classes: k,
        });
    }
    Ok(Some(t))
}

fn is_success(pred: usize, y: usize, target: Option<usize>) -> bool {
    match target {
        Some(t) => pred == t && t != y,
        None => pred != y,
    }
}

/// Feature-space penalty: summed embedding distance to the helpful points.
pub fn embed_penalty(
    model: &ModelParams,
    x_adv: ArrayView1<f64>,
    helpful: ArrayView2<f64>,
    norm: EmbedNorm,
) -> Result<f64> {
    if helpful.nrows() == 0 {
        return Err(Error::Empty("helpful embeddings"));
    }
    let emb = model.embedding(x_adv)?;
    if helpful.ncols() != emb.len() {
        return Err(Error::DimensionMismatch {
            expected: emb.len(),
            got: helpful.ncols(),
        });
    }
    let mut total = 0.0;
    for row in helpful.outer_iter() {
        let diff = &emb - &row;
        total += match norm {
            EmbedNorm::L1 => diff.iter().map(|v| v.abs()).sum::<f64>(),
            EmbedNorm::L2 => diff.dot(&diff).sqrt(),
        };
    }
    Ok(total)
}

/// Gradient of [`embed_penalty`] with respect to the embedding vector.
fn embed_penalty_seed(
    emb: ArrayView1<f64>,
    helpful: ArrayView2<f64>,
    norm: EmbedNorm,
) -> Array1<f64> {
    let mut seed = Array1::zeros(emb.len());
    for row in helpful.outer_iter() {
        let diff = &emb - &row;
        match norm {
            EmbedNorm::L1 => {
                for i in 0..seed.len() {
                    seed[i] += sign_val(diff[i]);
                }
            }
            EmbedNorm::L2 => {
                let n = diff.dot(&diff).sqrt().max(1e-12);
                for i in 0..seed.len() {
                    seed[i] += diff[i] / n;
                }
            }
        }
    }
    seed
}

struct EmbedReg<'a> {
    helpful: ArrayView2<'a, f64>,
    weight: f64,
    norm: EmbedNorm,
}

/// Gradient of `c * (margin + weight * l_star)` with respect to the input,
/// evaluated from a forward trace.
fn attack_loss_grad(
    model: &ModelParams,
    trace: &ActivationTrace,
    y: usize,
    target: Option<usize>,
    cfg: &AttackConfig,
    c: f64,
    reg: Option<&EmbedReg>,
) -> Result<Array1<f64>> {
    let mut g = Array1::zeros(model.input_dim());
    let (_, seed) = margin_and_seed(&trace.logits, y, target, cfg.kappa);
    if let Some(seed) = seed {
        let gi = model.backprop_from_logits(trace, seed.view())?.input;
        g += &(gi * c);
    }
    if let Some(reg) = reg {
        let emb_seed = embed_penalty_seed(trace.embedding(), reg.helpful, reg.norm);
        let gi = model.input_grad_from_embedding(trace, emb_seed.view())?;
        g += &(gi * (c * reg.weight));
    }
    Ok(g)
}

const TANH_SHRINK: f64 = 1.0 - 1e-6;

/// Shared CW optimizer: plain gradient descent in tanh space with an outer
/// binary search over `c`; returns the smallest-L2 successful iterate, or
/// the last iterate when nothing succeeded.
fn cw_optimize(
    model: &ModelParams,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
    reg: Option<&EmbedReg>,
) -> Result<Array1<f64>> {
    let target = resolve_target(cfg, y, model.class_count())?;
    let x0 = x.to_owned();
    let mut c = cfg.c;
    let mut c_lo = 0.0f64;
    let mut c_hi = f64::INFINITY;
    let mut best: Option<(f64, Array1<f64>)> = None;
    let mut last = x0.clone();

    for _ in 0..cfg.binary_search_steps.max(1) {
        let mut w = x.mapv(|v| ((2.0 * v - 1.0) * TANH_SHRINK).atanh());
        let mut success_this_c = false;
        for _ in 0..cfg.opt_steps {
            let tanh_w = w.mapv(f64::tanh);
            let x_adv = tanh_w.mapv(|t| (t + 1.0) / 2.0);
            let trace = model.forward(x_adv.view())?;
            let pred = argmax(trace.logits.view());
            if is_success(pred, y, target) {
                success_this_c = true;
                let delta = &x_adv - &x0;
                let l2 = delta.dot(&delta).sqrt();
                if best.as_ref().map_or(true, |(b, _)| l2 < *b) {
                    best = Some((l2, x_adv.clone()));
                }
            }
            let mut g = (&x_adv - &x0) * 2.0;
            g += &attack_loss_grad(model, &trace, y, target, cfg, c, reg)?;
            for i in 0..w.len() {
                let chain = (1.0 - tanh_w[i] * tanh_w[i]) / 2.0;
                w[i] -= cfg.lr * g[i] * chain;
            }
        }
        last = w.mapv(|v| (v.tanh() + 1.0) / 2.0);
        if success_this_c {
            c_hi = c;
        } else {
            c_lo = c;
        }
        c = if c_hi.is_finite() {
            (c_lo + c_hi) / 2.0
        } else {
            c * 10.0
        };
    }
    Ok(best.map_or(last, |(_, x_adv)| x_adv))
}

/// Carlini-Wagner L2 attack.
///
/// With `c = 0` the objective is pure distance, so the output stays at the
/// (tanh-space) starting point, i.e. essentially `x` itself.
pub fn cw_l2(
    model: &ModelParams,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    cfg.validate()?;
    let x_adv = cw_optimize(model, x, y, cfg, None)?;
    let mut rec = finish(model, x, x_adv, cfg)?;
    rec.attack = AttackName::CwL2;
    Ok(rec)
}

/// White-box CW variant: adds `embed_reg_weight * l_star` to the margin
/// loss, where `l_star` is the summed embedding distance from `x_adv` to
/// the rows of `helpful` (embeddings of the most helpful training points
/// for the clean prediction). With `embed_reg_weight = 0` this is `cw_l2`
/// on the identical code path, bit for bit.
pub fn cw_opt(
    model: &ModelParams,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
    helpful: ArrayView2<f64>,
) -> Result<AdversarialRecord> {
    cfg.validate()?;
    if helpful.nrows() == 0 {
        return Err(Error::Empty("helpful embeddings"));
    }
    if helpful.ncols() != model.embedding_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.embedding_dim(),
            got: helpful.ncols(),
        });
    }
    let reg = EmbedReg {
        helpful,
        weight: cfg.embed_reg_weight,
        norm: cfg.embed_norm,
    };
    let reg_opt = if cfg.embed_reg_weight > 0.0 {
        Some(&reg)
    } else {
        None
    };
    let x_adv = cw_optimize(model, x, y, cfg, reg_opt)?;
    let mut rec = finish(model, x, x_adv, cfg)?;
    rec.attack = AttackName::CwOpt;
    Ok(rec)
}

pub(crate) fn soft_threshold(u: f64, t: f64) -> f64 {
    sign_val(u) * (u.abs() - t).max(0.0)
}

/// Elastic-net attack: ISTA on `|delta|^2 + beta |delta|_1 + c * margin`.
/// Each iteration takes a gradient step on the smooth part, then shrinks
/// the perturbation toward zero by `beta * lr` per coordinate (exact zeros
/// for coordinates whose pre-proximal perturbation is below the threshold)
/// and projects onto the box. The binary search keeps the success with the
/// smallest elastic score `beta * l1 + l2^2`.
pub fn ead(
    model: &ModelParams,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    cfg.validate()?;
    let target = resolve_target(cfg, y, model.class_count())?;
    let x0 = x.to_owned();
    let mut c = cfg.c;
    let mut c_lo = 0.0f64;
    let mut c_hi = f64::INFINITY;
    let mut best: Option<(f64, Array1<f64>)> = None;
    let mut last = x0.clone();

    for _ in 0..cfg.binary_search_steps.max(1) {
        let mut z = x0.clone();
        let mut success_this_c = false;
        for _ in 0..cfg.opt_steps {
            let trace = model.forward(z.view())?;
            let pred = argmax(trace.logits.view());
            if is_success(pred, y, target) {
                success_this_c = true;
                let delta = &z - &x0;
                let elastic =
                    cfg.beta * delta.iter().map(|v| v.abs()).sum::<f64>() + delta.dot(&delta);
                if best.as_ref().map_or(true, |(b, _)| elastic < *b) {
                    best = Some((elastic, z.clone()));
                }
            }
            let mut g = (&z - &x0) * 2.0;
            g += &attack_loss_grad(model, &trace, y, target, cfg, c, None)?;
            let shrink = cfg.lr * cfg.beta;
            for i in 0..z.len() {
                let v = z[i] - cfg.lr * g[i];
                z[i] = (x0[i] + soft_threshold(v - x0[i], shrink)).clamp(0.0, 1.0);
            }
        }
        last = z;
        if success_this_c {
            c_hi = c;
        } else {
            c_lo = c;
        }
        c = if c_hi.is_finite() {
            (c_lo + c_hi) / 2.0
        } else {
            c * 10.0
        };
    }
    let x_adv = best.map_or(last, |(_, z)| z);
    let mut rec = finish(model, x, x_adv, cfg)?;
    rec.attack = AttackName::Ead;
    Ok(rec)
}

/// CW objective value at a candidate point: `|delta|^2 + c * margin`.
pub fn cw_objective(
    model: &ModelParams,
    x: ArrayView1<f64>,
    x_adv: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<f64> {
    let target = resolve_target(cfg, y, model.class_count())?;
    let logits = model.forward(x_adv)?.logits;
    let (margin, _) = margin_and_seed(&logits, y, target, cfg.kappa);
    let delta = &x_adv.to_owned() - &x;
    Ok(delta.dot(&delta) + cfg.c * margin)
}

/// EAD objective value: `|delta|^2 + beta |delta|_1 + c * margin`. With
/// `beta = 0` this coincides with [`cw_objective`] everywhere.
pub fn ead_objective(
    model: &ModelParams,
    x: ArrayView1<f64>,
    x_adv: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<f64> {
    let l1: f64 = x_adv
        .iter()
        .zip(x.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(cw_objective(model, x, x_adv, y, cfg)? + cfg.beta * l1)
}
