//! Loss-gradient sign attacks under an L-inf budget.

use ndarray::{Array1, ArrayView1};
use rand::Rng;

use super::{clip_box, finish, sign_val, AdversarialRecord, AttackConfig};
use crate::error::Result;
use crate::model::ModelParams;
use crate::rng::rng_from;

/// Fast gradient sign: one step of size epsilon along the sign of the loss
/// gradient, clipped to the unit box. Zero gradient components stay put.
pub fn fgsm(
    model: &ModelParams,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    cfg.validate()?;
    let g = model.grad_input(x, y)?;
    let mut x_adv = x.to_owned();
    for i in 0..x_adv.len() {
        x_adv[i] += cfg.epsilon * sign_val(g[i]);
    }
    clip_box(&mut x_adv);
    finish(model, x, x_adv, cfg)
}

/// Projected gradient descent: `steps` sign steps of `step_size`, after each
/// one projecting onto the epsilon-ball around `x` and then the unit box.
/// With `random_start` the iterate begins at a uniform point of the ball.
///
/// One step with `step_size == epsilon` and no random start reproduces
/// [`fgsm`] bit for bit: the step lands exactly on the ball surface, so the
/// projection passes it through unchanged.
pub fn pgd(
    model: &ModelParams,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    cfg.validate()?;
    let mut cur = x.to_owned();
    if cfg.random_start {
        let mut rng = rng_from(cfg.seed);
        for i in 0..cur.len() {
            cur[i] += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(&mut cur, x, cfg.epsilon);
    }
    for _ in 0..cfg.steps {
        let g = model.grad_input(cur.view(), y)?;
        for i in 0..cur.len() {
            cur[i] += cfg.step_size * sign_val(g[i]);
        }
        project(&mut cur, x, cfg.epsilon);
    }
    finish(model, x, cur, cfg)
}

/// Clamp into the epsilon-ball around `x`, then into the unit box.
fn project(cur: &mut Array1<f64>, x: ArrayView1<f64>, epsilon: f64) {
    for i in 0..cur.len() {
        cur[i] = cur[i]
            .clamp(x[i] - epsilon, x[i] + epsilon)
            .clamp(0.0, 1.0);
    }
}
