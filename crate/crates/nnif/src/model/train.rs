//! Minibatch SGD with classical momentum and L2 weight decay.

use ndarray::{Array1, ArrayView2};
use rand::seq::SliceRandom;

use super::{argmax, ModelParams};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
            weight_decay: 4e-4,
            seed: 0,
        }
    }
}

/// Fraction of examples whose predicted class equals the label.
pub fn accuracy(model: &ModelParams, xs: ArrayView2<f64>, ys: &[usize]) -> Result<f64> {
    if xs.nrows() == 0 {
        return Err(Error::Empty("accuracy set"));
    }
    if xs.nrows() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.nrows(),
            got: ys.len(),
        });
    }
    let mut hits = 0usize;
    for (row, &y) in xs.outer_iter().zip(ys) {
        if argmax(model.forward(row)?.logits.view()) == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / ys.len() as f64)
}

/// Trains a copy of `model` and returns the checkpoint with the best
/// validation accuracy (earliest epoch on ties). Without a validation set
/// the final epoch's parameters are returned.
///
/// The objective is mean cross-entropy plus `weight_decay/2 * |theta|^2`;
/// the decay term enters the gradient as `weight_decay * theta`. Example
/// order is reshuffled every epoch from a single seeded generator, so a
/// given `(model, data, config)` always produces the same checkpoint.
pub fn train(
    model: &ModelParams,
    train_x: ArrayView2<f64>,
    train_y: &[usize],
    val: Option<(ArrayView2<f64>, &[usize])>,
    cfg: &TrainConfig,
) -> Result<ModelParams> {
    if train_x.nrows() == 0 {
        return Err(Error::Empty("training set"));
    }
    if train_x.nrows() != train_y.len() {
        return Err(Error::DimensionMismatch {
            expected: train_x.nrows(),
            got: train_y.len(),
        });
    }
    if train_x.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: train_x.ncols(),
        });
    }
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return Err(Error::InvalidParameter(format!("lr {}", cfg.lr)));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidParameter(format!(
            "momentum {} outside [0, 1)",
            cfg.momentum
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size 0".into()));
    }
    for &y in train_y {
        if y >= model.class_count() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: model.class_count(),
            });
        }
    }

    let mut current = model.clone();
    let mut theta = current.flatten();
    let mut velocity: Array1<f64> = Array1::zeros(theta.len());
    let mut rng = rng_from(cfg.seed);
    let mut order: Vec<usize> = (0..train_x.nrows()).collect();

    let mut best: Option<(f64, ModelParams)> = None;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad: Array1<f64> = Array1::zeros(theta.len());
            for &i in chunk {
                grad += &current.grad_params(train_x.row(i), train_y[i])?;
            }
            grad /= chunk.len() as f64;
            grad += &(&theta * cfg.weight_decay);
            velocity = &velocity * cfg.momentum + &grad;
            theta -= &(&velocity * cfg.lr);
            current.set_from_flat(theta.view())?;
        }
        if let Some((vx, vy)) = val {
            let acc = accuracy(&current, vx, vy)?;
            let better = match &best {
                Some((best_acc, _)) => acc > *best_acc,
                None => true,
            };
            if better {
                best = Some((acc, current.clone()));
            }
        }
    }
    match best {
        Some((_, checkpoint)) => Ok(checkpoint),
        None => Ok(current),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use ndarray::{array, Array2};

    fn tiny_two_blob() -> (Array2<f64>, Vec<usize>) {
        // two well-separated clusters in 2-D
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut rng = rng_from(42);
        use rand::Rng;
        for i in 0..60 {
            let c = i % 2;
            let cx = if c == 0 { 0.2 } else { 0.8 };
            rows.push([
                cx + rng.gen_range(-0.05..0.05),
                cx + rng.gen_range(-0.05..0.05),
            ]);
            ys.push(c);
        }
        let xs = Array2::from_shape_fn((60, 2), |(i, j)| rows[i][j]);
        (xs, ys)
    }

    #[test]
    fn zero_lr_returns_input_params() {
        let (xs, ys) = tiny_two_blob();
        let m = init_model(&[2, 4, 2], 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let out = train(&m, xs.view(), &ys, None, &cfg).unwrap();
        assert_eq!(out.flatten(), m.flatten());
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = tiny_two_blob();
        let m = init_model(&[2, 4, 2], 3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train(&m, xs.view(), &ys, None, &cfg).unwrap();
        let b = train(&m, xs.view(), &ys, None, &cfg).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let (xs, ys) = tiny_two_blob();
        let m = init_model(&[2, 8, 2], 1).unwrap();
        let mean_loss = |model: &crate::model::ModelParams| {
            let mut s = 0.0;
            for (row, &y) in xs.outer_iter().zip(&ys) {
                s += model.loss(row, y).unwrap();
            }
            s / ys.len() as f64
        };
        let before = mean_loss(&m);
        let cfg = TrainConfig {
            epochs: 20,
            lr: 0.1,
            ..TrainConfig::default()
        };
        let trained = train(&m, xs.view(), &ys, None, &cfg).unwrap();
        let after = mean_loss(&trained);
        assert!(after < before, "loss {before} -> {after}");
        assert!(accuracy(&trained, xs.view(), &ys).unwrap() > 0.95);
    }

    #[test]
    fn best_checkpoint_prefers_earliest_on_ties() {
        // lr 0 makes every epoch's checkpoint identical, so the tie rule
        // must hand back the epoch-1 weights, which equal the input.
        let (xs, ys) = tiny_two_blob();
        let m = init_model(&[2, 4, 2], 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 4,
            ..TrainConfig::default()
        };
        let out = train(&m, xs.view(), &ys, Some((xs.view(), &ys)), &cfg).unwrap();
        assert_eq!(out.flatten(), m.flatten());
    }

    #[test]
    fn rejects_label_out_of_range() {
        let (xs, _) = tiny_two_blob();
        let ys = vec![5usize; xs.nrows()];
        let m = init_model(&[2, 4, 2], 3).unwrap();
        let res = train(&m, xs.view(), &ys, None, &TrainConfig::default());
        assert!(matches!(res, Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn accuracy_ties_break_to_lowest_class() {
        // zero weights -> all logits equal -> argmax 0 everywhere
        let m = {
            let mut m = init_model(&[2, 2], 0).unwrap();
            let zeros = Array1::zeros(m.param_count());
            m.set_from_flat(zeros.view()).unwrap();
            m
        };
        let xs = array![[0.1, 0.9], [0.8, 0.3]];
        assert_eq!(accuracy(&m, xs.view(), &[0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&m, xs.view(), &[1, 1]).unwrap(), 0.0);
    }
}
