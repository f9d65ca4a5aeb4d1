//! Influence of training points on a test prediction.
//!
//! The influence of upweighting training example `z` on the loss at `z_test`
//! is `-grad L(z_test)^T H^{-1} grad L(z)`, with `H` the damped mean Hessian
//! of the training loss. Positive influence marks a *helpful* point (it
//! lowered the test loss), negative a *harmful* one. Per test point the `M`
//! most helpful and `M` most harmful training indices feed the
//! nearest-neighbor feature extraction.
//!
//! [`InfluenceEngine`] amortizes everything that does not depend on the test
//! point: per-example training gradients and, for the exact method, one LU
//! factorization of the damped Hessian reused across all right-hand sides.

mod solvers;

pub use solvers::{
    inverse_hvp, inverse_hvp_cg, inverse_hvp_exact, inverse_hvp_lissa, DenseHessianSolver,
    HvpOperator, InverseHvpConfig, InverseHvpMethod, MatrixOperator, ModelHvp, DENSE_SOLVE_CAP,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io_util::{check_magic, read_f64, read_u32, write_f64, write_u32};
use crate::model::ModelParams;
use crate::rng::rng_from;

const MAGIC: &[u8; 8] = b"NNIFINF1";

/// Scores and selections for one test point. `scores[i]` belongs to subset
/// position `i`; `helpful`/`harmful` hold subset positions, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceResult {
    pub test_index: usize,
    pub scores: Vec<f64>,
    pub helpful: Vec<usize>,
    pub harmful: Vec<usize>,
}

/// The `m` most helpful (largest score, descending) and most harmful
/// (smallest score, ascending) positions; ties go to the lower index.
/// `invert_sign` swaps the two roles for models trained with the opposite
/// sign convention.
pub fn top_influence(
    scores: &[f64],
    m: usize,
    invert_sign: bool,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if m > scores.len() {
        return Err(Error::InvalidParameter(format!(
            "m {m} exceeds score count {}",
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("influence scores"));
    }
    let n = scores.len();
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let (helpful, harmful) = if invert_sign { (asc, desc) } else { (desc, asc) };
    Ok((helpful[..m].to_vec(), harmful[..m].to_vec()))
}

/// Draws `count` distinct indices from `0..n` and returns them sorted
/// ascending, so positional tie-breaks coincide with original-index
/// tie-breaks.
pub fn subsample_train(n: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 || count > n {
        return Err(Error::InvalidParameter(format!(
            "subsample count {count} for {n} examples"
        )));
    }
    let mut rng = rng_from(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Number of examples a fractional subsample keeps: `round(frac * n)`,
/// clamped to `1..=n`.
pub fn subsample_count(n: usize, frac: f64) -> Result<usize> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subsample fraction {frac} outside (0, 1]"
        )));
    }
    Ok(((frac * n as f64).round() as usize).clamp(1, n))
}

/// Precomputed machinery for scoring many test points against one model and
/// training subset.
pub struct InfluenceEngine<'a> {
    model: &'a ModelParams,
    subset: Vec<usize>,
    sub_x: Array2<f64>,
    sub_y: Vec<usize>,
    grads: Array2<f64>,
    weight_decay: f64,
    cfg: InverseHvpConfig,
    dense: Option<DenseHessianSolver>,
}

impl<'a> InfluenceEngine<'a> {
    /// Gathers the subset, stacks its per-example loss gradients, and for
    /// the exact method assembles and factorizes the damped Hessian once.
    pub fn new(
        model: &'a ModelParams,
        train_x: ArrayView2<f64>,
        train_y: &[usize],
        subset: &[usize],
        weight_decay: f64,
        cfg: InverseHvpConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if subset.is_empty() {
            return Err(Error::Empty("influence subset"));
        }
        if train_x.nrows() != train_y.len() {
            return Err(Error::DimensionMismatch {
                expected: train_x.nrows(),
                got: train_y.len(),
            });
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight_decay {weight_decay}"
            )));
        }
        let mut sub_x = Array2::zeros((subset.len(), train_x.ncols()));
        let mut sub_y = Vec::with_capacity(subset.len());
        for (r, &i) in subset.iter().enumerate() {
            if i >= train_x.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: train_x.nrows(),
                });
            }
            sub_x.row_mut(r).assign(&train_x.row(i));
            sub_y.push(train_y[i]);
        }
        let p = model.param_count();
        let grad_rows: Vec<Array1<f64>> = (0..subset.len())
            .into_par_iter()
            .map(|r| model.grad_params(sub_x.row(r), sub_y[r]))
            .collect::<Result<_>>()?;
        let mut grads = Array2::zeros((subset.len(), p));
        for (r, g) in grad_rows.into_iter().enumerate() {
            grads.row_mut(r).assign(&g);
        }
        let dense = if cfg.method == InverseHvpMethod::Exact {
            let op = ModelHvp::new(model, sub_x.view(), &sub_y, weight_decay)?;
            Some(DenseHessianSolver::new(&op, cfg.damping)?)
        } else {
            None
        };
        Ok(InfluenceEngine {
            model,
            subset: subset.to_vec(),
            sub_x,
            sub_y,
            grads,
            weight_decay,
            cfg,
        dense,
        })
    }

    /// Original training indices behind the subset, in row order.
    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    /// `(H + damping I)^{-1} v` by the engine's configured method.
    pub fn solve(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        match &self.dense {
            Some(solver) => solver.solve(v),
            None => {
                let op = ModelHvp::new(self.model, self.sub_x.view(), &self.sub_y, self.weight_decay)?;
                inverse_hvp(&op, v, &self.cfg)
            }
        }
    }

    /// Influence scores of every subset point on the loss at `(x, y)`,
    /// aligned with [`InfluenceEngine::subset`].
    pub fn scores(&self, x: ArrayView1<f64>, y: usize) -> Result<Vec<f64>> {
        let g_test = self.model.grad_params(x, y)?;
        let s = self.solve(g_test.view())?;
        let raw = self.grads.dot(&s);
        Ok(raw.iter().map(|v| -v).collect())
    }

    /// Scores plus top-`m` helpful/harmful selections for one test point.
    pub fn result_for(
        &self,
        test_index: usize,
        x: ArrayView1<f64>,
        y: usize,
        m: usize,
        invert_sign: bool,
    ) -> Result<InfluenceResult> {
        let scores = self.scores(x, y)?;
        let (helpful, harmful) = top_influence(&scores, m, invert_sign)?;
        Ok(InfluenceResult {
            test_index,
            scores,
            helpful,
            harmful,
        })
    }
}

/// One-shot convenience wrapper: influence of every `subset` member on the
/// test loss at `(test_x, test_y)`.
#[allow(clippy::too_many_arguments)]
pub fn influence_scores(
    model: &ModelParams,
    train_x: ArrayView2<f64>,
    train_y: &[usize],
    subset: &[usize],
    weight_decay: f64,
    cfg: &InverseHvpConfig,
    test_x: ArrayView1<f64>,
    test_y: usize,
) -> Result<Vec<f64>> {
    let engine = InfluenceEngine::new(model, train_x, train_y, subset, weight_decay, cfg.clone())?;
    engine.scores(test_x, test_y)
}

/// A group of influence results sharing one training subset and selection
/// size, as persisted between pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceCache {
    /// Original training indices, ascending, shared by all results.
    pub subset: Vec<usize>,
    /// Selection size the helpful/harmful lists were cut at.
    pub m: usize,
    pub results: Vec<InfluenceResult>,
}

/// Writes the binary influence cache: magic `NNIFINF1`, subset, then per
/// result the test index, full score vector and both selections.
pub fn save_influence(cache: &InfluenceCache, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    write_u32(&mut w, cache.subset.len() as u32).map_err(io)?;
    write_u32(&mut w, cache.m as u32).map_err(io)?;
    write_u32(&mut w, cache.results.len() as u32).map_err(io)?;
    for &i in &cache.subset {
        write_u32(&mut w, i as u32).map_err(io)?;
    }
    for res in &cache.results {
        if res.scores.len() != cache.subset.len()
            || res.helpful.len() != cache.m
            || res.harmful.len() != cache.m
        {
            return Err(Error::DimensionMismatch {
                expected: cache.subset.len(),
                got: res.scores.len(),
            });
        }
        write_u32(&mut w, res.test_index as u32).map_err(io)?;
        for &s in &res.scores {
            write_f64(&mut w, s).map_err(io)?;
        }
        for &h in &res.helpful {
            write_u32(&mut w, h as u32).map_err(io)?;
        }
        for &h in &res.harmful {
            write_u32(&mut w, h as u32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the binary influence cache back.
pub fn load_influence(path: &Path) -> Result<InfluenceCache> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, MAGIC, path)?;
    let io = |e| Error::io(path, e);
    let subset_len = read_u32(&mut r).map_err(io)? as usize;
    let m = read_u32(&mut r).map_err(io)? as usize;
    let n_results = read_u32(&mut r).map_err(io)? as usize;
    if m > subset_len {
        return Err(Error::format(path, format!("m {m} > subset {subset_len}")));
    }
    let mut subset = Vec::with_capacity(subset_len);
    for _ in 0..subset_len {
        subset.push(read_u32(&mut r).map_err(io)? as usize);
    }
    let mut results = Vec::with_capacity(n_results);
    for _ in 0..n_results {
        let test_index = read_u32(&mut r).map_err(io)? as usize;
        let mut scores = Vec::with_capacity(subset_len);
        for _ in 0..subset_len {
            scores.push(read_f64(&mut r).map_err(io)?);
        }
        let mut helpful = Vec::with_capacity(m);
        for _ in 0..m {
            let h = read_u32(&mut r).map_err(io)? as usize;
            if h >= subset_len {
                return Err(Error::format(path, format!("selection {h} out of range")));
            }
            helpful.push(h);
        }
        let mut harmful = Vec::with_capacity(m);
        for _ in 0..m {
            let h = read_u32(&mut r).map_err(io)? as usize;
            if h >= subset_len {
                return Err(Error::format(path, format!("selection {h} out of range")));
            }
            harmful.push(h);
        }
        results.push(InfluenceResult {
            test_index,
            scores,
            helpful,
            harmful,
        });
    }
    Ok(InfluenceCache { subset, m, results })
}

/// CSV export: `test_index,train_index,score,rank` where rank 0 is the most
/// helpful subset point for that test index (ties to the lower index).
pub fn write_influence_csv(cache: &InfluenceCache, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "test_index,train_index,score,rank").map_err(io)?;
    for res in &cache.results {
        let n = res.scores.len();
        let mut desc: Vec<usize> = (0..n).collect();
        desc.sort_by(|&a, &b| res.scores[b].total_cmp(&res.scores[a]).then(a.cmp(&b)));
        let mut rank = vec![0usize; n];
        for (k, &pos) in desc.iter().enumerate() {
            rank[pos] = k;
        }
        for j in 0..n {
            writeln!(
                w,
                "{},{},{},{}",
                res.test_index, cache.subset[j], res.scores[j], rank[j]
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
