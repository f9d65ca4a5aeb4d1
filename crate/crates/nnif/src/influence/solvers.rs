//! Inverse-Hessian-vector product solvers.
//!
//! All three routes solve `(H + damping*I) s = v` for a Hessian that is only
//! available through matrix-vector products:
//!
//! * [`inverse_hvp_exact`]: materializes the damped Hessian column by column
//!   and runs a dense LU solve. Only for parameter counts up to
//!   [`DENSE_SOLVE_CAP`]; the factorization can be reused across many
//!   right-hand sides via [`DenseHessianSolver`].
//! * [`inverse_hvp_lissa`]: stochastic Neumann-series recursion
//!   `s_{j+1} = v + (I - (H + damping*I)/scale) s_j` on minibatch Hessian
//!   estimates, averaged over independent repeats, final answer `s/scale`.
//!   Converges when `scale` exceeds half the largest damped eigenvalue.
//! * [`inverse_hvp_cg`]: conjugate gradient on the damped operator; requires
//!   positive curvature, which the damping term supplies near a minimum.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::{derive_seed, rng_from};

/// Largest parameter count the dense route will materialize.
pub const DENSE_SOLVE_CAP: usize = 2000;

/// Iterates whose norm exceeds this multiple of `|v|` count as divergence.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// A loss Hessian available only through products.
///
/// `apply_full` is the mean over all examples, `apply_minibatch` the mean
/// over an index subset. Neither includes damping; the solvers add it.
pub trait HvpOperator: Sync {
    /// Parameter vector length.
    fn dim(&self) -> usize;
    /// Number of examples behind the mean.
    fn n_examples(&self) -> usize;
    fn apply_full(&self, v: ArrayView1<f64>) -> Result<Array1<f64>>;
    fn apply_minibatch(&self, indices: &[usize], v: ArrayView1<f64>) -> Result<Array1<f64>>;
}

/// The training-loss Hessian of a classifier: mean cross-entropy Hessian
/// over `(xs, ys)` plus an analytic `weight_decay * I` term.
pub struct ModelHvp<'a> {
    model: &'a ModelParams,
    xs: ArrayView2<'a, f64>,
    ys: &'a [usize],
    weight_decay: f64,
}

impl<'a> ModelHvp<'a> {
    pub fn new(
        model: &'a ModelParams,
        xs: ArrayView2<'a, f64>,
        ys: &'a [usize],
        weight_decay: f64,
    ) -> Result<Self> {
        if xs.nrows() == 0 {
            return Err(Error::Empty("hvp example set"));
        }
        if xs.nrows() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: xs.nrows(),
                got: ys.len(),
            });
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight_decay {weight_decay}"
            )));
        }
        Ok(ModelHvp {
            model,
            xs,
            ys,
            weight_decay,
        })
    }
}

impl HvpOperator for ModelHvp<'_> {
    fn dim(&self) -> usize {
        self.model.param_count()
    }

    fn n_examples(&self) -> usize {
        self.xs.nrows()
    }

    fn apply_full(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut hv = self.model.hvp(self.xs, self.ys, v)?;
        if self.weight_decay > 0.0 {
            hv += &(&v * self.weight_decay);
        }
        Ok(hv)
    }

    fn apply_minibatch(&self, indices: &[usize], v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if indices.is_empty() {
            return Err(Error::Empty("hvp minibatch"));
        }
        let mut acc = Array1::zeros(self.dim());
        for &i in indices {
            if i >= self.xs.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.xs.nrows(),
                });
            }
            acc += &self.model.hvp_single(self.xs.row(i), self.ys[i], v)?;
        }
        acc /= indices.len() as f64;
        if self.weight_decay > 0.0 {
            acc += &(&v * self.weight_decay);
        }
        Ok(acc)
    }
}

/// A fixed symmetric matrix exposed through the operator interface. Lets
/// synthetic quadratic losses (`L = 1/2 s^T A s`) exercise the same solver
/// code paths the model Hessian uses.
pub struct MatrixOperator {
    matrix: Array2<f64>,
}

impl MatrixOperator {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        Ok(MatrixOperator { matrix })
    }
}

impl HvpOperator for MatrixOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn n_examples(&self) -> usize {
        1
    }

    fn apply_full(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self.matrix.dot(&v))
    }

    fn apply_minibatch(&self, _indices: &[usize], v: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.apply_full(v)
    }
}

/// Which route [`inverse_hvp`] takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseHvpMethod {
    Exact,
    Lissa,
    Cg,
}

/// Solver settings; `validate` rejects the nonsensical corners.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InverseHvpConfig {
    pub method: InverseHvpMethod,
    pub damping: f64,
    pub lissa_depth: usize,
    pub lissa_scale: f64,
    pub lissa_repeats: usize,
    pub lissa_batch: usize,
    pub cg_max_iter: usize,
    pub cg_tol: f64,
    pub seed: u64,
}

impl Default for InverseHvpConfig {
    fn default() -> Self {
        InverseHvpConfig {
            method: InverseHvpMethod::Exact,
            damping: 0.01,
            lissa_depth: 200,
            lissa_scale: 25.0,
            lissa_repeats: 4,
            lissa_batch: 16,
            cg_max_iter: 200,
            cg_tol: 1e-8,
            seed: 0,
        }
    }
}

impl InverseHvpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "damping {} must be positive",
                self.damping
            )));
        }
        if !(self.lissa_scale > 0.0 && self.lissa_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lissa_scale {} must be positive",
                self.lissa_scale
            )));
        }
        if self.lissa_repeats == 0 {
            return Err(Error::InvalidParameter("lissa_repeats 0".into()));
        }
        if self.lissa_batch == 0 {
            return Err(Error::InvalidParameter("lissa_batch 0".into()));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol.is_finite()) {
            return Err(Error::InvalidParameter(format!("cg_tol {}", self.cg_tol)));
        }
        Ok(())
    }
}

/// Dense damped Hessian with a reusable LU factorization. Building it costs
/// `dim` operator applications plus one factorization; each extra
/// right-hand side after that is a cheap triangular solve, which is what
/// makes scoring thousands of test points against one model affordable.
pub struct DenseHessianSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    dim: usize,
}

impl DenseHessianSolver {
    pub fn new(op: &dyn HvpOperator, damping: f64) -> Result<Self> {
        let p = op.dim();
        if p > DENSE_SOLVE_CAP {
            return Err(Error::ParamCountOverCap {
                p,
                cap: DENSE_SOLVE_CAP,
            });
        }
        if !(damping > 0.0 && damping.is_finite()) {
            return Err(Error::InvalidParameter(format!("damping {damping}")));
        }
        let mut dense = nalgebra::DMatrix::<f64>::zeros(p, p);
        let mut basis = Array1::zeros(p);
        for j in 0..p {
            basis[j] = 1.0;
            let col = op.apply_full(basis.view())?;
            basis[j] = 0.0;
            for i in 0..p {
                dense[(i, j)] = col[i];
            }
            dense[(j, j)] += damping;
        }
        if dense.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense Hessian"));
        }
        let lu = dense.lu();
        Ok(DenseHessianSolver { lu, dim: p })
    }

    pub fn solve(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        let rhs = nalgebra::DVector::from_iterator(self.dim, v.iter().copied());
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::FactorizationFailed("damped Hessian is singular".into()))?;
        Ok(Array1::from_iter(sol.iter().copied()))
    }
}

/// One-shot dense solve of `(H + damping*I) s = v`.
pub fn inverse_hvp_exact(
    op: &dyn HvpOperator,
    v: ArrayView1<f64>,
    damping: f64,
) -> Result<Array1<f64>> {
    DenseHessianSolver::new(op, damping)?.solve(v)
}

/// Stochastic Neumann-series estimate of `(H + damping*I)^{-1} v`.
pub fn inverse_hvp_lissa(
    op: &dyn HvpOperator,
    v: ArrayView1<f64>,
    cfg: &InverseHvpConfig,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    if v.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: v.len(),
        });
    }
    let v_owned = v.to_owned();
    let v_norm = v.dot(&v).sqrt();
    let n = op.n_examples();
    let batch = cfg.lissa_batch.min(n);
    let mut acc = Array1::zeros(op.dim());
    for repeat in 0..cfg.lissa_repeats {
        let mut rng = rng_from(derive_seed(cfg.seed, repeat as u64));
        let mut s = v.to_owned();
        for step in 0..cfg.lissa_depth {
            let indices: Vec<usize> = sample(&mut rng, n, batch).into_vec();
            let mut hs = op.apply_minibatch(&indices, s.view())?;
            hs += &(&s * cfg.damping);
            // s <- v + (I - (H + damping I)/scale) s
            s = &v_owned + &s - hs / cfg.lissa_scale;
            let s_norm = s.dot(&s).sqrt();
            if !s_norm.is_finite() || s_norm > DIVERGENCE_FACTOR * v_norm {
                return Err(Error::SolverDiverged(format!(
                    "lissa iterate norm {s_norm:.3e} at depth {step} (|v| = {v_norm:.3e}); \
                     raise lissa_scale or damping"
                )));
            }
        }
        acc += &(s / cfg.lissa_scale);
    }
    Ok(acc / cfg.lissa_repeats as f64)
}

/// Conjugate-gradient solve of `(H + damping*I) s = v`, stopping when the
/// residual falls below `cg_tol * |v|` or `cg_max_iter` is hit.
pub fn inverse_hvp_cg(
    op: &dyn HvpOperator,
    v: ArrayView1<f64>,
    cfg: &InverseHvpConfig,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    if v.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: v.len(),
        });
    }
    let v_norm = v.dot(&v).sqrt();
    if v_norm == 0.0 {
        return Ok(Array1::zeros(op.dim()));
    }
    let mut x = Array1::<f64>::zeros(op.dim());
    let mut r = v.to_owned();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    for _ in 0..cfg.cg_max_iter {
        if rs.sqrt() <= cfg.cg_tol * v_norm {
            break;
        }
        let mut ap = op.apply_full(p.view())?;
        ap += &(&p * cfg.damping);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            return Err(Error::SolverDiverged(format!(
                "cg hit non-positive curvature {curvature:.3e}; raise damping"
            )));
        }
        let alpha = rs / curvature;
        x += &(&p * alpha);
        r -= &(ap * alpha);
        let rs_new = r.dot(&r);
        if !rs_new.is_finite() || rs_new.sqrt() > DIVERGENCE_FACTOR * v_norm {
            return Err(Error::SolverDiverged(format!(
                "cg residual norm {:.3e}",
                rs_new.sqrt()
            )));
        }
        p = &r + &(p * (rs_new / rs));
        rs = rs_new;
    }
    Ok(x)
}

/// Dispatches on `cfg.method`.
pub fn inverse_hvp(
    op: &dyn HvpOperator,
    v: ArrayView1<f64>,
    cfg: &InverseHvpConfig,
) -> Result<Array1<f64>> {
    match cfg.method {
        InverseHvpMethod::Exact => inverse_hvp_exact(op, v, cfg.damping),
        InverseHvpMethod::Lissa => inverse_hvp_lissa(op, v, cfg),
        InverseHvpMethod::Cg => inverse_hvp_cg(op, v, cfg),
    }
}
