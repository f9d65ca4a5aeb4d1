//! The NNIF detector: logistic regression over rank/distance features.
//!
//! Normal examples are labeled 0 and adversarial examples 1. Feature
//! vectors flatten in a fixed (layer, kind, position) order with kinds
//! ordered R-up, D-up, R-down, D-down, optionally masked to a subset of
//! the four kinds. Columns are standardized with training statistics
//! (constant columns dropped), and the regularized logistic loss is
//! minimized by damped Newton iteration, so fits are deterministic.

use std::io::Write as IoWrite;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attacks::AttackName;
use crate::error::{Error, Result};
use crate::eval::metrics::roc_auc;
use crate::io_util::{check_magic, read_f64, read_u64, read_u8, write_f64, write_u64};
use crate::neighbors::NnifFeatureVector;

const MAGIC: &[u8; 8] = b"NNIFDET1";

/// The four feature kinds, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    RankUp,
    DistUp,
    RankDn,
    DistDn,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::RankUp,
        FeatureKind::DistUp,
        FeatureKind::RankDn,
        FeatureKind::DistDn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::RankUp => "Rup",
            FeatureKind::DistUp => "Dup",
            FeatureKind::RankDn => "Rdn",
            FeatureKind::DistDn => "Ddn",
        }
    }
}

/// Which of the four feature kinds participate, applied at every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub r_up: bool,
    pub d_up: bool,
    pub r_dn: bool,
    pub d_dn: bool,
}

impl FeatureMask {
    pub fn all() -> Self {
        Self {
            r_up: true,
            d_up: true,
            r_dn: true,
            d_dn: true,
        }
    }

    pub fn only(kind: FeatureKind) -> Self {
        let mut mask = Self {
            r_up: false,
            d_up: false,
            r_dn: false,
            d_dn: false,
        };
        match kind {
            FeatureKind::RankUp => mask.r_up = true,
            FeatureKind::DistUp => mask.d_up = true,
            FeatureKind::RankDn => mask.r_dn = true,
            FeatureKind::DistDn => mask.d_dn = true,
        }
        mask
    }

    /// Decodes bits 0..3 as R-up, D-up, R-down, D-down. Valid inputs are
    /// 1..=15; zero would select nothing.
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 15 {
            return Err(Error::InvalidParameter(format!(
                "feature mask bits must be in 1..=15, got {bits}"
            )));
        }
        Ok(Self {
            r_up: bits & 1 != 0,
            d_up: bits & 2 != 0,
            r_dn: bits & 4 != 0,
            d_dn: bits & 8 != 0,
        })
    }

    pub fn bits(self) -> u8 {
        self.r_up as u8 | (self.d_up as u8) << 1 | (self.r_dn as u8) << 2 | (self.d_dn as u8) << 3
    }

    pub fn is_active(self, kind: FeatureKind) -> bool {
        match kind {
            FeatureKind::RankUp => self.r_up,
            FeatureKind::DistUp => self.d_up,
            FeatureKind::RankDn => self.r_dn,
            FeatureKind::DistDn => self.d_dn,
        }
    }

    pub fn active_count(self) -> usize {
        FeatureKind::ALL
            .iter()
            .filter(|&&k| self.is_active(k))
            .count()
    }

    /// Human-readable name like `Rup+Ddn`.
    pub fn name(self) -> String {
        let parts: Vec<&str> = FeatureKind::ALL
            .iter()
            .filter(|&&k| self.is_active(k))
            .map(|&k| k.name())
            .collect();
        parts.join("+")
    }
}

/// Flattens one feature vector into a row: layers in stored order, active
/// kinds in fixed order within each layer, positions 0..m within each kind.
pub fn flatten_row(fv: &NnifFeatureVector, mask: FeatureMask, m: usize) -> Result<Vec<f64>> {
    if mask.active_count() == 0 {
        return Err(Error::MissingFeatures("empty feature mask".into()));
    }
    if fv.m()? < m {
        return Err(Error::MissingFeatures(format!(
            "vector stores M={}, detector needs M={m}",
            fv.m()?
        )));
    }
    let mut row = Vec::with_capacity(fv.layers.len() * mask.active_count() * m);
    for lf in &fv.layers {
        for kind in FeatureKind::ALL {
            if !mask.is_active(kind) {
                continue;
            }
            match kind {
                FeatureKind::RankUp => {
                    row.extend(lf.helpful_ranks[..m].iter().map(|&r| r as f64))
                }
                FeatureKind::DistUp => row.extend_from_slice(&lf.helpful_dists[..m]),
                FeatureKind::RankDn => {
                    row.extend(lf.harmful_ranks[..m].iter().map(|&r| r as f64))
                }
                FeatureKind::DistDn => row.extend_from_slice(&lf.harmful_dists[..m]),
            }
        }
    }
    Ok(row)
}

/// Stacks normal (label 0) and adversarial (label 1) feature vectors into
/// a design matrix, normals first. All vectors must agree on M and on the
/// layer id list.
pub fn build_matrix(
    normal: &[NnifFeatureVector],
    adv: &[NnifFeatureVector],
    mask: FeatureMask,
) -> Result<(Array2<f64>, Vec<u8>)> {
    if normal.is_empty() || adv.is_empty() {
        return Err(Error::Empty("feature vector list"));
    }
    let m = normal[0].m()?;
    let layer_ids = normal[0].layer_ids();
    for fv in normal.iter().chain(adv) {
        if fv.m()? != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: fv.m()?,
            });
        }
        if fv.layer_ids() != layer_ids {
            return Err(Error::InvalidParameter(
                "feature vectors disagree on layer ids".into(),
            ));
        }
    }
    let cols = layer_ids.len() * mask.active_count() * m;
    let n = normal.len() + adv.len();
    let mut x = Array2::zeros((n, cols));
    let mut y = Vec::with_capacity(n);
    for (i, fv) in normal.iter().chain(adv).enumerate() {
        let row = flatten_row(fv, mask, m)?;
        for (j, v) in row.into_iter().enumerate() {
            x[[i, j]] = v;
        }
        y.push(if i < normal.len() { 0 } else { 1 });
    }
    Ok((x, y))
}

/// Hyperparameters for the logistic-regression fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrHyper {
    /// L2 penalty on the weights (never the bias), as `0.5 * l2 * |w|^2`
    /// added to the summed log-loss.
    pub l2: f64,
    pub max_iter: usize,
    /// Gradient-norm stopping tolerance.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LrHyper {
    fn default() -> Self {
        Self {
            l2: 1.0,
            max_iter: 100,
            tol: 1e-8,
            seed: 0,
        }
    }
}

/// A fitted standardized logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LrFit {
    /// Indices of the retained (non-constant) columns of the input matrix.
    pub kept_cols: Vec<usize>,
    /// Training mean of each retained column.
    pub mean: Vec<f64>,
    /// Training standard deviation of each retained column, all > 0.
    pub std: Vec<f64>,
    /// One weight per retained column, in standardized units.
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Summed logistic loss plus the L2 penalty, computed stably.
fn lr_loss(z: &Array2<f64>, y: &[u8], w: &DVector<f64>, bias: f64, l2: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in z.outer_iter().enumerate() {
        let mut u = bias;
        for (j, v) in row.iter().enumerate() {
            u += w[j] * v;
        }
        // log(1 + e^u) - y u, without overflow for large |u|
        total += u.max(0.0) + (-u.abs()).exp().ln_1p() - y[i] as f64 * u;
    }
    total + 0.5 * l2 * w.dot(w)
}

/// Fits L2-regularized logistic regression by damped Newton iteration.
///
/// Columns are standardized to mean 0 / std 1 using statistics of `x`;
/// constant columns are dropped. The fit is deterministic: no sampling,
/// no randomized initialization.
pub fn fit_lr(x: ArrayView2<f64>, y: &[u8], hyper: &LrHyper) -> Result<LrFit> {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return Err(Error::Empty("design matrix"));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix"));
    }
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass);
    }
    if hyper.l2 < 0.0 || hyper.tol <= 0.0 || hyper.max_iter == 0 {
        return Err(Error::InvalidParameter(
            "lr hyperparameters must satisfy l2 >= 0, tol > 0, max_iter > 0".into(),
        ));
    }

    // column statistics; drop constant columns
    let nf = n as f64;
    let mut kept_cols = Vec::new();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mu = col.sum() / nf;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
        let sd = var.sqrt();
        if sd > 1e-12 {
            kept_cols.push(j);
            mean.push(mu);
            std.push(sd);
        }
    }
    if kept_cols.is_empty() {
        return Err(Error::MissingFeatures(
            "all feature columns are constant".into(),
        ));
    }
    let k = kept_cols.len();
    let mut z = Array2::zeros((n, k));
    for i in 0..n {
        for (jj, &j) in kept_cols.iter().enumerate() {
            z[[i, jj]] = (x[[i, j]] - mean[jj]) / std[jj];
        }
    }

    let mut w = DVector::zeros(k);
    let mut bias = 0.0;
    let mut loss = lr_loss(&z, y, &w, bias, hyper.l2);
    for _ in 0..hyper.max_iter {
        // gradient and Hessian of the summed loss at (w, bias)
        let mut grad = DVector::zeros(k + 1);
        let mut hess = DMatrix::zeros(k + 1, k + 1);
        for (i, row) in z.outer_iter().enumerate() {
            let mut u = bias;
            for (j, v) in row.iter().enumerate() {
                u += w[j] * v;
            }
            let p = sigmoid(u);
            let resid = p - y[i] as f64;
            let s = (p * (1.0 - p)).max(1e-12);
            for (j, vj) in row.iter().enumerate() {
                grad[j] += resid * vj;
                for (l, vl) in row.iter().enumerate().skip(j) {
                    hess[(j, l)] += s * vj * vl;
                }
                hess[(j, k)] += s * vj;
            }
            grad[k] += resid;
            hess[(k, k)] += s;
        }
        for j in 0..k {
            grad[j] += hyper.l2 * w[j];
            hess[(j, j)] += hyper.l2;
            for l in (j + 1)..=k {
                hess[(l, j)] = hess[(j, l)];
            }
        }
        if grad.norm() <= hyper.tol {
            break;
        }
        let step = hess
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::FactorizationFailed("newton system is singular".into()))?;
        // damp the step until the loss decreases
        let w_step = step.rows(0, k).into_owned();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let w_try = &w - &w_step * t;
            let b_try = bias - step[k] * t;
            let loss_try = lr_loss(&z, y, &w_try, b_try, hyper.l2);
            if loss_try < loss {
                w = w_try;
                bias = b_try;
                loss = loss_try;
                accepted = true;
                break;
            }
            t /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("logistic loss"));
    }
    Ok(LrFit {
        kept_cols,
        mean,
        std,
        weights: w.iter().copied().collect(),
        bias,
    })
}

impl LrFit {
    /// Linear decision value for a full (unmasked-length) feature row.
    pub fn decision(&self, row: &[f64]) -> Result<f64> {
        let mut u = self.bias;
        for (jj, &j) in self.kept_cols.iter().enumerate() {
            let v = row.get(j).ok_or(Error::IndexOutOfRange {
                index: j,
                len: row.len(),
            })?;
            u += self.weights[jj] * (v - self.mean[jj]) / self.std[jj];
        }
        Ok(u)
    }

    /// Probability of the adversarial class for a feature row.
    pub fn probability(&self, row: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.decision(row)?))
    }
}

/// A complete fitted detector: the logistic fit plus everything needed to
/// turn a feature vector into a scored row.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub mask: FeatureMask,
    pub m: usize,
    /// Layer ids the detector was trained on, in flattening order.
    pub layer_ids: Vec<usize>,
    pub fit: LrFit,
    /// Attack family the training features came from, if a single one.
    pub attack: Option<AttackName>,
    pub seed: u64,
    pub hyper: LrHyper,
}

/// Builds the matrix from normal/adversarial features and fits the
/// logistic regression, recording the mask, M, and layer ids so the model
/// can score raw feature vectors later.
pub fn fit_detector(
    normal: &[NnifFeatureVector],
    adv: &[NnifFeatureVector],
    mask: FeatureMask,
    hyper: &LrHyper,
    attack: Option<AttackName>,
) -> Result<DetectorModel> {
    let (x, y) = build_matrix(normal, adv, mask)?;
    let fit = fit_lr(x.view(), &y, hyper)?;
    Ok(DetectorModel {
        mask,
        m: normal[0].m()?,
        layer_ids: normal[0].layer_ids(),
        fit,
        attack,
        seed: hyper.seed,
        hyper: *hyper,
    })
}

impl DetectorModel {
    /// Scores one feature vector: probability in (0, 1) that it is
    /// adversarial. The vector may carry extra layers or a larger M than
    /// the detector was trained with; the needed subset is extracted.
    pub fn score(&self, fv: &NnifFeatureVector) -> Result<f64> {
        let sub = fv.layer_subset(&self.layer_ids)?;
        if sub.m()? < self.m {
            return Err(Error::MissingFeatures(format!(
                "vector stores M={}, detector needs M={}",
                sub.m()?,
                self.m
            )));
        }
        let row = flatten_row(&sub, self.mask, self.m)?;
        self.fit.probability(&row)
    }

    pub fn scores(&self, fvs: &[NnifFeatureVector]) -> Result<Vec<f64>> {
        fvs.iter().map(|fv| self.score(fv)).collect()
    }
}

/// Picks M from `candidates` by k-fold cross validation on the validation
/// features: for each fold, fit on the other folds and compute AUC on the
/// held-out fold; the M with the highest mean AUC wins, ties going to the
/// smaller M. Folds are assigned deterministically per class by index
/// modulo `folds`.
pub fn tune_m(
    normal: &[NnifFeatureVector],
    adv: &[NnifFeatureVector],
    candidates: &[usize],
    folds: usize,
    mask: FeatureMask,
    hyper: &LrHyper,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate M list"));
    }
    if folds < 2 {
        return Err(Error::InvalidParameter(
            "cross validation needs at least 2 folds".into(),
        ));
    }
    if normal.len() < folds || adv.len() < folds {
        return Err(Error::InvalidParameter(format!(
            "each class needs at least {folds} examples for {folds}-fold tuning"
        )));
    }
    if normal.is_empty() || adv.is_empty() {
        return Err(Error::Empty("feature vector list"));
    }
    let m_stored = normal[0].m()?.min(adv[0].m()?);

    let mut best: Option<(f64, usize)> = None;
    for &m in candidates {
        if m == 0 || m > m_stored {
            return Err(Error::InvalidParameter(format!(
                "candidate M={m} outside stored range 1..={m_stored}"
            )));
        }
        let norm_m: Vec<NnifFeatureVector> = normal
            .iter()
            .map(|fv| fv.truncated(m))
            .collect::<Result<_>>()?;
        let adv_m: Vec<NnifFeatureVector> = adv
            .iter()
            .map(|fv| fv.truncated(m))
            .collect::<Result<_>>()?;
        let mut auc_sum = 0.0;
        for fold in 0..folds {
            let part = |list: &[NnifFeatureVector]| {
                let mut train = Vec::new();
                let mut val = Vec::new();
                for (i, fv) in list.iter().enumerate() {
                    if i % folds == fold {
                        val.push(fv.clone());
                    } else {
                        train.push(fv.clone());
                    }
                }
                (train, val)
            };
            let (norm_tr, norm_va) = part(&norm_m);
            let (adv_tr, adv_va) = part(&adv_m);
            let det = fit_detector(&norm_tr, &adv_tr, mask, hyper, None)?;
            let mut scores = det.scores(&norm_va)?;
            scores.extend(det.scores(&adv_va)?);
            let mut labels = vec![0u8; norm_va.len()];
            labels.extend(std::iter::repeat(1u8).take(adv_va.len()));
            auc_sum += roc_auc(&scores, &labels)?;
        }
        let mean_auc = auc_sum / folds as f64;
        let better = match best {
            None => true,
            Some((b_auc, b_m)) => mean_auc > b_auc || (mean_auc == b_auc && m < b_m),
        };
        if better {
            best = Some((mean_auc, m));
        }
    }
    Ok(best.expect("candidates nonempty").1)
}

#[derive(Serialize)]
struct DetectorSidecar<'a> {
    mask: String,
    m: usize,
    layer_ids: &'a [usize],
    feature_count: usize,
    l2: f64,
    max_iter: usize,
    tol: f64,
    attack: Option<&'static str>,
    seed: u64,
}

/// Saves the detector as versioned binary plus a human-readable JSON
/// sidecar (same path with extension `json`).
pub fn save_detector(path: &Path, det: &DetectorModel) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[det.mask.bits()]).map_err(io)?;
    write_u64(&mut w, det.m as u64).map_err(io)?;
    write_u64(&mut w, det.layer_ids.len() as u64).map_err(io)?;
    for &l in &det.layer_ids {
        write_u64(&mut w, l as u64).map_err(io)?;
    }
    write_u64(&mut w, det.fit.kept_cols.len() as u64).map_err(io)?;
    for &c in &det.fit.kept_cols {
        write_u64(&mut w, c as u64).map_err(io)?;
    }
    for arr in [&det.fit.mean, &det.fit.std, &det.fit.weights] {
        for &v in arr.iter() {
            write_f64(&mut w, v).map_err(io)?;
        }
    }
    write_f64(&mut w, det.fit.bias).map_err(io)?;
    w.write_all(&[det.attack.map_or(u8::MAX, |a| a.to_byte())])
        .map_err(io)?;
    write_u64(&mut w, det.seed).map_err(io)?;
    write_f64(&mut w, det.hyper.l2).map_err(io)?;
    write_u64(&mut w, det.hyper.max_iter as u64).map_err(io)?;
    write_f64(&mut w, det.hyper.tol).map_err(io)?;
    w.flush().map_err(io)?;

    let sidecar = DetectorSidecar {
        mask: det.mask.name(),
        m: det.m,
        layer_ids: &det.layer_ids,
        feature_count: det.fit.kept_cols.len(),
        l2: det.hyper.l2,
        max_iter: det.hyper.max_iter,
        tol: det.hyper.tol,
        attack: det.attack.map(|a| a.as_str()),
        seed: det.seed,
    };
    let json_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    check_magic(&mut r, MAGIC, path)?;
    let io = |e| Error::io(path, e);
    let mask = FeatureMask::from_bits(read_u8(&mut r).map_err(io)?)?;
    let m = read_u64(&mut r).map_err(io)? as usize;
    let n_layers = read_u64(&mut r).map_err(io)? as usize;
    if n_layers > 1 << 20 {
        return Err(Error::format(path, "implausible layer count"));
    }
    let mut layer_ids = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layer_ids.push(read_u64(&mut r).map_err(io)? as usize);
    }
    let k = read_u64(&mut r).map_err(io)? as usize;
    if k > 1 << 24 {
        return Err(Error::format(path, "implausible feature count"));
    }
    let mut kept_cols = Vec::with_capacity(k);
    for _ in 0..k {
        kept_cols.push(read_u64(&mut r).map_err(io)? as usize);
    }
    let read_arr = |r: &mut std::io::BufReader<std::fs::File>| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            out.push(read_f64(r).map_err(io)?);
        }
        Ok(out)
    };
    let mean = read_arr(&mut r)?;
    let std = read_arr(&mut r)?;
    let weights = read_arr(&mut r)?;
    let bias = read_f64(&mut r).map_err(io)?;
    let attack_id = read_u8(&mut r).map_err(io)?;
    let attack = if attack_id == u8::MAX {
        None
    } else {
        Some(AttackName::from_byte(attack_id).ok_or_else(|| {
            Error::format(path, format!("unknown attack id {attack_id}"))
        })?)
    };
    let seed = read_u64(&mut r).map_err(io)?;
    let l2 = read_f64(&mut r).map_err(io)?;
    let max_iter = read_u64(&mut r).map_err(io)? as usize;
    let tol = read_f64(&mut r).map_err(io)?;
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::format(path, "non-positive feature std"));
    }
    Ok(DetectorModel {
        mask,
        m,
        layer_ids,
        fit: LrFit {
            kept_cols,
            mean,
            std,
            weights,
            bias,
        },
        attack,
        seed,
        hyper: LrHyper {
            l2,
            max_iter,
            tol,
            seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbors::LayerFeatures;
    use ndarray::array;

    fn fv(example_index: usize, label: u8, vals: [f64; 2]) -> NnifFeatureVector {
        NnifFeatureVector {
            example_index,
            label,
            layers: vec![LayerFeatures {
                layer: 0,
                helpful_ranks: vec![vals[0] as usize, vals[1] as usize],
                helpful_dists: vec![vals[0], vals[1]],
                harmful_ranks: vec![vals[1] as usize, vals[0] as usize],
                harmful_dists: vec![vals[1], vals[0]],
            }],
        }
    }

    #[test]
    fn mask_bits_round_trip_and_names() {
        for bits in 1..=15u8 {
            let mask = FeatureMask::from_bits(bits).unwrap();
            assert_eq!(mask.bits(), bits);
        }
        assert!(FeatureMask::from_bits(0).is_err());
        assert!(FeatureMask::from_bits(16).is_err());
        assert_eq!(FeatureMask::all().name(), "Rup+Dup+Rdn+Ddn");
        assert_eq!(FeatureMask::only(FeatureKind::DistUp).name(), "Dup");
        assert_eq!(FeatureMask::all().active_count(), 4);
    }

    #[test]
    fn single_kind_mask_yields_m_columns() {
        let normal = vec![fv(0, 0, [1.0, 2.0]), fv(1, 0, [2.0, 3.0])];
        let adv = vec![fv(2, 1, [8.0, 9.0]), fv(3, 1, [9.0, 7.0])];
        let (x, y) = build_matrix(&normal, &adv, FeatureMask::only(FeatureKind::DistUp)).unwrap();
        assert_eq!(x.shape(), &[4, 2]);
        assert_eq!(y, vec![0, 0, 1, 1]);
        assert_eq!(x.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(x.row(2).to_vec(), vec![8.0, 9.0]);
    }

    #[test]
    fn flatten_order_is_layer_then_kind_then_position() {
        let mut v = fv(0, 0, [1.0, 2.0]);
        v.layers.push(LayerFeatures {
            layer: 1,
            helpful_ranks: vec![10, 11],
            helpful_dists: vec![0.1, 0.2],
            harmful_ranks: vec![20, 21],
            harmful_dists: vec![0.3, 0.4],
        });
        let row = flatten_row(&v, FeatureMask::all(), 2).unwrap();
        assert_eq!(
            row,
            vec![
                1.0, 2.0, 1.0, 2.0, 2.0, 1.0, 2.0, 1.0, // layer 0: Rup Dup Rdn Ddn
                10.0, 11.0, 0.1, 0.2, 20.0, 21.0, 0.3, 0.4, // layer 1
            ]
        );
    }

    #[test]
    fn swapping_lists_flips_labels() {
        let a = vec![fv(0, 0, [1.0, 2.0]), fv(1, 0, [1.5, 2.0])];
        let b = vec![fv(2, 1, [8.0, 9.0]), fv(3, 1, [8.5, 9.0])];
        let (x1, y1) = build_matrix(&a, &b, FeatureMask::all()).unwrap();
        let (x2, y2) = build_matrix(&b, &a, FeatureMask::all()).unwrap();
        assert_eq!(y1, vec![0, 0, 1, 1]);
        assert_eq!(y2, vec![0, 0, 1, 1]);
        assert_eq!(x1.row(0), x2.row(2));
        assert_eq!(x1.row(2), x2.row(0));
    }

    #[test]
    fn separable_feature_reaches_training_auc_one() {
        let normal: Vec<_> = (0..6).map(|i| fv(i, 0, [i as f64 * 0.1, 0.5])).collect();
        let adv: Vec<_> = (0..6)
            .map(|i| fv(6 + i, 1, [5.0 + i as f64 * 0.1, 0.5]))
            .collect();
        let det = fit_detector(&normal, &adv, FeatureMask::all(), &LrHyper::default(), None)
            .unwrap();
        let mut scores = det.scores(&normal).unwrap();
        scores.extend(det.scores(&adv).unwrap());
        let labels: Vec<u8> = (0..12).map(|i| (i >= 6) as u8).collect();
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
        for s in scores {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            fit_lr(x.view(), &[1, 1], &LrHyper::default()),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn standardization_uses_training_statistics() {
        let x = array![[10.0, 1.0], [20.0, 1.0], [30.0, 1.0], [40.0, 1.0]];
        let y = [0, 0, 1, 1];
        let fit = fit_lr(x.view(), &y, &LrHyper::default()).unwrap();
        // constant second column dropped
        assert_eq!(fit.kept_cols, vec![0]);
        assert!((fit.mean[0] - 25.0).abs() < 1e-12);
        let expect_std = (125.0f64).sqrt();
        assert!((fit.std[0] - expect_std).abs() < 1e-12);
        // standardized column has mean 0 / std 1 by construction
        let z: Vec<f64> = (0..4).map(|i| (x[[i, 0]] - fit.mean[0]) / fit.std[0]).collect();
        let mu = z.iter().sum::<f64>() / 4.0;
        let var = z.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
        assert!(mu.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn newton_matches_gradient_descent_oracle() {
        // small 2-D problem, solved independently by plain gradient
        // descent on the same standardized objective
        let x = array![
            [0.2, 1.1],
            [0.4, 0.9],
            [0.3, 1.4],
            [0.9, 0.3],
            [1.1, 0.5],
            [0.8, 0.1],
            [0.35, 1.0],
            [1.0, 0.45],
        ];
        let y = [0u8, 0, 0, 1, 1, 1, 0, 1];
        let hyper = LrHyper {
            l2: 0.5,
            ..LrHyper::default()
        };
        let fit = fit_lr(x.view(), &y, &hyper).unwrap();

        // oracle: standardize the same way, then run long GD
        let n = 8.0;
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for j in 0..2 {
            mean[j] = (0..8).map(|i| x[[i, j]]).sum::<f64>() / n;
            std[j] = ((0..8).map(|i| (x[[i, j]] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
        }
        let mut w = [0.0f64; 2];
        let mut b = 0.0f64;
        for _ in 0..400_000 {
            let mut gw = [hyper.l2 * w[0], hyper.l2 * w[1]];
            let mut gb = 0.0;
            for i in 0..8 {
                let z0 = (x[[i, 0]] - mean[0]) / std[0];
                let z1 = (x[[i, 1]] - mean[1]) / std[1];
                let u = w[0] * z0 + w[1] * z1 + b;
                let p = 1.0 / (1.0 + (-u).exp());
                let r = p - y[i] as f64;
                gw[0] += r * z0;
                gw[1] += r * z1;
                gb += r;
            }
            w[0] -= 0.05 * gw[0];
            w[1] -= 0.05 * gw[1];
            b -= 0.05 * gb;
        }
        assert!((fit.weights[0] - w[0]).abs() < 1e-4, "{} vs {}", fit.weights[0], w[0]);
        assert!((fit.weights[1] - w[1]).abs() < 1e-4);
        assert!((fit.bias - b).abs() < 1e-4);
    }

    #[test]
    fn fit_is_deterministic() {
        let normal: Vec<_> = (0..8).map(|i| fv(i, 0, [i as f64, 0.3 * i as f64])).collect();
        let adv: Vec<_> = (0..8)
            .map(|i| fv(8 + i, 1, [3.0 + i as f64, 1.0 + 0.2 * i as f64]))
            .collect();
        let h = LrHyper::default();
        let a = fit_detector(&normal, &adv, FeatureMask::all(), &h, None).unwrap();
        let b = fit_detector(&normal, &adv, FeatureMask::all(), &h, None).unwrap();
        assert_eq!(a.fit, b.fit);
    }

    #[test]
    fn zero_weight_fit_scores_half() {
        let det = DetectorModel {
            mask: FeatureMask::all(),
            m: 2,
            layer_ids: vec![0],
            fit: LrFit {
                kept_cols: vec![0, 1],
                mean: vec![0.0, 0.0],
                std: vec![1.0, 1.0],
                weights: vec![0.0, 0.0],
                bias: 0.0,
            },
            attack: None,
            seed: 0,
            hyper: LrHyper::default(),
        };
        let s = det.score(&fv(0, 0, [3.0, 4.0])).unwrap();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn score_is_monotone_in_a_positive_weight_feature() {
        let det = DetectorModel {
            mask: FeatureMask::only(FeatureKind::DistUp),
            m: 2,
            layer_ids: vec![0],
            fit: LrFit {
                kept_cols: vec![0],
                mean: vec![0.0],
                std: vec![1.0],
                weights: vec![2.0],
                bias: 0.0,
            },
            attack: None,
            seed: 0,
            hyper: LrHyper::default(),
        };
        let lo = det.score(&fv(0, 0, [1.0, 0.0])).unwrap();
        let hi = det.score(&fv(0, 0, [2.0, 0.0])).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn all_fifteen_masks_fit_without_error() {
        let normal: Vec<_> = (0..6).map(|i| fv(i, 0, [i as f64, 1.0 + i as f64])).collect();
        let adv: Vec<_> = (0..6)
            .map(|i| fv(6 + i, 1, [4.0 + i as f64, 5.0 + i as f64]))
            .collect();
        for bits in 1..=15u8 {
            let mask = FeatureMask::from_bits(bits).unwrap();
            let det = fit_detector(&normal, &adv, mask, &LrHyper::default(), None);
            assert!(det.is_ok(), "mask {} failed", mask.name());
        }
    }

    #[test]
    fn tune_m_prefers_the_separating_candidate() {
        // position 0 is noise, position 1 separates: M=2 must win
        let noise = [0.41, 0.52, 0.39, 0.6, 0.45, 0.55, 0.48, 0.5];
        let mk = |i: usize, label: u8, sep: f64| NnifFeatureVector {
            example_index: i,
            label,
            layers: vec![LayerFeatures {
                layer: 0,
                helpful_ranks: vec![0, 0],
                helpful_dists: vec![noise[i % 8], sep],
                harmful_ranks: vec![0, 0],
                harmful_dists: vec![noise[(i + 3) % 8], sep],
            }],
        };
        let normal: Vec<_> = (0..8).map(|i| mk(i, 0, 0.1 + 0.01 * i as f64)).collect();
        let adv: Vec<_> = (0..8).map(|i| mk(8 + i, 1, 0.9 + 0.01 * i as f64)).collect();
        let mask = FeatureMask::only(FeatureKind::DistUp);
        let chosen = tune_m(&normal, &adv, &[1, 2], 2, mask, &LrHyper::default()).unwrap();
        assert_eq!(chosen, 2);
    }

    #[test]
    fn tune_m_breaks_ties_toward_smaller() {
        // position 0 already separates perfectly, so every M ties at AUC 1
        let normal: Vec<_> = (0..6).map(|i| fv(i, 0, [0.1 + 0.01 * i as f64, 0.2])).collect();
        let adv: Vec<_> = (0..6)
            .map(|i| fv(6 + i, 1, [0.9 + 0.01 * i as f64, 1.2]))
            .collect();
        let chosen = tune_m(
            &normal,
            &adv,
            &[2, 1],
            2,
            FeatureMask::all(),
            &LrHyper::default(),
        )
        .unwrap();
        assert_eq!(chosen, 1);
        let single = tune_m(
            &normal,
            &adv,
            &[2],
            2,
            FeatureMask::all(),
            &LrHyper::default(),
        )
        .unwrap();
        assert_eq!(single, 2);
    }

    #[test]
    fn tune_m_rejects_small_classes() {
        let normal: Vec<_> = (0..2).map(|i| fv(i, 0, [0.1, 0.2])).collect();
        let adv: Vec<_> = (0..2).map(|i| fv(2 + i, 1, [0.9, 1.2])).collect();
        assert!(tune_m(
            &normal,
            &adv,
            &[1],
            3,
            FeatureMask::all(),
            &LrHyper::default()
        )
        .is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let normal: Vec<_> = (0..6).map(|i| fv(i, 0, [i as f64, 0.5])).collect();
        let adv: Vec<_> = (0..6).map(|i| fv(6 + i, 1, [4.0 + i as f64, 0.5])).collect();
        let det = fit_detector(
            &normal,
            &adv,
            FeatureMask::from_bits(3).unwrap(),
            &LrHyper::default(),
            Some(AttackName::Fgsm),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detector.bin");
        save_detector(&path, &det).unwrap();
        let loaded = load_detector(&path).unwrap();
        assert_eq!(det, loaded);
        let sidecar = std::fs::read_to_string(dir.path().join("detector.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(parsed["mask"], "Rup+Dup");
        assert_eq!(parsed["attack"], "fgsm");
    }

    #[test]
    fn load_rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"WRONGMAG rest").unwrap();
        assert!(matches!(load_detector(&path), Err(Error::Format { .. })));
    }
}
