//! Adversarial example generation.
//!
//! Six attack families plus the feature-space white-box variant:
//!
//! * [`fgsm`] / [`pgd`]: loss-gradient sign steps under an L-inf budget.
//! * [`jsma`]: targeted saliency-pair attack with an L0 feature budget.
//! * [`deepfool`]: iterative linearization toward the nearest class boundary.
//! * [`cw_l2`] / [`ead`]: margin-loss optimizers, L2 via a tanh change of
//!   variables, elastic-net via ISTA shrinkage.
//! * [`cw_opt`]: `cw_l2` plus a feature-space penalty pulling the embedding
//!   toward the most helpful training points, to stress the detector.
//!
//! Every attack returns an [`AdversarialRecord`] whose `x_adv` lies in the
//! unit box; `success` means the prediction changed (or hit the target for
//! targeted runs). Identical `(model, x, config)` always produce identical
//! records.

mod carlini;
mod deepfool;
mod gradient_sign;
mod jsma;

pub use carlini::{cw_l2, cw_objective, cw_opt, ead, ead_objective, embed_penalty};
pub use deepfool::deepfool;
pub use gradient_sign::{fgsm, pgd};
pub use jsma::jsma;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io_util::{
    check_magic, read_f64, read_str, read_u32, read_u8, write_f64, write_str, write_u32,
};
use crate::model::ModelParams;
use crate::rng::derive_seed;

const MAGIC: &[u8; 8] = b"NNIFADV1";

/// Which attack produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    Fgsm,
    Pgd,
    Jsma,
    Deepfool,
    CwL2,
    Ead,
    CwOpt,
}

impl AttackName {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackName::Fgsm => "fgsm",
            AttackName::Pgd => "pgd",
            AttackName::Jsma => "jsma",
            AttackName::Deepfool => "deepfool",
            AttackName::CwL2 => "cw_l2",
            AttackName::Ead => "ead",
            AttackName::CwOpt => "cw_opt",
        }
    }

    pub fn parse(s: &str) -> Result<AttackName> {
        Ok(match s {
            "fgsm" => AttackName::Fgsm,
            "pgd" => AttackName::Pgd,
            "jsma" => AttackName::Jsma,
            "deepfool" => AttackName::Deepfool,
            "cw_l2" => AttackName::CwL2,
            "ead" => AttackName::Ead,
            "cw_opt" => AttackName::CwOpt,
            other => return Err(Error::InvalidParameter(format!("unknown attack {other}"))),
        })
    }

    /// Stable on-disk id for the attack.
    pub fn to_byte(self) -> u8 {
        match self {
            AttackName::Fgsm => 0,
            AttackName::Pgd => 1,
            AttackName::Jsma => 2,
            AttackName::Deepfool => 3,
            AttackName::CwL2 => 4,
            AttackName::Ead => 5,
            AttackName::CwOpt => 6,
        }
    }

    /// Inverse of [`AttackName::to_byte`].
    pub fn from_byte(b: u8) -> Option<AttackName> {
        Some(match b {
            0 => AttackName::Fgsm,
            1 => AttackName::Pgd,
            2 => AttackName::Jsma,
            3 => AttackName::Deepfool,
            4 => AttackName::CwL2,
            5 => AttackName::Ead,
            6 => AttackName::CwOpt,
            _ => return None,
        })
    }
}

/// Distance the feature-space penalty measures embeddings with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedNorm {
    L1,
    L2,
}

/// Every attack knob in one bag; each attack reads the fields it owns and
/// ignores the rest, so one config can be snapshotted per run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub attack: AttackName,
    /// L-inf budget (fgsm, pgd).
    pub epsilon: f64,
    /// Per-iteration step (pgd).
    pub step_size: f64,
    /// Iteration count (pgd).
    pub steps: usize,
    /// Start pgd from a uniform point inside the budget ball.
    pub random_start: bool,
    /// Linearization / saliency iteration cap (deepfool, jsma).
    pub max_iter: usize,
    /// Boundary overshoot eta (deepfool).
    pub overshoot: f64,
    /// Margin-loss trade-off, the binary search's starting point (cw family).
    pub c: f64,
    /// Confidence margin kappa (cw family).
    pub kappa: f64,
    /// Optimizer step size (cw family).
    pub lr: f64,
    /// Optimizer iterations per binary-search step (cw family).
    pub opt_steps: usize,
    /// Binary-search steps over `c`; 0 behaves as 1 (cw family).
    pub binary_search_steps: usize,
    /// L1 shrinkage weight (ead).
    pub beta: f64,
    /// Per-feature change magnitude (jsma).
    pub theta_pix: f64,
    /// Fraction of features jsma may touch.
    pub gamma: f64,
    pub targeted: bool,
    /// Explicit target; `None` means `(y + 1) mod K` where a target is
    /// required.
    pub target_class: Option<usize>,
    /// Weight on the feature-space penalty; 0 turns cw_opt into cw_l2.
    pub embed_reg_weight: f64,
    pub embed_norm: EmbedNorm,
    /// Per-example randomness (pgd random starts).
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            attack: AttackName::Fgsm,
            epsilon: 0.1,
            step_size: 0.01,
            steps: 40,
            random_start: false,
            max_iter: 50,
            overshoot: 0.02,
            c: 1.0,
            kappa: 0.0,
            lr: 0.1,
            opt_steps: 200,
            binary_search_steps: 9,
            beta: 1e-3,
            theta_pix: 0.2,
            gamma: 1.0,
            targeted: false,
            target_class: None,
            embed_reg_weight: 1.0,
            embed_norm: EmbedNorm::L1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn named(attack: AttackName) -> Self {
        AttackConfig {
            attack,
            ..AttackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = [
            ("epsilon", self.epsilon),
            ("step_size", self.step_size),
            ("overshoot", self.overshoot),
            ("c", self.c),
            ("kappa", self.kappa),
            ("beta", self.beta),
            ("embed_reg_weight", self.embed_reg_weight),
        ];
        for (name, v) in finite_nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr {}", self.lr)));
        }
        if !(self.theta_pix > 0.0 && self.theta_pix <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "theta_pix {}",
                self.theta_pix
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma {}", self.gamma)));
        }
        Ok(())
    }
}

/// One attacked example: the perturbed input plus its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialRecord {
    /// Dataset index of the clean original. Filled in by [`attack_batch`];
    /// direct attack calls leave it 0.
    pub original_index: usize,
    pub attack: AttackName,
    pub x_adv: Array1<f64>,
    pub pred_before: usize,
    pub pred_after: usize,
    pub success: bool,
    /// Count of coordinates that changed at all.
    pub l0: usize,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

/// Sign with the zero case mapped to zero (`f64::signum` maps it to 1).
pub(crate) fn sign_val(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn clip_box(x: &mut Array1<f64>) {
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Builds the record for a finished attack: predictions on both points,
/// success flag, perturbation norms. The perturbed point must already be in
/// the unit box (a tiny numerical overshoot is clamped away).
pub(crate) fn finish(
    model: &ModelParams,
    x: ArrayView1<f64>,
    mut x_adv: Array1<f64>,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    if x_adv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adversarial point"));
    }
    debug_assert!(
        x_adv.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)),
        "attack left the unit box"
    );
    clip_box(&mut x_adv);
    let pred_before = model.predict(x)?;
    let pred_after = model.predict(x_adv.view())?;
    let success = match (cfg.targeted, cfg.target_class) {
        (true, Some(t)) => pred_after == t && t != pred_before,
        _ => pred_after != pred_before,
    };
    let delta = &x_adv - &x;
    let l0 = delta.iter().filter(|&&d| d != 0.0).count();
    let l1 = delta.iter().map(|d| d.abs()).sum();
    let l2 = delta.dot(&delta).sqrt();
    let linf = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    Ok(AdversarialRecord {
        original_index: 0,
        attack: cfg.attack,
        x_adv,
        pred_before,
        pred_after,
        success,
        l0,
        l1,
        l2,
        linf,
    })
}

/// Dispatches one example to the configured attack. `cw_opt` is excluded:
/// it needs helpful-point embeddings, so call [`cw_opt`] directly.
pub fn run_attack(
    model: &ModelParams,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialRecord> {
    match cfg.attack {
        AttackName::Fgsm => fgsm(model, x, y, cfg),
        AttackName::Pgd => pgd(model, x, y, cfg),
        AttackName::Jsma => jsma(model, x, y, cfg),
        AttackName::Deepfool => deepfool(model, x, y, cfg),
        AttackName::CwL2 => cw_l2(model, x, y, cfg),
        AttackName::Ead => ead(model, x, y, cfg),
        AttackName::CwOpt => Err(Error::InvalidParameter(
            "cw_opt needs helpful-point embeddings; call attacks::cw_opt directly".into(),
        )),
    }
}

/// Attacks a batch of rows in parallel. `indices[i]` is the dataset index
/// of row `i`; it lands in the record and seeds that example's private
/// random stream, so results do not depend on thread scheduling.
pub fn attack_batch(
    model: &ModelParams,
    xs: ArrayView2<f64>,
    ys: &[usize],
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialRecord>> {
    if xs.nrows() != ys.len() || xs.nrows() != indices.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.nrows(),
            got: ys.len().min(indices.len()),
        });
    }
    cfg.validate()?;
    let records: Vec<AdversarialRecord> = (0..xs.nrows())
        .into_par_iter()
        .map(|i| {
            let mut local = cfg.clone();
            local.seed = derive_seed(cfg.seed, indices[i] as u64);
            let mut rec = run_attack(model, xs.row(i), ys[i], &local)?;
            rec.original_index = indices[i];
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    Ok(records)
}

/// Fraction of records whose attack succeeded.
pub fn success_rate(records: &[AdversarialRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("attack records"));
    }
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

/// Writes attack records: magic `NNIFADV1`, input dim, the shared config as
/// a TOML snapshot, then per record the bookkeeping and the perturbed point.
pub fn save_records(records: &[AdversarialRecord], cfg: &AttackConfig, path: &Path) -> Result<()> {
    let dim = match records.first() {
        Some(r) => r.x_adv.len(),
        None => 0,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    write_u32(&mut w, dim as u32).map_err(io)?;
    let cfg_toml = toml::to_string(cfg)
        .map_err(|e| Error::format(path, format!("config serialization: {e}")))?;
    write_str(&mut w, &cfg_toml).map_err(io)?;
    write_u32(&mut w, records.len() as u32).map_err(io)?;
    for r in records {
        if r.x_adv.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.x_adv.len(),
            });
        }
        write_u32(&mut w, r.original_index as u32).map_err(io)?;
        w.write_all(&[r.attack.to_byte(), r.success as u8]).map_err(io)?;
        write_u32(&mut w, r.pred_before as u32).map_err(io)?;
        write_u32(&mut w, r.pred_after as u32).map_err(io)?;
        write_u32(&mut w, r.l0 as u32).map_err(io)?;
        write_f64(&mut w, r.l1).map_err(io)?;
        write_f64(&mut w, r.l2).map_err(io)?;
        write_f64(&mut w, r.linf).map_err(io)?;
        for &v in r.x_adv.iter() {
            write_f64(&mut w, v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads attack records plus the config snapshot they were made with.
pub fn load_records(path: &Path) -> Result<(Vec<AdversarialRecord>, AttackConfig)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, MAGIC, path)?;
    let io = |e| Error::io(path, e);
    let dim = read_u32(&mut r).map_err(io)? as usize;
    let cfg_toml = read_str(&mut r, path)?;
    let cfg: AttackConfig = toml::from_str(&cfg_toml)
        .map_err(|e| Error::format(path, format!("config snapshot: {e}")))?;
    let n = read_u32(&mut r).map_err(io)? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let original_index = read_u32(&mut r).map_err(io)? as usize;
        let attack_byte = read_u8(&mut r).map_err(io)?;
        let attack = AttackName::from_byte(attack_byte)
            .ok_or_else(|| Error::format(path, format!("attack tag {attack_byte}")))?;
        let success = read_u8(&mut r).map_err(io)? != 0;
        let pred_before = read_u32(&mut r).map_err(io)? as usize;
        let pred_after = read_u32(&mut r).map_err(io)? as usize;
        let l0 = read_u32(&mut r).map_err(io)? as usize;
        let l1 = read_f64(&mut r).map_err(io)?;
        let l2 = read_f64(&mut r).map_err(io)?;
        let linf = read_f64(&mut r).map_err(io)?;
        let mut x_adv = Array1::zeros(dim);
        for j in 0..dim {
            x_adv[j] = read_f64(&mut r).map_err(io)?;
        }
        records.push(AdversarialRecord {
            original_index,
            attack,
            x_adv,
            pred_before,
            pred_after,
            success,
            l0,
            l1,
            l2,
            linf,
        });
    }
    Ok((records, cfg))
}

/// CSV export of the bookkeeping columns (the perturbed points stay in the
/// binary file): `original_index,attack,success,pred_before,pred_after,l0,l1,l2,linf`.
pub fn write_records_csv(records: &[AdversarialRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "original_index,attack,success,pred_before,pred_after,l0,l1,l2,linf"
    )
    .map_err(io)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.original_index,
            r.attack.as_str(),
            r.success as u8,
            r.pred_before,
            r.pred_after,
            r.l0,
            r.l1,
            r.l2,
            r.linf
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Jacobian of the logits with respect to the input: one backprop per class.
pub(crate) fn logit_jacobian(
    model: &ModelParams,
    trace: &crate::model::ActivationTrace,
) -> Result<Array2<f64>> {
    let k = model.class_count();
    let d = model.input_dim();
    let mut jac = Array2::zeros((k, d));
    let mut seed = Array1::zeros(k);
    for c in 0..k {
        seed[c] = 1.0;
        let g = model.backprop_from_logits(trace, seed.view())?.input;
        jac.row_mut(c).assign(&g);
        seed[c] = 0.0;
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use ndarray::array;

    #[test]
    fn sign_val_handles_zero() {
        assert_eq!(sign_val(3.5), 1.0);
        assert_eq!(sign_val(-0.1), -1.0);
        assert_eq!(sign_val(0.0), 0.0);
        assert_eq!(sign_val(-0.0), 0.0);
    }

    #[test]
    fn attack_name_round_trips() {
        for name in [
            AttackName::Fgsm,
            AttackName::Pgd,
            AttackName::Jsma,
            AttackName::Deepfool,
            AttackName::CwL2,
            AttackName::Ead,
            AttackName::CwOpt,
        ] {
            assert_eq!(AttackName::parse(name.as_str()).unwrap(), name);
            assert_eq!(AttackName::from_byte(name.to_byte()).unwrap(), name);
        }
        assert!(AttackName::parse("bim").is_err());
    }

    #[test]
    fn config_validation_catches_bad_budgets() {
        let mut cfg = AttackConfig::default();
        cfg.epsilon = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = AttackConfig::default();
        cfg.gamma = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AttackConfig::default();
        cfg.theta_pix = 0.0;
        assert!(cfg.validate().is_err());
        assert!(AttackConfig::default().validate().is_ok());
    }

    #[test]
    fn finish_computes_norms() {
        let model = init_model(&[3, 4, 2], 5).unwrap();
        let x = array![0.5, 0.5, 0.5];
        let x_adv = array![0.6, 0.5, 0.3];
        let rec = finish(&model, x.view(), x_adv, &AttackConfig::default()).unwrap();
        assert_eq!(rec.l0, 2);
        assert!((rec.l1 - 0.30000000000000004).abs() < 1e-15);
        assert!((rec.l2 - (0.01f64 + 0.04).sqrt()).abs() < 1e-12);
        assert!((rec.linf - 0.2).abs() < 1e-12);
    }

    #[test]
    fn success_rate_errors_on_empty() {
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adv.bin");
        let cfg = AttackConfig::named(AttackName::Pgd);
        let records = vec![
            AdversarialRecord {
                original_index: 3,
                attack: AttackName::Pgd,
                x_adv: array![0.1, 0.9],
                pred_before: 0,
                pred_after: 1,
                success: true,
                l0: 2,
                l1: 0.3,
                l2: 0.25,
                linf: 0.2,
            },
            AdversarialRecord {
                original_index: 9,
                attack: AttackName::Pgd,
                x_adv: array![0.4, 0.6],
                pred_before: 1,
                pred_after: 1,
                success: false,
                l0: 0,
                l1: 0.0,
                l2: 0.0,
                linf: 0.0,
            },
        ];
        save_records(&records, &cfg, &path).unwrap();
        let (back, back_cfg) = load_records(&path).unwrap();
        assert_eq!(back, records);
        assert_eq!(back_cfg, cfg);
    }

    #[test]
    fn records_csv_header_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adv.csv");
        write_records_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim_end(),
            "original_index,attack,success,pred_before,pred_after,l0,l1,l2,linf"
        );
    }

    #[test]
    fn logit_jacobian_matches_finite_differences() {
        let model = init_model(&[3, 5, 4], 2).unwrap();
        let x = array![0.3, 0.7, 0.5];
        let trace = model.forward(x.view()).unwrap();
        let jac = logit_jacobian(&model, &trace).unwrap();
        let h = 1e-6;
        for c in 0..4 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let fd = (model.forward(xp.view()).unwrap().logits[c]
                    - model.forward(xm.view()).unwrap().logits[c])
                    / (2.0 * h);
                assert!((jac[[c, j]] - fd).abs() < 1e-5, "class {c} dim {j}");
            }
        }
    }
}
