//! The four experiment drivers: detection, feature ablation, cross-attack
//! generalization, and the white-box counter-attack evaluation.
//!
//! Drivers operate on precomputed feature sets (one per attack). The
//! protocol is always the same: the detector is fit on validation-set
//! features and judged on test-set features, with M chosen by cross
//! validation on the validation features only. Everything downstream of
//! the features is deterministic, so identical inputs give identical rows.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackName;
use crate::detector::{fit_detector, tune_m, DetectorModel, FeatureKind, FeatureMask, LrHyper};
use crate::error::{Error, Result};
use crate::eval::metrics::{detection_accuracy, roc_auc};
use crate::neighbors::NnifFeatureVector;

/// Which layers the detector consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Only the embedding layer (input to the final linear layer).
    Embedding,
    /// Every layer the feature stage extracted, concatenated.
    All,
}

impl LayerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerMode::Embedding => "embedding",
            LayerMode::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(LayerMode::Embedding),
            "all" => Ok(LayerMode::All),
            other => Err(Error::InvalidParameter(format!(
                "layer mode must be `embedding` or `all`, got `{other}`"
            ))),
        }
    }
}

/// All features the pipeline extracted for one attack: normal and
/// adversarial vectors for the validation split (detector training) and
/// the test split (detector evaluation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub attack: AttackName,
    pub val_normal: Vec<NnifFeatureVector>,
    pub val_adv: Vec<NnifFeatureVector>,
    pub test_normal: Vec<NnifFeatureVector>,
    pub test_adv: Vec<NnifFeatureVector>,
}

impl FeatureSet {
    pub fn validate(&self) -> Result<()> {
        for list in [
            &self.val_normal,
            &self.val_adv,
            &self.test_normal,
            &self.test_adv,
        ] {
            if list.is_empty() {
                return Err(Error::Empty("feature set split"));
            }
        }
        let m = self.val_normal[0].m()?;
        let layers = self.val_normal[0].layer_ids();
        for fv in self.all_vectors() {
            if fv.m()? != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: fv.m()?,
                });
            }
            if fv.layer_ids() != layers {
                return Err(Error::InvalidParameter(
                    "feature set mixes layer id lists".into(),
                ));
            }
        }
        Ok(())
    }

    fn all_vectors(&self) -> impl Iterator<Item = &NnifFeatureVector> {
        self.val_normal
            .iter()
            .chain(&self.val_adv)
            .chain(&self.test_normal)
            .chain(&self.test_adv)
    }

    /// M the features were stored at.
    pub fn m_stored(&self) -> Result<usize> {
        self.val_normal
            .first()
            .ok_or(Error::Empty("feature set split"))?
            .m()
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.val_normal
            .first()
            .map(|fv| fv.layer_ids())
            .unwrap_or_default()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: FeatureSet =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

/// Shared knobs for the experiment drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSettings {
    /// Candidate Ms for cross-validated tuning.
    pub m_grid: Vec<usize>,
    /// Cross-validation folds for tuning.
    pub folds: usize,
    pub hyper: LrHyper,
    /// Layer id of the embedding layer in the stored features.
    pub embedding_layer: usize,
}

impl DetectionSettings {
    pub fn validate(&self) -> Result<()> {
        if self.m_grid.is_empty() {
            return Err(Error::Empty("M grid"));
        }
        if self.folds < 2 {
            return Err(Error::InvalidParameter(
                "tuning needs at least 2 folds".into(),
            ));
        }
        Ok(())
    }
}

fn subset_for_mode(
    list: &[NnifFeatureVector],
    mode: LayerMode,
    embedding_layer: usize,
) -> Result<Vec<NnifFeatureVector>> {
    match mode {
        LayerMode::All => Ok(list.to_vec()),
        LayerMode::Embedding => list
            .iter()
            .map(|fv| fv.layer_subset(&[embedding_layer]))
            .collect(),
    }
}

fn truncate_all(list: &[NnifFeatureVector], m: usize) -> Result<Vec<NnifFeatureVector>> {
    list.iter().map(|fv| fv.truncated(m)).collect()
}

/// Tunes M on the validation features and fits the final detector at the
/// chosen M.
fn tune_and_fit(
    val_normal: &[NnifFeatureVector],
    val_adv: &[NnifFeatureVector],
    mask: FeatureMask,
    settings: &DetectionSettings,
    attack: Option<AttackName>,
) -> Result<(DetectorModel, usize)> {
    let m = tune_m(
        val_normal,
        val_adv,
        &settings.m_grid,
        settings.folds,
        mask,
        &settings.hyper,
    )?;
    let det = fit_detector(
        &truncate_all(val_normal, m)?,
        &truncate_all(val_adv, m)?,
        mask,
        &settings.hyper,
        attack,
    )?;
    Ok((det, m))
}

/// Scores test normals (label 0) then test adversarials (label 1).
fn score_split(
    det: &DetectorModel,
    normal: &[NnifFeatureVector],
    adv: &[NnifFeatureVector],
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = det.scores(normal)?;
    scores.extend(det.scores(adv)?);
    let mut labels = vec![0u8; normal.len()];
    labels.extend(std::iter::repeat(1u8).take(adv.len()));
    Ok((scores, labels))
}

/// One row of the detection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub attack: AttackName,
    pub mode: LayerMode,
    pub m: usize,
    pub auc: f64,
    pub accuracy: f64,
}

/// Per-attack detection power in both layer modes: fit on validation
/// features, tuned M, judged by AUC and accuracy on test features.
pub fn run_detection(
    sets: &[FeatureSet],
    settings: &DetectionSettings,
) -> Result<Vec<DetectionRow>> {
    settings.validate()?;
    if sets.is_empty() {
        return Err(Error::Empty("feature set list"));
    }
    let mut rows = Vec::new();
    for set in sets {
        set.validate()?;
        for mode in [LayerMode::Embedding, LayerMode::All] {
            let vn = subset_for_mode(&set.val_normal, mode, settings.embedding_layer)?;
            let va = subset_for_mode(&set.val_adv, mode, settings.embedding_layer)?;
            let tn = subset_for_mode(&set.test_normal, mode, settings.embedding_layer)?;
            let ta = subset_for_mode(&set.test_adv, mode, settings.embedding_layer)?;
            let (det, m) =
                tune_and_fit(&vn, &va, FeatureMask::all(), settings, Some(set.attack))?;
            let (scores, labels) = score_split(&det, &tn, &ta)?;
            rows.push(DetectionRow {
                attack: set.attack,
                mode,
                m,
                auc: roc_auc(&scores, &labels)?,
                accuracy: detection_accuracy(&scores, &labels, 0.5)?,
            });
        }
    }
    Ok(rows)
}

/// Scores of the tuned embedding-mode detector on the test split, for ROC
/// curve emission.
pub fn detection_scores(
    set: &FeatureSet,
    settings: &DetectionSettings,
) -> Result<(Vec<f64>, Vec<u8>)> {
    settings.validate()?;
    set.validate()?;
    let vn = subset_for_mode(&set.val_normal, LayerMode::Embedding, settings.embedding_layer)?;
    let va = subset_for_mode(&set.val_adv, LayerMode::Embedding, settings.embedding_layer)?;
    let tn = subset_for_mode(&set.test_normal, LayerMode::Embedding, settings.embedding_layer)?;
    let ta = subset_for_mode(&set.test_adv, LayerMode::Embedding, settings.embedding_layer)?;
    let (det, _) = tune_and_fit(&vn, &va, FeatureMask::all(), settings, Some(set.attack))?;
    score_split(&det, &tn, &ta)
}

/// One row of the 15-row ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Mask name like `Rup+Dup`.
    pub mask: String,
    pub bits: u8,
    pub m: usize,
    pub auc: f64,
    pub accuracy: f64,
}

/// Structural observations over the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// AUC(all four) − AUC(D-up only).
    pub dup_gap: f64,
    /// Whether the D-up-only detector is within 0.05 AUC of all four.
    pub dup_within_margin: bool,
    /// Whether R-down alone is the weakest of the four single features.
    pub rdn_weakest_single: bool,
}

/// Fits a detector for every non-empty subset of the four feature kinds,
/// embedding layer only, all at the M tuned once with the full mask.
pub fn run_ablation(
    set: &FeatureSet,
    settings: &DetectionSettings,
) -> Result<(Vec<AblationRow>, AblationFlags)> {
    settings.validate()?;
    set.validate()?;
    let vn = subset_for_mode(&set.val_normal, LayerMode::Embedding, settings.embedding_layer)?;
    let va = subset_for_mode(&set.val_adv, LayerMode::Embedding, settings.embedding_layer)?;
    let tn = subset_for_mode(&set.test_normal, LayerMode::Embedding, settings.embedding_layer)?;
    let ta = subset_for_mode(&set.test_adv, LayerMode::Embedding, settings.embedding_layer)?;
    let m = tune_m(
        &vn,
        &va,
        &settings.m_grid,
        settings.folds,
        FeatureMask::all(),
        &settings.hyper,
    )?;
    let vn_m = truncate_all(&vn, m)?;
    let va_m = truncate_all(&va, m)?;

    let mut rows = Vec::with_capacity(15);
    for bits in 1..=15u8 {
        let mask = FeatureMask::from_bits(bits)?;
        let det = fit_detector(&vn_m, &va_m, mask, &settings.hyper, Some(set.attack))?;
        let (scores, labels) = score_split(&det, &tn, &ta)?;
        rows.push(AblationRow {
            mask: mask.name(),
            bits,
            m,
            auc: roc_auc(&scores, &labels)?,
            accuracy: detection_accuracy(&scores, &labels, 0.5)?,
        });
    }

    let auc_of = |bits: u8| -> f64 {
        rows.iter()
            .find(|r| r.bits == bits)
            .map(|r| r.auc)
            .expect("all 15 masks present")
    };
    let all_auc = auc_of(15);
    let dup_auc = auc_of(FeatureMask::only(FeatureKind::DistUp).bits());
    let rdn_auc = auc_of(FeatureMask::only(FeatureKind::RankDn).bits());
    let singles = [
        FeatureMask::only(FeatureKind::RankUp).bits(),
        FeatureMask::only(FeatureKind::DistUp).bits(),
        FeatureMask::only(FeatureKind::RankDn).bits(),
        FeatureMask::only(FeatureKind::DistDn).bits(),
    ];
    let min_single = singles
        .iter()
        .map(|&b| auc_of(b))
        .fold(f64::INFINITY, f64::min);
    let dup_gap = all_auc - dup_auc;
    let flags = AblationFlags {
        dup_gap,
        dup_within_margin: dup_gap <= 0.05,
        rdn_weakest_single: rdn_auc <= min_single,
    };
    Ok((rows, flags))
}

/// One row of the generalization table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub fit_attack: AttackName,
    pub eval_attack: AttackName,
    pub m: usize,
    pub auc: f64,
    pub accuracy: f64,
}

/// Fits one detector on the `fit_attack` features (embedding layer, tuned
/// M, the identical protocol to [`run_detection`]) and evaluates it on
/// every attack's test features, seen and unseen alike.
pub fn run_generalization(
    sets: &[FeatureSet],
    fit_attack: AttackName,
    settings: &DetectionSettings,
) -> Result<Vec<GeneralizationRow>> {
    settings.validate()?;
    let fit_set = sets
        .iter()
        .find(|s| s.attack == fit_attack)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "no feature set for fit attack {}",
                fit_attack.as_str()
            ))
        })?;
    fit_set.validate()?;
    let vn = subset_for_mode(
        &fit_set.val_normal,
        LayerMode::Embedding,
        settings.embedding_layer,
    )?;
    let va = subset_for_mode(
        &fit_set.val_adv,
        LayerMode::Embedding,
        settings.embedding_layer,
    )?;
    let (det, m) = tune_and_fit(&vn, &va, FeatureMask::all(), settings, Some(fit_attack))?;

    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        set.validate()?;
        let tn = subset_for_mode(&set.test_normal, LayerMode::Embedding, settings.embedding_layer)?;
        let ta = subset_for_mode(&set.test_adv, LayerMode::Embedding, settings.embedding_layer)?;
        let (scores, labels) = score_split(&det, &tn, &ta)?;
        rows.push(GeneralizationRow {
            fit_attack,
            eval_attack: set.attack,
            m,
            auc: roc_auc(&scores, &labels)?,
            accuracy: detection_accuracy(&scores, &labels, 0.5)?,
        });
    }
    Ok(rows)
}

/// One row of the white-box table: the same detector judged on vanilla CW
/// and on the detector-aware variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteboxRow {
    /// Detector feature mask name (`Rup+Dup` or `Dup`).
    pub detector: String,
    pub m: usize,
    pub cw_auc: f64,
    pub cw_accuracy: f64,
    pub cw_opt_auc: f64,
    pub cw_opt_accuracy: f64,
}

/// Summary of the feature-space objective values across attacked points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstarStats {
    pub mean_cw: f64,
    pub mean_cw_opt: f64,
    /// Fraction of points where the aware attack achieved strictly lower
    /// embedding-distance sum than vanilla CW.
    pub frac_lower: f64,
}

/// Paired comparison of the embedding-distance sums reached by the two
/// attacks on the same points.
pub fn lstar_stats(lstar_cw: &[f64], lstar_opt: &[f64]) -> Result<LstarStats> {
    if lstar_cw.is_empty() {
        return Err(Error::Empty("l-star values"));
    }
    if lstar_cw.len() != lstar_opt.len() {
        return Err(Error::DimensionMismatch {
            expected: lstar_cw.len(),
            got: lstar_opt.len(),
        });
    }
    let n = lstar_cw.len() as f64;
    let lower = lstar_cw
        .iter()
        .zip(lstar_opt)
        .filter(|(cw, opt)| opt < cw)
        .count();
    Ok(LstarStats {
        mean_cw: lstar_cw.iter().sum::<f64>() / n,
        mean_cw_opt: lstar_opt.iter().sum::<f64>() / n,
        frac_lower: lower as f64 / n,
    })
}

/// Evaluates detection of the white-box attack. The detector is fit on
/// vanilla CW validation features, embedding layer only, using the
/// helpful-example features (ranks + distances), plus the distance-only
/// variant; both are then judged on vanilla CW and detector-aware test
/// features over the same points.
pub fn run_whitebox(
    cw_set: &FeatureSet,
    cw_opt_set: &FeatureSet,
    settings: &DetectionSettings,
) -> Result<Vec<WhiteboxRow>> {
    settings.validate()?;
    cw_set.validate()?;
    cw_opt_set.validate()?;
    let vn = subset_for_mode(&cw_set.val_normal, LayerMode::Embedding, settings.embedding_layer)?;
    let va = subset_for_mode(&cw_set.val_adv, LayerMode::Embedding, settings.embedding_layer)?;
    let tn = subset_for_mode(&cw_set.test_normal, LayerMode::Embedding, settings.embedding_layer)?;
    let ta_cw = subset_for_mode(&cw_set.test_adv, LayerMode::Embedding, settings.embedding_layer)?;
    let ta_opt = subset_for_mode(
        &cw_opt_set.test_adv,
        LayerMode::Embedding,
        settings.embedding_layer,
    )?;

    let helpful_mask = FeatureMask {
        r_up: true,
        d_up: true,
        r_dn: false,
        d_dn: false,
    };
    let dup_mask = FeatureMask::only(FeatureKind::DistUp);

    let mut rows = Vec::with_capacity(2);
    for mask in [helpful_mask, dup_mask] {
        let (det, m) = tune_and_fit(&vn, &va, mask, settings, Some(AttackName::CwL2))?;
        let (cw_scores, cw_labels) = score_split(&det, &tn, &ta_cw)?;
        let (opt_scores, opt_labels) = score_split(&det, &tn, &ta_opt)?;
        rows.push(WhiteboxRow {
            detector: mask.name(),
            m,
            cw_auc: roc_auc(&cw_scores, &cw_labels)?,
            cw_accuracy: detection_accuracy(&cw_scores, &cw_labels, 0.5)?,
            cw_opt_auc: roc_auc(&opt_scores, &opt_labels)?,
            cw_opt_accuracy: detection_accuracy(&opt_scores, &opt_labels, 0.5)?,
        });
    }
    Ok(rows)
}
