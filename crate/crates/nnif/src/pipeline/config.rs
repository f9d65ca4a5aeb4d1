//! Run configuration: one TOML file drives every pipeline stage.
//!
//! Unknown keys are rejected at every nesting level, so a typo in a config
//! file is an error rather than a silently ignored setting. Every field has
//! a default; an empty file (or no file at all) describes the built-in
//! Gaussian-blobs experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackName};
use crate::detector::LrHyper;
use crate::error::{Error, Result};
use crate::eval::LayerMode;
use crate::influence::InverseHvpConfig;
use crate::model::TrainConfig;

/// Which source the run's dataset comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Gaussian class blobs in the unit box.
    Blobs,
    /// Two concentric rings in 2-D.
    Rings,
    /// IDX image/label file pair.
    Idx,
}

/// Dataset source and split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Class count (blobs only; rings have 2, IDX files bring their own).
    pub classes: usize,
    /// Feature dimension (blobs only; rings are 2-D).
    pub dim: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Per-coordinate sample standard deviation (blobs).
    pub spread: f64,
    /// Radial noise standard deviation (rings).
    pub noise: f64,
    /// IDX image file (required for `kind = "idx"`).
    pub images: Option<PathBuf>,
    /// IDX label file (required for `kind = "idx"`).
    pub labels: Option<PathBuf>,
    /// Read at most this many IDX records.
    pub limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            classes: 3,
            dim: 4,
            train: 4000,
            val: 400,
            test: 1000,
            spread: 0.05,
            noise: 0.025,
            images: None,
            labels: None,
            limit: None,
        }
    }
}

/// Network architecture; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths, at least one (the last is the embedding).
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32, 32],
        }
    }
}

/// Influence-function settings beyond the solver itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceSection {
    pub solver: InverseHvpConfig,
    /// Fraction of the training set scored for test-split points.
    /// Validation points always use the full training set.
    pub subsample_frac: f64,
    /// Swap the helpful/harmful orientation.
    pub invert_sign: bool,
    /// Largest selection size stored; the detection M grid truncates it.
    pub m_max: usize,
    /// At most this many correctly classified validation points enter the
    /// attack/influence/feature stages.
    pub max_val_points: usize,
    /// Same cap for the test split.
    pub max_test_points: usize,
}

impl Default for InfluenceSection {
    fn default() -> Self {
        InfluenceSection {
            solver: InverseHvpConfig::default(),
            subsample_frac: 0.5,
            invert_sign: false,
            m_max: 30,
            max_val_points: 150,
            max_test_points: 300,
        }
    }
}

/// Feature-extraction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    /// Which hidden layers to extract rank/distance features from.
    pub layers: LayerMode,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            layers: LayerMode::All,
        }
    }
}

/// Detector training and M tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    /// Candidate selection sizes for cross-validated tuning; every entry
    /// must be at most `influence.m_max`.
    pub m_grid: Vec<usize>,
    pub folds: usize,
    pub lr: LrHyper,
}

impl Default for DetectionSection {
    fn default() -> Self {
        DetectionSection {
            m_grid: vec![2, 5, 10, 20, 30],
            folds: 4,
            lr: LrHyper::default(),
        }
    }
}

/// Which attacks anchor the ablation and generalization tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Attack the 15-row feature ablation runs on; `None` picks cw_l2
    /// when configured, otherwise the first attack.
    pub ablation_attack: Option<AttackName>,
    /// Attack the generalization detector is fit on; `None` picks fgsm
    /// when configured, otherwise the first attack.
    pub generalization_fit: Option<AttackName>,
}

/// The whole run: data, model, attacks, influence, features, detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Names the run directory under `output_dir`.
    pub run_name: String,
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Parent directory for run directories.
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    /// One `[[attack]]` table per attack; order is report order.
    #[serde(rename = "attack")]
    pub attacks: Vec<AttackConfig>,
    pub influence: InfluenceSection,
    pub features: FeatureSection,
    pub detection: DetectionSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "blobs".into(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            attacks: default_attacks(),
            influence: InfluenceSection::default(),
            features: FeatureSection::default(),
            detection: DetectionSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// The built-in attack suite: the two sign attacks at a budget wide enough
/// to cross blob class margins, the geometric attack, vanilla CW, and the
/// detector-aware CW variant.
fn default_attacks() -> Vec<AttackConfig> {
    let mut fgsm = AttackConfig::named(AttackName::Fgsm);
    fgsm.epsilon = 0.25;
    let mut pgd = AttackConfig::named(AttackName::Pgd);
    pgd.epsilon = 0.25;
    pgd.step_size = 0.025;
    pgd.steps = 40;
    pgd.random_start = true;
    let deepfool = AttackConfig::named(AttackName::Deepfool);
    let cw = AttackConfig::named(AttackName::CwL2);
    let mut cw_opt = AttackConfig::named(AttackName::CwOpt);
    cw_opt.embed_reg_weight = 0.05;
    vec![fgsm, pgd, deepfool, cw, cw_opt]
}

impl RunConfig {
    /// Parses and validates a TOML run configuration.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the command-line overrides, revalidating what they touch.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        layers: Option<LayerMode>,
        subsample_frac: Option<f64>,
    ) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(mode) = layers {
            self.features.layers = mode;
        }
        if let Some(f) = subsample_frac {
            self.influence.subsample_frac = f;
        }
        self.validate()
    }

    /// The canonical TOML snapshot: field order is fixed by the struct
    /// definitions, so equal configs serialize to equal bytes.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Hex SHA-256 of the canonical snapshot; ties reports to manifests.
    pub fn config_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.canonical_toml()?.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }

    /// Every configured attack except the detector-aware one, which needs
    /// influence results and runs in the influence stage.
    pub fn standard_attacks(&self) -> Vec<&AttackConfig> {
        self.attacks
            .iter()
            .filter(|a| a.attack != AttackName::CwOpt)
            .collect()
    }

    /// The detector-aware CW config, when the run includes it.
    pub fn cw_opt(&self) -> Option<&AttackConfig> {
        self.attacks.iter().find(|a| a.attack == AttackName::CwOpt)
    }

    /// Attack the ablation table is computed for.
    pub fn ablation_attack(&self) -> AttackName {
        self.eval.ablation_attack.unwrap_or_else(|| {
            let std = self.standard_attacks();
            std.iter()
                .find(|a| a.attack == AttackName::CwL2)
                .map_or(std[0].attack, |a| a.attack)
        })
    }

    /// Attack the generalization detector is fit on.
    pub fn generalization_fit(&self) -> AttackName {
        self.eval.generalization_fit.unwrap_or_else(|| {
            let std = self.standard_attacks();
            std.iter()
                .find(|a| a.attack == AttackName::Fgsm)
                .map_or(std[0].attack, |a| a.attack)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() {
            return Err(Error::Config("run_name is empty".into()));
        }
        if self.run_name.contains(['/', '\\']) || self.run_name.contains("..") {
            return Err(Error::Config(format!(
                "run_name `{}` must be a plain directory name",
                self.run_name
            )));
        }
        self.validate_dataset()?;
        if self.model.hidden.is_empty() {
            return Err(Error::Config(
                "model.hidden is empty; the detector needs at least one hidden layer".into(),
            ));
        }
        if self.model.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("model.hidden contains a zero width".into()));
        }
        self.validate_attacks()?;
        self.validate_influence()?;
        self.validate_detection()?;
        self.validate_eval()
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return Err(Error::Config(format!(
                "split sizes {}/{}/{} must all be positive",
                d.train, d.val, d.test
            )));
        }
        match d.kind {
            DatasetKind::Blobs => {
                if d.classes < 2 {
                    return Err(Error::Config(format!("dataset.classes {} < 2", d.classes)));
                }
                if d.dim < 2 {
                    return Err(Error::Config(format!("dataset.dim {} < 2", d.dim)));
                }
                if !(d.spread > 0.0 && d.spread.is_finite()) {
                    return Err(Error::Config(format!("dataset.spread {}", d.spread)));
                }
            }
            DatasetKind::Rings => {
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return Err(Error::Config(format!("dataset.noise {}", d.noise)));
                }
            }
            DatasetKind::Idx => {
                if d.images.is_none() || d.labels.is_none() {
                    return Err(Error::Config(
                        "dataset.kind = \"idx\" needs dataset.images and dataset.labels".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_attacks(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::Config("no attacks configured".into()));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate()?;
            for b in &self.attacks[..i] {
                if a.attack == b.attack {
                    return Err(Error::Config(format!(
                        "attack `{}` is configured twice",
                        a.attack.as_str()
                    )));
                }
            }
        }
        if self.standard_attacks().is_empty() {
            return Err(Error::Config(
                "cw_opt is the only configured attack; it needs at least cw_l2 alongside".into(),
            ));
        }
        if self.cw_opt().is_some() && !self.attacks.iter().any(|a| a.attack == AttackName::CwL2) {
            return Err(Error::Config(
                "cw_opt needs cw_l2 configured too: the white-box table fits its detector \
                 on vanilla CW features"
                    .into(),
            ));
        }
        Ok(())
    }

    fn validate_influence(&self) -> Result<()> {
        let inf = &self.influence;
        inf.solver.validate()?;
        if !(inf.subsample_frac > 0.0 && inf.subsample_frac <= 1.0) {
            return Err(Error::Config(format!(
                "influence.subsample_frac {} outside (0, 1]",
                inf.subsample_frac
            )));
        }
        if inf.m_max == 0 {
            return Err(Error::Config("influence.m_max is zero".into()));
        }
        if inf.max_val_points < self.detection.folds || inf.max_test_points == 0 {
            return Err(Error::Config(format!(
                "point caps {}/{} too small (validation needs at least {} for tuning)",
                inf.max_val_points, inf.max_test_points, self.detection.folds
            )));
        }
        Ok(())
    }

    fn validate_detection(&self) -> Result<()> {
        let det = &self.detection;
        if det.m_grid.is_empty() {
            return Err(Error::Config("detection.m_grid is empty".into()));
        }
        for &m in &det.m_grid {
            if m == 0 || m > self.influence.m_max {
                return Err(Error::Config(format!(
                    "detection.m_grid entry {m} outside 1..={}",
                    self.influence.m_max
                )));
            }
        }
        if det.folds < 2 {
            return Err(Error::Config(format!("detection.folds {} < 2", det.folds)));
        }
        if !(det.lr.l2 >= 0.0 && det.lr.l2.is_finite()) {
            return Err(Error::Config(format!("detection.lr.l2 {}", det.lr.l2)));
        }
        if det.lr.max_iter == 0 || !(det.lr.tol > 0.0 && det.lr.tol.is_finite()) {
            return Err(Error::Config(format!(
                "detection.lr iteration settings {}/{}",
                det.lr.max_iter, det.lr.tol
            )));
        }
        Ok(())
    }

    fn validate_eval(&self) -> Result<()> {
        for (field, name) in [
            ("eval.ablation_attack", self.eval.ablation_attack),
            ("eval.generalization_fit", self.eval.generalization_fit),
        ] {
            if let Some(a) = name {
                if a == AttackName::CwOpt {
                    return Err(Error::Config(format!(
                        "{field} cannot be cw_opt; it has no validation features of its own"
                    )));
                }
                if !self.attacks.iter().any(|c| c.attack == a) {
                    return Err(Error::Config(format!(
                        "{field} `{}` is not in the attack list",
                        a.as_str()
                    )));
                }
            }
        }
        Ok(())
    }
}
