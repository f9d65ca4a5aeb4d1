//! Report emission: CSV tables, ROC point files, and a markdown summary.
//!
//! Everything written here is a pure function of the report data, with no
//! timestamps or runtimes, so two runs with identical configuration
//! produce byte-identical files. Floats are formatted with Rust's
//! shortest-round-trip display, which is deterministic for equal bits.

use std::io::Write as IoWrite;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{AdversarialRecord, AttackName};
use crate::error::{Error, Result};
use crate::eval::experiments::{
    AblationFlags, AblationRow, DetectionRow, GeneralizationRow, LstarStats, WhiteboxRow,
};

/// Classifier accuracy on the clean splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanAccuracy {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

/// Success and perturbation-size summary for one attack on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSuccessRow {
    pub attack: AttackName,
    pub split: String,
    pub attempted: usize,
    pub succeeded: usize,
    pub success_rate: f64,
    pub mean_l0: f64,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub mean_linf: f64,
}

/// Builds a success row from attack records (perturbation means are over
/// successful records only).
pub fn summarize_records(
    attack: AttackName,
    split: &str,
    records: &[AdversarialRecord],
) -> Result<AttackSuccessRow> {
    if records.is_empty() {
        return Err(Error::Empty("attack records"));
    }
    let succ: Vec<&AdversarialRecord> = records.iter().filter(|r| r.success).collect();
    let n = succ.len().max(1) as f64;
    let mean = |f: &dyn Fn(&AdversarialRecord) -> f64| -> f64 {
        succ.iter().map(|r| f(r)).sum::<f64>() / n
    };
    Ok(AttackSuccessRow {
        attack,
        split: split.to_string(),
        attempted: records.len(),
        succeeded: succ.len(),
        success_rate: succ.len() as f64 / records.len() as f64,
        mean_l0: mean(&|r| r.l0 as f64),
        mean_l1: mean(&|r| r.l1),
        mean_l2: mean(&|r| r.l2),
        mean_linf: mean(&|r| r.linf),
    })
}

/// Everything one evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_name: String,
    pub seed: u64,
    /// Hash of the run configuration, tying the report to its manifest.
    pub config_hash: String,
    pub clean_accuracy: CleanAccuracy,
    pub attack_success: Vec<AttackSuccessRow>,
    pub detection: Vec<DetectionRow>,
    pub ablation: Vec<AblationRow>,
    pub ablation_flags: Option<AblationFlags>,
    pub generalization: Vec<GeneralizationRow>,
    pub whitebox: Vec<WhiteboxRow>,
    pub lstar: Option<LstarStats>,
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_detection_csv(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    let mut lines = vec!["attack,mode,m,auc,accuracy".to_string()];
    for r in rows {
        lines.push(format!(
            "{},{},{},{},{}",
            r.attack.as_str(),
            r.mode.as_str(),
            r.m,
            r.auc,
            r.accuracy
        ));
    }
    write_lines(path, &lines)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut lines = vec!["mask,bits,m,auc,accuracy".to_string()];
    for r in rows {
        lines.push(format!(
            "{},{},{},{},{}",
            r.mask, r.bits, r.m, r.auc, r.accuracy
        ));
    }
    write_lines(path, &lines)
}

pub fn write_generalization_csv(path: &Path, rows: &[GeneralizationRow]) -> Result<()> {
    let mut lines = vec!["fit_attack,eval_attack,m,auc,accuracy".to_string()];
    for r in rows {
        lines.push(format!(
            "{},{},{},{},{}",
            r.fit_attack.as_str(),
            r.eval_attack.as_str(),
            r.m,
            r.auc,
            r.accuracy
        ));
    }
    write_lines(path, &lines)
}

pub fn write_whitebox_csv(path: &Path, rows: &[WhiteboxRow]) -> Result<()> {
    let mut lines =
        vec!["detector,m,cw_auc,cw_accuracy,cw_opt_auc,cw_opt_accuracy".to_string()];
    for r in rows {
        lines.push(format!(
            "{},{},{},{},{},{}",
            r.detector, r.m, r.cw_auc, r.cw_accuracy, r.cw_opt_auc, r.cw_opt_accuracy
        ));
    }
    write_lines(path, &lines)
}

pub fn write_attack_success_csv(path: &Path, rows: &[AttackSuccessRow]) -> Result<()> {
    let mut lines = vec![
        "attack,split,attempted,succeeded,success_rate,mean_l0,mean_l1,mean_l2,mean_linf"
            .to_string(),
    ];
    for r in rows {
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            r.attack.as_str(),
            r.split,
            r.attempted,
            r.succeeded,
            r.success_rate,
            r.mean_l0,
            r.mean_l1,
            r.mean_l2,
            r.mean_linf
        ));
    }
    write_lines(path, &lines)
}

/// ROC point file with header `fpr,tpr`.
pub fn write_roc_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut lines = vec!["fpr,tpr".to_string()];
    for (fpr, tpr) in points {
        lines.push(format!("{fpr},{tpr}"));
    }
    write_lines(path, &lines)
}

pub fn write_report_json(path: &Path, report: &ExperimentReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Renders the human-readable digest. Content is fully determined by the
/// report value.
pub fn write_summary_md(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut out: Vec<String> = Vec::new();
    out.push(format!("# Run `{}`", report.run_name));
    out.push(String::new());
    out.push(format!(
        "Seed {}, config hash `{}`.",
        report.seed, report.config_hash
    ));
    out.push(String::new());

    out.push("## Clean accuracy".into());
    out.push(String::new());
    out.push("| split | accuracy |".into());
    out.push("|---|---|".into());
    out.push(format!("| train | {} |", fmt3(report.clean_accuracy.train)));
    out.push(format!("| val | {} |", fmt3(report.clean_accuracy.val)));
    out.push(format!("| test | {} |", fmt3(report.clean_accuracy.test)));
    out.push(String::new());

    if !report.attack_success.is_empty() {
        out.push("## Attack success".into());
        out.push(String::new());
        out.push("| attack | split | succeeded / attempted | rate | mean L2 |".into());
        out.push("|---|---|---|---|---|".into());
        for r in &report.attack_success {
            out.push(format!(
                "| {} | {} | {} / {} | {} | {} |",
                r.attack.as_str(),
                r.split,
                r.succeeded,
                r.attempted,
                fmt3(r.success_rate),
                fmt3(r.mean_l2)
            ));
        }
        out.push(String::new());
    }

    if !report.detection.is_empty() {
        out.push("## Detection".into());
        out.push(String::new());
        out.push("| attack | layers | M | AUC | accuracy |".into());
        out.push("|---|---|---|---|---|".into());
        for r in &report.detection {
            out.push(format!(
                "| {} | {} | {} | {} | {} |",
                r.attack.as_str(),
                r.mode.as_str(),
                r.m,
                fmt3(r.auc),
                fmt3(r.accuracy)
            ));
        }
        out.push(String::new());
    }

    if !report.ablation.is_empty() {
        out.push("## Feature ablation".into());
        out.push(String::new());
        out.push("| features | AUC | accuracy |".into());
        out.push("|---|---|---|".into());
        for r in &report.ablation {
            out.push(format!(
                "| {} | {} | {} |",
                r.mask,
                fmt3(r.auc),
                fmt3(r.accuracy)
            ));
        }
        out.push(String::new());
        if let Some(flags) = &report.ablation_flags {
            out.push(format!(
                "Distance-to-helpful alone sits {} AUC below the full feature set ({}within the 0.05 margin).",
                fmt3(flags.dup_gap),
                if flags.dup_within_margin { "" } else { "NOT " }
            ));
            out.push(format!(
                "Harmful ranks alone {} the weakest single feature here.",
                if flags.rdn_weakest_single {
                    "are"
                } else {
                    "are not"
                }
            ));
            out.push(String::new());
        }
    }

    if !report.generalization.is_empty() {
        out.push("## Generalization across attacks".into());
        out.push(String::new());
        let fit = report.generalization[0].fit_attack.as_str();
        out.push(format!("Detector fit on `{fit}` features only."));
        out.push(String::new());
        out.push("| evaluated on | AUC | accuracy |".into());
        out.push("|---|---|---|".into());
        for r in &report.generalization {
            out.push(format!(
                "| {} | {} | {} |",
                r.eval_attack.as_str(),
                fmt3(r.auc),
                fmt3(r.accuracy)
            ));
        }
        out.push(String::new());
    }

    if !report.whitebox.is_empty() {
        out.push("## White-box counter-attack".into());
        out.push(String::new());
        out.push("| detector features | M | CW accuracy | aware-CW accuracy |".into());
        out.push("|---|---|---|---|".into());
        for r in &report.whitebox {
            out.push(format!(
                "| {} | {} | {} | {} |",
                r.detector,
                r.m,
                fmt3(r.cw_accuracy),
                fmt3(r.cw_opt_accuracy)
            ));
        }
        out.push(String::new());
        if let Some(l) = &report.lstar {
            out.push(format!(
                "Feature-space objective: mean {} (vanilla CW) vs {} (aware); the aware attack is strictly lower on {} of points.",
                fmt3(l.mean_cw),
                fmt3(l.mean_cw_opt),
                fmt3(l.frac_lower)
            ));
            out.push(String::new());
        }
    }

    write_lines(path, &out)
}

/// File names used inside a run's `reports/` directory.
pub const DETECTION_CSV: &str = "detection.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const GENERALIZATION_CSV: &str = "generalization.csv";
pub const WHITEBOX_CSV: &str = "whitebox.csv";
pub const ATTACK_SUCCESS_CSV: &str = "attack_success.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const REPORT_JSON: &str = "report.json";

/// Writes every table plus the summary into `dir`. ROC point files are
/// named `roc_{attack}.csv`.
pub fn emit_all(
    dir: &Path,
    report: &ExperimentReport,
    roc: &[(AttackName, Vec<(f64, f64)>)],
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_detection_csv(&dir.join(DETECTION_CSV), &report.detection)?;
    write_attack_success_csv(&dir.join(ATTACK_SUCCESS_CSV), &report.attack_success)?;
    if !report.ablation.is_empty() {
        write_ablation_csv(&dir.join(ABLATION_CSV), &report.ablation)?;
    }
    if !report.generalization.is_empty() {
        write_generalization_csv(&dir.join(GENERALIZATION_CSV), &report.generalization)?;
    }
    if !report.whitebox.is_empty() {
        write_whitebox_csv(&dir.join(WHITEBOX_CSV), &report.whitebox)?;
    }
    for (attack, points) in roc {
        write_roc_csv(&dir.join(format!("roc_{}.csv", attack.as_str())), points)?;
    }
    write_report_json(&dir.join(REPORT_JSON), report)?;
    write_summary_md(&dir.join(SUMMARY_MD), report)
}
