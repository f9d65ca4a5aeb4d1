//! Drives the cached pipeline end to end on a reduced configuration and
//! prints the report summary.
//!
//! The run directory persists under the system temp dir; running the
//! example a second time hits the stage caches and finishes immediately.
//! Delete the directory (printed below) to start fresh.
//!
//! ```text
//! cargo run --example full_pipeline
//! ```

use nnif::attacks::{AttackConfig, AttackName};
use nnif::pipeline::{Pipeline, RunConfig, StageName, StageOutcome};
use nnif::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.run_name = "quickstart".into();
    cfg.dataset.train = 800;
    cfg.dataset.val = 120;
    cfg.dataset.test = 200;
    cfg.model.hidden = vec![16, 16];
    cfg.training.epochs = 25;
    let mut fgsm = AttackConfig::named(AttackName::Fgsm);
    fgsm.epsilon = 0.25;
    let mut pgd = AttackConfig::named(AttackName::Pgd);
    pgd.epsilon = 0.25;
    pgd.step_size = 0.025;
    cfg.attacks = vec![fgsm, pgd];
    cfg.influence.m_max = 10;
    cfg.influence.max_val_points = 80;
    cfg.influence.max_test_points = 120;
    cfg.detection.m_grid = vec![2, 5, 10];
    cfg.detection.folds = 3;

    let dir = std::env::temp_dir().join("nnif-quickstart");
    println!("run directory: {}\n", dir.display());
    let mut pipeline = Pipeline::open(cfg, &dir)?;
    for stage in StageName::ORDER {
        match pipeline.run(stage, false)? {
            StageOutcome::Ran { wall } => {
                println!("{:<10} ran in {:.2}s", stage.as_str(), wall.as_secs_f64())
            }
            StageOutcome::Cached => println!("{:<10} cached", stage.as_str()),
        }
    }

    let report = pipeline.load_report()?;
    println!(
        "\nclean accuracy: train {:.3} / val {:.3} / test {:.3}",
        report.clean_accuracy.train, report.clean_accuracy.val, report.clean_accuracy.test
    );
    for row in &report.attack_success {
        if row.split == "test" {
            println!(
                "{:<6} success {:.3} (mean l2 {:.3})",
                row.attack.as_str(),
                row.success_rate,
                row.mean_l2
            );
        }
    }
    for row in &report.detection {
        println!(
            "detector {:<6} layers {:<10} M {:<3} AUC {:.3} accuracy {:.3}",
            row.attack.as_str(),
            format!("{:?}", row.mode),
            row.m,
            row.auc,
            row.accuracy
        );
    }
    println!("\nfull report: {}", pipeline.reports_dir().display());
    Ok(())
}
