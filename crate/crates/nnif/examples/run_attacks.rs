//! Runs every attack family against one trained model and prints a
//! success / perturbation-size table.
//!
//! ```text
//! cargo run --example run_attacks
//! ```

use nnif::attacks::{attack_batch, AttackConfig, AttackName};
use nnif::data::{gaussian_blobs, split, Split};
use nnif::model::{init_model, train, TrainConfig};
use nnif::Result;

fn main() -> Result<()> {
    let raw = gaussian_blobs(3, 400, 4, 0.06, 17)?;
    let ds = split(&raw, 1000, 100, 100, 18)?;
    let (train_x, train_y) = ds.gather(&ds.indices_with(Split::Train))?;
    let model0 = init_model(&[4, 24, 3], 19)?;
    let cfg = TrainConfig {
        epochs: 25,
        seed: 20,
        ..TrainConfig::default()
    };
    let model = train(&model0, train_x.view(), &train_y, None, &cfg)?;

    // attack only points the model classifies correctly
    let targets: Vec<usize> = ds
        .indices_with(Split::Test)
        .into_iter()
        .filter(|&i| model.predict(ds.row(i)).unwrap() == ds.label(i))
        .collect();
    let (xs, ys) = ds.gather(&targets)?;
    println!("attacking {} correctly classified test points\n", xs.nrows());

    println!(
        "{:<10} {:>8} {:>8} {:>8} {:>8}",
        "attack", "success", "mean l1", "mean l2", "mean linf"
    );
    for name in [
        AttackName::Fgsm,
        AttackName::Pgd,
        AttackName::Jsma,
        AttackName::Deepfool,
        AttackName::CwL2,
        AttackName::Ead,
    ] {
        let mut ac = AttackConfig::named(name);
        ac.seed = 21;
        if matches!(name, AttackName::Fgsm | AttackName::Pgd) {
            ac.epsilon = 0.3;
            ac.step_size = 0.03;
        }
        if matches!(name, AttackName::CwL2 | AttackName::Ead) {
            ac.opt_steps = 120;
            ac.binary_search_steps = 4;
        }
        let records = attack_batch(&model, xs.view(), &ys, &targets, &ac)?;
        let wins: Vec<_> = records.iter().filter(|r| r.success).collect();
        let mean = |f: fn(&&nnif::attacks::AdversarialRecord) -> f64| {
            wins.iter().map(f).sum::<f64>() / wins.len().max(1) as f64
        };
        println!(
            "{:<10} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            name.as_str(),
            wins.len() as f64 / records.len() as f64,
            mean(|r| r.l1),
            mean(|r| r.l2),
            mean(|r| r.linf),
        );
    }
    Ok(())
}
