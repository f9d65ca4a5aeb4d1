//! Scores every training point's influence on one test prediction and
//! prints the most helpful and most harmful points.
//!
//! A positive score means the training point lowers the test loss
//! (removing it would hurt); a negative score means it raises the loss.
//!
//! ```text
//! cargo run --example influence_scores
//! ```

use nnif::data::{gaussian_blobs, split, Split};
use nnif::influence::{InfluenceEngine, InverseHvpConfig, InverseHvpMethod};
use nnif::model::{init_model, train, TrainConfig};
use nnif::Result;

fn main() -> Result<()> {
    let raw = gaussian_blobs(3, 120, 2, 0.12, 27)?;
    let ds = split(&raw, 300, 30, 30, 28)?;
    let (train_x, train_y) = ds.gather(&ds.indices_with(Split::Train))?;
    let model0 = init_model(&[2, 8, 3], 29)?;
    let cfg = TrainConfig {
        epochs: 40,
        seed: 30,
        ..TrainConfig::default()
    };
    let model = train(&model0, train_x.view(), &train_y, None, &cfg)?;

    let subset: Vec<usize> = (0..train_x.nrows()).collect();
    let solver = InverseHvpConfig {
        method: InverseHvpMethod::Exact,
        damping: 0.01,
        ..InverseHvpConfig::default()
    };
    let engine = InfluenceEngine::new(
        &model,
        train_x.view(),
        &train_y,
        &subset,
        cfg.weight_decay,
        solver,
    )?;

    let test = ds.indices_with(Split::Test)[0];
    let res = engine.result_for(test, ds.row(test), ds.label(test), 5, false)?;
    println!(
        "test point {test} (class {}), scored against {} training points\n",
        ds.label(test),
        subset.len()
    );

    let show = |title: &str, picks: &[usize]| {
        println!("{title}");
        for &p in picks {
            println!(
                "  train row {p:>3}  class {}  score {:+.5}",
                train_y[p], res.scores[p]
            );
        }
    };
    show("most helpful (largest score):", &res.helpful);
    show("most harmful (smallest score):", &res.harmful);
    Ok(())
}
