//! Trains a small MLP on Gaussian blobs and reports accuracy per split.
//!
//! ```text
//! cargo run --example train_model
//! ```

use nnif::data::{gaussian_blobs, split, Split};
use nnif::model::{accuracy, init_model, train, TrainConfig};
use nnif::Result;

fn main() -> Result<()> {
    let raw = gaussian_blobs(3, 500, 4, 0.08, 7)?;
    let ds = split(&raw, 1200, 150, 150, 8)?;

    let model0 = init_model(&[4, 32, 16, 3], 9)?;
    println!(
        "architecture [4, 32, 16, 3]: {} parameters",
        model0.param_count()
    );

    let (train_x, train_y) = ds.gather(&ds.indices_with(Split::Train))?;
    let (val_x, val_y) = ds.gather(&ds.indices_with(Split::Val))?;
    let (test_x, test_y) = ds.gather(&ds.indices_with(Split::Test))?;

    let cfg = TrainConfig {
        epochs: 30,
        seed: 10,
        ..TrainConfig::default()
    };
    let model = train(
        &model0,
        train_x.view(),
        &train_y,
        Some((val_x.view(), &val_y)),
        &cfg,
    )?;

    for (name, xs, ys) in [
        ("train", &train_x, &train_y),
        ("val", &val_x, &val_y),
        ("test", &test_x, &test_y),
    ] {
        println!("{name:<5} accuracy {:.3}", accuracy(&model, xs.view(), ys)?);
    }
    Ok(())
}
