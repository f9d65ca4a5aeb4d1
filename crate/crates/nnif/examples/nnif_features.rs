//! Builds the four nearest-neighbor influence feature blocks for one clean
//! test point and its adversarial twin, side by side.
//!
//! The features are the ranks and distances of the most helpful and most
//! harmful training points in the model's embedding space. Crossing the
//! decision boundary rearranges both blocks, and the detector learns that
//! shift; compare the two printed signatures.
//!
//! ```text
//! cargo run --example nnif_features
//! ```

use nnif::attacks::{pgd, AttackConfig, AttackName};
use nnif::data::{gaussian_blobs, split, Split};
use nnif::influence::{InfluenceEngine, InverseHvpConfig, InverseHvpMethod};
use nnif::model::{init_model, train, ModelParams, TrainConfig};
use nnif::neighbors::{
    embedding_layer, fit_layer_store, gather_features, query_ranks_distances, LayerIndexStore,
    NnifFeatureVector,
};
use ndarray::ArrayView1;
use nnif::Result;

fn featurize(
    model: &ModelParams,
    store: &LayerIndexStore,
    engine: &InfluenceEngine,
    index: usize,
    x: ArrayView1<f64>,
    y: usize,
    label: u8,
) -> Result<NnifFeatureVector> {
    // subset positions equal store rows here: both cover the full training
    // set in dataset order
    let res = engine.result_for(index, x, y, 5, false)?;
    let (ranks, dists) = query_ranks_distances(store, model.embedding(x)?.view())?;
    let lf = gather_features(store.layer(), &ranks, &dists, &res.helpful, &res.harmful)?;
    Ok(NnifFeatureVector {
        example_index: index,
        label,
        layers: vec![lf],
    })
}

fn main() -> Result<()> {
    let raw = gaussian_blobs(3, 140, 2, 0.05, 37)?;
    let ds = split(&raw, 360, 30, 30, 38)?;
    let (train_x, train_y) = ds.gather(&ds.indices_with(Split::Train))?;
    let model0 = init_model(&[2, 12, 3], 39)?;
    let tc = TrainConfig {
        epochs: 35,
        seed: 40,
        ..TrainConfig::default()
    };
    let model = train(&model0, train_x.view(), &train_y, None, &tc)?;

    let test = ds.indices_with(Split::Test)[3];
    let (x, y) = (ds.row(test), ds.label(test));
    let mut ac = AttackConfig::named(AttackName::Pgd);
    ac.epsilon = 0.25;
    ac.step_size = 0.025;
    ac.seed = 41;
    let rec = pgd(&model, x, y, &ac)?;
    println!(
        "test point {test}: class {y} -> {} under pgd (success: {})\n",
        rec.pred_after, rec.success
    );

    let layer = embedding_layer(&model)?;
    let train_rows: Vec<usize> = (0..train_x.nrows()).collect();
    let store = fit_layer_store(&model, train_x.view(), &train_rows, layer)?;
    let solver = InverseHvpConfig {
        method: InverseHvpMethod::Exact,
        damping: 0.01,
        ..InverseHvpConfig::default()
    };
    let engine = InfluenceEngine::new(
        &model,
        train_x.view(),
        &train_y,
        &train_rows,
        tc.weight_decay,
        solver,
    )?;

    let clean = featurize(&model, &store, &engine, test, x, y, 0)?;
    let adv = featurize(&model, &store, &engine, test, rec.x_adv.view(), rec.pred_after, 1)?;

    for (name, fv) in [("clean", &clean), ("adversarial", &adv)] {
        let lf = &fv.layers[0];
        println!("{name} (layer {}):", lf.layer);
        println!("  helpful ranks {:?}", lf.helpful_ranks);
        println!(
            "  helpful dists {:?}",
            lf.helpful_dists
                .iter()
                .map(|d| (d * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>()
        );
        println!("  harmful ranks {:?}", lf.harmful_ranks);
        println!();
    }
    Ok(())
}
