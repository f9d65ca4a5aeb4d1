//! Fits the logistic-regression detector on nearest-neighbor influence
//! features and evaluates it on held-out points.
//!
//! Validation points (clean and attacked) supply the training features;
//! the detector is then scored on test points it has never seen. M, the
//! number of helpful / harmful training points per feature block, is
//! chosen by cross-validation on the fit split.
//!
//! ```text
//! cargo run --example train_detector
//! ```

use ndarray::ArrayView1;
use nnif::attacks::{attack_batch, AttackConfig, AttackName};
use nnif::data::{gaussian_blobs, split, LabeledDataset, Split};
use nnif::detector::{fit_detector, tune_m, FeatureMask, LrHyper};
use nnif::eval::metrics::{detection_accuracy, roc_auc};
use nnif::influence::{InfluenceEngine, InverseHvpConfig, InverseHvpMethod};
use nnif::model::{init_model, train, ModelParams, TrainConfig};
use nnif::neighbors::{
    embedding_layer, fit_layer_store, gather_features, query_ranks_distances, LayerIndexStore,
    NnifFeatureVector,
};
use nnif::Result;

const M_MAX: usize = 8;

struct Featurizer<'a> {
    model: &'a ModelParams,
    store: LayerIndexStore,
    engine: InfluenceEngine<'a>,
}

impl Featurizer<'_> {
    fn one(&self, index: usize, x: ArrayView1<f64>, y: usize, label: u8) -> Result<NnifFeatureVector> {
        let res = self.engine.result_for(index, x, y, M_MAX, false)?;
        let q = self.model.embedding(x)?;
        let (ranks, dists) = query_ranks_distances(&self.store, q.view())?;
        let lf = gather_features(self.store.layer(), &ranks, &dists, &res.helpful, &res.harmful)?;
        Ok(NnifFeatureVector {
            example_index: index,
            label,
            layers: vec![lf],
        })
    }

    /// Clean and adversarial feature vectors for every correctly
    /// classified point of a split, attacked with `ac`.
    fn split_features(
        &self,
        ds: &LabeledDataset,
        which: Split,
        ac: &AttackConfig,
    ) -> Result<(Vec<NnifFeatureVector>, Vec<NnifFeatureVector>)> {
        let picks: Vec<usize> = ds
            .indices_with(which)
            .into_iter()
            .filter(|&i| self.model.predict(ds.row(i)).unwrap() == ds.label(i))
            .collect();
        let (xs, ys) = ds.gather(&picks)?;
        let records = attack_batch(self.model, xs.view(), &ys, &picks, ac)?;
        let mut normal = Vec::new();
        let mut adv = Vec::new();
        for rec in records.iter().filter(|r| r.success) {
            let i = rec.original_index;
            normal.push(self.one(i, ds.row(i), ds.label(i), 0)?);
            adv.push(self.one(i, rec.x_adv.view(), rec.pred_after, 1)?);
        }
        Ok((normal, adv))
    }
}

fn main() -> Result<()> {
    let raw = gaussian_blobs(3, 200, 2, 0.05, 47)?;
    let ds = split(&raw, 400, 80, 80, 48)?;
    let (train_x, train_y) = ds.gather(&ds.indices_with(Split::Train))?;
    let model0 = init_model(&[2, 16, 3], 49)?;
    let tc = TrainConfig {
        epochs: 30,
        seed: 50,
        ..TrainConfig::default()
    };
    let model = train(&model0, train_x.view(), &train_y, None, &tc)?;

    let train_rows: Vec<usize> = (0..train_x.nrows()).collect();
    let solver = InverseHvpConfig {
        method: InverseHvpMethod::Exact,
        damping: 0.01,
        ..InverseHvpConfig::default()
    };
    let featurizer = Featurizer {
        model: &model,
        store: fit_layer_store(&model, train_x.view(), &train_rows, embedding_layer(&model)?)?,
        engine: InfluenceEngine::new(
            &model,
            train_x.view(),
            &train_y,
            &train_rows,
            tc.weight_decay,
            solver,
        )?,
    };

    let mut ac = AttackConfig::named(AttackName::Pgd);
    ac.epsilon = 0.25;
    ac.step_size = 0.025;
    ac.seed = 51;
    let (fit_normal, fit_adv) = featurizer.split_features(&ds, Split::Val, &ac)?;
    let (test_normal, test_adv) = featurizer.split_features(&ds, Split::Test, &ac)?;
    println!(
        "fit on {} clean + {} adversarial, evaluate on {} + {}\n",
        fit_normal.len(),
        fit_adv.len(),
        test_normal.len(),
        test_adv.len()
    );

    let hyper = LrHyper::default();
    let m = tune_m(&fit_normal, &fit_adv, &[2, 4, 8], 3, FeatureMask::all(), &hyper)?;
    let truncate = |fvs: &[NnifFeatureVector]| -> Result<Vec<NnifFeatureVector>> {
        fvs.iter().map(|fv| fv.truncated(m)).collect()
    };
    let det = fit_detector(
        &truncate(&fit_normal)?,
        &truncate(&fit_adv)?,
        FeatureMask::all(),
        &hyper,
        Some(AttackName::Pgd),
    )?;

    let mut scores = det.scores(&test_normal)?;
    scores.extend(det.scores(&test_adv)?);
    let mut labels = vec![0u8; test_normal.len()];
    labels.extend(vec![1u8; test_adv.len()]);
    println!("tuned M = {m}");
    println!("test AUC      {:.3}", roc_auc(&scores, &labels)?);
    println!("test accuracy {:.3}", detection_accuracy(&scores, &labels, 0.5)?);
    Ok(())
}
