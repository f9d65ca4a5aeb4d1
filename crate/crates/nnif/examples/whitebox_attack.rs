//! Compares the vanilla CW attack with its detector-aware variant, which
//! adds a penalty pulling the adversarial embedding back toward the
//! training points that most support the original prediction.
//!
//! The aware attack should reach a strictly lower feature-space objective
//! on most points: same misclassification, but an embedding that looks
//! more like a clean one to a nearest-neighbor detector.
//!
//! ```text
//! cargo run --example whitebox_attack
//! ```

use ndarray::Array2;
use nnif::attacks::{cw_l2, cw_opt, embed_penalty, AttackConfig, AttackName};
use nnif::data::{gaussian_blobs, split, Split};
use nnif::influence::{InfluenceEngine, InverseHvpConfig, InverseHvpMethod};
use nnif::model::{init_model, train, TrainConfig};
use nnif::Result;

fn main() -> Result<()> {
    let raw = gaussian_blobs(3, 160, 2, 0.05, 57)?;
    let ds = split(&raw, 400, 40, 40, 58)?;
    let (train_x, train_y) = ds.gather(&ds.indices_with(Split::Train))?;
    let model0 = init_model(&[2, 16, 3], 59)?;
    let tc = TrainConfig {
        epochs: 30,
        seed: 60,
        ..TrainConfig::default()
    };
    let model = train(&model0, train_x.view(), &train_y, None, &tc)?;

    let train_rows: Vec<usize> = (0..train_x.nrows()).collect();
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

    let mut plain = AttackConfig::named(AttackName::CwL2);
    plain.opt_steps = 150;
    plain.binary_search_steps = 5;
    let mut aware = AttackConfig::named(AttackName::CwOpt);
    aware.opt_steps = 150;
    aware.binary_search_steps = 5;
    aware.embed_reg_weight = 0.05;

    let mut lower = 0usize;
    let mut total = 0usize;
    println!("{:>5} {:>12} {:>12}", "point", "l* plain", "l* aware");
    for &i in ds.indices_with(Split::Test).iter().take(12) {
        let (x, y) = (ds.row(i), ds.label(i));
        if model.predict(x)? != y {
            continue;
        }
        // the attacker knows which training points the detector will
        // consult: the most helpful ones for this prediction
        let res = engine.result_for(i, x, y, 5, false)?;
        let mut helpful = Array2::zeros((res.helpful.len(), model.embedding_dim()));
        for (r, &p) in res.helpful.iter().enumerate() {
            helpful.row_mut(r).assign(&model.embedding(train_x.row(p))?);
        }

        let rec_plain = cw_l2(&model, x, y, &plain)?;
        let rec_aware = cw_opt(&model, x, y, &aware, helpful.view())?;
        if !(rec_plain.success && rec_aware.success) {
            continue;
        }
        let l_plain = embed_penalty(&model, rec_plain.x_adv.view(), helpful.view(), aware.embed_norm)?;
        let l_aware = embed_penalty(&model, rec_aware.x_adv.view(), helpful.view(), aware.embed_norm)?;
        println!("{i:>5} {l_plain:>12.4} {l_aware:>12.4}");
        total += 1;
        if l_aware < l_plain {
            lower += 1;
        }
    }
    println!("\naware attack strictly lower on {lower}/{total} points");
    Ok(())
}
