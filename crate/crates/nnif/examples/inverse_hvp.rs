//! Compares the three inverse Hessian-vector-product solvers on one
//! trained model: exact dense factorization, conjugate gradients, and
//! LiSSA's truncated Neumann recursion.
//!
//! ```text
//! cargo run --example inverse_hvp
//! ```

use ndarray::ArrayView1;
use nnif::data::{gaussian_blobs, split, Split};
use nnif::influence::{
    inverse_hvp_cg, inverse_hvp_exact, inverse_hvp_lissa, HvpOperator, InverseHvpConfig,
    InverseHvpMethod, ModelHvp,
};
use nnif::model::{init_model, train, TrainConfig};
use nnif::Result;

fn main() -> Result<()> {
    let raw = gaussian_blobs(3, 120, 4, 0.08, 67)?;
    let ds = split(&raw, 300, 30, 30, 68)?;
    let (train_x, train_y) = ds.gather(&ds.indices_with(Split::Train))?;
    let model0 = init_model(&[4, 8, 3], 69)?;
    let tc = TrainConfig {
        epochs: 30,
        seed: 70,
        ..TrainConfig::default()
    };
    let model = train(&model0, train_x.view(), &train_y, None, &tc)?;
    let op = ModelHvp::new(&model, train_x.view(), &train_y, tc.weight_decay)?;
    println!("{} parameters, {} training points", op.dim(), op.n_examples());

    let probe = ds.indices_with(Split::Val)[0];
    let v = model.grad_params(ds.row(probe), ds.label(probe))?;
    let damping = 0.1;

    let exact = inverse_hvp_exact(&op, v.view(), damping)?;
    let cg = inverse_hvp_cg(
        &op,
        v.view(),
        &InverseHvpConfig {
            method: InverseHvpMethod::Cg,
            damping,
            cg_max_iter: 500,
            cg_tol: 1e-10,
            ..InverseHvpConfig::default()
        },
    )?;
    let lissa = inverse_hvp_lissa(
        &op,
        v.view(),
        &InverseHvpConfig {
            method: InverseHvpMethod::Lissa,
            damping,
            lissa_depth: 600,
            lissa_scale: 25.0,
            lissa_repeats: 8,
            lissa_batch: 100,
            seed: 71,
            ..InverseHvpConfig::default()
        },
    )?;

    let rel = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        let num: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    };
    println!("cg    vs exact: relative L2 error {:.2e}", rel(cg.view(), exact.view()));
    println!("lissa vs exact: relative L2 error {:.2e}", rel(lissa.view(), exact.view()));
    Ok(())
}
