//! Datasets: synthetic generators, IDX loading, split bookkeeping.
//!
//! All feature vectors live in the unit box `[0,1]^d`; generators clip after
//! sampling and the IDX loader rescales bytes by 1/255. Examples keep their
//! position in the dataset for their whole life, so influence scores and
//! nearest-neighbor features can refer to stable indices. Splitting tags
//! rows in place rather than reordering them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::rng_from;

const MAGIC: &[u8; 8] = b"NNIFDS01";

/// Which partition a row belongs to. Rows outside the requested split sizes
/// stay `Unused` so indices of the kept rows never shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Unused,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unused => "unused",
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Unused => 3,
        }
    }

    fn from_byte(b: u8) -> Option<Split> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            3 => Some(Split::Unused),
            _ => None,
        }
    }
}

/// A fixed table of examples: features in `[0,1]^d`, integer labels,
/// one split tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    class_count: usize,
    provenance: String,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        class_count: usize,
        provenance: String,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("dataset"));
        }
        if features.nrows() != labels.len() || features.nrows() != splits.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: labels.len().min(splits.len()),
            });
        }
        if class_count < 2 {
            return Err(Error::InvalidParameter(format!(
                "class_count {class_count} < 2"
            )));
        }
        for &y in &labels {
            if y >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: class_count,
                });
            }
        }
        if features.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter(
                "features outside the unit box".into(),
            ));
        }
        Ok(LabeledDataset {
            features,
            labels,
            splits,
            class_count,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Indices carrying the given tag, ascending.
    pub fn indices_with(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Copies the given rows into a dense matrix plus label vector.
    pub fn gather(&self, indices: &[usize]) -> Result<(Array2<f64>, Vec<usize>)> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
        }
        let mut xs = Array2::zeros((indices.len(), self.dim()));
        let mut ys = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            xs.row_mut(r).assign(&self.features.row(i));
            ys.push(self.labels[i]);
        }
        Ok((xs, ys))
    }
}

/// Gaussian blobs: class k's mean sits on a circle of radius 0.3 around the
/// box center in the first two dimensions (evenly spaced angles `2*pi*k/K`),
/// 0.5 in every other dimension; for 1-D data the means are evenly spaced on
/// `[0.2, 0.8]`. Samples are `mean + N(0, spread^2)` per coordinate, clipped
/// to the unit box. Rows are grouped by class: class k occupies rows
/// `k*per_class .. (k+1)*per_class`. All rows start `Unused`; call [`split`].
pub fn gaussian_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!("classes {classes} < 2")));
    }
    if per_class == 0 {
        return Err(Error::InvalidParameter("per_class 0".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("dim 0".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParameter(format!("spread {spread}")));
    }
    let mut centers = Vec::with_capacity(classes);
    for k in 0..classes {
        let mut c = vec![0.5; dim];
        if dim == 1 {
            c[0] = 0.2 + 0.6 * k as f64 / (classes - 1) as f64;
        } else {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            c[0] = 0.5 + 0.3 * angle.cos();
            c[1] = 0.5 + 0.3 * angle.sin();
        }
        centers.push(c);
    }
    let n = classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, spread.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(format!("spread {spread}: {e}")))?;
    for k in 0..classes {
        for i in 0..per_class {
            let row = k * per_class + i;
            for j in 0..dim {
                let v = if spread == 0.0 {
                    centers[k][j]
                } else {
                    centers[k][j] + normal.sample(&mut rng)
                };
                features[[row, j]] = v.clamp(0.0, 1.0);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(
        features,
        labels,
        vec![Split::Unused; n],
        classes,
        format!("blobs(classes={classes},per_class={per_class},dim={dim},spread={spread},seed={seed})"),
    )
}

/// Two concentric rings in 2-D around the box center: class 0 at radius 0.15,
/// class 1 at radius 0.35, radial noise `N(0, noise^2)`, angles uniform.
/// Not linearly separable, so a useful smoke test for the hidden layers.
/// With `noise = 0` every point lies exactly on its circle.
pub fn two_rings(per_class: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if per_class == 0 {
        return Err(Error::InvalidParameter("per_class 0".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise {noise}")));
    }
    let radii = [0.15, 0.35];
    let n = 2 * per_class;
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(format!("noise {noise}: {e}")))?;
    for k in 0..2 {
        for i in 0..per_class {
            let row = k * per_class + i;
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = if noise == 0.0 {
                radii[k]
            } else {
                radii[k] + normal.sample(&mut rng)
            };
            features[[row, 0]] = (0.5 + r * angle.cos()).clamp(0.0, 1.0);
            features[[row, 1]] = (0.5 + r * angle.sin()).clamp(0.0, 1.0);
            labels.push(k);
        }
    }
    LabeledDataset::new(
        features,
        labels,
        vec![Split::Unused; n],
        2,
        format!("rings(per_class={per_class},noise={noise},seed={seed})"),
    )
}

fn read_u32_be(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label pair (the MNIST container format; integers are
/// big-endian). Pixels are rescaled to `[0,1]`. `limit` caps the number of
/// records read; `None` reads everything. The label header must agree with
/// the image header on the record count.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    let f = File::open(images).map_err(|e| Error::io(images, e))?;
    let mut r = BufReader::new(f);
    let magic = read_u32_be(&mut r).map_err(|e| Error::io(images, e))?;
    if magic != 0x0000_0803 {
        return Err(Error::format(images, format!("bad image magic {magic:#x}")));
    }
    let count = read_u32_be(&mut r).map_err(|e| Error::io(images, e))? as usize;
    let rows = read_u32_be(&mut r).map_err(|e| Error::io(images, e))? as usize;
    let cols = read_u32_be(&mut r).map_err(|e| Error::io(images, e))? as usize;

    let lf = File::open(labels).map_err(|e| Error::io(labels, e))?;
    let mut lr = BufReader::new(lf);
    let lmagic = read_u32_be(&mut lr).map_err(|e| Error::io(labels, e))?;
    if lmagic != 0x0000_0801 {
        return Err(Error::format(labels, format!("bad label magic {lmagic:#x}")));
    }
    let lcount = read_u32_be(&mut lr).map_err(|e| Error::io(labels, e))? as usize;
    if lcount != count {
        return Err(Error::format(
            labels,
            format!("label count {lcount} != image count {count}"),
        ));
    }

    let take = limit.map_or(count, |l| l.min(count));
    if take == 0 {
        return Err(Error::Empty("idx selection"));
    }
    let dim = rows * cols;
    let mut pixel_buf = vec![0u8; dim];
    let mut features = Array2::zeros((take, dim));
    for i in 0..take {
        r.read_exact(&mut pixel_buf)
            .map_err(|e| Error::io(images, e))?;
        for (j, &p) in pixel_buf.iter().enumerate() {
            features[[i, j]] = p as f64 / 255.0;
        }
    }
    let mut label_buf = vec![0u8; take];
    lr.read_exact(&mut label_buf)
        .map_err(|e| Error::io(labels, e))?;
    let labels_vec: Vec<usize> = label_buf.iter().map(|&b| b as usize).collect();
    let class_count = labels_vec.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(
        features,
        labels_vec,
        vec![Split::Unused; take],
        class_count.max(2),
        format!("idx({},{},n={take})", images.display(), labels.display()),
    )
}

/// Retags rows with a disjoint random train/val/test assignment of the
/// requested sizes; rows beyond the requested total become `Unused`.
/// Deterministic in the seed.
pub fn split(
    ds: &LabeledDataset,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let total = n_train + n_val + n_test;
    if total > ds.len() {
        return Err(Error::InvalidParameter(format!(
            "split sizes {n_train}+{n_val}+{n_test} exceed dataset size {}",
            ds.len()
        )));
    }
    if n_train == 0 {
        return Err(Error::InvalidParameter("empty train split".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng_from(seed));
    let mut splits = vec![Split::Unused; ds.len()];
    for (pos, &i) in order.iter().enumerate() {
        splits[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else if pos < total {
            Split::Test
        } else {
            Split::Unused
        };
    }
    LabeledDataset::new(
        ds.features.clone(),
        ds.labels.clone(),
        splits,
        ds.class_count,
        ds.provenance.clone(),
    )
}

/// Indices in the given split that the model classifies correctly,
/// strictly increasing. Adversarial evaluation starts from these.
pub fn filter_correct(
    model: &ModelParams,
    ds: &LabeledDataset,
    split: Split,
) -> Result<Vec<usize>> {
    if model.input_dim() != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: ds.dim(),
        });
    }
    let mut out = Vec::new();
    for i in 0..ds.len() {
        if ds.splits[i] == split && model.predict(ds.row(i))? == ds.labels[i] {
            out.push(i);
        }
    }
    Ok(out)
}

/// Writes the binary dataset format: magic `NNIFDS01`, header, labels,
/// split tags, then row-major features (little-endian f64).
pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    use crate::io_util::{write_f64, write_str, write_u32};
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    write_u32(&mut w, ds.len() as u32).map_err(io)?;
    write_u32(&mut w, ds.dim() as u32).map_err(io)?;
    write_u32(&mut w, ds.class_count as u32).map_err(io)?;
    write_str(&mut w, &ds.provenance).map_err(io)?;
    for &y in &ds.labels {
        write_u32(&mut w, y as u32).map_err(io)?;
    }
    for &s in &ds.splits {
        w.write_all(&[s.to_byte()]).map_err(io)?;
    }
    for v in ds.features.iter() {
        write_f64(&mut w, *v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads the binary dataset format back; validates magic and invariants.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    use crate::io_util::{check_magic, read_f64, read_str, read_u32, read_u8};
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    check_magic(&mut r, MAGIC, path)?;
    let io = |e| Error::io(path, e);
    let n = read_u32(&mut r).map_err(io)? as usize;
    let dim = read_u32(&mut r).map_err(io)? as usize;
    let class_count = read_u32(&mut r).map_err(io)? as usize;
    let provenance = read_str(&mut r, path)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32(&mut r).map_err(io)? as usize);
    }
    let mut splits = Vec::with_capacity(n);
    for _ in 0..n {
        let b = read_u8(&mut r).map_err(io)?;
        splits.push(
            Split::from_byte(b).ok_or_else(|| Error::format(path, format!("split tag {b}")))?,
        );
    }
    let mut features = Array2::zeros((n, dim));
    for i in 0..n {
        for j in 0..dim {
            features[[i, j]] = read_f64(&mut r).map_err(io)?;
        }
    }
    LabeledDataset::new(features, labels, splits, class_count, provenance)
}

/// CSV export: header `f0,...,f{d-1},label,split`, one row per example.
pub fn write_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..ds.dim())
        .map(|j| format!("f{j}"))
        .chain(["label".to_string(), "split".to_string()])
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for i in 0..ds.len() {
        let mut cells: Vec<String> = ds.row(i).iter().map(|v| format!("{v}")).collect();
        cells.push(format!("{}", ds.labels[i]));
        cells.push(ds.splits[i].as_str().to_string());
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
