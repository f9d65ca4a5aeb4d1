//! Exact nearest-neighbor ranks and distances over per-layer activations.
//!
//! For each activation layer a [`LayerIndexStore`] holds the embeddings of
//! every training point (row order = training order). A query returns the
//! full rank vector R and distance vector D over the training set: `D[j]`
//! is the L2 distance to training point j and `R[j]` is j's position in
//! the ascending-distance ordering. The NNIF features for a test point are
//! then just R and D gathered at the influence-selected helpful and
//! harmful indices.
//!
//! Everything is brute force on purpose: the ranking is over the entire
//! training set (k = N_train), so no spatial index could skip work, and at
//! desk scale (a few thousand points) exactness is cheap.

use std::io::Write as IoWrite;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Per-layer embeddings of the training points, immutable after fit.
#[derive(Debug, Clone)]
pub struct LayerIndexStore {
    layer: usize,
    rows: Array2<f64>,
    train_indices: Vec<usize>,
}

impl LayerIndexStore {
    /// Builds a store from precomputed embedding rows. `train_indices[i]`
    /// records which original dataset row produced `rows[i]`.
    pub fn from_rows(layer: usize, rows: Array2<f64>, train_indices: Vec<usize>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Empty("layer store rows"));
        }
        if rows.nrows() != train_indices.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.nrows(),
                got: train_indices.len(),
            });
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer store rows"));
        }
        Ok(Self {
            layer,
            rows,
            train_indices,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Number of stored training points.
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Embedding dimension at this layer.
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    /// Original dataset indices of the stored rows, in row order.
    pub fn train_indices(&self) -> &[usize] {
        &self.train_indices
    }
}

/// Computes the activations of every training point at one hidden layer
/// and wraps them in a store. `layer` indexes the hidden activations in
/// forward order, so the embedding layer of a net with H hidden layers
/// is `H - 1`.
pub fn fit_layer_store(
    model: &ModelParams,
    xs: ArrayView2<f64>,
    train_indices: &[usize],
    layer: usize,
) -> Result<LayerIndexStore> {
    if layer >= model.hidden_layer_count() {
        return Err(Error::IndexOutOfRange {
            index: layer,
            len: model.hidden_layer_count(),
        });
    }
    if xs.nrows() != train_indices.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.nrows(),
            got: train_indices.len(),
        });
    }
    if xs.nrows() == 0 {
        return Err(Error::Empty("layer store rows"));
    }
    let width = model.arch()[layer + 1];
    let mut rows = Array2::zeros((xs.nrows(), width));
    for (i, x) in xs.outer_iter().enumerate() {
        let trace = model.forward(x)?;
        rows.row_mut(i).assign(&trace.hidden[layer]);
    }
    LayerIndexStore::from_rows(layer, rows, train_indices.to_vec())
}

/// Hidden-layer index of the model's embedding layer (the input to the
/// final linear layer).
pub fn embedding_layer(model: &ModelParams) -> Result<usize> {
    match model.hidden_layer_count() {
        0 => Err(Error::InvalidArchitecture(
            "model has no hidden layers to embed at".into(),
        )),
        h => Ok(h - 1),
    }
}

/// Full rank and distance vectors of the training set around a query.
///
/// `D[j]` is the L2 distance from the query to training point j; `R[j]`
/// is j's 0-based position when training points are sorted by ascending
/// distance, ties broken by lower training row. Distances are compared in
/// squared form and square-rooted once at the end so ties are exact.
pub fn query_ranks_distances(
    store: &LayerIndexStore,
    q: ArrayView1<f64>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if q.len() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            got: q.len(),
        });
    }
    let n = store.len();
    let mut sq = Vec::with_capacity(n);
    for row in store.rows.outer_iter() {
        let mut acc = 0.0;
        for (a, b) in q.iter().zip(row.iter()) {
            let diff = a - b;
            acc += diff * diff;
        }
        sq.push(acc);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sq[a].total_cmp(&sq[b]).then(a.cmp(&b)));
    let mut ranks = vec![0usize; n];
    for (pos, &j) in order.iter().enumerate() {
        ranks[j] = pos;
    }
    let dists = sq.into_iter().map(f64::sqrt).collect();
    Ok((ranks, dists))
}

/// One layer's worth of NNIF features: ranks and distances of the helpful
/// and harmful training points, in influence order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatures {
    pub layer: usize,
    pub helpful_ranks: Vec<usize>,
    pub helpful_dists: Vec<f64>,
    pub harmful_ranks: Vec<usize>,
    pub harmful_dists: Vec<f64>,
}

impl LayerFeatures {
    pub fn m(&self) -> usize {
        self.helpful_ranks.len()
    }
}

/// Gathers R and D at the helpful and harmful indices for one layer.
/// `helpful` and `harmful` must index into the same training subset the
/// rank/distance vectors were computed over.
pub fn gather_features(
    layer: usize,
    ranks: &[usize],
    dists: &[f64],
    helpful: &[usize],
    harmful: &[usize],
) -> Result<LayerFeatures> {
    if ranks.len() != dists.len() {
        return Err(Error::DimensionMismatch {
            expected: ranks.len(),
            got: dists.len(),
        });
    }
    let pick = |sel: &[usize]| -> Result<(Vec<usize>, Vec<f64>)> {
        let mut r = Vec::with_capacity(sel.len());
        let mut d = Vec::with_capacity(sel.len());
        for &j in sel {
            if j >= ranks.len() {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: ranks.len(),
                });
            }
            r.push(ranks[j]);
            d.push(dists[j]);
        }
        Ok((r, d))
    };
    let (helpful_ranks, helpful_dists) = pick(helpful)?;
    let (harmful_ranks, harmful_dists) = pick(harmful)?;
    Ok(LayerFeatures {
        layer,
        helpful_ranks,
        helpful_dists,
        harmful_ranks,
        harmful_dists,
    })
}

/// Complete feature vector for one example: per-layer rank/distance
/// blocks plus the detector label (0 normal, 1 adversarial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnifFeatureVector {
    /// Index of the example in its source dataset.
    pub example_index: usize,
    /// 0 for normal, 1 for adversarial.
    pub label: u8,
    pub layers: Vec<LayerFeatures>,
}

impl NnifFeatureVector {
    /// The common M across layers.
    pub fn m(&self) -> Result<usize> {
        let first = self
            .layers
            .first()
            .ok_or(Error::Empty("feature vector layers"))?;
        let m = first.m();
        for lf in &self.layers {
            for len in [
                lf.helpful_ranks.len(),
                lf.helpful_dists.len(),
                lf.harmful_ranks.len(),
                lf.harmful_dists.len(),
            ] {
                if len != m {
                    return Err(Error::DimensionMismatch {
                        expected: m,
                        got: len,
                    });
                }
            }
        }
        Ok(m)
    }

    /// Layer ids in stored order.
    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|lf| lf.layer).collect()
    }

    /// Keeps only the first `m` entries of every block. Influence
    /// selections are nested (the top m of a longer selection is its
    /// prefix), so features stored at a large M can be truncated to any
    /// smaller M without recomputation.
    pub fn truncated(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.m()? {
            return Err(Error::InvalidParameter(format!(
                "cannot truncate features of M={} to m={m}",
                self.m()?
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|lf| LayerFeatures {
                layer: lf.layer,
                helpful_ranks: lf.helpful_ranks[..m].to_vec(),
                helpful_dists: lf.helpful_dists[..m].to_vec(),
                harmful_ranks: lf.harmful_ranks[..m].to_vec(),
                harmful_dists: lf.harmful_dists[..m].to_vec(),
            })
            .collect();
        Ok(Self {
            example_index: self.example_index,
            label: self.label,
            layers,
        })
    }

    /// Keeps only the layers whose ids appear in `keep` (stored order
    /// preserved). Errors if a requested id is absent.
    pub fn layer_subset(&self, keep: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(keep.len());
        for &id in keep {
            let lf = self
                .layers
                .iter()
                .find(|lf| lf.layer == id)
                .ok_or(Error::IndexOutOfRange {
                    index: id,
                    len: self.layers.len(),
                })?;
            layers.push(lf.clone());
        }
        if layers.is_empty() {
            return Err(Error::Empty("feature vector layers"));
        }
        Ok(Self {
            example_index: self.example_index,
            label: self.label,
            layers,
        })
    }
}

/// Writes feature vectors in long form with header
/// `example,layer,kind,position,value,label`; kinds are emitted in the
/// fixed order Rup, Dup, Rdn, Ddn within each layer.
pub fn write_features_csv(path: &Path, feats: &[NnifFeatureVector]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let put = |w: &mut dyn IoWrite, s: String| -> Result<()> {
        w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    };
    put(&mut w, "example,layer,kind,position,value,label\n".into())?;
    for fv in feats {
        for lf in &fv.layers {
            for (pos, &r) in lf.helpful_ranks.iter().enumerate() {
                put(
                    &mut w,
                    format!(
                        "{},{},Rup,{},{},{}\n",
                        fv.example_index, lf.layer, pos, r, fv.label
                    ),
                )?;
            }
            for (pos, &d) in lf.helpful_dists.iter().enumerate() {
                put(
                    &mut w,
                    format!(
                        "{},{},Dup,{},{},{}\n",
                        fv.example_index, lf.layer, pos, d, fv.label
                    ),
                )?;
            }
            for (pos, &r) in lf.harmful_ranks.iter().enumerate() {
                put(
                    &mut w,
                    format!(
                        "{},{},Rdn,{},{},{}\n",
                        fv.example_index, lf.layer, pos, r, fv.label
                    ),
                )?;
            }
            for (pos, &d) in lf.harmful_dists.iter().enumerate() {
                put(
                    &mut w,
                    format!(
                        "{},{},Ddn,{},{},{}\n",
                        fv.example_index, lf.layer, pos, d, fv.label
                    ),
                )?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn store_1d(values: &[f64]) -> LayerIndexStore {
        let rows = Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap();
        LayerIndexStore::from_rows(0, rows, (0..values.len()).collect()).unwrap()
    }

    #[test]
    fn hand_example_ranks_and_distances() {
        let store = store_1d(&[0.0, 1.0, 3.0]);
        let (r, d) = query_ranks_distances(&store, array![0.9].view()).unwrap();
        assert_eq!(r, vec![1, 0, 2]);
        let expect = [0.9, 0.1, 2.1];
        for (got, want) in d.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn query_at_a_training_row_ranks_it_first() {
        let store = store_1d(&[0.2, 0.7, 0.4]);
        let (r, d) = query_ranks_distances(&store, array![0.7].view()).unwrap();
        assert_eq!(r[1], 0);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn ties_rank_the_lower_row_first() {
        let store = store_1d(&[0.5, 0.5, 0.1]);
        let (r, _) = query_ranks_distances(&store, array![0.5].view()).unwrap();
        assert_eq!(r, vec![0, 1, 2]);
    }

    #[test]
    fn rank_vector_is_a_permutation_with_nondecreasing_distances() {
        let store = store_1d(&[0.9, 0.1, 0.4, 0.3, 0.6]);
        let (r, d) = query_ranks_distances(&store, array![0.35].view()).unwrap();
        let mut sorted = r.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..5).collect::<Vec<_>>());
        let mut by_rank: Vec<(usize, f64)> = r.iter().copied().zip(d.iter().copied()).collect();
        by_rank.sort_by_key(|&(rank, _)| rank);
        for pair in by_rank.windows(2) {
            assert!(pair[0].1 <= pair[1].1);
        }
        let min_idx = (0..5).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        assert_eq!(r[min_idx], 0);
    }

    #[test]
    fn store_rows_match_per_point_traces() {
        let model = init_model(&[3, 6, 4, 2], 11).unwrap();
        let n = 50;
        let xs = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 3 + j) as f64 * 0.319).fract());
        let idx: Vec<usize> = (0..n).collect();
        for layer in 0..model.hidden_layer_count() {
            let store = fit_layer_store(&model, xs.view(), &idx, layer).unwrap();
            assert_eq!(store.layer(), layer);
            for i in 0..n {
                let trace = model.forward(xs.row(i)).unwrap();
                let row = store.rows().row(i).to_owned();
                assert_eq!(row, trace.hidden[layer]);
            }
        }
    }

    #[test]
    fn embedding_layer_store_matches_embedding_calls() {
        let model = init_model(&[2, 5, 3], 7).unwrap();
        let xs = array![[0.1, 0.9], [0.4, 0.2], [0.8, 0.6]];
        let layer = embedding_layer(&model).unwrap();
        assert_eq!(layer, 0);
        let store = fit_layer_store(&model, xs.view(), &[0, 1, 2], layer).unwrap();
        for i in 0..3 {
            let emb = model.embedding(xs.row(i)).unwrap();
            assert_eq!(store.rows().row(i).to_owned(), emb);
        }
    }

    #[test]
    fn invalid_layer_is_rejected() {
        let model = init_model(&[2, 5, 3], 7).unwrap();
        let xs = array![[0.1, 0.9]];
        assert!(matches!(
            fit_layer_store(&model, xs.view(), &[0], 1),
            Err(Error::IndexOutOfRange { .. })
        ));
        let softmax_reg = init_model(&[4, 3], 0).unwrap();
        assert!(embedding_layer(&softmax_reg).is_err());
    }

    #[test]
    fn query_dimension_mismatch_is_rejected() {
        let store = store_1d(&[0.0, 1.0]);
        let q = Array1::zeros(2);
        assert!(matches!(
            query_ranks_distances(&store, q.view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gather_picks_the_selected_entries_in_order() {
        let ranks = vec![4, 2, 0, 1, 3];
        let dists = vec![4.0, 2.0, 0.5, 1.0, 3.0];
        let lf = gather_features(0, &ranks, &dists, &[2, 4], &[0, 1]).unwrap();
        assert_eq!(lf.helpful_ranks, vec![0, 3]);
        assert_eq!(lf.helpful_dists, vec![0.5, 3.0]);
        assert_eq!(lf.harmful_ranks, vec![4, 2]);
        assert_eq!(lf.harmful_dists, vec![4.0, 2.0]);
        assert!(matches!(
            gather_features(0, &ranks, &dists, &[5], &[0]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn five_point_walk_matches_hand_trace() {
        // 1-D embeddings 0.0, 0.1, 0.5, 0.8, 0.9 and query 0.45:
        // distances 0.45, 0.35, 0.05, 0.35, 0.45; ascending order with the
        // index tiebreak is 2, 1, 3, 0, 4.
        let store = store_1d(&[0.0, 0.1, 0.5, 0.8, 0.9]);
        let (r, d) = query_ranks_distances(&store, array![0.45].view()).unwrap();
        assert_eq!(r, vec![3, 1, 0, 2, 4]);
        let lf = gather_features(0, &r, &d, &[3, 1], &[0, 4]).unwrap();
        assert_eq!(lf.helpful_ranks, vec![2, 1]);
        assert_eq!(lf.harmful_ranks, vec![3, 4]);
        assert!((lf.helpful_dists[0] - 0.35).abs() < 1e-12);
        assert!((lf.harmful_dists[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn truncation_takes_prefixes() {
        let fv = NnifFeatureVector {
            example_index: 7,
            label: 1,
            layers: vec![LayerFeatures {
                layer: 0,
                helpful_ranks: vec![5, 6, 7],
                helpful_dists: vec![0.5, 0.6, 0.7],
                harmful_ranks: vec![1, 2, 3],
                harmful_dists: vec![0.1, 0.2, 0.3],
            }],
        };
        assert_eq!(fv.m().unwrap(), 3);
        let t = fv.truncated(2).unwrap();
        assert_eq!(t.layers[0].helpful_ranks, vec![5, 6]);
        assert_eq!(t.layers[0].harmful_dists, vec![0.1, 0.2]);
        assert_eq!(t.example_index, 7);
        assert!(fv.truncated(0).is_err());
        assert!(fv.truncated(4).is_err());
    }

    #[test]
    fn layer_subset_preserves_requested_order() {
        let mk = |layer| LayerFeatures {
            layer,
            helpful_ranks: vec![layer],
            helpful_dists: vec![layer as f64],
            harmful_ranks: vec![layer],
            harmful_dists: vec![layer as f64],
        };
        let fv = NnifFeatureVector {
            example_index: 0,
            label: 0,
            layers: vec![mk(0), mk(1), mk(2)],
        };
        let sub = fv.layer_subset(&[2, 0]).unwrap();
        assert_eq!(sub.layer_ids(), vec![2, 0]);
        assert!(fv.layer_subset(&[5]).is_err());
    }

    #[test]
    fn features_csv_lines_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let fv = NnifFeatureVector {
            example_index: 3,
            label: 1,
            layers: vec![LayerFeatures {
                layer: 1,
                helpful_ranks: vec![2],
                helpful_dists: vec![0.25],
                harmful_ranks: vec![9],
                harmful_dists: vec![1.5],
            }],
        };
        write_features_csv(&path, &[fv]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines,
            vec![
                "example,layer,kind,position,value,label",
                "3,1,Rup,0,2,1",
                "3,1,Dup,0,0.25,1",
                "3,1,Rdn,0,9,1",
                "3,1,Ddn,0,1.5,1",
            ]
        );
    }

    proptest! {
        #[test]
        fn ranks_are_always_a_permutation(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..40),
            q in -5.0f64..5.0,
        ) {
            let store = store_1d(&vals);
            let (r, d) = query_ranks_distances(&store, array![q].view()).unwrap();
            let mut sorted = r.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..vals.len()).collect::<Vec<_>>());
            let mut by_rank: Vec<(usize, f64)> =
                r.iter().copied().zip(d.iter().copied()).collect();
            by_rank.sort_by_key(|&(rank, _)| rank);
            for pair in by_rank.windows(2) {
                prop_assert!(pair[0].1 <= pair[1].1);
            }
        }
    }
}
