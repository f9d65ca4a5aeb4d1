//! The six cached pipeline stages over one run directory.
//!
//! Layout: `<run_dir>/{manifest.json, data.bin, model.bin, adv/,
//! influence/, features/, detector/, reports/}`. Every stage checks its
//! upstream stages' cache keys and artifact hashes before reading them,
//! reruns only when its own key or artifacts are invalid, and records what
//! it wrote in the manifest. All randomness is derived from the run seed
//! through fixed per-stage streams, so a stage rerun rewrites byte-identical
//! artifacts and two runs with the same effective config produce identical
//! reports.
//!
//! The detector-aware CW attack is the one attack that does not run in the
//! attack stage: its objective needs the helpful-example embeddings of each
//! test point, which exist only after clean-test influence is computed, so
//! it runs inside the influence stage.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_batch, cw_opt, embed_penalty, load_records, save_records, AdversarialRecord,
    AttackName,
};
use crate::data::{
    filter_correct, gaussian_blobs, load_dataset, load_idx, save_dataset, split, two_rings,
    LabeledDataset, Split,
};
use crate::detector::{fit_detector, save_detector, tune_m, FeatureMask};
use crate::error::{Error, Result};
use crate::eval::experiments::{detection_scores, lstar_stats, LstarStats};
use crate::eval::metrics::roc_points;
use crate::eval::report::{
    self, emit_all, summarize_records, CleanAccuracy, ExperimentReport,
};
use crate::eval::{
    run_ablation, run_detection, run_generalization, run_whitebox, DetectionSettings, FeatureSet,
    LayerMode,
};
use crate::influence::{
    load_influence, save_influence, subsample_count, subsample_train, InfluenceCache,
    InfluenceEngine, InfluenceResult,
};
use crate::model::{accuracy, init_model, load_model, save_model, train, ModelParams};
use crate::neighbors::{
    embedding_layer, fit_layer_store, gather_features, query_ranks_distances, LayerIndexStore,
    NnifFeatureVector,
};
use crate::pipeline::config::{DatasetKind, RunConfig};
use crate::pipeline::manifest::{hash_file, stage_key, RunManifest};
use crate::rng::derive_seed;

pub const DATA_FILE: &str = "data.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const REPORTS_DIR: &str = "reports";
const SELECTION_FILE: &str = "adv/selection.json";
const LOCK_FILE: &str = ".lock";

const SALT_DATA: u64 = 0xD001;
const SALT_SPLIT: u64 = 0xD002;
const SALT_INIT: u64 = 0x1001;
const SALT_TRAIN: u64 = 0x1002;
const SALT_SELECT_VAL: u64 = 0x5E01;
const SALT_SELECT_TEST: u64 = 0x5E02;
const SALT_SUBSAMPLE: u64 = 0x50B5;
const SALT_DETECTOR: u64 = 0xDE7E;

/// Seed stream for one attack on one split.
fn attack_salt(attack: AttackName, is_test: bool) -> u64 {
    0xA700 + 2 * attack.to_byte() as u64 + is_test as u64
}

/// Derived seed clamped to 63 bits so config snapshots stay representable
/// as TOML integers.
fn stream_seed(global: u64, salt: u64) -> u64 {
    derive_seed(global, salt) & (i64::MAX as u64)
}

fn adv_rel(attack: AttackName, split: Split) -> String {
    format!("adv/{}_{}.bin", attack.as_str(), split.as_str())
}

fn influence_rel(tag: &str) -> String {
    format!("influence/{tag}.bin")
}

fn features_rel(attack: AttackName) -> String {
    format!("features/{}.json", attack.as_str())
}

fn features_csv_rel(attack: AttackName, split: Split) -> String {
    format!("features/{}_{}.csv", attack.as_str(), split.as_str())
}

fn detector_rel(attack: AttackName) -> String {
    format!("detector/{}.bin", attack.as_str())
}

/// The pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageName {
    Train,
    Attack,
    Influence,
    Features,
    Detect,
    Eval,
}

impl StageName {
    pub const ORDER: [StageName; 6] = [
        StageName::Train,
        StageName::Attack,
        StageName::Influence,
        StageName::Features,
        StageName::Detect,
        StageName::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Train => "train",
            StageName::Attack => "attack",
            StageName::Influence => "influence",
            StageName::Features => "features",
            StageName::Detect => "detect",
            StageName::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<StageName> {
        Self::ORDER
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown stage `{s}` (expected train, attack, influence, features, \
                     detect, eval, or all)"
                ))
            })
    }
}

/// What [`Pipeline::run`] did for a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    /// The stage executed; `wall` is its runtime.
    Ran { wall: Duration },
    /// Cache key and artifacts were valid; nothing recomputed.
    Cached,
}

/// Exclusive ownership of a run directory, released on drop.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<LockGuard> {
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = write!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Points that enter the attack, influence, and feature stages: correctly
/// classified, capped, ascending dataset indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Selection {
    val: Vec<usize>,
    test: Vec<usize>,
}

/// One run directory plus its config and manifest. Creating it takes the
/// directory lock; drop the pipeline to release it.
pub struct Pipeline {
    cfg: RunConfig,
    dir: PathBuf,
    manifest: RunManifest,
    _lock: LockGuard,
}

impl Pipeline {
    /// Validates the config, prepares the directory layout, takes the lock,
    /// and records the effective config in the manifest.
    pub fn open(cfg: RunConfig, dir: &Path) -> Result<Pipeline> {
        cfg.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for sub in ["adv", "influence", "features", "detector", REPORTS_DIR] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let lock = LockGuard::acquire(dir)?;
        let config_toml = cfg.canonical_toml()?;
        let config_hash = cfg.config_hash()?;
        let manifest = match RunManifest::load(dir)? {
            Some(mut m) => {
                m.version = env!("CARGO_PKG_VERSION").to_string();
                m.run_name = cfg.run_name.clone();
                m.seed = cfg.seed;
                m.config_hash = config_hash;
                m.config_toml = config_toml;
                m
            }
            None => RunManifest::new(&cfg.run_name, cfg.seed, &config_hash, &config_toml),
        };
        manifest.save(dir)?;
        Ok(Pipeline {
            cfg,
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join(REPORTS_DIR)
    }

    /// The report the eval stage wrote.
    pub fn load_report(&self) -> Result<ExperimentReport> {
        let path = self.reports_dir().join(report::REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Runs one stage: validates every upstream stage, skips the work when
    /// the cache is valid (unless `force`), and records the result.
    pub fn run(&mut self, stage: StageName, force: bool) -> Result<StageOutcome> {
        self.check_upstream(stage)?;
        let key = self.key_for(stage)?;
        if !force && self.manifest.stage_valid(&self.dir, stage.as_str(), &key)? {
            return Ok(StageOutcome::Cached);
        }
        let work: fn(&Pipeline) -> Result<Vec<String>> = match stage {
            StageName::Train => Self::work_train,
            StageName::Attack => Self::work_attack,
            StageName::Influence => Self::work_influence,
            StageName::Features => Self::work_features,
            StageName::Detect => Self::work_detect,
            StageName::Eval => Self::work_eval,
        };
        let t0 = Instant::now();
        let artifacts = work(self)?;
        let wall = t0.elapsed();
        let mut hashes = BTreeMap::new();
        for rel in artifacts {
            let hash = hash_file(&self.dir.join(&rel))?;
            hashes.insert(rel, hash);
        }
        self.manifest
            .record_stage(stage.as_str(), key, hashes, wall.as_millis() as u64);
        self.manifest.save(&self.dir)?;
        Ok(StageOutcome::Ran { wall })
    }

    /// Runs every stage in order, reusing valid caches.
    pub fn run_all(&mut self, force: bool) -> Result<Vec<(StageName, StageOutcome)>> {
        StageName::ORDER
            .into_iter()
            .map(|s| Ok((s, self.run(s, force)?)))
            .collect()
    }

    fn check_upstream(&self, stage: StageName) -> Result<()> {
        for up in StageName::ORDER.into_iter().take_while(|s| *s != stage) {
            let key = self.key_for(up)?;
            if !self.manifest.stage_valid(&self.dir, up.as_str(), &key)? {
                return Err(Error::MissingStage(up.as_str()));
            }
        }
        Ok(())
    }

    fn slice_json<T: Serialize>(v: &T) -> Result<String> {
        serde_json::to_string(v).map_err(|e| Error::Config(format!("serialize config slice: {e}")))
    }

    fn key_for(&self, stage: StageName) -> Result<String> {
        let version = env!("CARGO_PKG_VERSION");
        let key = match stage {
            StageName::Train => stage_key(&[
                version,
                "train",
                &self.cfg.seed.to_string(),
                &Self::slice_json(&self.cfg.dataset)?,
                &Self::slice_json(&self.cfg.model)?,
                &Self::slice_json(&self.cfg.training)?,
            ]),
            StageName::Attack => stage_key(&[
                version,
                "attack",
                &self.key_for(StageName::Train)?,
                &Self::slice_json(&self.cfg.standard_attacks())?,
                &Self::slice_json(&(
                    self.cfg.influence.max_val_points,
                    self.cfg.influence.max_test_points,
                ))?,
            ]),
            StageName::Influence => stage_key(&[
                version,
                "influence",
                &self.key_for(StageName::Attack)?,
                &Self::slice_json(&self.cfg.influence)?,
                &Self::slice_json(&self.cfg.cw_opt())?,
            ]),
            StageName::Features => stage_key(&[
                version,
                "features",
                &self.key_for(StageName::Influence)?,
                &Self::slice_json(&self.cfg.features)?,
            ]),
            StageName::Detect => stage_key(&[
                version,
                "detect",
                &self.key_for(StageName::Features)?,
                &Self::slice_json(&self.cfg.detection)?,
            ]),
            StageName::Eval => stage_key(&[
                version,
                "eval",
                &self.key_for(StageName::Detect)?,
                &Self::slice_json(&self.cfg.eval)?,
                &self.cfg.run_name,
                &self.cfg.config_hash()?,
            ]),
        };
        Ok(key)
    }

    fn build_dataset(&self) -> Result<LabeledDataset> {
        let d = &self.cfg.dataset;
        let total = d.train + d.val + d.test;
        let gen_seed = stream_seed(self.cfg.seed, SALT_DATA);
        let raw = match d.kind {
            DatasetKind::Blobs => {
                let per_class = total.div_ceil(d.classes);
                gaussian_blobs(d.classes, per_class, d.dim, d.spread, gen_seed)?
            }
            DatasetKind::Rings => two_rings(total.div_ceil(2), d.noise, gen_seed)?,
            DatasetKind::Idx => {
                let images = d.images.as_ref().expect("validated");
                let labels = d.labels.as_ref().expect("validated");
                load_idx(images, labels, d.limit)?
            }
        };
        split(&raw, d.train, d.val, d.test, stream_seed(self.cfg.seed, SALT_SPLIT))
    }

    fn work_train(&self) -> Result<Vec<String>> {
        let ds = self.build_dataset()?;
        save_dataset(&ds, &self.dir.join(DATA_FILE))?;
        let mut arch = vec![ds.dim()];
        arch.extend_from_slice(&self.cfg.model.hidden);
        arch.push(ds.class_count());
        let model0 = init_model(&arch, stream_seed(self.cfg.seed, SALT_INIT))?;
        let (tx, ty) = ds.gather(&ds.indices_with(Split::Train))?;
        let (vx, vy) = ds.gather(&ds.indices_with(Split::Val))?;
        let mut tc = self.cfg.training.clone();
        tc.seed = stream_seed(self.cfg.seed, SALT_TRAIN);
        let model = train(&model0, tx.view(), &ty, Some((vx.view(), &vy)), &tc)?;
        save_model(&model, &self.dir.join(MODEL_FILE))?;
        Ok(vec![DATA_FILE.into(), MODEL_FILE.into()])
    }

    fn load_inputs(&self) -> Result<(LabeledDataset, ModelParams)> {
        let ds = load_dataset(&self.dir.join(DATA_FILE))?;
        let model = load_model(&self.dir.join(MODEL_FILE))?;
        Ok((ds, model))
    }

    fn load_selection(&self) -> Result<Selection> {
        let path = self.dir.join(SELECTION_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn work_attack(&self) -> Result<Vec<String>> {
        let (ds, model) = self.load_inputs()?;
        let sel = Selection {
            val: select_points(
                &model,
                &ds,
                Split::Val,
                self.cfg.influence.max_val_points,
                stream_seed(self.cfg.seed, SALT_SELECT_VAL),
            )?,
            test: select_points(
                &model,
                &ds,
                Split::Test,
                self.cfg.influence.max_test_points,
                stream_seed(self.cfg.seed, SALT_SELECT_TEST),
            )?,
        };
        let sel_path = self.dir.join(SELECTION_FILE);
        let text = serde_json::to_string_pretty(&sel)
            .map_err(|e| Error::format(&sel_path, e.to_string()))?;
        std::fs::write(&sel_path, text).map_err(|e| Error::io(&sel_path, e))?;

        let mut artifacts = vec![SELECTION_FILE.to_string()];
        for attack_cfg in self.cfg.standard_attacks() {
            for (split, indices) in [(Split::Val, &sel.val), (Split::Test, &sel.test)] {
                let (xs, ys) = ds.gather(indices)?;
                let mut ac = attack_cfg.clone();
                ac.seed = stream_seed(
                    self.cfg.seed,
                    attack_salt(ac.attack, split == Split::Test),
                );
                let records = attack_batch(&model, xs.view(), &ys, indices, &ac)?;
                let rel = adv_rel(ac.attack, split);
                save_records(&records, &ac, &self.dir.join(&rel))?;
                artifacts.push(rel);
            }
        }
        Ok(artifacts)
    }

    fn work_influence(&self) -> Result<Vec<String>> {
        let (ds, model) = self.load_inputs()?;
        let sel = self.load_selection()?;
        let train_idx = ds.indices_with(Split::Train);
        let (tx, ty) = ds.gather(&train_idx)?;
        let m = self.cfg.influence.m_max;
        let invert = self.cfg.influence.invert_sign;
        let weight_decay = self.cfg.training.weight_decay;

        let full: Vec<usize> = (0..train_idx.len()).collect();
        let count = subsample_count(train_idx.len(), self.cfg.influence.subsample_frac)?;
        let test_subset = if count == train_idx.len() {
            full.clone()
        } else {
            let mut s = subsample_train(
                train_idx.len(),
                count,
                stream_seed(self.cfg.seed, SALT_SUBSAMPLE),
            )?;
            s.sort_unstable();
            s
        };
        if m > test_subset.len() {
            return Err(Error::Config(format!(
                "influence.m_max {m} exceeds the subsampled training subset ({})",
                test_subset.len()
            )));
        }

        let val_engine = InfluenceEngine::new(
            &model,
            tx.view(),
            &ty,
            &full,
            weight_decay,
            self.cfg.influence.solver.clone(),
        )?;
        let test_engine = InfluenceEngine::new(
            &model,
            tx.view(),
            &ty,
            &test_subset,
            weight_decay,
            self.cfg.influence.solver.clone(),
        )?;
        let score = |engine: &InfluenceEngine,
                     pts: &[(usize, Array1<f64>, usize)]|
         -> Result<Vec<InfluenceResult>> {
            pts.par_iter()
                .map(|(idx, x, y)| engine.result_for(*idx, x.view(), *y, m, invert))
                .collect()
        };
        // dataset indices behind each engine's subset rows
        let full_ds: Vec<usize> = train_idx.clone();
        let test_subset_ds: Vec<usize> = test_subset.iter().map(|&p| train_idx[p]).collect();

        let mut artifacts = Vec::new();
        let save = |tag: &str, subset_ds: &[usize], results: Vec<InfluenceResult>| -> Result<String> {
            let cache = InfluenceCache {
                subset: subset_ds.to_vec(),
                m,
                results,
            };
            let rel = influence_rel(tag);
            save_influence(&cache, &self.dir.join(&rel))?;
            Ok(rel)
        };

        let clean_pts = |indices: &[usize]| -> Vec<(usize, Array1<f64>, usize)> {
            indices
                .iter()
                .map(|&i| (i, ds.row(i).to_owned(), ds.label(i)))
                .collect()
        };
        artifacts.push(save("val_normal", &full_ds, score(&val_engine, &clean_pts(&sel.val))?)?);
        let test_normal = score(&test_engine, &clean_pts(&sel.test))?;
        artifacts.push(save("test_normal", &test_subset_ds, test_normal.clone())?);

        for attack_cfg in self.cfg.standard_attacks() {
            let name = attack_cfg.attack;
            for (split, engine, subset_ds) in [
                (Split::Val, &val_engine, &full_ds),
                (Split::Test, &test_engine, &test_subset_ds),
            ] {
                let (records, _) = load_records(&self.dir.join(adv_rel(name, split)))?;
                let pts = adv_pts(&records, name, split)?;
                let tag = format!("{}_{}", name.as_str(), split.as_str());
                artifacts.push(save(&tag, subset_ds, score(engine, &pts)?)?);
            }
        }

        if let Some(cw_cfg) = self.cfg.cw_opt() {
            let base_seed = stream_seed(self.cfg.seed, attack_salt(AttackName::CwOpt, true));
            let records: Vec<AdversarialRecord> = sel
                .test
                .par_iter()
                .zip(&test_normal)
                .map(|(&i, res)| {
                    let helpful = helpful_embeddings(&model, &ds, &test_subset_ds, res)?;
                    let mut ac = cw_cfg.clone();
                    ac.seed = stream_seed(base_seed, i as u64);
                    let mut rec = cw_opt(&model, ds.row(i), ds.label(i), &ac, helpful.view())?;
                    rec.original_index = i;
                    Ok(rec)
                })
                .collect::<Result<_>>()?;
            let mut ac = cw_cfg.clone();
            ac.seed = base_seed;
            let rel = adv_rel(AttackName::CwOpt, Split::Test);
            save_records(&records, &ac, &self.dir.join(&rel))?;
            artifacts.push(rel);
            let pts = adv_pts(&records, AttackName::CwOpt, Split::Test)?;
            artifacts.push(save("cw_opt_test", &test_subset_ds, score(&test_engine, &pts)?)?);
        }
        Ok(artifacts)
    }

    fn work_features(&self) -> Result<Vec<String>> {
        let (ds, model) = self.load_inputs()?;
        let sel = self.load_selection()?;
        let train_idx = ds.indices_with(Split::Train);
        let (tx, _) = ds.gather(&train_idx)?;
        let layer_ids: Vec<usize> = match self.cfg.features.layers {
            LayerMode::Embedding => vec![embedding_layer(&model)?],
            LayerMode::All => (0..model.hidden_layer_count()).collect(),
        };
        let stores: Vec<LayerIndexStore> = layer_ids
            .iter()
            .map(|&l| fit_layer_store(&model, tx.view(), &train_idx, l))
            .collect::<Result<_>>()?;
        let row_of: HashMap<usize, usize> = train_idx
            .iter()
            .enumerate()
            .map(|(row, &i)| (i, row))
            .collect();

        let featurize = |pts: &[(usize, Array1<f64>)],
                         label: u8,
                         cache: &InfluenceCache|
         -> Result<Vec<NnifFeatureVector>> {
            let by_index: HashMap<usize, &InfluenceResult> =
                cache.results.iter().map(|r| (r.test_index, r)).collect();
            pts.par_iter()
                .map(|(idx, x)| {
                    let res = by_index.get(idx).ok_or_else(|| {
                        Error::MissingFeatures(format!("no influence result for example {idx}"))
                    })?;
                    let trace = model.forward(x.view())?;
                    let to_rows = |positions: &[usize]| -> Result<Vec<usize>> {
                        positions
                            .iter()
                            .map(|&pos| {
                                let ds_idx = cache.subset[pos];
                                row_of.get(&ds_idx).copied().ok_or(Error::IndexOutOfRange {
                                    index: ds_idx,
                                    len: train_idx.len(),
                                })
                            })
                            .collect()
                    };
                    let layers = stores
                        .iter()
                        .map(|store| {
                            let q = trace.hidden[store.layer()].view();
                            let (ranks, dists) = query_ranks_distances(store, q)?;
                            gather_features(
                                store.layer(),
                                &ranks,
                                &dists,
                                &to_rows(&res.helpful)?,
                                &to_rows(&res.harmful)?,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(NnifFeatureVector {
                        example_index: *idx,
                        label,
                        layers,
                    })
                })
                .collect()
        };

        let clean_pts = |indices: &[usize]| -> Vec<(usize, Array1<f64>)> {
            indices.iter().map(|&i| (i, ds.row(i).to_owned())).collect()
        };
        let load_cache =
            |tag: &str| -> Result<InfluenceCache> { load_influence(&self.dir.join(influence_rel(tag))) };

        let val_normal = featurize(&clean_pts(&sel.val), 0, &load_cache("val_normal")?)?;
        let test_normal = featurize(&clean_pts(&sel.test), 0, &load_cache("test_normal")?)?;

        let mut artifacts = Vec::new();
        let mut emit_set = |set: &FeatureSet, with_val_csv: bool| -> Result<()> {
            set.validate()?;
            let rel = features_rel(set.attack);
            set.save_json(&self.dir.join(&rel))?;
            artifacts.push(rel);
            if with_val_csv {
                let mut val_rows = set.val_normal.clone();
                val_rows.extend(set.val_adv.iter().cloned());
                let rel = features_csv_rel(set.attack, Split::Val);
                crate::neighbors::write_features_csv(&self.dir.join(&rel), &val_rows)?;
                artifacts.push(rel);
            }
            let mut test_rows = set.test_normal.clone();
            test_rows.extend(set.test_adv.iter().cloned());
            let rel = features_csv_rel(set.attack, Split::Test);
            crate::neighbors::write_features_csv(&self.dir.join(&rel), &test_rows)?;
            artifacts.push(rel);
            Ok(())
        };

        let mut cw_val_adv: Option<Vec<NnifFeatureVector>> = None;
        for attack_cfg in self.cfg.standard_attacks() {
            let name = attack_cfg.attack;
            let adv_features = |split: Split, tag: &str| -> Result<Vec<NnifFeatureVector>> {
                let (records, _) = load_records(&self.dir.join(adv_rel(name, split)))?;
                let pts: Vec<(usize, Array1<f64>)> = records
                    .iter()
                    .filter(|r| r.success)
                    .map(|r| (r.original_index, r.x_adv.clone()))
                    .collect();
                featurize(&pts, 1, &load_cache(tag)?)
            };
            let val_adv = adv_features(Split::Val, &format!("{}_val", name.as_str()))?;
            let test_adv = adv_features(Split::Test, &format!("{}_test", name.as_str()))?;
            if name == AttackName::CwL2 {
                cw_val_adv = Some(val_adv.clone());
            }
            let set = FeatureSet {
                attack: name,
                val_normal: val_normal.clone(),
                val_adv,
                test_normal: test_normal.clone(),
                test_adv,
            };
            emit_set(&set, true)?;
        }

        if self.cfg.cw_opt().is_some() {
            let (records, _) = load_records(&self.dir.join(adv_rel(AttackName::CwOpt, Split::Test)))?;
            let pts: Vec<(usize, Array1<f64>)> = records
                .iter()
                .filter(|r| r.success)
                .map(|r| (r.original_index, r.x_adv.clone()))
                .collect();
            let test_adv = featurize(&pts, 1, &load_cache("cw_opt_test")?)?;
            // the white-box table fits on vanilla CW validation features, so
            // this set carries them; only its test_adv block is its own
            let set = FeatureSet {
                attack: AttackName::CwOpt,
                val_normal: val_normal.clone(),
                val_adv: cw_val_adv.expect("config validation guarantees cw_l2"),
                test_normal: test_normal.clone(),
                test_adv,
            };
            emit_set(&set, false)?;
        }
        Ok(artifacts)
    }

    /// The detector/eval settings implied by the config and the stored
    /// feature layer ids.
    fn detection_settings(&self, layer_ids: &[usize]) -> Result<DetectionSettings> {
        let embedding = *layer_ids
            .iter()
            .max()
            .ok_or(Error::Empty("feature layer ids"))?;
        let mut hyper = self.cfg.detection.lr;
        hyper.seed = stream_seed(self.cfg.seed, SALT_DETECTOR);
        Ok(DetectionSettings {
            m_grid: self.cfg.detection.m_grid.clone(),
            folds: self.cfg.detection.folds,
            hyper,
            embedding_layer: embedding,
        })
    }

    fn work_detect(&self) -> Result<Vec<String>> {
        let mut artifacts = Vec::new();
        for attack_cfg in self.cfg.standard_attacks() {
            let name = attack_cfg.attack;
            let set = FeatureSet::load_json(&self.dir.join(features_rel(name)))?;
            let settings = self.detection_settings(&set.layer_ids())?;
            let embed_only = |list: &[NnifFeatureVector]| -> Result<Vec<NnifFeatureVector>> {
                list.iter()
                    .map(|fv| fv.layer_subset(&[settings.embedding_layer]))
                    .collect()
            };
            let vn = embed_only(&set.val_normal)?;
            let va = embed_only(&set.val_adv)?;
            let m = tune_m(
                &vn,
                &va,
                &settings.m_grid,
                settings.folds,
                FeatureMask::all(),
                &settings.hyper,
            )?;
            let truncate = |list: &[NnifFeatureVector]| -> Result<Vec<NnifFeatureVector>> {
                list.iter().map(|fv| fv.truncated(m)).collect()
            };
            let det = fit_detector(
                &truncate(&vn)?,
                &truncate(&va)?,
                FeatureMask::all(),
                &settings.hyper,
                Some(name),
            )?;
            let rel = detector_rel(name);
            save_detector(&self.dir.join(&rel), &det)?;
            artifacts.push(rel.clone());
            // save_detector writes a human-readable sidecar next to the binary
            artifacts.push(rel.replace(".bin", ".json"));
        }
        Ok(artifacts)
    }

    fn work_eval(&self) -> Result<Vec<String>> {
        let (ds, model) = self.load_inputs()?;
        let split_accuracy = |split: Split| -> Result<f64> {
            let (xs, ys) = ds.gather(&ds.indices_with(split))?;
            accuracy(&model, xs.view(), &ys)
        };
        let clean_accuracy = CleanAccuracy {
            train: split_accuracy(Split::Train)?,
            val: split_accuracy(Split::Val)?,
            test: split_accuracy(Split::Test)?,
        };

        let mut attack_success = Vec::new();
        for attack_cfg in self.cfg.standard_attacks() {
            for split in [Split::Val, Split::Test] {
                let (records, _) = load_records(&self.dir.join(adv_rel(attack_cfg.attack, split)))?;
                attack_success.push(summarize_records(
                    attack_cfg.attack,
                    split.as_str(),
                    &records,
                )?);
            }
        }
        if self.cfg.cw_opt().is_some() {
            let (records, _) =
                load_records(&self.dir.join(adv_rel(AttackName::CwOpt, Split::Test)))?;
            attack_success.push(summarize_records(
                AttackName::CwOpt,
                Split::Test.as_str(),
                &records,
            )?);
        }

        let std_sets: Vec<FeatureSet> = self
            .cfg
            .standard_attacks()
            .iter()
            .map(|a| FeatureSet::load_json(&self.dir.join(features_rel(a.attack))))
            .collect::<Result<_>>()?;
        let settings = self.detection_settings(&std_sets[0].layer_ids())?;

        let detection = run_detection(&std_sets, &settings)?;
        let roc: Vec<(AttackName, Vec<(f64, f64)>)> = std_sets
            .iter()
            .map(|set| {
                let (scores, labels) = detection_scores(set, &settings)?;
                Ok((set.attack, roc_points(&scores, &labels)?))
            })
            .collect::<Result<_>>()?;

        let ablation_attack = self.cfg.ablation_attack();
        let ablation_set = std_sets
            .iter()
            .find(|s| s.attack == ablation_attack)
            .expect("config validation keeps the ablation attack in the list");
        let (ablation, ablation_flags) = run_ablation(ablation_set, &settings)?;
        let generalization =
            run_generalization(&std_sets, self.cfg.generalization_fit(), &settings)?;

        let (whitebox, lstar) = if self.cfg.cw_opt().is_some() {
            let cw_set = std_sets
                .iter()
                .find(|s| s.attack == AttackName::CwL2)
                .expect("config validation pairs cw_opt with cw_l2");
            let opt_set = FeatureSet::load_json(&self.dir.join(features_rel(AttackName::CwOpt)))?;
            let rows = run_whitebox(cw_set, &opt_set, &settings)?;
            let stats = self.lstar_comparison(&model, &ds)?;
            (rows, Some(stats))
        } else {
            (Vec::new(), None)
        };

        let experiment = ExperimentReport {
            run_name: self.cfg.run_name.clone(),
            seed: self.cfg.seed,
            config_hash: self.cfg.config_hash()?,
            clean_accuracy,
            attack_success,
            detection,
            ablation,
            ablation_flags: Some(ablation_flags),
            generalization,
            whitebox,
            lstar,
        };
        emit_all(&self.reports_dir(), &experiment, &roc)?;

        let mut artifacts: Vec<String> = [
            report::DETECTION_CSV,
            report::ATTACK_SUCCESS_CSV,
            report::ABLATION_CSV,
            report::GENERALIZATION_CSV,
            report::REPORT_JSON,
            report::SUMMARY_MD,
        ]
        .iter()
        .map(|f| format!("{REPORTS_DIR}/{f}"))
        .collect();
        if !experiment.whitebox.is_empty() {
            artifacts.push(format!("{REPORTS_DIR}/{}", report::WHITEBOX_CSV));
        }
        for (attack, _) in &roc {
            artifacts.push(format!("{REPORTS_DIR}/roc_{}.csv", attack.as_str()));
        }
        Ok(artifacts)
    }

    /// Paired feature-space objective values: for every test point attacked
    /// by both CW variants, the summed embedding distance to the point's
    /// helpful training examples, under each attack's perturbed input.
    fn lstar_comparison(&self, model: &ModelParams, ds: &LabeledDataset) -> Result<LstarStats> {
        let cache = load_influence(&self.dir.join(influence_rel("test_normal")))?;
        let by_index: HashMap<usize, &InfluenceResult> =
            cache.results.iter().map(|r| (r.test_index, r)).collect();
        let (cw_records, _) = load_records(&self.dir.join(adv_rel(AttackName::CwL2, Split::Test)))?;
        let (opt_records, opt_cfg) =
            load_records(&self.dir.join(adv_rel(AttackName::CwOpt, Split::Test)))?;
        let opt_by_index: HashMap<usize, &AdversarialRecord> = opt_records
            .iter()
            .map(|r| (r.original_index, r))
            .collect();
        let mut lstar_cw = Vec::new();
        let mut lstar_opt = Vec::new();
        for rec in &cw_records {
            let (Some(opt_rec), Some(res)) = (
                opt_by_index.get(&rec.original_index),
                by_index.get(&rec.original_index),
            ) else {
                continue;
            };
            let helpful = helpful_embeddings(model, ds, &cache.subset, res)?;
            lstar_cw.push(embed_penalty(
                model,
                rec.x_adv.view(),
                helpful.view(),
                opt_cfg.embed_norm,
            )?);
            lstar_opt.push(embed_penalty(
                model,
                opt_rec.x_adv.view(),
                helpful.view(),
                opt_cfg.embed_norm,
            )?);
        }
        lstar_stats(&lstar_cw, &lstar_opt)
    }
}

/// Correctly classified points of one split, capped to `cap` by a seeded
/// subsample, ascending dataset indices.
fn select_points(
    model: &ModelParams,
    ds: &LabeledDataset,
    split: Split,
    cap: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let correct = filter_correct(model, ds, split)?;
    if correct.is_empty() {
        return Err(Error::Empty("correctly classified points"));
    }
    if correct.len() <= cap {
        return Ok(correct);
    }
    let mut picks = subsample_train(correct.len(), cap, seed)?;
    picks.sort_unstable();
    Ok(picks.into_iter().map(|p| correct[p]).collect())
}

/// Influence inputs for the successful records of one attack: the
/// adversarial point at the model's (post-attack) predicted label.
fn adv_pts(
    records: &[AdversarialRecord],
    attack: AttackName,
    split: Split,
) -> Result<Vec<(usize, Array1<f64>, usize)>> {
    let pts: Vec<(usize, Array1<f64>, usize)> = records
        .iter()
        .filter(|r| r.success)
        .map(|r| (r.original_index, r.x_adv.clone(), r.pred_after))
        .collect();
    if pts.is_empty() {
        return Err(Error::Config(format!(
            "attack {} produced no successful {} examples; raise its budget or weaken the model",
            attack.as_str(),
            split.as_str()
        )));
    }
    Ok(pts)
}

/// Embedding rows of one influence result's helpful training points.
/// `subset_ds` maps subset positions to dataset indices.
fn helpful_embeddings(
    model: &ModelParams,
    ds: &LabeledDataset,
    subset_ds: &[usize],
    res: &InfluenceResult,
) -> Result<Array2<f64>> {
    let mut rows = Array2::zeros((res.helpful.len(), model.embedding_dim()));
    for (r, &pos) in res.helpful.iter().enumerate() {
        let emb = model.embedding(ds.row(subset_ds[pos]))?;
        rows.row_mut(r).assign(&emb);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackConfig;

    fn tiny_config(name: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.run_name = name.into();
        cfg.dataset.dim = 2;
        cfg.dataset.train = 120;
        cfg.dataset.val = 40;
        cfg.dataset.test = 40;
        cfg.dataset.spread = 0.06;
        cfg.model.hidden = vec![8];
        cfg.training.epochs = 12;
        cfg.training.batch_size = 16;
        let mut fgsm = AttackConfig::named(AttackName::Fgsm);
        fgsm.epsilon = 0.3;
        cfg.attacks = vec![fgsm];
        cfg.influence.m_max = 4;
        cfg.influence.max_val_points = 24;
        cfg.influence.max_test_points = 24;
        cfg.influence.subsample_frac = 0.5;
        cfg.detection.m_grid = vec![2, 4];
        cfg.detection.folds = 2;
        cfg
    }

    fn with_cw(name: &str) -> RunConfig {
        let mut cfg = tiny_config(name);
        let mut cw = AttackConfig::named(AttackName::CwL2);
        cw.opt_steps = 25;
        cw.binary_search_steps = 3;
        cw.lr = 0.2;
        let mut cw_opt = AttackConfig::named(AttackName::CwOpt);
        cw_opt.opt_steps = 25;
        cw_opt.binary_search_steps = 3;
        cw_opt.lr = 0.2;
        cw_opt.embed_reg_weight = 0.05;
        cfg.attacks.push(cw);
        cfg.attacks.push(cw_opt);
        cfg
    }

    fn all_ran(outcomes: &[(StageName, StageOutcome)]) -> bool {
        outcomes
            .iter()
            .all(|(_, o)| matches!(o, StageOutcome::Ran { .. }))
    }

    fn all_cached(outcomes: &[(StageName, StageOutcome)]) -> bool {
        outcomes.iter().all(|(_, o)| *o == StageOutcome::Cached)
    }

    #[test]
    fn stage_names_round_trip() {
        for stage in StageName::ORDER {
            assert_eq!(StageName::parse(stage.as_str()).unwrap(), stage);
        }
        assert!(StageName::parse("all").is_err());
    }

    #[test]
    fn full_run_then_fully_cached() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(tiny_config("t"), dir.path()).unwrap();
        let first = p.run_all(false).unwrap();
        assert!(all_ran(&first));
        let second = p.run_all(false).unwrap();
        assert!(all_cached(&second));
        let report = p.load_report().unwrap();
        assert_eq!(report.run_name, "t");
        assert!(!report.detection.is_empty());
        assert_eq!(report.ablation.len(), 15);
        assert!(dir.path().join("reports/detection.csv").is_file());
        assert!(dir.path().join("reports/summary.md").is_file());
        assert_eq!(p.manifest().stages.len(), 6);
    }

    #[test]
    fn missing_upstream_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(tiny_config("t"), dir.path()).unwrap();
        let err = p.run(StageName::Attack, false).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
        for stage in [
            StageName::Train,
            StageName::Attack,
            StageName::Influence,
            StageName::Features,
        ] {
            p.run(stage, false).unwrap();
        }
        let err = p.run(StageName::Eval, false).unwrap_err();
        assert!(err.to_string().contains("detect"), "{err}");
    }

    #[test]
    fn attack_edit_keeps_train_reruns_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut p = Pipeline::open(tiny_config("t"), dir.path()).unwrap();
            assert!(all_ran(&p.run_all(false).unwrap()));
        }
        let mut cfg = tiny_config("t");
        cfg.attacks[0].epsilon = 0.25;
        let mut p = Pipeline::open(cfg, dir.path()).unwrap();
        let outcomes = p.run_all(false).unwrap();
        assert_eq!(outcomes[0], (StageName::Train, StageOutcome::Cached));
        assert!(all_ran(&outcomes[1..]));
    }

    #[test]
    fn forced_rerun_rewrites_identical_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(tiny_config("t"), dir.path()).unwrap();
        p.run_all(false).unwrap();
        let before = p.manifest().stage("train").unwrap().artifacts.clone();
        assert!(matches!(
            p.run(StageName::Train, true).unwrap(),
            StageOutcome::Ran { .. }
        ));
        assert_eq!(p.manifest().stage("train").unwrap().artifacts, before);
        assert!(all_cached(&p.run_all(false).unwrap()));
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::open(tiny_config("t"), dir.path()).unwrap();
        match Pipeline::open(tiny_config("t"), dir.path()) {
            Err(Error::Locked(path)) => assert_eq!(path, dir.path()),
            Err(other) => panic!("expected lock error, got {other}"),
            Ok(_) => panic!("second open should have failed"),
        }
        drop(p);
        Pipeline::open(tiny_config("t"), dir.path()).unwrap();
    }

    #[test]
    fn identical_configs_produce_identical_reports() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        Pipeline::open(tiny_config("t"), dir_a.path())
            .unwrap()
            .run_all(false)
            .unwrap();
        Pipeline::open(tiny_config("t"), dir_b.path())
            .unwrap()
            .run_all(false)
            .unwrap();
        for file in [
            "reports/detection.csv",
            "reports/attack_success.csv",
            "reports/ablation.csv",
            "reports/generalization.csv",
            "reports/report.json",
            "reports/summary.md",
        ] {
            let a = std::fs::read(dir_a.path().join(file)).unwrap();
            let b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
    }

    #[test]
    fn whitebox_runs_through_the_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(with_cw("wb"), dir.path()).unwrap();
        p.run_all(false).unwrap();
        let report = p.load_report().unwrap();
        assert_eq!(report.whitebox.len(), 2);
        let stats = report.lstar.expect("cw_opt run records l-star stats");
        assert!(stats.frac_lower >= 0.0 && stats.frac_lower <= 1.0);
        assert!(dir.path().join("adv/cw_opt_test.bin").is_file());
        assert!(dir.path().join("features/cw_opt.json").is_file());
        assert!(dir.path().join("reports/whitebox.csv").is_file());
        // detection covers the standard attacks in both layer modes
        assert_eq!(report.detection.len(), 2 * 2);
    }

    #[test]
    fn seed_override_invalidates_everything() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut p = Pipeline::open(tiny_config("t"), dir.path()).unwrap();
            p.run_all(false).unwrap();
        }
        let mut cfg = tiny_config("t");
        cfg.apply_overrides(Some(1), None, None).unwrap();
        let mut p = Pipeline::open(cfg, dir.path()).unwrap();
        assert!(all_ran(&p.run_all(false).unwrap()));
    }
}
