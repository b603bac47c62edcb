//! Config-driven experiment stages. Each stage reads the artifacts of the
//! previous ones from the output directory, so stages can be rerun alone.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! archive/windows.csv, archive/manifest.csv, folds.json
//! features.csv, centroid_features.csv
//! fold_{i}/scaler.json, hierarchy.{json,dot}, reference.{json,dot}
//! fold_{i}/repeat_{r}/checkpoint.json, train_log.csv, thresholds.json,
//!                     predictions.csv, localization.csv
//! reports/{eval_id,eval_ood,localize,sweep_window}.{json,csv}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    load_recordings, subject_kfold, window_recordings, write_archive, write_file, Fold, FoldPlan,
    Schema,
};
use crate::error::{Error, Result};
use crate::eval::{
    auroc, default_lambda_grid, detection_error, localization_sweep, macro_f1, mean_std,
    ood_set_evaluate, paired_t_test, IdReport, LocalizationReport, OodReport, PairedTTest,
};
use crate::features::{
    export_features, extract, parse_embeddings, FeatureConfig, FeatureKind, FeatureScaler,
};
use crate::hierarchy::{class_centroids, ExportFormat, Hierarchy};
use crate::inference::{
    knn_ood_score, open_set_predict, predict_leaf, predictions_csv, EntropyRecord, ThresholdTable,
};
use crate::model::{node_probabilities, train, Checkpoint, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HierarchySource {
    /// Agglomerative clustering of training-fold class centroids.
    Built,
    /// A tree read from `hierarchy.path`, restricted to the training classes.
    Imported,
    /// One softmax over all classes under the root.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub source: HierarchySource,
    pub path: Option<PathBuf>,
    /// Feature stage used for the centroids; the classifier features when
    /// absent.
    pub features: Option<FeatureConfig>,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            source: HierarchySource::Built,
            path: None,
            features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// CSV file or directory of CSV files.
    pub data_path: Option<PathBuf>,
    pub schema: Option<Schema>,
    /// Schema in the `key = value` text format, used when `schema` is absent.
    pub schema_path: Option<PathBuf>,
    pub window_seconds: f64,
    pub overlap: f64,
    pub target_hz: f64,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub hierarchy: HierarchyConfig,
    pub subjects_per_fold: usize,
    pub repeats: usize,
    pub ood_classes: Vec<String>,
    pub lambda_hat: f64,
    /// Localization grid; `0, 0.05, …, 1` when absent.
    pub lambda_grid: Option<Vec<f64>>,
    /// Neighbour count of the distance-based OOD baseline.
    pub knn_k: usize,
    pub sweep_window_seconds: Vec<f64>,
    pub output_dir: PathBuf,
    /// Fold shuffling seed; repeat `r` trains with `seed + r`.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: None,
            schema: None,
            schema_path: None,
            window_seconds: 10.0,
            overlap: 0.5,
            target_hz: 30.0,
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            hierarchy: HierarchyConfig::default(),
            subjects_per_fold: 1,
            repeats: 5,
            ood_classes: Vec::new(),
            lambda_hat: 0.99,
            lambda_grid: None,
            knn_k: 5,
            sweep_window_seconds: vec![2.0, 5.0, 10.0],
            output_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Reads a TOML config. Relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data_path.iter_mut().for_each(fix);
        self.schema_path.iter_mut().for_each(fix);
        self.hierarchy.path.iter_mut().for_each(fix);
        self.features.external_path.iter_mut().for_each(fix);
        if let Some(f) = self.hierarchy.features.as_mut() {
            f.external_path.iter_mut().for_each(fix);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_seconds > 0.0) || !(self.target_hz > 0.0) {
            return Err(config_err("window_seconds and target_hz must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(config_err("overlap must lie in [0, 1)"));
        }
        if self.repeats == 0 || self.subjects_per_fold == 0 || self.knn_k == 0 {
            return Err(config_err("repeats, subjects_per_fold and knn_k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_hat) {
            return Err(config_err("lambda_hat must lie in [0, 1]"));
        }
        if let Some(g) = &self.lambda_grid {
            if g.is_empty() || g.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return Err(config_err("lambda_grid values must lie in [0, 1]"));
            }
        }
        if self.sweep_window_seconds.iter().any(|w| !(*w > 0.0)) {
            return Err(config_err("sweep_window_seconds must be positive"));
        }
        let distinct: BTreeSet<&String> = self.ood_classes.iter().collect();
        if distinct.len() != self.ood_classes.len() {
            return Err(config_err("ood_classes contains duplicates"));
        }
        self.features.validate()?;
        if let Some(f) = &self.hierarchy.features {
            f.validate()?;
        }
        self.train.validate()?;
        if self.hierarchy.source == HierarchySource::Imported {
            match &self.hierarchy.path {
                None => return Err(config_err("imported hierarchy needs hierarchy.path")),
                Some(p) if !p.exists() => {
                    return Err(config_err(format!("hierarchy file {} not found", p.display())))
                }
                _ => {}
            }
        }
        for f in std::iter::once(&self.features).chain(&self.hierarchy.features) {
            if let Some(p) = &f.external_path {
                if f.kind == FeatureKind::External && !p.exists() {
                    return Err(config_err(format!("embedding file {} not found", p.display())));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the config with the output location blanked, so runs
    /// written to different directories report the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn schema(&self) -> Result<Schema> {
        match (&self.schema, &self.schema_path) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(p)) => Schema::load(p),
            (None, None) => Err(config_err("config needs `schema` or `schema_path`")),
        }
    }

    fn ood_set(&self) -> BTreeSet<String> {
        self.ood_classes.iter().cloned().collect()
    }

    fn grid(&self) -> Vec<f64> {
        self.lambda_grid.clone().unwrap_or_else(default_lambda_grid)
    }

    fn layout(&self) -> Layout {
        Layout {
            root: self.output_dir.clone(),
        }
    }
}

/// Paths of the artifacts under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn archive(&self) -> PathBuf {
        self.root.join("archive")
    }
    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.json")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features.csv")
    }
    pub fn centroid_features(&self) -> PathBuf {
        self.root.join("centroid_features.csv")
    }
    pub fn fold(&self, i: usize) -> PathBuf {
        self.root.join(format!("fold_{i}"))
    }
    pub fn run(&self, i: usize, r: usize) -> PathBuf {
        self.fold(i).join(format!("repeat_{r}"))
    }
    pub fn report(&self, stage: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{stage}.{ext}"))
    }
}

pub fn layout(cfg: &RunConfig) -> Layout {
    cfg.layout()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, &s)
}

/// Loads recordings, resamples, windows, and writes the archive and the
/// subject-wise fold plan.
pub fn prepare(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let data = cfg
        .data_path
        .as_ref()
        .ok_or_else(|| config_err("config needs `data_path`"))?;
    if !data.exists() {
        return Err(config_err(format!("data path {} not found", data.display())));
    }
    let schema = cfg.schema()?;
    let recs = load_recordings::<f64>(data, &schema)?;
    let windows = window_recordings(&recs, cfg.target_hz, cfg.window_seconds, cfg.overlap)?;
    if windows.is_empty() {
        return Err(Error::format("no windows: recordings shorter than one window"));
    }
    let known = crate::dataset::classes(&windows);
    if let Some(c) = cfg.ood_classes.iter().find(|c| !known.contains(c)) {
        return Err(config_err(format!(
            "OOD class `{c}` not in data; classes: {}",
            known.join(", ")
        )));
    }
    let plan = subject_kfold(&windows, cfg.subjects_per_fold, cfg.seed)?;
    let l = cfg.layout();
    write_archive(&l.archive(), &windows, &schema.channels)?;
    write_json(&l.folds(), &plan)?;
    log::info!(
        "prepare: {} recordings, {} windows, {} classes, {} folds",
        recs.len(),
        windows.len(),
        known.len(),
        plan.folds.len()
    );
    Ok(())
}

/// Extracts per-window features. Extraction looks at one window at a time,
/// so it is safe to run over all subjects before splitting.
pub fn features(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let l = cfg.layout();
    let (windows, names) = crate::dataset::read_archive::<f64>(&l.archive())?;
    let fv = extract(&cfg.features, &windows, &names)?;
    export_features(&l.features(), &fv)?;
    if let Some(hc) = &cfg.hierarchy.features {
        export_features(&l.centroid_features(), &extract(hc, &windows, &names)?)?;
    }
    log::info!(
        "features: {} windows × {} values",
        fv.len(),
        fv.first().map_or(0, |f| f.values.len())
    );
    Ok(())
}

struct Sample {
    id: u64,
    subject: String,
    label: String,
}

/// Manifest, features and fold plan, as written by earlier stages.
struct Data {
    samples: Vec<Sample>,
    features: Vec<Vec<f64>>,
    centroid_features: Option<Vec<Vec<f64>>>,
    plan: FoldPlan,
}

#[derive(Default)]
struct Split {
    train_id: Vec<usize>,
    train_ood: Vec<usize>,
    test_id: Vec<usize>,
    test_ood: Vec<usize>,
}

fn read_features(path: &Path, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut table = parse_embeddings::<f64>(&read_text(path)?)?;
    samples
        .iter()
        .map(|s| {
            table
                .remove(&s.id)
                .ok_or_else(|| Error::format(format!("no features for window {}", s.id)))
        })
        .collect()
}

impl Data {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let l = cfg.layout();
        let manifest = l.archive().join("manifest.csv");
        let mut samples = Vec::new();
        for rec in csv::Reader::from_path(&manifest)?.records() {
            let rec = rec?;
            let id = rec[0]
                .parse()
                .map_err(|_| Error::format(format!("bad window id `{}`", &rec[0])))?;
            samples.push(Sample {
                id,
                subject: rec[1].to_string(),
                label: rec[2].to_string(),
            });
        }
        let features = read_features(&l.features(), &samples)?;
        let centroid_features = match cfg.hierarchy.features {
            Some(_) => Some(read_features(&l.centroid_features(), &samples)?),
            None => None,
        };
        let plan: FoldPlan = serde_json::from_str(&read_text(&l.folds())?)?;
        Ok(Data {
            samples,
            features,
            centroid_features,
            plan,
        })
    }

    fn split(&self, fold: &Fold, ood: &BTreeSet<String>) -> Split {
        let train: BTreeSet<&String> = fold.train_subjects.iter().collect();
        let mut s = Split::default();
        for (k, sample) in self.samples.iter().enumerate() {
            let is_train = train.contains(&sample.subject);
            let is_ood = ood.contains(&sample.label);
            match (is_train, is_ood) {
                (true, false) => s.train_id.push(k),
                (true, true) => s.train_ood.push(k),
                (false, false) => s.test_id.push(k),
                (false, true) => s.test_ood.push(k),
            }
        }
        s
    }

    fn labels(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&k| self.samples[k].label.clone()).collect()
    }

    fn scaled(&self, idx: &[usize], scaler: &FeatureScaler<f64>) -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&k| scaler.transform(&self.features[k]))
            .collect()
    }
}

fn sorted_classes(labels: &[String]) -> Vec<String> {
    labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Builds a tree over the classes present in `idx`, using centroids of
/// features standardized with statistics of `fit_idx`.
fn build_hierarchy(data: &Data, fit_idx: &[usize], idx: &[usize]) -> Result<Hierarchy<f64>> {
    let source = data.centroid_features.as_ref().unwrap_or(&data.features);
    let fit: Vec<Vec<f64>> = fit_idx.iter().map(|&k| source[k].clone()).collect();
    let scaler = FeatureScaler::fit(&fit)?;
    let x: Vec<Vec<f64>> = idx.iter().map(|&k| scaler.transform(&source[k])).collect();
    let labels = data.labels(idx);
    let centroids = class_centroids(&x, &labels, &sorted_classes(&labels))?;
    Hierarchy::build(&centroids)
}

/// Round-trips through the json-tree form so that node ids match what
/// later stages read back.
fn canonical(h: &Hierarchy<f64>) -> Result<Hierarchy<f64>> {
    Hierarchy::import_str(&h.to_json_tree())
}

/// Per fold: fits the feature scaler and builds (or imports) the deployment
/// hierarchy over the training classes, plus a reference hierarchy that
/// also contains the held-out classes. Only training-subject windows are
/// used.
pub fn hierarchy(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let data = Data::load(cfg)?;
    let l = cfg.layout();
    let ood = cfg.ood_set();
    for (i, fold) in data.plan.folds.iter().enumerate() {
        let split = data.split(fold, &ood);
        if split.train_id.is_empty() {
            return Err(Error::format(format!("fold {i}: no training windows")));
        }
        let train_x: Vec<Vec<f64>> = split
            .train_id
            .iter()
            .map(|&k| data.features[k].clone())
            .collect();
        let scaler = FeatureScaler::fit(&train_x)?;
        let id_classes = sorted_classes(&data.labels(&split.train_id));
        let all_idx: Vec<usize> = split
            .train_id
            .iter()
            .chain(&split.train_ood)
            .copied()
            .collect();
        let has_ood = !ood.is_empty() && !split.train_ood.is_empty();
        let built_reference = || -> Result<Option<Hierarchy<f64>>> {
            if has_ood {
                Ok(Some(build_hierarchy(&data, &split.train_id, &all_idx)?))
            } else {
                Ok(None)
            }
        };
        let (deploy, reference) = match cfg.hierarchy.source {
            HierarchySource::Built => (
                build_hierarchy(&data, &split.train_id, &split.train_id)?,
                built_reference()?,
            ),
            HierarchySource::Flat => (Hierarchy::flat(&id_classes)?, built_reference()?),
            HierarchySource::Imported => {
                let full = Hierarchy::import(cfg.hierarchy.path.as_deref().expect("validated"))?;
                let deploy = full.restrict(&id_classes)?;
                let reference = (!ood.is_empty()
                    && ood.iter().all(|c| full.leaf_of(c).is_some()))
                .then_some(full);
                (deploy, reference)
            }
        };
        if !ood.is_empty() && reference.is_none() {
            log::warn!("fold {i}: no reference hierarchy; localization will be unavailable");
        }
        let dir = l.fold(i);
        write_json(&dir.join("scaler.json"), &scaler)?;
        let deploy = match cfg.hierarchy.source {
            HierarchySource::Flat => deploy,
            _ => canonical(&deploy)?,
        };
        write_file(&dir.join("hierarchy.json"), &deploy.to_json_tree())?;
        write_file(&dir.join("hierarchy.dot"), &deploy.to_dot())?;
        let ref_json = dir.join("reference.json");
        match reference {
            Some(r) => {
                let r = canonical(&r)?;
                write_file(&ref_json, &r.to_json_tree())?;
                write_file(&dir.join("reference.dot"), &r.to_dot())?;
            }
            None if ref_json.exists() => {
                fs::remove_file(&ref_json).map_err(|e| Error::io(&ref_json, e))?;
            }
            None => {}
        }
        log::info!(
            "hierarchy: fold {i}, {} classes, {} nodes",
            deploy.class_count(),
            deploy.len()
        );
    }
    Ok(())
}

fn load_scaler(dir: &Path) -> Result<FeatureScaler<f64>> {
    Ok(serde_json::from_str(&read_text(&dir.join("scaler.json"))?)?)
}

/// The json-tree import binarizes, so a flat head is rebuilt from its classes.
fn load_hierarchy(cfg: &RunConfig, dir: &Path) -> Result<Hierarchy<f64>> {
    let h = Hierarchy::import(&dir.join("hierarchy.json"))?;
    match cfg.hierarchy.source {
        HierarchySource::Flat => Hierarchy::flat(&h.classes()),
        _ => Ok(h),
    }
}

/// Trains one head per fold and repeat and fits its entropy thresholds on
/// the training windows.
pub fn train_stage(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let data = Data::load(cfg)?;
    let l = cfg.layout();
    let ood = cfg.ood_set();
    for (i, fold) in data.plan.folds.iter().enumerate() {
        let split = data.split(fold, &ood);
        let h = load_hierarchy(cfg, &l.fold(i))?;
        let scaler = load_scaler(&l.fold(i))?;
        let x = data.scaled(&split.train_id, &scaler);
        let labels = data.labels(&split.train_id);
        for r in 0..cfg.repeats {
            let mut tc = cfg.train.clone();
            tc.seed = cfg.seed.wrapping_add(r as u64);
            let (params, log) = train(&x, &labels, &h, &tc)?;
            let thresholds = EntropyRecord::collect(&x, &params, &h)?.thresholds(cfg.lambda_hat)?;
            let dir = l.run(i, r);
            Checkpoint::new(params, &h, cfg.features.clone(), Some(scaler.clone()))
                .save(&dir.join("checkpoint.json"))?;
            write_file(&dir.join("train_log.csv"), &log.to_csv())?;
            write_file(&dir.join("thresholds.json"), &thresholds.to_json()?)?;
            log::info!(
                "train: fold {i} repeat {r}, {} epochs, best {}",
                log.epochs.len(),
                log.best_epoch
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub fold: usize,
    pub repeat: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<D> {
    pub stage: String,
    pub config_hash: String,
    pub runs: Vec<RunMetrics>,
    pub aggregate: BTreeMap<String, Summary>,
    pub details: D,
}

fn aggregate(runs: &[RunMetrics]) -> BTreeMap<String, Summary> {
    let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (m, &v) in &r.metrics {
            by_metric.entry(m.clone()).or_default().push(v);
        }
    }
    by_metric
        .into_iter()
        .map(|(m, v)| {
            let (mean, std) = mean_std(&v);
            (m, Summary { mean, std })
        })
        .collect()
}

impl<D: Serialize> Report<D> {
    fn new(stage: &str, cfg: &RunConfig, runs: Vec<RunMetrics>, details: D) -> Self {
        Report {
            stage: stage.to_string(),
            config_hash: cfg.hash(),
            aggregate: aggregate(&runs),
            runs,
            details,
        }
    }

    /// `fold,repeat,metric,value`, one row per run and metric, then the
    /// `all,mean` and `all,std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# config_hash={}\nfold,repeat,metric,value\n", self.config_hash);
        for r in &self.runs {
            for (m, v) in &r.metrics {
                s.push_str(&format!("{},{},{m},{v}\n", r.fold, r.repeat));
            }
        }
        for (m, a) in &self.aggregate {
            s.push_str(&format!("all,mean,{m},{}\n", a.mean));
        }
        for (m, a) in &self.aggregate {
            s.push_str(&format!("all,std,{m},{}\n", a.std));
        }
        s
    }

    fn write(&self, l: &Layout) -> Result<()> {
        write_json(&l.report(&self.stage, "json"), self)?;
        write_file(&l.report(&self.stage, "csv"), &self.to_csv())
    }
}

/// Everything one trained run needs for evaluation.
struct RunContext {
    h: Hierarchy<f64>,
    checkpoint: Checkpoint<f64>,
    thresholds: ThresholdTable<f64>,
}

fn load_run(cfg: &RunConfig, i: usize, r: usize) -> Result<RunContext> {
    let l = cfg.layout();
    let h = load_hierarchy(cfg, &l.fold(i))?;
    let dir = l.run(i, r);
    let checkpoint = Checkpoint::load(&dir.join("checkpoint.json"), &h)?;
    let thresholds = ThresholdTable::from_json(&read_text(&dir.join("thresholds.json"))?)?;
    Ok(RunContext {
        h,
        checkpoint,
        thresholds,
    })
}

fn scaler_of(ctx: &RunContext) -> Result<&FeatureScaler<f64>> {
    ctx.checkpoint
        .scaler
        .as_ref()
        .ok_or_else(|| Error::format("checkpoint has no feature scaler"))
}

/// Closed-set macro F1 on the test subjects' in-distribution windows; also
/// writes open-set predictions for every test window.
pub fn eval_id(cfg: &RunConfig) -> Result<Report<Vec<IdReport>>> {
    cfg.validate()?;
    let data = Data::load(cfg)?;
    let l = cfg.layout();
    let ood = cfg.ood_set();
    let mut runs = Vec::new();
    let mut details = Vec::new();
    for (i, fold) in data.plan.folds.iter().enumerate() {
        let split = data.split(fold, &ood);
        if split.test_id.is_empty() {
            return Err(Error::format(format!("fold {i}: no in-distribution test windows")));
        }
        for r in 0..cfg.repeats {
            let ctx = load_run(cfg, i, r)?;
            let scaler = scaler_of(&ctx)?;
            let params = &ctx.checkpoint.params;
            let x = data.scaled(&split.test_id, scaler);
            let predicted = x
                .iter()
                .map(|x| {
                    let pred = predict_leaf(&node_probabilities(params, &ctx.h, x)?, &ctx.h);
                    Ok(ctx.h.class_of(pred.leaf).expect("leaf").to_string())
                })
                .collect::<Result<Vec<_>>>()?;
            let report = macro_f1(&predicted, &data.labels(&split.test_id))?;

            let all: Vec<usize> = split.test_id.iter().chain(&split.test_ood).copied().collect();
            let rows = all
                .iter()
                .map(|&k| {
                    let x = scaler.transform(&data.features[k]);
                    Ok((
                        data.samples[k].id,
                        open_set_predict(&x, params, &ctx.h, &ctx.thresholds)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            write_file(&l.run(i, r).join("predictions.csv"), &predictions_csv(&rows))?;

            runs.push(RunMetrics {
                fold: i,
                repeat: r,
                metrics: BTreeMap::from([("macro_f1".to_string(), report.macro_f1)]),
            });
            details.push(report);
        }
    }
    let report = Report::new("eval_id", cfg, runs, details);
    report.write(&l)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodDetails {
    pub per_run: Vec<OodReport>,
    /// Mean-path-entropy AUROC against the k-nearest-neighbour baseline,
    /// paired over runs; absent with fewer than two runs.
    pub entropy_vs_knn: Option<PairedTTest>,
}

/// Mean-path-entropy OOD detection on the test subjects, pooled over all
/// held-out classes, with a k-nearest-neighbour distance baseline.
pub fn eval_ood(cfg: &RunConfig) -> Result<Report<OodDetails>> {
    cfg.validate()?;
    if cfg.ood_classes.is_empty() {
        return Err(config_err("eval-ood needs ood_classes"));
    }
    let data = Data::load(cfg)?;
    let l = cfg.layout();
    let ood = cfg.ood_set();
    let mut runs = Vec::new();
    let mut per_run = Vec::new();
    for (i, fold) in data.plan.folds.iter().enumerate() {
        let split = data.split(fold, &ood);
        if split.test_ood.is_empty() {
            return Err(Error::format(format!(
                "fold {i}: test subjects have no windows of the OOD classes"
            )));
        }
        for r in 0..cfg.repeats {
            let ctx = load_run(cfg, i, r)?;
            let scaler = scaler_of(&ctx)?;
            let xi = data.scaled(&split.test_id, scaler);
            let xo = data.scaled(&split.test_ood, scaler);
            let (ood_report, id_report) = ood_set_evaluate(
                &ctx.checkpoint.params,
                &ctx.h,
                &xi,
                &data.labels(&split.test_id),
                &xo,
                &data.labels(&split.test_ood),
            )?;
            let train = data.scaled(&split.train_id, scaler);
            let k = cfg.knn_k.min(train.len());
            let knn = xi
                .iter()
                .chain(&xo)
                .map(|x| knn_ood_score(x, &train, k))
                .collect::<Result<Vec<_>>>()?;
            let is_ood: Vec<bool> = (0..knn.len()).map(|j| j >= xi.len()).collect();
            runs.push(RunMetrics {
                fold: i,
                repeat: r,
                metrics: BTreeMap::from([
                    ("auroc".to_string(), ood_report.auroc),
                    ("detection_error".to_string(), ood_report.detection_error),
                    ("id_macro_f1".to_string(), id_report.macro_f1),
                    ("knn_auroc".to_string(), auroc(&knn, &is_ood)?),
                    ("knn_detection_error".to_string(), detection_error(&knn, &is_ood)?),
                ]),
            });
            per_run.push(ood_report);
        }
    }
    let a: Vec<f64> = runs.iter().map(|r| r.metrics["auroc"]).collect();
    let b: Vec<f64> = runs.iter().map(|r| r.metrics["knn_auroc"]).collect();
    let entropy_vs_knn = if a.len() >= 2 {
        Some(paired_t_test(&a, &b)?)
    } else {
        None
    };
    let report = Report::new(
        "eval_ood",
        cfg,
        runs,
        OodDetails {
            per_run,
            entropy_vs_knn,
        },
    );
    report.write(&l)?;
    Ok(report)
}

/// Threshold sweep: where in the reference hierarchy the stopping rule
/// places the held-out classes, per fold and repeat.
pub fn localize(cfg: &RunConfig) -> Result<Report<Vec<LocalizationReport>>> {
    cfg.validate()?;
    if cfg.ood_classes.is_empty() {
        return Err(config_err("localize needs ood_classes"));
    }
    let data = Data::load(cfg)?;
    let l = cfg.layout();
    let ood = cfg.ood_set();
    let grid = cfg.grid();
    let mut runs = Vec::new();
    let mut details = Vec::new();
    let mut per_fold_csv = String::from("fold,lambda_hat,mean_distance,mean_depth\n");
    for (i, fold) in data.plan.folds.iter().enumerate() {
        let split = data.split(fold, &ood);
        let ref_path = l.fold(i).join("reference.json");
        if !ref_path.exists() {
            return Err(Error::arg(format!(
                "fold {i}: no reference hierarchy containing the OOD classes"
            )));
        }
        let reference = Hierarchy::<f64>::import(&ref_path)?;
        if !reference.has_merge_distances() {
            return Err(Error::Capability(
                "the reference hierarchy has no merge distances, so cumulative \
                 cosine distance is undefined; use a built hierarchy"
                    .into(),
            ));
        }
        if split.test_ood.is_empty() {
            return Err(Error::format(format!(
                "fold {i}: test subjects have no windows of the OOD classes"
            )));
        }
        let mut fold_rows: Vec<Vec<(f64, f64)>> = vec![Vec::new(); grid.len()];
        for r in 0..cfg.repeats {
            let ctx = load_run(cfg, i, r)?;
            let scaler = scaler_of(&ctx)?;
            let params = &ctx.checkpoint.params;
            let train = data.scaled(&split.train_id, scaler);
            let entropies = EntropyRecord::collect(&train, params, &ctx.h)?;
            let xo = data.scaled(&split.test_ood, scaler);
            let rep = localization_sweep(
                &xo,
                &data.labels(&split.test_ood),
                params,
                &ctx.h,
                &reference,
                &entropies,
                &grid,
            )?;
            write_file(&l.run(i, r).join("localization.csv"), &rep.to_csv())?;
            let best = rep
                .per_lambda
                .iter()
                .min_by(|a, b| a.mean_distance.total_cmp(&b.mean_distance))
                .expect("non-empty grid");
            let mut metrics = BTreeMap::from([
                ("best_lambda_hat".to_string(), best.lambda_hat),
                ("min_mean_distance".to_string(), best.mean_distance),
            ]);
            if let (Some(first), Some(last)) = (rep.per_lambda.first(), rep.per_lambda.last()) {
                metrics.insert("mean_distance_at_first_lambda".into(), first.mean_distance);
                metrics.insert("mean_distance_at_last_lambda".into(), last.mean_distance);
            }
            for (slot, row) in fold_rows.iter_mut().zip(&rep.per_lambda) {
                slot.push((row.mean_distance, row.mean_depth));
            }
            runs.push(RunMetrics {
                fold: i,
                repeat: r,
                metrics,
            });
            details.push(rep);
        }
        for (lambda, rows) in grid.iter().zip(&fold_rows) {
            let n = rows.len() as f64;
            let d = rows.iter().map(|x| x.0).sum::<f64>() / n;
            let depth = rows.iter().map(|x| x.1).sum::<f64>() / n;
            per_fold_csv.push_str(&format!("{i},{lambda},{d},{depth}\n"));
        }
    }
    let report = Report::new("localize", cfg, runs, details);
    report.write(&l)?;
    write_file(&l.report("localize_per_fold", "csv"), &per_fold_csv)?;
    Ok(report)
}

/// Every stage up to evaluation; OOD evaluation and localization run only
/// when OOD classes are configured.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    prepare(cfg)?;
    features(cfg)?;
    hierarchy(cfg)?;
    train_stage(cfg)?;
    eval_id(cfg)?;
    if !cfg.ood_classes.is_empty() {
        eval_ood(cfg)?;
        localize(cfg)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSweepRow {
    pub window_seconds: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

/// Reruns the pipeline for each window length in `sweep_window_seconds`,
/// each under `sweep/w_{seconds}`, and tabulates the aggregate metrics.
pub fn sweep_window(cfg: &RunConfig) -> Result<Vec<WindowSweepRow>> {
    cfg.validate()?;
    if cfg.sweep_window_seconds.is_empty() {
        return Err(config_err("sweep_window_seconds is empty"));
    }
    let l = cfg.layout();
    let mut rows = Vec::new();
    for &w in &cfg.sweep_window_seconds {
        let mut c = cfg.clone();
        c.window_seconds = w;
        c.output_dir = l.root.join("sweep").join(format!("w_{w}"));
        prepare(&c)?;
        features(&c)?;
        hierarchy(&c)?;
        train_stage(&c)?;
        let mut agg = eval_id(&c)?.aggregate;
        if !c.ood_classes.is_empty() {
            agg.extend(eval_ood(&c)?.aggregate);
        }
        for (metric, s) in agg {
            rows.push(WindowSweepRow {
                window_seconds: w,
                metric,
                mean: s.mean,
                std: s.std,
            });
        }
    }
    let mut csv = format!(
        "# config_hash={}\nwindow_seconds,metric,mean,std\n",
        cfg.hash()
    );
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.window_seconds, r.metric, r.mean, r.std));
    }
    write_file(&l.report("sweep_window", "csv"), &csv)?;
    write_json(&l.report("sweep_window", "json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportTarget {
    Hierarchy,
    Reference,
}

/// Text of a fold's deployment or reference hierarchy.
pub fn export(
    cfg: &RunConfig,
    fold: usize,
    target: ExportTarget,
    format: ExportFormat,
) -> Result<String> {
    let dir = cfg.layout().fold(fold);
    let path = match target {
        ExportTarget::Hierarchy => dir.join("hierarchy.json"),
        ExportTarget::Reference => dir.join("reference.json"),
    };
    if !path.exists() {
        return Err(Error::arg(format!(
            "{} not found; run the hierarchy stage first",
            path.display()
        )));
    }
    let h = match target {
        ExportTarget::Hierarchy => load_hierarchy(cfg, &dir)?,
        ExportTarget::Reference => Hierarchy::<f64>::import(&path)?,
    };
    Ok(h.export(format))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_toml() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.window_seconds, 10.0);
        assert_eq!(c.overlap, 0.5);
        assert_eq!(c.target_hz, 30.0);
        assert_eq!(c.repeats, 5);
        assert_eq!(c.train.learning_rate, 1e-4);
        let c = RunConfig::parse(
            "repeats = 2\nood_classes = [\"run\"]\n[train]\nmax_epochs = 3\n[features]\nkind = \"ecdf\"\n",
        )
        .unwrap();
        assert_eq!(c.repeats, 2);
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.features.kind, FeatureKind::Ecdf);
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.overlap = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.hierarchy.source = HierarchySource::Imported;
        assert!(c.validate().is_err());
        let c = RunConfig {
            ood_classes: vec!["a".into(), "a".into()],
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn report_csv_rows() {
        let runs: Vec<RunMetrics> = (0..2)
            .flat_map(|f| {
                (0..5).map(move |r| RunMetrics {
                    fold: f,
                    repeat: r,
                    metrics: BTreeMap::from([("macro_f1".to_string(), 0.5 + r as f64 * 0.1)]),
                })
            })
            .collect();
        let rep = Report::new("eval_id", &RunConfig::default(), runs, ());
        let csv = rep.to_csv();
        // header comment + column names + 10 runs + mean + std
        assert_eq!(csv.lines().count(), 2 + 10 + 2);
        assert!((rep.aggregate["macro_f1"].mean - 0.7).abs() < 1e-12);
    }
}
