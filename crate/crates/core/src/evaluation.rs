//! Cross-validated evaluation of the multi-atlas pipeline, ablations,
//! high-quality subset selection and feature-variance summaries.
//!
//! Every learned component (imputation means in strict mode, F-score masks,
//! autoencoders, classifiers, ensemble weights) is fitted on the training
//! side of a fold unless the configuration explicitly asks for a
//! whole-dataset scope.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, MlpConfig, MlpModel};
use crate::connectivity;
use crate::data::{AtlasId, AtlasSpec, DemographicImputer, Demographics, Label, SubjectRecord};
use crate::ensemble::{EnsembleMember, EnsembleModel, VotingMode};
use crate::error::{Error, Result};
use crate::feature_selection::{self, FeatureMask, SweepTable};
use crate::nn::OptimizerConfig;
use crate::seeds;
use crate::ssdae::{self, AutoencoderConfig, TrainedAutoencoder};

/// Subjects with labels, raw demographics and unmasked features per atlas.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub subject_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub sites: Vec<Option<String>>,
    pub demographics: Vec<Demographics>,
    pub features: BTreeMap<AtlasId, Array2<f64>>,
    pub atlases: Vec<AtlasSpec>,
}

impl Dataset {
    /// Computes connectivity features for every atlas in `atlases`.
    pub fn from_records(records: &[SubjectRecord], atlases: &[AtlasSpec]) -> Result<Self> {
        let mut features = BTreeMap::new();
        for atlas in atlases {
            atlas.validate()?;
            let x = connectivity::feature_matrix(records, atlas.id)?;
            if x.nrows() > 0 && x.ncols() != atlas.n_features() {
                return Err(Error::shape(format!("{} features for atlas {} (expected {})", x.ncols(), atlas.id, atlas.n_features())));
            }
            features.insert(atlas.id, x);
        }
        Ok(Dataset {
            subject_ids: records.iter().map(|r| r.subject_id.clone()).collect(),
            labels: records.iter().map(|r| r.label).collect(),
            sites: records.iter().map(|r| r.site.clone()).collect(),
            demographics: records.iter().map(|r| r.demographics).collect(),
            features,
            atlases: atlases.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn atlas(&self, id: AtlasId) -> Result<&AtlasSpec> {
        self.atlases.iter().find(|a| a.id == id).ok_or_else(|| Error::invalid(format!("dataset has no atlas {id}")))
    }

    pub fn features_of(&self, id: AtlasId) -> Result<&Array2<f64>> {
        self.features.get(&id).ok_or_else(|| Error::invalid(format!("dataset has no {id} features")))
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sites: indices.iter().map(|&i| self.sites[i].clone()).collect(),
            demographics: indices.iter().map(|&i| self.demographics[i]).collect(),
            features: self.features.iter().map(|(k, x)| (*k, x.select(Axis(0), indices))).collect(),
            atlases: self.atlases.clone(),
        }
    }

    /// Demographics with missing values filled from the whole cohort.
    pub fn impute_cohort(&self) -> Result<Vec<Demographics>> {
        impute_with(&self.demographics, &(0..self.len()).collect::<Vec<_>>())
    }
}

fn impute_with(demographics: &[Demographics], fit_rows: &[usize]) -> Result<Vec<Demographics>> {
    let recs: Vec<SubjectRecord> = fit_rows
        .iter()
        .map(|&i| SubjectRecord {
            subject_id: String::new(),
            label: Label::Asd,
            site: None,
            demographics: demographics[i],
            series: BTreeMap::new(),
        })
        .collect();
    let imputer = DemographicImputer::fit(&recs)?;
    Ok(demographics.iter().map(|d| imputer.apply(d)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Refit inside every training fold.
    PerFold,
    /// Fit once on all subjects (mirrors a possible non-nested protocol).
    WholeDataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Imputation {
    /// Means over the whole cohort, before splitting.
    Cohort,
    /// Means over the training fold only.
    FoldTrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    /// Train each member on the fold's training side minus a stratified
    /// holdout, and weight it by its holdout accuracy.
    InnerHoldout,
    /// Train on the whole training side and weight by training accuracy.
    TrainingSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldAveraging {
    Unweighted,
    BySize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub atlases: Vec<AtlasId>,
    /// Overrides each atlas's absolute retention count with a percentage.
    #[serde(default)]
    pub retain_percentage: Option<f64>,
    pub feature_selection: bool,
    pub use_demographics: bool,
    pub ae1: AutoencoderConfig,
    pub ae2: AutoencoderConfig,
    pub mlp: MlpConfig,
    pub folds: usize,
    pub stratified: bool,
    pub seed: u64,
    pub fscore_scope: Scope,
    pub pretrain_scope: Scope,
    pub imputation: Imputation,
    pub weight_source: WeightSource,
    pub holdout_fraction: f64,
    pub fold_averaging: FoldAveraging,
    pub voting: VotingMode,
    /// Worker threads for fold-level parallelism; 0 uses one per core.
    /// Results do not depend on it.
    pub jobs: usize,
}

impl PipelineConfig {
    /// Hyperparameters exactly as tabulated for the full-size model.
    pub fn paper() -> Self {
        PipelineConfig {
            atlases: AtlasId::ALL.to_vec(),
            retain_percentage: None,
            feature_selection: true,
            use_demographics: true,
            ae1: AutoencoderConfig::ae1(),
            ae2: AutoencoderConfig::ae2(),
            mlp: MlpConfig::default(),
            folds: 10,
            stratified: true,
            seed: 0,
            fscore_scope: Scope::PerFold,
            pretrain_scope: Scope::PerFold,
            imputation: Imputation::Cohort,
            weight_source: WeightSource::InnerHoldout,
            holdout_fraction: 0.1,
            fold_averaging: FoldAveraging::Unweighted,
            voting: VotingMode::Soft,
            jobs: 0,
        }
    }

    /// Narrow, short-schedule variant for reduced-ROI synthetic data that
    /// completes a 10-fold, 3-atlas run in seconds on one core.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.ae1 = AutoencoderConfig {
            hidden_dim: 48,
            optimizer: OptimizerConfig::gd(0.05, 20, 30),
            ..AutoencoderConfig::ae1()
        };
        c.ae2 = AutoencoderConfig {
            hidden_dim: 24,
            optimizer: OptimizerConfig::gd(0.05, 10, 30),
            ..AutoencoderConfig::ae2()
        };
        c.mlp = MlpConfig {
            hidden: [48, 24, 12],
            optimizer: OptimizerConfig::momentum(0.005, 10, 60, 0.1, 0.9),
            ..MlpConfig::default()
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.atlases.is_empty() {
            return Err(Error::invalid("atlases: at least one atlas must be enabled"));
        }
        let mut sorted = self.atlases.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.atlases.len() {
            return Err(Error::invalid("atlases: duplicate atlas"));
        }
        if let Some(p) = self.retain_percentage {
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::invalid(format!("retain_percentage: {p} outside (0, 100]")));
            }
        }
        if self.folds < 2 {
            return Err(Error::invalid("folds: cross-validation needs at least 2 folds"));
        }
        if !(0.0 < self.holdout_fraction && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout_fraction: must lie in (0, 1)"));
        }
        if self.pretrain_scope == Scope::WholeDataset && self.feature_selection && self.fscore_scope == Scope::PerFold {
            return Err(Error::invalid("pretrain_scope: whole-dataset pre-training needs a whole-dataset F-score mask"));
        }
        self.ae1.validate()?;
        self.ae2.validate()?;
        self.mlp.validate()?;
        if self.mlp.hidden[0] != self.ae1.hidden_dim {
            return Err(Error::invalid(format!(
                "mlp.hidden[0] ({}) must equal ae1.hidden_dim ({})",
                self.mlp.hidden[0], self.ae1.hidden_dim
            )));
        }
        if self.mlp.hidden[1] != self.ae2.hidden_dim && !self.mlp.ae2_projection {
            return Err(Error::invalid(format!(
                "mlp.hidden[1] ({}) must equal ae2.hidden_dim ({}) unless mlp.ae2_projection is set",
                self.mlp.hidden[1], self.ae2.hidden_dim
            )));
        }
        Ok(())
    }

    fn mlp_config(&self) -> MlpConfig {
        MlpConfig { use_demographics: self.use_demographics, ..self.mlp.clone() }
    }

    fn retain_count(&self, atlas: &AtlasSpec) -> usize {
        match self.retain_percentage {
            Some(p) => feature_selection::count_for_percentage(p, atlas.n_features()).max(1),
            None => atlas.retain_count,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn from_predictions(truth: &[Label], pred: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (t, p) in truth.iter().zip(pred) {
            match (t, p) {
                (Label::Asd, Label::Asd) => c.tp += 1,
                (Label::Asd, Label::Tc) => c.fn_ += 1,
                (Label::Tc, Label::Tc) => c.tn += 1,
                (Label::Tc, Label::Asd) => c.fp += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn add(&self, o: &Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn, fp: self.fp + o.fp }
    }
}

/// Accuracy, ASD recall (sensitivity) and TC recall (specificity). Ratios
/// with an empty denominator are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let m = Metrics {
            accuracy: ratio(c.tp + c.tn, c.total()),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            specificity: ratio(c.tn, c.tn + c.fp),
            confusion: c,
        };
        if m.sensitivity.is_none() {
            log::warn!("sensitivity undefined: no ASD subjects evaluated");
        }
        if m.specificity.is_none() {
            log::warn!("specificity undefined: no TC subjects evaluated");
        }
        m
    }
}

/// Fold means of each metric over the folds where it is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn mean_metrics(folds: &[(Metrics, usize)], averaging: FoldAveraging) -> MeanMetrics {
    let avg = |get: &dyn Fn(&Metrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<(f64, f64)> = folds
            .iter()
            .filter_map(|(m, n)| {
                get(m).map(|v| {
                    let w = match averaging {
                        FoldAveraging::Unweighted => 1.0,
                        FoldAveraging::BySize => *n as f64,
                    };
                    (v, w)
                })
            })
            .collect();
        let wsum: f64 = vals.iter().map(|(_, w)| w).sum();
        (wsum > 0.0).then(|| vals.iter().map(|(v, w)| v * w).sum::<f64>() / wsum)
    };
    MeanMetrics {
        accuracy: avg(&|m| m.accuracy),
        sensitivity: avg(&|m| m.sensitivity),
        specificity: avg(&|m| m.specificity),
    }
}

/// Fold index for every subject, in dataset order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    /// Subject id → fold.
    pub fn by_id(&self, ids: &[String]) -> BTreeMap<String, usize> {
        ids.iter().cloned().zip(self.fold_of.iter().copied()).collect()
    }
}

/// Seeded k-way partition. When stratified, each class is shuffled and the
/// classes are dealt round-robin back to back, so both total fold sizes and
/// per-class counts per fold differ by at most one.
pub fn make_folds(labels: &[Label], k: usize, seed: u64, stratified: bool) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k > labels.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} subjects", labels.len())));
    }
    let mut rng = seeds::rng(seed, &[seeds::tag("folds")]);
    let mut sequence: Vec<usize> = Vec::with_capacity(labels.len());
    if stratified {
        let minority = [Label::Asd, Label::Tc].iter().map(|c| labels.iter().filter(|l| *l == c).count()).min().unwrap_or(0);
        if k > minority {
            return Err(Error::invalid(format!("k = {k} exceeds minority class size {minority}")));
        }
        for class in [Label::Asd, Label::Tc] {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            sequence.extend(idx);
        }
    } else {
        sequence.extend(0..labels.len());
        sequence.shuffle(&mut rng);
    }
    let mut fold_of = vec![0; labels.len()];
    for (pos, &i) in sequence.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { k, seed, stratified, fold_of })
}

/// Stratified split of `indices` into (fit, holdout), holdout ≈ `fraction`.
fn stratified_holdout(indices: &[usize], labels: &[Label], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeds::rng(seed, &[seeds::tag("holdout")]);
    let mut fit = Vec::new();
    let mut hold = Vec::new();
    for class in [Label::Asd, Label::Tc] {
        let mut idx: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_hold = ((idx.len() as f64 * fraction).round() as usize).clamp(usize::from(idx.len() >= 4), idx.len().saturating_sub(2));
        hold.extend_from_slice(&idx[..n_hold]);
        fit.extend_from_slice(&idx[n_hold..]);
    }
    fit.sort_unstable();
    hold.sort_unstable();
    (fit, hold)
}

/// Components fitted once on all subjects for whole-dataset scopes.
#[derive(Clone, Debug, Default)]
pub struct GlobalFit {
    pub masks: BTreeMap<AtlasId, FeatureMask>,
    pub ssdae: BTreeMap<AtlasId, [TrainedAutoencoder; 2]>,
}

fn fit_global(dataset: &Dataset, config: &PipelineConfig) -> Result<GlobalFit> {
    let mut g = GlobalFit::default();
    let all: Vec<usize> = (0..dataset.len()).collect();
    for &atlas in &config.atlases {
        let spec = dataset.atlas(atlas)?;
        let x = dataset.features_of(atlas)?;
        if config.feature_selection && config.fscore_scope == Scope::WholeDataset {
            g.masks.insert(atlas, fit_mask(x.view(), &dataset.labels, &all, spec, config)?);
        }
        if config.pretrain_scope == Scope::WholeDataset {
            let mask = match g.masks.get(&atlas) {
                Some(m) => m.clone(),
                None => FeatureMask::identity(atlas, spec.n_features()),
            };
            let xm = feature_selection::apply_mask(x.view(), &mask)?;
            let seed = seeds::derive(config.seed, &[seeds::tag("global-ssdae"), seeds::tag(atlas.as_str())]);
            g.ssdae.insert(atlas, ssdae::stack(xm.view(), &[config.ae1.clone(), config.ae2.clone()], seed)?);
        }
    }
    Ok(g)
}

fn fit_mask(x: ArrayView2<f64>, labels: &[Label], rows: &[usize], spec: &AtlasSpec, config: &PipelineConfig) -> Result<FeatureMask> {
    let xr = x.select(Axis(0), rows);
    let lr: Vec<Label> = rows.iter().map(|&i| labels[i]).collect();
    let ranking = feature_selection::fscore(spec.id, xr.view(), &lr)?;
    feature_selection::select_top(&ranking, config.retain_count(spec))
}

/// One atlas classifier fitted on `train` rows, with its voting accuracy.
pub fn fit_member(
    dataset: &Dataset,
    demographics: &[Demographics],
    train: &[usize],
    atlas: AtlasId,
    config: &PipelineConfig,
    global: &GlobalFit,
    seed: u64,
) -> Result<(MlpModel, f64)> {
    let spec = dataset.atlas(atlas)?;
    let x = dataset.features_of(atlas)?;
    let (fit_rows, eval_rows) = match config.weight_source {
        WeightSource::InnerHoldout => stratified_holdout(train, &dataset.labels, config.holdout_fraction, seed),
        WeightSource::TrainingSet => (train.to_vec(), train.to_vec()),
    };
    let eval_rows = if eval_rows.is_empty() { fit_rows.clone() } else { eval_rows };

    let mask = if !config.feature_selection {
        FeatureMask::identity(atlas, spec.n_features())
    } else if let Some(m) = global.masks.get(&atlas) {
        m.clone()
    } else {
        fit_mask(x.view(), &dataset.labels, &fit_rows, spec, config)?
    };

    let x_fit = feature_selection::apply_mask(x.select(Axis(0), &fit_rows).view(), &mask)?;
    let aes = match global.ssdae.get(&atlas) {
        Some(a) => a.clone(),
        None => ssdae::stack(x_fit.view(), &[config.ae1.clone(), config.ae2.clone()], seeds::derive(seed, &[seeds::tag("ssdae")]))?,
    };
    let model = classifier::build_from_ssdae(&aes, mask, &config.mlp_config(), seed)?;
    let demo_fit: Vec<Demographics> = fit_rows.iter().map(|&i| demographics[i]).collect();
    let labels_fit: Vec<Label> = fit_rows.iter().map(|&i| dataset.labels[i]).collect();
    let model = classifier::fine_tune(model, x_fit.view(), &demo_fit, &labels_fit, seed)?;

    let x_eval = x.select(Axis(0), &eval_rows);
    let demo_eval: Vec<Demographics> = eval_rows.iter().map(|&i| demographics[i]).collect();
    let pred = model.predict(crate::feature_selection::apply_mask(x_eval.view(), &model.mask)?.view(), &demo_eval)?;
    let truth: Vec<Label> = eval_rows.iter().map(|&i| dataset.labels[i]).collect();
    let acc = classifier::accuracy(&pred, &truth);
    debug!("atlas {atlas}: member accuracy {acc:.4} on {} subjects", truth.len());
    Ok((model, acc))
}

/// Ensemble over `config.atlases` fitted on `train` rows.
pub fn fit_ensemble(
    dataset: &Dataset,
    demographics: &[Demographics],
    train: &[usize],
    config: &PipelineConfig,
    global: &GlobalFit,
    seed: u64,
) -> Result<EnsembleModel> {
    let mut members = Vec::with_capacity(config.atlases.len());
    for &atlas in &config.atlases {
        let member_seed = seeds::derive(seed, &[seeds::tag(atlas.as_str())]);
        let (model, accuracy) = fit_member(dataset, demographics, train, atlas, config, global, member_seed)
            .map_err(|e| Error::Member { member: atlas.to_string(), source: Box::new(e) })?;
        members.push(EnsembleMember { model, accuracy });
    }
    // Accuracy weights are undefined when every member scored 0; use equal weights.
    if members.iter().all(|m| m.accuracy == 0.0) {
        members.iter_mut().for_each(|m| m.accuracy = 1.0);
    }
    let mut ens = EnsembleModel::new(members)?;
    ens.voting = config.voting;
    Ok(ens)
}

/// Trains on the whole dataset (no test split).
pub fn train_full(dataset: &Dataset, config: &PipelineConfig) -> Result<EnsembleModel> {
    config.validate()?;
    let demographics = dataset.impute_cohort()?;
    let global = fit_global(dataset, config)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    fit_ensemble(dataset, &demographics, &all, config, &global, seeds::derive(config.seed, &[seeds::tag("full")]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub label: Label,
    pub predicted: Label,
    pub scores: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: Metrics,
    pub member_accuracy: BTreeMap<AtlasId, f64>,
    pub weights: BTreeMap<AtlasId, f64>,
    /// SHA-256 over every trained parameter, mask and scaler of the fold.
    pub parameter_digest: String,
    pub predictions: Vec<Prediction>,
    #[serde(skip)]
    pub duration_ms: u128,
}

fn ensemble_digest(ens: &EnsembleModel) -> String {
    let mut h = Sha256::new();
    for m in &ens.members {
        h.update(m.model.atlas_id.as_str().as_bytes());
        h.update(m.model.net.param_bytes());
        for i in &m.model.mask.retained {
            h.update((*i as u64).to_le_bytes());
        }
        if let Some(s) = &m.model.scaler {
            for v in s.mean.iter().chain(&s.std) {
                h.update(v.to_le_bytes());
            }
        }
        h.update(m.accuracy.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn fold_demographics(dataset: &Dataset, train: &[usize], config: &PipelineConfig) -> Result<Vec<Demographics>> {
    match config.imputation {
        Imputation::Cohort => dataset.impute_cohort(),
        Imputation::FoldTrain => impute_with(&dataset.demographics, train),
    }
}

/// Fits on the training side of `fold` and scores its test side.
pub fn run_fold(
    dataset: &Dataset,
    config: &PipelineConfig,
    folds: &FoldAssignment,
    fold: usize,
    global: &GlobalFit,
) -> Result<FoldResult> {
    let start = Instant::now();
    let train = folds.train_indices(fold);
    let test = folds.test_indices(fold);
    let wrap = |e: Error| Error::Fold { fold, source: Box::new(e) };
    if train.is_empty() || test.is_empty() {
        return Err(wrap(Error::invalid("fold has an empty train or test side")));
    }
    let demographics = fold_demographics(dataset, &train, config).map_err(wrap)?;
    let ens = fit_ensemble(dataset, &demographics, &train, config, global, seeds::derive(config.seed, &[fold as u64]))
        .map_err(wrap)?;

    let test_features: BTreeMap<AtlasId, Array2<f64>> = config
        .atlases
        .iter()
        .map(|a| Ok((*a, dataset.features_of(*a)?.select(Axis(0), &test))))
        .collect::<Result<_>>()
        .map_err(wrap)?;
    let views: BTreeMap<AtlasId, ArrayView2<f64>> = test_features.iter().map(|(k, v)| (*k, v.view())).collect();
    let test_demo: Vec<Demographics> = test.iter().map(|&i| demographics[i]).collect();
    let votes = ens.vote_batch(&views, &test_demo).map_err(wrap)?;

    let truth: Vec<Label> = test.iter().map(|&i| dataset.labels[i]).collect();
    let pred: Vec<Label> = votes.iter().map(|v| v.label).collect();
    let metrics = Metrics::from_confusion(Confusion::from_predictions(&truth, &pred));
    let predictions = test
        .iter()
        .zip(&votes)
        .map(|(&i, v)| Prediction { subject_id: dataset.subject_ids[i].clone(), label: dataset.labels[i], predicted: v.label, scores: v.scores })
        .collect();
    info!("fold {fold}: accuracy {:.4} on {} test subjects", metrics.accuracy.unwrap_or(f64::NAN), test.len());
    Ok(FoldResult {
        fold,
        n_train: train.len(),
        n_test: test.len(),
        metrics,
        member_accuracy: ens.members.iter().map(|m| (m.model.atlas_id, m.accuracy)).collect(),
        weights: ens.members.iter().zip(&ens.weights).map(|(m, w)| (m.model.atlas_id, *w)).collect(),
        parameter_digest: ensemble_digest(&ens),
        predictions,
        duration_ms: start.elapsed().as_millis(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
    /// Metrics over confusion counts pooled across folds.
    pub pooled: Metrics,
    pub assignment: FoldAssignment,
}

impl CvReport {
    /// Deterministic metrics JSON (no timings).
    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Per-fold metrics table plus a `mean` row.
    pub fn metrics_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("fold,n_test,accuracy,sensitivity,specificity,tp,fn,tn,fp\n");
        for r in &self.folds {
            let m = &r.metrics;
            let c = &m.confusion;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.fold,
                r.n_test,
                f(m.accuracy),
                f(m.sensitivity),
                f(m.specificity),
                c.tp,
                c.fn_,
                c.tn,
                c.fp
            ));
        }
        let c = &self.pooled.confusion;
        s.push_str(&format!(
            "mean,{},{},{},{},{},{},{},{}\n",
            c.total(),
            f(self.mean.accuracy),
            f(self.mean.sensitivity),
            f(self.mean.specificity),
            c.tp,
            c.fn_,
            c.tn,
            c.fp
        ));
        s
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Stratified k-fold evaluation of the configured pipeline.
pub fn cross_validate(dataset: &Dataset, config: &PipelineConfig) -> Result<CvReport> {
    config.validate()?;
    for &a in &config.atlases {
        dataset.features_of(a)?;
    }
    let folds = make_folds(&dataset.labels, config.folds, config.seed, config.stratified)?;
    let global = fit_global(dataset, config)?;
    let results: Vec<FoldResult> = with_pool(config.jobs, || {
        (0..folds.k).into_par_iter().map(|f| run_fold(dataset, config, &folds, f, &global)).collect::<Result<Vec<_>>>()
    })??;
    let per_fold: Vec<(Metrics, usize)> = results.iter().map(|r| (r.metrics, r.n_test)).collect();
    let pooled = results.iter().fold(Confusion::default(), |acc, r| acc.add(&r.metrics.confusion));
    Ok(CvReport {
        mean: mean_metrics(&per_fold, config.fold_averaging),
        pooled: Metrics::from_confusion(pooled),
        folds: results,
        assignment: folds,
    })
}

/// Mean CV accuracy for each retention percentage.
pub fn retention_sweep_cv(dataset: &Dataset, config: &PipelineConfig, percentages: &[f64]) -> Result<SweepTable> {
    if !config.feature_selection {
        return Err(Error::invalid("feature_selection: a retention sweep needs feature selection enabled"));
    }
    feature_selection::retention_sweep(percentages, |pct| {
        let cfg = PipelineConfig { retain_percentage: Some(pct), ..config.clone() };
        info!("retention sweep at {pct}%");
        cross_validate(dataset, &cfg)?.mean.accuracy.ok_or_else(|| Error::invalid("no accuracy recorded"))
    })
}

/// One configuration of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSwitch {
    pub name: String,
    pub atlases: Vec<AtlasId>,
    pub feature_selection: bool,
    pub use_demographics: bool,
}

/// All-on, every atlas subset, and the feature-selection and demographic
/// removals.
pub fn standard_switches(atlases: &[AtlasId]) -> Vec<AblationSwitch> {
    let name_of = |removed: &[AtlasId]| -> String {
        let names: Vec<&str> = removed.iter().map(|a| a.as_str()).collect();
        format!("- {{{}}}", names.join(", "))
    };
    let mut out = vec![AblationSwitch { name: "all".into(), atlases: atlases.to_vec(), feature_selection: true, use_demographics: true }];
    let n = atlases.len();
    if n > 1 {
        // Subsets by decreasing size, excluding the full set.
        for size in (1..n).rev() {
            for bits in 1u32..(1 << n) {
                if bits.count_ones() as usize != size {
                    continue;
                }
                let kept: Vec<AtlasId> = (0..n).filter(|i| bits & (1 << i) != 0).map(|i| atlases[i]).collect();
                let removed: Vec<AtlasId> = (0..n).filter(|i| bits & (1 << i) == 0).map(|i| atlases[i]).collect();
                out.push(AblationSwitch { name: name_of(&removed), atlases: kept, feature_selection: true, use_demographics: true });
            }
        }
    }
    out.push(AblationSwitch { name: "- Feature selection".into(), atlases: atlases.to_vec(), feature_selection: false, use_demographics: true });
    out.push(AblationSwitch { name: "- Demographic".into(), atlases: atlases.to_vec(), feature_selection: true, use_demographics: false });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub switch: AblationSwitch,
    pub mean: MeanMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("configuration,atlases,feature_selection,demographics,accuracy,sensitivity,specificity\n");
        for r in &self.rows {
            let atl: Vec<&str> = r.switch.atlases.iter().map(|a| a.as_str()).collect();
            s.push_str(&format!(
                "\"{}\",{},{},{},{},{},{}\n",
                r.switch.name,
                atl.join("+"),
                r.switch.feature_selection,
                r.switch.use_demographics,
                f(r.mean.accuracy),
                f(r.mean.sensitivity),
                f(r.mean.specificity)
            ));
        }
        s
    }
}

/// Re-runs cross-validation for each switch combination.
pub fn ablate(dataset: &Dataset, base: &PipelineConfig, switches: &[AblationSwitch]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(switches.len());
    for sw in switches {
        if sw.atlases.is_empty() {
            return Err(Error::invalid(format!("ablation `{}` enables no atlas", sw.name)));
        }
        let cfg = PipelineConfig {
            atlases: sw.atlases.clone(),
            feature_selection: sw.feature_selection,
            use_demographics: sw.use_demographics,
            ..base.clone()
        };
        info!("ablation `{}`", sw.name);
        let report = cross_validate(dataset, &cfg)?;
        rows.push(AblationRow { switch: sw.clone(), mean: report.mean });
    }
    Ok(AblationTable { rows })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRetention {
    pub retained: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub selector_atlas: AtlasId,
    pub retained_ids: Vec<String>,
    pub discarded_ids: Vec<String>,
    /// Subjects the selector could not score (missing features).
    pub unevaluable_ids: Vec<String>,
    pub asd: ClassRetention,
    pub tc: ClassRetention,
    pub retention_rate: f64,
}

/// Trains a single-atlas selector on subjects from `site`.
pub fn train_selector(dataset: &Dataset, site: &str, atlas: AtlasId, config: &PipelineConfig) -> Result<MlpModel> {
    let rows: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.sites[i].as_deref() == Some(site)).collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("no subjects from site `{site}`")));
    }
    let sub = dataset.subset(&rows);
    let cfg = PipelineConfig {
        atlases: vec![atlas],
        weight_source: WeightSource::TrainingSet,
        fscore_scope: Scope::PerFold,
        pretrain_scope: Scope::PerFold,
        ..config.clone()
    };
    let demographics = sub.impute_cohort()?;
    let all: Vec<usize> = (0..sub.len()).collect();
    let (model, acc) = fit_member(
        &sub,
        &demographics,
        &all,
        atlas,
        &cfg,
        &GlobalFit::default(),
        seeds::derive(config.seed, &[seeds::tag("selector"), seeds::tag(site)]),
    )?;
    info!("selector trained on {} subjects from {site}: training accuracy {acc:.4}", sub.len());
    Ok(model)
}

/// Keeps the subjects the selector classifies correctly. `demographics`
/// must be complete (imputed) and aligned with the dataset.
pub fn select_subset(selector: &MlpModel, dataset: &Dataset, demographics: &[Demographics]) -> Result<SubsetReport> {
    let atlas = selector.atlas_id;
    let mut report = SubsetReport {
        selector_atlas: atlas,
        retained_ids: Vec::new(),
        discarded_ids: Vec::new(),
        unevaluable_ids: Vec::new(),
        asd: ClassRetention::default(),
        tc: ClassRetention::default(),
        retention_rate: 0.0,
    };
    let Some(x) = dataset.features.get(&atlas) else {
        report.unevaluable_ids = dataset.subject_ids.clone();
        return Ok(report);
    };
    let mut scored = Vec::new();
    for i in 0..dataset.len() {
        let row = x.row(i);
        if row.len() != selector.mask.n_features || row.iter().any(|v| !v.is_finite()) || !demographics[i].is_complete() {
            report.unevaluable_ids.push(dataset.subject_ids[i].clone());
        } else {
            scored.push(i);
        }
    }
    if !scored.is_empty() {
        let xs = x.select(Axis(0), &scored);
        let ds: Vec<Demographics> = scored.iter().map(|&i| demographics[i]).collect();
        let pred = selector.predict(feature_selection::apply_mask(xs.view(), &selector.mask)?.view(), &ds)?;
        for (&i, p) in scored.iter().zip(pred) {
            let truth = dataset.labels[i];
            let class = if truth == Label::Asd { &mut report.asd } else { &mut report.tc };
            class.total += 1;
            if p == truth {
                class.retained += 1;
                report.retained_ids.push(dataset.subject_ids[i].clone());
            } else {
                report.discarded_ids.push(dataset.subject_ids[i].clone());
            }
        }
        report.retention_rate = report.retained_ids.len() as f64 / scored.len() as f64;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantVariance {
    pub name: String,
    pub n_subjects: usize,
    pub per_feature: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub variants: Vec<VariantVariance>,
}

/// Sample variance of every feature for each named dataset variant.
pub fn variance_report(variants: &[(&str, ArrayView2<f64>)]) -> Result<VarianceReport> {
    let mut out = Vec::with_capacity(variants.len());
    for (name, x) in variants {
        if x.nrows() < 2 {
            return Err(Error::invalid(format!("variant `{name}` needs at least 2 subjects")));
        }
        let per_feature = x.var_axis(Axis(0), 1.0).to_vec();
        let mean = per_feature.iter().sum::<f64>() / per_feature.len().max(1) as f64;
        let mut sorted = per_feature.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        out.push(VariantVariance { name: name.to_string(), n_subjects: x.nrows(), per_feature, mean, median });
    }
    Ok(VarianceReport { variants: out })
}

impl VarianceReport {
    /// `feature_index,<variant>...` rows.
    pub fn per_feature_csv(&self) -> String {
        let mut s = String::from("feature_index");
        for v in &self.variants {
            s.push(',');
            s.push_str(&v.name);
        }
        s.push('\n');
        let n = self.variants.first().map(|v| v.per_feature.len()).unwrap_or(0);
        for i in 0..n {
            s.push_str(&i.to_string());
            for v in &self.variants {
                s.push(',');
                s.push_str(&v.per_feature.get(i).map(|x| x.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,n_subjects,mean_variance,median_variance\n");
        for v in &self.variants {
            s.push_str(&format!("{},{},{},{}\n", v.name, v.n_subjects, v.mean, v.median));
        }
        s
    }
}

/// Reproducibility record for a run; timings live here, not in metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_durations_ms: Vec<u128>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_duration_ms: Option<u128>,
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: String, master_seed: u64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256,
            master_seed,
            fold_seeds: Vec::new(),
            fold_durations_ms: Vec::new(),
            total_duration_ms: None,
        }
    }

    pub fn for_cv(command: &str, config: &PipelineConfig, config_sha256: String, report: &CvReport, total_ms: u128) -> Self {
        RunManifest {
            fold_seeds: (0..report.folds.len()).map(|f| seeds::derive(config.seed, &[f as u64])).collect(),
            fold_durations_ms: report.folds.iter().map(|f| f.duration_ms).collect(),
            total_duration_ms: Some(total_ms),
            ..Self::new(command, config_sha256, config.seed)
        }
    }
}
