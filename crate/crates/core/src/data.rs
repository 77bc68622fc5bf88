//! Subject records, phenotype and time-series ingest, demographic imputation,
//! and a seeded synthetic cohort generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AtlasId {
    CC,
    AAL,
    EZ,
}

impl AtlasId {
    pub const ALL: [AtlasId; 3] = [AtlasId::CC, AtlasId::AAL, AtlasId::EZ];

    pub fn as_str(self) -> &'static str {
        match self {
            AtlasId::CC => "CC",
            AtlasId::AAL => "AAL",
            AtlasId::EZ => "EZ",
        }
    }
}

impl fmt::Display for AtlasId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AtlasId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CC" | "CC200" => Ok(AtlasId::CC),
            "AAL" => Ok(AtlasId::AAL),
            "EZ" => Ok(AtlasId::EZ),
            other => Err(Error::invalid(format!("unknown atlas `{other}`"))),
        }
    }
}

/// Parcellation description: ROI count, default retention count and optional
/// per-ROI coordinates/names used by the ROI report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasSpec {
    pub id: AtlasId,
    pub n_rois: usize,
    pub retain_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_coords: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_names: Option<Vec<String>>,
}

/// Retention fraction used to size masks for non-standard ROI counts.
pub const DEFAULT_RETENTION_PCT: f64 = 15.0;

impl AtlasSpec {
    pub fn cc() -> Self {
        Self::with_counts(AtlasId::CC, 200, 3000)
    }

    pub fn aal() -> Self {
        Self::with_counts(AtlasId::AAL, 116, 1000)
    }

    pub fn ez() -> Self {
        Self::with_counts(AtlasId::EZ, 116, 1000)
    }

    pub fn standard(id: AtlasId) -> Self {
        match id {
            AtlasId::CC => Self::cc(),
            AtlasId::AAL => Self::aal(),
            AtlasId::EZ => Self::ez(),
        }
    }

    /// An atlas with a reduced ROI count and a 15% retention count.
    pub fn reduced(id: AtlasId, n_rois: usize) -> Self {
        let s = n_rois * n_rois.saturating_sub(1) / 2;
        let k = crate::feature_selection::count_for_percentage(DEFAULT_RETENTION_PCT, s).max(1);
        Self::with_counts(id, n_rois, k)
    }

    pub fn with_counts(id: AtlasId, n_rois: usize, retain_count: usize) -> Self {
        AtlasSpec { id, n_rois, retain_count, roi_coords: None, roi_names: None }
    }

    /// Flattened feature dimension N(N-1)/2.
    pub fn n_features(&self) -> usize {
        self.n_rois * self.n_rois.saturating_sub(1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rois < 2 {
            return Err(Error::invalid(format!("atlas {} needs at least 2 ROIs", self.id)));
        }
        if self.retain_count == 0 || self.retain_count > self.n_features() {
            return Err(Error::invalid(format!(
                "atlas {}: retain_count {} outside 1..={}",
                self.id,
                self.retain_count,
                self.n_features()
            )));
        }
        if let Some(c) = &self.roi_coords {
            if c.len() != self.n_rois {
                return Err(Error::shape(format!("atlas {}: {} coords for {} ROIs", self.id, c.len(), self.n_rois)));
            }
        }
        Ok(())
    }
}

/// Diagnostic class. ASD is the positive class and output index 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "ASD")]
    Asd,
    #[serde(rename = "TC")]
    Tc,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Asd => 0,
            Label::Tc => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Asd
        } else {
            Label::Tc
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Asd
    }
}

/// Demographic fields in the fixed fusion order (age, sex, handedness, fiq).
/// Categorical fields are numerically encoded: sex male = 1, female = 2;
/// handedness left = 1, ambiguous = 2, right = 3.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: Option<f64>,
    pub sex: Option<f64>,
    pub handedness: Option<f64>,
    pub fiq: Option<f64>,
}

pub const DEMOGRAPHIC_FIELDS: [&str; 4] = ["age", "sex", "handedness", "fiq"];

impl Demographics {
    pub fn complete(age: f64, sex: f64, handedness: f64, fiq: f64) -> Self {
        Demographics { age: Some(age), sex: Some(sex), handedness: Some(handedness), fiq: Some(fiq) }
    }

    pub fn fields(&self) -> [Option<f64>; 4] {
        [self.age, self.sex, self.handedness, self.fiq]
    }

    fn set(&mut self, i: usize, v: Option<f64>) {
        match i {
            0 => self.age = v,
            1 => self.sex = v,
            2 => self.handedness = v,
            _ => self.fiq = v,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.fields().iter().all(Option::is_some)
    }

    /// The four encoded values, or an error naming the first missing field.
    pub fn values(&self) -> Result<[f64; 4]> {
        let f = self.fields();
        let mut out = [0.0; 4];
        for (i, v) in f.iter().enumerate() {
            out[i] = v.ok_or_else(|| Error::invalid(format!("demographic `{}` not imputed", DEMOGRAPHIC_FIELDS[i])))?;
        }
        Ok(out)
    }
}

/// Time-by-ROI signal matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries {
    values: Array2<f64>,
}

impl RoiTimeSeries {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::shape(format!("time series needs >= 2 time points, got {}", values.nrows())));
        }
        if values.ncols() < 1 {
            return Err(Error::shape("time series has no ROI columns"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("time series contains non-finite values"));
        }
        Ok(RoiTimeSeries { values })
    }

    pub fn n_rois(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_timepoints(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: Label,
    pub site: Option<String>,
    pub demographics: Demographics,
    pub series: BTreeMap<AtlasId, RoiTimeSeries>,
}

/// Column names and label codes for the phenotype table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhenotypeSchema {
    pub subject_id: String,
    pub label: String,
    pub age: String,
    pub sex: String,
    pub handedness: String,
    pub fiq: String,
    pub site: String,
    pub asd_codes: Vec<String>,
    pub tc_codes: Vec<String>,
}

impl Default for PhenotypeSchema {
    fn default() -> Self {
        PhenotypeSchema {
            subject_id: "SUB_ID".into(),
            label: "DX_GROUP".into(),
            age: "AGE_AT_SCAN".into(),
            sex: "SEX".into(),
            handedness: "HANDEDNESS_CATEGORY".into(),
            fiq: "FIQ".into(),
            site: "SITE_ID".into(),
            asd_codes: vec!["1".into()],
            tc_codes: vec!["2".into()],
        }
    }
}

impl PhenotypeSchema {
    fn parse_label(&self, subject: &str, raw: &str) -> Result<Label> {
        let v = raw.trim();
        if self.asd_codes.iter().any(|c| c.eq_ignore_ascii_case(v)) {
            Ok(Label::Asd)
        } else if self.tc_codes.iter().any(|c| c.eq_ignore_ascii_case(v)) {
            Ok(Label::Tc)
        } else {
            Err(Error::UnknownLabel { subject: subject.to_string(), value: v.to_string() })
        }
    }
}

fn parse_number(raw: &str) -> Option<f64> {
    let v: f64 = raw.trim().parse().ok()?;
    // ABIDE uses -9999 (and sometimes -999) as a missing sentinel.
    if !v.is_finite() || v <= -999.0 {
        None
    } else {
        Some(v)
    }
}

fn parse_sex(raw: &str) -> Option<f64> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "m" | "male" => Some(1.0),
        "f" | "female" => Some(2.0),
        other => parse_number(other).filter(|v| *v == 1.0 || *v == 2.0),
    }
}

fn parse_handedness(raw: &str) -> Option<f64> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "l" | "left" => Some(1.0),
        "ambi" | "ambiguous" | "mixed" | "a" | "l->r" | "r->l" => Some(2.0),
        "r" | "right" => Some(3.0),
        other => parse_number(other).filter(|v| (1.0..=3.0).contains(v)),
    }
}

/// Reads a phenotype CSV into records without time series. Unparseable
/// demographic cells become missing.
pub fn ingest_phenotype(path: &Path, schema: &PhenotypeSchema) -> Result<Vec<SubjectRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(&schema.subject_id).ok_or_else(|| Error::MissingColumn(schema.subject_id.clone()))?;
    let label_col = col(&schema.label).ok_or_else(|| Error::MissingColumn(schema.label.clone()))?;
    let age_col = col(&schema.age);
    let sex_col = col(&schema.sex);
    let hand_col = col(&schema.handedness);
    let fiq_col = col(&schema.fiq);
    let site_col = col(&schema.site);
    for (name, c) in [(&schema.age, age_col), (&schema.sex, sex_col), (&schema.handedness, hand_col), (&schema.fiq, fiq_col)] {
        if c.is_none() {
            warn!("phenotype column `{name}` absent; field treated as missing");
        }
    }

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let get = |c: Option<usize>| c.and_then(|c| row.get(c)).unwrap_or("");
        let id = get(Some(id_col)).to_string();
        if id.is_empty() {
            continue;
        }
        *seen.entry(id.clone()).or_default() += 1;
        let label = schema.parse_label(&id, get(Some(label_col)))?;
        let demographics = Demographics {
            age: parse_number(get(age_col)),
            sex: parse_sex(get(sex_col)),
            handedness: parse_handedness(get(hand_col)),
            fiq: parse_number(get(fiq_col)),
        };
        let site = site_col.map(|c| row.get(c).unwrap_or("").to_string()).filter(|s| !s.is_empty());
        records.push(SubjectRecord { subject_id: id, label, site, demographics, series: BTreeMap::new() });
    }

    let mut dups: Vec<String> = seen.into_iter().filter(|(_, n)| *n > 1).map(|(id, _)| id).collect();
    if !dups.is_empty() {
        dups.sort();
        return Err(Error::DuplicateIds(dups));
    }
    Ok(records)
}

/// Per-field means of observed demographic values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicImputer {
    pub means: [f64; 4],
}

impl DemographicImputer {
    pub fn fit(records: &[SubjectRecord]) -> Result<Self> {
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        for r in records {
            for (i, v) in r.demographics.fields().iter().enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    counts[i] += 1;
                }
            }
        }
        let mut means = [0.0; 4];
        for i in 0..4 {
            if counts[i] == 0 {
                return Err(Error::AllMissing(DEMOGRAPHIC_FIELDS[i]));
            }
            means[i] = sums[i] / counts[i] as f64;
        }
        Ok(DemographicImputer { means })
    }

    pub fn apply(&self, d: &Demographics) -> Demographics {
        let mut out = *d;
        for (i, v) in d.fields().iter().enumerate() {
            if v.is_none() {
                out.set(i, Some(self.means[i]));
            }
        }
        out
    }
}

/// Replaces every missing demographic by the cohort mean of that field.
pub fn impute_demographics(records: &[SubjectRecord]) -> Result<Vec<SubjectRecord>> {
    let imputer = DemographicImputer::fit(records)?;
    Ok(records
        .iter()
        .map(|r| SubjectRecord { demographics: imputer.apply(&r.demographics), ..r.clone() })
        .collect())
}

/// Parses a delimited numeric table (rows = time points, columns = ROIs).
/// The delimiter is inferred (comma, tab, or whitespace) and a leading
/// non-numeric row is treated as a header.
pub fn read_timeseries_file(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_timeseries(&text)
}

pub fn parse_timeseries(text: &str) -> Result<Array2<f64>> {
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#')).collect();
    let Some(&(_, first)) = lines.first() else {
        return Err(Error::shape("empty time-series file"));
    };
    let split = |line: &str| -> Vec<String> {
        if line.contains(',') {
            line.split(',').map(|s| s.trim().to_string()).collect()
        } else if line.contains('\t') {
            line.split('\t').map(|s| s.trim().to_string()).collect()
        } else {
            line.split_whitespace().map(str::to_string).collect()
        }
    };
    let has_header = split(first).iter().any(|c| c.parse::<f64>().is_err());
    let body = if has_header { &lines[1..] } else { &lines[..] };
    let n_cols = body.first().map(|(_, l)| split(l).len()).unwrap_or(0);
    let mut data = Vec::with_capacity(body.len() * n_cols);
    for &(row, line) in body {
        let cells = split(line);
        if cells.len() != n_cols {
            return Err(Error::shape(format!("row {} has {} columns, expected {n_cols}", row + 1, cells.len())));
        }
        for (column, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::NonNumeric { row: row + 1, column: column + 1, cell: cell.clone() })?;
            data.push(v);
        }
    }
    Array2::from_shape_vec((body.len(), n_cols), data).map_err(|e| Error::shape(e.to_string()))
}

pub fn write_timeseries_file(path: &Path, values: &Array2<f64>) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 20);
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Location of one subject's series under a dataset root.
pub fn timeseries_path(root: &Path, atlas: AtlasId, subject_id: &str) -> PathBuf {
    root.join(atlas.as_str()).join(format!("{subject_id}.csv"))
}

#[derive(Clone, Debug, Default)]
pub struct IngestOutcome {
    pub retained: Vec<SubjectRecord>,
    /// (subject id, reason) for every excluded subject.
    pub dropped: Vec<(String, String)>,
}

fn load_series(path: &Path, atlas: &AtlasSpec) -> Result<RoiTimeSeries> {
    let values = read_timeseries_file(path)?;
    if values.ncols() != atlas.n_rois {
        return Err(Error::shape(format!("{} columns, atlas {} has {} ROIs", values.ncols(), atlas.id, atlas.n_rois)));
    }
    RoiTimeSeries::new(values)
}

/// Attaches each subject's series for `atlas` from `<root>/<atlas>/<id>.csv`.
/// Subjects whose file is missing or invalid are dropped and logged.
pub fn ingest_timeseries(root: &Path, atlas: &AtlasSpec, records: Vec<SubjectRecord>) -> IngestOutcome {
    let mut out = IngestOutcome::default();
    for mut rec in records {
        let path = timeseries_path(root, atlas.id, &rec.subject_id);
        match load_series(&path, atlas) {
            Ok(series) => {
                rec.series.insert(atlas.id, series);
                out.retained.push(rec);
            }
            Err(e) => {
                warn!("dropping subject {} for atlas {}: {e}", rec.subject_id, atlas.id);
                out.dropped.push((rec.subject_id, e.to_string()));
            }
        }
    }
    info!("atlas {}: retained {}, dropped {}", atlas.id, out.retained.len(), out.dropped.len());
    out
}

/// Reads `<root>/phenotype.csv` and every atlas's series. A subject is kept
/// only when all requested atlases load.
pub fn load_dataset(root: &Path, schema: &PhenotypeSchema, atlases: &[AtlasSpec]) -> Result<IngestOutcome> {
    let records = ingest_phenotype(&root.join(PHENOTYPE_FILE), schema)?;
    let mut outcome = IngestOutcome { retained: records, dropped: Vec::new() };
    for atlas in atlases {
        atlas.validate()?;
        let step = ingest_timeseries(root, atlas, std::mem::take(&mut outcome.retained));
        outcome.retained = step.retained;
        outcome.dropped.extend(step.dropped);
    }
    Ok(outcome)
}

pub const PHENOTYPE_FILE: &str = "phenotype.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameters of the synthetic cohort generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub atlases: Vec<AtlasSpec>,
    pub effect: f64,
    pub seed: u64,
    pub n_timepoints: usize,
    /// (site name, extra white-noise standard deviation).
    pub sites: Vec<(String, f64)>,
    /// Probability that an individual demographic cell is blank.
    pub missing_rate: f64,
}

impl SynthConfig {
    pub fn new(n_subjects: usize, atlases: Vec<AtlasSpec>, effect: f64, seed: u64) -> Self {
        SynthConfig {
            n_subjects,
            atlases,
            effect,
            seed,
            n_timepoints: 120,
            sites: vec![
                ("NYU".into(), 0.6),
                ("UM".into(), 1.0),
                ("USM".into(), 1.0),
                ("UCLA".into(), 1.2),
                ("PITT".into(), 1.4),
            ],
            missing_rate: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthAtlasTruth {
    pub atlas_id: AtlasId,
    pub n_rois: usize,
    pub discriminative_rois: Vec<usize>,
    /// Canonical (u < v) ROI pairs whose correlation carries the class effect.
    pub discriminative_pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub config: SynthConfig,
    pub truth: Vec<SynthAtlasTruth>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<SubjectRecord>,
    pub manifest: SynthManifest,
}

const LATENT_FACTORS: usize = 3;

/// Draws a balanced ASD/TC cohort whose connectivity differs between classes
/// on a block of ROIs. Within the block, ASD subjects share one extra latent
/// signal while TC subjects receive independent signals of equal variance, so
/// per-ROI variance is class-independent and only the block's pairwise
/// correlations shift, by roughly `effect`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticDataset> {
    if config.n_subjects < 2 {
        return Err(Error::invalid("synthetic cohort needs at least 2 subjects"));
    }
    if !(0.0..=1.0).contains(&config.effect) {
        return Err(Error::invalid(format!("effect {} outside [0, 1]", config.effect)));
    }
    if config.n_timepoints < 2 {
        return Err(Error::invalid("n_timepoints must be >= 2"));
    }
    if config.sites.is_empty() {
        return Err(Error::invalid("at least one site required"));
    }
    for a in &config.atlases {
        a.validate()?;
    }

    let mut rng = seeds::rng(config.seed, &[seeds::tag("synth-cohort")]);
    let n_asd = config.n_subjects / 2;
    let mut labels: Vec<Label> =
        (0..config.n_subjects).map(|i| if i < n_asd { Label::Asd } else { Label::Tc }).collect();
    labels.shuffle(&mut rng);

    // Population structure per atlas.
    struct AtlasModel {
        block: Vec<usize>,
        loadings: Array2<f64>,
    }
    let mut models = Vec::new();
    let mut truth = Vec::new();
    for atlas in &config.atlases {
        let mut arng = seeds::rng(config.seed, &[seeds::tag("synth-atlas"), seeds::tag(atlas.id.as_str())]);
        let n = atlas.n_rois;
        let block_size = (n / 6).clamp(2, n);
        let mut rois: Vec<usize> = (0..n).collect();
        rois.shuffle(&mut arng);
        let mut block: Vec<usize> = rois[..block_size].to_vec();
        block.sort_unstable();
        let loadings = Array2::from_shape_fn((n, LATENT_FACTORS), |_| 0.5 * arng.sample::<f64, _>(StandardNormal));
        let pairs = block
            .iter()
            .enumerate()
            .flat_map(|(i, &u)| block[i + 1..].iter().map(move |&v| (u, v)))
            .collect();
        truth.push(SynthAtlasTruth {
            atlas_id: atlas.id,
            n_rois: n,
            discriminative_rois: block.clone(),
            discriminative_pairs: pairs,
        });
        models.push(AtlasModel { block, loadings });
    }

    let width = ((config.n_subjects as f64).log10().ceil() as usize).max(3);
    let mut records = Vec::with_capacity(config.n_subjects);
    for (i, &label) in labels.iter().enumerate() {
        let mut srng = seeds::rng(config.seed, &[seeds::tag("synth-subject"), i as u64]);
        let (site, site_noise) = &config.sites[srng.random_range(0..config.sites.len())];
        let asd = if label == Label::Asd { 1.0 } else { 0.0 };
        let strength = (config.effect * srng.random_range(0.75..1.25)).min(0.95);

        // Demographics with a label dependence that vanishes at effect = 0.
        let shift = config.effect * asd;
        let age = srng.random_range(6.5..40.0) - 2.0 * shift;
        let sex = if srng.random::<f64>() < 0.80 + 0.08 * shift { 1.0 } else { 2.0 };
        let hu: f64 = srng.random();
        let handedness = if hu < 0.08 { 1.0 } else if hu < 0.13 { 2.0 } else { 3.0 };
        let fiq = Normal::new(108.0 - 6.0 * shift, 13.0).unwrap().sample(&mut srng).round();
        let mut demographics = Demographics::complete(age.max(5.0), sex, handedness, fiq);
        for f in 0..4 {
            if srng.random::<f64>() < config.missing_rate {
                demographics.set(f, None);
            }
        }

        let mut series = BTreeMap::new();
        for (atlas, model) in config.atlases.iter().zip(&models) {
            let values = synth_series(&mut srng, atlas.n_rois, config.n_timepoints, model, label, strength, *site_noise);
            series.insert(atlas.id, RoiTimeSeries::new(values)?);
        }
        records.push(SubjectRecord {
            subject_id: format!("sub{:0width$}", i + 1, width = width),
            label,
            site: Some(site.clone()),
            demographics,
            series,
        });

        fn synth_series(
            rng: &mut impl Rng,
            n: usize,
            t_len: usize,
            model: &AtlasModel,
            label: Label,
            strength: f64,
            noise: f64,
        ) -> Array2<f64> {
            let loadings = model.loadings.mapv(|l| l + 0.2 * rng.sample::<f64, _>(StandardNormal));
            let factors = Array2::from_shape_fn((t_len, LATENT_FACTORS), |_| rng.sample::<f64, _>(StandardNormal));
            let mut x = factors.dot(&loadings.t());
            x.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
            // Base variance of an ROI, used to size the block signal so the
            // within-block correlation shift is approximately `strength`.
            let base_var = 0.25 * LATENT_FACTORS as f64 + noise * noise;
            let amp = (strength * base_var / (1.0 - strength)).sqrt();
            if amp > 0.0 {
                let shared: Vec<f64> = (0..t_len).map(|_| rng.sample(StandardNormal)).collect();
                for &r in &model.block {
                    for t in 0..t_len {
                        let g = match label {
                            Label::Asd => shared[t],
                            Label::Tc => rng.sample(StandardNormal),
                        };
                        x[[t, r]] += amp * g;
                    }
                }
            }
            for r in 0..n {
                let scale = rng.random_range(0.5..2.0);
                let offset = rng.random_range(-5.0..5.0);
                x.column_mut(r).mapv_inplace(|v| offset + scale * v);
            }
            x
        }
    }

    Ok(SyntheticDataset {
        records,
        manifest: SynthManifest { generator: "latent-factor-block/v1".into(), config: config.clone(), truth },
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes records in the ingest layout: `phenotype.csv` plus
/// `<atlas>/<subject_id>.csv`, and optionally a manifest.
pub fn write_dataset(root: &Path, records: &[SubjectRecord], manifest: Option<&SynthManifest>) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let schema = PhenotypeSchema::default();
    let pheno = root.join(PHENOTYPE_FILE);
    let mut w = csv::Writer::from_path(&pheno).map_err(|e| Error::csv(&pheno, e))?;
    w.write_record([&schema.subject_id, &schema.site, &schema.label, &schema.age, &schema.sex, &schema.handedness, &schema.fiq])
        .map_err(|e| Error::csv(&pheno, e))?;
    for r in records {
        let d = &r.demographics;
        let code = if r.label == Label::Asd { &schema.asd_codes[0] } else { &schema.tc_codes[0] };
        w.write_record([
            r.subject_id.clone(),
            r.site.clone().unwrap_or_default(),
            code.clone(),
            fmt_opt(d.age),
            fmt_opt(d.sex),
            fmt_opt(d.handedness),
            fmt_opt(d.fiq),
        ])
        .map_err(|e| Error::csv(&pheno, e))?;
    }
    w.flush().map_err(|e| Error::io(&pheno, e))?;

    let atlases: BTreeSet<AtlasId> = records.iter().flat_map(|r| r.series.keys().copied()).collect();
    for atlas in atlases {
        let dir = root.join(atlas.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for r in records {
        for (atlas, s) in &r.series {
            write_timeseries_file(&timeseries_path(root, *atlas, &r.subject_id), s.values())?;
        }
    }
    if let Some(m) = manifest {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(m)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
