//! Accuracy-weighted soft voting across per-atlas classifiers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::classifier::MlpModel;
use crate::data::{AtlasId, Demographics, Label};
use crate::error::{Error, Result};

/// Score differences at or below this are ties, resolved toward ASD.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// `w_i = acc_i / Σ acc`.
pub fn compute_weights(accuracies: &[f64]) -> Result<Vec<f64>> {
    if accuracies.is_empty() {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    if accuracies.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::invalid("member accuracies must be finite and >= 0"));
    }
    let total: f64 = accuracies.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("member accuracies are all zero"));
    }
    Ok(accuracies.iter().map(|a| a / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VotingMode {
    #[default]
    Soft,
    /// Weighted count of member argmax votes (debugging aid).
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub label: Label,
    /// Weighted class scores `[ASD, TC]`.
    pub scores: [f64; 2],
}

fn decide(scores: [f64; 2]) -> Label {
    if scores[0] >= scores[1] - TIE_TOLERANCE {
        Label::Asd
    } else {
        Label::Tc
    }
}

/// Combines member probability vectors `[P(ASD), P(TC)]`.
pub fn combine(weights: &[f64], probs: &[[f64; 2]], mode: VotingMode) -> Vote {
    let mut scores = [0.0; 2];
    for (w, p) in weights.iter().zip(probs) {
        match mode {
            VotingMode::Soft => {
                scores[0] += w * p[0];
                scores[1] += w * p[1];
            }
            VotingMode::Hard => scores[decide(*p).index()] += w,
        }
    }
    Vote { label: decide(scores), scores }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub model: MlpModel,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    pub weights: Vec<f64>,
    pub voting: VotingMode,
}

/// One subject's unmasked connectivity features per atlas.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectInput {
    pub features: BTreeMap<AtlasId, Vec<f64>>,
    pub demographics: Demographics,
}

impl EnsembleModel {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let weights = compute_weights(&members.iter().map(|m| m.accuracy).collect::<Vec<_>>())?;
        Ok(EnsembleModel { members, weights, voting: VotingMode::Soft })
    }

    pub fn vote(&self, subject: &SubjectInput) -> Result<Vote> {
        let mut probs = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let atlas = m.model.atlas_id;
            let p = subject
                .features
                .get(&atlas)
                .ok_or_else(|| Error::invalid(format!("subject lacks {atlas} features")))
                .and_then(|row| m.model.mask.apply_row(row))
                .and_then(|row| m.model.predict_proba(&row, &subject.demographics))
                .map_err(|e| Error::Member { member: atlas.to_string(), source: Box::new(e) })?;
            probs.push(p);
        }
        Ok(combine(&self.weights, &probs, self.voting))
    }

    /// Votes for many subjects given unmasked feature matrices per atlas.
    pub fn vote_batch(&self, features: &BTreeMap<AtlasId, ArrayView2<f64>>, demographics: &[Demographics]) -> Result<Vec<Vote>> {
        let per_member: Vec<Array2<f64>> = self
            .members
            .iter()
            .map(|m| {
                let atlas = m.model.atlas_id;
                features
                    .get(&atlas)
                    .ok_or_else(|| Error::invalid(format!("no {atlas} features supplied")))
                    .and_then(|x| m.model.predict_proba_unmasked(*x, demographics))
                    .map_err(|e| Error::Member { member: atlas.to_string(), source: Box::new(e) })
            })
            .collect::<Result<_>>()?;
        Ok((0..demographics.len())
            .map(|i| {
                let probs: Vec<[f64; 2]> = per_member.iter().map(|p| [p[[i, 0]], p[[i, 1]]]).collect();
                combine(&self.weights, &probs, self.voting)
            })
            .collect())
    }

    /// Writes one model file per member plus `ensemble.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (m, w) in self.members.iter().zip(&self.weights) {
            let file = format!("model_{}.json", m.model.atlas_id);
            m.model.save(&dir.join(&file))?;
            entries.push(EnsembleEntry { atlas_id: m.model.atlas_id, model_file: file, accuracy: m.accuracy, weight: *w });
        }
        let manifest = EnsembleFile { members: entries, voting: self.voting };
        let path = dir.join("ensemble.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads an ensemble file; member paths resolve relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: EnsembleFile = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let members = file
            .members
            .iter()
            .map(|e| Ok(EnsembleMember { model: MlpModel::load(&base.join(&e.model_file))?, accuracy: e.accuracy }))
            .collect::<Result<Vec<_>>>()?;
        let mut ens = EnsembleModel::new(members)?;
        ens.voting = file.voting;
        Ok(ens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEntry {
    pub atlas_id: AtlasId,
    pub model_file: String,
    pub accuracy: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub members: Vec<EnsembleEntry>,
    #[serde(default)]
    pub voting: VotingMode,
}
