//! F-score feature ranking and top-k masks.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{AtlasId, Label};
use crate::error::{Error, Result};

/// Per-feature F-scores aligned to canonical indices, plus the ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct FScoreRanking {
    pub atlas_id: AtlasId,
    pub scores: Vec<f64>,
    /// Indices by descending score; ties by ascending index.
    pub order: Vec<usize>,
}

/// Retained feature indices (in rank order) and their scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub atlas_id: AtlasId,
    /// Dimension of the unmasked feature vector.
    pub n_features: usize,
    pub retained: Vec<usize>,
    /// Scores aligned with `retained`; empty for an unranked identity mask.
    #[serde(with = "extended_f64")]
    pub fscores: Vec<f64>,
}

/// Ceiling of `pct` percent of `s`.
pub fn count_for_percentage(pct: f64, s: usize) -> usize {
    ((pct * s as f64) / 100.0 - 1e-9).ceil().max(0.0) as usize
}

/// Between-class over within-class spread for every column. A zero
/// denominator scores +inf when the class means differ and 0 otherwise.
pub fn fscore(atlas_id: AtlasId, features: ArrayView2<f64>, labels: &[Label]) -> Result<FScoreRanking> {
    if features.nrows() != labels.len() {
        return Err(Error::shape(format!("{} rows vs {} labels", features.nrows(), labels.len())));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_positive()).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("F-score needs both classes"));
    }
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::invalid("F-score needs at least 2 subjects per class"));
    }
    let xp = features.select(Axis(0), &pos);
    let xn = features.select(Axis(0), &neg);
    let mean_all = features.mean_axis(Axis(0)).expect("rows");
    let mean_p = xp.mean_axis(Axis(0)).expect("rows");
    let mean_n = xn.mean_axis(Axis(0)).expect("rows");
    let var_p = (&xp - &mean_p).mapv(|d| d * d).sum_axis(Axis(0)) / (pos.len() - 1) as f64;
    let var_n = (&xn - &mean_n).mapv(|d| d * d).sum_axis(Axis(0)) / (neg.len() - 1) as f64;

    let scores: Vec<f64> = (0..features.ncols())
        .map(|i| {
            let num = (mean_p[i] - mean_all[i]).powi(2) + (mean_n[i] - mean_all[i]).powi(2);
            let den = var_p[i] + var_n[i];
            if den > 0.0 {
                num / den
            } else if num > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect();
    let order = rank_descending(&scores);
    Ok(FScoreRanking { atlas_id, scores, order })
}

fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `k` best-ranked features.
pub fn select_top(ranking: &FScoreRanking, k: usize) -> Result<FeatureMask> {
    let s = ranking.scores.len();
    if k == 0 || k > s {
        return Err(Error::invalid(format!("retain count {k} outside 1..={s}")));
    }
    let retained = ranking.order[..k].to_vec();
    let fscores = retained.iter().map(|&i| ranking.scores[i]).collect();
    Ok(FeatureMask { atlas_id: ranking.atlas_id, n_features: s, retained, fscores })
}

impl FeatureMask {
    /// All features in canonical order (feature selection disabled).
    pub fn identity(atlas_id: AtlasId, n_features: usize) -> Self {
        FeatureMask { atlas_id, n_features, retained: (0..n_features).collect(), fscores: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_features];
        for &i in &self.retained {
            if i >= self.n_features {
                return Err(Error::invalid(format!("mask index {i} out of range 0..{}", self.n_features)));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("mask index {i} duplicated")));
            }
        }
        if !self.fscores.is_empty() && self.fscores.len() != self.retained.len() {
            return Err(Error::shape("mask scores not aligned with indices"));
        }
        Ok(())
    }

    /// Selects the mask's columns from a single unmasked row.
    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.n_features {
            return Err(Error::shape(format!("row has {} features, mask expects {}", row.len(), self.n_features)));
        }
        Ok(self.retained.iter().map(|&i| row[i]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mask: FeatureMask = serde_json::from_str(&text)?;
        mask.validate()?;
        Ok(mask)
    }
}

/// Columns of `features` selected and ordered by `mask.retained`.
pub fn apply_mask(features: ArrayView2<f64>, mask: &FeatureMask) -> Result<Array2<f64>> {
    if features.ncols() != mask.n_features {
        return Err(Error::shape(format!("{} feature columns, mask expects {}", features.ncols(), mask.n_features)));
    }
    Ok(features.select(Axis(1), &mask.retained))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub percentage: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Row with the highest accuracy; the smaller percentage wins ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.mean_accuracy >= r.mean_accuracy => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("percentage,mean_accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}\n", r.percentage, r.mean_accuracy));
        }
        s
    }
}

/// Re-runs `eval` (selection + evaluation at a retention percentage) for
/// every percentage in `fractions`.
pub fn retention_sweep<F>(fractions: &[f64], mut eval: F) -> Result<SweepTable>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut rows = Vec::with_capacity(fractions.len());
    for &pct in fractions {
        if !(pct > 0.0 && pct <= 100.0) {
            return Err(Error::invalid(format!("retention percentage {pct} outside (0, 100]")));
        }
        rows.push(SweepRow { percentage: pct, mean_accuracy: eval(pct)? });
    }
    Ok(SweepTable { rows })
}

/// JSON has no infinity; encode non-finite scores as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Num> = v
            .iter()
            .map(|&x| {
                if x.is_finite() {
                    Num::F(x)
                } else if x.is_nan() {
                    Num::S("nan".into())
                } else if x > 0.0 {
                    Num::S("inf".into())
                } else {
                    Num::S("-inf".into())
                }
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<Num>::deserialize(d)?;
        raw.into_iter()
            .map(|n| match n {
                Num::F(x) => Ok(x),
                Num::S(s) => match s.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    other => Err(serde::de::Error::custom(format!("bad score `{other}`"))),
                },
            })
            .collect()
    }
}
