//! Pearson functional connectivity and canonical upper-triangle flattening.
//!
//! Feature index `k` of an `N`-ROI atlas addresses the pair `(u, v)`, `u < v`,
//! in row-major order of the strict upper triangle: `(0,1), (0,2), ...,
//! (0,N-1), (1,2), ...`. Masks and model files store indices in this order.

use log::warn;
use ndarray::{Array1, Array2, Axis};

use crate::data::{AtlasId, RoiTimeSeries, SubjectRecord};
use crate::error::{Error, Result};

/// Symmetric ROI-by-ROI correlation matrix with a unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMatrix {
    pub atlas_id: AtlasId,
    pub values: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub atlas_id: AtlasId,
    pub subject_id: String,
    pub values: Array1<f64>,
}

/// Number of strict upper-triangle entries for `n_rois` regions.
pub fn n_features(n_rois: usize) -> usize {
    n_rois * n_rois.saturating_sub(1) / 2
}

/// Correlation matrix of the series' columns, computed in centred form.
/// Zero-variance columns correlate 0 with every other column.
pub fn pearson_matrix(atlas_id: AtlasId, series: &RoiTimeSeries) -> Result<ConnectivityMatrix> {
    let x = series.values();
    let (t_len, n) = x.dim();
    if t_len < 2 {
        return Err(Error::shape("need at least 2 time points"));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centred = x - &mean;
    let sq = centred.map_axis(Axis(0), |c| c.dot(&c));
    // Relative threshold: a column is constant when its spread is at the
    // rounding level of its magnitude.
    let scale = x.map_axis(Axis(0), |c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let constant: Vec<bool> =
        (0..n).map(|r| sq[r].sqrt() <= 1e-12 * scale[r].max(1e-300) * (t_len as f64).sqrt()).collect();
    let n_const = constant.iter().filter(|c| **c).count();
    if n_const == n {
        return Err(Error::invalid("every ROI series is constant; no usable signal"));
    }
    if n_const > 0 {
        warn!("{n_const} zero-variance ROI column(s); their correlations set to 0");
    }

    let cov = centred.t().dot(&centred);
    let mut values = Array2::<f64>::zeros((n, n));
    for u in 0..n {
        values[[u, u]] = 1.0;
        for v in (u + 1)..n {
            let r = if constant[u] || constant[v] {
                0.0
            } else {
                (cov[[u, v]] / (sq[u].sqrt() * sq[v].sqrt())).clamp(-1.0, 1.0)
            };
            values[[u, v]] = r;
            values[[v, u]] = r;
        }
    }
    Ok(ConnectivityMatrix { atlas_id, values })
}

/// Strict upper triangle in canonical order.
pub fn flatten_upper(matrix: &ConnectivityMatrix, subject_id: &str) -> FeatureVector {
    let n = matrix.values.nrows();
    let mut out = Vec::with_capacity(n_features(n));
    for u in 0..n {
        for v in (u + 1)..n {
            out.push(matrix.values[[u, v]]);
        }
    }
    FeatureVector { atlas_id: matrix.atlas_id, subject_id: subject_id.to_string(), values: Array1::from(out) }
}

/// Canonical position of the pair `(u, v)`, `u < v`.
pub fn pair_to_index(u: usize, v: usize, n_rois: usize) -> Result<usize> {
    if u >= v || v >= n_rois {
        return Err(Error::invalid(format!("pair ({u}, {v}) invalid for {n_rois} ROIs")));
    }
    // Entries preceding row u: sum_{r<u} (n-1-r).
    Ok(u * (2 * n_rois - u - 1) / 2 + (v - u - 1))
}

/// Inverse of [`pair_to_index`].
pub fn index_to_pair(index: usize, n_rois: usize) -> Result<(usize, usize)> {
    let total = n_features(n_rois);
    if index >= total {
        return Err(Error::invalid(format!("feature index {index} out of range 0..{total}")));
    }
    // Closed-form row estimate, then correct for floating-point drift.
    let nf = n_rois as f64;
    let disc = (2.0 * nf - 1.0).powi(2) - 8.0 * index as f64;
    let mut u = (((2.0 * nf - 1.0) - disc.max(0.0).sqrt()) / 2.0).floor() as usize;
    let row_start = |u: usize| u * (2 * n_rois - u - 1) / 2;
    while u > 0 && row_start(u) > index {
        u -= 1;
    }
    while u + 1 < n_rois && row_start(u + 1) <= index {
        u += 1;
    }
    let v = index - row_start(u) + u + 1;
    Ok((u, v))
}

/// Subjects × features matrix for one atlas, in record order.
pub fn feature_matrix(records: &[SubjectRecord], atlas_id: AtlasId) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = records
        .iter()
        .map(|r| {
            let series = r
                .series
                .get(&atlas_id)
                .ok_or_else(|| Error::invalid(format!("subject {} has no {atlas_id} series", r.subject_id)))?;
            let m = pearson_matrix(atlas_id, series)?;
            Ok(flatten_upper(&m, &r.subject_id).values)
        })
        .collect::<Result<_>>()?;
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape(format!("subjects disagree on {atlas_id} ROI count")));
    }
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// CSV dump: header of canonical feature indices, one row per subject.
pub fn write_feature_csv(path: &std::path::Path, subject_ids: &[String], features: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..features.ncols()).map(|i| i.to_string()));
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (id, row) in subject_ids.iter().zip(features.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn corr_of(u: &[f64], v: &[f64]) -> f64 {
        let x = Array2::from_shape_fn((u.len(), 2), |(t, c)| if c == 0 { u[t] } else { v[t] });
        pearson_matrix(AtlasId::CC, &RoiTimeSeries::new(x).unwrap()).unwrap().values[[0, 1]]
    }

    #[test]
    fn hand_values() {
        assert!((corr_of(&[1., 2., 3.], &[1., 2., 3.]) - 1.0).abs() < 1e-15);
        assert!((corr_of(&[1., 2., 3.], &[3., 2., 1.]) + 1.0).abs() < 1e-15);
        assert!((corr_of(&[1., 2., 3.], &[1., 3., 2.]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_column_correlates_zero() {
        let x = array![[1.0, 5.0, 2.0], [2.0, 5.0, 1.0], [3.0, 5.0, 7.0]];
        let m = pearson_matrix(AtlasId::AAL, &RoiTimeSeries::new(x).unwrap()).unwrap();
        assert_eq!(m.values[[0, 1]], 0.0);
        assert_eq!(m.values[[1, 2]], 0.0);
        assert_eq!(m.values[[1, 1]], 1.0);
        let all_const = array![[1.0, 5.0], [1.0, 5.0]];
        assert!(pearson_matrix(AtlasId::AAL, &RoiTimeSeries::new(all_const).unwrap()).is_err());
    }

    #[test]
    fn flatten_small() {
        let m = ConnectivityMatrix { atlas_id: AtlasId::EZ, values: array![[1.0, 0.3], [0.3, 1.0]] };
        assert_eq!(flatten_upper(&m, "s").values.to_vec(), vec![0.3]);
        let m = ConnectivityMatrix {
            atlas_id: AtlasId::EZ,
            values: array![[1.0, 0.1, 0.2], [0.1, 1.0, 0.3], [0.2, 0.3, 1.0]],
        };
        assert_eq!(flatten_upper(&m, "s").values.to_vec(), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn pair_indexing_edges() {
        assert_eq!(index_to_pair(0, 4).unwrap(), (0, 1));
        assert_eq!(index_to_pair(5, 4).unwrap(), (2, 3));
        assert!(index_to_pair(6, 4).is_err());
        assert!(pair_to_index(2, 2, 4).is_err());
        assert!(pair_to_index(1, 4, 4).is_err());
    }
}
