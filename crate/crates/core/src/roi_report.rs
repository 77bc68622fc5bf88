//! ROI appearance frequencies over a feature mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::connectivity::index_to_pair;
use crate::data::{AtlasId, AtlasSpec};
use crate::error::{Error, Result};
use crate::feature_selection::FeatureMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub rank: usize,
    pub roi_index: usize,
    pub frequency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRanking {
    pub atlas_id: AtlasId,
    pub features_considered: usize,
    pub entries: Vec<RoiEntry>,
}

/// Counts how often each ROI appears in the mask's retained pairs and keeps
/// the `top_n` most frequent (ties by ascending ROI index). ROIs that never
/// appear are omitted.
pub fn roi_frequencies(mask: &FeatureMask, atlas: &AtlasSpec, top_n: usize) -> Result<RoiRanking> {
    if mask.atlas_id != atlas.id {
        return Err(Error::invalid(format!("mask is for {}, atlas is {}", mask.atlas_id, atlas.id)));
    }
    if mask.n_features != atlas.n_features() {
        return Err(Error::shape(format!("mask has {} features, atlas {} has {}", mask.n_features, atlas.id, atlas.n_features())));
    }
    let mut counts = vec![0usize; atlas.n_rois];
    for &idx in &mask.retained {
        let (u, v) = index_to_pair(idx, atlas.n_rois)?;
        counts[u] += 1;
        counts[v] += 1;
    }
    let mut order: Vec<usize> = (0..atlas.n_rois).filter(|&r| counts[r] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(top_n);
    let entries = order
        .into_iter()
        .enumerate()
        .map(|(i, roi)| RoiEntry {
            rank: i + 1,
            roi_index: roi,
            frequency: counts[roi],
            name: atlas.roi_names.as_ref().and_then(|n| n.get(roi).cloned()).filter(|n| !n.is_empty()),
            coords: atlas.roi_coords.as_ref().and_then(|c| c.get(roi).copied()),
        })
        .collect();
    Ok(RoiRanking { atlas_id: atlas.id, features_considered: mask.len(), entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl RoiRanking {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,roi_index,name,frequency,x,y,z\n");
        for e in &self.entries {
            let name = e.name.as_deref().unwrap_or("");
            let name = if name.contains([',', '"']) { format!("\"{}\"", name.replace('"', "\"\"")) } else { name.to_string() };
            let [x, y, z] = e.coords.map(|c| c.map(|v| v.to_string())).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{},{}\n", e.rank, e.roi_index, name, e.frequency, x, y, z));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn export(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let text = match format {
            ReportFormat::Json => self.to_json()?,
            ReportFormat::Csv => self.to_csv(),
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads an atlas sidecar CSV `(roi_index, name, x, y, z)` into the atlas's
/// names and coordinates.
pub fn attach_sidecar(atlas: &mut AtlasSpec, path: &Path) -> Result<()> {
    #[derive(Deserialize)]
    struct Row {
        roi_index: usize,
        #[serde(default)]
        name: String,
        x: f64,
        y: f64,
        z: f64,
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut names = vec![String::new(); atlas.n_rois];
    let mut coords = vec![[f64::NAN; 3]; atlas.n_rois];
    let mut seen = vec![false; atlas.n_rois];
    for row in reader.deserialize::<Row>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if row.roi_index >= atlas.n_rois {
            return Err(Error::invalid(format!("sidecar ROI {} outside atlas {}", row.roi_index, atlas.id)));
        }
        names[row.roi_index] = row.name;
        coords[row.roi_index] = [row.x, row.y, row.z];
        seen[row.roi_index] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("sidecar lacks ROI {missing}")));
    }
    atlas.roi_names = Some(names);
    atlas.roi_coords = Some(coords);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::pair_to_index;

    #[test]
    fn single_feature_counts_both_ends() {
        let atlas = AtlasSpec::reduced(AtlasId::CC, 5);
        let idx = pair_to_index(1, 3, 5).unwrap();
        let mask = FeatureMask { atlas_id: AtlasId::CC, n_features: 10, retained: vec![idx], fscores: vec![1.0] };
        let r = roi_frequencies(&mask, &atlas, 10).unwrap();
        let got: Vec<(usize, usize)> = r.entries.iter().map(|e| (e.roi_index, e.frequency)).collect();
        assert_eq!(got, vec![(1, 1), (3, 1)]);
    }

    #[test]
    fn full_mask_gives_degree() {
        let atlas = AtlasSpec::reduced(AtlasId::AAL, 6);
        let r = roi_frequencies(&FeatureMask::identity(AtlasId::AAL, 15), &atlas, 100).unwrap();
        assert_eq!(r.entries.len(), 6);
        assert!(r.entries.iter().all(|e| e.frequency == 5));
        assert_eq!(r.entries.iter().map(|e| e.roi_index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn atlas_mismatch_rejected() {
        let atlas = AtlasSpec::reduced(AtlasId::AAL, 6);
        assert!(roi_frequencies(&FeatureMask::identity(AtlasId::EZ, 15), &atlas, 10).is_err());
        assert!(roi_frequencies(&FeatureMask::identity(AtlasId::AAL, 14), &atlas, 10).is_err());
    }

    #[test]
    fn empty_ranking_is_header_only() {
        let r = RoiRanking { atlas_id: AtlasId::CC, features_considered: 0, entries: vec![] };
        assert_eq!(r.to_csv(), "rank,roi_index,name,frequency,x,y,z\n");
    }

    #[test]
    fn csv_golden() {
        let r = RoiRanking {
            atlas_id: AtlasId::CC,
            features_considered: 3,
            entries: vec![
                RoiEntry { rank: 1, roi_index: 7, frequency: 3, name: Some("Precuneus, left".into()), coords: Some([-8.0, -56.5, 40.0]) },
                RoiEntry { rank: 2, roi_index: 2, frequency: 2, name: None, coords: None },
            ],
        };
        assert_eq!(r.to_csv(), "rank,roi_index,name,frequency,x,y,z\n1,7,\"Precuneus, left\",3,-8,-56.5,40\n2,2,,2,,,\n");
        assert_eq!(RoiRanking::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn sidecar_attaches_names_and_coords() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("atlas.csv");
        std::fs::write(&p, "roi_index,name,x,y,z\n0,A,1,2,3\n1,,4,5,6\n2,C,7,8,9\n").unwrap();
        let mut atlas = AtlasSpec::reduced(AtlasId::EZ, 3);
        attach_sidecar(&mut atlas, &p).unwrap();
        let r = roi_frequencies(&FeatureMask::identity(AtlasId::EZ, 3), &atlas, 3).unwrap();
        assert_eq!(r.entries[0].name.as_deref(), Some("A"));
        assert_eq!(r.entries[1].name, None);
        assert_eq!(r.entries[2].coords, Some([7.0, 8.0, 9.0]));
        let mut short = AtlasSpec::reduced(AtlasId::EZ, 4);
        assert!(attach_sidecar(&mut short, &p).is_err());
    }
}
