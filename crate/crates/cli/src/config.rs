//! Run configuration: a TOML file layered over a named preset.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::ValueEnum;
use connectome_ensemble::data::{AtlasId, AtlasSpec, PhenotypeSchema};
use connectome_ensemble::evaluation::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-size atlases and the tabulated hyperparameters.
    Paper,
    /// Reduced atlases (30/20/20 ROIs) and a short, narrow schedule.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub id: AtlasId,
    pub n_rois: usize,
    pub retain_count: usize,
    /// CSV with `roi_index,name,x,y,z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub atlas: Vec<AtlasEntry>,
    pub phenotype: PhenotypeSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub subjects: usize,
    pub effect: f64,
    pub seed: u64,
    pub timepoints: usize,
    pub missing_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSection {
    pub site: String,
    pub atlas: AtlasId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub top_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub percentages: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub pipeline: PipelineConfig,
    pub subset: SubsetSection,
    pub roi_report: ReportSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let atlases: Vec<AtlasSpec> = match preset {
            Preset::Paper => AtlasId::ALL.iter().map(|a| AtlasSpec::standard(*a)).collect(),
            Preset::Desk => vec![AtlasSpec::reduced(AtlasId::CC, 30), AtlasSpec::reduced(AtlasId::AAL, 20), AtlasSpec::reduced(AtlasId::EZ, 20)],
        };
        RunConfig {
            preset,
            out: None,
            data: DataSection {
                dir: None,
                atlas: atlases
                    .iter()
                    .map(|a| AtlasEntry { id: a.id, n_rois: a.n_rois, retain_count: a.retain_count, sidecar: None })
                    .collect(),
                phenotype: PhenotypeSchema::default(),
            },
            synth: SynthSection { subjects: 200, effect: 0.8, seed: 0, timepoints: 120, missing_rate: 0.04 },
            pipeline: match preset {
                Preset::Paper => PipelineConfig::paper(),
                Preset::Desk => PipelineConfig::desk(),
            },
            subset: SubsetSection { site: "NYU".into(), atlas: AtlasId::CC },
            roi_report: ReportSection { top_n: 10 },
            sweep: SweepSection { percentages: vec![5.0, 10.0, 15.0, 20.0, 30.0, 50.0] },
        }
    }

    /// Reads `path` and layers it over the preset it names (default `paper`).
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let preset = match user.get("preset") {
            None => Preset::Paper,
            Some(v) => Preset::deserialize(v.clone()).context("preset: expected \"paper\" or \"desk\"")?,
        };
        let mut base = toml::Table::try_from(Self::preset(preset))?;
        merge(&mut base, user, "")?;
        let cfg: RunConfig = toml::Value::Table(base).try_into()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the resolved configuration's TOML text.
    pub fn sha256(&self) -> anyhow::Result<String> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn atlas_specs(&self) -> anyhow::Result<Vec<AtlasSpec>> {
        let mut out = Vec::new();
        for e in &self.data.atlas {
            let mut spec = AtlasSpec::with_counts(e.id, e.n_rois, e.retain_count);
            spec.validate().with_context(|| format!("data.atlas {}", e.id))?;
            if let Some(p) = &e.sidecar {
                connectome_ensemble::roi_report::attach_sidecar(&mut spec, p)
                    .with_context(|| format!("data.atlas {} sidecar", e.id))?;
            }
            out.push(spec);
        }
        Ok(out)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.pipeline.validate()?;
        for a in &self.pipeline.atlases {
            if !self.data.atlas.iter().any(|e| e.id == *a) {
                bail!("pipeline.atlases: {a} has no data.atlas entry");
            }
        }
        for e in &self.data.atlas {
            AtlasSpec::with_counts(e.id, e.n_rois, e.retain_count).validate().with_context(|| format!("data.atlas {}", e.id))?;
        }
        if self.synth.subjects < 2 {
            bail!("synth.subjects: need at least 2");
        }
        if !(0.0..=1.0).contains(&self.synth.effect) {
            bail!("synth.effect: must lie in [0, 1]");
        }
        if self.roi_report.top_n == 0 {
            bail!("roi_report.top_n: must be >= 1");
        }
        if self.sweep.percentages.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
            bail!("sweep.percentages: values must lie in (0, 100]");
        }
        Ok(())
    }
}

/// Recursively overwrites `base` with `user`, rejecting keys the preset
/// does not know (optional keys are listed explicitly).
fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> anyhow::Result<()> {
    const OPTIONAL: &[&str] = &["out", "data.dir", "pipeline.retain_percentage"];
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL.contains(&path.as_str()) => {
                base.insert(key, v);
            }
            (None, _) => bail!("unknown config key `{path}`"),
        }
    }
    Ok(())
}
