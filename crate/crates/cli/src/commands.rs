use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context as _};
use connectome_ensemble::classifier::MlpModel;
use connectome_ensemble::connectivity::write_feature_csv;
use connectome_ensemble::data::{self, AtlasId, SynthConfig};
use connectome_ensemble::evaluation::{
    ablate, cross_validate, retention_sweep_cv, select_subset, standard_switches, train_full, train_selector,
    variance_report, Dataset, RunManifest,
};
use connectome_ensemble::feature_selection::{fscore, select_top, FeatureMask};
use connectome_ensemble::roi_report::{roi_frequencies, ReportFormat};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::Failure;

pub struct Run {
    pub cfg: RunConfig,
    pub command: &'static str,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dry_run: bool,
}

impl Run {
    fn out_dir(&self) -> Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| Failure::Validation(anyhow!("out: an output directory is required (--out or `out` in the config)")))
    }

    fn data_dir(&self) -> Result<&Path, Failure> {
        self.data
            .as_deref()
            .ok_or_else(|| Failure::Validation(anyhow!("data.dir: a dataset directory is required (--data or data.dir)")))
    }

    /// Validates everything up front; in dry-run mode prints the plan and
    /// reports whether to stop.
    pub fn prepare(&self, steps: &[String]) -> Result<bool, Failure> {
        self.cfg.validate().map_err(Failure::Validation)?;
        if !self.dry_run {
            return Ok(false);
        }
        println!("# dry run: {}", self.command);
        for s in steps {
            println!("# - {s}");
        }
        if let Some(d) = &self.data {
            println!("# data: {}", d.display());
        }
        if let Some(o) = &self.out {
            println!("# out: {}", o.display());
        }
        print!("{}", self.cfg.to_toml().map_err(Failure::Validation)?);
        Ok(true)
    }

    fn begin_output(&self) -> anyhow::Result<PathBuf> {
        let out = self.out_dir().map_err(Failure::into_inner)?.to_path_buf();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("config.toml"), self.cfg.to_toml()?).context("writing config.toml")?;
        Ok(out)
    }

    fn manifest(&self, seed: u64) -> anyhow::Result<RunManifest> {
        Ok(RunManifest::new(self.command, self.cfg.sha256()?, seed))
    }

    fn load(&self) -> anyhow::Result<Dataset> {
        let dir = self.data_dir().map_err(Failure::into_inner)?;
        let atlases = self.cfg.atlas_specs()?;
        let wanted: Vec<_> = atlases.iter().filter(|a| self.cfg.pipeline.atlases.contains(&a.id)).cloned().collect();
        let outcome = data::load_dataset(dir, &self.cfg.data.phenotype, &wanted)
            .with_context(|| format!("loading dataset {}", dir.display()))?;
        for (id, reason) in &outcome.dropped {
            warn!("dropped subject {id}: {reason}");
        }
        info!("{} subjects loaded, {} dropped", outcome.retained.len(), outcome.dropped.len());
        Ok(Dataset::from_records(&outcome.retained, &wanted)?)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(run: &Run) -> Result<(), Failure> {
    let s = &run.cfg.synth;
    let steps = [format!("generate {} subjects, effect {}, seed {}", s.subjects, s.effect, s.seed)];
    run.out_dir()?;
    if run.prepare(&steps)? {
        return Ok(());
    }
    let atlases = run.cfg.atlas_specs().map_err(Failure::Validation)?;
    let mut config = SynthConfig::new(s.subjects, atlases, s.effect, s.seed);
    config.n_timepoints = s.timepoints;
    config.missing_rate = s.missing_rate;
    let ds = data::generate_synthetic(&config).map_err(|e| Failure::Validation(e.into()))?;
    let out = run.begin_output()?;
    data::write_dataset(&out, &ds.records, Some(&ds.manifest)).context("writing dataset")?;
    write_json(&out.join("run_manifest.json"), &run.manifest(s.seed)?)?;
    println!("wrote {} subjects to {}", ds.records.len(), out.display());
    Ok(())
}

pub fn features(run: &Run) -> Result<(), Failure> {
    run.data_dir()?;
    run.out_dir()?;
    if run.prepare(&["compute connectivity features per atlas".into()])? {
        return Ok(());
    }
    let d = run.load()?;
    let out = run.begin_output()?;
    for (atlas, x) in &d.features {
        let path = out.join(format!("features_{atlas}.csv"));
        write_feature_csv(&path, &d.subject_ids, x).with_context(|| format!("writing {}", path.display()))?;
        println!("{atlas}: {} subjects x {} features -> {}", x.nrows(), x.ncols(), path.display());
    }
    write_json(&out.join("run_manifest.json"), &run.manifest(run.cfg.pipeline.seed)?)?;
    Ok(())
}

pub fn train(run: &Run) -> Result<(), Failure> {
    run.data_dir()?;
    run.out_dir()?;
    if run.prepare(&["fit the ensemble on every subject".into()])? {
        return Ok(());
    }
    let start = Instant::now();
    let d = run.load()?;
    let ens = train_full(&d, &run.cfg.pipeline)?;
    let out = run.begin_output()?;
    let path = ens.save(&out.join("model"))?;
    let mut m = run.manifest(run.cfg.pipeline.seed)?;
    m.total_duration_ms = Some(start.elapsed().as_millis());
    write_json(&out.join("run_manifest.json"), &m)?;
    for (member, w) in ens.members.iter().zip(&ens.weights) {
        println!("{}: accuracy {:.4}, weight {:.4}", member.model.atlas_id, member.accuracy, w);
    }
    println!("model: {}", path.display());
    Ok(())
}

pub fn evaluate(run: &Run) -> Result<(), Failure> {
    run.data_dir()?;
    run.out_dir()?;
    let p = &run.cfg.pipeline;
    let atl: Vec<&str> = p.atlases.iter().map(|a| a.as_str()).collect();
    if run.prepare(&[format!("{}-fold cross-validation over {}", p.folds, atl.join(", "))])? {
        return Ok(());
    }
    let start = Instant::now();
    let d = run.load()?;
    let report = cross_validate(&d, p)?;
    let out = run.begin_output()?;
    write_text(&out.join("metrics.json"), &report.metrics_json()?)?;
    write_text(&out.join("metrics.csv"), &report.metrics_csv())?;
    let m = RunManifest::for_cv(run.command, p, run.cfg.sha256()?, &report, start.elapsed().as_millis());
    write_json(&out.join("run_manifest.json"), &m)?;
    let f = |v: Option<f64>| v.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "n/a".into());
    println!(
        "accuracy {} sensitivity {} specificity {} ({} subjects, {} folds)",
        f(report.mean.accuracy),
        f(report.mean.sensitivity),
        f(report.mean.specificity),
        d.len(),
        report.folds.len()
    );
    Ok(())
}

pub fn ablation(run: &Run) -> Result<(), Failure> {
    run.data_dir()?;
    run.out_dir()?;
    let switches = standard_switches(&run.cfg.pipeline.atlases);
    let steps: Vec<String> = switches.iter().map(|s| format!("cross-validate `{}`", s.name)).collect();
    if run.prepare(&steps)? {
        return Ok(());
    }
    let d = run.load()?;
    let table = ablate(&d, &run.cfg.pipeline, &switches)?;
    let out = run.begin_output()?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    write_json(&out.join("ablation.json"), &table)?;
    write_json(&out.join("run_manifest.json"), &run.manifest(run.cfg.pipeline.seed)?)?;
    print!("{}", table.to_csv());
    Ok(())
}

pub fn subset(run: &Run) -> Result<(), Failure> {
    run.data_dir()?;
    run.out_dir()?;
    let s = &run.cfg.subset;
    if run.prepare(&[format!("train a {} selector on site {}", s.atlas, s.site), "keep correctly classified subjects".into()])? {
        return Ok(());
    }
    if !run.cfg.pipeline.atlases.contains(&s.atlas) {
        return Err(Failure::Validation(anyhow!("subset.atlas: {} is not among pipeline.atlases", s.atlas)));
    }
    let d = run.load()?;
    let selector = train_selector(&d, &s.site, s.atlas, &run.cfg.pipeline)?;
    let demographics = d.impute_cohort()?;
    let report = select_subset(&selector, &d, &demographics)?;
    let out = run.begin_output()?;
    write_json(&out.join("subset.json"), &report)?;

    let x = d.features_of(s.atlas)?;
    let pick = |ids: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..d.len()).filter(|&i| ids(i)).collect() };
    let retained: std::collections::BTreeSet<&String> = report.retained_ids.iter().collect();
    let kept = x.select(ndarray::Axis(0), &pick(&|i| retained.contains(&d.subject_ids[i])));
    let site = x.select(ndarray::Axis(0), &pick(&|i| d.sites[i].as_deref() == Some(s.site.as_str())));
    let mut variants = vec![("whole", x.view())];
    if kept.nrows() >= 2 {
        variants.push(("retained", kept.view()));
    }
    if site.nrows() >= 2 {
        variants.push((s.site.as_str(), site.view()));
    }
    let v = variance_report(&variants)?;
    write_text(&out.join("variance_summary.csv"), &v.summary_csv())?;
    write_text(&out.join("variance_per_feature.csv"), &v.per_feature_csv())?;
    write_json(&out.join("run_manifest.json"), &run.manifest(run.cfg.pipeline.seed)?)?;
    println!(
        "retained {} of {} evaluable subjects ({:.1}%); ASD {}/{}, TC {}/{}; {} unevaluable",
        report.retained_ids.len(),
        report.asd.total + report.tc.total,
        100.0 * report.retention_rate,
        report.asd.retained,
        report.asd.total,
        report.tc.retained,
        report.tc.total,
        report.unevaluable_ids.len()
    );
    Ok(())
}

pub fn roi_report(run: &Run, atlas: Option<AtlasId>, model: Option<&Path>) -> Result<(), Failure> {
    if model.is_none() {
        run.data_dir()?;
    }
    run.out_dir()?;
    let top = run.cfg.roi_report.top_n;
    if run.prepare(&[format!("rank the top {top} ROIs per atlas")])? {
        return Ok(());
    }
    let specs = run.cfg.atlas_specs().map_err(Failure::Validation)?;
    let mut masks: Vec<FeatureMask> = Vec::new();
    if let Some(path) = model {
        let m = MlpModel::load(path).with_context(|| format!("loading {}", path.display()))?;
        masks.push(m.mask);
    } else {
        let d = run.load()?;
        for &a in &run.cfg.pipeline.atlases {
            if atlas.is_some_and(|want| want != a) {
                continue;
            }
            let spec = d.atlas(a)?;
            let k = match run.cfg.pipeline.retain_percentage {
                Some(p) => connectome_ensemble::feature_selection::count_for_percentage(p, spec.n_features()).max(1),
                None => spec.retain_count,
            };
            let ranking = fscore(a, d.features_of(a)?.view(), &d.labels)?;
            masks.push(select_top(&ranking, k)?);
        }
    }
    if masks.is_empty() {
        return Err(Failure::Validation(anyhow!("atlas: nothing to report")));
    }
    let out = run.begin_output()?;
    for mask in masks {
        let spec = specs
            .iter()
            .find(|s| s.id == mask.atlas_id)
            .ok_or_else(|| Failure::Validation(anyhow!("data.atlas: no entry for {}", mask.atlas_id)))?;
        let ranking = roi_frequencies(&mask, spec, top)?;
        ranking.export(&out.join(format!("roi_{}.json", mask.atlas_id)), ReportFormat::Json)?;
        ranking.export(&out.join(format!("roi_{}.csv", mask.atlas_id)), ReportFormat::Csv)?;
        println!("{}: top {} ROIs from {} features", mask.atlas_id, ranking.entries.len(), ranking.features_considered);
    }
    write_json(&out.join("run_manifest.json"), &run.manifest(run.cfg.pipeline.seed)?)?;
    Ok(())
}

pub fn sweep(run: &Run) -> Result<(), Failure> {
    run.data_dir()?;
    run.out_dir()?;
    let pcts = run.cfg.sweep.percentages.clone();
    if run.prepare(&pcts.iter().map(|p| format!("cross-validate at {p}% retention")).collect::<Vec<_>>())? {
        return Ok(());
    }
    let d = run.load()?;
    let table = retention_sweep_cv(&d, &run.cfg.pipeline, &pcts)?;
    let out = run.begin_output()?;
    write_text(&out.join("sweep.csv"), &table.to_csv())?;
    write_json(&out.join("sweep.json"), &table)?;
    write_json(&out.join("run_manifest.json"), &run.manifest(run.cfg.pipeline.seed)?)?;
    if let Some(best) = table.best() {
        println!("best retention {}% with mean accuracy {:.4}", best.percentage, best.mean_accuracy);
    }
    Ok(())
}
