mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use connectome_ensemble::data::AtlasId;

use crate::commands::Run;
use crate::config::{Preset, RunConfig};

/// Multi-atlas connectome ensemble for ASD/TC classification.
#[derive(Debug, Parser)]
#[command(name = "connectome", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration (layered over its `preset`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Use a built-in preset instead of a config file.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Dataset directory (phenotype.csv plus one folder per atlas).
    #[arg(long, global = true, env = "CONNECTOME_DATA")]
    data: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "CONNECTOME_OUT")]
    out: Option<PathBuf>,

    /// Master seed (the generator seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for fold-level parallelism (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    folds: Option<usize>,

    /// Comma-separated atlases to enable, e.g. `CC,AAL`.
    #[arg(long, global = true, value_delimiter = ',')]
    atlases: Option<Vec<AtlasId>>,

    /// Validate and print the resolved plan without computing anything.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Log progress; `-v` adds per-epoch losses.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        /// Class separation in [0, 1].
        #[arg(long)]
        effect: Option<f64>,
    },
    /// Write per-atlas connectivity feature matrices.
    Features,
    /// Fit the ensemble on all subjects and save it.
    Train,
    /// Cross-validate the pipeline and write metrics.
    Evaluate,
    /// Cross-validate each ablation configuration.
    Ablate,
    /// Keep subjects a single-site selector classifies correctly.
    SelectSubset {
        #[arg(long)]
        site: Option<String>,
    },
    /// Rank ROIs by how often they appear in the selected features.
    RoiReport {
        #[arg(long)]
        atlas: Option<AtlasId>,
        /// Use this saved classifier's mask instead of refitting.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        top: Option<usize>,
    },
    /// Cross-validate at several feature-retention percentages.
    Sweep {
        /// Comma-separated percentages.
        #[arg(long, value_delimiter = ',')]
        percentages: Option<Vec<f64>>,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Features => "features",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::SelectSubset { .. } => "select-subset",
            Command::RoiReport { .. } => "roi-report",
            Command::Sweep { .. } => "sweep",
            Command::Config => "config",
        }
    }

    fn needs_config(&self) -> bool {
        !matches!(self, Command::Synth { .. } | Command::Features | Command::Config)
    }
}

pub enum Failure {
    /// Bad arguments or configuration: exit code 1.
    Validation(anyhow::Error),
    /// Anything that went wrong while computing: exit code 2.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn into_inner(self) -> anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<connectome_ensemble::Error> for Failure {
    fn from(e: connectome_ensemble::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => RunConfig::load(path).map_err(Failure::Validation)?,
        (None, Some(p)) => RunConfig::preset(p),
        (None, None) => RunConfig::preset(Preset::Paper),
    };
    if let Some(p) = cli.preset {
        if cli.config.is_some() && p != cfg.preset {
            return Err(Failure::Validation(anyhow::anyhow!("preset: --preset conflicts with the config file's preset")));
        }
    }
    let p = &mut cfg.pipeline;
    if let Some(s) = cli.seed {
        p.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(j) = cli.jobs {
        p.jobs = j;
    }
    if let Some(k) = cli.folds {
        p.folds = k;
    }
    if let Some(a) = &cli.atlases {
        p.atlases = a.clone();
    }
    match &cli.command {
        Command::Synth { subjects, effect } => {
            if let Some(n) = subjects {
                cfg.synth.subjects = *n;
            }
            if let Some(e) = effect {
                cfg.synth.effect = *e;
            }
        }
        Command::SelectSubset { site: Some(s) } => cfg.subset.site = s.clone(),
        Command::RoiReport { top: Some(t), .. } => cfg.roi_report.top_n = *t,
        Command::Sweep { percentages: Some(p) } => cfg.sweep.percentages = p.clone(),
        _ => {}
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(d) = &cli.data {
        cfg.data.dir = Some(d.clone());
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if cli.command.needs_config() && cli.config.is_none() && cli.preset.is_none() {
        let mut cmd = Cli::command();
        cmd.build();
        let usage = cmd.find_subcommand_mut(cli.command.name()).map(|c| c.render_usage().to_string()).unwrap_or_default();
        return Err(Failure::Validation(anyhow::anyhow!(
            "config: `{}` needs --config <FILE> or --preset <paper|desk>\n\n{usage}",
            cli.command.name()
        )));
    }
    let mut cfg = resolve(&cli)?;
    if let Command::Config = cli.command {
        cfg.validate().map_err(Failure::Validation)?;
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    // The output location is kept out of the recorded config so the same
    // run written to two places hashes identically.
    let out = cfg.out.take();
    let run = Run { data: cfg.data.dir.clone(), out, cfg, command: cli.command.name(), dry_run: cli.dry_run };
    match &cli.command {
        Command::Synth { .. } => commands::synth(&run),
        Command::Features => commands::features(&run),
        Command::Train => commands::train(&run),
        Command::Evaluate => commands::evaluate(&run),
        Command::Ablate => commands::ablation(&run),
        Command::SelectSubset { .. } => commands::subset(&run),
        Command::RoiReport { atlas, model, .. } => commands::roi_report(&run, *atlas, model.as_deref()),
        Command::Sweep { .. } => commands::sweep(&run),
        Command::Config => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "trace",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
