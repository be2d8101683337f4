use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use persona_games::counterfactual::FactorialPlan;
use persona_games::model::{Game, Method};
use persona_games::pipeline::{load_config, Manifest, Pipeline, PipelineConfig, REPORT_FILE};
use tracing_subscriber::EnvFilter;

/// Partisan-bias experiments with bound language-model personas.
#[derive(Debug, Parser)]
#[command(name = "persona-games", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Debug, Args)]
struct Common {
    /// Study config (TOML).
    #[arg(short, long, global = true, default_value = "study.toml")]
    config: PathBuf,
    /// Root seed for every random substream.
    #[arg(long, global = true, allow_hyphen_values = true)]
    seed: Option<i64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of personas to generate.
    #[arg(long, global = true)]
    personas: Option<usize>,
    /// Conditioning method: deepbind, qa, bio or portray.
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Omit the temporal grounding pair.
    #[arg(long, global = true)]
    no_grounding: bool,
    /// Skip consistency filtering.
    #[arg(long, global = true)]
    no_filtering: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Persona generation and trait surveys.
    #[command(subcommand)]
    Personas(PersonasCommand),
    /// Match roster humans to personas.
    Match,
    /// Play the study games for every matched participant.
    Run,
    /// Run the pool × framing × year design.
    Counterfactual {
        /// Game to vary; replaces the config's study game.
        #[arg(long)]
        game: Option<Game>,
        /// Factorial plan (TOML) overriding pools, framings and years.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Recompute tables and regressions from stored trials.
    Analyze,
    /// Print the markdown report, regenerating it first.
    Report,
    /// Every stage end to end.
    Pipeline,
}

#[derive(Debug, Subcommand)]
enum PersonasCommand {
    /// Interview-generated backstories.
    Generate,
    /// Extract trait profiles from the backstories.
    Survey,
}

fn configure(common: &Common, command: &Command) -> Result<PipelineConfig> {
    let mut config = load_config(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.study.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    if let Some(n) = common.personas {
        config.study.personas = n;
    }
    if let Some(m) = common.method {
        config.study.method = m;
    }
    if common.no_grounding {
        config.study.grounding = false;
    }
    if common.no_filtering {
        config.study.filtering = false;
    }
    if let Command::Counterfactual { game, plan } = command {
        config.factors.counterfactual = true;
        if let Some(g) = game {
            if *g != config.study.game {
                config.study.game = *g;
                config.factors.pools = None;
                config.factors.framings = None;
                config.factors.years = None;
            }
        }
        if let Some(path) = plan {
            let plan = FactorialPlan::load(path).with_context(|| format!("loading plan {}", path.display()))?;
            config.study.game = plan.game;
            config.factors.pools = Some(plan.pools);
            config.factors.framings = Some(plan.framings);
            config.factors.years = Some(plan.years);
        }
    }
    config.validate().context("invalid configuration after overrides")?;
    Ok(config)
}

fn summarize(manifest: &Manifest) {
    for stage in &manifest.stages {
        for file in &stage.files {
            println!("{:<14} {:<32} {} {:>9}", stage.name, file.path, &file.sha256[..16], file.bytes);
        }
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let config = configure(&cli.common, &cli.command)?;
    let out = config.output.dir.clone();
    let mut pipeline = Pipeline::new(config)?;

    match cli.command {
        Command::Personas(PersonasCommand::Generate) => {
            let n = pipeline.personas()?.len();
            println!("{n} personas");
        }
        Command::Personas(PersonasCommand::Survey) => {
            let n = pipeline.profiles()?.len();
            println!("{n} trait profiles");
        }
        Command::Match => {
            let rows = pipeline.assignments()?;
            let zero = rows.iter().filter(|r| r.weight == 0.0).count();
            println!("{} matches, {zero} with zero weight", rows.len());
        }
        Command::Run => {
            let n = pipeline.trials()?.len();
            println!("{n} trials");
        }
        Command::Counterfactual { .. } => {
            let n = pipeline.counterfactual()?.len();
            pipeline.reports()?;
            println!("{n} counterfactual trials");
        }
        Command::Analyze => {
            pipeline.reports()?;
            summarize(pipeline.manifest());
        }
        Command::Report => {
            pipeline.reports()?;
            let path = out.join(REPORT_FILE);
            print!("{}", std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?);
        }
        Command::Pipeline => {
            let manifest = pipeline.run_all()?;
            summarize(&manifest);
        }
    }
    Ok(())
}
