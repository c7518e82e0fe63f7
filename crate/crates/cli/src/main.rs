use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use typogen::dataset::{drop_degenerate_questions, LoadOptions, SurveyDataset};
use typogen::error::Error;
use typogen::fixture::{fixture_schema, survey_fixture_spec, synthesize_fixture, FixtureSpec};
use typogen::pipeline::{LoadedConfig, Pipeline, Stage, StageError, TreeConfig};

#[derive(Parser)]
#[command(name = "typogen", version, about = "Typologies of technology non/use from binary survey questions")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct TreeFlags {
    #[arg(long)]
    min_leaf_grow: Option<usize>,
    #[arg(long)]
    min_leaf_filter: Option<usize>,
    #[arg(long)]
    max_leaf_filter: Option<usize>,
    /// Drop trees splitting on this question (repeatable).
    #[arg(long = "exclude-question")]
    exclude_question: Vec<String>,
}

impl TreeFlags {
    fn apply(&self, t: &mut TreeConfig) {
        t.min_leaf_grow = self.min_leaf_grow.or(t.min_leaf_grow);
        t.min_leaf_filter = self.min_leaf_filter.or(t.min_leaf_filter);
        t.max_leaf_filter = self.max_leaf_filter.or(t.max_leaf_filter);
        for q in &self.exclude_question {
            if !t.exclude_questions.contains(q) {
                t.exclude_questions.push(q.clone());
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the config and dataset without writing anything.
    Validate,
    /// Enumerate response patterns and assign head classes.
    Patterns,
    /// Fit the rank-frequency curve over the head pool.
    Curvefit,
    /// Enumerate, filter and select taxonomic trees.
    Trees(TreeFlags),
    /// Factor-analyze the configured scales.
    Efa,
    /// Build the predictor table.
    Score,
    /// Fit full models for every typology.
    Fit,
    /// Fit full models and reduce them by AIC.
    Stepwise,
    /// Map classes to leaves and align odds ratios.
    Compare,
    /// Run every stage and write the manifest.
    Run(TreeFlags),
    /// Write a synthetic dataset reproducing reference aggregates.
    SynthFixture {
        /// Fixture spec (TOML); defaults to the config's `fixture`, else
        /// the bundled reconstruction.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output CSV.
        #[arg(long)]
        output: PathBuf,
        /// Also write the matching schema (TOML).
        #[arg(long)]
        schema: Option<PathBuf>,
    },
}

fn fail(err: &StageError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn config_error(e: Error) -> StageError {
    StageError { stage: Stage::Config, error: e }
}

fn load_config(cli: &Cli) -> Result<LoadedConfig, StageError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| config_error(Error::Config("--config is required for this command".into())))?;
    let mut cfg = LoadedConfig::load(path).map_err(config_error)?;
    if let Some(s) = cli.seed {
        cfg.config.seed = s;
    }
    Ok(cfg)
}

fn validate(cfg: &LoadedConfig) -> Result<serde_json::Value, StageError> {
    cfg.validate().map_err(config_error)?;
    let at = |error| StageError { stage: Stage::Dataset, error };
    let schema = cfg.schema().map_err(config_error)?;
    let d = &cfg.config.dataset;
    let opts = LoadOptions {
        delimiter: d.delimiter as u8,
        id_column: d.id_column.clone(),
    };
    let ds = SurveyDataset::load(cfg.resolve(&d.path), &schema, &opts).map_err(at)?;
    let retained = drop_degenerate_questions(&ds, d.min_minority_share).map_err(at)?;
    Ok(serde_json::json!({
        "valid": true,
        "n": ds.n(),
        "typology_questions": ds.typology_questions(),
        "retained": retained,
    }))
}

fn synth(cli: &Cli, spec_path: Option<&Path>, output: &Path, schema: Option<&Path>) -> Result<serde_json::Value, StageError> {
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let spec_file = spec_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().and_then(|c| c.config.fixture.as_ref().map(|f| c.resolve(f))));
    let mut spec: FixtureSpec = match spec_file {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| config_error(Error::io(&p, e)))?;
            toml::from_str(&text).map_err(|e| config_error(Error::Config(format!("{}: {e}", p.display()))))?
        }
        None => survey_fixture_spec(),
    };
    if let Some(s) = cli.seed.or(cfg.as_ref().map(|c| c.config.seed)) {
        spec.seed = s;
    }
    let at = |error| StageError { stage: Stage::Dataset, error };
    let ds = synthesize_fixture(&spec).map_err(at)?;
    ds.save(output, &LoadOptions::default()).map_err(at)?;
    if let Some(path) = schema {
        #[derive(serde::Serialize)]
        struct SchemaFile {
            questions: Vec<typogen::QuestionDef>,
        }
        let text = toml::to_string(&SchemaFile {
            questions: fixture_schema(&spec),
        })
        .map_err(|e| at(Error::Serialization(e.to_string())))?;
        std::fs::write(path, text).map_err(|e| at(Error::io(path, e)))?;
    }
    Ok(serde_json::json!({"rows": ds.n(), "seed": spec.seed, "output": output}))
}

fn run_stages(cli: &Cli) -> Result<serde_json::Value, StageError> {
    let mut cfg = load_config(cli)?;
    let flags = match &cli.command {
        Command::Trees(f) | Command::Run(f) => Some(f),
        _ => None,
    };
    if let Some(f) = flags {
        f.apply(&mut cfg.config.trees);
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| cfg.output_dir());
    let result = (|| {
        let mut p = Pipeline::new(cfg, Some(out_dir.clone()))?;
        match &cli.command {
            Command::Patterns => p.patterns()?,
            Command::Curvefit => p.curve()?,
            Command::Trees(_) => p.trees(None)?,
            Command::Efa | Command::Score => p.predictors()?,
            Command::Fit => p.models(false)?,
            Command::Stepwise => p.models(true)?,
            Command::Compare => p.compare()?,
            Command::Run(_) => {
                p.curve()?;
                p.compare()?;
            }
            Command::Validate | Command::SynthFixture { .. } => unreachable!(),
        }
        p.finish()
    })();
    result
        .map(|m| m["stage_counts"].clone())
        .inspect_err(|e| Pipeline::write_error(&out_dir, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Validate => load_config(&cli).and_then(|c| validate(&c)),
        Command::SynthFixture { spec, output, schema } => synth(&cli, spec.as_deref(), output, schema.as_deref()),
        _ => run_stages(&cli),
    };
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        // stage runs already wrote error.json
        Err(e) => fail(&e),
    }
}
