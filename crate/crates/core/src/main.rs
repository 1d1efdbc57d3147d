use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use priornet::fixture::{write_fixture, FixtureConfig};
use priornet::pipeline::{run_pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "priornet", version, about = "Differential gene-network inference with a pathway prior")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write the manifest.
    Run(ConfigArgs),
    /// Moderated t-test per gene -> diffexpr.tsv.
    Diffexpr(ConfigArgs),
    /// Random-forest importance of the differential genes -> importance.tsv.
    Forest(ConfigArgs),
    /// Importance filter and PPI expansion -> signature.tsv.
    Expand(ConfigArgs),
    /// Hypergeometric pathway enrichment -> enrichment.tsv.
    Enrich(ConfigArgs),
    /// Core pathways by Ward clustering of Jaccard distances -> clusters.tsv.
    Cluster(ConfigArgs),
    /// Joint two-condition graphical model -> network.tsv, solver.json.
    Infer(ConfigArgs),
    /// DOT rendering of the network -> network.dot.
    Export(ConfigArgs),
    /// Write the synthetic input set used by the tests.
    GenerateFixture {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Options shared by the pipeline subcommands. Command-line values
/// override the config file, which overrides the built-in defaults.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Expression TSV (genes x samples).
    #[arg(long, value_name = "PATH")]
    expression: Option<String>,
    /// Sample label TSV (sample, condition 1|2).
    #[arg(long, value_name = "PATH")]
    labels: Option<String>,
    /// PPI edge list (protein_a protein_b score).
    #[arg(long, value_name = "PATH")]
    ppi: Option<String>,
    /// Pathway GMT file.
    #[arg(long, value_name = "PATH")]
    gmt: Option<String>,
    /// Gene universe, one id per line.
    #[arg(long, value_name = "PATH")]
    universe: Option<String>,
    /// Artifact directory [default: priornet-out]
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Differential-expression p-value level [default: 0.001]
    #[arg(long)]
    alpha: Option<String>,
    /// Multiple-testing adjustment: none | bh [default: none]
    #[arg(long)]
    adjust: Option<String>,
    /// Number of trees [default: 500]
    #[arg(long)]
    n_trees: Option<String>,
    /// Genes tried per split, or auto for floor(sqrt(p)) [default: auto]
    #[arg(long)]
    mtry: Option<String>,
    /// Minimum samples per leaf [default: 1]
    #[arg(long)]
    min_leaf: Option<String>,
    /// Importance filter: positive | top_fraction:<f> [default: positive]
    #[arg(long)]
    filter: Option<String>,
    /// Minimum PPI score for expansion [default: 0.9]
    #[arg(long)]
    ppi_threshold: Option<String>,
    /// Qualifying links needed to add a gene [default: 1]
    #[arg(long)]
    min_links: Option<String>,
    /// Cap on PPI additions, or none [default: none]
    #[arg(long)]
    max_added: Option<String>,
    /// Pathway enrichment level [default: 0.05]
    #[arg(long)]
    enrich_level: Option<String>,
    /// Number of core pathways, or auto [default: auto]
    #[arg(long)]
    q: Option<String>,
    /// Penalty level, or a comma-separated grid chosen by BIC [default: 0.5,1,2,4,8]
    #[arg(long)]
    lambda: Option<String>,
    /// Within-cluster weight [default: 2]
    #[arg(long)]
    lambda_in: Option<String>,
    /// Between-cluster weight [default: 0.5]
    #[arg(long)]
    lambda_out: Option<String>,
    /// Scale genes to unit pooled SD before the network fit: true | false [default: false]
    #[arg(long)]
    scale: Option<String>,
    /// Solver iteration cap [default: 5000]
    #[arg(long)]
    max_iter: Option<String>,
    /// Solver KKT tolerance [default: 1e-6]
    #[arg(long)]
    kkt_tol: Option<String>,
    /// Random seed; falls back to PRIORNET_SEED [default: 0]
    #[arg(long)]
    seed: Option<String>,
    /// Label of condition 1 [default: condition1]
    #[arg(long)]
    condition1: Option<String>,
    /// Label of condition 2 [default: condition2]
    #[arg(long)]
    condition2: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let fields = [
            ("expression", &self.expression),
            ("labels", &self.labels),
            ("ppi", &self.ppi),
            ("gmt", &self.gmt),
            ("universe", &self.universe),
            ("out", &self.out),
            ("alpha", &self.alpha),
            ("adjust", &self.adjust),
            ("n_trees", &self.n_trees),
            ("mtry", &self.mtry),
            ("min_leaf", &self.min_leaf),
            ("filter", &self.filter),
            ("ppi_threshold", &self.ppi_threshold),
            ("min_links", &self.min_links),
            ("max_added", &self.max_added),
            ("enrich_level", &self.enrich_level),
            ("q", &self.q),
            ("lambda", &self.lambda),
            ("lambda_in", &self.lambda_in),
            ("lambda_out", &self.lambda_out),
            ("scale", &self.scale),
            ("max_iter", &self.max_iter),
            ("kkt_tol", &self.kkt_tol),
            ("seed", &self.seed),
            ("condition1", &self.condition1),
            ("condition2", &self.condition2),
        ];
        fields.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    fn resolve(&self) -> priornet::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        for (key, value) in self.overrides() {
            cfg.set(key, value, Path::new(""))?;
        }
        cfg.seed_from_env()?;
        Ok(cfg)
    }
}

fn execute(command: Command) -> priornet::Result<bool> {
    let (stage, args) = match command {
        Command::GenerateFixture { out, seed } => {
            write_fixture(&out, &FixtureConfig { seed, ..Default::default() })?;
            info!("wrote fixture to {}", out.display());
            return Ok(true);
        }
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let summary = run_pipeline(&cfg)?;
            for (stage, rows) in &summary.rows {
                info!("{}: {rows} rows", stage.name());
            }
            return Ok(summary.converged);
        }
        Command::Diffexpr(a) => (Stage::Diffexpr, a),
        Command::Forest(a) => (Stage::Forest, a),
        Command::Expand(a) => (Stage::Expand, a),
        Command::Enrich(a) => (Stage::Enrich, a),
        Command::Cluster(a) => (Stage::Cluster, a),
        Command::Infer(a) => (Stage::Infer, a),
        Command::Export(a) => (Stage::Export, a),
    };
    let cfg = args.resolve()?;
    Ok(stage.run(&cfg)?.converged.unwrap_or(true))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            warn!("solver did not reach the KKT tolerance; results were written anyway");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

