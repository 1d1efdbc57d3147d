//! End-to-end pipeline: configuration, the seven stages and their artifacts.
//!
//! Every stage reads its predecessors' files from the output directory and
//! writes its own artifact there, so running the stages one by one gives
//! the same bytes as [`run_pipeline`].

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::datamodel::{load_expression, scale_by_condition, Condition, CovariancePair, ExpressionMatrix, Provenance, Signature};
use crate::diffexpr::{moderated_t, results_from_tsv, results_to_tsv, select_signature, Adjustment};
use crate::enrich::{
    cut_core_pathways, enrich_all, enrichment_from_tsv, enrichment_to_tsv, membership_matrix, significant_pathways,
    ward_cluster, ClusterAssignment, Dendrogram, PathwayCatalog,
};
use crate::error::{Error, Result};
use crate::forest::{filter_by_importance, grow_forest, importance, importance_from_tsv, importance_to_tsv, FilterRule, ForestConfig};
use crate::ggm::{extract_network, penalty_weights, select_lambda, solve_multitask, InferredNetwork, LambdaScore, SolverConfig};
use crate::ppi::{expand_signature, load_ppi, ExpansionConfig};
use crate::tsv;

pub const DIFFEXPR: &str = "diffexpr.tsv";
pub const IMPORTANCE: &str = "importance.tsv";
pub const SIGNATURE: &str = "signature.tsv";
pub const ENRICHMENT: &str = "enrichment.tsv";
pub const CLUSTERS: &str = "clusters.tsv";
pub const NETWORK: &str = "network.tsv";
pub const DOT: &str = "network.dot";
pub const SOLVER: &str = "solver.json";
pub const MANIFEST: &str = "manifest.json";

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "PRIORNET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QChoice {
    /// Cut at the largest relative gap between merge heights.
    Auto,
    Fixed(usize),
}

impl fmt::Display for QChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QChoice::Auto => f.write_str("auto"),
            QChoice::Fixed(q) => write!(f, "{q}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Pick by BIC.
    Grid(Vec<f64>),
}

impl fmt::Display for LambdaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaChoice::Fixed(l) => write!(f, "{l}"),
            LambdaChoice::Grid(g) => {
                let parts: Vec<String> = g.iter().map(|l| l.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub expression: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub ppi: Option<PathBuf>,
    pub gmt: Option<PathBuf>,
    pub universe: Option<PathBuf>,
    pub out: PathBuf,
    pub alpha: f64,
    pub adjust: Adjustment,
    pub n_trees: usize,
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub filter: FilterRule,
    pub ppi_threshold: f64,
    pub min_links: usize,
    pub max_added: Option<usize>,
    pub enrich_level: f64,
    pub q: QChoice,
    pub lambda: LambdaChoice,
    pub lambda_in: f64,
    pub lambda_out: f64,
    /// Divide each gene by its pooled within-condition SD before the GGM fit.
    pub scale: bool,
    pub max_iter: usize,
    pub kkt_tol: f64,
    pub seed: Option<u64>,
    pub condition_names: [String; 2],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        Self {
            expression: None,
            labels: None,
            ppi: None,
            gmt: None,
            universe: None,
            out: PathBuf::from("priornet-out"),
            alpha: 1e-3,
            adjust: Adjustment::None,
            n_trees: 500,
            mtry: None,
            min_leaf: 1,
            filter: FilterRule::Positive,
            ppi_threshold: 0.9,
            min_links: 1,
            max_added: None,
            enrich_level: 0.05,
            q: QChoice::Auto,
            lambda: LambdaChoice::Grid(vec![0.5, 1.0, 2.0, 4.0, 8.0]),
            lambda_in: 2.0,
            lambda_out: 0.5,
            scale: false,
            max_iter: solver.max_iter,
            kkt_tol: solver.kkt_tol,
            seed: None,
            condition_names: ["condition1".into(), "condition2".into()],
        }
    }
}

/// Input files a stage may need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Input {
    Expression,
    Labels,
    Ppi,
    Gmt,
    Universe,
}

impl Input {
    pub const ALL: [Input; 5] = [Input::Expression, Input::Labels, Input::Ppi, Input::Gmt, Input::Universe];

    pub fn key(self) -> &'static str {
        match self {
            Input::Expression => "expression",
            Input::Labels => "labels",
            Input::Ppi => "ppi",
            Input::Gmt => "gmt",
            Input::Universe => "universe",
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (true | false)"))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" || value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn render_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl PipelineConfig {
    /// Reads a `key = value` file; relative paths are taken from the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file `{}`: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::default();
        cfg.apply_text(&text, base)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(key.trim(), value.trim(), base)?;
        }
        Ok(())
    }

    /// Sets one option by name; relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || (value != "none").then(|| base.join(value));
        match key.replace('-', "_").as_str() {
            "expression" => self.expression = path(),
            "labels" => self.labels = path(),
            "ppi" => self.ppi = path(),
            "gmt" => self.gmt = path(),
            "universe" => self.universe = path(),
            "out" => self.out = base.join(value),
            "alpha" => self.alpha = parse_value(key, value)?,
            "adjust" => {
                self.adjust = match value {
                    "none" => Adjustment::None,
                    "bh" | "fdr" => Adjustment::BenjaminiHochberg,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for `adjust` (none | bh)"))),
                }
            }
            "n_trees" => self.n_trees = parse_value(key, value)?,
            "mtry" => self.mtry = parse_optional(key, value)?,
            "min_leaf" => self.min_leaf = parse_value(key, value)?,
            "filter" => self.filter = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "ppi_threshold" => self.ppi_threshold = parse_value(key, value)?,
            "min_links" => self.min_links = parse_value(key, value)?,
            "max_added" => self.max_added = parse_optional(key, value)?,
            "enrich_level" => self.enrich_level = parse_value(key, value)?,
            "q" => {
                self.q = match parse_optional::<usize>(key, value)? {
                    None => QChoice::Auto,
                    Some(q) => QChoice::Fixed(q),
                }
            }
            "lambda" => {
                let grid = value
                    .split(',')
                    .map(|v| parse_value::<f64>(key, v.trim()))
                    .collect::<Result<Vec<_>>>()?;
                self.lambda = if grid.len() == 1 {
                    LambdaChoice::Fixed(grid[0])
                } else {
                    LambdaChoice::Grid(grid)
                };
            }
            "lambda_in" => self.lambda_in = parse_value(key, value)?,
            "lambda_out" => self.lambda_out = parse_value(key, value)?,
            "scale" => self.scale = parse_bool(key, value)?,
            "max_iter" => self.max_iter = parse_value(key, value)?,
            "kkt_tol" => self.kkt_tol = parse_value(key, value)?,
            "seed" => self.seed = Some(parse_value(key, value)?),
            "condition1" => self.condition_names[0] = value.to_string(),
            "condition2" => self.condition_names[1] = value.to_string(),
            _ => return Err(Error::Config(format!("unknown option `{key}`"))),
        }
        Ok(())
    }

    /// Falls back to `PRIORNET_SEED` when no seed was configured.
    pub fn seed_from_env(&mut self) -> Result<()> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                self.seed = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
                );
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Canonical `key = value` rendering of every option except `out`.
    pub fn render(&self) -> String {
        let opt = |o: Option<usize>| o.map_or_else(|| "none".to_string(), |v| v.to_string());
        let adjust = match self.adjust {
            Adjustment::None => "none",
            Adjustment::BenjaminiHochberg => "bh",
        };
        let lines = [
            ("expression", render_path(&self.expression)),
            ("labels", render_path(&self.labels)),
            ("ppi", render_path(&self.ppi)),
            ("gmt", render_path(&self.gmt)),
            ("universe", render_path(&self.universe)),
            ("alpha", self.alpha.to_string()),
            ("adjust", adjust.to_string()),
            ("n_trees", self.n_trees.to_string()),
            ("mtry", opt(self.mtry)),
            ("min_leaf", self.min_leaf.to_string()),
            ("filter", self.filter.to_string()),
            ("ppi_threshold", self.ppi_threshold.to_string()),
            ("min_links", self.min_links.to_string()),
            ("max_added", opt(self.max_added)),
            ("enrich_level", self.enrich_level.to_string()),
            ("q", self.q.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lambda_in", self.lambda_in.to_string()),
            ("lambda_out", self.lambda_out.to_string()),
            ("scale", self.scale.to_string()),
            ("max_iter", self.max_iter.to_string()),
            ("kkt_tol", self.kkt_tol.to_string()),
            ("seed", self.seed().to_string()),
            ("condition1", self.condition_names[0].clone()),
            ("condition2", self.condition_names[1].clone()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))
    }

    pub fn input(&self, which: Input) -> Option<&Path> {
        match which {
            Input::Expression => self.expression.as_deref(),
            Input::Labels => self.labels.as_deref(),
            Input::Ppi => self.ppi.as_deref(),
            Input::Gmt => self.gmt.as_deref(),
            Input::Universe => self.universe.as_deref(),
        }
    }

    fn require(&self, which: Input) -> Result<&Path> {
        self.input(which)
            .ok_or_else(|| Error::Config(format!("no `{}` file configured", which.key())))
    }

    /// Checks that `inputs` are configured and exist, and that numeric
    /// options are in range. Runs before any computation.
    pub fn validate(&self, inputs: &[Input]) -> Result<()> {
        for &which in inputs {
            let path = self.require(which)?;
            if !path.is_file() {
                return Err(Error::Config(format!("{} file `{}` does not exist", which.key(), path.display())));
            }
        }
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::Config(what.to_string())) };
        check(self.alpha > 0.0 && self.alpha <= 1.0, "alpha must be in (0, 1]")?;
        check(self.enrich_level > 0.0 && self.enrich_level < 1.0, "enrich_level must be in (0, 1)")?;
        check(self.ppi_threshold > 0.0 && self.ppi_threshold <= 1.0, "ppi_threshold must be in (0, 1]")?;
        check(self.min_links >= 1, "min_links must be at least 1")?;
        check(self.n_trees >= 1, "n_trees must be at least 1")?;
        check(self.min_leaf >= 1, "min_leaf must be at least 1")?;
        check(self.mtry != Some(0), "mtry must be at least 1")?;
        if let FilterRule::TopFraction(f) = self.filter {
            check(f > 0.0 && f <= 1.0, "top_fraction must be in (0, 1]")?;
        }
        check(self.q != QChoice::Fixed(0), "q must be at least 1 or `auto`")?;
        let lambdas = match &self.lambda {
            LambdaChoice::Fixed(l) => vec![*l],
            LambdaChoice::Grid(g) => g.clone(),
        };
        check(lambdas.iter().all(|l| l.is_finite() && *l >= 0.0), "lambda values must be non-negative")?;
        check(
            self.lambda_in > 0.0 && self.lambda_out > 0.0 && self.lambda_in.is_finite() && self.lambda_out.is_finite(),
            "lambda_in and lambda_out must be positive",
        )?;
        check(self.max_iter >= 1, "max_iter must be at least 1")?;
        check(self.kkt_tol > 0.0, "kkt_tol must be positive")?;
        check(self.condition_names[0] != self.condition_names[1], "condition names must differ")?;
        Ok(())
    }

    fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            mtry: self.mtry,
            min_leaf: self.min_leaf,
            seed: self.seed(),
        }
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iter: self.max_iter,
            kkt_tol: self.kkt_tol,
            ..SolverConfig::default()
        }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Diffexpr,
    Forest,
    Expand,
    Enrich,
    Cluster,
    Infer,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Diffexpr,
        Stage::Forest,
        Stage::Expand,
        Stage::Enrich,
        Stage::Cluster,
        Stage::Infer,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Diffexpr => "diffexpr",
            Stage::Forest => "forest",
            Stage::Expand => "expand",
            Stage::Enrich => "enrich",
            Stage::Cluster => "cluster",
            Stage::Infer => "infer",
            Stage::Export => "export",
        }
    }

    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Diffexpr => DIFFEXPR,
            Stage::Forest => IMPORTANCE,
            Stage::Expand => SIGNATURE,
            Stage::Enrich => ENRICHMENT,
            Stage::Cluster => CLUSTERS,
            Stage::Infer => NETWORK,
            Stage::Export => DOT,
        }
    }

    /// Input files read by the stage.
    pub fn inputs(self) -> &'static [Input] {
        match self {
            Stage::Diffexpr | Stage::Forest | Stage::Infer => &[Input::Expression, Input::Labels],
            Stage::Expand => &[Input::Expression, Input::Labels, Input::Ppi],
            Stage::Enrich | Stage::Cluster => &[Input::Gmt, Input::Universe],
            Stage::Export => &[],
        }
    }

    /// Validates the configuration, then runs the stage.
    pub fn run(self, cfg: &PipelineConfig) -> Result<StageOutcome> {
        cfg.validate(self.inputs())?;
        fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
        self.execute(cfg).map_err(|e| Error::Stage {
            stage: self.name(),
            source: Box::new(e),
        })
    }

    fn execute(self, cfg: &PipelineConfig) -> Result<StageOutcome> {
        let rows = match self {
            Stage::Diffexpr => stage_diffexpr(cfg)?,
            Stage::Forest => stage_forest(cfg)?,
            Stage::Expand => stage_expand(cfg)?,
            Stage::Enrich => stage_enrich(cfg)?,
            Stage::Cluster => stage_cluster(cfg)?,
            Stage::Infer => return stage_infer(cfg),
            Stage::Export => stage_export(cfg)?,
        };
        info!("{}: wrote {} ({rows} rows)", self.name(), self.artifact());
        Ok(StageOutcome { rows, converged: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOutcome {
    /// Data rows of the stage's artifact.
    pub rows: usize,
    /// Solver convergence, for the inference stage.
    pub converged: Option<bool>,
}

fn load_data(cfg: &PipelineConfig) -> Result<ExpressionMatrix> {
    load_expression(cfg.require(Input::Expression)?, cfg.require(Input::Labels)?)
}

fn read_artifact(cfg: &PipelineConfig, name: &str) -> Result<String> {
    tsv::read_to_string(&cfg.artifact(name))
}

fn write_artifact(cfg: &PipelineConfig, name: &str, contents: &str) -> Result<()> {
    tsv::write_string(&cfg.artifact(name), contents)
}

fn read_signature(cfg: &PipelineConfig) -> Result<Signature> {
    Signature::from_tsv(&read_artifact(cfg, SIGNATURE)?)
}

fn load_catalog(cfg: &PipelineConfig) -> Result<PathwayCatalog> {
    PathwayCatalog::load(cfg.require(Input::Gmt)?, cfg.require(Input::Universe)?)
}

fn stage_diffexpr(cfg: &PipelineConfig) -> Result<usize> {
    let x = load_data(cfg)?;
    let results = moderated_t(&x)?;
    write_artifact(cfg, DIFFEXPR, &results_to_tsv(&results))?;
    Ok(results.len())
}

fn stage_forest(cfg: &PipelineConfig) -> Result<usize> {
    let x = load_data(cfg)?;
    let results = results_from_tsv(&read_artifact(cfg, DIFFEXPR)?)?;
    let sig = select_signature(&results, cfg.alpha, cfg.adjust)?;
    if sig.is_empty() {
        return Err(Error::InvalidArgument(format!("no gene is differential at alpha = {}", cfg.alpha)));
    }
    let xs = x.restrict(&sig.ids())?;
    let forest = grow_forest(&xs, &cfg.forest_config())?;
    let report = importance(&forest, &xs)?;
    info!("forest OOB error {:.4}", report.oob_error);
    write_artifact(cfg, IMPORTANCE, &importance_to_tsv(&report.genes))?;
    Ok(report.genes.len())
}

fn stage_expand(cfg: &PipelineConfig) -> Result<usize> {
    let x = load_data(cfg)?;
    let scores = importance_from_tsv(&read_artifact(cfg, IMPORTANCE)?)?;
    let differential = Signature::from_genes(scores.iter().map(|s| s.gene.clone()), Provenance::Differential);
    let filtered = filter_by_importance(&scores, &differential, cfg.filter)?;
    if filtered.empty_after_filter {
        return Err(Error::EmptyAfterFilter);
    }
    let genes: BTreeSet<String> = x.gene_ids().iter().cloned().collect();
    let ppi = load_ppi(cfg.require(Input::Ppi)?)?.restrict_to(&genes);
    let expansion = ExpansionConfig {
        threshold: cfg.ppi_threshold,
        min_links: cfg.min_links,
        max_added: cfg.max_added,
    };
    let sig = expand_signature(&filtered.signature, &ppi, &expansion)?;
    write_artifact(cfg, SIGNATURE, &sig.to_tsv())?;
    Ok(sig.len())
}

fn stage_enrich(cfg: &PipelineConfig) -> Result<usize> {
    let sig = read_signature(cfg)?;
    let catalog = load_catalog(cfg)?;
    let results = enrich_all(&sig, &catalog)?;
    write_artifact(cfg, ENRICHMENT, &enrichment_to_tsv(&results))?;
    Ok(results.len())
}

fn stage_cluster(cfg: &PipelineConfig) -> Result<usize> {
    let sig = read_signature(cfg)?;
    let catalog = load_catalog(cfg)?;
    let results = enrichment_from_tsv(&read_artifact(cfg, ENRICHMENT)?)?;
    let significant = significant_pathways(&results, cfg.enrich_level)?;
    let pathways = significant
        .iter()
        .map(|r| {
            catalog
                .get(&r.pathway)
                .ok_or_else(|| Error::InvalidArgument(format!("pathway `{}` is not in the catalog", r.pathway)))
        })
        .collect::<Result<Vec<_>>>()?;
    let assignment = match pathways.len() {
        0 => {
            warn!("no significant pathway; every gene gets the default penalty");
            ClusterAssignment::empty(sig.ids())
        }
        1 => {
            let single = Dendrogram {
                n_leaves: 1,
                merges: Vec::new(),
            };
            cut_core_pathways(&single, 1, &pathways, &sig)?
        }
        n => {
            let dendrogram = ward_cluster(&membership_matrix(&pathways)?.jaccard_distances()?)?;
            let q = match cfg.q {
                QChoice::Auto => dendrogram.suggest_q(),
                QChoice::Fixed(q) if q > n => {
                    warn!("q = {q} exceeds the {n} significant pathways; using {n}");
                    n
                }
                QChoice::Fixed(q) => q,
            };
            cut_core_pathways(&dendrogram, q, &pathways, &sig)?
        }
    };
    write_artifact(cfg, CLUSTERS, &assignment.to_tsv())?;
    Ok(assignment.q())
}

/// Content of `solver.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceReport {
    pub lambda: f64,
    pub iterations: usize,
    pub final_objective: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    /// BIC table when `λ` came from a grid.
    pub lambda_scores: Vec<LambdaScoreRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaScoreRow {
    pub lambda: f64,
    pub log_likelihood: f64,
    pub nonzeros: usize,
    pub bic: f64,
    pub converged: bool,
}

impl From<&LambdaScore> for LambdaScoreRow {
    fn from(s: &LambdaScore) -> Self {
        Self {
            lambda: s.lambda,
            log_likelihood: s.log_likelihood,
            nonzeros: s.nonzeros,
            bic: s.bic,
            converged: s.converged,
        }
    }
}

fn stage_infer(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let sig = read_signature(cfg)?;
    let clusters = ClusterAssignment::from_tsv(&read_artifact(cfg, CLUSTERS)?, &sig)?;
    let genes = sig.ids();
    let mut x = load_data(cfg)?.restrict(&genes)?;
    if cfg.scale {
        x = scale_by_condition(&x);
    }
    let s = CovariancePair::from_expression(&x)?;
    for c in Condition::BOTH {
        if let Some(i) = (0..genes.len()).find(|&i| !(s.s[c.index()][(i, i)] > 0.0)) {
            return Err(Error::ZeroVariance(genes[i].clone()));
        }
    }
    let weights = penalty_weights(&clusters, cfg.lambda_in, cfg.lambda_out, genes.len())?;
    let solver = cfg.solver_config();
    let (lambda, fit, scores) = match &cfg.lambda {
        LambdaChoice::Fixed(l) => (*l, solve_multitask(&s, &weights.with_lambda(*l), &solver)?, Vec::new()),
        LambdaChoice::Grid(grid) => {
            let sel = select_lambda(&s, &weights, grid, &solver)?;
            info!("selected lambda = {} by BIC", sel.lambda);
            (sel.lambda, sel.fit, sel.scores.iter().map(LambdaScoreRow::from).collect())
        }
    };
    let network = extract_network(&fit.k, &genes, 0.0)?;
    let report = InferenceReport {
        lambda,
        iterations: fit.iterations,
        final_objective: fit.objective(),
        kkt_residual: fit.kkt_residual,
        converged: fit.converged,
        lambda_scores: scores,
    };
    write_artifact(cfg, NETWORK, &network.to_tsv())?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_artifact(cfg, SOLVER, &json)?;
    info!("infer: wrote {NETWORK} ({} edges) and {SOLVER}", network.edges.len());
    Ok(StageOutcome {
        rows: network.edges.len(),
        converged: Some(fit.converged),
    })
}

fn stage_export(cfg: &PipelineConfig) -> Result<usize> {
    let sig = read_signature(cfg)?;
    let network = InferredNetwork::from_tsv(&read_artifact(cfg, NETWORK)?, &sig.ids())?;
    let names = [cfg.condition_names[0].as_str(), cfg.condition_names[1].as_str()];
    write_artifact(cfg, DOT, &export_dot(&network, names))?;
    Ok(network.edges.len())
}

fn quote(id: &str) -> String {
    format!("\"{}\"", id.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Undirected DOT graph of the differential network.
///
/// Edges present in both conditions are black and dashed, condition-1-only
/// edges green, condition-2-only edges red. Nodes and edges are sorted
/// lexicographically by gene id.
pub fn export_dot(net: &InferredNetwork, condition_names: [&str; 2]) -> String {
    let mut out = String::from("graph differential_network {\n");
    out.push_str(&format!(
        "  // green: {} only; red: {} only; black dashed: both\n",
        condition_names[0], condition_names[1]
    ));
    let mut nodes: Vec<&str> = net.genes.iter().map(String::as_str).collect();
    nodes.sort_unstable();
    for n in nodes {
        out.push_str(&format!("  {};\n", quote(n)));
    }
    let mut edges: Vec<(&str, &str, &str)> = net
        .edges
        .iter()
        .map(|e| {
            let (a, b) = (net.genes[e.i].as_str(), net.genes[e.j].as_str());
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let style = match e.present {
                [true, true] => "style=dashed, color=black",
                [true, false] => "color=green",
                _ => "color=red",
            };
            (a, b, style)
        })
        .collect();
    edges.sort_unstable();
    for (a, b, style) in edges {
        out.push_str(&format!("  {} -- {} [{style}];\n", quote(a), quote(b)));
    }
    out.push_str("}\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ManifestInput {
    role: &'static str,
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ManifestArtifact {
    stage: &'static str,
    file: &'static str,
    rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    inputs: Vec<ManifestInput>,
    artifacts: Vec<ManifestArtifact>,
    diagnostics: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub rows: Vec<(Stage, usize)>,
    pub converged: bool,
}

/// Runs all stages in order and writes `manifest.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate(&Input::ALL)?;
    let mut rows = Vec::with_capacity(Stage::ALL.len());
    let mut converged = true;
    for stage in Stage::ALL {
        let outcome = stage.run(cfg)?;
        converged &= outcome.converged.unwrap_or(true);
        rows.push((stage, outcome.rows));
    }
    let inputs = Input::ALL
        .iter()
        .map(|&which| {
            let path = cfg.require(which)?;
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            Ok(ManifestInput {
                role: which.key(),
                path: path.display().to_string(),
                sha256: hex(&Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed(),
        inputs,
        artifacts: rows
            .iter()
            .map(|&(stage, rows)| ManifestArtifact {
                stage: stage.name(),
                file: stage.artifact(),
                rows,
            })
            .collect(),
        diagnostics: vec![SOLVER],
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_artifact(cfg, MANIFEST, &json)?;
    Ok(PipelineSummary { rows, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggm::NetworkEdge;

    #[test]
    fn config_parsing_and_rendering() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(
            "# comment\nexpression = data/x.tsv\nalpha=0.01\nq = 3\nlambda = 0.5, 1,2\nfilter = top_fraction:0.5\nseed = 9\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.expression.as_deref(), Some(Path::new("/base/data/x.tsv")));
        assert_eq!(cfg.alpha, 0.01);
        assert_eq!(cfg.q, QChoice::Fixed(3));
        assert_eq!(cfg.lambda, LambdaChoice::Grid(vec![0.5, 1.0, 2.0]));
        assert_eq!(cfg.filter, FilterRule::TopFraction(0.5));
        assert_eq!(cfg.seed(), 9);

        let mut again = PipelineConfig::default();
        again.apply_text(&cfg.render(), Path::new("/")).unwrap();
        assert_eq!(again.render(), cfg.render());
        assert_eq!(again.hash(), cfg.hash());

        assert!(cfg.set("bogus", "1", Path::new("")).is_err());
        assert!(cfg.set("alpha", "x", Path::new("")).is_err());
        assert!(cfg.apply_text("alpha 0.1", Path::new("")).is_err());
        cfg.set("q", "auto", Path::new("")).unwrap();
        assert_eq!(cfg.q, QChoice::Auto);
    }

    #[test]
    fn validation_names_the_missing_file() {
        let mut cfg = PipelineConfig::default();
        cfg.gmt = Some(PathBuf::from("/definitely/not/here.gmt"));
        let err = cfg.validate(&[Input::Gmt]).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("gmt"));
        let err = PipelineConfig::default().validate(&[Input::Ppi]).unwrap_err();
        assert!(err.to_string().contains("ppi"));
    }

    #[test]
    fn validation_checks_ranges() {
        for (k, v) in [("alpha", "0"), ("alpha", "1.5"), ("enrich_level", "1"), ("min_links", "0"), ("lambda_in", "0"), ("q", "0")] {
            let mut cfg = PipelineConfig::default();
            cfg.set(k, v, Path::new("")).unwrap();
            assert!(cfg.validate(&[]).is_err(), "{k} = {v}");
        }
        assert!(PipelineConfig::default().validate(&[]).is_ok());
    }

    fn network(edges: Vec<([bool; 2], usize, usize)>) -> InferredNetwork {
        InferredNetwork {
            genes: vec!["b".into(), "a".into(), "c".into()],
            edges: edges
                .into_iter()
                .map(|(present, i, j)| NetworkEdge {
                    i,
                    j,
                    present,
                    pcor: [0.1, 0.1],
                    sign: [1, 1],
                })
                .collect(),
        }
    }

    #[test]
    fn dot_styles_and_order() {
        let dot = export_dot(
            &network(vec![([true, true], 0, 1), ([true, false], 0, 2), ([false, true], 1, 2)]),
            ["pCR", "not-pCR"],
        );
        let expected = "graph differential_network {\n  // green: pCR only; red: not-pCR only; black dashed: both\n  \"a\";\n  \"b\";\n  \"c\";\n  \"a\" -- \"b\" [style=dashed, color=black];\n  \"a\" -- \"c\" [color=red];\n  \"b\" -- \"c\" [color=green];\n}\n";
        assert_eq!(dot, expected);
    }

    #[test]
    fn empty_network_is_valid_dot() {
        let dot = export_dot(&network(vec![]), ["1", "2"]);
        assert!(dot.starts_with("graph differential_network {\n"));
        assert!(dot.ends_with("}\n"));
        assert!(!dot.contains("--"));
        assert_eq!(dot.matches(";\n").count(), 3);
    }
}
