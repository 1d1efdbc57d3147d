//! Synthetic end-to-end input set: expression, labels, PPI, pathways,
//! universe and a pipeline config, all drawn from a known modular network.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datamodel::{sample_expression, synth_network, Condition, ExpressionMatrix, GroundTruthModel};
use crate::error::{Error, Result};
use crate::tsv;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    /// Genes of the ground-truth network, `g1..gp`.
    pub p: usize,
    pub q: usize,
    /// Independent genes `n1..`, never differential.
    pub null_genes: usize,
    pub n_per_condition: usize,
    /// Network genes whose condition-2 mean is shifted.
    pub shifted_genes: usize,
    /// Shift in units of the gene's standard deviation.
    pub shift: f64,
    /// Extra universe genes that belong to no network.
    pub filler_genes: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            p: 40,
            q: 3,
            null_genes: 20,
            n_per_condition: 30,
            shifted_genes: 24,
            shift: 1.5,
            filler_genes: 140,
            seed: 42,
        }
    }
}

pub const EXPRESSION_FILE: &str = "expression.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const PPI_FILE: &str = "ppi.txt";
pub const GMT_FILE: &str = "pathways.gmt";
pub const UNIVERSE_FILE: &str = "universe.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: GroundTruthModel,
    pub expression: ExpressionMatrix,
    /// `(file name, contents)` in writing order.
    pub files: Vec<(&'static str, String)>,
}

const WITHIN_DENSITY: f64 = 0.3;
const BETWEEN_DENSITY: f64 = 0.02;
const NOISE_PPI_EDGES: usize = 60;
const DECOY_PPI_EDGES: usize = 2;
const DECOY_PATHWAYS: usize = 4;

fn null_id(i: usize) -> String {
    format!("n{}", i + 1)
}

fn filler_id(i: usize) -> String {
    format!("u{}", i + 1)
}

pub fn generate_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    if cfg.n_per_condition < 2 || cfg.shifted_genes > cfg.p {
        return Err(Error::InvalidArgument("fixture needs n >= 2 and shifted_genes <= p".into()));
    }
    let model = synth_network(cfg.p, cfg.q, WITHIN_DENSITY, BETWEEN_DENSITY, cfg.seed)?;
    let network = sample_expression(&model, cfg.n_per_condition, cfg.n_per_condition, cfg.seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);

    let n = 2 * cfg.n_per_condition;
    let total = cfg.p + cfg.null_genes;
    let mut values = DMatrix::zeros(total, n);
    values.view_mut((0, 0), (cfg.p, n)).copy_from(network.values());
    for i in cfg.p..total {
        for j in 0..n {
            values[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let sigma = model.covariance(Condition::One)?;
    let mut order: Vec<usize> = (0..cfg.p).collect();
    order.shuffle(&mut rng);
    let mut shifted = order[..cfg.shifted_genes].to_vec();
    shifted.sort_unstable();
    let two = network.columns_of(Condition::Two);
    for &i in &shifted {
        let delta = cfg.shift * sigma[(i, i)].sqrt();
        for &j in &two {
            values[(i, j)] += delta;
        }
    }
    let mut genes = model.gene_ids();
    genes.extend((0..cfg.null_genes).map(null_id));
    let expression = ExpressionMatrix::new(
        genes.clone(),
        network.sample_ids().to_vec(),
        values,
        network.conditions().to_vec(),
    )?;

    let files = vec![
        (EXPRESSION_FILE, expression.to_tsv()),
        (LABELS_FILE, expression.labels_tsv()),
        (PPI_FILE, ppi_text(&model, &genes, &mut rng)),
        (GMT_FILE, gmt_text(&model, cfg, &mut rng)),
        (UNIVERSE_FILE, universe_text(&genes, cfg)),
        (CONFIG_FILE, config_text(cfg)),
    ];
    Ok(Fixture {
        model,
        expression,
        files,
    })
}

/// True edges score 900..=999; random pairs score 100..=850, except a few
/// high-scoring decoys linking a null gene to a network gene.
fn ppi_text(model: &GroundTruthModel, genes: &[String], rng: &mut ChaCha8Rng) -> String {
    let mut out = String::from("protein_a\tprotein_b\tcombined_score\n");
    for (i, j) in model.edges(Condition::One) {
        let s: u32 = rng.random_range(900..=999);
        out.push_str(&format!("{}\t{}\t{s}\n", genes[i], genes[j]));
    }
    for _ in 0..NOISE_PPI_EDGES {
        let a = rng.random_range(0..genes.len());
        let b = rng.random_range(0..genes.len());
        let s: u32 = rng.random_range(100..=850);
        out.push_str(&format!("{}\t{}\t{s}\n", genes[a], genes[b]));
    }
    let nulls = genes.len() - model.p;
    for _ in 0..DECOY_PPI_EDGES.min(nulls) {
        let a = rng.random_range(model.p..genes.len());
        let b = rng.random_range(0..model.p);
        let s: u32 = rng.random_range(900..=999);
        out.push_str(&format!("{}\t{}\t{s}\n", genes[a], genes[b]));
    }
    out
}

/// Two pathways per cluster (all members, and a random 70% of them), each
/// padded with filler genes, plus filler-only decoys.
fn gmt_text(model: &GroundTruthModel, cfg: &FixtureConfig, rng: &mut ChaCha8Rng) -> String {
    let genes = model.gene_ids();
    let mut out = String::new();
    let mut line = |name: String, members: Vec<String>| {
        out.push_str(&name);
        out.push_str("\tsynthetic");
        for m in members {
            out.push('\t');
            out.push_str(&m);
        }
        out.push('\n');
    };
    let fillers = |rng: &mut ChaCha8Rng, k: usize| -> Vec<String> {
        let mut idx: Vec<usize> = (0..cfg.filler_genes).collect();
        idx.shuffle(rng);
        idx.truncate(k.min(cfg.filler_genes));
        idx.sort_unstable();
        idx.into_iter().map(filler_id).collect()
    };
    for q in 0..model.n_clusters() {
        let members: Vec<String> = (0..model.p).filter(|&i| model.z[i][q]).map(|i| genes[i].clone()).collect();
        let mut full = members.clone();
        full.extend(fillers(rng, 8));
        line(format!("CLUSTER{}_A", q + 1), full);
        let mut part: Vec<String> = members.into_iter().filter(|_| rng.random::<f64>() < 0.7).collect();
        part.extend(fillers(rng, 8));
        line(format!("CLUSTER{}_B", q + 1), part);
    }
    for d in 0..DECOY_PATHWAYS {
        let mut members = fillers(rng, 15);
        if cfg.null_genes > 0 {
            members.push(null_id(rng.random_range(0..cfg.null_genes)));
        }
        line(format!("DECOY{}", d + 1), members);
    }
    out
}

fn universe_text(genes: &[String], cfg: &FixtureConfig) -> String {
    let mut out = String::new();
    for g in genes.iter().cloned().chain((0..cfg.filler_genes).map(filler_id)) {
        out.push_str(&g);
        out.push('\n');
    }
    out
}

fn config_text(cfg: &FixtureConfig) -> String {
    format!(
        "# synthetic fixture: p = {}, Q = {}, seed = {}\n\
         expression = {EXPRESSION_FILE}\n\
         labels = {LABELS_FILE}\n\
         ppi = {PPI_FILE}\n\
         gmt = {GMT_FILE}\n\
         universe = {UNIVERSE_FILE}\n\
         alpha = 0.001\n\
         n_trees = 300\n\
         q = {}\n\
         lambda = 1,2,4,8\n\
         seed = {}\n\
         condition1 = pCR\n\
         condition2 = not-pCR\n",
        cfg.p, cfg.q, cfg.seed, cfg.q, cfg.seed
    )
}

/// Writes the fixture files into `dir`, creating it if needed.
pub fn write_fixture(dir: &Path, cfg: &FixtureConfig) -> Result<Fixture> {
    let fixture = generate_fixture(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, contents) in &fixture.files {
        tsv::write_string(&dir.join(name), contents)?;
    }
    Ok(fixture)
}
