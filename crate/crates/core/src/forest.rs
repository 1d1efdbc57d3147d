//! Random-forest cleaning of the differential signature.
//!
//! Binary CART trees with Gini splits are grown on class-stratified bootstrap
//! samples; at every node only `mtry` randomly drawn genes compete for the
//! split. Variable importance is the mean decrease in out-of-bag accuracy
//! when a gene's OOB values are permuted.
//!
//! Every tree owns a generator derived from `(seed, tree index)`, so a
//! forest is identical whatever the thread schedule.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{Condition, ExpressionMatrix, Provenance, Signature};
use crate::error::{Error, Result};
use crate::tsv;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Genes tried per node; `None` means `⌈√p⌉`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_leaf: 1,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf {
        class: usize,
    },
    Split {
        gene: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    /// Bootstrap multiplicity of every sample.
    in_bag: Vec<u32>,
}

impl Tree {
    fn predict_with(&self, value: impl Fn(usize) -> f64) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { class } => return class,
                Node::Split {
                    gene,
                    threshold,
                    left,
                    right,
                } => at = if value(gene) <= threshold { left } else { right },
            }
        }
    }

    /// Class (0 or 1) predicted for sample column `s` of `x`.
    pub fn predict(&self, x: &DMatrix<f64>, s: usize) -> usize {
        self.predict_with(|g| x[(g, s)])
    }

    /// Training indices as a multiset (each sample repeated by multiplicity).
    pub fn training_indices(&self) -> Vec<usize> {
        self.in_bag
            .iter()
            .enumerate()
            .flat_map(|(s, &k)| std::iter::repeat_n(s, k as usize))
            .collect()
    }

    pub fn oob_indices(&self) -> Vec<usize> {
        self.in_bag
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == 0)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    n_genes: usize,
    n_samples: usize,
    seed: u64,
}

impl Forest {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Majority vote of all trees; ties go to condition 1.
    pub fn predict(&self, x: &DMatrix<f64>, s: usize) -> usize {
        let ones = self.trees.iter().filter(|t| t.predict(x, s) == 1).count();
        usize::from(2 * ones > self.trees.len())
    }
}

fn tree_rng(seed: u64, tree: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tree as u64) << 1) | purpose);
    rng
}

fn class_labels(conditions: &[Condition]) -> Vec<usize> {
    conditions.iter().map(|c| c.index()).collect()
}

fn gini(counts: [usize; 2], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let (a, b) = (counts[0] as f64 / n, counts[1] as f64 / n);
    1.0 - a * a - b * b
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    labels: &'a [usize],
    mtry: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf(&mut self, counts: [usize; 2]) -> usize {
        let class = usize::from(counts[1] > counts[0]);
        self.nodes.push(Node::Leaf { class });
        self.nodes.len() - 1
    }

    fn grow(&mut self, idx: Vec<usize>, rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let mut counts = [0usize; 2];
        for &s in &idx {
            counts[self.labels[s]] += 1;
        }
        if counts[0] == 0 || counts[1] == 0 || n <= self.min_leaf {
            return self.leaf(counts);
        }
        let parent = gini(counts, n);

        let mut genes = index::sample(rng, self.x.nrows(), self.mtry).into_vec();
        genes.sort_unstable();
        // (impurity, gene, threshold); genes ascending + strict `<` gives the
        // lowest gene index, then the lowest threshold, among exact ties
        let mut best: Option<(f64, usize, f64)> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
        for &g in &genes {
            pairs.clear();
            pairs.extend(idx.iter().map(|&s| (self.x[(g, s)], self.labels[s])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0usize; 2];
            for k in 1..n {
                left[pairs[k - 1].1] += 1;
                if pairs[k - 1].0 == pairs[k].0 || k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let right = [counts[0] - left[0], counts[1] - left[1]];
                let impurity = (k as f64 * gini(left, k) + (n - k) as f64 * gini(right, n - k)) / n as f64;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    best = Some((impurity, g, 0.5 * (pairs[k - 1].0 + pairs[k].0)));
                }
            }
        }
        let Some((impurity, gene, threshold)) = best else {
            return self.leaf(counts);
        };
        if impurity >= parent - 1e-12 {
            return self.leaf(counts);
        }

        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&s| self.x[(gene, s)] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { class: 0 });
        let left = self.grow(l, rng);
        let right = self.grow(r, rng);
        self.nodes[at] = Node::Split {
            gene,
            threshold,
            left,
            right,
        };
        at
    }
}

fn stratified_bootstrap(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut in_bag = vec![0u32; labels.len()];
    for class in 0..2 {
        let members: Vec<usize> = (0..labels.len()).filter(|&s| labels[s] == class).collect();
        for _ in 0..members.len() {
            in_bag[members[rng.random_range(0..members.len())]] += 1;
        }
    }
    in_bag
}

/// Grows the forest on all genes of `x` (genes in rows, samples in columns).
pub fn grow_forest(x: &ExpressionMatrix, cfg: &ForestConfig) -> Result<Forest> {
    let p = x.n_genes();
    if cfg.n_trees == 0 {
        return Err(Error::InvalidArgument("n_trees must be at least 1".into()));
    }
    if cfg.min_leaf == 0 {
        return Err(Error::InvalidArgument("min_leaf must be at least 1".into()));
    }
    let mtry = cfg.mtry_for(p);
    if mtry == 0 || mtry > p {
        return Err(Error::InvalidArgument(format!("mtry {mtry} outside 1..={p}")));
    }
    let labels = class_labels(x.conditions());
    let values = x.values();
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(cfg.seed, t, 0);
            let in_bag = stratified_bootstrap(&labels, &mut rng);
            let mut grower = Grower {
                x: values,
                labels: &labels,
                mtry,
                min_leaf: cfg.min_leaf,
                nodes: Vec::new(),
            };
            let idx: Vec<usize> = in_bag
                .iter()
                .enumerate()
                .flat_map(|(s, &k)| std::iter::repeat_n(s, k as usize))
                .collect();
            grower.grow(idx, &mut rng);
            Tree {
                nodes: grower.nodes,
                in_bag,
            }
        })
        .collect();
    Ok(Forest {
        trees,
        n_genes: p,
        n_samples: x.n_samples(),
        seed: cfg.seed,
    })
}

/// Importance of one gene.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneImportance {
    pub gene: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub genes: Vec<GeneImportance>,
    /// Number of trees whose OOB set contributed to each gene's importance.
    pub oob_count: Vec<usize>,
    /// Majority-vote OOB misclassification rate.
    pub oob_error: f64,
    /// Samples that were in-bag for every tree and thus left out of `oob_error`.
    pub unevaluated_samples: usize,
}

/// Permutation importance and OOB error of `forest` on the data it was grown on.
pub fn importance(forest: &Forest, x: &ExpressionMatrix) -> Result<ImportanceReport> {
    if x.n_genes() != forest.n_genes || x.n_samples() != forest.n_samples {
        return Err(Error::InvalidArgument("forest and data dimensions differ".into()));
    }
    let labels = class_labels(x.conditions());
    let values = x.values();
    let p = x.n_genes();

    // per tree: accuracy drop per gene (None if the tree has no OOB sample)
    let drops: Vec<Option<Vec<f64>>> = forest
        .trees
        .par_iter()
        .enumerate()
        .map(|(t, tree)| {
            let oob = tree.oob_indices();
            if oob.is_empty() {
                return None;
            }
            let mut rng = tree_rng(forest.seed, t, 1);
            let base = oob.iter().filter(|&&s| tree.predict(values, s) == labels[s]).count();
            let mut drop = Vec::with_capacity(p);
            let mut shuffled = oob.clone();
            for g in 0..p {
                shuffled.copy_from_slice(&oob);
                shuffled.shuffle(&mut rng);
                let correct = oob
                    .iter()
                    .zip(&shuffled)
                    .filter(|(&s, &donor)| {
                        tree.predict_with(|f| if f == g { values[(g, donor)] } else { values[(f, s)] }) == labels[s]
                    })
                    .count();
                drop.push((base as f64 - correct as f64) / oob.len() as f64);
            }
            Some(drop)
        })
        .collect();

    let mut total = vec![0.0; p];
    let mut contributing = 0usize;
    for d in drops.iter().flatten() {
        contributing += 1;
        for (acc, v) in total.iter_mut().zip(d) {
            *acc += v;
        }
    }
    if contributing == 0 {
        warn!("no tree has an out-of-bag sample; importances set to 0");
    }
    let genes = x
        .gene_ids()
        .iter()
        .zip(&total)
        .map(|(g, &s)| GeneImportance {
            gene: g.clone(),
            importance: if contributing > 0 { s / contributing as f64 } else { 0.0 },
        })
        .collect();

    let mut votes = vec![[0usize; 2]; x.n_samples()];
    for tree in &forest.trees {
        for s in tree.oob_indices() {
            votes[s][tree.predict(values, s)] += 1;
        }
    }
    let (mut wrong, mut evaluated) = (0usize, 0usize);
    for (s, v) in votes.iter().enumerate() {
        if v[0] + v[1] == 0 {
            continue;
        }
        evaluated += 1;
        let predicted = usize::from(v[1] > v[0]);
        wrong += usize::from(predicted != labels[s]);
    }
    let unevaluated = x.n_samples() - evaluated;
    if unevaluated > 0 {
        warn!("{unevaluated} sample(s) never out-of-bag; excluded from the OOB error");
    }
    Ok(ImportanceReport {
        genes,
        oob_count: vec![contributing; p],
        oob_error: if evaluated > 0 { wrong as f64 / evaluated as f64 } else { 0.0 },
        unevaluated_samples: unevaluated,
    })
}

/// 1-based ranks by decreasing importance; ties keep input order.
pub fn ranks(scores: &[GeneImportance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].importance.total_cmp(&scores[a].importance).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    rank
}

const IMPORTANCE_HEADER: [&str; 3] = ["gene", "importance", "rank"];

pub fn importance_to_tsv(scores: &[GeneImportance]) -> String {
    let mut out = IMPORTANCE_HEADER.join("\t");
    out.push('\n');
    for (s, r) in scores.iter().zip(ranks(scores)) {
        out.push_str(&format!("{}\t{}\t{}\n", s.gene, tsv::fmt_sig(s.importance), r));
    }
    out
}

pub fn importance_from_tsv(text: &str) -> Result<Vec<GeneImportance>> {
    const FILE: &str = "importance";
    let mut lines = tsv::lines(text);
    tsv::expect_header(FILE, lines.next().map(|l| l.1), &IMPORTANCE_HEADER)?;
    lines
        .map(|(no, line)| {
            let f = tsv::fields(FILE, no, line, 3)?;
            tsv::parse_usize(FILE, no, f[2])?;
            Ok(GeneImportance {
                gene: f[0].to_string(),
                importance: tsv::parse_f64(FILE, no, f[1])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterRule {
    /// Keep genes with strictly positive importance.
    Positive,
    /// Keep the `⌈f·n⌉` most important genes.
    TopFraction(f64),
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterRule::Positive => f.write_str("positive"),
            FilterRule::TopFraction(x) => write!(f, "top_fraction:{x}"),
        }
    }
}

impl FromStr for FilterRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "positive" {
            return Ok(FilterRule::Positive);
        }
        s.strip_prefix("top_fraction:")
            .and_then(|f| f.parse::<f64>().ok())
            .map(FilterRule::TopFraction)
            .ok_or_else(|| Error::Config(format!("unknown filter rule `{s}` (positive | top_fraction:<f>)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub signature: Signature,
    /// Set when no gene survived the filter.
    pub empty_after_filter: bool,
}

/// Keeps the signature genes passing `rule`, tagged `forest-retained`, in
/// signature order.
pub fn filter_by_importance(scores: &[GeneImportance], signature: &Signature, rule: FilterRule) -> Result<FilterOutcome> {
    let mut ordered = Vec::with_capacity(signature.len());
    for g in signature.iter() {
        let s = scores
            .iter()
            .find(|s| s.gene == g.gene)
            .ok_or_else(|| Error::InvalidArgument(format!("no importance for signature gene `{}`", g.gene)))?;
        ordered.push(s.clone());
    }
    let keep: Vec<bool> = match rule {
        FilterRule::Positive => ordered.iter().map(|s| s.importance > 0.0).collect(),
        FilterRule::TopFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidArgument(format!("top fraction {f} outside (0, 1]")));
            }
            let n = (f * ordered.len() as f64).ceil() as usize;
            ranks(&ordered).into_iter().map(|r| r <= n).collect()
        }
    };
    let sig = Signature::from_genes(
        ordered.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.gene.clone()),
        Provenance::ForestRetained,
    );
    let empty = sig.is_empty() && !signature.is_empty();
    if empty {
        warn!("importance filter removed every signature gene");
    }
    Ok(FilterOutcome {
        signature: sig,
        empty_after_filter: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    /// Gene 0 separates the classes ({0} vs {10}); the others are noise.
    pub(crate) fn separable(n_noise: usize, n: usize, seed: u64) -> ExpressionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 1 + n_noise;
        let conds: Vec<Condition> = (0..n).map(|j| if j < n / 2 { Condition::One } else { Condition::Two }).collect();
        let values = DMatrix::from_fn(p, n, |i, j| {
            if i == 0 {
                if j < n / 2 { 0.0 } else { 10.0 }
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        ExpressionMatrix::new(
            (0..p).map(|i| format!("g{i}")).collect(),
            (0..n).map(|j| format!("s{j}")).collect(),
            values,
            conds,
        )
        .unwrap()
    }

    #[test]
    fn single_tree_forest_votes_with_its_tree() {
        let x = separable(3, 20, 1);
        let cfg = ForestConfig {
            n_trees: 1,
            seed: 4,
            ..Default::default()
        };
        let f = grow_forest(&x, &cfg).unwrap();
        assert_eq!(f.trees().len(), 1);
        for s in 0..20 {
            assert_eq!(f.predict(x.values(), s), f.trees()[0].predict(x.values(), s));
        }
    }

    #[test]
    fn bootstrap_is_a_stratified_multiset() {
        let x = separable(2, 21, 2);
        let f = grow_forest(&x, &ForestConfig { n_trees: 20, ..Default::default() }).unwrap();
        for t in f.trees() {
            let idx = t.training_indices();
            assert_eq!(idx.len(), 21);
            assert_eq!(idx.iter().filter(|&&s| s < 10).count(), 10);
            let support: std::collections::BTreeSet<usize> = idx.into_iter().collect();
            let oob: std::collections::BTreeSet<usize> = t.oob_indices().into_iter().collect();
            assert!(support.is_disjoint(&oob));
            assert_eq!(support.len() + oob.len(), 21);
        }
    }

    #[test]
    fn rejects_bad_mtry() {
        let x = separable(2, 10, 0);
        let cfg = ForestConfig {
            mtry: Some(4),
            ..Default::default()
        };
        assert!(grow_forest(&x, &cfg).is_err());
    }

    #[test]
    fn no_oob_means_zero_importance() {
        let x = separable(1, 4, 0);
        let mut f = grow_forest(&x, &ForestConfig { n_trees: 3, ..Default::default() }).unwrap();
        for t in &mut f.trees {
            t.in_bag = vec![1; 4];
        }
        let r = importance(&f, &x).unwrap();
        assert!(r.genes.iter().all(|g| g.importance == 0.0));
        assert_eq!(r.unevaluated_samples, 4);
        assert_eq!(r.oob_count, vec![0, 0]);
    }

    fn scores(values: &[f64]) -> (Vec<GeneImportance>, Signature) {
        let s: Vec<GeneImportance> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| GeneImportance {
                gene: format!("g{i}"),
                importance: v,
            })
            .collect();
        let sig = Signature::from_genes(s.iter().map(|g| g.gene.clone()), Provenance::Differential);
        (s, sig)
    }

    #[test]
    fn filter_examples() {
        let (s, sig) = scores(&[0.2, 0.0, -0.01]);
        let out = filter_by_importance(&s, &sig, FilterRule::Positive).unwrap();
        assert_eq!(out.signature.ids(), ["g0"]);
        assert_eq!(out.signature.iter().next().unwrap().provenance, Provenance::ForestRetained);

        let (s, sig) = scores(&[0.1, 0.4, 0.3, 0.2]);
        let out = filter_by_importance(&s, &sig, FilterRule::TopFraction(0.5)).unwrap();
        assert_eq!(out.signature.ids(), ["g1", "g2"]);

        let (s, sig) = scores(&[0.0, -0.2]);
        let out = filter_by_importance(&s, &sig, FilterRule::Positive).unwrap();
        assert!(out.signature.is_empty() && out.empty_after_filter);

        assert!(filter_by_importance(&s, &sig, FilterRule::TopFraction(0.0)).is_err());
        assert!(filter_by_importance(&s, &sig, FilterRule::TopFraction(1.5)).is_err());
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("positive".parse::<FilterRule>().unwrap(), FilterRule::Positive);
        assert_eq!(
            "top_fraction:0.25".parse::<FilterRule>().unwrap(),
            FilterRule::TopFraction(0.25)
        );
        assert!("best".parse::<FilterRule>().is_err());
    }

    #[test]
    fn importance_tsv_round_trip() {
        let (s, _) = scores(&[0.5, -0.125, 0.0]);
        let text = importance_to_tsv(&s);
        assert!(text.contains("g0\t0.5\t1\n"));
        assert!(text.contains("g1\t-0.125\t3\n"));
        assert_eq!(importance_from_tsv(&text).unwrap(), s);
    }
}
