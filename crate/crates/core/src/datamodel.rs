//! Expression data containers, file ingestion, per-condition centering,
//! empirical covariance and the synthetic ground-truth generator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::enrich::ClusterAssignment;
use crate::error::{Error, Result};
use crate::tsv;

/// One of the two experimental conditions being compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    One,
    Two,
}

impl Condition {
    pub const BOTH: [Condition; 2] = [Condition::One, Condition::Two];

    /// Zero-based index, usable for `[T; 2]` arrays.
    pub fn index(self) -> usize {
        match self {
            Condition::One => 0,
            Condition::Two => 1,
        }
    }

    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(Condition::One),
            2 => Some(Condition::Two),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Condition::One => Condition::Two,
            Condition::Two => Condition::One,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Log-expression values for `p` genes (rows) over `N` samples (columns),
/// each sample carrying a condition label.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
    values: DMatrix<f64>,
    conditions: Vec<Condition>,
}

impl ExpressionMatrix {
    pub fn new(
        gene_ids: Vec<String>,
        sample_ids: Vec<String>,
        values: DMatrix<f64>,
        conditions: Vec<Condition>,
    ) -> Result<Self> {
        if gene_ids.is_empty() {
            return Err(Error::InvalidArgument("expression matrix has no genes".into()));
        }
        if values.nrows() != gene_ids.len() || values.ncols() != sample_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "value matrix is {}x{} but there are {} genes and {} samples",
                values.nrows(),
                values.ncols(),
                gene_ids.len(),
                sample_ids.len()
            )));
        }
        if conditions.len() != sample_ids.len() {
            return Err(Error::InvalidArgument(
                "one condition label is required per sample".into(),
            ));
        }
        let mut seen = HashSet::new();
        for g in &gene_ids {
            if !seen.insert(g.as_str()) {
                return Err(Error::DuplicateGene(g.clone()));
            }
        }
        let mut seen = HashSet::new();
        for s in &sample_ids {
            if !seen.insert(s.as_str()) {
                return Err(Error::DuplicateSample(s.clone()));
            }
        }
        for (i, g) in gene_ids.iter().enumerate() {
            for (j, s) in sample_ids.iter().enumerate() {
                let v = values[(i, j)];
                if !v.is_finite() {
                    return Err(Error::NonNumeric {
                        gene: g.clone(),
                        sample: s.clone(),
                        value: v.to_string(),
                    });
                }
            }
        }
        let m = Self {
            gene_ids,
            sample_ids,
            values,
            conditions,
        };
        for c in Condition::BOTH {
            let found = m.n(c);
            if found < 2 {
                return Err(Error::TooFewReplicates {
                    condition: c.label() as usize,
                    found,
                    required: 2,
                });
            }
        }
        Ok(m)
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    /// Replicate count of condition `c`.
    pub fn n(&self, c: Condition) -> usize {
        self.conditions.iter().filter(|&&x| x == c).count()
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn gene_index(&self, gene: &str) -> Option<usize> {
        self.gene_ids.iter().position(|g| g == gene)
    }

    /// Column indices of the samples in condition `c`, in file order.
    pub fn columns_of(&self, c: Condition) -> Vec<usize> {
        self.conditions
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == c)
            .map(|(j, _)| j)
            .collect()
    }

    /// Values of gene `gene` in condition `c`.
    pub fn gene_values(&self, gene: usize, c: Condition) -> Vec<f64> {
        self.columns_of(c)
            .into_iter()
            .map(|j| self.values[(gene, j)])
            .collect()
    }

    /// Sub-matrix restricted to `genes`, in the order given.
    pub fn restrict(&self, genes: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .gene_ids
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let rows = genes
            .iter()
            .map(|g| {
                index
                    .get(g.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("gene `{g}` not in expression data")))
            })
            .collect::<Result<Vec<_>>>()?;
        let values = DMatrix::from_fn(rows.len(), self.n_samples(), |i, j| self.values[(rows[i], j)]);
        Self::new(
            genes.to_vec(),
            self.sample_ids.clone(),
            values,
            self.conditions.clone(),
        )
    }

    /// Expression TSV: header `gene<TAB>sample...`, one row per gene.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gene");
        for s in &self.sample_ids {
            out.push('\t');
            out.push_str(s);
        }
        out.push('\n');
        for (i, g) in self.gene_ids.iter().enumerate() {
            out.push_str(g);
            for j in 0..self.n_samples() {
                out.push('\t');
                out.push_str(&self.values[(i, j)].to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Labels TSV: `sample<TAB>condition`.
    pub fn labels_tsv(&self) -> String {
        let mut out = String::from("sample\tcondition\n");
        for (s, c) in self.sample_ids.iter().zip(&self.conditions) {
            out.push_str(&format!("{s}\t{c}\n"));
        }
        out
    }
}

/// Reads an expression TSV and a sample-label TSV.
pub fn load_expression(path: &Path, labels_path: &Path) -> Result<ExpressionMatrix> {
    let expr = tsv::read_to_string(path)?;
    let labels = tsv::read_to_string(labels_path)?;
    parse_expression(&expr, &labels)
}

pub fn parse_expression(expression_tsv: &str, labels_tsv: &str) -> Result<ExpressionMatrix> {
    let labels = parse_labels(labels_tsv)?;

    let mut lines = tsv::lines(expression_tsv);
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse("expression", 1, "empty file"))?;
    let sample_ids: Vec<String> = header.split('\t').skip(1).map(|s| s.trim().to_string()).collect();
    if sample_ids.is_empty() {
        return Err(Error::parse("expression", 1, "no sample columns"));
    }
    let conditions = sample_ids
        .iter()
        .map(|s| labels.get(s).copied().ok_or_else(|| Error::UnlabeledSample(s.clone())))
        .collect::<Result<Vec<_>>>()?;

    let mut gene_ids = Vec::new();
    let mut data = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        let gene = fields[0].trim().to_string();
        if !seen.insert(gene.clone()) {
            return Err(Error::DuplicateGene(gene));
        }
        if fields.len() != sample_ids.len() + 1 {
            return Err(Error::parse(
                "expression",
                line_no,
                format!("expected {} values, found {}", sample_ids.len(), fields.len() - 1),
            ));
        }
        for (cell, sample) in fields[1..].iter().zip(&sample_ids) {
            let v = cell
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumeric {
                    gene: gene.clone(),
                    sample: sample.clone(),
                    value: cell.to_string(),
                })?;
            data.push(v);
        }
        gene_ids.push(gene);
    }
    let values = DMatrix::from_row_slice(gene_ids.len(), sample_ids.len(), &data);
    ExpressionMatrix::new(gene_ids, sample_ids, values, conditions)
}

fn parse_labels(text: &str) -> Result<HashMap<String, Condition>> {
    let mut out = HashMap::new();
    for (line_no, line) in tsv::lines(text) {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::parse("labels", line_no, "expected `sample<TAB>condition`"));
        }
        let cond = match fields[1].parse::<u8>().ok().and_then(Condition::from_label) {
            Some(c) => c,
            // an optional header row
            None if line_no == 1 && fields[1].parse::<f64>().is_err() => continue,
            None => {
                return Err(Error::parse(
                    "labels",
                    line_no,
                    format!("condition must be 1 or 2, found `{}`", fields[1]),
                ))
            }
        };
        if out.insert(fields[0].to_string(), cond).is_some() {
            return Err(Error::parse(
                "labels",
                line_no,
                format!("sample `{}` labelled twice", fields[0]),
            ));
        }
    }
    Ok(out)
}

/// Subtracts, for every gene, its mean within each condition.
pub fn center_by_condition(x: &ExpressionMatrix) -> ExpressionMatrix {
    let mut values = x.values.clone();
    for c in Condition::BOTH {
        let cols = x.columns_of(c);
        for i in 0..x.n_genes() {
            let mean = cols.iter().map(|&j| x.values[(i, j)]).sum::<f64>() / cols.len() as f64;
            for &j in &cols {
                values[(i, j)] -= mean;
            }
        }
    }
    ExpressionMatrix {
        values,
        ..x.clone()
    }
}

/// Centers per condition, then divides every gene by its pooled
/// within-condition standard deviation (divisor `N`). Constant genes stay zero.
pub fn scale_by_condition(x: &ExpressionMatrix) -> ExpressionMatrix {
    let mut centered = center_by_condition(x);
    let n = x.n_samples() as f64;
    for i in 0..x.n_genes() {
        let ss: f64 = centered.values.row(i).iter().map(|v| v * v).sum();
        let sd = (ss / n).sqrt();
        if sd > 0.0 {
            centered.values.row_mut(i).iter_mut().for_each(|v| *v /= sd);
        }
    }
    centered
}

/// Maximum-likelihood covariance `(1/n_c) Σ_r x_cr x_crᵀ` of condition `c`,
/// after per-condition centering. Exactly symmetric.
pub fn empirical_covariance(x: &ExpressionMatrix, c: Condition) -> Result<DMatrix<f64>> {
    let cols = x.columns_of(c);
    if cols.len() < 2 {
        return Err(Error::TooFewReplicates {
            condition: c.label() as usize,
            found: cols.len(),
            required: 2,
        });
    }
    let centered = center_by_condition(x);
    let p = x.n_genes();
    let n = cols.len() as f64;
    let mut s = DMatrix::zeros(p, p);
    for &r in &cols {
        let col = centered.values.column(r);
        for i in 0..p {
            for j in i..p {
                s[(i, j)] += col[i] * col[j];
            }
        }
    }
    for i in 0..p {
        for j in i..p {
            let v = s[(i, j)] / n;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Empirical covariance matrices of both conditions with their sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    pub s: [DMatrix<f64>; 2],
    pub n: [usize; 2],
}

impl CovariancePair {
    pub fn new(s: [DMatrix<f64>; 2], n: [usize; 2]) -> Result<Self> {
        let p = s[0].nrows();
        for m in &s {
            if !m.is_square() || m.nrows() != p {
                return Err(Error::InvalidArgument("covariance matrices must be square and of equal size".into()));
            }
            if m != &m.transpose() {
                return Err(Error::NonSymmetric);
            }
            if m.diagonal().iter().any(|&d| d < 0.0) {
                return Err(Error::InvalidArgument("negative variance on the diagonal".into()));
            }
        }
        Ok(Self { s, n })
    }

    pub fn from_expression(x: &ExpressionMatrix) -> Result<Self> {
        let s = [
            empirical_covariance(x, Condition::One)?,
            empirical_covariance(x, Condition::Two)?,
        ];
        Ok(Self {
            s,
            n: [x.n(Condition::One), x.n(Condition::Two)],
        })
    }

    pub fn p(&self) -> usize {
        self.s[0].nrows()
    }
}

/// Molecular-signature membership reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Differential,
    ForestRetained,
    PpiAdded,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Differential => "differential",
            Provenance::ForestRetained => "forest-retained",
            Provenance::PpiAdded => "ppi-added",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "differential" => Ok(Provenance::Differential),
            "forest-retained" => Ok(Provenance::ForestRetained),
            "ppi-added" => Ok(Provenance::PpiAdded),
            other => Err(Error::InvalidArgument(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureGene {
    pub gene: String,
    pub provenance: Provenance,
}

/// Ordered set of selected genes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Signature {
    genes: Vec<SignatureGene>,
}

impl Signature {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_genes<I, S>(genes: I, provenance: Provenance) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut sig = Self::new();
        for g in genes {
            sig.push(g, provenance);
        }
        sig
    }

    /// Appends `gene` unless already present. Returns whether it was added.
    pub fn push(&mut self, gene: impl Into<String>, provenance: Provenance) -> bool {
        let gene = gene.into();
        if self.contains(&gene) {
            return false;
        }
        self.genes.push(SignatureGene { gene, provenance });
        true
    }

    pub fn contains(&self, gene: &str) -> bool {
        self.genes.iter().any(|g| g.gene == gene)
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SignatureGene> {
        self.genes.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.genes.iter().map(|g| g.gene.clone()).collect()
    }

    pub fn id_set(&self) -> BTreeSet<String> {
        self.genes.iter().map(|g| g.gene.clone()).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gene\tprovenance\n");
        for g in &self.genes {
            out.push_str(&format!("{}\t{}\n", g.gene, g.provenance));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        const FILE: &str = "signature";
        let mut lines = tsv::lines(text);
        tsv::expect_header(FILE, lines.next().map(|l| l.1), &["gene", "provenance"])?;
        let mut sig = Self::new();
        for (line_no, line) in lines {
            let f = tsv::fields(FILE, line_no, line, 2)?;
            let prov = f[1]
                .parse::<Provenance>()
                .map_err(|e| Error::parse(FILE, line_no, e.to_string()))?;
            if !sig.push(f[0], prov) {
                return Err(Error::DuplicateGene(f[0].to_string()));
            }
        }
        Ok(sig)
    }
}

/// Known concentration matrices used to validate the estimators.
#[derive(Debug, Clone)]
pub struct GroundTruthModel {
    pub p: usize,
    /// `z[i][q]`: gene `i` belongs to cluster `q`.
    pub z: Vec<Vec<bool>>,
    pub k: [DMatrix<f64>; 2],
    /// Off-diagonal nonzero pattern of `k[c]`.
    pub edge_support: [DMatrix<bool>; 2],
}

impl GroundTruthModel {
    pub fn n_clusters(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    /// Upper-triangle edges `(i, j)`, `i < j`, of condition `c`.
    pub fn edges(&self, c: Condition) -> BTreeSet<(usize, usize)> {
        let s = &self.edge_support[c.index()];
        let mut out = BTreeSet::new();
        for i in 0..self.p {
            for j in i + 1..self.p {
                if s[(i, j)] {
                    out.insert((i, j));
                }
            }
        }
        out
    }

    /// True iff genes `i` and `j` share a cluster.
    pub fn same_cluster(&self, i: usize, j: usize) -> bool {
        self.z[i].iter().zip(&self.z[j]).any(|(a, b)| *a && *b)
    }

    pub fn gene_ids(&self) -> Vec<String> {
        (1..=self.p).map(|i| format!("g{i}")).collect()
    }

    /// The generating clusters as a [`ClusterAssignment`] over `g1..gp`.
    pub fn cluster_assignment(&self) -> ClusterAssignment {
        let q = self.n_clusters();
        ClusterAssignment {
            genes: self.gene_ids(),
            z: self.z.clone(),
            member_pathways: (1..=q).map(|k| vec![format!("cluster{k}")]).collect(),
        }
    }

    /// Covariance `Σ = K⁻¹` of condition `c`.
    pub fn covariance(&self, c: Condition) -> Result<DMatrix<f64>> {
        self.k[c.index()]
            .clone()
            .cholesky()
            .map(|ch| ch.inverse())
            .ok_or(Error::NotPositiveDefinite)
    }
}

const EIGEN_FLOOR: f64 = 0.1;
const SECOND_MEMBERSHIP_PROB: f64 = 0.15;

/// Draws a modular ground-truth network with overlapping clusters.
///
/// Both conditions share the edge support and the edge signs; magnitudes
/// differ by a random factor in `[0.6, 1.4]`. Each diagonal is shifted so
/// that the smallest eigenvalue of `K` is at least 0.1.
pub fn synth_network(
    p: usize,
    q: usize,
    within_density: f64,
    between_density: f64,
    seed: u64,
) -> Result<GroundTruthModel> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be positive".into()));
    }
    if q == 0 || q > p {
        return Err(Error::InvalidArgument(format!("need 1 <= Q <= p, got Q = {q}")));
    }
    for d in [within_density, between_density] {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::InvalidArgument(format!("density {d} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // every cluster gets at least one gene: gene at shuffled position k -> k mod Q
    let mut order: Vec<usize> = (0..p).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut z = vec![vec![false; q]; p];
    for (k, &gene) in order.iter().enumerate() {
        z[gene][k % q] = true;
        if q >= 2 && rng.random::<f64>() < SECOND_MEMBERSHIP_PROB {
            let primary = k % q;
            let mut second = rng.random_range(0..q - 1);
            if second >= primary {
                second += 1;
            }
            z[gene][second] = true;
        }
    }

    let mut off = [DMatrix::zeros(p, p), DMatrix::zeros(p, p)];
    let mut support = DMatrix::from_element(p, p, false);
    for i in 0..p {
        for j in i + 1..p {
            let shared = z[i].iter().zip(&z[j]).any(|(a, b)| *a && *b);
            let density = if shared { within_density } else { between_density };
            if rng.random::<f64>() >= density {
                continue;
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let magnitude = rng.random_range(0.4..1.0);
            let ratio = rng.random_range(0.6..1.4);
            for (c, m) in off.iter_mut().enumerate() {
                let v = sign * magnitude * if c == 0 { 1.0 } else { ratio };
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            support[(i, j)] = true;
            support[(j, i)] = true;
        }
    }

    let k = off.map(|a| {
        let min_eig = SymmetricEigen::new(a.clone()).eigenvalues.min();
        let shift = EIGEN_FLOOR - min_eig + 1e-9;
        a + DMatrix::identity(p, p) * shift
    });
    Ok(GroundTruthModel {
        p,
        z,
        k,
        edge_support: [support.clone(), support],
    })
}

/// Draws `n1` + `n2` Gaussian samples from `N(0, K_c⁻¹)`.
pub fn sample_expression(model: &GroundTruthModel, n1: usize, n2: usize, seed: u64) -> Result<ExpressionMatrix> {
    for (c, n) in [(1, n1), (2, n2)] {
        if n < 2 {
            return Err(Error::TooFewReplicates {
                condition: c,
                found: n,
                required: 2,
            });
        }
    }
    let p = model.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = DMatrix::zeros(p, n1 + n2);
    let mut conditions = Vec::with_capacity(n1 + n2);
    let mut col = 0;
    for (c, n) in [(Condition::One, n1), (Condition::Two, n2)] {
        let sigma = model.covariance(c)?;
        let l = sigma.cholesky().ok_or(Error::NotPositiveDefinite)?.unpack();
        for _ in 0..n {
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            values.set_column(col, &(&l * z));
            conditions.push(c);
            col += 1;
        }
    }
    let samples = (1..=n1 + n2).map(|j| format!("s{j}")).collect();
    ExpressionMatrix::new(model.gene_ids(), samples, values, conditions)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "gene\ts1\ts2\ts3\ts4\nTP53\t1\t3\t2.5\t2\nBRCA1\t0.5\t0.5\t1\t-1\nAKT1\t2\t2\t2\t2\n";
    const LABELS: &str = "sample\tcondition\ns1\t1\ns2\t1\ns3\t2\ns4\t2\n";

    #[test]
    fn parses_fixture() {
        let x = parse_expression(FIXTURE, LABELS).unwrap();
        assert_eq!(x.n_genes(), 3);
        assert_eq!(x.n(Condition::One), 2);
        assert_eq!(x.n(Condition::Two), 2);
        assert_eq!(x.gene_ids(), ["TP53", "BRCA1", "AKT1"]);
        assert_eq!(x.values()[(1, 3)], -1.0);
    }

    #[test]
    fn windows_newlines_and_headerless_labels() {
        let expr = FIXTURE.replace('\n', "\r\n");
        let labels = "s1\t1\r\ns2\t1\r\ns3\t2\r\ns4\t2\r\n";
        let x = parse_expression(&expr, labels).unwrap();
        assert_eq!(x.n_samples(), 4);
    }

    #[test]
    fn duplicate_gene_rejected() {
        let bad = format!("{FIXTURE}TP53\t0\t0\t0\t0\n");
        assert!(matches!(parse_expression(&bad, LABELS), Err(Error::DuplicateGene(g)) if g == "TP53"));
    }

    #[test]
    fn unlabeled_sample_rejected() {
        let labels = "s1\t1\ns2\t1\ns3\t2\n";
        assert!(matches!(parse_expression(FIXTURE, labels), Err(Error::UnlabeledSample(s)) if s == "s4"));
    }

    #[test]
    fn missing_and_non_numeric_cells_rejected() {
        for cell in ["NA", "", "abc", "inf", "NaN"] {
            let bad = FIXTURE.replace("\t2.5\t", &format!("\t{cell}\t"));
            assert!(
                matches!(parse_expression(&bad, LABELS), Err(Error::NonNumeric { .. })),
                "cell `{cell}` accepted"
            );
        }
    }

    #[test]
    fn too_few_replicates_rejected() {
        let labels = "s1\t1\ns2\t2\ns3\t2\ns4\t2\n";
        assert!(matches!(
            parse_expression(FIXTURE, labels),
            Err(Error::TooFewReplicates { condition: 1, found: 1, .. })
        ));
    }

    #[test]
    fn centering_examples() {
        let x = parse_expression(FIXTURE, LABELS).unwrap();
        let c = center_by_condition(&x);
        assert_eq!(c.gene_values(0, Condition::One), vec![-1.0, 1.0]);
        assert_eq!(c.gene_values(2, Condition::Two), vec![0.0, 0.0]);
        let again = center_by_condition(&c);
        assert!((again.values() - c.values()).amax() < 1e-12);
    }

    #[test]
    fn covariance_hand_values() {
        let x = parse_expression("gene\ta\tb\tc\td\ng\t1\t-1\t5\t5\n", "a\t1\nb\t1\nc\t2\nd\t2\n").unwrap();
        let s = empirical_covariance(&x, Condition::One).unwrap();
        assert_eq!(s[(0, 0)], 1.0);

        let y = parse_expression(
            "gene\ta\tb\tc\td\ng\t1\t2\t0\t4\nh\t1\t2\t0\t4\n",
            "a\t1\nb\t1\nc\t2\nd\t2\n",
        )
        .unwrap();
        let s = empirical_covariance(&y, Condition::Two).unwrap();
        assert_eq!(s[(0, 0)], s[(1, 1)]);
        assert_eq!(s[(0, 1)], s[(0, 0)]);
        assert_eq!(s[(0, 0)], 4.0);
    }

    #[test]
    fn covariance_of_identity_model() {
        let model = synth_network(5, 1, 0.0, 0.0, 0).unwrap();
        // K = 0.1 I; rescale to the identity precision
        let model = GroundTruthModel {
            k: [DMatrix::identity(5, 5), DMatrix::identity(5, 5)],
            ..model
        };
        let x = sample_expression(&model, 5000, 5000, 1).unwrap();
        let s = empirical_covariance(&x, Condition::One).unwrap();
        let dist = (s - DMatrix::<f64>::identity(5, 5)).norm();
        assert!(dist < 0.15, "‖S − I‖_F = {dist}");
    }

    #[test]
    fn degenerate_network_sizes() {
        let m = synth_network(1, 1, 0.5, 0.5, 3).unwrap();
        assert!(m.k[0][(0, 0)] >= 0.1);
        assert!(m.edges(Condition::One).is_empty());

        let m = synth_network(12, 3, 0.0, 0.0, 3).unwrap();
        for c in Condition::BOTH {
            assert!(m.edges(c).is_empty());
            let k = &m.k[c.index()];
            assert_eq!(k.clone(), DMatrix::from_diagonal(&k.diagonal()));
        }
    }

    #[test]
    fn network_invariants() {
        let m = synth_network(30, 3, 0.3, 0.02, 7).unwrap();
        for c in Condition::BOTH {
            let k = &m.k[c.index()];
            assert_eq!(k, &k.transpose());
            assert!(SymmetricEigen::new(k.clone()).eigenvalues.min() >= EIGEN_FLOOR);
            for i in 0..30 {
                assert!(m.z[i].iter().filter(|&&b| b).count() <= 2);
                assert!(m.z[i].iter().any(|&b| b));
                for j in 0..30 {
                    assert_eq!(m.edge_support[c.index()][(i, j)], i != j && k[(i, j)] != 0.0);
                }
            }
        }
        for q in 0..3 {
            assert!(m.z.iter().any(|row| row[q]));
        }
    }

    #[test]
    fn within_cluster_edges_dominate() {
        for seed in 0..20 {
            let m = synth_network(30, 3, 0.3, 0.02, 7 + seed).unwrap();
            let (within, between): (Vec<_>, Vec<_>) =
                m.edges(Condition::One).into_iter().partition(|&(i, j)| m.same_cluster(i, j));
            assert!(within.len() > between.len(), "seed {seed}: {} vs {}", within.len(), between.len());
        }
    }

    #[test]
    fn sampling_matches_covariance() {
        let model = GroundTruthModel {
            p: 1,
            z: vec![vec![true]],
            k: [DMatrix::from_element(1, 1, 4.0), DMatrix::from_element(1, 1, 4.0)],
            edge_support: [DMatrix::from_element(1, 1, false), DMatrix::from_element(1, 1, false)],
        };
        let x = sample_expression(&model, 10_000, 2, 2).unwrap();
        let v = x.gene_values(0, Condition::One);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((var - 0.25).abs() < 0.05 * 0.25, "variance {var}");
    }

    #[test]
    fn sampling_is_deterministic_and_checks_replicates() {
        let m = synth_network(6, 2, 0.5, 0.1, 1).unwrap();
        let a = sample_expression(&m, 4, 5, 9).unwrap();
        let b = sample_expression(&m, 4, 5, 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_expression(&m, 1, 5, 9),
            Err(Error::TooFewReplicates { condition: 1, .. })
        ));
    }

    #[test]
    fn covariance_converges_with_n() {
        let m = synth_network(8, 2, 0.4, 0.1, 5).unwrap();
        let sigma = m.covariance(Condition::One).unwrap();
        let mut mean_err = Vec::new();
        for n in [100, 1000, 10_000] {
            let mut total = 0.0;
            for seed in 0..5 {
                let x = sample_expression(&m, n, 2, 100 + seed).unwrap();
                total += (empirical_covariance(&x, Condition::One).unwrap() - &sigma).norm();
            }
            mean_err.push(total / 5.0);
        }
        assert!(mean_err[0] > mean_err[1] && mean_err[1] > mean_err[2], "{mean_err:?}");
    }

    #[test]
    fn tsv_round_trip() {
        let m = synth_network(4, 2, 0.5, 0.2, 8).unwrap();
        let x = sample_expression(&m, 3, 3, 4).unwrap();
        let y = parse_expression(&x.to_tsv(), &x.labels_tsv()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn signature_tsv_round_trip() {
        let mut sig = Signature::from_genes(["a", "b"], Provenance::ForestRetained);
        sig.push("c", Provenance::PpiAdded);
        assert!(!sig.push("a", Provenance::PpiAdded));
        assert_eq!(Signature::from_tsv(&sig.to_tsv()).unwrap(), sig);
    }

    #[test]
    fn scaling_gives_unit_pooled_variance() {
        let x = parse_expression(FIXTURE, LABELS).unwrap();
        let s = scale_by_condition(&x);
        let ss: f64 = s.values().row(0).iter().map(|v| v * v).sum();
        assert!((ss / 4.0 - 1.0).abs() < 1e-12);
        assert!(s.values().row(2).iter().all(|&v| v == 0.0));
    }
}
