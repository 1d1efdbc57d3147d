//! Pathway over-representation analysis and the derivation of core pathways.
//!
//! Significant pathways are compared through the Jaccard distance between
//! their gene-membership columns and grouped by Ward agglomerative
//! clustering (Lance–Williams recurrence on squared distances, the
//! "Ward.D2" convention). Each group of pathways defines one, possibly
//! overlapping, gene cluster restricted to the signature.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use statrs::function::factorial::ln_factorial;

use crate::datamodel::Signature;
use crate::error::{Error, Result};
use crate::tsv;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pathway {
    pub name: String,
    pub description: String,
    pub genes: BTreeSet<String>,
}

/// Named gene sets over a universe of `M` measurable genes.
#[derive(Debug, Clone)]
pub struct PathwayCatalog {
    pathways: Vec<Pathway>,
    universe: BTreeSet<String>,
    index: HashMap<String, usize>,
}

impl PathwayCatalog {
    /// Restricts every pathway to the universe; pathways left empty are dropped.
    pub fn new(pathways: Vec<Pathway>, universe: BTreeSet<String>) -> Result<Self> {
        let mut kept = Vec::with_capacity(pathways.len());
        let mut index = HashMap::new();
        for mut pw in pathways {
            if index.contains_key(&pw.name) {
                return Err(Error::InvalidArgument(format!("duplicate pathway name `{}`", pw.name)));
            }
            let before = pw.genes.len();
            pw.genes.retain(|g| universe.contains(g));
            if pw.genes.len() < before {
                warn!(
                    "pathway `{}`: {} gene(s) outside the universe ignored",
                    pw.name,
                    before - pw.genes.len()
                );
            }
            if pw.genes.is_empty() {
                warn!("pathway `{}` has no gene in the universe; dropped", pw.name);
                continue;
            }
            index.insert(pw.name.clone(), kept.len());
            kept.push(pw);
        }
        Ok(Self {
            pathways: kept,
            universe,
            index,
        })
    }

    pub fn load(gmt: &Path, universe: &Path) -> Result<Self> {
        let pathways = parse_gmt(&tsv::read_to_string(gmt)?)?;
        let universe = parse_universe(&tsv::read_to_string(universe)?);
        Self::new(pathways, universe)
    }

    pub fn pathways(&self) -> &[Pathway] {
        &self.pathways
    }

    pub fn universe(&self) -> &BTreeSet<String> {
        &self.universe
    }

    pub fn m(&self) -> usize {
        self.universe.len()
    }

    pub fn get(&self, name: &str) -> Option<&Pathway> {
        self.index.get(name).map(|&i| &self.pathways[i])
    }
}

/// GMT: `name<TAB>description<TAB>gene1<TAB>gene2...`
pub fn parse_gmt(text: &str) -> Result<Vec<Pathway>> {
    let mut out = Vec::new();
    for (line_no, line) in tsv::lines(text) {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::parse("gmt", line_no, "expected name, description and at least one gene"));
        }
        out.push(Pathway {
            name: fields[0].to_string(),
            description: fields[1].to_string(),
            genes: fields[2..].iter().filter(|g| !g.is_empty()).map(|g| g.to_string()).collect(),
        });
    }
    Ok(out)
}

/// One gene id per line.
pub fn parse_universe(text: &str) -> BTreeSet<String> {
    tsv::lines(text).map(|(_, l)| l.trim().to_string()).collect()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn check_hypergeom_args(m: i64, k: i64, n: i64) -> Result<()> {
    if m < 0 || k < 0 || n < 0 {
        return Err(Error::InvalidArgument(format!(
            "negative hypergeometric argument (M={m}, K={k}, n={n})"
        )));
    }
    if k > m || n > m {
        return Err(Error::InvalidArgument(format!("need K, n <= M (M={m}, K={k}, n={n})")));
    }
    Ok(())
}

/// `P(Y = y)` for `y` common genes between a signature of size `n` and a
/// pathway of size `k`, both drawn from `m` genes.
pub fn hypergeom_pmf(y: i64, m: i64, k: i64, n: i64) -> Result<f64> {
    check_hypergeom_args(m, k, n)?;
    if y < 0 {
        return Err(Error::InvalidArgument(format!("negative overlap y={y}")));
    }
    if y > n.min(k) || k - y > m - n {
        return Ok(0.0);
    }
    // the pmf is symmetric in k and n; evaluate one fixed order so it is bitwise so too
    let (k, n) = (k.min(n), k.max(n));
    let (y, m, k, n) = (y as u64, m as u64, k as u64, n as u64);
    Ok((ln_choose(n, y) + ln_choose(m - n, k - y) - ln_choose(m, k)).exp())
}

/// Upper tail `P(Y >= y)`.
pub fn hypergeom_upper_tail(y: i64, m: i64, k: i64, n: i64) -> Result<f64> {
    check_hypergeom_args(m, k, n)?;
    let lower = (n + k - m).max(0);
    if y <= lower {
        return Ok(1.0);
    }
    let upper = n.min(k);
    let mut total = 0.0;
    for j in y..=upper {
        total += hypergeom_pmf(j, m, k, n)?;
    }
    Ok(total.min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentResult {
    pub pathway: String,
    pub k: usize,
    pub y: usize,
    pub n: usize,
    pub m: usize,
    pub p_value: f64,
}

const ENRICHMENT_HEADER: [&str; 6] = ["pathway", "K", "y", "n", "M", "p_value"];

pub fn enrichment_to_tsv(results: &[EnrichmentResult]) -> String {
    let mut out = ENRICHMENT_HEADER.join("\t");
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.pathway,
            r.k,
            r.y,
            r.n,
            r.m,
            tsv::fmt_sig(r.p_value)
        ));
    }
    out
}

pub fn enrichment_from_tsv(text: &str) -> Result<Vec<EnrichmentResult>> {
    const FILE: &str = "enrichment";
    let mut lines = tsv::lines(text);
    tsv::expect_header(FILE, lines.next().map(|l| l.1), &ENRICHMENT_HEADER)?;
    lines
        .map(|(no, line)| {
            let f = tsv::fields(FILE, no, line, 6)?;
            Ok(EnrichmentResult {
                pathway: f[0].to_string(),
                k: tsv::parse_usize(FILE, no, f[1])?,
                y: tsv::parse_usize(FILE, no, f[2])?,
                n: tsv::parse_usize(FILE, no, f[3])?,
                m: tsv::parse_usize(FILE, no, f[4])?,
                p_value: tsv::parse_f64(FILE, no, f[5])?,
            })
        })
        .collect()
}

fn restrict_to_universe(sig: &Signature, catalog: &PathwayCatalog) -> Result<BTreeSet<String>> {
    let mut kept = BTreeSet::new();
    for g in sig.iter() {
        if catalog.universe.contains(&g.gene) {
            kept.insert(g.gene.clone());
        } else {
            warn!("signature gene `{}` is not in the pathway universe; ignored", g.gene);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptySignature);
    }
    Ok(kept)
}

fn enrichment_for(pathway: &Pathway, sig: &BTreeSet<String>, m: usize) -> Result<EnrichmentResult> {
    let y = pathway.genes.intersection(sig).count();
    let (k, n) = (pathway.genes.len(), sig.len());
    Ok(EnrichmentResult {
        pathway: pathway.name.clone(),
        k,
        y,
        n,
        m,
        p_value: hypergeom_upper_tail(y as i64, m as i64, k as i64, n as i64)?,
    })
}

/// Over-representation p-value of one pathway.
pub fn enrichment_pvalue(pathway: &Pathway, sig: &Signature, catalog: &PathwayCatalog) -> Result<EnrichmentResult> {
    let restricted = restrict_to_universe(sig, catalog)?;
    enrichment_for(pathway, &restricted, catalog.m())
}

/// Tests every catalog pathway, in catalog order.
pub fn enrich_all(sig: &Signature, catalog: &PathwayCatalog) -> Result<Vec<EnrichmentResult>> {
    let restricted = restrict_to_universe(sig, catalog)?;
    catalog
        .pathways
        .iter()
        .map(|pw| enrichment_for(pw, &restricted, catalog.m()))
        .collect()
}

/// Pathways with `p_value < level`, ascending by p-value then name.
pub fn significant_pathways(results: &[EnrichmentResult], level: f64) -> Result<Vec<EnrichmentResult>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("enrichment level {level} outside (0, 1)")));
    }
    let mut out: Vec<_> = results.iter().filter(|r| r.p_value < level).cloned().collect();
    out.sort_by(|a, b| a.p_value.total_cmp(&b.p_value).then_with(|| a.pathway.cmp(&b.pathway)));
    Ok(out)
}

/// Binary genes × pathways matrix over the genes of the given pathways.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    /// Row labels, sorted.
    pub genes: Vec<String>,
    /// Column labels, in input order.
    pub pathways: Vec<String>,
    /// `entries[gene][pathway]`.
    pub entries: Vec<Vec<bool>>,
}

impl MembershipMatrix {
    pub fn column(&self, j: usize) -> Vec<bool> {
        self.entries.iter().map(|row| row[j]).collect()
    }

    /// Pairwise Jaccard distances between columns.
    pub fn jaccard_distances(&self) -> Result<DMatrix<f64>> {
        let cols: Vec<Vec<bool>> = (0..self.pathways.len()).map(|j| self.column(j)).collect();
        let n = cols.len();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let v = jaccard_distance(&cols[i], &cols[j])?;
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        Ok(d)
    }
}

/// Rows are the genes belonging to at least one of `pathways`.
pub fn membership_matrix(pathways: &[&Pathway]) -> Result<MembershipMatrix> {
    if pathways.is_empty() {
        return Err(Error::InvalidArgument("membership matrix needs at least one pathway".into()));
    }
    let genes: BTreeSet<&String> = pathways.iter().flat_map(|p| p.genes.iter()).collect();
    let entries = genes
        .iter()
        .map(|g| pathways.iter().map(|p| p.genes.contains(*g)).collect())
        .collect();
    Ok(MembershipMatrix {
        genes: genes.into_iter().cloned().collect(),
        pathways: pathways.iter().map(|p| p.name.clone()).collect(),
        entries,
    })
}

/// `1 − |a ∧ b| / |a ∨ b|`.
pub fn jaccard_distance(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("Jaccard columns differ in length".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::InvalidArgument("Jaccard distance of two empty columns".into()));
    }
    Ok(1.0 - inter as f64 / union as f64)
}

/// One agglomeration step. Leaves are `0..n`; the cluster created by merge
/// `k` has id `n + k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Leaf groups after undoing the last `q - 1` merges, each sorted, ordered
    /// by smallest leaf.
    pub fn cut(&self, q: usize) -> Result<Vec<Vec<usize>>> {
        if q == 0 || q > self.n_leaves {
            return Err(Error::InvalidArgument(format!(
                "cannot cut {} leaves into {q} clusters",
                self.n_leaves
            )));
        }
        let mut members: Vec<Option<Vec<usize>>> = (0..self.n_leaves).map(|i| Some(vec![i])).collect();
        for m in &self.merges[..self.n_leaves - q] {
            let mut merged = members[m.left].take().expect("cluster merged twice");
            merged.extend(members[m.right].take().expect("cluster merged twice"));
            merged.sort_unstable();
            members.push(Some(merged));
        }
        let mut groups: Vec<Vec<usize>> = members.into_iter().flatten().collect();
        groups.sort_by_key(|g| g[0]);
        Ok(groups)
    }

    /// Cluster count at the largest relative gap between consecutive merge
    /// heights, `(h[k+1] − h[k]) / h[k+1]`.
    pub fn suggest_q(&self) -> usize {
        let h: Vec<f64> = self.merges.iter().map(|m| m.height).collect();
        let mut best = (0.0, 1);
        for k in 0..h.len().saturating_sub(1) {
            if h[k + 1] <= 0.0 {
                continue;
            }
            let gap = (h[k + 1] - h[k]) / h[k + 1];
            // merges 0..=k applied leaves n − k − 1 clusters
            if gap > best.0 {
                best = (gap, self.n_leaves - k - 1);
            }
        }
        best.1
    }
}

/// Ward agglomerative clustering of a dissimilarity matrix.
///
/// Squared distances are updated with the Ward Lance–Williams coefficients;
/// merge heights are the square roots. Ties go to the lexicographically
/// smallest pair of cluster ids.
pub fn ward_cluster(d: &DMatrix<f64>) -> Result<Dendrogram> {
    let n = d.nrows();
    if !d.is_square() || n < 2 {
        return Err(Error::InvalidArgument("distance matrix must be square with size >= 2".into()));
    }
    for i in 0..n {
        if d[(i, i)] != 0.0 {
            return Err(Error::InvalidArgument("distance matrix must have a zero diagonal".into()));
        }
        for j in 0..i {
            if d[(i, j)] != d[(j, i)] {
                return Err(Error::NonSymmetric);
            }
            if !(d[(i, j)] >= 0.0) {
                return Err(Error::InvalidArgument("distances must be non-negative".into()));
            }
        }
    }

    let total = 2 * n - 1;
    let mut d2 = DMatrix::zeros(total, total);
    for i in 0..n {
        for j in 0..n {
            d2[(i, j)] = d[(i, j)] * d[(i, j)];
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);

    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                let v = d2[(a, b)];
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, a, b));
                }
            }
        }
        let (v, a, b) = best.expect("at least two active clusters");
        let new = n + step;
        let (na, nb) = (size[a] as f64, size[b] as f64);
        active.retain(|&x| x != a && x != b);
        for &k in &active {
            let nk = size[k] as f64;
            let u = ((na + nk) * d2[(a, k)] + (nb + nk) * d2[(b, k)] - nk * v) / (na + nb + nk);
            d2[(new, k)] = u;
            d2[(k, new)] = u;
        }
        size[new] = size[a] + size[b];
        active.push(new);
        merges.push(Merge {
            left: a,
            right: b,
            height: v.sqrt(),
            size: size[new],
        });
    }
    Ok(Dendrogram { n_leaves: n, merges })
}

/// Overlapping gene clusters `Z` over the signature genes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Row labels: the signature genes, in signature order.
    pub genes: Vec<String>,
    /// `z[i][q]` is true iff gene `i` belongs to core pathway `q`.
    pub z: Vec<Vec<bool>>,
    /// Names of the pathways merged into each core pathway.
    pub member_pathways: Vec<Vec<String>>,
}

const CLUSTER_HEADER: [&str; 3] = ["core_pathway", "member_pathways", "genes"];

impl ClusterAssignment {
    /// No clusters at all: every gene takes the default penalty.
    pub fn empty(genes: Vec<String>) -> Self {
        let z = vec![Vec::new(); genes.len()];
        Self {
            genes,
            z,
            member_pathways: Vec::new(),
        }
    }

    pub fn q(&self) -> usize {
        self.member_pathways.len()
    }

    pub fn cluster_genes(&self, q: usize) -> Vec<String> {
        self.genes
            .iter()
            .zip(&self.z)
            .filter(|(_, row)| row[q])
            .map(|(g, _)| g.clone())
            .collect()
    }

    pub fn is_clustered(&self, gene: usize) -> bool {
        self.z.get(gene).is_some_and(|row| row.iter().any(|&b| b))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = CLUSTER_HEADER.join("\t");
        out.push('\n');
        for q in 0..self.q() {
            out.push_str(&format!(
                "core{}\t{}\t{}\n",
                q + 1,
                self.member_pathways[q].join(";"),
                self.cluster_genes(q).join(";")
            ));
        }
        out
    }

    /// Rebuilds `Z` over the genes of `sig` from a cluster TSV.
    pub fn from_tsv(text: &str, sig: &Signature) -> Result<Self> {
        const FILE: &str = "clusters";
        let mut lines = tsv::lines(text);
        tsv::expect_header(FILE, lines.next().map(|l| l.1), &CLUSTER_HEADER)?;
        let genes = sig.ids();
        let row_of: HashMap<&str, usize> = genes.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let mut columns = Vec::new();
        let mut member_pathways = Vec::new();
        for (no, line) in lines {
            let f = tsv::fields(FILE, no, line, 3)?;
            let mut col = vec![false; genes.len()];
            for g in f[2].split(';').filter(|g| !g.is_empty()) {
                let &i = row_of
                    .get(g)
                    .ok_or_else(|| Error::parse(FILE, no, format!("gene `{g}` is not in the signature")))?;
                col[i] = true;
            }
            if !col.iter().any(|&b| b) {
                return Err(Error::parse(FILE, no, "empty core pathway"));
            }
            columns.push(col);
            member_pathways.push(f[1].split(';').map(str::to_string).collect());
        }
        let z = (0..genes.len()).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
        Ok(Self {
            genes,
            z,
            member_pathways,
        })
    }
}

/// Cuts the dendrogram of `significant` pathways into `q` core pathways.
///
/// Core pathway `k` covers the union of its member pathways' genes,
/// intersected with the signature. Signature genes outside every
/// significant pathway belong to no cluster.
pub fn cut_core_pathways(
    dendrogram: &Dendrogram,
    q: usize,
    significant: &[&Pathway],
    sig: &Signature,
) -> Result<ClusterAssignment> {
    if significant.len() != dendrogram.n_leaves {
        return Err(Error::InvalidArgument(format!(
            "dendrogram has {} leaves but {} pathways were given",
            dendrogram.n_leaves,
            significant.len()
        )));
    }
    let groups = dendrogram.cut(q)?;
    let genes = sig.ids();
    let mut z = vec![vec![false; groups.len()]; genes.len()];
    let mut member_pathways = Vec::with_capacity(groups.len());
    for (k, group) in groups.iter().enumerate() {
        let mut any = false;
        for (i, g) in genes.iter().enumerate() {
            if group.iter().any(|&leaf| significant[leaf].genes.contains(g)) {
                z[i][k] = true;
                any = true;
            }
        }
        let names: Vec<String> = group.iter().map(|&leaf| significant[leaf].name.clone()).collect();
        if !any {
            return Err(Error::InvalidArgument(format!(
                "core pathway made of {names:?} shares no gene with the signature"
            )));
        }
        member_pathways.push(names);
    }
    Ok(ClusterAssignment {
        genes,
        z,
        member_pathways,
    })
}
