//! Protein–protein interaction networks and single-round signature expansion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;

use crate::datamodel::{Provenance, Signature};
use crate::error::{Error, Result};
use crate::tsv;

/// Undirected scored network; each edge is stored once under its ordered pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpiNetwork {
    edges: BTreeMap<(String, String), f64>,
    /// Rows dropped because both ends named the same protein.
    pub self_loops_skipped: usize,
    /// Rows merged into an existing edge.
    pub duplicates_collapsed: usize,
}

fn key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl PpiNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an edge, keeping the higher score if the pair already exists.
    /// Returns false for self-loops and duplicates.
    pub fn insert(&mut self, a: &str, b: &str, score: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("edge score {score} outside [0, 1]")));
        }
        if a == b {
            self.self_loops_skipped += 1;
            return Ok(false);
        }
        match self.edges.entry(key(a, b)) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(score);
                Ok(true)
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                self.duplicates_collapsed += 1;
                if score > *e.get() {
                    e.insert(score);
                }
                Ok(false)
            }
        }
    }

    pub fn score(&self, a: &str, b: &str) -> Option<f64> {
        self.edges.get(&key(a, b)).copied()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.edges.iter().map(|((a, b), &s)| (a.as_str(), b.as_str(), s))
    }

    pub fn nodes(&self) -> BTreeSet<&str> {
        self.edges.keys().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect()
    }

    /// Sub-network whose edges have both ends in `genes`.
    pub fn restrict_to(&self, genes: &BTreeSet<String>) -> PpiNetwork {
        PpiNetwork {
            edges: self
                .edges
                .iter()
                .filter(|((a, b), _)| genes.contains(a) && genes.contains(b))
                .map(|(k, &s)| (k.clone(), s))
                .collect(),
            ..Default::default()
        }
    }
}

pub fn load_ppi(path: &Path) -> Result<PpiNetwork> {
    parse_ppi(&tsv::read_to_string(path)?)
}

/// Parses `protein_a protein_b score` rows (tab or space separated).
///
/// Scores are either all in `[0, 1]` or integers `0..=999`; a single value
/// above 1 switches the whole file to the integer convention. A first row
/// whose score is not numeric is taken as a header.
pub fn parse_ppi(text: &str) -> Result<PpiNetwork> {
    const FILE: &str = "ppi";
    let mut rows = Vec::new();
    for (i, (no, line)) in tsv::lines(text).enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::parse(FILE, no, format!("expected 3 fields, found {}", f.len())));
        }
        let score = match f[2].parse::<f64>() {
            Ok(s) => s,
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::parse(FILE, no, format!("not a number: `{}`", f[2]))),
        };
        rows.push((no, f[0], f[1], score));
    }
    let thousandths = rows.iter().any(|r| r.3 > 1.0);
    let mut net = PpiNetwork::new();
    for (no, a, b, raw) in rows {
        let score = if thousandths {
            if !(0.0..=999.0).contains(&raw) || raw.fract() != 0.0 {
                return Err(Error::parse(FILE, no, format!("score {raw} is not an integer in 0..=999")));
            }
            raw / 1000.0
        } else {
            if !(0.0..=1.0).contains(&raw) {
                return Err(Error::parse(FILE, no, format!("score {raw} outside [0, 1]")));
            }
            raw
        };
        net.insert(a, b, score)?;
    }
    if net.self_loops_skipped > 0 {
        warn!("skipped {} self-loop row(s) in PPI file", net.self_loops_skipped);
    }
    if net.duplicates_collapsed > 0 {
        warn!(
            "collapsed {} duplicate PPI row(s), keeping the highest score",
            net.duplicates_collapsed
        );
    }
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionConfig {
    pub threshold: f64,
    pub min_links: usize,
    pub max_added: Option<usize>,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.9,
            min_links: 1,
            max_added: None,
        }
    }
}

/// Adds every outside gene with at least `min_links` links of score
/// `≥ threshold` into the signature. One round only.
///
/// With `max_added`, candidates are ranked by number of qualifying links,
/// then summed score, then id.
pub fn expand_signature(sig: &Signature, ppi: &PpiNetwork, cfg: &ExpansionConfig) -> Result<Signature> {
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "PPI threshold {} outside (0, 1]",
            cfg.threshold
        )));
    }
    if cfg.min_links == 0 {
        return Err(Error::InvalidArgument("min_links must be at least 1".into()));
    }
    // candidate -> (links, summed score)
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (a, b, s) in ppi.edges() {
        if s < cfg.threshold {
            continue;
        }
        let partner = match (sig.contains(a), sig.contains(b)) {
            (true, false) => b,
            (false, true) => a,
            _ => continue,
        };
        let t = tally.entry(partner).or_insert((0, 0.0));
        t.0 += 1;
        t.1 += s;
    }
    let mut candidates: Vec<(&str, usize, f64)> = tally
        .into_iter()
        .filter(|(_, (links, _))| *links >= cfg.min_links)
        .map(|(g, (l, s))| (g, l, s))
        .collect();
    candidates.sort_by(|x, y| y.1.cmp(&x.1).then(y.2.total_cmp(&x.2)).then(x.0.cmp(y.0)));
    if let Some(max) = cfg.max_added {
        candidates.truncate(max);
    }
    candidates.sort_by(|x, y| x.0.cmp(y.0));

    let mut out = sig.clone();
    for (g, _, _) in candidates {
        out.push(g, Provenance::PpiAdded);
    }
    Ok(out)
}
