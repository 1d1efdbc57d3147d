//! Joint estimation of two sparse concentration matrices.
//!
//! The estimator maximizes
//!
//! ```text
//! Σ_c (n_c/2)(log det K_c − tr(S_c K_c)) − λ Σ_{i≠j} ρ_ij (‖[u_ij]₊‖ + ‖[u_ij]₋‖),
//!     u_ij = (K1_ij, K2_ij)
//! ```
//!
//! where the weights `ρ` come from the core-pathway clusters. The sum runs
//! over ordered pairs, so each unordered edge is penalized twice.

mod oracle;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::CovariancePair;
use crate::enrich::ClusterAssignment;
use crate::error::{Error, Result};
use crate::tsv;

pub use oracle::oracle_solve_small;

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyWeights {
    /// Symmetric, nonnegative; the diagonal is ignored.
    pub rho: DMatrix<f64>,
    pub lambda: f64,
    pub lambda_in: f64,
    pub lambda_out: f64,
}

impl PenaltyWeights {
    /// `ρ ≡ 1`: the structure-free penalty.
    pub fn uniform(p: usize, lambda: f64) -> Self {
        Self {
            rho: DMatrix::from_element(p, p, 1.0),
            lambda,
            lambda_in: 1.0,
            lambda_out: 1.0,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    pub fn p(&self) -> usize {
        self.rho.nrows()
    }
}

/// Cluster-structured weights for `p` genes; rows of `z` cover the first genes.
///
/// For two clustered genes,
/// `ρ_ij = Σ_q Z_iq Z_jq / λ_in + Σ_{q≠ℓ} Z_iq Z_jℓ / λ_out`; if either
/// gene is in no cluster, `ρ_ij = 1`. `lambda` starts at 1.
pub fn penalty_weights(z: &ClusterAssignment, lambda_in: f64, lambda_out: f64, p: usize) -> Result<PenaltyWeights> {
    if !(lambda_in > 0.0 && lambda_out > 0.0) || !lambda_in.is_finite() || !lambda_out.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda_in ({lambda_in}) and lambda_out ({lambda_out}) must be positive"
        )));
    }
    if z.z.len() > p {
        return Err(Error::InvalidArgument(format!(
            "cluster assignment has {} genes, more than p = {p}",
            z.z.len()
        )));
    }
    let member = |i: usize| -> Vec<usize> {
        z.z.get(i)
            .map(|row| row.iter().enumerate().filter(|(_, &b)| b).map(|(q, _)| q).collect())
            .unwrap_or_default()
    };
    let memberships: Vec<Vec<usize>> = (0..p).map(member).collect();
    let rho = DMatrix::from_fn(p, p, |i, j| {
        let (a, b) = (&memberships[i], &memberships[j]);
        if a.is_empty() || b.is_empty() {
            return 1.0;
        }
        let mut r = 0.0;
        for &q in a {
            for &l in b {
                r += if q == l { 1.0 / lambda_in } else { 1.0 / lambda_out };
            }
        }
        r
    });
    Ok(PenaltyWeights {
        rho,
        lambda: 1.0,
        lambda_in,
        lambda_out,
    })
}

/// `‖[u]₊‖₂ + ‖[u]₋‖₂`.
pub fn coop_penalty(u: [f64; 2]) -> f64 {
    let pos = u[0].max(0.0).hypot(u[1].max(0.0));
    let neg = (-u[0]).max(0.0).hypot((-u[1]).max(0.0));
    pos + neg
}

/// `argmin_v ½‖v − u‖² + t·coop_penalty(v)`.
///
/// The positive and negative parts of `u` are group soft-thresholded
/// separately; a part whose norm is at most `t` becomes exactly zero.
pub fn prox_coop(u: [f64; 2], t: f64) -> [f64; 2] {
    let shrink = |part: [f64; 2]| -> [f64; 2] {
        let norm = part[0].hypot(part[1]);
        if norm <= t {
            [0.0, 0.0]
        } else {
            let f = 1.0 - t / norm;
            [f * part[0], f * part[1]]
        }
    };
    let pos = shrink([u[0].max(0.0), u[1].max(0.0)]);
    let neg = shrink([(-u[0]).max(0.0), (-u[1]).max(0.0)]);
    [pos[0] - neg[0], pos[1] - neg[1]]
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// How the two conditions share the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Cooperative penalty on `(K1_ij, K2_ij)`.
    Joint,
    /// Separate lasso penalties `|K1_ij| + |K2_ij|`: two independent fits.
    Independent,
}

impl Coupling {
    fn penalty(self, u: [f64; 2]) -> f64 {
        match self {
            Coupling::Joint => coop_penalty(u),
            Coupling::Independent => u[0].abs() + u[1].abs(),
        }
    }

    fn prox(self, u: [f64; 2], t: f64) -> [f64; 2] {
        match self {
            Coupling::Joint => prox_coop(u, t),
            Coupling::Independent => [soft(u[0], t), soft(u[1], t)],
        }
    }
}

fn log_det(k: &DMatrix<f64>) -> Result<f64> {
    let chol = k.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn trace_product(s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    s.iter().zip(k.iter()).map(|(a, b)| a * b).sum()
}

/// `(n/2)(log det K − tr(S K))`, the Gaussian log-likelihood without constant.
pub fn log_likelihood(k: &DMatrix<f64>, s: &DMatrix<f64>, n: usize) -> Result<f64> {
    Ok(0.5 * n as f64 * (log_det(k)? - trace_product(s, k)))
}

fn penalty_term(k: &[DMatrix<f64>; 2], w: &PenaltyWeights, coupling: Coupling) -> f64 {
    let p = k[0].nrows();
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                total += w.rho[(i, j)] * coupling.penalty([k[0][(i, j)], k[1][(i, j)]]);
            }
        }
    }
    w.lambda * total
}

fn check_dims(k: &[DMatrix<f64>; 2], s: &CovariancePair, w: &PenaltyWeights) -> Result<()> {
    let p = s.p();
    if k.iter().any(|m| m.nrows() != p || m.ncols() != p) || w.p() != p {
        return Err(Error::InvalidArgument("dimension mismatch between K, S and weights".into()));
    }
    Ok(())
}

/// Penalized log-likelihood of a concentration pair.
pub fn objective(k: &[DMatrix<f64>; 2], s: &CovariancePair, w: &PenaltyWeights) -> Result<f64> {
    check_dims(k, s, w)?;
    let ll = log_likelihood(&k[0], &s.s[0], s.n[0])? + log_likelihood(&k[1], &s.s[1], s.n[1])?;
    Ok(ll - penalty_term(k, w, Coupling::Joint))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Stop when the KKT residual falls below this.
    pub kkt_tol: f64,
    /// Added to `S_ii` in the diagonal starting point.
    pub init_eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            kkt_tol: 1e-6,
            init_eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationPair {
    pub k: [DMatrix<f64>; 2],
    /// Objective after every accepted iterate, starting point first.
    pub objective_trace: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl ConcentrationPair {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the initial objective")
    }

    pub fn diagnostics(&self) -> SolverDiagnostics {
        SolverDiagnostics {
            iterations: self.iterations,
            final_objective: self.objective(),
            kkt_residual: self.kkt_residual,
            converged: self.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub final_objective: f64,
    pub kkt_residual: f64,
    pub converged: bool,
}

impl SolverDiagnostics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct serializes");
        s.push('\n');
        s
    }
}

/// Maximizes the cooperative objective by proximal gradient ascent.
pub fn solve_multitask(s: &CovariancePair, w: &PenaltyWeights, cfg: &SolverConfig) -> Result<ConcentrationPair> {
    proximal_ascent(s, w, cfg, Coupling::Joint)
}

/// Same solver with separate lasso penalties, i.e. two independent fits
/// sharing `λ` and `ρ`.
pub fn solve_independent(s: &CovariancePair, w: &PenaltyWeights, cfg: &SolverConfig) -> Result<ConcentrationPair> {
    proximal_ascent(s, w, cfg, Coupling::Independent)
}

#[derive(Clone)]
struct State {
    k: [DMatrix<f64>; 2],
    /// Gradient of the smooth part, exactly symmetric.
    grad: [DMatrix<f64>; 2],
    objective: f64,
}

/// Objective and gradient at `k`; `None` unless both matrices are PD.
fn evaluate(k: [DMatrix<f64>; 2], s: &CovariancePair, w: &PenaltyWeights, coupling: Coupling) -> Option<State> {
    let mut smooth = 0.0;
    let mut grad: [DMatrix<f64>; 2] = [DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)];
    for c in 0..2 {
        let chol = k[c].clone().cholesky()?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let half_n = 0.5 * s.n[c] as f64;
        smooth += half_n * (log_det - trace_product(&s.s[c], &k[c]));
        let mut g = (chol.inverse() - &s.s[c]) * half_n;
        for i in 0..g.nrows() {
            for j in 0..i {
                let m = 0.5 * (g[(i, j)] + g[(j, i)]);
                g[(i, j)] = m;
                g[(j, i)] = m;
            }
        }
        grad[c] = g;
    }
    let objective = smooth - penalty_term(&k, w, coupling);
    Some(State { k, grad, objective })
}

/// `prox_{step·λρ}(K + step·G)`, diagonal unpenalized.
fn prox_step(
    k: &[DMatrix<f64>; 2],
    g: &[DMatrix<f64>; 2],
    step: f64,
    w: &PenaltyWeights,
    coupling: Coupling,
) -> [DMatrix<f64>; 2] {
    let p = k[0].nrows();
    let mut out = [DMatrix::zeros(p, p), DMatrix::zeros(p, p)];
    for i in 0..p {
        for c in 0..2 {
            out[c][(i, i)] = k[c][(i, i)] + step * g[c][(i, i)];
        }
        for j in 0..i {
            let u = [k[0][(i, j)] + step * g[0][(i, j)], k[1][(i, j)] + step * g[1][(i, j)]];
            let v = coupling.prox(u, step * w.lambda * w.rho[(i, j)]);
            for c in 0..2 {
                out[c][(i, j)] = v[c];
                out[c][(j, i)] = v[c];
            }
        }
    }
    out
}

fn kkt_residual(k: &[DMatrix<f64>; 2], g: &[DMatrix<f64>; 2], w: &PenaltyWeights, coupling: Coupling) -> f64 {
    let fixed = prox_step(k, g, 1.0, w, coupling);
    (0..2).map(|c| (&fixed[c] - &k[c]).amax()).fold(0.0, f64::max)
}

/// Rounding allowance when comparing successive objective values.
const ASCENT_SLACK: f64 = 1e-12;

/// Gradient restart test: the prox step from the extrapolated point `y`
/// must not oppose the momentum direction `next − x`.
fn uphill(next: &State, y: &State, x: &State) -> bool {
    let mut dot = 0.0;
    for c in 0..2 {
        dot += trace_product(&(&next.k[c] - &y.k[c]), &(&next.k[c] - &x.k[c]));
    }
    dot >= 0.0
}

/// Halves `step` until the prox step from `from` is positive definite and
/// the smooth part passes the sufficient-increase condition
/// `f(next) ≥ f(from) + ⟨∇f(from), d⟩ − ‖d‖²/(2·step)`.
///
/// Because the smooth part is concave, the curvature test
/// `⟨∇f(next) − ∇f(from), d⟩ ≥ −‖d‖²/(2·step)` implies that condition. It
/// is used instead of comparing function values, which lose all precision
/// once the steps become tiny.
fn backtrack(
    from: &State,
    step: &mut f64,
    s: &CovariancePair,
    w: &PenaltyWeights,
    coupling: Coupling,
) -> Option<State> {
    while *step >= 1e-30 {
        let cand = prox_step(&from.k, &from.grad, *step, w, coupling);
        if let Some(next) = evaluate(cand, s, w, coupling) {
            let (mut curvature, mut sq) = (0.0, 0.0);
            for c in 0..2 {
                let d = &next.k[c] - &from.k[c];
                curvature += trace_product(&(&next.grad[c] - &from.grad[c]), &d);
                sq += d.norm_squared();
            }
            if curvature >= -sq / (2.0 * *step) {
                return Some(next);
            }
        }
        *step *= 0.5;
    }
    None
}

fn proximal_ascent(
    s: &CovariancePair,
    w: &PenaltyWeights,
    cfg: &SolverConfig,
    coupling: Coupling,
) -> Result<ConcentrationPair> {
    let p = s.p();
    if w.p() != p {
        return Err(Error::InvalidArgument("weights and covariance sizes differ".into()));
    }
    if !(w.lambda >= 0.0) || !w.lambda.is_finite() || w.rho.iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::InvalidArgument("penalty weights must be finite and nonnegative".into()));
    }
    for c in 0..2 {
        if let Some(i) = (0..p).find(|&i| !(s.s[c][(i, i)] > 0.0)) {
            return Err(Error::ZeroVariance(format!("#{}", i + 1)));
        }
    }

    let init = std::array::from_fn(|c| {
        DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 / (s.s[c][(i, i)] + cfg.init_eps) } else { 0.0 })
    });
    let mut x = evaluate(init, s, w, coupling).ok_or(Error::NotPositiveDefinite)?;
    // extrapolated point; `None` means y = x
    let mut y: Option<State> = None;
    let mut momentum = 1.0f64;
    let mut trace = vec![x.objective];
    let mut step = 1.0;
    let mut kkt = kkt_residual(&x.k, &x.grad, w, coupling);
    let mut iterations = 0;

    while kkt >= cfg.kkt_tol && iterations < cfg.max_iter {
        iterations += 1;
        let accelerated = y.is_some();
        let from = y.as_ref().unwrap_or(&x);
        step *= 2.0;
        let next = match backtrack(from, &mut step, s, w, coupling) {
            // a plain prox step ascends up to rounding
            Some(next) if !accelerated => {
                if next.objective < x.objective - ASCENT_SLACK * x.objective.abs().max(1.0) {
                    break;
                }
                next
            }
            // keep a momentum step only if it ascends and still points uphill
            Some(next) if next.objective >= x.objective && uphill(&next, from, &x) => next,
            Some(_) | None if accelerated => {
                y = None;
                momentum = 1.0;
                continue;
            }
            // no ascent step from x exists at machine precision
            _ => break,
        };
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_momentum;
        let extrapolated: [DMatrix<f64>; 2] = std::array::from_fn(|c| &next.k[c] + (&next.k[c] - &x.k[c]) * beta);
        x = next;
        trace.push(x.objective);
        kkt = kkt_residual(&x.k, &x.grad, w, coupling);
        y = None;
        momentum = next_momentum;
        if beta > 0.0 {
            // an extrapolated point outside the PD cone restarts the momentum
            y = evaluate(extrapolated, s, w, coupling);
            if y.is_none() {
                momentum = 1.0;
            }
        }
    }
    let converged = kkt < cfg.kkt_tol;
    if !converged {
        warn!("solver stopped after {iterations} iterations without converging (KKT residual {kkt:.3e})");
    }
    Ok(ConcentrationPair {
        k: x.k,
        objective_trace: trace,
        kkt_residual: kkt,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkEdge {
    pub i: usize,
    pub j: usize,
    pub present: [bool; 2],
    /// `−K_ij / √(K_ii K_jj)` per condition (0 where absent).
    pub pcor: [f64; 2],
    /// −1, 0 or 1 per condition.
    pub sign: [i8; 2],
}

impl NetworkEdge {
    pub fn in_both(&self) -> bool {
        self.present[0] && self.present[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredNetwork {
    pub genes: Vec<String>,
    /// Sorted by `(i, j)` with `i < j`.
    pub edges: Vec<NetworkEdge>,
}

fn sign_of(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Edges where `|K_ij| > tol` in at least one condition.
pub fn extract_network(k: &[DMatrix<f64>; 2], genes: &[String], tol: f64) -> Result<InferredNetwork> {
    let p = k[0].nrows();
    if genes.len() != p || k[1].nrows() != p {
        return Err(Error::InvalidArgument("gene list and matrix sizes differ".into()));
    }
    let mut edges = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let present = [k[0][(i, j)].abs() > tol, k[1][(i, j)].abs() > tol];
            if !present[0] && !present[1] {
                continue;
            }
            let pcor = std::array::from_fn(|c| {
                if present[c] {
                    (-k[c][(i, j)] / (k[c][(i, i)] * k[c][(j, j)]).sqrt()).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            });
            edges.push(NetworkEdge {
                i,
                j,
                present,
                pcor,
                sign: std::array::from_fn(|c| sign_of(pcor[c])),
            });
        }
    }
    Ok(InferredNetwork {
        genes: genes.to_vec(),
        edges,
    })
}

const NETWORK_HEADER: [&str; 6] = ["gene_i", "gene_j", "in_cond1", "in_cond2", "pcor1", "pcor2"];

impl InferredNetwork {
    pub fn to_tsv(&self) -> String {
        let mut out = NETWORK_HEADER.join("\t");
        out.push('\n');
        for e in &self.edges {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                self.genes[e.i],
                self.genes[e.j],
                u8::from(e.present[0]),
                u8::from(e.present[1]),
                tsv::fmt_sig(e.pcor[0]),
                tsv::fmt_sig(e.pcor[1]),
            ));
        }
        out
    }

    /// Parses a network TSV whose genes are all in `genes`.
    pub fn from_tsv(text: &str, genes: &[String]) -> Result<Self> {
        const FILE: &str = "network";
        let mut lines = tsv::lines(text);
        tsv::expect_header(FILE, lines.next().map(|l| l.1), &NETWORK_HEADER)?;
        let index = |no: usize, g: &str| {
            genes
                .iter()
                .position(|x| x == g)
                .ok_or_else(|| Error::parse(FILE, no, format!("gene `{g}` is not in the signature")))
        };
        let flag = |no: usize, s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::parse(FILE, no, format!("expected 0 or 1, found `{s}`"))),
        };
        let mut edges = Vec::new();
        for (no, line) in lines {
            let f = tsv::fields(FILE, no, line, 6)?;
            let (i, j) = (index(no, f[0])?, index(no, f[1])?);
            if i >= j {
                return Err(Error::parse(FILE, no, "edge endpoints out of order"));
            }
            let present = [flag(no, f[2])?, flag(no, f[3])?];
            let pcor = [tsv::parse_f64(FILE, no, f[4])?, tsv::parse_f64(FILE, no, f[5])?];
            edges.push(NetworkEdge {
                i,
                j,
                present,
                pcor,
                sign: std::array::from_fn(|c| sign_of(pcor[c])),
            });
        }
        edges.sort_by_key(|e| (e.i, e.j));
        Ok(Self {
            genes: genes.to_vec(),
            edges,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaScore {
    pub lambda: f64,
    pub log_likelihood: f64,
    /// Nonzero upper-triangle entries summed over both conditions.
    pub nonzeros: usize,
    pub bic: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub scores: Vec<LambdaScore>,
    pub fit: ConcentrationPair,
}

/// Fits every `λ` of `grid` and keeps the one with the smallest
/// `BIC = −2 L + log(n₁+n₂)(nonzeros + 2p)`; ties go to the earlier entry.
pub fn select_lambda(
    s: &CovariancePair,
    template: &PenaltyWeights,
    grid: &[f64],
    cfg: &SolverConfig,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let p = s.p();
    let fits: Vec<Result<(LambdaScore, ConcentrationPair)>> = grid
        .par_iter()
        .map(|&lambda| {
            let fit = solve_multitask(s, &template.with_lambda(lambda), cfg)?;
            let ll = log_likelihood(&fit.k[0], &s.s[0], s.n[0])? + log_likelihood(&fit.k[1], &s.s[1], s.n[1])?;
            let nonzeros = (0..2)
                .map(|c| {
                    (0..p)
                        .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
                        .filter(|&(i, j)| fit.k[c][(i, j)] != 0.0)
                        .count()
                })
                .sum::<usize>();
            let bic = -2.0 * ll + ((s.n[0] + s.n[1]) as f64).ln() * (nonzeros + 2 * p) as f64;
            Ok((
                LambdaScore {
                    lambda,
                    log_likelihood: ll,
                    nonzeros,
                    bic,
                    converged: fit.converged,
                },
                fit,
            ))
        })
        .collect();
    let mut best: Option<(LambdaScore, ConcentrationPair)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for f in fits {
        let (score, fit) = f?;
        scores.push(score.clone());
        if best.as_ref().is_none_or(|(b, _)| score.bic < b.bic) {
            best = Some((score, fit));
        }
    }
    let (score, fit) = best.expect("grid is nonempty");
    Ok(LambdaSelection {
        lambda: score.lambda,
        scores,
        fit,
    })
}
