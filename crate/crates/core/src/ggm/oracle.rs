//! Brute-force maximizer of the cooperative objective for `p ≤ 4`.
//!
//! Shares nothing with the proximal solver. A multi-start Nelder–Mead
//! search over Cholesky factors locates the basin; then every sign pattern
//! of the off-diagonal entries (or, for `p = 4`, of the entries the search
//! left ambiguous) is solved exactly by damped Newton on the smooth problem
//! the pattern induces. A pattern's candidate counts only if its free
//! entries keep their signs, so the best candidate is the global maximum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ConcentrationPair, PenaltyWeights};
use crate::datamodel::CovariancePair;
use crate::error::{Error, Result};

struct Problem<'a> {
    s: &'a CovariancePair,
    w: &'a PenaltyWeights,
    p: usize,
    pairs: Vec<(usize, usize)>,
}

impl Problem<'_> {
    /// Objective written out from scratch; `None` if a matrix is not PD.
    fn value(&self, k: &[DMatrix<f64>; 2]) -> Option<f64> {
        let mut total = 0.0;
        for c in 0..2 {
            let chol = k[c].clone().cholesky()?;
            let logdet: f64 = (0..self.p).map(|i| 2.0 * chol.l()[(i, i)].ln()).sum();
            let tr = (&self.s.s[c] * &k[c]).trace();
            total += self.s.n[c] as f64 / 2.0 * (logdet - tr);
        }
        for i in 0..self.p {
            for j in 0..self.p {
                if i == j {
                    continue;
                }
                let (a, b) = (k[0][(i, j)], k[1][(i, j)]);
                let pos = (a.max(0.0).powi(2) + b.max(0.0).powi(2)).sqrt();
                let neg = (a.min(0.0).powi(2) + b.min(0.0).powi(2)).sqrt();
                total -= self.w.lambda * self.w.rho[(i, j)] * (pos + neg);
            }
        }
        Some(total)
    }

    fn n_chol(&self) -> usize {
        self.p * (self.p + 1) / 2
    }

    /// `K_c = L_c L_cᵀ`, `L_c` lower triangular with log-parameterized diagonal.
    fn from_cholesky(&self, theta: &[f64]) -> [DMatrix<f64>; 2] {
        let m = self.n_chol();
        std::array::from_fn(|c| {
            let mut l = DMatrix::zeros(self.p, self.p);
            let mut at = c * m;
            for i in 0..self.p {
                for j in 0..=i {
                    l[(i, j)] = if i == j { theta[at].exp() } else { theta[at] };
                    at += 1;
                }
            }
            &l * l.transpose()
        })
    }

    fn to_cholesky(&self, k: &[DMatrix<f64>; 2]) -> Vec<f64> {
        let mut theta = Vec::with_capacity(2 * self.n_chol());
        for kc in k {
            let l = kc.clone().cholesky().expect("PD start").l();
            for i in 0..self.p {
                for j in 0..=i {
                    theta.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                }
            }
        }
        theta
    }

    fn diagonal_solution(&self) -> [DMatrix<f64>; 2] {
        std::array::from_fn(|c| DMatrix::from_fn(self.p, self.p, |i, j| if i == j { 1.0 / self.s.s[c][(i, i)] } else { 0.0 }))
    }
}

fn nelder_mead(f: impl Fn(&[f64]) -> f64, start: &[f64], scale: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let d = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..d {
        let mut x = start.to_vec();
        x[i] += scale;
        let v = f(&x);
        simplex.push((x, v));
    }
    let mut evals = d + 1;
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[d].1 - simplex[0].1).abs() <= 1e-13 * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / d as f64;
            }
        }
        let worst = simplex[d].clone();
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[d] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 {
                lerp(&centroid, &reflected, 0.5)
            } else {
                lerp(&centroid, &worst.0, 0.5)
            };
            let fc = f(&contracted);
            evals += 1;
            if fc < worst.1.min(fr) {
                simplex[d] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for (x, v) in simplex.iter_mut().skip(1) {
                    *x = lerp(&best, x, 0.5);
                    *v = f(x);
                }
                evals += d;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// One smooth subproblem: every off-diagonal entry has a fixed sign in {−1, 0, 1}.
struct Pattern<'a> {
    prob: &'a Problem<'a>,
    /// `signs[pair][c]`.
    signs: Vec<[i8; 2]>,
    /// Free variables: (condition, i, j) with i ≥ j.
    vars: Vec<(usize, usize, usize)>,
}

impl<'a> Pattern<'a> {
    fn new(prob: &'a Problem<'a>, signs: Vec<[i8; 2]>) -> Self {
        let mut vars = Vec::new();
        for c in 0..2 {
            for i in 0..prob.p {
                vars.push((c, i, i));
            }
            for (e, &(i, j)) in prob.pairs.iter().enumerate() {
                if signs[e][c] != 0 {
                    vars.push((c, j, i));
                }
            }
        }
        Self { prob, signs, vars }
    }

    fn matrices(&self, x: &DVector<f64>) -> [DMatrix<f64>; 2] {
        let p = self.prob.p;
        let mut k = [DMatrix::zeros(p, p), DMatrix::zeros(p, p)];
        for (v, &(c, i, j)) in self.vars.iter().enumerate() {
            k[c][(i, j)] = x[v];
            k[c][(j, i)] = x[v];
        }
        k
    }

    fn var_of(&self, c: usize, i: usize, j: usize) -> Option<usize> {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        self.vars.iter().position(|&v| v == (c, a, b))
    }

    /// Smooth surrogate with value, gradient and Hessian.
    fn eval(&self, x: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
        let prob = self.prob;
        let k = self.matrices(x);
        let nv = self.vars.len();
        let mut value = 0.0;
        let mut grad = DVector::zeros(nv);
        let mut hess = DMatrix::zeros(nv, nv);
        let mut inv: Vec<DMatrix<f64>> = Vec::with_capacity(2);
        for c in 0..2 {
            let chol = k[c].clone().cholesky()?;
            let logdet: f64 = (0..prob.p).map(|i| 2.0 * chol.l()[(i, i)].ln()).sum();
            value += prob.s.n[c] as f64 / 2.0 * (logdet - (&prob.s.s[c] * &k[c]).trace());
            inv.push(chol.inverse());
        }
        // d²/dx_a dx_b log det K = −tr(W E_a W E_b) with W = K⁻¹ and E the
        // symmetric unit matrices of the two variables
        let second = |w: &DMatrix<f64>, (i, j): (usize, usize), (k, l): (usize, usize)| -> f64 {
            let m = |r: usize, q: usize| {
                if i == j {
                    w[(r, i)] * w[(i, q)]
                } else {
                    w[(r, i)] * w[(j, q)] + w[(r, j)] * w[(i, q)]
                }
            };
            if k == l {
                m(k, k)
            } else {
                m(k, l) + m(l, k)
            }
        };
        for (a, &(c, i, j)) in self.vars.iter().enumerate() {
            let half_n = prob.s.n[c] as f64 / 2.0;
            let mult = if i == j { 1.0 } else { 2.0 };
            grad[a] = half_n * mult * (inv[c][(i, j)] - prob.s.s[c][(i, j)]);
            for (b, &(c2, k2, l2)) in self.vars.iter().enumerate() {
                if c2 == c {
                    hess[(a, b)] = -half_n * second(&inv[c], (i, j), (k2, l2));
                }
            }
        }
        // penalty: 2λρ (both ordered pairs) times the group norms
        for (e, &(i, j)) in prob.pairs.iter().enumerate() {
            let weight = 2.0 * prob.w.lambda * prob.w.rho[(i, j)];
            for s in [1i8, -1] {
                let members: Vec<usize> = (0..2).filter(|&c| self.signs[e][c] == s).collect();
                match members.len() {
                    1 => {
                        let v = self.var_of(members[0], i, j).expect("free entry");
                        value -= weight * f64::from(s) * x[v];
                        grad[v] -= weight * f64::from(s);
                    }
                    2 => {
                        let v0 = self.var_of(0, i, j).expect("free entry");
                        let v1 = self.var_of(1, i, j).expect("free entry");
                        let norm = x[v0].hypot(x[v1]);
                        if norm < 1e-300 {
                            return None;
                        }
                        value -= weight * norm;
                        let u = [x[v0] / norm, x[v1] / norm];
                        let idx = [v0, v1];
                        for a in 0..2 {
                            grad[idx[a]] -= weight * u[a];
                            for b in 0..2 {
                                let h = (if a == b { 1.0 } else { 0.0 } - u[a] * u[b]) / norm;
                                hess[(idx[a], idx[b])] -= weight * h;
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        Some((value, grad, hess))
    }

    /// Damped Newton ascent from `start`; `None` if the optimum leaves the pattern.
    fn solve(&self, start: &[DMatrix<f64>; 2]) -> Option<[DMatrix<f64>; 2]> {
        let p = self.prob.p;
        let mut x = DVector::from_iterator(
            self.vars.len(),
            self.vars.iter().map(|&(c, i, j)| {
                if i == j {
                    start[c][(i, i)]
                } else {
                    let e = self.prob.pairs.iter().position(|&pr| pr == (j, i)).expect("pair");
                    f64::from(self.signs[e][c]) * 0.1 * (start[c][(i, i)] * start[c][(j, j)]).sqrt() / p as f64
                }
            }),
        );
        let (mut value, mut grad, mut hess) = self.eval(&x)?;
        for _ in 0..100 {
            let neg = -hess.clone();
            let dir = neg.cholesky()?.solve(&grad);
            let decrement = grad.dot(&dir);
            if decrement < 1e-22 {
                break;
            }
            let mut t = 1.0;
            loop {
                let cand = &x + &dir * t;
                if let Some((v, g, h)) = self.eval(&cand) {
                    if v >= value + 1e-4 * t * decrement {
                        x = cand;
                        value = v;
                        grad = g;
                        hess = h;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-16 {
                    return self.accept(&x);
                }
            }
        }
        self.accept(&x)
    }

    fn accept(&self, x: &DVector<f64>) -> Option<[DMatrix<f64>; 2]> {
        for (v, &(c, i, j)) in self.vars.iter().enumerate() {
            if i != j {
                let e = self.prob.pairs.iter().position(|&pr| pr == (j, i)).expect("pair");
                if f64::from(self.signs[e][c]) * x[v] <= 0.0 {
                    return None;
                }
            }
        }
        Some(self.matrices(x))
    }
}

const STARTS: usize = 6;
/// Entries whose multi-start value is below this fraction of `√(K_ii K_jj)`
/// have their sign enumerated when `p = 4`.
const AMBIGUOUS: f64 = 0.05;

/// Global maximizer of the cooperative objective by exhaustive search (`p ≤ 4`).
///
/// `kkt_residual` is not computed and set to NaN; `iterations` counts the
/// sign patterns solved.
pub fn oracle_solve_small(s: &CovariancePair, w: &PenaltyWeights) -> Result<ConcentrationPair> {
    let p = s.p();
    if p > 4 {
        return Err(Error::InvalidArgument(format!("oracle handles p ≤ 4, got {p}")));
    }
    if w.p() != p {
        return Err(Error::InvalidArgument("weights and covariance sizes differ".into()));
    }
    if (0..2).any(|c| (0..p).any(|i| !(s.s[c][(i, i)] > 0.0))) {
        return Err(Error::InvalidArgument("covariance diagonal must be positive".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
    let prob = Problem { s, w, p, pairs };

    let diag = prob.diagonal_solution();
    let mut best = (prob.value(&diag).ok_or(Error::NotPositiveDefinite)?, diag.clone());
    if p == 1 {
        return Ok(finish(best, 1));
    }

    // multi-start search for the basin
    let mut rng = ChaCha8Rng::seed_from_u64(0x0_5eed);
    let base = prob.to_cholesky(&diag);
    let neg = |theta: &[f64]| prob.value(&prob.from_cholesky(theta)).map_or(f64::INFINITY, |v| -v);
    for start in 0..STARTS {
        let theta: Vec<f64> = base
            .iter()
            .map(|&t| if start == 0 { t } else { t + rng.random_range(-0.3..0.3) })
            .collect();
        let (mut theta, _) = nelder_mead(neg, &theta, 0.1, 20_000);
        (theta, _) = nelder_mead(neg, &theta, 0.01, 20_000);
        let k = prob.from_cholesky(&theta);
        if let Some(v) = prob.value(&k) {
            if v > best.0 {
                best = (v, k);
            }
        }
    }

    // sign patterns: all entries for p ≤ 3, ambiguous ones for p = 4
    let entries: Vec<(usize, usize)> = (0..prob.pairs.len()).flat_map(|e| [(e, 0), (e, 1)]).collect();
    let searched = best.1.clone();
    let fixed: Vec<Option<i8>> = entries
        .iter()
        .map(|&(e, c)| {
            let (i, j) = prob.pairs[e];
            let v = searched[c][(i, j)];
            let scale = (searched[c][(i, i)] * searched[c][(j, j)]).sqrt();
            (p == 4 && v.abs() > AMBIGUOUS * scale).then_some(if v > 0.0 { 1 } else { -1 })
        })
        .collect();
    let free: Vec<usize> = (0..entries.len()).filter(|&a| fixed[a].is_none()).collect();
    let patterns: Vec<Vec<[i8; 2]>> = (0..3usize.pow(free.len() as u32))
        .map(|code| {
            let mut signs = vec![[0i8; 2]; prob.pairs.len()];
            for (a, &(e, c)) in entries.iter().enumerate() {
                if let Some(s) = fixed[a] {
                    signs[e][c] = s;
                }
            }
            let mut rest = code;
            for &a in &free {
                let (e, c) = entries[a];
                signs[e][c] = (rest % 3) as i8 - 1;
                rest /= 3;
            }
            signs
        })
        .filter(|signs| signs.iter().any(|s| *s != [0, 0]))
        .collect();
    let candidates: Vec<Option<(f64, [DMatrix<f64>; 2])>> = patterns
        .par_iter()
        .map(|signs| {
            let k = Pattern::new(&prob, signs.clone()).solve(&diag)?;
            Some((prob.value(&k)?, k))
        })
        .collect();
    for (v, k) in candidates.into_iter().flatten() {
        if v > best.0 {
            best = (v, k);
        }
    }
    let solved = patterns.len();
    Ok(finish(best, solved + 1))
}

fn finish((value, k): (f64, [DMatrix<f64>; 2]), iterations: usize) -> ConcentrationPair {
    ConcentrationPair {
        k,
        objective_trace: vec![value],
        kkt_residual: f64::NAN,
        iterations,
        converged: true,
    }
}
