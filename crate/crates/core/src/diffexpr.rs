//! Moderated t-test for differential expression between the two conditions,
//! signature selection, and a PCA projection of the samples for QC.
//!
//! The moderated statistic replaces each gene's pooled variance by a
//! posterior value that mixes it with a prior variance `s0²` carrying `d0`
//! degrees of freedom. The prior is fitted by matching the first two
//! moments of `log s²` to the scaled-F sampling model, as in limma's
//! `fitFDist`.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::digamma;

use crate::datamodel::{Condition, ExpressionMatrix, Provenance, Signature};
use crate::error::{Error, Result};
use crate::tsv;

/// Genes with positive variance needed before the prior is fitted.
pub const MIN_GENES_FOR_PRIOR: usize = 10;

/// Pooled within-condition variance of one gene and its degrees of freedom
/// `n1 + n2 − 2`.
pub fn pooled_variance(x: &ExpressionMatrix, gene: usize) -> (f64, usize) {
    let mut ss = 0.0;
    for c in Condition::BOTH {
        let v = x.gene_values(gene, c);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        ss += v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>();
    }
    let dg = x.n_samples() - 2;
    (ss / dg as f64, dg)
}

/// Scaled inverse-χ² prior on the gene variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariancePrior {
    /// Prior degrees of freedom; `f64::INFINITY` means full shrinkage.
    pub d0: f64,
    pub s0_sq: f64,
}

impl VariancePrior {
    /// No moderation: the ordinary pooled t-test.
    pub fn none() -> Self {
        Self { d0: 0.0, s0_sq: 1.0 }
    }

    pub fn posterior_variance(&self, s2: f64, dg: usize) -> f64 {
        if self.d0.is_infinite() {
            self.s0_sq
        } else {
            let dg = dg as f64;
            (self.d0 * self.s0_sq + dg * s2) / (self.d0 + dg)
        }
    }
}

/// Trigamma function ψ₁(x) for x > 0.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

fn tetragamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc - x2 - x2 / x - x2 * x2 * (0.5 - x2 * (1.0 / 6.0 - x2 * (1.0 / 6.0 - x2 * 0.3)))
}

/// Solves `trigamma(x) = y` by Newton's method (limma's `trigammaInverse`).
pub fn trigamma_inverse(y: f64) -> f64 {
    if y > 1e7 {
        return 1.0 / y.sqrt();
    }
    if y < 1e-6 {
        return 1.0 / y;
    }
    let mut x = 0.5 + 1.0 / y;
    for _ in 0..50 {
        let tri = trigamma(x);
        let dif = tri * (1.0 - tri / y) / tetragamma(x);
        x += dif;
        if -dif / x < 1e-8 {
            break;
        }
    }
    x
}

/// Fits `(d0, s0²)` from the pooled variances of all genes.
///
/// Zero variances carry no information on the log scale and are skipped.
/// With fewer than [`MIN_GENES_FOR_PRIOR`] usable genes the prior is
/// switched off (`d0 = 0`). When the spread of `log s²` is below what the
/// sampling model alone produces, `d0 = ∞` and `s0²` is the mean variance.
pub fn fit_variance_prior(s2: &[f64], dg: usize) -> Result<VariancePrior> {
    if dg == 0 {
        return Err(Error::InvalidArgument("residual degrees of freedom must be positive".into()));
    }
    let positive: Vec<f64> = s2.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::DegenerateVariances);
    }
    let mean_s2 = positive.iter().sum::<f64>() / positive.len() as f64;
    if positive.len() < MIN_GENES_FOR_PRIOR {
        return Ok(VariancePrior { d0: 0.0, s0_sq: mean_s2 });
    }

    let half = dg as f64 / 2.0;
    let shift = half.ln() - digamma(half);
    let e: Vec<f64> = positive.iter().map(|v| v.ln() + shift).collect();
    let n = e.len() as f64;
    let emean = e.iter().sum::<f64>() / n;
    let evar = e.iter().map(|v| (v - emean).powi(2)).sum::<f64>() / (n - 1.0) - trigamma(half);
    if evar > 0.0 {
        let d0 = 2.0 * trigamma_inverse(evar);
        let s0_sq = (emean + digamma(d0 / 2.0) - (d0 / 2.0).ln()).exp();
        Ok(VariancePrior { d0, s0_sq })
    } else {
        Ok(VariancePrior {
            d0: f64::INFINITY,
            s0_sq: mean_s2,
        })
    }
}

/// Per-gene outcome of the moderated t-test.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneTestResult {
    pub gene_id: String,
    pub mean: [f64; 2],
    pub s2_pooled: f64,
    pub s2_posterior: f64,
    pub t_mod: f64,
    pub df_total: f64,
    pub p_value: f64,
}

/// Two-sided p-value of `t` under a central t distribution (normal if `df` is infinite).
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Moderated t-statistics with the prior fitted across all genes.
pub fn moderated_t(x: &ExpressionMatrix) -> Result<Vec<GeneTestResult>> {
    let pooled: Vec<(f64, usize)> = (0..x.n_genes()).map(|g| pooled_variance(x, g)).collect();
    let s2: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    let prior = fit_variance_prior(&s2, pooled[0].1)?;
    Ok(moderated_t_with_prior(x, prior))
}

/// Moderated t-statistics under a given variance prior.
pub fn moderated_t_with_prior(x: &ExpressionMatrix, prior: VariancePrior) -> Vec<GeneTestResult> {
    let (n1, n2) = (x.n(Condition::One) as f64, x.n(Condition::Two) as f64);
    let scale = (1.0 / n1 + 1.0 / n2).sqrt();
    (0..x.n_genes())
        .map(|g| {
            let mean = Condition::BOTH.map(|c| {
                let v = x.gene_values(g, c);
                v.iter().sum::<f64>() / v.len() as f64
            });
            let (s2, dg) = pooled_variance(x, g);
            let s2_post = prior.posterior_variance(s2, dg);
            let diff = mean[0] - mean[1];
            let t_mod = if s2_post > 0.0 {
                diff / (s2_post.sqrt() * scale)
            } else if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            };
            let df_total = prior.d0 + dg as f64;
            GeneTestResult {
                gene_id: x.gene_ids()[g].clone(),
                mean,
                s2_pooled: s2,
                s2_posterior: s2_post,
                t_mod,
                df_total,
                p_value: two_sided_p(t_mod, df_total),
            }
        })
        .collect()
}

const RESULT_HEADER: [&str; 8] = [
    "gene",
    "mean1",
    "mean2",
    "s2_pooled",
    "s2_posterior",
    "t_mod",
    "df",
    "p_value",
];

pub fn results_to_tsv(results: &[GeneTestResult]) -> String {
    let mut out = RESULT_HEADER.join("\t");
    out.push('\n');
    for r in results {
        let cells = [
            r.mean[0],
            r.mean[1],
            r.s2_pooled,
            r.s2_posterior,
            r.t_mod,
            r.df_total,
            r.p_value,
        ];
        out.push_str(&r.gene_id);
        for v in cells {
            out.push('\t');
            out.push_str(&tsv::fmt_sig(v));
        }
        out.push('\n');
    }
    out
}

pub fn results_from_tsv(text: &str) -> Result<Vec<GeneTestResult>> {
    const FILE: &str = "diffexpr";
    let mut lines = tsv::lines(text);
    tsv::expect_header(FILE, lines.next().map(|l| l.1), &RESULT_HEADER)?;
    lines
        .map(|(no, line)| {
            let f = tsv::fields(FILE, no, line, 8)?;
            let num = |i: usize| tsv::parse_f64(FILE, no, f[i]);
            Ok(GeneTestResult {
                gene_id: f[0].to_string(),
                mean: [num(1)?, num(2)?],
                s2_pooled: num(3)?,
                s2_posterior: num(4)?,
                t_mod: num(5)?,
                df_total: num(6)?,
                p_value: num(7)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Adjustment {
    #[default]
    None,
    BenjaminiHochberg,
}

/// Benjamini–Hochberg step-up adjusted p-values, in input order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        adjusted[i] = running.min(1.0);
    }
    adjusted
}

/// Genes whose (adjusted) p-value is below `alpha`, in input order.
/// `alpha = 1` keeps every gene.
pub fn select_signature(results: &[GeneTestResult], alpha: f64, adjust: Adjustment) -> Result<Signature> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    let raw: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    let p = match adjust {
        Adjustment::None => raw,
        Adjustment::BenjaminiHochberg => benjamini_hochberg(&raw),
    };
    let keep = results
        .iter()
        .zip(p)
        .filter(|(_, p)| alpha >= 1.0 || *p < alpha)
        .map(|(r, _)| r.gene_id.clone());
    Ok(Signature::from_genes(keep, Provenance::Differential))
}

/// Samples projected on the leading principal axes of the signature genes.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `N × dims` sample coordinates.
    pub coords: DMatrix<f64>,
    /// `genes × dims` unit loadings; each column's largest-magnitude entry is positive.
    pub loadings: DMatrix<f64>,
    /// Fraction of total variance carried by each returned axis.
    pub explained: Vec<f64>,
}

pub fn pca_projection(x: &ExpressionMatrix, genes: &Signature, dims: usize) -> Result<PcaProjection> {
    if genes.is_empty() {
        return Err(Error::InvalidArgument("PCA needs a nonempty signature".into()));
    }
    let sub = x.restrict(&genes.ids())?;
    let (g, n) = (sub.n_genes(), sub.n_samples());
    if dims == 0 {
        return Err(Error::InvalidArgument("PCA needs at least one dimension".into()));
    }
    // samples in rows, genes centered across all samples
    let mut a = sub.values().transpose();
    for mut col in a.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));

    let top = sv.max();
    let rank = sv.iter().filter(|&&s| s > top * 1e-10 * g.max(n) as f64).count();
    if dims > rank || dims > g.min(n) {
        return Err(Error::RankDeficient { requested: dims, rank });
    }
    let total: f64 = sv.iter().map(|s| s * s).sum();

    let mut coords = DMatrix::zeros(n, dims);
    let mut loadings = DMatrix::zeros(g, dims);
    let mut explained = Vec::with_capacity(dims);
    for (k, &idx) in order.iter().take(dims).enumerate() {
        let mut load: DVector<f64> = vt.row(idx).transpose();
        let mut score: DVector<f64> = u.column(idx) * sv[idx];
        let pivot = load.iamax();
        if load[pivot] < 0.0 {
            load.neg_mut();
            score.neg_mut();
        }
        loadings.set_column(k, &load);
        coords.set_column(k, &score);
        explained.push(sv[idx] * sv[idx] / total);
    }
    Ok(PcaProjection {
        coords,
        loadings,
        explained,
    })
}

/// Distance between the two condition centroids divided by the mean
/// distance of samples to their own centroid.
pub fn centroid_separation(coords: &DMatrix<f64>, conditions: &[Condition]) -> f64 {
    let centroid = |c: Condition| {
        let rows: Vec<usize> = (0..coords.nrows()).filter(|&r| conditions[r] == c).collect();
        let mut m = DVector::zeros(coords.ncols());
        for &r in &rows {
            m += coords.row(r).transpose();
        }
        m / rows.len() as f64
    };
    let cents = Condition::BOTH.map(centroid);
    let spread = (0..coords.nrows())
        .map(|r| (coords.row(r).transpose() - &cents[conditions[r].index()]).norm())
        .sum::<f64>()
        / coords.nrows() as f64;
    (&cents[0] - &cents[1]).norm() / spread
}
