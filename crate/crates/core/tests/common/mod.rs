#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use priornet::datamodel::{Condition, ExpressionMatrix, GroundTruthModel};
use priornet::ggm::ConcentrationPair;

/// Prints a PASS/FAIL line; fails if any check failed or the budget was exceeded.
pub fn verdict(id: u32, name: &str, failures: Vec<String>, elapsed: Duration, budget: Duration) -> bool {
    let mut failures = failures;
    if elapsed > budget {
        failures.push(format!("runtime {:.1}s exceeds {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()));
    }
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut line = format!("AC{id:<2} {status} {name} ({:.2}s)", elapsed.as_secs_f64());
    if !failures.is_empty() {
        line.push_str(": ");
        line.push_str(&failures.join("; "));
    }
    println!("{line}");
    failures.is_empty()
}

pub fn matrix(genes: Vec<String>, values: DMatrix<f64>, conditions: Vec<Condition>) -> ExpressionMatrix {
    let n = values.ncols();
    ExpressionMatrix::new(genes, (0..n).map(|j| format!("s{j}")).collect(), values, conditions).unwrap()
}

fn halves(n: usize) -> Vec<Condition> {
    (0..n).map(|j| if j < n / 2 { Condition::One } else { Condition::Two }).collect()
}

/// Gene `g0` is 0 in condition 1 and 10 in condition 2; `g1..` are noise.
pub fn separable(n_noise: usize, n: usize, seed: u64) -> ExpressionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 1 + n_noise;
    let values = DMatrix::from_fn(p, n, |i, j| {
        if i == 0 {
            if j < n / 2 {
                0.0
            } else {
                10.0
            }
        } else {
            rng.sample::<f64, _>(StandardNormal)
        }
    });
    matrix((0..p).map(|i| format!("g{i}")).collect(), values, halves(n))
}

/// Pure-noise genes with balanced, shuffled labels.
pub fn noise_labels(p: usize, n: usize, seed: u64) -> ExpressionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = halves(n);
    labels.shuffle(&mut rng);
    let values = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    matrix((0..p).map(|i| format!("g{i}")).collect(), values, labels)
}

/// F1 of the estimated off-diagonal support against the truth, pooled over both conditions.
pub fn edge_f1(fit: &ConcentrationPair, model: &GroundTruthModel) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for c in 0..2 {
        for i in 0..model.p {
            for j in i + 1..model.p {
                match (fit.k[c][(i, j)] != 0.0, model.edge_support[c][(i, j)]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// `(opposite-sign edges, edges present in both conditions)`.
pub fn sign_disagreements(fit: &ConcentrationPair) -> (usize, usize) {
    let p = fit.k[0].nrows();
    let (mut opposite, mut both) = (0, 0);
    for i in 0..p {
        for j in i + 1..p {
            let (a, b) = (fit.k[0][(i, j)], fit.k[1][(i, j)]);
            if a != 0.0 && b != 0.0 {
                both += 1;
                if a.signum() != b.signum() {
                    opposite += 1;
                }
            }
        }
    }
    (opposite, both)
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("synthetic")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_priornet")
}

/// Sorted `(file name, bytes)` of every file in `dir`.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}
