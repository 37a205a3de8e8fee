//! Majority-vote error model for ensembles of independent voters.
//!
//! `N` independent voters each err with probability `ε`. The number of wrong
//! votes is Binomial(N, ε) and the majority is wrong when strictly more than
//! half the voters are, i.e. `k ≥ ⌊N/2⌋ + 1`. For `ε < 1/2` that probability
//! falls as `N` grows over odd values (Condorcet).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::{argmax, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub n_voters: u64,
    pub epsilon: f64,
}

impl EnsembleParams {
    pub fn new(n_voters: u64, epsilon: f64) -> Result<Self> {
        if n_voters == 0 {
            return Err(Error::InvalidParameter("need at least one voter".into()));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!(
                "error rate must be in [0, 1], got {epsilon}"
            )));
        }
        Ok(Self { n_voters, epsilon })
    }

    /// Smallest number of wrong votes that forms a strict majority.
    pub fn majority_threshold(&self) -> u64 {
        self.n_voters / 2 + 1
    }
}

/// `C(N,k) ε^k (1−ε)^(N−k)`, evaluated with Loader's saddle-point expansion.
pub fn binomial_error_pmf(params: &EnsembleParams, k: u64) -> Result<f64> {
    let n = params.n_voters;
    if k > n {
        return Err(Error::InvalidParameter(format!("k = {k} exceeds N = {n}")));
    }
    Ok(pmf_unchecked(n, k, params.epsilon))
}

fn pmf_unchecked(n: u64, k: u64, eps: f64) -> f64 {
    let q = 1.0 - eps;
    if eps == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if q == 0.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let (nf, kf) = (n as f64, k as f64);
    if k == 0 {
        if n == 0 {
            return 1.0;
        }
        let lc = if eps < 0.1 {
            -bd0(nf, nf * q) - nf * eps
        } else {
            nf * q.ln()
        };
        return lc.exp();
    }
    if k == n {
        let lc = if q < 0.1 {
            -bd0(nf, nf * eps) - nf * q
        } else {
            nf * eps.ln()
        };
        return lc.exp();
    }
    let lc = stirlerr(n) - stirlerr(k) - stirlerr(n - k) - bd0(kf, nf * eps) - bd0(nf - kf, nf * q);
    let lf = (2.0 * std::f64::consts::PI).ln() + kf.ln() + (-kf / nf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// `ln n! − (n + ½) ln n + n − ½ ln 2π`.
fn stirlerr(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15 {
        // n! is exact in f64 here
        let fact: f64 = (1..=n).map(|i| i as f64).product();
        let nf = n as f64;
        let lead = if n == 0 { 0.0 } else { (nf + 0.5) * nf.ln() };
        return fact.ln() - lead + nf - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    let nf = n as f64;
    let nn = nf * nf;
    if n > 500 {
        (S0 - S1 / nn) / nf
    } else if n > 80 {
        (S0 - (S1 - S2 / nn) / nn) / nf
    } else if n > 35 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / nf
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / nf
    }
}

/// Deviance term `x ln(x/m) + m − x`, computed without cancellation near `x = m`.
fn bd0(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let mut v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / f64::from(2 * j + 1);
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / m).ln() + m - x
    }
}

/// Probability that a strict majority of voters is wrong.
pub fn majority_error(params: &EnsembleParams) -> f64 {
    let n = params.n_voters;
    if params.epsilon == 0.5 && n % 2 == 1 {
        // exact by symmetry of Binomial(N, 1/2)
        return 0.5;
    }
    // smallest terms first
    let mut terms: Vec<f64> = (params.majority_threshold()..=n)
        .map(|k| pmf_unchecked(n, k, params.epsilon))
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondorcetPoint {
    pub n: u64,
    pub majority_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondorcetProfile {
    pub epsilon: f64,
    pub points: Vec<CondorcetPoint>,
    /// False when `ε ≥ 1/2`; the series is then not expected to decrease.
    pub monotone_guaranteed: bool,
}

impl CondorcetProfile {
    pub fn is_strictly_decreasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].majority_error < w[0].majority_error)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].majority_error > w[0].majority_error)
    }
}

/// Majority error over a list of ascending odd ensemble sizes.
pub fn condorcet_profile(epsilon: f64, odd_ns: &[u64]) -> Result<CondorcetProfile> {
    if let Some(&n) = odd_ns.iter().find(|&&n| n % 2 == 0) {
        return Err(Error::InvalidParameter(format!("ensemble size {n} is not odd")));
    }
    if odd_ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("ensemble sizes must ascend".into()));
    }
    let points = odd_ns
        .iter()
        .map(|&n| {
            let p = EnsembleParams::new(n, epsilon)?;
            Ok(CondorcetPoint {
                n,
                majority_error: majority_error(&p),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CondorcetProfile {
        epsilon,
        points,
        monotone_guaranteed: epsilon < 0.5,
    })
}

/// Simulated majority error.
///
/// `estimate` counts strict wrong majorities only, matching [`majority_error`].
/// Exact half splits (even `N`) are tallied separately; `estimate_with_splits`
/// counts each as half an error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub trials: u64,
    pub wrong_majorities: u64,
    pub half_splits: u64,
    pub estimate: f64,
    pub std_error: f64,
    pub estimate_with_splits: f64,
}

/// Trials are split into this many fixed partitions, each with its own
/// ChaCha stream, so the result does not depend on the thread count.
pub const MONTE_CARLO_PARTITIONS: u64 = 64;

pub fn monte_carlo_majority_error(params: &EnsembleParams, trials: u64, seed: u64) -> Result<MonteCarloEstimate> {
    if trials == 0 {
        return Err(Error::InvalidParameter("need at least one trial".into()));
    }
    let n = params.n_voters;
    let threshold = params.majority_threshold();
    let (wrong, split) = (0..MONTE_CARLO_PARTITIONS)
        .into_par_iter()
        .map(|part| {
            let count = trials / MONTE_CARLO_PARTITIONS + u64::from(part < trials % MONTE_CARLO_PARTITIONS);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(part);
            let (mut wrong, mut split) = (0u64, 0u64);
            for _ in 0..count {
                let errs = (0..n).filter(|_| rng.random_bool(params.epsilon)).count() as u64;
                if errs >= threshold {
                    wrong += 1;
                } else if 2 * errs == n {
                    split += 1;
                }
            }
            (wrong, split)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let t = trials as f64;
    let estimate = wrong as f64 / t;
    Ok(MonteCarloEstimate {
        trials,
        wrong_majorities: wrong,
        half_splits: split,
        estimate,
        std_error: (estimate * (1.0 - estimate) / t).sqrt(),
        estimate_with_splits: (wrong as f64 + 0.5 * split as f64) / t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskLoss {
    /// Sum of absolute differences.
    L1,
    /// Euclidean norm of the difference.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskBound {
    /// Loss of the mean prediction.
    pub lhs: f64,
    /// Mean loss of the individual predictions.
    pub rhs: f64,
    pub holds: bool,
}

fn loss_to_onehot(label: usize, p: &[f64], loss: RiskLoss) -> f64 {
    let diff = p.iter().enumerate().map(|(c, &x)| if c == label { 1.0 - x } else { x });
    match loss {
        RiskLoss::L1 => diff.map(f64::abs).sum(),
        RiskLoss::L2 => diff.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

/// Triangle-inequality bound: `ℓ(y, mean_i p_i) ≤ mean_i ℓ(y, p_i)`.
pub fn risk_bound_check(label: usize, probs: &Matrix<f64>, loss: RiskLoss) -> Result<RiskBound> {
    if probs.rows() == 0 {
        return Err(Error::EmptyInput("no prediction rows"));
    }
    if label >= probs.cols() {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for {} classes",
            probs.cols()
        )));
    }
    let all = vec![true; probs.rows()];
    let mean = crate::math::marginal_distribution(probs, &all)?;
    let lhs = loss_to_onehot(label, &mean, loss);
    let rhs = probs.iter_rows().map(|r| loss_to_onehot(label, r, loss)).sum::<f64>() / probs.rows() as f64;
    Ok(RiskBound {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    })
}

/// Predictions (one probability row per sample) that share a true label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGroup {
    pub label: usize,
    pub predictions: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGroupEntry {
    pub label: usize,
    pub group_size: usize,
    /// Fraction of samples whose own argmax misses the label.
    pub base_error: f64,
    /// 1 when the argmax of the group's mean distribution misses the label.
    pub marginal_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGroupReport {
    pub per_label: Vec<LabelGroupEntry>,
    pub mean_base_error: f64,
    pub mean_marginal_error: f64,
}

/// Compares per-sample error with the error of marginalizing over each label
/// group. Argmax ties resolve to the lowest class index.
pub fn label_group_marginal_error(groups: &[LabelGroup]) -> Result<LabelGroupReport> {
    if groups.is_empty() {
        return Err(Error::EmptyInput("no label groups"));
    }
    let mut per_label = Vec::with_capacity(groups.len());
    for g in groups {
        let p = &g.predictions;
        if p.rows() == 0 {
            return Err(Error::EmptyInput("label group without samples"));
        }
        if g.label >= p.cols() {
            return Err(Error::InvalidParameter(format!(
                "label {} out of range for {} classes",
                g.label,
                p.cols()
            )));
        }
        let misses = p.iter_rows().filter(|r| argmax(r) != Some(g.label)).count();
        let mean = crate::math::marginal_distribution(p, &vec![true; p.rows()])?;
        per_label.push(LabelGroupEntry {
            label: g.label,
            group_size: p.rows(),
            base_error: misses as f64 / p.rows() as f64,
            marginal_error: if argmax(&mean) == Some(g.label) { 0.0 } else { 1.0 },
        });
    }
    let m = per_label.len() as f64;
    Ok(LabelGroupReport {
        mean_base_error: per_label.iter().map(|e| e.base_error).sum::<f64>() / m,
        mean_marginal_error: per_label.iter().map(|e| e.marginal_error).sum::<f64>() / m,
        per_label,
    })
}
