//! The ZERO prediction rule.
//!
//! Per sample: compute temperature-τ probabilities for every view, keep the
//! `max(1, ⌊γ·N⌋)` lowest-entropy views, replace each kept view by its τ→0⁺
//! limit (a one-hot at its argmax) and sum. The prediction is the argmax of
//! that sum, which is a plurality vote among the confident views. Ties in the
//! vote are resolved by a [`TieBreakStrategy`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::{
    argmax_set, cosine_logits, entropy, machine_epsilon_limit, row_entropies, softmax_rows, zero_temperature_limit,
    EmbeddingMatrix, LogitMatrix, ProbabilityMatrix, Temperature,
};
use crate::{Error, Result, Scalar};

pub const DEFAULT_GAMMA: f64 = 0.3;
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig<T> {
    pub gamma: T,
    pub tau: Temperature<T>,
}

impl<T: Scalar> FilterConfig<T> {
    pub fn new(gamma: T, tau: T) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            gamma,
            tau: Temperature::new(tau)?,
        })
    }
}

fn check_gamma<T: Scalar>(gamma: T) -> Result<()> {
    if gamma > T::zero() && gamma <= T::one() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("gamma must be in (0, 1], got {gamma}")))
    }
}

/// Number of views kept out of `n` at percentile `gamma`: `max(1, ⌊γ·n⌋)`.
///
/// The product is nudged up by a few ulps so that e.g. `0.29 * 100` (which
/// rounds to 28.999…) still floors to 29.
pub fn keep_count<T: Scalar>(n: usize, gamma: T) -> usize {
    let raw = gamma.as_f64() * n as f64;
    let k = (raw + raw * 4.0 * f64::EPSILON).floor() as usize;
    k.clamp(1, n.max(1))
}

/// Views retained by the confidence filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMask {
    /// `kept[i]` is true when view `i` survived the filter.
    pub kept: Vec<bool>,
    /// Kept view indices, ascending by entropy (ties by index).
    pub order: Vec<usize>,
    /// Discarded view indices in the same ordering; scanned by greedy tie-breaking.
    pub remaining: Vec<usize>,
}

impl FilterMask {
    pub fn kept_count(&self) -> usize {
        self.order.len()
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Keeps the `max(1, ⌊γ·N⌋)` rows of `probs` with the lowest entropy.
pub fn confidence_filter<T: Scalar>(probs: &ProbabilityMatrix<T>, cfg: &FilterConfig<T>) -> Result<FilterMask> {
    check_gamma(cfg.gamma)?;
    let n = probs.rows();
    if n == 0 {
        return Err(Error::EmptyInput("no views to filter"));
    }
    let entropies = row_entropies(probs);
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| entropies[a].partial_cmp(&entropies[b]).unwrap().then(a.cmp(&b)));
    let k = keep_count(n, cfg.gamma);
    let remaining = ranking.split_off(k);
    let mut kept = vec![false; n];
    for &i in &ranking {
        kept[i] = true;
    }
    Ok(FilterMask {
        kept,
        order: ranking,
        remaining,
    })
}

/// Computes temperature-τ probabilities from logits, then filters.
pub fn confidence_filter_logits<T: Scalar>(
    logits: &LogitMatrix<T>,
    cfg: &FilterConfig<T>,
) -> Result<(ProbabilityMatrix<T>, FilterMask)> {
    let probs = softmax_rows(logits, cfg.tau)?;
    let mask = confidence_filter(&probs, cfg)?;
    Ok((probs, mask))
}

/// Votes cast by the kept views.
///
/// A row whose maximum is shared by `m` classes (bitwise equal logits) casts
/// `1/m` to each of them; those shares go to `fractional` rather than `counts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTally<T> {
    pub counts: Vec<usize>,
    pub fractional: Vec<T>,
    pub split_rows: usize,
}

impl<T: Scalar> VoteTally<T> {
    pub fn totals(&self) -> Vec<T> {
        self.counts
            .iter()
            .zip(&self.fractional)
            .map(|(&c, &f)| T::of_usize(c) + f)
            .collect()
    }
}

fn check_mask<T: Scalar>(logits: &LogitMatrix<T>, mask: &FilterMask) -> Result<()> {
    if mask.len() != logits.rows() {
        return Err(Error::DimensionMismatch(format!(
            "mask covers {} views, logits have {}",
            mask.len(),
            logits.rows()
        )));
    }
    Ok(())
}

pub fn vote_counts<T: Scalar>(logits: &LogitMatrix<T>, mask: &FilterMask) -> Result<VoteTally<T>> {
    check_mask(logits, mask)?;
    let c = logits.cols();
    let mut tally = VoteTally {
        counts: vec![0; c],
        fractional: vec![T::zero(); c],
        split_rows: 0,
    };
    for &i in &mask.order {
        let winners = argmax_set(logits.row(i));
        if let [w] = winners[..] {
            tally.counts[w] += 1;
        } else {
            let share = T::one() / T::of_usize(winners.len());
            for w in winners {
                tally.fractional[w] = tally.fractional[w] + share;
            }
            tally.split_rows += 1;
        }
    }
    Ok(tally)
}

/// The tie-breaking rules for equal vote totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreakStrategy {
    /// Scan discarded views by ascending entropy until one votes for exactly
    /// one tied class; falls back to `MostConfidentProb` when exhausted.
    #[default]
    Greedy,
    /// Tied class predicted by the kept view with the highest max-probability.
    MostConfidentProb,
    /// Per tied class, marginalize the kept views predicting it; lowest-entropy marginal wins.
    PerClassMarginalEntropy,
    /// Largest single logit among kept views.
    MaxLogit,
    /// Largest mean logit over kept views.
    MeanLogit,
    /// Tied class predicted by the kept view with the highest max-logit.
    MaxLogitPerView,
    /// Uniform draw over the tied set; deterministic given the seed.
    Random,
}

impl TieBreakStrategy {
    pub const ALL: [TieBreakStrategy; 7] = [
        TieBreakStrategy::Greedy,
        TieBreakStrategy::MostConfidentProb,
        TieBreakStrategy::PerClassMarginalEntropy,
        TieBreakStrategy::MaxLogit,
        TieBreakStrategy::MeanLogit,
        TieBreakStrategy::MaxLogitPerView,
        TieBreakStrategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TieBreakStrategy::Greedy => "greedy",
            TieBreakStrategy::MostConfidentProb => "most-confident-prob",
            TieBreakStrategy::PerClassMarginalEntropy => "per-class-marginal-entropy",
            TieBreakStrategy::MaxLogit => "max-logit",
            TieBreakStrategy::MeanLogit => "mean-logit",
            TieBreakStrategy::MaxLogitPerView => "max-logit-per-view",
            TieBreakStrategy::Random => "random",
        }
    }
}

impl fmt::Display for TieBreakStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TieBreakStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown tie-break strategy '{s}'")))
    }
}

/// How the τ→0⁺ limit is taken for each kept view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitMode {
    /// One-hot at the argmax, uniform over exact ties.
    #[default]
    Analytic,
    /// Softmax with τ equal to the scalar type's machine epsilon.
    MachineEpsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroConfig<T> {
    pub gamma: T,
    /// Temperature of the pre-filter probabilities.
    pub tau: T,
    pub strategy: TieBreakStrategy,
    pub seed: u64,
    pub limit: LimitMode,
}

impl<T: Scalar> Default for ZeroConfig<T> {
    fn default() -> Self {
        Self {
            gamma: T::of(DEFAULT_GAMMA),
            tau: T::of(DEFAULT_TAU),
            strategy: TieBreakStrategy::Greedy,
            seed: 0,
            limit: LimitMode::Analytic,
        }
    }
}

impl<T: Scalar> ZeroConfig<T> {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        Temperature::new(self.tau)?;
        Ok(())
    }

    pub fn filter(&self) -> Result<FilterConfig<T>> {
        FilterConfig::new(self.gamma, self.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroResult<T> {
    pub predicted_class: usize,
    pub vote_counts: Vec<usize>,
    /// Fractional votes from kept views with an exact within-row logit tie.
    pub fractional_votes: Vec<T>,
    /// True when the final vote totals tied and a strategy was invoked.
    pub tie_occurred: bool,
    pub tied_classes: Vec<usize>,
    /// Greedy ran out of discarded views and used its fallback.
    pub tie_fallback: bool,
    pub filter_mask: FilterMask,
    /// Sum of the kept views' zero-temperature rows divided by the kept count.
    pub marginal: Vec<T>,
}

/// ZERO on embeddings: cosine logits, then [`zero_predict_logits`] on stream 0.
pub fn zero_predict<T: Scalar>(
    image_embs: &EmbeddingMatrix<T>,
    text_embs: &EmbeddingMatrix<T>,
    cfg: &ZeroConfig<T>,
) -> Result<ZeroResult<T>> {
    zero_predict_sample(image_embs, text_embs, cfg, 0)
}

/// As [`zero_predict`], drawing random tie-breaks from stream `sample_key` of
/// the master seed so results do not depend on evaluation order.
pub fn zero_predict_sample<T: Scalar>(
    image_embs: &EmbeddingMatrix<T>,
    text_embs: &EmbeddingMatrix<T>,
    cfg: &ZeroConfig<T>,
    sample_key: u64,
) -> Result<ZeroResult<T>> {
    let logits = cosine_logits(image_embs, text_embs)?;
    zero_predict_logits(&logits, cfg, sample_key)
}

pub fn zero_predict_logits<T: Scalar>(
    logits: &LogitMatrix<T>,
    cfg: &ZeroConfig<T>,
    sample_key: u64,
) -> Result<ZeroResult<T>> {
    if logits.rows() == 0 {
        return Err(Error::EmptyInput("no views"));
    }
    if logits.cols() == 0 {
        return Err(Error::EmptyInput("no classes"));
    }
    let (probs, mask) = confidence_filter_logits(logits, &cfg.filter()?)?;

    let c = logits.cols();
    let mut summed = vec![T::zero(); c];
    for &i in &mask.order {
        let row = match cfg.limit {
            LimitMode::Analytic => zero_temperature_limit(logits.row(i))?,
            LimitMode::MachineEpsilon => machine_epsilon_limit(logits.row(i))?,
        };
        summed.iter_mut().zip(row).for_each(|(s, p)| *s = *s + p);
    }
    let tally = vote_counts(logits, &mask)?;

    let tied = argmax_set(&summed);
    let (predicted_class, tie_occurred, tie_fallback) = match tied[..] {
        [only] => (only, false, false),
        _ => {
            let outcome = break_tie_on_stream(logits, &probs, &mask, &tied, cfg.strategy, cfg.seed, sample_key)?;
            (outcome.class, true, outcome.fell_back)
        }
    };

    let k = T::of_usize(mask.kept_count());
    let marginal = summed.into_iter().map(|s| s / k).collect();
    Ok(ZeroResult {
        predicted_class,
        vote_counts: tally.counts,
        fractional_votes: tally.fractional,
        tie_occurred,
        tied_classes: if tie_occurred { tied } else { Vec::new() },
        tie_fallback,
        filter_mask: mask,
        marginal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TieBreakOutcome {
    pub class: usize,
    pub fell_back: bool,
}

/// Resolves a vote tie among `tied` classes. Random draws use stream 0 of `seed`.
pub fn break_tie<T: Scalar>(
    logits: &LogitMatrix<T>,
    probs: &ProbabilityMatrix<T>,
    mask: &FilterMask,
    tied: &[usize],
    strategy: TieBreakStrategy,
    seed: u64,
) -> Result<usize> {
    break_tie_on_stream(logits, probs, mask, tied, strategy, seed, 0).map(|o| o.class)
}

pub fn break_tie_on_stream<T: Scalar>(
    logits: &LogitMatrix<T>,
    probs: &ProbabilityMatrix<T>,
    mask: &FilterMask,
    tied: &[usize],
    strategy: TieBreakStrategy,
    seed: u64,
    stream: u64,
) -> Result<TieBreakOutcome> {
    if tied.is_empty() {
        return Err(Error::EmptyInput("tied class set"));
    }
    check_mask(logits, mask)?;
    if probs.rows() != logits.rows() || probs.cols() != logits.cols() {
        return Err(Error::DimensionMismatch(
            "probabilities and logits differ in shape".into(),
        ));
    }
    if let Some(&bad) = tied.iter().find(|&&c| c >= logits.cols()) {
        return Err(Error::InvalidParameter(format!("tied class {bad} out of range")));
    }
    let mut tied = tied.to_vec();
    tied.sort_unstable();
    tied.dedup();
    if tied.len() == 1 {
        return Ok(TieBreakOutcome {
            class: tied[0],
            fell_back: false,
        });
    }

    let done = |class| TieBreakOutcome {
        class,
        fell_back: false,
    };
    let class = match strategy {
        TieBreakStrategy::Greedy => {
            for &i in &mask.remaining {
                let hits: Vec<usize> = argmax_set(logits.row(i))
                    .into_iter()
                    .filter(|c| tied.binary_search(c).is_ok())
                    .collect();
                if let [c] = hits[..] {
                    return Ok(done(c));
                }
            }
            return Ok(TieBreakOutcome {
                class: most_confident_view(probs, mask, &tied),
                fell_back: true,
            });
        }
        TieBreakStrategy::MostConfidentProb => most_confident_view(probs, mask, &tied),
        TieBreakStrategy::MaxLogitPerView => most_confident_view(logits, mask, &tied),
        TieBreakStrategy::PerClassMarginalEntropy => per_class_marginal(probs, mask, &tied)?,
        TieBreakStrategy::MaxLogit => best_class(&tied, |c| {
            mask.order
                .iter()
                .map(|&i| logits.get(i, c))
                .fold(T::neg_infinity(), T::max)
        }),
        TieBreakStrategy::MeanLogit => best_class(&tied, |c| {
            let sum: T = mask.order.iter().map(|&i| logits.get(i, c)).sum();
            sum / T::of_usize(mask.kept_count())
        }),
        TieBreakStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            tied[rng.random_range(0..tied.len())]
        }
    };
    Ok(done(class))
}

/// First tied class (ascending) maximizing `score`; exact ties keep the lower class.
fn best_class<T: Scalar>(tied: &[usize], score: impl Fn(usize) -> T) -> usize {
    let mut best = (tied[0], score(tied[0]));
    for &c in &tied[1..] {
        let s = score(c);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

/// Among kept views (entropy order) whose prediction is a tied class, the one
/// with the largest row maximum of `scores` decides. If no kept view predicts
/// a tied class, the largest tied-class score over kept views decides.
fn most_confident_view<T: Scalar>(scores: &ProbabilityMatrix<T>, mask: &FilterMask, tied: &[usize]) -> usize {
    let mut best: Option<(usize, T)> = None;
    for &i in &mask.order {
        let row = scores.row(i);
        let Some(c) = argmax_set(row).into_iter().find(|c| tied.binary_search(c).is_ok()) else {
            continue;
        };
        if best.is_none_or(|(_, s)| row[c] > s) {
            best = Some((c, row[c]));
        }
    }
    match best {
        Some((c, _)) => c,
        None => best_class(tied, |c| {
            mask.order
                .iter()
                .map(|&i| scores.get(i, c))
                .fold(T::neg_infinity(), T::max)
        }),
    }
}

fn per_class_marginal<T: Scalar>(probs: &ProbabilityMatrix<T>, mask: &FilterMask, tied: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, T)> = None;
    for &c in tied {
        let voters: Vec<usize> = mask
            .order
            .iter()
            .copied()
            .filter(|&i| argmax_set(probs.row(i)).contains(&c))
            .collect();
        if voters.is_empty() {
            continue;
        }
        let mut mean = vec![T::zero(); probs.cols()];
        for &i in &voters {
            mean.iter_mut().zip(probs.row(i)).for_each(|(m, &p)| *m = *m + p);
        }
        let n = T::of_usize(voters.len());
        mean.iter_mut().for_each(|m| *m = *m / n);
        let h = entropy(&mean);
        if best.is_none_or(|(_, bh)| h < bh) {
            best = Some((c, h));
        }
    }
    Ok(match best {
        Some((c, _)) => c,
        None => most_confident_view(probs, mask, tied),
    })
}
