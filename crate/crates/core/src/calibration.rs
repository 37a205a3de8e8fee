//! Reliability binning, expected calibration error and rank correlation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin<T> {
    pub lower: T,
    pub upper: T,
    pub count: usize,
    /// Fraction correct among members; 0 for an empty bin.
    pub accuracy: T,
    /// Mean confidence of members; 0 for an empty bin.
    pub confidence: T,
}

impl<T: Scalar> Bin<T> {
    pub fn is_occupied(&self) -> bool {
        self.count > 0
    }

    pub fn gap(&self) -> T {
        (self.accuracy - self.confidence).abs()
    }
}

/// Equal-width confidence bins over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins<T> {
    pub bins: Vec<Bin<T>>,
    pub total: usize,
}

impl<T: Scalar> ReliabilityBins<T> {
    pub fn m_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn occupied(&self) -> impl Iterator<Item = &Bin<T>> {
        self.bins.iter().filter(|b| b.is_occupied())
    }

    /// One line per bin: `bin,lower,upper,count,accuracy,confidence`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,count,accuracy,confidence\n");
        for (i, b) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                b.lower, b.upper, b.count, b.accuracy, b.confidence
            ));
        }
        out
    }
}

/// Bins samples by confidence. A sample with confidence `s` lands in bin
/// `⌊s·M⌋`, with `s = 1` clamped into the last bin.
pub fn reliability_bins<T: Scalar>(confidences: &[T], correct: &[bool], m_bins: usize) -> Result<ReliabilityBins<T>> {
    if m_bins < 1 {
        return Err(Error::InvalidParameter("need at least one bin".into()));
    }
    if confidences.is_empty() {
        return Err(Error::EmptyInput("no samples to bin"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} confidences vs {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if let Some(i) = confidences.iter().position(|&s| !(s >= T::zero() && s <= T::one())) {
        return Err(Error::InvalidParameter(format!(
            "confidence {} at index {i} outside [0, 1]",
            confidences[i]
        )));
    }

    let m = T::of_usize(m_bins);
    let mut hits = vec![0usize; m_bins];
    let mut counts = vec![0usize; m_bins];
    let mut conf_sums = vec![T::zero(); m_bins];
    for (&s, &ok) in confidences.iter().zip(correct) {
        let b = (s * m).floor().to_usize().unwrap_or(0).min(m_bins - 1);
        counts[b] += 1;
        hits[b] += usize::from(ok);
        conf_sums[b] = conf_sums[b] + s;
    }

    let bins = (0..m_bins)
        .map(|b| {
            let n = counts[b];
            let (accuracy, confidence) = if n == 0 {
                (T::zero(), T::zero())
            } else {
                let nn = T::of_usize(n);
                (T::of_usize(hits[b]) / nn, conf_sums[b] / nn)
            };
            Bin {
                lower: T::of_usize(b) / m,
                upper: T::of_usize(b + 1) / m,
                count: n,
                accuracy,
                confidence,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        total: confidences.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EceMode {
    /// Plain mean of `|acc − conf|` over occupied bins.
    #[default]
    PaperUnweighted,
    /// `Σ (n_m / n) |acc − conf|`.
    CountWeighted,
}

pub fn expected_calibration_error<T: Scalar>(bins: &ReliabilityBins<T>, mode: EceMode) -> Result<T> {
    let occupied: Vec<&Bin<T>> = bins.occupied().collect();
    if occupied.is_empty() {
        return Err(Error::EmptyInput("no occupied bins"));
    }
    Ok(match mode {
        EceMode::PaperUnweighted => occupied.iter().map(|b| b.gap()).sum::<T>() / T::of_usize(occupied.len()),
        EceMode::CountWeighted => {
            let total = T::of_usize(bins.total);
            occupied.iter().map(|b| T::of_usize(b.count) / total * b.gap()).sum()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport<T> {
    pub m_bins: usize,
    pub total: usize,
    pub ece_unweighted: T,
    pub ece_weighted: T,
    /// Share of occupied bins whose mean confidence exceeds their accuracy.
    pub overconfident_bin_fraction: T,
    pub top1_accuracy: T,
}

impl<T: Scalar> CalibrationReport<T> {
    pub fn from_bins(bins: &ReliabilityBins<T>) -> Result<Self> {
        let occupied: Vec<&Bin<T>> = bins.occupied().collect();
        let over = occupied.iter().filter(|b| b.confidence > b.accuracy).count();
        // acc·n recovers the integer hit count up to rounding
        let correct: usize = occupied
            .iter()
            .map(|b| (b.accuracy * T::of_usize(b.count)).round().to_usize().unwrap_or(0))
            .sum();
        Ok(Self {
            m_bins: bins.m_bins(),
            total: bins.total,
            ece_unweighted: expected_calibration_error(bins, EceMode::PaperUnweighted)?,
            ece_weighted: expected_calibration_error(bins, EceMode::CountWeighted)?,
            overconfident_bin_fraction: T::of_usize(over) / T::of_usize(occupied.len()),
            top1_accuracy: T::of_usize(correct) / T::of_usize(bins.total),
        })
    }
}

/// Convenience: bins then summarizes.
pub fn calibration_report<T: Scalar>(
    confidences: &[T],
    correct: &[bool],
    m_bins: usize,
) -> Result<(CalibrationReport<T>, ReliabilityBins<T>)> {
    let bins = reliability_bins(confidences, correct, m_bins)?;
    Ok((CalibrationReport::from_bins(&bins)?, bins))
}

/// 1-based fractional ranks; tied values share their average rank.
pub fn fractional_ranks<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite input"));
    let mut ranks = vec![T::zero(); x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = T::of_usize(start + 1 + end) / T::of(2.0);
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of fractional ranks.
pub fn spearman_rank_correlation<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} observations",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("need at least two observations"));
    }
    if let Some(index) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

fn pearson<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let n = T::of_usize(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab = sab + dx * dy;
        saa = saa + dx * dx;
        sbb = sbb + dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return Err(Error::Undefined("rank correlation of a constant vector"));
    }
    Ok((sab / (saa * sbb).sqrt()).max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow<T> {
    /// Zero-shot accuracy minus accuracy on augmented views.
    pub gap: T,
    /// ZERO accuracy minus zero-shot accuracy.
    pub improvement: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorGapReport<T> {
    pub rows: Vec<GapRow<T>>,
    /// `None` when either column is constant or there are fewer than two rows.
    pub spearman: Option<T>,
}

pub fn error_gap_report<T: Scalar>(
    zeroshot_acc: &[T],
    augmented_acc: &[T],
    zero_acc: &[T],
) -> Result<ErrorGapReport<T>> {
    if zeroshot_acc.len() != augmented_acc.len() || zeroshot_acc.len() != zero_acc.len() {
        return Err(Error::DimensionMismatch(format!(
            "accuracy columns have lengths {}, {}, {}",
            zeroshot_acc.len(),
            augmented_acc.len(),
            zero_acc.len()
        )));
    }
    let rows: Vec<GapRow<T>> = zeroshot_acc
        .iter()
        .zip(augmented_acc)
        .zip(zero_acc)
        .map(|((&zs, &aug), &z)| GapRow {
            gap: zs - aug,
            improvement: z - zs,
        })
        .collect();
    let gaps: Vec<T> = rows.iter().map(|r| r.gap).collect();
    let imps: Vec<T> = rows.iter().map(|r| r.improvement).collect();
    let spearman = spearman_rank_correlation(&gaps, &imps).ok();
    Ok(ErrorGapReport { rows, spearman })
}
