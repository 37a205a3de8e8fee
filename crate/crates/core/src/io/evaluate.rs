use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Dataset, SampleRecord};
use crate::ensemble::{label_group_marginal_error, risk_bound_check, LabelGroup, LabelGroupReport, RiskLoss};
use crate::kernel::{zero_predict_sample, LimitMode, TieBreakStrategy};
use crate::math::{
    argmax_set, cosine_logits, ensemble_text_embeddings, softmax_rows, EmbeddingMatrix, Matrix, Temperature,
};
use crate::{Error, Result, ZeroConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroShotPrediction {
    pub class: usize,
    /// Several classes shared the maximum similarity; the lowest index was taken.
    pub tie: bool,
}

/// Argmax of cosine similarity between one embedding and the class texts.
pub fn zeroshot_predict(source: &[f64], text_embs: &EmbeddingMatrix<f64>) -> Result<ZeroShotPrediction> {
    if source.len() != text_embs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "source dim {} vs text dim {}",
            source.len(),
            text_embs.dim()
        )));
    }
    if text_embs.rows() == 0 {
        return Err(Error::EmptyInput("no classes"));
    }
    let sims: Vec<f64> = (0..text_embs.rows())
        .map(|c| source.iter().zip(text_embs.row(c)).map(|(a, b)| a * b).sum())
        .collect();
    let winners = argmax_set(&sims);
    Ok(ZeroShotPrediction {
        class: winners[0],
        tie: winners.len() > 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Source view (view 0) against the first template.
    ZeroShot,
    /// ZERO over all views against the first template.
    Zero,
    /// ZERO against the re-normalized mean of all templates.
    ZeroEnsemble,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ZeroShot, Method::Zero, Method::ZeroEnsemble];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::Zero => "zero",
            Method::ZeroEnsemble => "zero-ensemble",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
    }
}

/// Stable 64-bit key for a sample id (FNV-1a), used to pick its random stream.
pub fn sample_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub gamma: f64,
    pub tau: f64,
    pub tie_break: TieBreakStrategy,
    pub seed: u64,
    pub limit: LimitMode,
    pub n_views: usize,
    pub templates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Samples whose prediction needed tie-breaking.
    pub ties: usize,
    /// Greedy tie-breaks that exhausted the discarded views.
    pub tie_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub views_per_sample: usize,
    pub kept_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_ensemble: Option<usize>,
    /// Methods (by name) that hit a tie on this sample.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ties: Vec<Method>,
}

impl SamplePrediction {
    pub fn get(&self, m: Method) -> Option<usize> {
        match m {
            Method::ZeroShot => self.zero_shot,
            Method::Zero => self.zero,
            Method::ZeroEnsemble => self.zero_ensemble,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub config: ConfigEcho,
    pub methods: Vec<MethodSummary>,
    pub filter: FilterStats,
    /// Sorted by sample id.
    pub predictions: Vec<SamplePrediction>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Per-sample predictions, one column per evaluated method.
    pub fn predictions_csv(&self) -> String {
        let methods: Vec<Method> = self.methods.iter().map(|m| m.method).collect();
        let mut out = String::from("id,label");
        for m in &methods {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        for p in &self.predictions {
            out.push_str(&format!("{},{}", p.id, p.label));
            for &m in &methods {
                out.push_str(&format!(",{}", p.get(m).map_or(String::new(), |c| c.to_string())));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

struct SampleOutcome {
    prediction: SamplePrediction,
    fallbacks: Vec<Method>,
}

/// Runs the requested methods over every sample of `dataset`.
///
/// `cfg.tau` is used as given; see [`Dataset::zero_config`] to take τ from the
/// manifest. Random tie-breaks draw from stream [`sample_key`]`(id)`, so the
/// report does not depend on record order.
pub fn evaluate_dataset(dataset: &Dataset, methods: &[Method], cfg: &ZeroConfig<f64>) -> Result<EvaluationReport> {
    cfg.validate()?;
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    let ensembled = if methods.contains(&Method::ZeroEnsemble) {
        if dataset.text.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "zero-ensemble needs at least 2 templates, manifest has {}",
                dataset.text.len()
            )));
        }
        Some(ensemble_text_embeddings(&dataset.text)?)
    } else {
        None
    };
    let text = &dataset.text[0];

    let outcomes: Vec<SampleOutcome> = dataset
        .manifest
        .samples
        .par_iter()
        .map(|s| evaluate_sample(dataset, s, &methods, text, ensembled.as_ref(), cfg))
        .collect::<Result<_>>()?;

    let summaries = methods
        .iter()
        .map(|&m| {
            let correct = outcomes
                .iter()
                .filter(|o| o.prediction.get(m) == Some(o.prediction.label))
                .count();
            let total = outcomes.len();
            MethodSummary {
                method: m,
                correct,
                total,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
                ties: outcomes.iter().filter(|o| o.prediction.ties.contains(&m)).count(),
                tie_fallbacks: outcomes.iter().filter(|o| o.fallbacks.contains(&m)).count(),
            }
        })
        .collect();

    let mut predictions: Vec<SamplePrediction> = outcomes.into_iter().map(|o| o.prediction).collect();
    predictions.sort_by(|a, b| a.id.cmp(&b.id));
    let n = dataset.manifest.n_views;
    Ok(EvaluationReport {
        dataset: dataset.manifest.dataset.clone(),
        config: ConfigEcho {
            gamma: cfg.gamma,
            tau: cfg.tau,
            tie_break: cfg.strategy,
            seed: cfg.seed,
            limit: cfg.limit,
            n_views: n,
            templates: dataset.text.len(),
        },
        methods: summaries,
        filter: FilterStats {
            views_per_sample: n,
            kept_per_sample: crate::kernel::keep_count(n, cfg.gamma),
        },
        predictions,
    })
}

fn evaluate_sample(
    dataset: &Dataset,
    sample: &SampleRecord,
    methods: &[Method],
    text: &EmbeddingMatrix<f64>,
    ensembled: Option<&EmbeddingMatrix<f64>>,
    cfg: &ZeroConfig<f64>,
) -> Result<SampleOutcome> {
    let views = dataset.views(sample);
    let key = sample_key(&sample.id);
    let mut prediction = SamplePrediction {
        id: sample.id.clone(),
        label: sample.label,
        zero_shot: None,
        zero: None,
        zero_ensemble: None,
        ties: Vec::new(),
    };
    let mut fallbacks = Vec::new();
    for &m in methods {
        let (class, tie, fallback) = match m {
            Method::ZeroShot => {
                let p = zeroshot_predict(views.row(0), text)?;
                (p.class, p.tie, false)
            }
            Method::Zero | Method::ZeroEnsemble => {
                let t = if m == Method::Zero {
                    text
                } else {
                    ensembled.expect("built above")
                };
                let r = zero_predict_sample(&views, t, cfg, key)?;
                (r.predicted_class, r.tie_occurred, r.tie_fallback)
            }
        };
        match m {
            Method::ZeroShot => prediction.zero_shot = Some(class),
            Method::Zero => prediction.zero = Some(class),
            Method::ZeroEnsemble => prediction.zero_ensemble = Some(class),
        }
        if tie {
            prediction.ties.push(m);
        }
        if fallback {
            fallbacks.push(m);
        }
    }
    Ok(SampleOutcome { prediction, fallbacks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub loss: RiskLoss,
    pub samples: usize,
    pub holds: usize,
    pub mean_lhs: f64,
    pub mean_rhs: f64,
    /// Largest `lhs − rhs` seen (≤ 0 when the bound always holds).
    pub max_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub dataset: String,
    pub tau: f64,
    pub losses: Vec<RiskSummary>,
    /// Source-view predictions grouped by true label.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_groups: Option<LabelGroupReport>,
}

/// Per sample, checks `ℓ(y, p̄) ≤ mean ℓ(y, p_i)` over all views at temperature
/// `tau` against the first template, and compares source-view error with the
/// error of marginalizing over each label group.
pub fn risk_check_dataset(dataset: &Dataset, tau: f64) -> Result<RiskReport> {
    let t = Temperature::new(tau)?;
    let text = &dataset.text[0];
    let probs: Vec<(usize, Matrix<f64>)> = dataset
        .manifest
        .samples
        .par_iter()
        .map(|s| {
            let logits = cosine_logits(&dataset.views(s), text)?;
            Ok((s.label, softmax_rows(&logits, t)?))
        })
        .collect::<Result<_>>()?;

    let mut losses = Vec::new();
    for loss in [RiskLoss::L1, RiskLoss::L2] {
        let checks = probs
            .iter()
            .map(|(label, p)| risk_bound_check(*label, p, loss))
            .collect::<Result<Vec<_>>>()?;
        let n = checks.len().max(1) as f64;
        losses.push(RiskSummary {
            loss,
            samples: checks.len(),
            holds: checks.iter().filter(|c| c.holds).count(),
            mean_lhs: checks.iter().map(|c| c.lhs).sum::<f64>() / n,
            mean_rhs: checks.iter().map(|c| c.rhs).sum::<f64>() / n,
            max_excess: checks.iter().map(|c| c.lhs - c.rhs).fold(f64::NEG_INFINITY, f64::max),
        });
    }

    let mut groups: Vec<LabelGroup> = Vec::new();
    for label in 0..dataset.manifest.num_classes {
        let rows: Vec<&[f64]> = probs
            .iter()
            .filter(|(l, _)| *l == label)
            .map(|(_, p)| p.row(0))
            .collect();
        if !rows.is_empty() {
            groups.push(LabelGroup {
                label,
                predictions: Matrix::from_rows(&rows)?,
            });
        }
    }
    let label_groups = if groups.is_empty() {
        None
    } else {
        Some(label_group_marginal_error(&groups)?)
    };
    Ok(RiskReport {
        dataset: dataset.manifest.dataset.clone(),
        tau,
        losses,
        label_groups,
    })
}
