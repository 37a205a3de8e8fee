//! Toy-scale study of marginal entropy minimization (MEM).
//!
//! A frozen text encoder is replaced by a normalized linear map
//! `z_c = normalize(W · [flatten(ctx); t_c])`, which keeps the structure that
//! matters here: class embeddings are smooth functions of shared trainable
//! context vectors. On top of it we evaluate the MEM loss `H(p̄)`, its exact
//! gradient with respect to the context, one gradient-descent step, and how
//! often that step leaves `argmax p̄` unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::spearman_rank_correlation;
use crate::kernel::{confidence_filter, FilterConfig};
use crate::math::{
    argmax, cosine_logits, entropy, marginal_distribution, softmax_rows, softmax_temperature, EmbeddingMatrix, Matrix,
    Temperature,
};
use crate::{Error, Result};

/// Pre-normalization norms below this are treated as zero.
const MIN_NORM: f64 = 1e-9;

/// Shapes of a random toy instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub n_views: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub ctx_dim: usize,
    pub n_ctx: usize,
    pub token_dim: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            n_views: 8,
            n_classes: 10,
            embed_dim: 16,
            ctx_dim: 4,
            n_ctx: 2,
            token_dim: 4,
        }
    }
}

impl ToyDims {
    pub fn input_dim(&self) -> usize {
        self.ctx_dim * self.n_ctx + self.token_dim
    }

    fn validate(&self) -> Result<()> {
        if self.n_views < 2 || self.n_classes < 2 {
            return Err(Error::InvalidParameter(
                "need at least two views and two classes".into(),
            ));
        }
        if self.ctx_dim * self.n_ctx == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidParameter(
                "context and embedding must be non-empty".into(),
            ));
        }
        if self.input_dim() > self.embed_dim {
            return Err(Error::InvalidParameter(format!(
                "W cannot have full column rank: input dim {} exceeds embedding dim {}",
                self.input_dim(),
                self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Trainable prompt: `n_ctx` vectors of size `ctx_dim`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVectors {
    pub n_ctx: usize,
    pub ctx_dim: usize,
    pub values: Vec<f64>,
}

impl ContextVectors {
    pub fn new(n_ctx: usize, ctx_dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_ctx * ctx_dim {
            return Err(Error::DimensionMismatch(format!(
                "{n_ctx}x{ctx_dim} context needs {} values, got {}",
                n_ctx * ctx_dim,
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { n_ctx, ctx_dim, values })
    }

    pub fn zeros(n_ctx: usize, ctx_dim: usize) -> Self {
        Self {
            n_ctx,
            ctx_dim,
            values: vec![0.0; n_ctx * ctx_dim],
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.n_ctx == other.n_ctx && self.ctx_dim == other.ctx_dim
    }
}

/// `z_c = normalize(W · [flatten(ctx); t_c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    weights: Matrix<f64>,
    class_tokens: Matrix<f64>,
    n_ctx: usize,
    ctx_dim: usize,
}

impl ToyEncoder {
    pub fn new(weights: Matrix<f64>, class_tokens: Matrix<f64>, n_ctx: usize, ctx_dim: usize) -> Result<Self> {
        if weights.cols() != n_ctx * ctx_dim + class_tokens.cols() {
            return Err(Error::DimensionMismatch(format!(
                "W has {} columns, expected {} context + {} token",
                weights.cols(),
                n_ctx * ctx_dim,
                class_tokens.cols()
            )));
        }
        if !full_column_rank(&weights) {
            return Err(Error::InvalidParameter("W is rank deficient".into()));
        }
        Ok(Self {
            weights,
            class_tokens,
            n_ctx,
            ctx_dim,
        })
    }

    /// Standard-normal `W` and class tokens, redrawn until `W` has full column rank.
    pub fn random(rng: &mut ChaCha8Rng, dims: &ToyDims) -> Result<Self> {
        dims.validate()?;
        loop {
            let w = normal_matrix(rng, dims.embed_dim, dims.input_dim());
            let tokens = normal_matrix(rng, dims.n_classes, dims.token_dim);
            match Self::new(w, tokens, dims.n_ctx, dims.ctx_dim) {
                Err(Error::InvalidParameter(_)) => continue,
                other => return other,
            }
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_tokens.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix<f64> {
        &self.weights
    }

    /// Same encoder with `W` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.map(|w| w * factor),
            ..self.clone()
        }
    }

    /// Unnormalized `W x_c` per class.
    fn project(&self, ctx: &ContextVectors) -> Result<Vec<Vec<f64>>> {
        if ctx.n_ctx != self.n_ctx || ctx.ctx_dim != self.ctx_dim {
            return Err(Error::DimensionMismatch(format!(
                "context is {}x{}, encoder expects {}x{}",
                ctx.n_ctx, ctx.ctx_dim, self.n_ctx, self.ctx_dim
            )));
        }
        let split = ctx.values.len();
        Ok(self
            .class_tokens
            .iter_rows()
            .map(|token| {
                self.weights
                    .iter_rows()
                    .map(|w| {
                        let (wc, wt) = w.split_at(split);
                        dot(wc, &ctx.values) + dot(wt, token)
                    })
                    .collect()
            })
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Matrix::new(rows, cols, data).expect("normal draws are finite")
}

/// Modified Gram–Schmidt on the columns.
fn full_column_rank(m: &Matrix<f64>) -> bool {
    let (rows, cols) = (m.rows(), m.cols());
    if cols > rows {
        return false;
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| m.get(i, j)).collect();
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for q in &basis {
            let proj = dot(q, &v);
            v.iter_mut().zip(q).for_each(|(x, qi)| *x -= proj * qi);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale.max(1.0) {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    true
}

/// Class text embeddings for the given context.
pub fn toy_text_embeddings(enc: &ToyEncoder, ctx: &ContextVectors) -> Result<EmbeddingMatrix<f64>> {
    let projected = enc.project(ctx)?;
    for (c, v) in projected.iter().enumerate() {
        if dot(v, v).sqrt() < MIN_NORM {
            return Err(Error::ZeroNorm(format!("class {c} projection")));
        }
    }
    EmbeddingMatrix::normalized(Matrix::from_rows(&projected)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemConfig {
    /// Gradient-descent step size.
    pub lambda: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for MemConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 0.1,
            gamma: 0.5,
        }
    }
}

impl MemConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be non-negative, got {}",
                self.lambda
            )));
        }
        FilterConfig::new(self.gamma, self.tau).map(|_| ())
    }

    fn temperature(&self) -> Result<Temperature<f64>> {
        Temperature::new(self.tau)
    }
}

/// Confidence mask at `ctx`; frozen for the subsequent gradient step.
pub fn mem_filter_mask(
    image_embs: &EmbeddingMatrix<f64>,
    enc: &ToyEncoder,
    ctx: &ContextVectors,
    cfg: &MemConfig,
) -> Result<Vec<bool>> {
    let probs = view_probs(image_embs, enc, ctx, cfg.tau)?;
    Ok(confidence_filter(&probs, &FilterConfig::new(cfg.gamma, cfg.tau)?)?.kept)
}

fn view_probs(
    image_embs: &EmbeddingMatrix<f64>,
    enc: &ToyEncoder,
    ctx: &ContextVectors,
    tau: f64,
) -> Result<Matrix<f64>> {
    let text = toy_text_embeddings(enc, ctx)?;
    softmax_rows(&cosine_logits(image_embs, &text)?, Temperature::new(tau)?)
}

/// Marginal over the masked views at `ctx`.
pub fn mem_marginal(
    image_embs: &EmbeddingMatrix<f64>,
    enc: &ToyEncoder,
    ctx: &ContextVectors,
    tau: f64,
    mask: &[bool],
) -> Result<Vec<f64>> {
    marginal_distribution(&view_probs(image_embs, enc, ctx, tau)?, mask)
}

/// `H(p̄)` over the γ-filtered views, with the filter computed at `ctx`.
pub fn mem_loss(
    image_embs: &EmbeddingMatrix<f64>,
    enc: &ToyEncoder,
    ctx: &ContextVectors,
    cfg: &MemConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mask = mem_filter_mask(image_embs, enc, ctx, cfg)?;
    mem_loss_masked(image_embs, enc, ctx, cfg.tau, &mask)
}

pub fn mem_loss_masked(
    image_embs: &EmbeddingMatrix<f64>,
    enc: &ToyEncoder,
    ctx: &ContextVectors,
    tau: f64,
    mask: &[bool],
) -> Result<f64> {
    Ok(entropy(&mem_marginal(image_embs, enc, ctx, tau, mask)?))
}

/// Analytic `∇_ctx H(p̄)`, mask computed at `ctx` and held fixed.
pub fn mem_gradient(
    image_embs: &EmbeddingMatrix<f64>,
    enc: &ToyEncoder,
    ctx: &ContextVectors,
    cfg: &MemConfig,
) -> Result<ContextVectors> {
    cfg.validate()?;
    let mask = mem_filter_mask(image_embs, enc, ctx, cfg)?;
    mem_gradient_masked(image_embs, enc, ctx, cfg.tau, &mask)
}

/// Chain rule through softmax, marginalization, row normalization and `W`:
///
/// - `∂H/∂s_ic = p_ic (a_c − Σ_k p_ik a_k) / (K τ)` with `a = −ln p̄`
/// - `∂H/∂u_c = Σ_i ∂H/∂s_ic · z_i`
/// - `∂H/∂v_c = (I − u_c u_cᵀ) ∂H/∂u_c / ‖v_c‖`
/// - `∂H/∂x_c = Wᵀ ∂H/∂v_c`, summed over classes on the context slots.
pub fn mem_gradient_masked(
    image_embs: &EmbeddingMatrix<f64>,
    enc: &ToyEncoder,
    ctx: &ContextVectors,
    tau: f64,
    mask: &[bool],
) -> Result<ContextVectors> {
    let tau_t = Temperature::new(tau)?;
    if mask.len() != image_embs.rows() {
        return Err(Error::DimensionMismatch(format!(
            "mask covers {} views, have {}",
            mask.len(),
            image_embs.rows()
        )));
    }
    let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if kept.is_empty() {
        return Err(Error::EmptyMask);
    }
    let projected = enc.project(ctx)?;
    let text = toy_text_embeddings(enc, ctx)?;
    let logits = cosine_logits(image_embs, &text)?;
    let c_count = text.rows();
    let d = text.dim();

    let probs: Vec<Vec<f64>> = kept
        .iter()
        .map(|&i| softmax_temperature(logits.row(i), tau_t))
        .collect::<Result<_>>()?;
    let k = kept.len() as f64;
    let mut pbar = vec![0.0; c_count];
    for p in &probs {
        pbar.iter_mut().zip(p).for_each(|(m, x)| *m += x / k);
    }
    let a: Vec<f64> = pbar.iter().map(|&m| if m > 0.0 { -m.ln() } else { 0.0 }).collect();

    // ∂H/∂u_c
    let mut grad_u = vec![vec![0.0; d]; c_count];
    for (&i, p) in kept.iter().zip(&probs) {
        let mean_a: f64 = p
            .iter()
            .zip(&a)
            .filter(|(&pc, _)| pc > 0.0)
            .map(|(pc, ac)| pc * ac)
            .sum();
        let z = image_embs.row(i);
        for c in 0..c_count {
            if p[c] == 0.0 {
                continue;
            }
            let w = p[c] * (a[c] - mean_a) / (k * tau);
            grad_u[c].iter_mut().zip(z).for_each(|(g, zj)| *g += w * zj);
        }
    }

    let ctx_len = ctx.values.len();
    let mut grad = vec![0.0; ctx_len];
    for c in 0..c_count {
        let u = text.row(c);
        let norm = dot(&projected[c], &projected[c]).sqrt();
        let radial = dot(u, &grad_u[c]);
        let grad_v: Vec<f64> = grad_u[c]
            .iter()
            .zip(u)
            .map(|(g, uj)| (g - uj * radial) / norm)
            .collect();
        // Wᵀ grad_v restricted to the context columns
        for (row, gv) in enc.weights.iter_rows().zip(&grad_v) {
            grad.iter_mut().zip(&row[..ctx_len]).for_each(|(g, w)| *g += w * gv);
        }
    }
    ContextVectors::new(ctx.n_ctx, ctx.ctx_dim, grad)
}

/// One gradient-descent step: `ctx − λ·grad`.
pub fn mem_step(ctx: &ContextVectors, gradient: &ContextVectors, lambda: f64) -> Result<ContextVectors> {
    if !ctx.same_shape(gradient) {
        return Err(Error::DimensionMismatch("gradient shape differs from context".into()));
    }
    let values = ctx
        .values
        .iter()
        .zip(&gradient.values)
        .map(|(x, g)| x - lambda * g)
        .collect();
    ContextVectors::new(ctx.n_ctx, ctx.ctx_dim, values)
}

/// Probability of class `c` for one image embedding against class embeddings.
pub fn class_probability(c: usize, z_img: &[f64], text_embs: &EmbeddingMatrix<f64>, tau: f64) -> Result<f64> {
    if c >= text_embs.rows() {
        return Err(Error::InvalidParameter(format!("class {c} out of range")));
    }
    if z_img.len() != text_embs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image dim {} vs text dim {}",
            z_img.len(),
            text_embs.dim()
        )));
    }
    let logits: Vec<f64> = (0..text_embs.rows()).map(|k| dot(z_img, text_embs.row(k))).collect();
    Ok(softmax_temperature(&logits, Temperature::new(tau)?)?[c])
}

/// Drop in class `c`'s probability caused by moving from `ctx_pre` to `ctx_post`.
pub fn delta_g(
    c: usize,
    z_img: &[f64],
    enc: &ToyEncoder,
    ctx_pre: &ContextVectors,
    ctx_post: &ContextVectors,
    tau: f64,
) -> Result<f64> {
    let pre = toy_text_embeddings(enc, ctx_pre)?;
    let post = toy_text_embeddings(enc, ctx_post)?;
    Ok(class_probability(c, z_img, &pre, tau)? - class_probability(c, z_img, &post, tau)?)
}

/// A random toy instance: view embeddings, encoder and initial context.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub image_embs: EmbeddingMatrix<f64>,
    pub encoder: ToyEncoder,
    pub ctx: ContextVectors,
}

impl ToyInstance {
    /// Views uniform on the sphere; `W`, tokens and context standard normal.
    pub fn sample(rng: &mut ChaCha8Rng, dims: &ToyDims) -> Result<Self> {
        dims.validate()?;
        let image_embs = EmbeddingMatrix::normalized(normal_matrix(rng, dims.n_views, dims.embed_dim))?;
        let encoder = ToyEncoder::random(rng, dims)?;
        let ctx_values = normal_matrix(rng, dims.n_ctx, dims.ctx_dim).into_vec();
        let ctx = ContextVectors::new(dims.n_ctx, dims.ctx_dim, ctx_values)?;
        Ok(Self {
            image_embs,
            encoder,
            ctx,
        })
    }

    /// Instance `stream` of the family keyed by `seed`.
    pub fn from_seed(seed: u64, stream: u64, dims: &ToyDims) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self::sample(&mut rng, dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub trial: u64,
    pub kept_views: usize,
    pub argmax_pre: usize,
    pub argmax_post: usize,
    pub entropy_pre: f64,
    pub entropy_post: f64,
    /// `p̄(ĉ)` before the step.
    pub condition_lhs: f64,
    /// `(1/K) Σ_i δg(ĉ, z_i)` over the `K` kept views.
    pub condition_rhs: f64,
    /// The same sum scaled by `λ/K` instead of `1/K`.
    pub condition_rhs_scaled: f64,
    pub condition_holds: bool,
    pub condition_holds_scaled: bool,
    pub invariant: bool,
}

/// Marginals before and after one MEM step, plus the record summarizing them.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub record: InvarianceRecord,
    pub marginal_pre: Vec<f64>,
    pub marginal_post: Vec<f64>,
    /// `(1/K) Σ_i δg(c, z_i)` for every class.
    pub mean_delta_g: Vec<f64>,
    pub instance: ToyInstance,
    pub ctx_post: ContextVectors,
}

pub fn run_trial(instance: ToyInstance, cfg: &MemConfig, trial: u64) -> Result<TrialOutcome> {
    cfg.validate()?;
    let ToyInstance {
        image_embs,
        encoder,
        ctx,
    } = &instance;
    let mask = mem_filter_mask(image_embs, encoder, ctx, cfg)?;
    let marginal_pre = mem_marginal(image_embs, encoder, ctx, cfg.tau, &mask)?;
    let grad = mem_gradient_masked(image_embs, encoder, ctx, cfg.tau, &mask)?;
    let ctx_post = mem_step(ctx, &grad, cfg.lambda)?;
    let marginal_post = mem_marginal(image_embs, encoder, &ctx_post, cfg.tau, &mask)?;

    let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let k = kept.len() as f64;
    let pre_text = toy_text_embeddings(encoder, ctx)?;
    let post_text = toy_text_embeddings(encoder, &ctx_post)?;
    let tau = cfg.temperature()?;
    let mut mean_delta_g = vec![0.0; pre_text.rows()];
    for &i in &kept {
        let z = image_embs.row(i);
        let row = |text: &EmbeddingMatrix<f64>| -> Result<Vec<f64>> {
            let l: Vec<f64> = (0..text.rows()).map(|c| dot(z, text.row(c))).collect();
            softmax_temperature(&l, tau)
        };
        let (pre, post) = (row(&pre_text)?, row(&post_text)?);
        for c in 0..mean_delta_g.len() {
            mean_delta_g[c] += (pre[c] - post[c]) / k;
        }
    }

    let argmax_pre = argmax(&marginal_pre).expect("at least two classes");
    let argmax_post = argmax(&marginal_post).expect("at least two classes");
    let lhs = marginal_pre[argmax_pre];
    let rhs = mean_delta_g[argmax_pre];
    let record = InvarianceRecord {
        trial,
        kept_views: kept.len(),
        argmax_pre,
        argmax_post,
        entropy_pre: entropy(&marginal_pre),
        entropy_post: entropy(&marginal_post),
        condition_lhs: lhs,
        condition_rhs: rhs,
        condition_rhs_scaled: cfg.lambda * rhs,
        condition_holds: lhs > rhs,
        condition_holds_scaled: lhs > cfg.lambda * rhs,
        invariant: argmax_pre == argmax_post,
    };
    Ok(TrialOutcome {
        record,
        marginal_pre,
        marginal_post,
        mean_delta_g,
        instance,
        ctx_post,
    })
}

/// One random instance (stream 0 of `seed`), one MEM step.
pub fn invariance_trial(seed: u64, dims: &ToyDims, cfg: &MemConfig) -> Result<InvarianceRecord> {
    let instance = ToyInstance::from_seed(seed, 0, dims)?;
    Ok(run_trial(instance, cfg, 0)?.record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBin {
    /// Highest pre-step entropy in the bin.
    pub entropy_high: f64,
    pub entropy_low: f64,
    pub trials: usize,
    pub invariant: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceSweep {
    pub config: MemConfig,
    pub dims: ToyDims,
    pub seed: u64,
    pub records: Vec<InvarianceRecord>,
    /// Equal-count bins ordered by descending pre-step entropy.
    pub bins: Vec<EntropyBin>,
    pub invariance_ratio: f64,
    /// Spearman ρ between bin index and bin ratio; `None` if ratios are constant.
    pub trend_spearman: Option<f64>,
}

impl InvarianceSweep {
    pub fn records_csv(&self) -> String {
        let mut out = String::from(
            "trial,kept_views,entropy_pre,entropy_post,argmax_pre,argmax_post,condition_lhs,\
             condition_rhs,condition_rhs_scaled,condition_holds,condition_holds_scaled,invariant\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.trial,
                r.kept_views,
                r.entropy_pre,
                r.entropy_post,
                r.argmax_pre,
                r.argmax_post,
                r.condition_lhs,
                r.condition_rhs,
                r.condition_rhs_scaled,
                r.condition_holds,
                r.condition_holds_scaled,
                r.invariant
            ));
        }
        out
    }

    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin,entropy_high,entropy_low,trials,invariant,ratio\n");
        for (i, b) in self.bins.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                b.entropy_high, b.entropy_low, b.trials, b.invariant, b.ratio
            ));
        }
        out
    }
}

/// Runs `trials` independent trials (trial `t` uses stream `t` of `seed`) and
/// buckets them by pre-step marginal entropy.
pub fn invariance_sweep(
    trials: usize,
    dims: &ToyDims,
    cfg: &MemConfig,
    n_entropy_bins: usize,
    seed: u64,
) -> Result<InvarianceSweep> {
    if n_entropy_bins == 0 || trials < n_entropy_bins {
        return Err(Error::InvalidParameter(format!(
            "{trials} trials cannot fill {n_entropy_bins} bins"
        )));
    }
    cfg.validate()?;
    dims.validate()?;
    let records: Vec<InvarianceRecord> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let instance = ToyInstance::from_seed(seed, t, dims)?;
            Ok(run_trial(instance, cfg, t)?.record)
        })
        .collect::<Result<_>>()?;

    let mut by_entropy: Vec<&InvarianceRecord> = records.iter().collect();
    by_entropy.sort_by(|a, b| b.entropy_pre.total_cmp(&a.entropy_pre).then(a.trial.cmp(&b.trial)));
    let mut bins = Vec::with_capacity(n_entropy_bins);
    for b in 0..n_entropy_bins {
        let chunk = &by_entropy[b * trials / n_entropy_bins..(b + 1) * trials / n_entropy_bins];
        let invariant = chunk.iter().filter(|r| r.invariant).count();
        bins.push(EntropyBin {
            entropy_high: chunk.first().map_or(f64::NAN, |r| r.entropy_pre),
            entropy_low: chunk.last().map_or(f64::NAN, |r| r.entropy_pre),
            trials: chunk.len(),
            invariant,
            ratio: invariant as f64 / chunk.len() as f64,
        });
    }
    let index: Vec<f64> = (0..bins.len()).map(|i| i as f64).collect();
    let ratios: Vec<f64> = bins.iter().map(|b| b.ratio).collect();
    let invariant = records.iter().filter(|r| r.invariant).count();
    Ok(InvarianceSweep {
        config: *cfg,
        dims: *dims,
        seed,
        invariance_ratio: invariant as f64 / trials as f64,
        trend_spearman: spearman_rank_correlation(&index, &ratios).ok(),
        records,
        bins,
    })
}
