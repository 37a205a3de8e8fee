//! `zero-tta` command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use zero_tta::ensemble::{condorcet_profile, majority_error, monte_carlo_majority_error};
use zero_tta::io::{evaluate_dataset, read_embedding_file, risk_check_dataset, sample_key, Dataset, Method};
use zero_tta::kernel::{zero_predict_sample, DEFAULT_GAMMA, DEFAULT_TAU};
use zero_tta::math::ensemble_text_embeddings;
use zero_tta::memlab::{invariance_sweep, MemConfig, ToyDims};
use zero_tta::{
    calibration, EmbeddingMatrix64, EnsembleParams, FilterConfig, LimitMode, TieBreakStrategy, ZeroConfig64,
    ZeroResult64,
};

#[derive(Parser, Debug)]
#[command(
    name = "zero-tta",
    version,
    about = "Zero-temperature test-time adaptation over precomputed embeddings"
)]
struct Cli {
    /// Fraction of most confident views kept, in (0, 1] [default: 0.3]
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Softmax temperature for the confidence filter [default: 0.01, or the manifest's value]
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true, default_value_t = TieBreakStrategy::Greedy)]
    tie_break: TieBreakStrategy,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Reliability-diagram bins
    #[arg(long, global = true, default_value_t = 20)]
    bins: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report here instead of stdout
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict one sample, from a manifest record or from raw ZTEB files
    Predict {
        #[arg(long, requires = "sample", conflicts_with_all = ["views", "text"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        sample: Option<String>,
        /// N×D view embeddings, row 0 the source image
        #[arg(long, requires = "text")]
        views: Option<PathBuf>,
        /// C×D class-text embeddings; repeat to ensemble templates
        #[arg(long)]
        text: Vec<PathBuf>,
        /// Use the mean of all templates instead of the first
        #[arg(long)]
        ensemble: bool,
        #[arg(long, value_enum, default_value_t = Limit::Analytic)]
        limit: Limit,
    },
    /// Top-1 accuracy of the chosen methods over a dataset manifest
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [Method::ZeroShot, Method::Zero])]
        methods: Vec<Method>,
        #[arg(long, value_enum, default_value_t = Limit::Analytic)]
        limit: Limit,
    },
    /// ECE and reliability bins from a CSV with `confidence` and `correct` columns
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        /// Also write the per-bin CSV here
        #[arg(long)]
        bins_out: Option<PathBuf>,
    },
    /// Binomial majority-vote error over grids of ε and N
    EnsembleTheory {
        #[arg(long, value_delimiter = ',', required = true)]
        epsilon: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<u64>,
        /// Add a Monte-Carlo estimate with this many trials
        #[arg(long, default_value_t = 0)]
        mc_trials: u64,
    },
    /// Invariance of the marginal argmax under one entropy-minimization step
    MemSweep {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 10)]
        entropy_bins: usize,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
        #[arg(long, default_value_t = 4)]
        ctx_dim: usize,
        #[arg(long, default_value_t = 2)]
        n_ctx: usize,
        #[arg(long, default_value_t = 4)]
        token_dim: usize,
        /// Also write the per-bin CSV here
        #[arg(long)]
        bins_out: Option<PathBuf>,
    },
    /// Check the marginal-risk bound and label-group errors over a manifest
    RiskCheck {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Limit {
    Analytic,
    MachineEpsilon,
}

impl From<Limit> for LimitMode {
    fn from(l: Limit) -> Self {
        match l {
            Limit::Analytic => LimitMode::Analytic,
            Limit::MachineEpsilon => LimitMode::MachineEpsilon,
        }
    }
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> AnyResult<()> {
    // range-check the shared flags before doing any work
    FilterConfig::new(cli.gamma.unwrap_or(DEFAULT_GAMMA), cli.tau.unwrap_or(DEFAULT_TAU))?;
    let report = match &cli.command {
        Command::Predict {
            manifest,
            sample,
            views,
            text,
            ensemble,
            limit,
        } => predict(
            cli,
            manifest.as_deref(),
            sample.as_deref(),
            views.as_deref(),
            text,
            *ensemble,
            *limit,
        )?,
        Command::Evaluate {
            manifest,
            methods,
            limit,
        } => {
            let dataset = Dataset::load(manifest)?;
            let mut cfg = zero_config(cli, *limit);
            cfg.tau = cli.tau.unwrap_or(dataset.manifest.temperature);
            let report = evaluate_dataset(&dataset, methods, &cfg)?;
            match cli.format {
                Format::Json => report.to_json()?,
                Format::Csv => report.predictions_csv(),
            }
        }
        Command::Calibrate { input, bins_out } => calibrate(cli, input, bins_out.as_deref())?,
        Command::EnsembleTheory { epsilon, n, mc_trials } => ensemble_theory(cli, epsilon, n, *mc_trials)?,
        Command::MemSweep {
            trials,
            lambda,
            entropy_bins,
            views,
            classes,
            embed_dim,
            ctx_dim,
            n_ctx,
            token_dim,
            bins_out,
        } => {
            let dims = ToyDims {
                n_views: *views,
                n_classes: *classes,
                embed_dim: *embed_dim,
                ctx_dim: *ctx_dim,
                n_ctx: *n_ctx,
                token_dim: *token_dim,
            };
            let defaults = MemConfig::default();
            let cfg = MemConfig {
                lambda: *lambda,
                tau: cli.tau.unwrap_or(defaults.tau),
                gamma: cli.gamma.unwrap_or(defaults.gamma),
            };
            let sweep = invariance_sweep(*trials, &dims, &cfg, *entropy_bins, cli.seed)?;
            if let Some(path) = bins_out {
                write_file(path, &sweep.bins_csv())?;
            }
            match cli.format {
                Format::Json => json(&sweep)?,
                Format::Csv => sweep.records_csv(),
            }
        }
        Command::RiskCheck { manifest } => {
            let dataset = Dataset::load(manifest)?;
            let report = risk_check_dataset(&dataset, cli.tau.unwrap_or(dataset.manifest.temperature))?;
            match cli.format {
                Format::Json => json(&report)?,
                Format::Csv => csv_rows(&report.losses)?,
            }
        }
    };
    match &cli.output {
        Some(path) => write_file(path, &report),
        None => {
            io::stdout().lock().write_all(report.as_bytes())?;
            Ok(())
        }
    }
}

fn zero_config(cli: &Cli, limit: Limit) -> ZeroConfig64 {
    ZeroConfig64 {
        gamma: cli.gamma.unwrap_or(DEFAULT_GAMMA),
        tau: cli.tau.unwrap_or(DEFAULT_TAU),
        strategy: cli.tie_break,
        seed: cli.seed,
        limit: limit.into(),
    }
}

fn write_file(path: &Path, contents: &str) -> AnyResult<()> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn json<T: Serialize>(value: &T) -> AnyResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn csv_rows<T: Serialize>(rows: &[T]) -> AnyResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[derive(Serialize)]
struct PredictOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    sample: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(flatten)]
    result: ZeroResult64,
}

#[derive(Serialize)]
struct PredictRow {
    sample: String,
    predicted_class: usize,
    tie_occurred: bool,
    tie_fallback: bool,
    kept_views: usize,
    vote_counts: String,
}

fn predict(
    cli: &Cli,
    manifest: Option<&Path>,
    sample: Option<&str>,
    views: Option<&Path>,
    text: &[PathBuf],
    ensemble: bool,
    limit: Limit,
) -> AnyResult<String> {
    let mut cfg = zero_config(cli, limit);
    let pick = |templates: &[EmbeddingMatrix64]| -> AnyResult<EmbeddingMatrix64> {
        if ensemble {
            Ok(ensemble_text_embeddings(templates)?)
        } else {
            Ok(templates[0].clone())
        }
    };
    let (label, view_embs, text_embs) = match (manifest, views) {
        (Some(m), _) => {
            let id = sample.expect("clap enforces --sample");
            let dataset = Dataset::load(m)?;
            cfg.tau = cli.tau.unwrap_or(dataset.manifest.temperature);
            let record = dataset
                .manifest
                .samples
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| format!("no sample '{id}' in {}", m.display()))?;
            (Some(record.label), dataset.views(record), pick(&dataset.text)?)
        }
        (None, Some(v)) => {
            let templates = text
                .iter()
                .map(read_embedding_file::<f64>)
                .collect::<Result<Vec<_>, _>>()?;
            (None, read_embedding_file::<f64>(v)?, pick(&templates)?)
        }
        (None, None) => return Err("predict needs --manifest/--sample or --views/--text".into()),
    };
    let key = sample.map_or(0, sample_key);
    let result = zero_predict_sample(&view_embs, &text_embs, &cfg, key)?;
    match cli.format {
        Format::Json => json(&PredictOutput {
            sample: sample.map(str::to_owned),
            label,
            result,
        }),
        Format::Csv => csv_rows(&[PredictRow {
            sample: sample.unwrap_or_default().to_owned(),
            predicted_class: result.predicted_class,
            tie_occurred: result.tie_occurred,
            tie_fallback: result.tie_fallback,
            kept_views: result.filter_mask.kept_count(),
            vote_counts: result
                .vote_counts
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        }]),
    }
}

#[derive(serde::Deserialize)]
struct CalibrationRow {
    confidence: f64,
    #[serde(deserialize_with = "flexible_bool")]
    correct: bool,
}

fn flexible_bool<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s: String = serde::Deserialize::deserialize(d)?;
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(serde::de::Error::custom(format!(
            "expected 0/1/true/false, got '{other}'"
        ))),
    }
}

fn calibrate(cli: &Cli, input: &Path, bins_out: Option<&Path>) -> AnyResult<String> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let (mut conf, mut correct) = (Vec::new(), Vec::new());
    for row in reader.deserialize() {
        let row: CalibrationRow = row.map_err(|e| format!("{}: {e}", input.display()))?;
        conf.push(row.confidence);
        correct.push(row.correct);
    }
    let (report, bins) = calibration::calibration_report(&conf, &correct, cli.bins)?;
    if let Some(path) = bins_out {
        write_file(path, &bins.to_csv())?;
    }
    match cli.format {
        Format::Json => json(&report),
        Format::Csv => Ok(bins.to_csv()),
    }
}

#[derive(Serialize)]
struct TheoryRow {
    epsilon: f64,
    n: u64,
    majority_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_std_error: Option<f64>,
}

#[derive(Serialize)]
struct TheoryReport {
    rows: Vec<TheoryRow>,
    /// Per ε, whether the error strictly decreases (ε < ½) or increases (ε > ½)
    /// over the odd sizes requested.
    condorcet: Vec<CondorcetCheck>,
}

#[derive(Serialize)]
struct CondorcetCheck {
    epsilon: f64,
    odd_sizes: Vec<u64>,
    strictly_decreasing: bool,
    strictly_increasing: bool,
}

fn ensemble_theory(cli: &Cli, epsilons: &[f64], ns: &[u64], mc_trials: u64) -> AnyResult<String> {
    let mut rows = Vec::new();
    let mut condorcet = Vec::new();
    for &eps in epsilons {
        for &n in ns {
            let params = EnsembleParams::new(n, eps)?;
            let mc = if mc_trials > 0 {
                Some(monte_carlo_majority_error(&params, mc_trials, cli.seed)?)
            } else {
                None
            };
            rows.push(TheoryRow {
                epsilon: eps,
                n,
                majority_error: majority_error(&params),
                mc_estimate: mc.map(|m| m.estimate),
                mc_std_error: mc.map(|m| m.std_error),
            });
        }
        let mut odd: Vec<u64> = ns.iter().copied().filter(|n| n % 2 == 1).collect();
        odd.sort_unstable();
        odd.dedup();
        if odd.len() >= 2 {
            let profile = condorcet_profile(eps, &odd)?;
            condorcet.push(CondorcetCheck {
                epsilon: eps,
                strictly_decreasing: profile.is_strictly_decreasing(),
                strictly_increasing: profile.is_strictly_increasing(),
                odd_sizes: odd,
            });
        }
    }
    match cli.format {
        Format::Json => json(&TheoryReport { rows, condorcet }),
        Format::Csv => csv_rows(&rows),
    }
}
