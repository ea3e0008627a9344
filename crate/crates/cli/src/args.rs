use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "trackpulse", version, about = "Simulate drive-by axle-box signals and estimate per-sleeper track stiffness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset of labelled axle-box acceleration records.
    Generate(GenerateArgs),
    /// Train a model on a dataset with a seeded 60/20/20 split.
    Train(TrainArgs),
    /// Compute RMSE/MAPE metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write per-sleeper predictions as CSV.
    Predict(PredictArgs),
    /// Render ground truth against predictions as SVG plus CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    /// Added noise variance as a fraction of mean signal power.
    #[arg(long, default_value_t = 0.0)]
    pub noise_ratio: f64,
    /// Fractions of constant, reduce-one and reduce-three records.
    #[arg(long, value_parser = parse_mix)]
    pub mix: Option<[f64; 3]>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with a full simulator configuration.
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    #[arg(long)]
    pub speed_kmh: Option<f64>,
    #[arg(long)]
    pub sleepers: Option<usize>,
    #[arg(long)]
    pub buffer_sleepers: Option<usize>,
    #[arg(long)]
    pub samples_per_span: Option<usize>,
    #[arg(long)]
    pub elements_per_span: Option<usize>,
    #[arg(long)]
    pub lead_in_spans: Option<usize>,
    #[arg(long)]
    pub substeps: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = ["cnn-lstm", "lstm-lstm", "cnn-bilstm", "lstm-bilstm"])]
    pub arch: String,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Seeds both the split and the model initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Checkpoint path; the loss log goes next to it unless `--log` is set.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Split seed; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report the labels themselves as predictions.
    #[arg(long, hide = true)]
    pub debug_perfect: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Record indices (comma separated); all records when omitted.
    #[arg(long, value_delimiter = ',')]
    pub record: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub records: Vec<usize>,
    /// SVG path; the CSV is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_mix(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated fractions, got {s:?}"));
    }
    let mut mix = [0.0; 3];
    for (m, p) in mix.iter_mut().zip(parts) {
        *m = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(mix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parsing() {
        assert_eq!(parse_mix("1,0,0").unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(parse_mix("0.5, 0.25,0.25").unwrap(), [0.5, 0.25, 0.25]);
        assert!(parse_mix("1,0").is_err());
        assert!(parse_mix("a,b,c").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
