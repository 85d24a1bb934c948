use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "egin", version, about = "Graph-embedding CTR model: data, training, evaluation")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file; missing keys take their defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set dim=16` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic behavior log plus train/valid samples
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Build graph edges for every sample and write them as TSV
    BuildEdges {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Labeled samples file
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Edge TSV output
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train graph embeddings and the CTR network
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training samples (defaults to the config's train_path)
        #[arg(long)]
        train: Option<PathBuf>,
        /// Validation samples for periodic AUC (optional)
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Model directory to write
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a samples file with a trained model
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model directory
        #[arg(long)]
        model: Option<PathBuf>,
        /// Samples to score (defaults to the config's valid_path)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report RelaImpr against this baseline AUC
        #[arg(long)]
        baseline_auc: Option<f64>,
    },
    /// Train the full model, its ablations and the sum-pooling baseline
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training samples
        #[arg(long)]
        train: Option<PathBuf>,
        /// Samples the AUCs are measured on
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Write graph embeddings as `type \t id \t v_1 ... v_dim`
    ExportEmb {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model directory
        #[arg(long)]
        model: Option<PathBuf>,
        /// TSV output
        #[arg(long)]
        out: PathBuf,
        /// item, query or all
        #[arg(long, default_value = "all")]
        kind: String,
    },
    /// Pairwise cosine matrix for chosen ids and category similarity averages
    AnalyzeEmb {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model directory
        #[arg(long)]
        model: Option<PathBuf>,
        /// item or query
        #[arg(long, default_value = "item")]
        kind: String,
        /// Comma-separated ids for the similarity matrix
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        /// Matrix TSV output (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// `id \t category` file for intra/inter-category averages
        #[arg(long)]
        categories: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg, &out),
        Command::BuildEdges { cfg, samples, out } => commands::build_edges(&cfg, samples, &out),
        Command::Train { cfg, train, valid, out } => commands::train(&cfg, train, valid, out),
        Command::Eval {
            cfg,
            model,
            data,
            baseline_auc,
        } => commands::eval(&cfg, model, data, baseline_auc),
        Command::Ablate { cfg, train, valid } => commands::ablate(&cfg, train, valid),
        Command::ExportEmb { cfg, model, out, kind } => commands::export_emb(&cfg, model, &out, &kind),
        Command::AnalyzeEmb {
            cfg,
            model,
            kind,
            ids,
            out,
            categories,
        } => commands::analyze_emb(&cfg, model, &kind, &ids, out, categories),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
