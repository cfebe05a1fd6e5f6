//! Command-line grammar. Every value flag is optional at parse time so the
//! config-file overlay can supply it; required-ness is enforced after the
//! merge in [`crate::config`].

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "unrealnas",
    version,
    about = "Differentiable architecture search on unreal datasets",
    long_about = "Generates unreal datasets (random-labeled real images, IFS fractals, \
                  Gaussian noise), runs DARTS-style bi-level search on them, retrains \
                  derived genotypes, and reproduces the paper's analyses.\n\
                  Exit codes: 0 success, 2 usage or malformed input, 3 numerical divergence."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset and write images, labels, and manifest files.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Run bi-level architecture search on a generated dataset.
    Search(SearchArgs),
    /// Train a derived genotype from scratch on a dataset.
    Retrain(RetrainArgs),
    /// Empirical probes: difficulty, distinguishability, ablations, plots.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum GenKind {
    /// Randomly-labeled real images (CIFAR binaries or the synthetic stand-in).
    Rlrd(GenRlrdArgs),
    /// Randomly-labeled generative (IFS fractal) images.
    Rlgd(GenRlgdArgs),
    /// Randomly-labeled Gaussian noise.
    Rlrn(GenRlrnArgs),
    /// True-labeled real images for supervised baselines and targets.
    Real(GenRealArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRlrdArgs {
    /// CIFAR binary batch files (3073-byte records), repeatable.
    #[arg(long, num_args = 1..)]
    pub source: Option<Vec<PathBuf>>,
    /// Use N synthetic stand-in images instead of a real corpus.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Number of random label classes (d_rand).
    #[arg(long)]
    pub classes: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output stem; files are written as <stem>.{manifest.json,images.bin,labels.bin}.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRlgdArgs {
    /// Number of accepted fractal categories.
    #[arg(long)]
    pub categories: Option<usize>,
    /// Rendered instances per category (n = categories x instances).
    #[arg(long)]
    pub instances: Option<usize>,
    /// Number of random label classes (d_rand).
    #[arg(long)]
    pub classes: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRlrnArgs {
    /// Number of noise samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of random label classes (d_rand).
    #[arg(long)]
    pub classes: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRealArgs {
    /// CIFAR binary batch files carrying true labels, repeatable.
    #[arg(long, num_args = 1..)]
    pub source: Option<Vec<PathBuf>>,
    /// Use N synthetic stand-in images with cyclic labels instead.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Number of supervised classes.
    #[arg(long)]
    pub classes: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchArgs {
    /// Dataset stem produced by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for genotype, trace, checkpoint, and plots.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Supernet cells (desk scale 4; the paper uses 8).
    #[arg(long)]
    pub cells: Option<usize>,
    /// Initial channels (desk scale 8; the paper uses 16).
    #[arg(long)]
    pub channels: Option<usize>,
    /// Intermediate nodes per cell.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial weight learning rate (cosine-decayed to zero).
    #[arg(long)]
    pub w_lr: Option<f64>,
    #[arg(long)]
    pub w_momentum: Option<f64>,
    #[arg(long)]
    pub w_weight_decay: Option<f64>,
    /// Architecture (alpha) Adam learning rate.
    #[arg(long)]
    pub alpha_lr: Option<f64>,
    #[arg(long)]
    pub alpha_weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Bi-level approximation: first-order or second-order.
    #[arg(long, value_parser = crate::config::parse_order)]
    pub order: Option<unrealnas::engine::BilevelOrder>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainArgs {
    /// Genotype JSON produced by `search`.
    #[arg(long)]
    pub genotype: Option<PathBuf>,
    /// Dataset stem produced by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the report, summary, and plots.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub cells: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCmd {
    /// Convergence-epoch difficulty scores across retrain reports.
    Difficulty(DifficultyArgs),
    /// Proxy-vs-target Kendall-tau rank study over sampled genotypes.
    Distinguish(DistinguishArgs),
    /// Search quality as a function of the number of random classes.
    AblateClasses(AblateClassesArgs),
    /// Plot skip-connection counts per epoch from a search trace.
    SkipDynamics(SkipDynamicsArgs),
    /// Silhouette separability statistics of a dataset.
    Silhouette(SilhouetteArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DifficultyArgs {
    /// Retrain summary JSON files, repeatable.
    #[arg(long = "report", value_name = "PATH")]
    pub reports: Option<Vec<PathBuf>>,
    /// Plateau fraction defining convergence.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistinguishArgs {
    /// Unreal dataset stem used for the proxy trainings.
    #[arg(long)]
    pub unreal: Option<PathBuf>,
    /// Supervised dataset stem used for the target trainings.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Number of uniformly sampled architectures.
    #[arg(long)]
    pub n_arch: Option<usize>,
    /// Probe training epochs on the unreal dataset.
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    /// Target training epochs on the supervised dataset.
    #[arg(long)]
    pub target_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub cells: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Proxy score read at the probe epoch: train-acc or val-acc.
    #[arg(long, value_parser = crate::config::parse_proxy)]
    pub proxy: Option<unrealnas::analysis::ProxyMetric>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateClassesArgs {
    /// Supervised dataset stem the searched genotypes are scored on.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Class counts to sweep, comma-separated (e.g. 2,10,50).
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u32>>,
    /// Seeds to average over, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Unreal dataset family built per cell: rlrn or rlgd.
    #[arg(long)]
    pub kind: Option<String>,
    /// Samples per generated rlrn dataset.
    #[arg(long)]
    pub n: Option<usize>,
    /// Fractal categories per generated rlgd dataset.
    #[arg(long)]
    pub categories: Option<usize>,
    /// Instances per fractal category.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    /// Retraining epochs when scoring each searched genotype.
    #[arg(long)]
    pub eval_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub cells: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipDynamicsArgs {
    /// Search trace (NDJSON) to plot.
    pub trace: Option<PathBuf>,
    /// Output directory; defaults to the trace's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SilhouetteArgs {
    /// Dataset stem produced by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Maximum number of samples used for the pairwise distances.
    #[arg(long)]
    pub sample_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
