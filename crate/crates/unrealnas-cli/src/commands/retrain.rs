//! `unrealnas retrain`: train a derived genotype from scratch. Writes a
//! per-epoch CSV report, a JSON summary consumed by `analyze difficulty`,
//! an accuracy plot, and the resolved-config echo.

use crate::args::RetrainArgs;
use crate::artifacts::{ensure_dir, write_bytes, write_csv, write_echo, write_json};
use crate::config::{dataset_stem, load_overlay, require, resolve_seed};
use crate::plot::{line_plot, Series};
use crate::CliError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use unrealnas::datagen::{load_dataset, make_split, DatasetKind, UnrealDataset};
use unrealnas::engine::{train_fixed, EngineError, TrainConfig, TrainReport};
use unrealnas::searchspace::{CellGenotype, SuperNetConfig};

/// Provenance block in the retrain summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDescription {
    pub kind: DatasetKind,
    pub n: usize,
    pub d_rand: u32,
}

impl DatasetDescription {
    pub fn of(ds: &UnrealDataset) -> Self {
        DatasetDescription {
            kind: ds.kind,
            n: ds.n(),
            d_rand: ds.labels.d_rand,
        }
    }
}

/// Everything `analyze difficulty` needs from a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainSummary {
    pub dataset: DatasetDescription,
    pub net: SuperNetConfig,
    pub train: TrainConfig,
    pub genotype: CellGenotype,
    pub report: TrainReport,
}

#[derive(Debug, Serialize)]
struct RetrainEcho {
    genotype: PathBuf,
    data: PathBuf,
    out: PathBuf,
    net: SuperNetConfig,
    train: TrainConfig,
}

pub fn run(args: RetrainArgs) -> Result<(), CliError> {
    let file: RetrainArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let genotype_path = require(a.genotype, "genotype")?;
    let data = dataset_stem(&require(a.data, "data")?);
    let out = a.out.unwrap_or_else(|| PathBuf::from("retrain-run"));
    let seed = resolve_seed(a.seed)?;

    let genotype_text = std::fs::read_to_string(&genotype_path).map_err(|e| {
        CliError::usage(format!("cannot read genotype {}: {e}", genotype_path.display()))
    })?;
    let genotype = CellGenotype::from_json(&genotype_text).map_err(|e| {
        CliError::usage(format!("malformed genotype {}: {e}", genotype_path.display()))
    })?;
    genotype.validate()?;

    let ds = load_dataset(&data)?;
    let split = make_split(&ds);

    let net_cfg = SuperNetConfig {
        num_nodes: genotype.num_nodes(),
        channels: a.channels.unwrap_or(8),
        cells: a.cells.unwrap_or(4),
        num_classes: split.train.num_classes() as usize,
        input_channels: 3,
    };
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(100),
        batch_size: a.batch_size.unwrap_or(64),
        lr: a.lr.unwrap_or(0.025),
        momentum: a.momentum.unwrap_or(0.9),
        // Unreal runs default to no weight decay, like the search phase.
        weight_decay: a
            .weight_decay
            .unwrap_or(if ds.kind == DatasetKind::Real { 3e-4 } else { 0.0 }),
        grad_clip: a.grad_clip.unwrap_or(5.0),
        seed,
    };

    ensure_dir(&out)?;
    let echo = RetrainEcho {
        genotype: genotype_path.clone(),
        data: data.clone(),
        out: out.clone(),
        net: net_cfg.clone(),
        train: cfg.clone(),
    };
    write_echo(&out.join("config.json"), "retrain", &echo)?;

    let outcome = match train_fixed(&genotype, &split, &net_cfg, &cfg) {
        Ok(o) => o,
        Err(EngineError::DivergedTraining { epoch, reason, report }) => {
            write_report_csv(&out.join("report.csv"), &report)?;
            return Err(CliError::Diverged(format!(
                "training diverged at epoch {epoch}: {reason} (partial report retained in {})",
                out.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let report = outcome.report;

    write_report_csv(&out.join("report.csv"), &report)?;
    let summary = RetrainSummary {
        dataset: DatasetDescription::of(&ds),
        net: net_cfg,
        train: cfg,
        genotype,
        report: report.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_bytes(&out.join("accuracy.svg"), accuracy_plot(&report).as_bytes())?;

    println!(
        "retrain complete: {} epochs, final train_acc={:.4} val_acc={:.4} → {}",
        report.epochs.len(),
        report.final_train().acc,
        report.final_val().acc,
        out.join("summary.json").display(),
    );
    Ok(())
}

/// One row per completed epoch; initial (untrained) metrics live only in
/// the JSON summary.
fn write_report_csv(path: &Path, report: &TrainReport) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format!("{:.6}", e.train.loss),
                format!("{:.6}", e.train.acc),
                format!("{:.6}", e.val.loss),
                format!("{:.6}", e.val.acc),
            ]
        })
        .collect();
    write_csv(
        path,
        &["epoch", "train_loss", "train_acc", "val_loss", "val_acc"],
        &rows,
    )
}

fn accuracy_plot(report: &TrainReport) -> String {
    let train: Vec<(f64, f64)> = report
        .epochs
        .iter()
        .map(|e| (e.epoch as f64, e.train.acc))
        .collect();
    let val: Vec<(f64, f64)> = report
        .epochs
        .iter()
        .map(|e| (e.epoch as f64, e.val.acc))
        .collect();
    line_plot(
        "retrain accuracy",
        "epoch",
        "accuracy",
        &[Series::new("train", 0, train), Series::new("val", 1, val)],
    )
}
