//! `unrealnas analyze <subcommand>`: the paper's empirical probes, driven
//! from artifacts produced by `gen`, `search`, and `retrain`.

use crate::args::{
    AblateClassesArgs, DifficultyArgs, DistinguishArgs, SilhouetteArgs, SkipDynamicsArgs,
};
use crate::artifacts::{ensure_dir, write_bytes, write_csv, write_echo, write_json};
use crate::commands::retrain::RetrainSummary;
use crate::config::{dataset_stem, load_overlay, require, resolve_seed};
use crate::plot::{line_plot, Series};
use crate::CliError;
use serde::Serialize;
use std::path::PathBuf;
use unrealnas::analysis::{
    class_count_ablation, convergence_epoch, distinguishability_study, sample_genotypes,
    silhouette_score, ConvergenceOutcome, ProxyMetric, StudyConfig,
};
use unrealnas::datagen::{build_rlgd, build_rlrn, load_dataset, make_split, DatasetKind};
use unrealnas::engine::{SearchConfig, SearchTrace, TrainConfig};
use unrealnas::searchspace::SuperNetConfig;

// ---------------------------------------------------------------------------
// difficulty

#[derive(Debug, Serialize)]
struct DifficultyEcho {
    reports: Vec<PathBuf>,
    tau: f64,
    out: PathBuf,
}

pub fn difficulty(args: DifficultyArgs) -> Result<(), CliError> {
    let file: DifficultyArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let reports = require(a.reports.filter(|r| !r.is_empty()), "report")?;
    let tau = a.tau.unwrap_or(0.99);
    let out = a.out.unwrap_or_else(|| PathBuf::from("analysis"));

    struct Scored {
        path: PathBuf,
        kind: DatasetKind,
        d_rand: u32,
        outcome: ConvergenceOutcome,
    }
    let mut scored = Vec::new();
    for path in &reports {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read report {}: {e}", path.display())))?;
        let summary: RetrainSummary = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("malformed report {}: {e}", path.display())))?;
        let outcome = convergence_epoch(&summary.report, tau, summary.dataset.d_rand)?;
        scored.push(Scored {
            path: path.clone(),
            kind: summary.dataset.kind,
            d_rand: summary.dataset.d_rand,
            outcome,
        });
    }

    ensure_dir(&out)?;
    write_echo(
        &out.join("difficulty.config.json"),
        "analyze difficulty",
        &DifficultyEcho { reports: reports.clone(), tau, out: out.clone() },
    )?;

    let rows: Vec<Vec<String>> = scored
        .iter()
        .map(|s| {
            let (outcome, epoch, final_mean) = match s.outcome {
                ConvergenceOutcome::Converged(e) => ("converged".to_string(), e.to_string(), String::new()),
                ConvergenceOutcome::NotConverged { final_mean, .. } => {
                    ("not-converged".to_string(), String::new(), format!("{final_mean:.6}"))
                }
            };
            vec![
                s.path.display().to_string(),
                s.kind.to_string(),
                s.d_rand.to_string(),
                format!("{tau}"),
                outcome,
                epoch,
                final_mean,
            ]
        })
        .collect();
    write_csv(
        &out.join("difficulty.csv"),
        &["report", "kind", "d_rand", "tau", "outcome", "epoch", "final_mean"],
        &rows,
    )?;

    // Easiest first; unconverged runs rank after every converged one.
    let mut order: Vec<&Scored> = scored.iter().collect();
    order.sort_by_key(|s| match s.outcome {
        ConvergenceOutcome::Converged(e) => (0, e),
        ConvergenceOutcome::NotConverged { .. } => (1, 0),
    });
    for s in order {
        match s.outcome {
            ConvergenceOutcome::Converged(e) => {
                println!("{} {}: convergence epoch {e}", s.kind, s.path.display());
            }
            ConvergenceOutcome::NotConverged { final_mean, floor } => {
                println!(
                    "{} {}: not converged (final mean {final_mean:.4} below floor {floor:.4})",
                    s.kind,
                    s.path.display()
                );
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// distinguish

#[derive(Debug, Serialize)]
struct DistinguishEcho {
    unreal: PathBuf,
    target: PathBuf,
    n_arch: usize,
    study: StudyConfig,
    seed: u64,
    out: PathBuf,
}

pub fn distinguish(args: DistinguishArgs) -> Result<(), CliError> {
    let file: DistinguishArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let unreal_stem = dataset_stem(&require(a.unreal, "unreal")?);
    let target_stem = dataset_stem(&require(a.target, "target")?);
    let n_arch = a.n_arch.unwrap_or(4);
    let seed = resolve_seed(a.seed)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("analysis"));

    let unreal_ds = load_dataset(&unreal_stem)?;
    let target_ds = load_dataset(&target_stem)?;
    let unreal = make_split(&unreal_ds);
    let target = make_split(&target_ds);

    let nodes = a.nodes.unwrap_or(4);
    let batch = a.batch_size.unwrap_or(64);
    let cfg = StudyConfig {
        net: SuperNetConfig {
            num_nodes: nodes,
            channels: a.channels.unwrap_or(8),
            cells: a.cells.unwrap_or(4),
            num_classes: 0, // overridden per dataset by the study
            input_channels: 3,
        },
        probe: TrainConfig {
            epochs: a.probe_epochs.unwrap_or(5),
            batch_size: batch,
            weight_decay: 0.0,
            seed,
            ..TrainConfig::default()
        },
        target: TrainConfig {
            epochs: a.target_epochs.unwrap_or(5),
            batch_size: batch,
            weight_decay: if target_ds.kind == DatasetKind::Real { 3e-4 } else { 0.0 },
            seed,
            ..TrainConfig::default()
        },
        proxy_metric: a.proxy.unwrap_or(ProxyMetric::TrainAcc),
    };

    ensure_dir(&out)?;
    write_echo(
        &out.join("distinguish.config.json"),
        "analyze distinguish",
        &DistinguishEcho {
            unreal: unreal_stem,
            target: target_stem,
            n_arch,
            study: cfg.clone(),
            seed,
            out: out.clone(),
        },
    )?;

    let genotypes = sample_genotypes(n_arch, nodes, seed);
    let study = distinguishability_study(&genotypes, &unreal, &target, &cfg)?;
    write_json(&out.join("distinguish.json"), &study)?;

    match study.tau {
        Some(tau) => println!(
            "distinguish: tau={tau:.4} over {} architectures ({} failed) → {}",
            study.proxy_scores.len(),
            study.failures,
            out.join("distinguish.json").display()
        ),
        None => println!(
            "distinguish: tau undefined (tied scores) over {} architectures ({} failed) → {}",
            study.proxy_scores.len(),
            study.failures,
            out.join("distinguish.json").display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate-classes

#[derive(Debug, Serialize)]
struct AblateEcho {
    target: PathBuf,
    classes: Vec<u32>,
    seeds: Vec<u64>,
    kind: String,
    n: usize,
    categories: usize,
    instances: usize,
    net: SuperNetConfig,
    search: SearchConfig,
    eval: TrainConfig,
    out: PathBuf,
}

pub fn ablate_classes(args: AblateClassesArgs) -> Result<(), CliError> {
    let file: AblateClassesArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let target_stem = dataset_stem(&require(a.target, "target")?);
    let classes = a.classes.unwrap_or_else(|| vec![2, 10, 50]);
    let seeds = a.seeds.unwrap_or_else(|| vec![0]);
    let kind = a.kind.unwrap_or_else(|| "rlrn".to_string());
    let n = a.n.unwrap_or(512);
    let categories = a.categories.unwrap_or(10);
    let instances = a.instances.unwrap_or(20);
    let out = a.out.unwrap_or_else(|| PathBuf::from("analysis"));
    if classes.is_empty() || seeds.is_empty() {
        return Err(CliError::usage("--classes and --seeds must be non-empty"));
    }

    let target_ds = load_dataset(&target_stem)?;
    let target = make_split(&target_ds);

    let net_cfg = SuperNetConfig {
        num_nodes: a.nodes.unwrap_or(4),
        channels: a.channels.unwrap_or(8),
        cells: a.cells.unwrap_or(4),
        num_classes: 0, // set per dataset by the driver
        input_channels: 3,
    };
    let mut search_cfg = SearchConfig::unreal(0); // per-cell seeds set by the driver
    search_cfg.warmup_epochs = a.warmup_epochs.unwrap_or(1);
    search_cfg.search_epochs = a.search_epochs.unwrap_or(5);
    search_cfg.batch_size = a.batch_size.unwrap_or(64);
    let eval_cfg = TrainConfig {
        epochs: a.eval_epochs.unwrap_or(10),
        batch_size: a.batch_size.unwrap_or(64),
        weight_decay: if target_ds.kind == DatasetKind::Real { 3e-4 } else { 0.0 },
        ..TrainConfig::default()
    };

    let build: Box<dyn Fn(u32, u64) -> Result<unrealnas::datagen::UnrealDataset, unrealnas::datagen::DatagenError>> =
        match kind.as_str() {
            "rlrn" => Box::new(move |d, seed| build_rlrn(n, d, seed)),
            "rlgd" => Box::new(move |d, seed| build_rlgd(categories, instances, d, seed)),
            other => {
                return Err(CliError::usage(format!(
                    "unknown --kind '{other}' (expected rlrn or rlgd)"
                )))
            }
        };

    ensure_dir(&out)?;
    write_echo(
        &out.join("ablate-classes.config.json"),
        "analyze ablate-classes",
        &AblateEcho {
            target: target_stem,
            classes: classes.clone(),
            seeds: seeds.clone(),
            kind: kind.clone(),
            n,
            categories,
            instances,
            net: net_cfg.clone(),
            search: search_cfg.clone(),
            eval: eval_cfg.clone(),
            out: out.clone(),
        },
    )?;

    let grid = class_count_ablation(
        build.as_ref(),
        &target,
        &classes,
        &seeds,
        &net_cfg,
        &search_cfg,
        &eval_cfg,
    )?;
    write_json(&out.join("ablate-classes.json"), &grid)?;

    let rows: Vec<Vec<String>> = grid
        .cells
        .iter()
        .map(|c| match &c.outcome {
            Ok(acc) => vec![
                c.d_rand.to_string(),
                c.seed.to_string(),
                "ok".to_string(),
                format!("{acc:.6}"),
            ],
            Err(msg) => vec![
                c.d_rand.to_string(),
                c.seed.to_string(),
                "failed".to_string(),
                msg.clone(),
            ],
        })
        .collect();
    write_csv(
        &out.join("ablate-classes.csv"),
        &["d_rand", "seed", "status", "target_val_acc"],
        &rows,
    )?;

    let means = grid.seed_means();
    let points: Vec<(f64, f64)> = means
        .iter()
        .filter_map(|&(d, m)| m.map(|m| (d as f64, m)))
        .collect();
    write_bytes(
        &out.join("ablate-classes.svg"),
        line_plot(
            "target accuracy vs class count",
            "d_rand",
            "target val accuracy",
            &[Series::new("seed mean", 0, points)],
        )
        .as_bytes(),
    )?;

    for (d, mean) in &means {
        match mean {
            Some(m) => println!("d_rand={d}: mean target val_acc={m:.4}"),
            None => println!("d_rand={d}: all seeds failed"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// skip-dynamics

#[derive(Debug, Serialize)]
struct SkipEcho {
    trace: PathBuf,
    out: PathBuf,
}

pub fn skip_dynamics(args: SkipDynamicsArgs) -> Result<(), CliError> {
    let file: SkipDynamicsArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let trace_path = require(a.trace, "trace (positional)")?;
    let out = a.out.unwrap_or_else(|| {
        trace_path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."))
    });

    let trace = SearchTrace::read_ndjson(&trace_path).map_err(|e| {
        CliError::usage(format!("cannot read trace {}: {e}", trace_path.display()))
    })?;
    if trace.records.is_empty() {
        return Err(CliError::usage(format!(
            "trace {} contains no epoch records",
            trace_path.display()
        )));
    }

    ensure_dir(&out)?;
    write_echo(
        &out.join("skip-dynamics.config.json"),
        "analyze skip-dynamics",
        &SkipEcho { trace: trace_path.clone(), out: out.clone() },
    )?;

    let points: Vec<(f64, f64)> = trace
        .records
        .iter()
        .map(|r| (r.epoch as f64, r.skip_count as f64))
        .collect();
    write_bytes(
        &out.join("skip-dynamics.svg"),
        line_plot(
            "skip connections in the derived genotype",
            "epoch",
            "skip count (normal + reduce)",
            &[Series::new("skip_count", 1, points)],
        )
        .as_bytes(),
    )?;

    let last = trace.records.last().expect("nonempty");
    println!(
        "skip-dynamics: {} epochs, final skip_count={} → {}",
        trace.records.len(),
        last.skip_count,
        out.join("skip-dynamics.svg").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// silhouette

#[derive(Debug, Serialize)]
struct SilhouetteEcho {
    data: PathBuf,
    sample_cap: usize,
    seed: u64,
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct SilhouetteOutput {
    kind: DatasetKind,
    n: usize,
    d_rand: u32,
    sample_cap: usize,
    seed: u64,
    score: f64,
}

pub fn silhouette(args: SilhouetteArgs) -> Result<(), CliError> {
    let file: SilhouetteArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let data = dataset_stem(&require(a.data, "data")?);
    let sample_cap = a.sample_cap.unwrap_or(500);
    let seed = resolve_seed(a.seed)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from("analysis"));

    let ds = load_dataset(&data)?;
    let score = silhouette_score(&ds, sample_cap, seed)?;

    ensure_dir(&out)?;
    write_echo(
        &out.join("silhouette.config.json"),
        "analyze silhouette",
        &SilhouetteEcho { data: data.clone(), sample_cap, seed, out: out.clone() },
    )?;
    write_json(
        &out.join("silhouette.json"),
        &SilhouetteOutput {
            kind: ds.kind,
            n: ds.n(),
            d_rand: ds.labels.d_rand,
            sample_cap,
            seed,
            score,
        },
    )?;
    println!(
        "silhouette: {} n={} d_rand={} score={score:.6}",
        ds.kind,
        ds.n(),
        ds.labels.d_rand
    );
    Ok(())
}
