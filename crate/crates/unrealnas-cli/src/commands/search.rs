//! `unrealnas search`: bi-level DARTS search on a generated dataset. Writes
//! genotype JSON, trace NDJSON, a checkpoint pair, an accuracy plot, and the
//! resolved-config echo. A diverged search still writes its partial trace
//! (and the echo) before exiting with code 3.

use crate::args::SearchArgs;
use crate::artifacts::{ensure_dir, write_bytes, write_echo};
use crate::config::{dataset_stem, load_overlay, require, resolve_seed};
use crate::plot::{line_plot, Series};
use crate::CliError;
use serde::Serialize;
use std::path::PathBuf;
use unrealnas::datagen::{load_dataset, make_split, DatasetKind};
use unrealnas::engine::{save_checkpoint, search, EngineError, SearchConfig, SearchTrace};
use unrealnas::nn::ParamStore;
use unrealnas::searchspace::{build_supernet, SuperNetConfig};

#[derive(Debug, Serialize)]
struct SearchEcho {
    data: PathBuf,
    out: PathBuf,
    net: SuperNetConfig,
    search: SearchConfig,
}

pub fn run(args: SearchArgs) -> Result<(), CliError> {
    let file: SearchArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let data = dataset_stem(&require(a.data, "data")?);
    let out = a.out.unwrap_or_else(|| PathBuf::from("search-run"));
    let seed = resolve_seed(a.seed)?;

    let ds = load_dataset(&data)?;
    let split = make_split(&ds);

    let net_cfg = SuperNetConfig {
        num_nodes: a.nodes.unwrap_or(4),
        channels: a.channels.unwrap_or(8),
        cells: a.cells.unwrap_or(4),
        num_classes: split.train.num_classes() as usize,
        input_channels: 3,
    };
    // Kind-sensitive defaults: supervised targets keep the usual weight
    // decay, unreal datasets zero it on both levels.
    let mut cfg = match ds.kind {
        DatasetKind::Real => SearchConfig::real(seed),
        _ => SearchConfig::unreal(seed),
    };
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.search_epochs {
        cfg.search_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.w_lr {
        cfg.w_lr = v;
    }
    if let Some(v) = a.w_momentum {
        cfg.w_momentum = v;
    }
    if let Some(v) = a.w_weight_decay {
        cfg.w_weight_decay = v;
    }
    if let Some(v) = a.alpha_lr {
        cfg.a_lr = v;
    }
    if let Some(v) = a.alpha_weight_decay {
        cfg.a_weight_decay = v;
    }
    if let Some(v) = a.grad_clip {
        cfg.grad_clip = v;
    }
    if let Some(v) = a.order {
        cfg.order = v;
    }

    ensure_dir(&out)?;
    let echo = SearchEcho {
        data: data.clone(),
        out: out.clone(),
        net: net_cfg.clone(),
        search: cfg.clone(),
    };
    write_echo(&out.join("config.json"), "search", &echo)?;

    let mut ps = ParamStore::new();
    let mut net = build_supernet(&mut ps, &net_cfg, seed);
    let output = match search(&mut ps, &mut net, &split, &cfg) {
        Ok(o) => o,
        Err(EngineError::Diverged { epoch, reason, trace }) => {
            trace.write_ndjson(&out.join("trace.ndjson"))?;
            return Err(CliError::Diverged(format!(
                "search diverged at epoch {epoch}: {reason} (partial trace retained in {})",
                out.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    write_bytes(&out.join("genotype.json"), output.genotype.to_json().as_bytes())?;
    output.trace.write_ndjson(&out.join("trace.ndjson"))?;
    save_checkpoint(&out.join("search"), &ps, &net, &cfg)?;
    write_bytes(
        &out.join("accuracy.svg"),
        accuracy_plot(&output.trace).as_bytes(),
    )?;

    let last = output.trace.records.last();
    println!(
        "search complete: {} epochs, final train_acc={} val_acc={} skip_count={} → {}",
        output.trace.records.len(),
        last.map_or_else(|| "-".into(), |r| format!("{:.4}", r.train_acc)),
        last.map_or_else(|| "-".into(), |r| format!("{:.4}", r.val_acc)),
        last.map_or_else(|| "-".into(), |r| r.skip_count.to_string()),
        out.join("genotype.json").display(),
    );
    Ok(())
}

fn accuracy_plot(trace: &SearchTrace) -> String {
    let train: Vec<(f64, f64)> = trace
        .records
        .iter()
        .map(|r| (r.epoch as f64, r.train_acc))
        .collect();
    let val: Vec<(f64, f64)> = trace
        .records
        .iter()
        .map(|r| (r.epoch as f64, r.val_acc))
        .collect();
    line_plot(
        "search accuracy",
        "epoch",
        "accuracy",
        &[Series::new("train", 0, train), Series::new("val", 1, val)],
    )
}
