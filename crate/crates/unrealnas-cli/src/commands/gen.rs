//! `unrealnas gen <kind>`: build a dataset, save it with its manifest, echo
//! the resolved config, and print a one-line summary.

use crate::args::{GenRealArgs, GenRlgdArgs, GenRlrdArgs, GenRlrnArgs};
use crate::artifacts::write_echo;
use crate::config::{load_overlay, resolve_seed};
use crate::CliError;
use serde::Serialize;
use std::path::PathBuf;
use unrealnas::datagen::{
    build_real, build_rlgd, build_rlrd, build_rlrn, read_cifar_batches, save_dataset,
    synthetic_images, UnrealDataset,
};

/// Where rlrd/real take their images from.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Files(Vec<PathBuf>),
    Synthetic(usize),
}

fn resolve_source(
    source: Option<Vec<PathBuf>>,
    synthetic: Option<usize>,
    kind: &str,
) -> Result<CorpusSource, CliError> {
    match (source, synthetic) {
        (Some(p), None) => Ok(CorpusSource::Files(p)),
        (None, Some(n)) => Ok(CorpusSource::Synthetic(n)),
        (None, None) => Err(CliError::usage(format!(
            "{kind} needs an image corpus: pass --source <cifar .bin>... or --synthetic <n>"
        ))),
        (Some(_), Some(_)) => Err(CliError::usage(
            "--source and --synthetic are mutually exclusive",
        )),
    }
}

fn finish(ds: &UnrealDataset, stem: &PathBuf, command: &str, echo: &impl Serialize) -> Result<(), CliError> {
    save_dataset(ds, stem)?;
    write_echo(&stem.with_extension("config.json"), command, echo)?;
    println!(
        "wrote {stem}.{{manifest.json,images.bin,labels.bin}}: kind={} n={} d_rand={} sha256={}",
        ds.kind,
        ds.n(),
        ds.labels.d_rand,
        ds.manifest.images_sha256,
        stem = stem.display(),
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct RlrdEcho {
    source: CorpusSource,
    classes: u32,
    seed: u64,
    out: PathBuf,
}

pub fn rlrd(args: GenRlrdArgs) -> Result<(), CliError> {
    let file: GenRlrdArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let source = resolve_source(a.source, a.synthetic, "rlrd")?;
    let classes = a.classes.unwrap_or(10);
    let seed = resolve_seed(a.seed)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("rlrd-s{seed}")));

    let (images, source_name) = match &source {
        CorpusSource::Files(paths) => {
            let (images, _) = read_cifar_batches(paths)?;
            (images, corpus_name(paths))
        }
        CorpusSource::Synthetic(n) => (
            synthetic_images(*n, seed),
            format!("synthetic:{n}"),
        ),
    };
    let ds = build_rlrd(&images, &source_name, classes, seed)?;
    let echo = RlrdEcho { source, classes, seed, out: out.clone() };
    finish(&ds, &out, "gen rlrd", &echo)
}

#[derive(Debug, Serialize)]
struct RlgdEcho {
    categories: usize,
    instances: usize,
    classes: u32,
    seed: u64,
    out: PathBuf,
}

pub fn rlgd(args: GenRlgdArgs) -> Result<(), CliError> {
    let file: GenRlgdArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let categories = a.categories.unwrap_or(10);
    let instances = a.instances.unwrap_or(20);
    let classes = a.classes.unwrap_or(100);
    let seed = resolve_seed(a.seed)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("rlgd-s{seed}")));

    let ds = build_rlgd(categories, instances, classes, seed)?;
    let echo = RlgdEcho { categories, instances, classes, seed, out: out.clone() };
    finish(&ds, &out, "gen rlgd", &echo)
}

#[derive(Debug, Serialize)]
struct RlrnEcho {
    n: usize,
    classes: u32,
    seed: u64,
    out: PathBuf,
}

pub fn rlrn(args: GenRlrnArgs) -> Result<(), CliError> {
    let file: GenRlrnArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let n = a.n.unwrap_or(2000);
    let classes = a.classes.unwrap_or(50);
    let seed = resolve_seed(a.seed)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("rlrn-s{seed}")));

    let ds = build_rlrn(n, classes, seed)?;
    let echo = RlrnEcho { n, classes, seed, out: out.clone() };
    finish(&ds, &out, "gen rlrn", &echo)
}

#[derive(Debug, Serialize)]
struct RealEcho {
    source: CorpusSource,
    classes: u32,
    seed: u64,
    out: PathBuf,
}

pub fn real(args: GenRealArgs) -> Result<(), CliError> {
    let file: GenRealArgs = load_overlay(&args.config)?;
    let a = args.or(file);
    let source = resolve_source(a.source, a.synthetic, "real")?;
    let classes = a.classes.unwrap_or(10);
    let seed = resolve_seed(a.seed)?;
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("real-s{seed}")));

    let (images, labels, source_name) = match &source {
        CorpusSource::Files(paths) => {
            let (images, labels) = read_cifar_batches(paths)?;
            (images, labels, corpus_name(paths))
        }
        CorpusSource::Synthetic(n) => {
            // The stand-in corpus has no annotations; cycle labels so every
            // class is populated and the assignment is deterministic.
            let images = synthetic_images(*n, seed);
            let labels: Vec<u32> = (0..*n as u32).map(|i| i % classes).collect();
            (images, labels, format!("synthetic:{n}"))
        }
    };
    let ds = build_real(&images, &labels, classes, &source_name)?;
    let echo = RealEcho { source, classes, seed, out: out.clone() };
    finish(&ds, &out, "gen real", &echo)
}

fn corpus_name(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(";")
}
