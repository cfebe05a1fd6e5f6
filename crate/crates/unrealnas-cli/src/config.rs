//! Config resolution shared by every command: precedence is defaults <
//! config file < command-line flags, with `UNREALNAS_SEED` as a global seed
//! fallback when neither flags nor file set one.

use crate::CliError;
use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};
use unrealnas::analysis::ProxyMetric;
use unrealnas::engine::BilevelOrder;

/// clap value parser for `--order`.
pub fn parse_order(s: &str) -> Result<BilevelOrder, String> {
    match s {
        "first-order" | "first" => Ok(BilevelOrder::FirstOrder),
        "second-order" | "second" => Ok(BilevelOrder::SecondOrder),
        other => Err(format!(
            "unknown order '{other}' (expected first-order or second-order)"
        )),
    }
}

/// clap value parser for `--proxy`.
pub fn parse_proxy(s: &str) -> Result<ProxyMetric, String> {
    match s {
        "train-acc" => Ok(ProxyMetric::TrainAcc),
        "val-acc" => Ok(ProxyMetric::ValAcc),
        other => Err(format!(
            "unknown proxy metric '{other}' (expected train-acc or val-acc)"
        )),
    }
}

/// Seed precedence: explicit (flag or config file) > `UNREALNAS_SEED` > 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var("UNREALNAS_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| {
            CliError::usage(format!("UNREALNAS_SEED must be an unsigned integer, got '{v}'"))
        }),
        Err(_) => Ok(0),
    }
}

/// Loads a JSON config file into the same shape as the command's flags;
/// `None` yields the all-empty overlay.
pub fn load_overlay<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("malformed config {}: {e}", p.display())))
        }
    }
}

/// Post-merge required-flag check with a diagnostic naming the flag.
pub fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::usage(format!("missing required flag --{flag}")))
}

/// Accepts either a dataset stem or any of the three files it names, so
/// `--data runs/rlrn-s1.manifest.json` works like `--data runs/rlrn-s1`.
pub fn dataset_stem(path: &Path) -> PathBuf {
    let name = match path.file_name().and_then(|n| n.to_str()) {
        Some(n) => n,
        None => return path.to_path_buf(),
    };
    for suffix in [".manifest.json", ".images.bin", ".labels.bin", ".config.json"] {
        if let Some(stripped) = name.strip_suffix(suffix) {
            return path.with_file_name(stripped);
        }
    }
    path.to_path_buf()
}

/// Field-wise precedence merge for flag/file overlays: `self` wins.
macro_rules! overlay_merge {
    ($t:ty { $($f:ident),* $(,)? }) => {
        impl $t {
            /// Returns `self` with empty fields filled from `lower`.
            pub fn or(mut self, lower: Self) -> Self {
                $( if self.$f.is_none() { self.$f = lower.$f; } )*
                self
            }
        }
    };
}

overlay_merge!(crate::args::GenRlrdArgs { source, synthetic, classes, seed, out });
overlay_merge!(crate::args::GenRlgdArgs { categories, instances, classes, seed, out });
overlay_merge!(crate::args::GenRlrnArgs { n, classes, seed, out });
overlay_merge!(crate::args::GenRealArgs { source, synthetic, classes, seed, out });
overlay_merge!(crate::args::SearchArgs {
    data, out, cells, channels, nodes, warmup_epochs, search_epochs, batch_size,
    w_lr, w_momentum, w_weight_decay, alpha_lr, alpha_weight_decay, grad_clip,
    order, seed,
});
overlay_merge!(crate::args::RetrainArgs {
    genotype, data, out, cells, channels, epochs, batch_size, lr, momentum,
    weight_decay, grad_clip, seed,
});
overlay_merge!(crate::args::DifficultyArgs { reports, tau, out });
overlay_merge!(crate::args::DistinguishArgs {
    unreal, target, n_arch, probe_epochs, target_epochs, batch_size, cells,
    channels, nodes, proxy, seed, out,
});
overlay_merge!(crate::args::AblateClassesArgs {
    target, classes, seeds, kind, n, categories, instances, warmup_epochs,
    search_epochs, eval_epochs, batch_size, cells, channels, nodes, out,
});
overlay_merge!(crate::args::SkipDynamicsArgs { trace, out });
overlay_merge!(crate::args::SilhouetteArgs { data, sample_cap, seed, out });

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_stem_strips_known_suffixes() {
        assert_eq!(
            dataset_stem(Path::new("runs/rlrn-s1.manifest.json")),
            PathBuf::from("runs/rlrn-s1")
        );
        assert_eq!(
            dataset_stem(Path::new("rlgd.images.bin")),
            PathBuf::from("rlgd")
        );
        assert_eq!(dataset_stem(Path::new("plain-stem")), PathBuf::from("plain-stem"));
    }

    #[test]
    fn order_and_proxy_parsers() {
        assert_eq!(parse_order("first-order").unwrap(), BilevelOrder::FirstOrder);
        assert_eq!(parse_order("second").unwrap(), BilevelOrder::SecondOrder);
        assert!(parse_order("zeroth").is_err());
        assert_eq!(parse_proxy("train-acc").unwrap(), ProxyMetric::TrainAcc);
        assert!(parse_proxy("loss").is_err());
    }
}
