//! Empirical probes: convergence scoring, Kendall-tau rank correlation,
//! architecture distinguishability studies, the class-count ablation driver,
//! and dataset silhouette statistics.

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DatagenError, DatasetKind, SplitPair, UnrealDataset};
use crate::engine::{train_fixed, EngineError, SearchConfig, TrainConfig, TrainReport};
use crate::rng;
use crate::searchspace::{build_supernet, CellGenotype, GenotypeMeta, OpKind, SuperNetConfig};
use rand::seq::SliceRandom;
use rand::Rng as _;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("report must contain at least {want} epochs, got {got}")]
    TooFewEpochs { want: usize, got: usize },
    #[error("threshold tau must lie in (0,1), got {0}")]
    BadThreshold(f64),
    #[error("score lists must have equal length >= 2 (got {xs} and {ys})")]
    BadScoreLists { xs: usize, ys: usize },
    #[error("correlation undefined: all values tied in one list")]
    UndefinedCorrelation,
    #[error("need at least two classes present in the sampled subset")]
    NotEnoughClasses,
    #[error("need at least two architectures, got {0}")]
    TooFewArchitectures(usize),
    #[error("all architecture trainings failed")]
    AllTrainingsFailed,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
}

// ---------------------------------------------------------------------------
// Convergence scoring

/// Outcome of the plateau-relative convergence criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConvergenceOutcome {
    /// Smallest epoch whose accuracy reaches `tau` times the plateau mean.
    Converged(usize),
    /// The plateau itself sits below the chance floor.
    NotConverged { final_mean: f64, floor: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceScore {
    pub kind: DatasetKind,
    pub tau: f64,
    pub outcome: ConvergenceOutcome,
}

/// Epoch-to-convergence on an accuracy curve: the smallest index `e` with
/// `acc[e] >= tau * mean(acc over the final 5 epochs)`, with a not-converged
/// marker when that final mean is below `chance_floor` (callers pass twice
/// the chance level of the label space).
pub fn convergence_epoch_curve(
    accs: &[f64],
    tau: f64,
    chance_floor: f64,
) -> Result<ConvergenceOutcome, AnalysisError> {
    if accs.len() < 2 {
        return Err(AnalysisError::TooFewEpochs {
            want: 2,
            got: accs.len(),
        });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(AnalysisError::BadThreshold(tau));
    }
    let tail = &accs[accs.len().saturating_sub(5)..];
    let final_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    if final_mean < chance_floor {
        return Ok(ConvergenceOutcome::NotConverged { final_mean, floor: chance_floor });
    }
    let threshold = tau * final_mean;
    let epoch = accs
        .iter()
        .position(|&a| a >= threshold)
        .expect("final epochs meet their own mean scaled by tau < 1");
    Ok(ConvergenceOutcome::Converged(epoch))
}

/// [`convergence_epoch_curve`] on a [`TrainReport`]'s train-accuracy curve,
/// with the chance floor derived from the class count.
pub fn convergence_epoch(
    report: &TrainReport,
    tau: f64,
    num_classes: u32,
) -> Result<ConvergenceOutcome, AnalysisError> {
    convergence_epoch_curve(&report.train_acc_curve(), tau, 2.0 / num_classes as f64)
}

// ---------------------------------------------------------------------------
// Kendall tau

/// Tie-corrected Kendall rank correlation tau_b via Knight's
/// O(n log n) algorithm; pair counts are exact integers, the only floating
/// division is the final ratio.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(AnalysisError::BadScoreLists {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    // Lexicographic sort by (x, y).
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        xs[a]
            .partial_cmp(&xs[b])
            .expect("finite scores")
            .then(ys[a].partial_cmp(&ys[b]).expect("finite scores"))
    });
    let sorted_y: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();

    // Tie bookkeeping: pairs tied in x (n1), in y (n2), in both (n3).
    let tie_pairs = |key: &dyn Fn(usize) -> (u64, u64)| -> i64 {
        // Counts t*(t-1)/2 over runs of equal keys in the given order.
        let mut total = 0i64;
        let mut run = 1i64;
        for w in 1..n {
            if key(w) == key(w - 1) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let x_key = |w: usize| (xs[idx[w]].to_bits(), 0u64);
    let xy_key = |w: usize| (xs[idx[w]].to_bits(), ys[idx[w]].to_bits());
    let n1 = tie_pairs(&x_key);
    let n3 = tie_pairs(&xy_key);
    let mut y_sorted_alone: Vec<u64> = ys.iter().map(|v| v.to_bits()).collect();
    y_sorted_alone.sort_unstable();
    let n2 = {
        let mut total = 0i64;
        let mut run = 1i64;
        for w in 1..n {
            if y_sorted_alone[w] == y_sorted_alone[w - 1] {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };

    let n0 = (n as i64) * (n as i64 - 1) / 2;
    if n1 == n0 || n2 == n0 {
        return Err(AnalysisError::UndefinedCorrelation);
    }

    // Discordant pairs = strict inversions of y after the lex sort.
    let mut buf = sorted_y.clone();
    let mut tmp = vec![0f64; n];
    let dis = count_inversions(&mut buf, &mut tmp) as i64;

    let con_minus_dis = n0 - n1 - n2 + n3 - 2 * dis;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok(con_minus_dis as f64 / denom)
}

/// Merge-sort count of pairs `i < j` with `v[i] > v[j]` (strict).
fn count_inversions(v: &mut [f64], tmp: &mut [f64]) -> u64 {
    let n = v.len();
    if n <= 1 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let mut inv = count_inversions(left, &mut tmp[..mid]) + count_inversions(right, &mut tmp[mid..]);
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < left.len() && j < right.len() {
        if left[i] <= right[j] {
            tmp[k] = left[i];
            i += 1;
        } else {
            tmp[k] = right[j];
            inv += (left.len() - i) as u64;
            j += 1;
        }
        k += 1;
    }
    while i < left.len() {
        tmp[k] = left[i];
        i += 1;
        k += 1;
    }
    while j < right.len() {
        tmp[k] = right[j];
        j += 1;
        k += 1;
    }
    v.copy_from_slice(&tmp[..n]);
    inv
}

// ---------------------------------------------------------------------------
// Architecture sampling

/// Uniformly sampled valid genotype: per node, two distinct sources and a
/// uniformly random non-`zero` op per kept edge.
pub fn sample_genotype(num_nodes: usize, seed: u64, index: u64) -> CellGenotype {
    let mut r = rng::stream(seed, "arch_sample", index);
    let non_zero: Vec<OpKind> = OpKind::ALL
        .into_iter()
        .filter(|&o| o != OpKind::Zero)
        .collect();
    let cell = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut edges = Vec::with_capacity(2 * num_nodes);
        for j in 0..num_nodes {
            let mut sources: Vec<usize> = (0..2 + j).collect();
            sources.shuffle(r);
            let mut pair = [sources[0], sources[1]];
            pair.sort_unstable();
            for src in pair {
                let op = non_zero[r.random_range(0..non_zero.len())];
                edges.push((op, src));
            }
        }
        edges
    };
    let normal = cell(&mut r);
    let reduce = cell(&mut r);
    let concat: Vec<usize> = (2..2 + num_nodes).collect();
    CellGenotype {
        normal,
        normal_concat: concat.clone(),
        reduce,
        reduce_concat: concat,
        meta: GenotypeMeta {
            seed,
            dataset: "sampled".into(),
            epoch: 0,
        },
    }
}

pub fn sample_genotypes(count: usize, num_nodes: usize, seed: u64) -> Vec<CellGenotype> {
    (0..count)
        .map(|i| sample_genotype(num_nodes, seed, i as u64))
        .collect()
}

// ---------------------------------------------------------------------------
// Distinguishability study

/// Which accuracy the proxy score reads at the probe epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyMetric {
    TrainAcc,
    ValAcc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Geometry shared by probe and target nets; `num_classes` is overridden
    /// per dataset.
    pub net: SuperNetConfig,
    /// Hyperparameters for the unreal probe runs; `epochs` is the probe
    /// epoch.
    pub probe: TrainConfig,
    /// Hyperparameters for the supervised target runs.
    pub target: TrainConfig,
    pub proxy_metric: ProxyMetric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankStudy {
    pub genotypes: Vec<CellGenotype>,
    pub proxy_scores: Vec<f64>,
    pub target_scores: Vec<f64>,
    /// `None` when one score list is fully tied, leaving tau undefined.
    pub tau: Option<f64>,
    /// Architectures dropped because one of their trainings failed.
    pub failures: usize,
}

/// Trains every genotype on the unreal split (proxy) and the supervised
/// target split, then correlates the two score lists with Kendall tau.
/// Failing architectures are excluded from the correlation and counted.
pub fn distinguishability_study(
    genotypes: &[CellGenotype],
    unreal: &SplitPair,
    target: &SplitPair,
    cfg: &StudyConfig,
) -> Result<RankStudy, AnalysisError> {
    if genotypes.len() < 2 {
        return Err(AnalysisError::TooFewArchitectures(genotypes.len()));
    }
    let mut kept = Vec::new();
    let mut proxy_scores = Vec::new();
    let mut target_scores = Vec::new();
    let mut failures = 0usize;
    for g in genotypes {
        let mut probe_net = cfg.net.clone();
        probe_net.num_classes = unreal.train.num_classes() as usize;
        let mut target_net = cfg.net.clone();
        target_net.num_classes = target.train.num_classes() as usize;
        let probe = train_fixed(g, unreal, &probe_net, &cfg.probe);
        let target_run = train_fixed(g, target, &target_net, &cfg.target);
        match (probe, target_run) {
            (Ok(p), Ok(t)) => {
                let proxy = match cfg.proxy_metric {
                    ProxyMetric::TrainAcc => p.report.final_train().acc,
                    ProxyMetric::ValAcc => p.report.final_val().acc,
                };
                kept.push(g.clone());
                proxy_scores.push(proxy);
                target_scores.push(t.report.final_val().acc);
            }
            _ => failures += 1,
        }
    }
    if kept.len() < 2 {
        return Err(AnalysisError::AllTrainingsFailed);
    }
    let tau = match kendall_tau(&proxy_scores, &target_scores) {
        Ok(t) => Some(t),
        Err(AnalysisError::UndefinedCorrelation) => None,
        Err(e) => return Err(e),
    };
    Ok(RankStudy {
        genotypes: kept,
        proxy_scores,
        target_scores,
        tau,
        failures,
    })
}

// ---------------------------------------------------------------------------
// Class-count ablation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub d_rand: u32,
    pub seed: u64,
    /// Final target validation accuracy of the searched genotype, or the
    /// failure message.
    pub outcome: Result<f64, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub d_values: Vec<u32>,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    /// Seed-mean target accuracy per d value, skipping failed cells.
    pub fn seed_means(&self) -> Vec<(u32, Option<f64>)> {
        self.d_values
            .iter()
            .map(|&d| {
                let vals: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.d_rand == d)
                    .filter_map(|c| c.outcome.as_ref().ok().copied())
                    .collect();
                let mean = if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                };
                (d, mean)
            })
            .collect()
    }
}

/// Builds an unreal dataset per `(d_rand, seed)` via the caller's
/// constructor, searches on it, then scores the searched genotype on the
/// supervised target. Per-cell failures are recorded in the grid and the
/// sweep continues.
pub fn class_count_ablation(
    build_dataset: &dyn Fn(u32, u64) -> Result<UnrealDataset, DatagenError>,
    target: &SplitPair,
    d_values: &[u32],
    seeds: &[u64],
    net_cfg: &SuperNetConfig,
    search_cfg: &SearchConfig,
    eval_cfg: &TrainConfig,
) -> Result<AblationGrid, AnalysisError> {
    let mut cells = Vec::with_capacity(d_values.len() * seeds.len());
    for &d in d_values {
        for &seed in seeds {
            let outcome = ablation_cell(
                build_dataset,
                target,
                d,
                seed,
                net_cfg,
                search_cfg,
                eval_cfg,
            );
            cells.push(AblationCell {
                d_rand: d,
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
    }
    Ok(AblationGrid {
        d_values: d_values.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    })
}

fn ablation_cell(
    build_dataset: &dyn Fn(u32, u64) -> Result<UnrealDataset, DatagenError>,
    target: &SplitPair,
    d: u32,
    seed: u64,
    net_cfg: &SuperNetConfig,
    search_cfg: &SearchConfig,
    eval_cfg: &TrainConfig,
) -> Result<f64, AnalysisError> {
    let ds = build_dataset(d, seed)?;
    let split = crate::datagen::make_split(&ds);
    let mut search_net_cfg = net_cfg.clone();
    search_net_cfg.num_classes = d as usize;
    let mut ps = crate::nn::ParamStore::new();
    let mut net = build_supernet(&mut ps, &search_net_cfg, seed);
    let mut cfg = search_cfg.clone();
    cfg.seed = seed;
    let out = crate::engine::search(&mut ps, &mut net, &split, &cfg)?;
    let mut target_net_cfg = net_cfg.clone();
    target_net_cfg.num_classes = target.train.num_classes() as usize;
    let mut eval = eval_cfg.clone();
    eval.seed = seed;
    let trained = train_fixed(&out.genotype, target, &target_net_cfg, &eval)?;
    Ok(trained.report.final_val().acc)
}

// ---------------------------------------------------------------------------
// Silhouette

/// Mean silhouette over up to `sample_cap` samples with Euclidean distance
/// on flattened raw pixels. Seeded subsampling; a sampled class with one
/// member contributes 0, as does any sample with degenerate distances.
pub fn silhouette_score(
    ds: &UnrealDataset,
    sample_cap: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let n = ds.n();
    let m = n.min(sample_cap);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "silhouette_subsample", 0));
    let picked = &order[..m];

    let flat: Vec<Vec<f64>> = picked
        .iter()
        .map(|&i| {
            ds.images
                .index_axis(Axis(0), i)
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let labels: Vec<u32> = picked.iter().map(|&i| ds.labels.labels[i]).collect();
    let mut classes: Vec<u32> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(AnalysisError::NotEnoughClasses);
    }

    // Full pairwise distance matrix.
    let mut dist = vec![0f64; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d: f64 = flat[i]
                .iter()
                .zip(&flat[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i * m + j] = d;
            dist[j * m + i] = d;
        }
    }

    let mut total = 0f64;
    for i in 0..m {
        let own = labels[i];
        let own_count = labels.iter().filter(|&&l| l == own).count();
        if own_count < 2 {
            continue; // singleton contributes 0
        }
        let a: f64 = (0..m)
            .filter(|&j| j != i && labels[j] == own)
            .map(|j| dist[i * m + j])
            .sum::<f64>()
            / (own_count - 1) as f64;
        let b = classes
            .iter()
            .filter(|&&c| c != own)
            .map(|&c| {
                let members: Vec<usize> = (0..m).filter(|&j| labels[j] == c).collect();
                members.iter().map(|&j| dist[i * m + j]).sum::<f64>() / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        } // zero-division convention: contributes 0
    }
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{assemble, build_rlrn, make_split, DatasetKind, GeneratorParams, LabelAssignment};
    use crate::engine::{EpochMetrics, Metrics};
    use ndarray::Array4;

    fn report_from_curve(accs: &[f64]) -> TrainReport {
        TrainReport {
            initial_train: Metrics { loss: 2.3, acc: 0.1 },
            initial_val: Metrics { loss: 2.3, acc: 0.1 },
            epochs: accs
                .iter()
                .enumerate()
                .map(|(e, &a)| EpochMetrics {
                    epoch: e,
                    train: Metrics { loss: 1.0 - a, acc: a },
                    val: Metrics { loss: 1.0 - a, acc: a },
                })
                .collect(),
            convergence_epoch: None,
        }
    }

    /// Linear ramp to a plateau at `plateau_epoch`, like the Fig. 1(a)
    /// shapes.
    fn ramp_curve(plateau_epoch: usize, total: usize, plateau_acc: f64) -> Vec<f64> {
        (0..total)
            .map(|e| plateau_acc * (e as f64 / plateau_epoch as f64).min(1.0))
            .collect()
    }

    #[test]
    fn convergence_on_ramp_curves_returns_plateau_epochs() {
        for (plateau, expect) in [(31usize, 31usize), (71, 71), (36, 36), (94, 94)] {
            let curve = ramp_curve(plateau, 100, 0.95);
            let got = convergence_epoch_curve(&curve, 0.99, 0.2).unwrap();
            assert_eq!(got, ConvergenceOutcome::Converged(expect));
        }
    }

    #[test]
    fn convergence_constant_curve_is_epoch_zero() {
        let curve = vec![0.8; 20];
        assert_eq!(
            convergence_epoch_curve(&curve, 0.99, 0.2).unwrap(),
            ConvergenceOutcome::Converged(0)
        );
    }

    #[test]
    fn convergence_below_floor_is_not_converged() {
        let curve = vec![0.09; 20];
        match convergence_epoch_curve(&curve, 0.99, 0.2).unwrap() {
            ConvergenceOutcome::NotConverged { final_mean, floor } => {
                assert!((final_mean - 0.09).abs() < 1e-12);
                assert_eq!(floor, 0.2);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn convergence_is_monotone_in_tau() {
        let mut r = rng::stream(3, "analysis_test", 0);
        for _ in 0..50 {
            let mut curve: Vec<f64> = (0..40).map(|_| r.random_range(0.3..1.0)).collect();
            curve.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let lo = convergence_epoch_curve(&curve, 0.8, 0.1).unwrap();
            let hi = convergence_epoch_curve(&curve, 0.99, 0.1).unwrap();
            if let (ConvergenceOutcome::Converged(a), ConvergenceOutcome::Converged(b)) = (lo, hi) {
                assert!(a <= b, "tau=0.8 gave {a}, tau=0.99 gave {b}");
            } else {
                panic!("both thresholds should converge on these curves");
            }
        }
    }

    #[test]
    fn convergence_domain_errors() {
        assert!(matches!(
            convergence_epoch_curve(&[0.5], 0.99, 0.1),
            Err(AnalysisError::TooFewEpochs { .. })
        ));
        assert!(matches!(
            convergence_epoch_curve(&[0.5, 0.6], 1.2, 0.1),
            Err(AnalysisError::BadThreshold(_))
        ));
        let report = report_from_curve(&[0.2, 0.9, 0.9, 0.9, 0.9, 0.9]);
        assert_eq!(
            convergence_epoch(&report, 0.99, 10).unwrap(),
            ConvergenceOutcome::Converged(1)
        );
    }

    /// Definition-level brute force: O(n^2) pair classification.
    fn kendall_brute(xs: &[f64], ys: &[f64]) -> Option<f64> {
        let n = xs.len();
        let (mut con, mut dis, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = xs[i] - xs[j];
                let dy = ys[i] - ys[j];
                if dx == 0.0 && dy == 0.0 {
                    continue;
                } else if dx == 0.0 {
                    tx += 1;
                } else if dy == 0.0 {
                    ty += 1;
                } else if dx * dy > 0.0 {
                    con += 1;
                } else {
                    dis += 1;
                }
            }
        }
        let denom = (((con + dis + tx) as f64) * ((con + dis + ty) as f64)).sqrt();
        if denom == 0.0 {
            None
        } else {
            Some((con - dis) as f64 / denom)
        }
    }

    #[test]
    fn kendall_worked_example_and_limits() {
        let tau = kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((tau - 2.0 / 3.0).abs() < 1e-15, "expected 2/3, got {tau}");
        assert_eq!(
            kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
            1.0
        );
        assert_eq!(
            kendall_tau(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(),
            -1.0
        );
        assert!(matches!(
            kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(AnalysisError::UndefinedCorrelation)
        ));
        assert!(matches!(
            kendall_tau(&[1.0], &[2.0]),
            Err(AnalysisError::BadScoreLists { .. })
        ));
    }

    #[test]
    fn kendall_matches_brute_force_on_random_lists() {
        let mut r = rng::stream(7, "analysis_test", 1);
        for case in 0..1000 {
            let n = r.random_range(2..=8usize);
            let xs: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
            let ys: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
            let brute = kendall_brute(&xs, &ys);
            let fast = kendall_tau(&xs, &ys);
            match (brute, fast) {
                (None, Err(AnalysisError::UndefinedCorrelation)) => {}
                (Some(b), Ok(f)) => {
                    assert!(
                        (b - f).abs() < 1e-12,
                        "case {case}: brute={b}, fast={f}, xs={xs:?}, ys={ys:?}"
                    );
                }
                other => panic!("case {case}: mismatch {other:?} for xs={xs:?}, ys={ys:?}"),
            }
        }
    }

    #[test]
    fn kendall_antisymmetry_and_permutation_consistency() {
        let mut r = rng::stream(8, "analysis_test", 2);
        for _ in 0..100 {
            let n = r.random_range(3..=8usize);
            // Distinct values for clean antisymmetry.
            let mut xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let mut ys: Vec<f64> = (0..n).map(|i| i as f64 * 1.5 + 1.0).collect();
            xs.shuffle(&mut r);
            ys.shuffle(&mut r);
            let tau = kendall_tau(&xs, &ys).unwrap();
            assert!((-1.0..=1.0).contains(&tau));
            let neg: Vec<f64> = ys.iter().map(|v| -v).collect();
            let tau_neg = kendall_tau(&xs, &neg).unwrap();
            assert!((tau + tau_neg).abs() < 1e-12);

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut r);
            let px: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
            let py: Vec<f64> = perm.iter().map(|&i| ys[i]).collect();
            let tau_p = kendall_tau(&px, &py).unwrap();
            assert!((tau - tau_p).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_genotypes_are_valid_and_deterministic() {
        for i in 0..50 {
            let g = sample_genotype(4, 99, i);
            g.validate().unwrap();
            assert_eq!(g.normal.len(), 8);
        }
        assert_eq!(sample_genotype(4, 99, 3), sample_genotype(4, 99, 3));
        assert_ne!(sample_genotype(4, 99, 3), sample_genotype(4, 99, 4));
        assert_eq!(sample_genotypes(5, 4, 1).len(), 5);
    }

    fn dataset_with_labels(images: Array4<f32>, labels: Vec<u32>, d: u32) -> UnrealDataset {
        let n = labels.len();
        assemble(
            DatasetKind::Rlrn,
            images,
            LabelAssignment {
                d_rand: d,
                labels,
                seed: 0,
            },
            0,
            GeneratorParams::Rlrn,
            None,
        )
        .unwrap()
        .tap(n)
    }

    trait Tap {
        fn tap(self, n: usize) -> Self;
    }
    impl Tap for UnrealDataset {
        fn tap(self, n: usize) -> Self {
            assert_eq!(self.n(), n);
            self
        }
    }

    #[test]
    fn silhouette_separated_blobs_scores_high() {
        let n = 40;
        let mut images = Array4::<f32>::zeros((n, 32, 32, 3));
        let mut r = rng::stream(11, "analysis_test", 3);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u32;
            let center = if class == 0 { 0.0f32 } else { 10.0 };
            images
                .index_axis_mut(Axis(0), i)
                .mapv_inplace(|_| center + r.random_range(-0.01..0.01f32));
            labels.push(class);
        }
        let ds = dataset_with_labels(images, labels, 2);
        let s = silhouette_score(&ds, 200, 0).unwrap();
        assert!(s > 0.9, "expected high silhouette, got {s}");
    }

    #[test]
    fn silhouette_random_labels_on_one_blob_is_near_zero() {
        for seed in 0..10 {
            let n = 60;
            let mut images = Array4::<f32>::zeros((n, 32, 32, 3));
            let mut r = rng::stream(seed, "analysis_test", 4);
            for i in 0..n {
                images
                    .index_axis_mut(Axis(0), i)
                    .mapv_inplace(|_| r.random_range(-1.0..1.0f32));
            }
            let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..3u32)).collect();
            let ds = dataset_with_labels(images, labels, 3);
            let s = silhouette_score(&ds, 200, seed).unwrap();
            assert!(s.abs() < 0.05, "seed {seed}: expected ~0, got {s}");
        }
    }

    #[test]
    fn silhouette_degenerate_distances_hit_zero_convention() {
        let n = 10;
        let images = Array4::<f32>::ones((n, 32, 32, 3));
        let labels: Vec<u32> = (0..n as u32).map(|i| i % 2).collect();
        let ds = dataset_with_labels(images, labels, 2);
        assert_eq!(silhouette_score(&ds, 200, 0).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_requires_two_sampled_classes() {
        let n = 8;
        let images = Array4::<f32>::zeros((n, 32, 32, 3));
        let ds = dataset_with_labels(images, vec![0; n], 2);
        assert!(matches!(
            silhouette_score(&ds, 200, 0),
            Err(AnalysisError::NotEnoughClasses)
        ));
    }

    /// Independent O(n^2) silhouette written from the textbook formula.
    fn silhouette_reference(points: &[Vec<f64>], labels: &[u32]) -> f64 {
        let m = points.len();
        let d = |i: usize, j: usize| -> f64 {
            points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut sum = 0.0;
        for i in 0..m {
            let same: Vec<usize> = (0..m)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if same.is_empty() {
                continue;
            }
            let a = same.iter().map(|&j| d(i, j)).sum::<f64>() / same.len() as f64;
            let mut b = f64::INFINITY;
            let mut others: Vec<u32> = labels.to_vec();
            others.sort_unstable();
            others.dedup();
            for &c in others.iter().filter(|&&c| c != labels[i]) {
                let cluster: Vec<usize> = (0..m).filter(|&j| labels[j] == c).collect();
                let mean = cluster.iter().map(|&j| d(i, j)).sum::<f64>() / cluster.len() as f64;
                b = b.min(mean);
            }
            let denom = a.max(b);
            if denom > 0.0 {
                sum += (b - a) / denom;
            }
        }
        sum / m as f64
    }

    #[test]
    fn silhouette_matches_reference_implementation() {
        let n = 90;
        let mut images = Array4::<f32>::zeros((n, 32, 32, 3));
        let mut r = rng::stream(21, "analysis_test", 5);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 3) as u32;
            let center = class as f32 * 0.7;
            images
                .index_axis_mut(Axis(0), i)
                .mapv_inplace(|_| center + r.random_range(-0.5..0.5f32));
            labels.push(class);
        }
        let ds = dataset_with_labels(images.clone(), labels.clone(), 3);
        // Cap above n: the subsample is a permutation of everything, so the
        // score must match the full-set reference exactly.
        let s = silhouette_score(&ds, 200, 5).unwrap();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                images
                    .index_axis(Axis(0), i)
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect();
        let reference = silhouette_reference(&points, &labels);
        assert!(
            (s - reference).abs() < 1e-9,
            "silhouette {s} vs reference {reference}"
        );
    }

    #[test]
    fn distinguishability_study_smoke_on_micro_nets() {
        let unreal_ds = build_rlrn(24, 3, 31).unwrap();
        let target_ds = build_rlrn(24, 3, 32).unwrap();
        let unreal = make_split(&unreal_ds);
        let target = make_split(&target_ds);
        let genotypes = sample_genotypes(2, 2, 77);
        let cfg = StudyConfig {
            net: SuperNetConfig {
                num_nodes: 2,
                channels: 4,
                cells: 2,
                num_classes: 3,
                input_channels: 3,
            },
            probe: TrainConfig {
                epochs: 1,
                batch_size: 12,
                weight_decay: 0.0,
                seed: 1,
                ..TrainConfig::default()
            },
            target: TrainConfig {
                epochs: 1,
                batch_size: 12,
                weight_decay: 0.0,
                seed: 2,
                ..TrainConfig::default()
            },
            proxy_metric: ProxyMetric::TrainAcc,
        };
        let study = distinguishability_study(&genotypes, &unreal, &target, &cfg).unwrap();
        assert_eq!(study.genotypes.len(), 2);
        assert_eq!(study.failures, 0);
        if let Some(tau) = study.tau {
            assert!((-1.0..=1.0).contains(&tau));
        }
        // Determinism: rerun gives identical scores.
        let again = distinguishability_study(&genotypes, &unreal, &target, &cfg).unwrap();
        assert_eq!(study.proxy_scores, again.proxy_scores);
        assert_eq!(study.target_scores, again.target_scores);
    }

    #[test]
    fn ablation_grid_runs_and_is_deterministic() {
        let target_ds = build_rlrn(24, 3, 41).unwrap();
        let target = make_split(&target_ds);
        let build = |d: u32, seed: u64| crate::datagen::build_rlrn(24, d, seed);
        let net_cfg = SuperNetConfig {
            num_nodes: 2,
            channels: 4,
            cells: 2,
            num_classes: 0, // overridden per dataset
            input_channels: 3,
        };
        let search_cfg = SearchConfig {
            warmup_epochs: 1,
            search_epochs: 1,
            batch_size: 12,
            ..SearchConfig::unreal(0)
        };
        let eval_cfg = TrainConfig {
            epochs: 1,
            batch_size: 12,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let grid = class_count_ablation(
            &build,
            &target,
            &[2, 4],
            &[5],
            &net_cfg,
            &search_cfg,
            &eval_cfg,
        )
        .unwrap();
        assert_eq!(grid.cells.len(), 2);
        for cell in &grid.cells {
            let acc = cell.outcome.as_ref().expect("cell trained");
            assert!(acc.is_finite());
        }
        let means = grid.seed_means();
        assert_eq!(means.len(), 2);
        assert!(means.iter().all(|(_, m)| m.is_some()));

        let grid2 = class_count_ablation(
            &build,
            &target,
            &[2, 4],
            &[5],
            &net_cfg,
            &search_cfg,
            &eval_cfg,
        )
        .unwrap();
        for (a, b) in grid.cells.iter().zip(&grid2.cells) {
            assert_eq!(a.outcome, b.outcome);
        }
    }
}
