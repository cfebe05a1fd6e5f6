//! Unreal dataset construction, splitting, and persistence.
//!
//! Three unreal dataset kinds are supported — RLRD (real images, random
//! labels), RLGD (IFS-fractal images, random labels), RLRN (Gaussian-noise
//! images, random labels) — plus the REAL baseline with true labels. All
//! randomness is keyed per sample through counter-based streams, so dataset
//! content is a pure function of the manifest.
//!
//! Splits follow the unreal recipe: train and validation views share the
//! same samples and labels, differing only in the image transform
//! (normalization vs. deterministic horizontal flip + normalization). The
//! REAL kind instead uses disjoint halves with stochastic crop/flip
//! augmentation on the train side.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fractal::{self, FractalError, ParamSlot, RenderParams};
use crate::nn::Feat;
use crate::rng;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

/// Per-channel statistics of the CIFAR-10 training set, used to normalize
/// the REAL baseline.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"UNRL";
const DTYPE_F32: u16 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("class count must be at least 1, got {0}")]
    InvalidClassCount(u32),
    #[error("sample count must be at least 1")]
    EmptyDataset,
    #[error("source image {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("label {label} out of range for {num_classes} classes at index {index}")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: u32,
    },
    #[error("labels ({labels}) and images ({images}) disagree in length")]
    LengthMismatch { images: usize, labels: usize },
    #[error(transparent)]
    Fractal(#[from] FractalError),
    #[error("could not collect {want} instances for category {category} within {scanned} schedule slots")]
    InstanceScheduleExhausted {
        category: usize,
        want: usize,
        scanned: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checksum mismatch for {file}: manifest {expected}, data {got}")]
    Checksum {
        file: String,
        expected: String,
        got: String,
    },
    #[error("cannot regenerate kind {0} from a manifest alone (external source required)")]
    Regeneration(DatasetKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DatasetKind {
    Rlrd,
    Rlgd,
    Rlrn,
    Real,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetKind::Rlrd => "RLRD",
            DatasetKind::Rlgd => "RLGD",
            DatasetKind::Rlrn => "RLRN",
            DatasetKind::Real => "REAL",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RLRD" => Ok(DatasetKind::Rlrd),
            "RLGD" => Ok(DatasetKind::Rlgd),
            "RLRN" => Ok(DatasetKind::Rlrn),
            "REAL" => Ok(DatasetKind::Real),
            other => Err(format!("unknown dataset kind: {other}")),
        }
    }
}

/// Uniform random class assignment over `[0, d_rand)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub d_rand: u32,
    pub labels: Vec<u32>,
    pub seed: u64,
}

/// Per-channel normalization statistics, computed over the whole dataset at
/// build time (REAL uses the CIFAR constants instead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Kind-specific generation parameters recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum GeneratorParams {
    Rlrd {
        source: String,
    },
    Rlgd {
        num_categories: usize,
        instances_per_category: usize,
        render: RenderParams,
    },
    Rlrn,
    Real {
        source: String,
        num_classes: u32,
    },
}

/// Everything needed to regenerate (RLGD/RLRN) or re-derive (RLRD/REAL,
/// given the named source) a dataset bit-exactly, plus integrity checksums
/// over the raw image and label payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub kind: DatasetKind,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub d_rand: u32,
    pub seed: u64,
    pub params: GeneratorParams,
    pub norm: NormStats,
    pub images_sha256: String,
    pub labels_sha256: String,
}

/// An image dataset: `(N, H, W, C)` tensor, labels, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrealDataset {
    pub kind: DatasetKind,
    pub images: Array4<f32>,
    pub labels: LabelAssignment,
    pub manifest: DatasetManifest,
}

impl UnrealDataset {
    pub fn n(&self) -> usize {
        self.images.dim().0
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }
}

// ---------------------------------------------------------------------------
// Builders

/// Draws `n` i.i.d. uniform labels over `[0, d_rand)`, keyed per index so the
/// assignment is order-independent.
pub fn random_labels(n: usize, d_rand: u32, seed: u64) -> Result<LabelAssignment, DatagenError> {
    if d_rand < 1 {
        return Err(DatagenError::InvalidClassCount(d_rand));
    }
    if n < 1 {
        return Err(DatagenError::EmptyDataset);
    }
    let labels = (0..n)
        .map(|i| rng::uniform_index(seed, "labels", i as u64, d_rand as u64) as u32)
        .collect();
    Ok(LabelAssignment {
        d_rand,
        labels,
        seed,
    })
}

fn compute_norm_stats(images: &Array4<f32>) -> NormStats {
    let (_, _, _, c) = images.dim();
    let mut mean = vec![0f64; c];
    let mut std = vec![0f64; c];
    for ch in 0..c {
        let plane = images.slice(s![.., .., .., ch]);
        let count = plane.len() as f64;
        let mut sum = 0f64;
        ndarray::azip!((&v in &plane) sum += v as f64);
        let m = sum / count;
        let mut var = 0f64;
        ndarray::azip!((&v in &plane) {
            let d = v as f64 - m;
            var += d * d;
        });
        mean[ch] = m;
        std[ch] = (var / count).sqrt().max(1e-8);
    }
    NormStats { mean, std }
}

fn sha256_f32(data: &[f32]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::with_capacity(4096 * 4);
    for chunk in data.chunks(4096) {
        buf.clear();
        for &v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        h.update(&buf);
    }
    hex(&h.finalize())
}

fn sha256_u32(data: &[u32]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::with_capacity(4096 * 4);
    for chunk in data.chunks(4096) {
        buf.clear();
        for &v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        h.update(&buf);
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn assemble(
    kind: DatasetKind,
    images: Array4<f32>,
    labels: LabelAssignment,
    seed: u64,
    params: GeneratorParams,
    norm: Option<NormStats>,
) -> Result<UnrealDataset, DatagenError> {
    let (n, h, w, c) = images.dim();
    if n != labels.labels.len() {
        return Err(DatagenError::LengthMismatch {
            images: n,
            labels: labels.labels.len(),
        });
    }
    let norm = norm.unwrap_or_else(|| compute_norm_stats(&images));
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        kind,
        n,
        height: h,
        width: w,
        channels: c,
        d_rand: labels.d_rand,
        seed,
        params,
        norm,
        images_sha256: sha256_f32(images.as_slice().expect("standard layout")),
        labels_sha256: sha256_u32(&labels.labels),
    };
    Ok(UnrealDataset {
        kind,
        images,
        labels,
        manifest,
    })
}

fn stack_images(source: &[Array3<f32>]) -> Result<Array4<f32>, DatagenError> {
    if source.is_empty() {
        return Err(DatagenError::EmptyDataset);
    }
    let expected = (IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS);
    for (i, img) in source.iter().enumerate() {
        if img.dim() != expected {
            return Err(DatagenError::ShapeMismatch {
                index: i,
                expected,
                got: img.dim(),
            });
        }
    }
    let mut out = Array4::zeros((source.len(), expected.0, expected.1, expected.2));
    for (i, img) in source.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok(out)
}

/// RLRD: the supplied real images, unmodified, paired with fresh uniform
/// random labels. `source` names the image provenance for the manifest.
pub fn build_rlrd(
    source_images: &[Array3<f32>],
    source: &str,
    d_rand: u32,
    seed: u64,
) -> Result<UnrealDataset, DatagenError> {
    let images = stack_images(source_images)?;
    let labels = random_labels(images.dim().0, d_rand, seed)?;
    assemble(
        DatasetKind::Rlrd,
        images,
        labels,
        seed,
        GeneratorParams::Rlrd {
            source: source.to_string(),
        },
        None,
    )
}

/// How the RLGD instance schedule walks perturbations: slot `t` maps to
/// (coefficient `t % 6`, weight index `(t / 6) % 25`, chaos-game seed index
/// `t / 150`). Weight index `k` scales by `0.8 + 0.4 k / 24`, so `k = 12` is
/// exactly 1.0 and always yields a valid instance.
fn schedule_entry(t: usize) -> (ParamSlot, f64, u64) {
    let slot = ParamSlot::ALL[t % 6];
    let k = (t / 6) % 25;
    let w = 0.8 + 0.4 * (k as f64) / 24.0;
    (slot, w, (t / 150) as u64)
}

fn rlgd_images(
    num_categories: usize,
    instances_per_category: usize,
    render: &RenderParams,
    seed: u64,
) -> Result<(Array4<f32>, Vec<u32>), DatagenError> {
    if num_categories < 1 || instances_per_category < 1 {
        return Err(DatagenError::EmptyDataset);
    }
    let n = num_categories * instances_per_category;
    let mut images = Array4::zeros((n, render.height, render.width, render.channels));
    let mut category_ids = Vec::with_capacity(n);
    // Within any 150 consecutive slots the six w = 1.0 combinations always
    // succeed, so this bound can only trip on a logic error.
    let t_max = 150 * (instances_per_category + 1);
    for cat in 0..num_categories {
        let cat_seed = rng::key(seed, "rlgd_category", cat as u64);
        let system = fractal::sample_category(cat_seed, render)?;
        let mut collected = 0;
        let mut t = 0;
        while collected < instances_per_category {
            if t >= t_max {
                return Err(DatagenError::InstanceScheduleExhausted {
                    category: cat,
                    want: instances_per_category,
                    scanned: t,
                });
            }
            let (slot, w, seed_idx) = schedule_entry(t);
            t += 1;
            let perturbed = fractal::perturb_instance(&system, slot, w)?;
            if !perturbed.contractive {
                continue;
            }
            let chaos_seed = rng::key(cat_seed, "rlgd_render", seed_idx);
            match fractal::render(&perturbed.system, chaos_seed) {
                Ok(img) => {
                    images
                        .index_axis_mut(Axis(0), cat * instances_per_category + collected)
                        .assign(&img);
                    category_ids.push(cat as u32);
                    collected += 1;
                }
                Err(FractalError::EmptyRender) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok((images, category_ids))
}

/// RLGD: fractal category renders under the perturbation schedule, with the
/// category identity discarded and fresh uniform random labels assigned.
pub fn build_rlgd(
    num_categories: usize,
    instances_per_category: usize,
    d_rand: u32,
    seed: u64,
) -> Result<UnrealDataset, DatagenError> {
    build_rlgd_with(
        num_categories,
        instances_per_category,
        &RenderParams::default(),
        d_rand,
        seed,
    )
}

pub fn build_rlgd_with(
    num_categories: usize,
    instances_per_category: usize,
    render: &RenderParams,
    d_rand: u32,
    seed: u64,
) -> Result<UnrealDataset, DatagenError> {
    let (images, _) = rlgd_images(num_categories, instances_per_category, render, seed)?;
    let labels = random_labels(images.dim().0, d_rand, seed)?;
    assemble(
        DatasetKind::Rlgd,
        images,
        labels,
        seed,
        GeneratorParams::Rlgd {
            num_categories,
            instances_per_category,
            render: *render,
        },
        None,
    )
}

/// Fractal instances with their true category ids preserved — the input to
/// the distinguishability analyses, not a training dataset.
pub fn render_fractal_instances(
    num_categories: usize,
    instances_per_category: usize,
    render: &RenderParams,
    seed: u64,
) -> Result<(Array4<f32>, Vec<u32>), DatagenError> {
    rlgd_images(num_categories, instances_per_category, render, seed)
}

/// RLRN: every pixel i.i.d. standard normal (floating point, unquantized),
/// labels uniform over `d_rand`.
pub fn build_rlrn(n: usize, d_rand: u32, seed: u64) -> Result<UnrealDataset, DatagenError> {
    if n < 1 {
        return Err(DatagenError::EmptyDataset);
    }
    let mut images = Array4::zeros((n, IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS));
    for i in 0..n {
        let mut r = rng::stream(seed, "rlrn_pixels", i as u64);
        for v in images.index_axis_mut(Axis(0), i).iter_mut() {
            *v = r.sample(StandardNormal);
        }
    }
    let labels = random_labels(n, d_rand, seed)?;
    assemble(
        DatasetKind::Rlrn,
        images,
        labels,
        seed,
        GeneratorParams::Rlrn,
        None,
    )
}

/// REAL baseline: the supplied images with their true labels and CIFAR
/// normalization statistics.
pub fn build_real(
    source_images: &[Array3<f32>],
    true_labels: &[u32],
    num_classes: u32,
    source: &str,
) -> Result<UnrealDataset, DatagenError> {
    if num_classes < 1 {
        return Err(DatagenError::InvalidClassCount(num_classes));
    }
    let images = stack_images(source_images)?;
    if images.dim().0 != true_labels.len() {
        return Err(DatagenError::LengthMismatch {
            images: images.dim().0,
            labels: true_labels.len(),
        });
    }
    for (index, &label) in true_labels.iter().enumerate() {
        if label >= num_classes {
            return Err(DatagenError::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
    }
    let labels = LabelAssignment {
        d_rand: num_classes,
        labels: true_labels.to_vec(),
        seed: 0,
    };
    assemble(
        DatasetKind::Real,
        images,
        labels,
        0,
        GeneratorParams::Real {
            source: source.to_string(),
            num_classes,
        },
        Some(NormStats {
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        }),
    )
}

/// Deterministic stand-in for a real-image corpus: smooth multi-frequency
/// gradients in [0, 1], visually image-like rather than noise. Useful at
/// desk scale when no CIFAR binaries are on disk.
pub fn synthetic_images(n: usize, seed: u64) -> Vec<Array3<f32>> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, "synthetic_image", i as u64);
            let mut freq = [[0f32; 4]; 3];
            for row in &mut freq {
                for v in row.iter_mut() {
                    *v = r.random_range(-2.0..2.0f32);
                }
            }
            Array3::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS), |(h, w, c)| {
                let (x, y) = (
                    w as f32 / IMAGE_SIDE as f32,
                    h as f32 / IMAGE_SIDE as f32,
                );
                let f = &freq[c];
                let v = (f[0] * x + f[1] * y + f[2] * (6.0 * x + f[3]).sin() * y).sin();
                0.5 + 0.5 * v
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Splits and transforms

/// Image transform applied when a view is gathered into a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTransform {
    /// Per-channel normalization only (unreal train views).
    Normalize,
    /// Deterministic horizontal flip, then normalization (unreal val views).
    FlipNormalize,
    /// Random 4-pixel-padded crop and random horizontal flip, then
    /// normalization (REAL train views).
    RealTrain,
}

/// A transformed window over a dataset; unreal splits use the full range for
/// both sides, REAL uses disjoint halves.
pub struct DatasetView<'a> {
    ds: &'a UnrealDataset,
    pub transform: ViewTransform,
    start: usize,
    len: usize,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn label(&self, i: usize) -> u32 {
        self.ds.labels.labels[self.start + i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.ds.labels.labels[self.start..self.start + self.len]
    }

    pub fn num_classes(&self) -> u32 {
        self.ds.labels.d_rand
    }

    pub fn kind(&self) -> DatasetKind {
        self.ds.kind
    }

    /// Materializes the samples at `idxs` (view-relative) as a channel-major
    /// `(C, B, H, W)` batch with the view transform applied. `rng` drives the
    /// stochastic REAL train augmentation and is untouched by deterministic
    /// transforms.
    pub fn gather<R: Rng>(&self, idxs: &[usize], rng: &mut R) -> (Feat, Vec<u32>) {
        let (_, h, w, c) = self.ds.images.dim();
        let mean: Vec<f32> = self.ds.manifest.norm.mean.iter().map(|&v| v as f32).collect();
        let std: Vec<f32> = self.ds.manifest.norm.std.iter().map(|&v| v as f32).collect();
        let mut out = Feat::zeros((c, idxs.len(), h, w));
        let mut labels = Vec::with_capacity(idxs.len());
        for (b, &i) in idxs.iter().enumerate() {
            assert!(i < self.len, "index {i} out of view range {}", self.len);
            let img = self.ds.images.index_axis(Axis(0), self.start + i);
            labels.push(self.ds.labels.labels[self.start + i]);
            match self.transform {
                ViewTransform::Normalize => {
                    for ch in 0..c {
                        for hh in 0..h {
                            for ww in 0..w {
                                out[[ch, b, hh, ww]] = (img[[hh, ww, ch]] - mean[ch]) / std[ch];
                            }
                        }
                    }
                }
                ViewTransform::FlipNormalize => {
                    for ch in 0..c {
                        for hh in 0..h {
                            for ww in 0..w {
                                out[[ch, b, hh, ww]] =
                                    (img[[hh, w - 1 - ww, ch]] - mean[ch]) / std[ch];
                            }
                        }
                    }
                }
                ViewTransform::RealTrain => {
                    // Crop offsets into the 4-padded image, then flip; both
                    // drawn per sample in a fixed order.
                    let dy = rng.random_range(0..=8usize);
                    let dx = rng.random_range(0..=8usize);
                    let flip = rng.random_bool(0.5);
                    for ch in 0..c {
                        for hh in 0..h {
                            for ww in 0..w {
                                let src_w = if flip { w - 1 - ww } else { ww };
                                let (sh, sw) = (hh + dy, src_w + dx);
                                let raw = if sh >= 4 && sh < h + 4 && sw >= 4 && sw < w + 4 {
                                    img[[sh - 4, sw - 4, ch]]
                                } else {
                                    0.0
                                };
                                out[[ch, b, hh, ww]] = (raw - mean[ch]) / std[ch];
                            }
                        }
                    }
                }
            }
        }
        (out, labels)
    }
}

pub struct SplitPair<'a> {
    pub train: DatasetView<'a>,
    pub val: DatasetView<'a>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SplitOptions {
    /// Give RLRD a disjoint validation half (like REAL) instead of reusing
    /// the train samples.
    pub rlrd_disjoint: bool,
}

/// Builds the train/validation pair for a dataset.
///
/// Unreal kinds: both views cover every sample; train normalizes, val flips
/// horizontally then normalizes; labels are shared. REAL: first half trains
/// with stochastic crop/flip, second half validates with normalization only.
pub fn make_split(ds: &UnrealDataset) -> SplitPair<'_> {
    make_split_opts(ds, SplitOptions::default())
}

pub fn make_split_opts(ds: &UnrealDataset, opts: SplitOptions) -> SplitPair<'_> {
    let n = ds.n();
    match ds.kind {
        DatasetKind::Real => SplitPair {
            train: DatasetView {
                ds,
                transform: ViewTransform::RealTrain,
                start: 0,
                len: n / 2,
            },
            val: DatasetView {
                ds,
                transform: ViewTransform::Normalize,
                start: n / 2,
                len: n - n / 2,
            },
        },
        DatasetKind::Rlrd if opts.rlrd_disjoint => SplitPair {
            train: DatasetView {
                ds,
                transform: ViewTransform::Normalize,
                start: 0,
                len: n / 2,
            },
            val: DatasetView {
                ds,
                transform: ViewTransform::FlipNormalize,
                start: n / 2,
                len: n - n / 2,
            },
        },
        _ => SplitPair {
            train: DatasetView {
                ds,
                transform: ViewTransform::Normalize,
                start: 0,
                len: n,
            },
            val: DatasetView {
                ds,
                transform: ViewTransform::FlipNormalize,
                start: 0,
                len: n,
            },
        },
    }
}

/// Mirrors an `(H, W, C)` image left-right without normalization. Applying
/// it twice is the identity.
pub fn flip_horizontal(img: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(hh, ww, ch)| img[[hh, w - 1 - ww, ch]])
}

// ---------------------------------------------------------------------------
// Persistence

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<stem>.manifest.json`, `<stem>.images.bin`, `<stem>.labels.bin`.
pub fn save_dataset(ds: &UnrealDataset, stem: &Path) -> Result<(), DatagenError> {
    let manifest_path = stem.with_extension("manifest.json");
    let images_path = stem.with_extension("images.bin");
    let labels_path = stem.with_extension("labels.bin");

    let json = serde_json::to_string_pretty(&ds.manifest)?;
    std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;

    let f = File::create(&images_path).map_err(io_err(&images_path))?;
    let mut w = BufWriter::new(f);
    let (n, h, wd, c) = ds.images.dim();
    w.write_all(MAGIC).map_err(io_err(&images_path))?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(io_err(&images_path))?;
    w.write_all(&(n as u32).to_le_bytes())
        .map_err(io_err(&images_path))?;
    for dim in [h, wd, c] {
        w.write_all(&(dim as u16).to_le_bytes())
            .map_err(io_err(&images_path))?;
    }
    w.write_all(&DTYPE_F32.to_le_bytes())
        .map_err(io_err(&images_path))?;
    let data = ds.images.as_slice().expect("standard layout");
    let mut buf = Vec::with_capacity(4096 * 4);
    for chunk in data.chunks(4096) {
        buf.clear();
        for &v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err(&images_path))?;
    }
    w.flush().map_err(io_err(&images_path))?;

    let f = File::create(&labels_path).map_err(io_err(&labels_path))?;
    let mut w = BufWriter::new(f);
    for &l in &ds.labels.labels {
        w.write_all(&l.to_le_bytes()).map_err(io_err(&labels_path))?;
    }
    w.flush().map_err(io_err(&labels_path))?;
    Ok(())
}

/// Loads a dataset saved by [`save_dataset`], verifying payload checksums
/// against the manifest.
pub fn load_dataset(stem: &Path) -> Result<UnrealDataset, DatagenError> {
    let manifest_path = stem.with_extension("manifest.json");
    let images_path = stem.with_extension("images.bin");
    let labels_path = stem.with_extension("labels.bin");

    let json = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatagenError::Format {
            path: manifest_path,
            reason: format!(
                "unsupported manifest version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }

    let f = File::open(&images_path).map_err(io_err(&images_path))?;
    let mut r = BufReader::new(f);
    let mut head = [0u8; 4 + 2 + 4 + 2 + 2 + 2 + 2];
    r.read_exact(&mut head).map_err(io_err(&images_path))?;
    if &head[0..4] != MAGIC {
        return Err(DatagenError::Format {
            path: images_path,
            reason: "bad magic".into(),
        });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != FORMAT_VERSION {
        return Err(DatagenError::Format {
            path: images_path,
            reason: format!("unsupported file version {version}"),
        });
    }
    let n = u32::from_le_bytes([head[6], head[7], head[8], head[9]]) as usize;
    let h = u16::from_le_bytes([head[10], head[11]]) as usize;
    let w = u16::from_le_bytes([head[12], head[13]]) as usize;
    let c = u16::from_le_bytes([head[14], head[15]]) as usize;
    let dtype = u16::from_le_bytes([head[16], head[17]]);
    if dtype != DTYPE_F32 {
        return Err(DatagenError::Format {
            path: images_path,
            reason: format!("unsupported dtype tag {dtype}"),
        });
    }
    if (n, h, w, c) != (manifest.n, manifest.height, manifest.width, manifest.channels) {
        return Err(DatagenError::Format {
            path: images_path,
            reason: format!(
                "header {n}x{h}x{w}x{c} disagrees with manifest {}x{}x{}x{}",
                manifest.n, manifest.height, manifest.width, manifest.channels
            ),
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err(&images_path))?;
    if payload.len() != n * h * w * c * 4 {
        // A short payload cannot match the manifest checksum; surface it as
        // the integrity failure it is.
        return Err(DatagenError::Checksum {
            file: images_path.display().to_string(),
            expected: manifest.images_sha256.clone(),
            got: format!("<{} bytes, expected {}>", payload.len(), n * h * w * c * 4),
        });
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let got = sha256_f32(&floats);
    if got != manifest.images_sha256 {
        return Err(DatagenError::Checksum {
            file: images_path.display().to_string(),
            expected: manifest.images_sha256.clone(),
            got,
        });
    }
    let images = Array4::from_shape_vec((n, h, w, c), floats).expect("shape checked");

    let bytes = std::fs::read(&labels_path).map_err(io_err(&labels_path))?;
    if bytes.len() != n * 4 {
        return Err(DatagenError::Checksum {
            file: labels_path.display().to_string(),
            expected: manifest.labels_sha256.clone(),
            got: format!("<{} bytes, expected {}>", bytes.len(), n * 4),
        });
    }
    let labels: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let got = sha256_u32(&labels);
    if got != manifest.labels_sha256 {
        return Err(DatagenError::Checksum {
            file: labels_path.display().to_string(),
            expected: manifest.labels_sha256.clone(),
            got,
        });
    }

    Ok(UnrealDataset {
        kind: manifest.kind,
        images,
        labels: LabelAssignment {
            d_rand: manifest.d_rand,
            labels,
            seed: manifest.seed,
        },
        manifest,
    })
}

/// Regenerates a dataset from its manifest alone and verifies the checksums.
/// Supported for RLGD and RLRN (pure functions of the manifest) and for RLRD
/// built from the `synthetic:` source helper.
pub fn regenerate_from_manifest(m: &DatasetManifest) -> Result<UnrealDataset, DatagenError> {
    let ds = match &m.params {
        GeneratorParams::Rlrn => build_rlrn(m.n, m.d_rand, m.seed)?,
        GeneratorParams::Rlgd {
            num_categories,
            instances_per_category,
            render,
        } => build_rlgd_with(*num_categories, *instances_per_category, render, m.d_rand, m.seed)?,
        GeneratorParams::Rlrd { source } => {
            if let Some(rest) = source.strip_prefix("synthetic:") {
                let img_seed: u64 = rest.parse().map_err(|_| DatagenError::Regeneration(m.kind))?;
                let imgs = synthetic_images(m.n, img_seed);
                build_rlrd(&imgs, source, m.d_rand, m.seed)?
            } else {
                return Err(DatagenError::Regeneration(m.kind));
            }
        }
        GeneratorParams::Real { .. } => return Err(DatagenError::Regeneration(m.kind)),
    };
    for (name, expected, got) in [
        ("images", &m.images_sha256, &ds.manifest.images_sha256),
        ("labels", &m.labels_sha256, &ds.manifest.labels_sha256),
    ] {
        if expected != got {
            return Err(DatagenError::Checksum {
                file: name.to_string(),
                expected: expected.clone(),
                got: got.clone(),
            });
        }
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// CIFAR ingestion

/// Reads standard CIFAR binary batches (3073-byte records: one label byte,
/// then 1024 red, 1024 green, 1024 blue bytes) into `(H, W, C)` float images
/// scaled to [0, 1], plus their true labels.
pub fn read_cifar_batches(paths: &[PathBuf]) -> Result<(Vec<Array3<f32>>, Vec<u32>), DatagenError> {
    const RECORD: usize = 3073;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(DatagenError::Format {
                path: path.clone(),
                reason: format!("file size {} is not a multiple of {RECORD}", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(RECORD) {
            labels.push(rec[0] as u32);
            let mut img = Array3::zeros((IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS));
            for ch in 0..IMAGE_CHANNELS {
                for hh in 0..IMAGE_SIDE {
                    for ww in 0..IMAGE_SIDE {
                        let v = rec[1 + ch * 1024 + hh * IMAGE_SIDE + ww];
                        img[[hh, ww, ch]] = v as f32 / 255.0;
                    }
                }
            }
            images.push(img);
        }
    }
    Ok((images, labels))
}
