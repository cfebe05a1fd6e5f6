//! Iterated-function-system fractal images.
//!
//! A category is a small set of contractive affine maps; instances of the
//! category are rendered by running the chaos game and stamping a small patch
//! at every visited pixel. Categories whose attractor fills too little of the
//! frame are rejected and resampled, so every accepted category clears the
//! configured filling rate.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Errors from category sampling, perturbation, and rendering.
#[derive(Debug, Error)]
pub enum FractalError {
    #[error("no acceptable IFS found for seed {seed} after {attempts} attempts")]
    ResamplingExhausted { seed: u64, attempts: u32 },
    #[error("parameter slot index {0} out of range (expected 0..=5)")]
    InvalidParamSlot(usize),
    #[error("perturbation weight must be finite and positive, got {0}")]
    InvalidWeight(f64),
    #[error("invalid render parameters: {0}")]
    InvalidRenderParams(String),
    #[error("chaos-game orbit never entered the frame; system is degenerate")]
    EmptyRender,
    #[error("an IFS system needs at least two maps, got {0}")]
    TooFewMaps(usize),
}

/// One affine map `(x, y) -> (a x + b y + e, c x + d y + f)` with selection
/// probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub p: f64,
}

impl AffineMap {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a * x + self.b * y + self.e,
            self.c * x + self.d * y + self.f,
        )
    }

    /// Determinant of the linear part.
    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// Whether the largest singular value of the linear part is below 1.
    ///
    /// For a 2x2 matrix with squared Frobenius norm `t` and determinant `det`,
    /// `sigma_max < 1` is equivalent to `t < 2 && t - det^2 < 1`, which avoids
    /// the square roots of an explicit SVD.
    pub fn is_contractive(&self) -> bool {
        let t = self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d;
        let det = self.det();
        t < 2.0 && t - det * det < 1.0
    }

    fn coefficients_finite(&self) -> bool {
        [self.a, self.b, self.c, self.d, self.e, self.f]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which of the six affine coefficients an intra-category perturbation scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamSlot {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl ParamSlot {
    pub const ALL: [ParamSlot; 6] = [
        ParamSlot::A,
        ParamSlot::B,
        ParamSlot::C,
        ParamSlot::D,
        ParamSlot::E,
        ParamSlot::F,
    ];

    pub fn from_index(i: usize) -> Result<Self, FractalError> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(FractalError::InvalidParamSlot(i))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Rendering geometry and chaos-game controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Chaos-game iterations that stamp pixels (after burn-in).
    pub point_count: usize,
    /// Side of the square patch stamped per visited point (1 or 3).
    pub patch_size: usize,
    /// Initial iterations discarded while the orbit settles onto the attractor.
    pub burn_in: usize,
    /// Minimum fraction of occupied pixels for an accepted category.
    pub fill_threshold: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            height: 32,
            width: 32,
            channels: 3,
            point_count: 20_000,
            patch_size: 3,
            burn_in: 20,
            fill_threshold: 0.2,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<(), FractalError> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(FractalError::InvalidRenderParams(
                "height, width, and channels must be positive".into(),
            ));
        }
        if self.patch_size != 1 && self.patch_size != 3 {
            return Err(FractalError::InvalidRenderParams(format!(
                "patch_size must be 1 or 3, got {}",
                self.patch_size
            )));
        }
        if !(self.fill_threshold > 0.0 && self.fill_threshold < 1.0) {
            return Err(FractalError::InvalidRenderParams(format!(
                "fill_threshold must lie in (0, 1), got {}",
                self.fill_threshold
            )));
        }
        if self.point_count == 0 {
            return Err(FractalError::InvalidRenderParams(
                "point_count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A fractal category: contractive affine maps plus rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IFSSystem {
    pub maps: Vec<AffineMap>,
    pub category_id: u32,
    pub render: RenderParams,
}

impl IFSSystem {
    /// Checks the structural invariants: at least two maps, finite
    /// coefficients, probabilities summing to 1, every map contractive.
    pub fn validate(&self) -> Result<(), FractalError> {
        if self.maps.len() < 2 {
            return Err(FractalError::TooFewMaps(self.maps.len()));
        }
        let psum: f64 = self.maps.iter().map(|m| m.p).sum();
        if (psum - 1.0).abs() > 1e-9 || self.maps.iter().any(|m| m.p < 0.0) {
            return Err(FractalError::InvalidRenderParams(format!(
                "selection probabilities must be nonnegative and sum to 1, sum={psum}"
            )));
        }
        if !self.maps.iter().all(|m| m.coefficients_finite()) {
            return Err(FractalError::InvalidRenderParams(
                "non-finite affine coefficient".into(),
            ));
        }
        if !self.is_contractive() {
            return Err(FractalError::InvalidRenderParams(
                "system fails the contraction check".into(),
            ));
        }
        self.render.validate()
    }

    /// True when every map's linear part is a contraction.
    pub fn is_contractive(&self) -> bool {
        self.maps.iter().all(|m| m.is_contractive())
    }
}

/// Result of an intra-category perturbation. Non-contractive outcomes are
/// flagged rather than discarded so callers can implement their own skip
/// policy.
#[derive(Debug, Clone)]
pub struct PerturbedSystem {
    pub system: IFSSystem,
    pub contractive: bool,
}

const MAX_SYSTEM_ATTEMPTS: u32 = 1000;
const MAX_MAP_ATTEMPTS: u32 = 1000;

/// Samples a fractal category deterministically from `seed`.
///
/// Linear coefficients are drawn uniformly from [-1, 1] and rejected per map
/// until contractive; selection probabilities are proportional to |det| with a
/// uniform fallback when all determinants vanish. A candidate system is
/// accepted once its rendering (with render seed 0) occupies at least
/// `render.fill_threshold` of the frame.
pub fn sample_category(seed: u64, render: &RenderParams) -> Result<IFSSystem, FractalError> {
    render.validate()?;
    for attempt in 0..MAX_SYSTEM_ATTEMPTS {
        let mut r = rng::stream(seed, "ifs_category", attempt as u64);
        let num_maps = r.random_range(2..=8usize);
        let mut maps = Vec::with_capacity(num_maps);
        for _ in 0..num_maps {
            let mut found = false;
            for _ in 0..MAX_MAP_ATTEMPTS {
                let m = AffineMap {
                    a: r.random_range(-1.0..=1.0),
                    b: r.random_range(-1.0..=1.0),
                    c: r.random_range(-1.0..=1.0),
                    d: r.random_range(-1.0..=1.0),
                    e: r.random_range(-1.0..=1.0),
                    f: r.random_range(-1.0..=1.0),
                    p: 0.0,
                };
                if m.is_contractive() {
                    maps.push(m);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(FractalError::ResamplingExhausted {
                    seed,
                    attempts: MAX_MAP_ATTEMPTS,
                });
            }
        }

        let det_sum: f64 = maps.iter().map(|m| m.det().abs()).sum();
        let n = maps.len() as f64;
        for m in &mut maps {
            m.p = if det_sum < 1e-12 {
                1.0 / n
            } else {
                m.det().abs() / det_sum
            };
        }

        let sys = IFSSystem {
            maps,
            category_id: seed as u32,
            render: *render,
        };
        // Degenerate candidates (all-zero determinants with orbits stuck on a
        // point) can fail to render; treat that as a rejection, not an error.
        match render_plane(&sys, 0) {
            Ok(plane) => {
                if plane_fill_fraction(&plane) >= render.fill_threshold {
                    return Ok(sys);
                }
            }
            Err(FractalError::EmptyRender) => {}
            Err(e) => return Err(e),
        }
    }
    Err(FractalError::ResamplingExhausted {
        seed,
        attempts: MAX_SYSTEM_ATTEMPTS,
    })
}

/// Scales one coefficient slot by `w` in every map of `sys`.
///
/// The category id and selection probabilities are kept; the result is
/// flagged non-contractive when the scaling pushes any map past the
/// contraction boundary.
pub fn perturb_instance(
    sys: &IFSSystem,
    slot: ParamSlot,
    w: f64,
) -> Result<PerturbedSystem, FractalError> {
    if !(w.is_finite() && w > 0.0) {
        return Err(FractalError::InvalidWeight(w));
    }
    let mut out = sys.clone();
    for m in &mut out.maps {
        match slot {
            ParamSlot::A => m.a *= w,
            ParamSlot::B => m.b *= w,
            ParamSlot::C => m.c *= w,
            ParamSlot::D => m.d *= w,
            ParamSlot::E => m.e *= w,
            ParamSlot::F => m.f *= w,
        }
    }
    let contractive = out.is_contractive();
    Ok(PerturbedSystem {
        system: out,
        contractive,
    })
}

/// Runs the chaos game and returns an `(H, W, C)` image with values in [0, 1].
///
/// Points live in the normalized frame [-1, 1]^2; visits outside the frame are
/// skipped. Every in-frame visit stamps a `patch_size` square of intensity 1,
/// and the single intensity plane is replicated across all channels.
pub fn render(sys: &IFSSystem, seed: u64) -> Result<Array3<f32>, FractalError> {
    let plane = render_plane(sys, seed)?;
    let rp = &sys.render;
    let mut img = Array3::<f32>::zeros((rp.height, rp.width, rp.channels));
    for h in 0..rp.height {
        for w in 0..rp.width {
            let v = plane[h * rp.width + w];
            for c in 0..rp.channels {
                img[[h, w, c]] = v;
            }
        }
    }
    Ok(img)
}

/// Fraction of pixels the rendered system occupies (render seed as given).
pub fn rendered_fill_fraction(sys: &IFSSystem, seed: u64) -> Result<f64, FractalError> {
    Ok(plane_fill_fraction(&render_plane(sys, seed)?))
}

/// Fraction of occupied pixels in an (H, W, C) image produced by [`render`].
pub fn fill_fraction(img: &Array3<f32>) -> f64 {
    let (h, w, _) = img.dim();
    let occupied = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| img[[i, j, 0]] > 0.0)
        .count();
    occupied as f64 / (h * w) as f64
}

/// Chaos game on a single intensity plane, row-major `H*W`.
fn render_plane(sys: &IFSSystem, seed: u64) -> Result<Vec<f32>, FractalError> {
    let rp = &sys.render;
    rp.validate()?;
    if sys.maps.len() < 2 {
        return Err(FractalError::TooFewMaps(sys.maps.len()));
    }
    let mut r = rng::stream(seed, "chaos_game", 0);
    let mut plane = vec![0.0f32; rp.height * rp.width];
    let (mut x, mut y) = (0.0f64, 0.0f64);
    let mut stamped_any = false;
    let reach = rp.patch_size as isize / 2;

    for it in 0..rp.burn_in + rp.point_count {
        let u: f64 = r.random_range(0.0..1.0);
        let mut acc = 0.0;
        let mut chosen = sys.maps.len() - 1;
        for (i, m) in sys.maps.iter().enumerate() {
            acc += m.p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let (nx, ny) = sys.maps[chosen].apply(x, y);
        x = nx;
        y = ny;
        if it < rp.burn_in {
            continue;
        }
        // Map [-1, 1] to pixel centers; x is the column axis, y the row axis.
        let col = ((x + 1.0) * 0.5 * (rp.width - 1) as f64).round() as isize;
        let row = ((y + 1.0) * 0.5 * (rp.height - 1) as f64).round() as isize;
        if col < 0 || row < 0 || col >= rp.width as isize || row >= rp.height as isize {
            continue;
        }
        stamped_any = true;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let rr = row + dr;
                let cc = col + dc;
                if rr >= 0 && cc >= 0 && rr < rp.height as isize && cc < rp.width as isize {
                    plane[rr as usize * rp.width + cc as usize] = 1.0;
                }
            }
        }
    }
    if !stamped_any {
        return Err(FractalError::EmptyRender);
    }
    Ok(plane)
}

fn plane_fill_fraction(plane: &[f32]) -> f64 {
    plane.iter().filter(|&&v| v > 0.0).count() as f64 / plane.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sierpinski(render: RenderParams) -> IFSSystem {
        let third = 1.0 / 3.0;
        let m = |e, f| AffineMap {
            a: 0.5,
            b: 0.0,
            c: 0.0,
            d: 0.5,
            e,
            f,
            p: third,
        };
        IFSSystem {
            maps: vec![m(0.0, 0.0), m(0.5, 0.0), m(0.0, 0.5)],
            category_id: 0,
            render,
        }
    }

    #[test]
    fn sampled_category_meets_fill_threshold() {
        let rp = RenderParams::default();
        let sys = sample_category(7, &rp).unwrap();
        sys.validate().unwrap();
        assert!(rendered_fill_fraction(&sys, 0).unwrap() >= rp.fill_threshold);
    }

    #[test]
    fn sampling_is_deterministic() {
        let rp = RenderParams::default();
        let a = sample_category(11, &rp).unwrap();
        let b = sample_category(11, &rp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seed_sweep_yields_distinct_systems() {
        let rp = RenderParams::default();
        let systems: Vec<IFSSystem> = (0..100)
            .map(|s| sample_category(s, &rp).unwrap())
            .collect();
        let ids: std::collections::HashSet<u32> =
            systems.iter().map(|s| s.category_id).collect();
        assert_eq!(ids.len(), 100);
        let serialized: Vec<String> = systems
            .iter()
            .map(|s| serde_json::to_string(&s.maps).unwrap())
            .collect();
        for i in 0..serialized.len() {
            for j in i + 1..serialized.len() {
                assert_ne!(serialized[i], serialized[j], "categories {i} and {j} collide");
            }
        }
    }

    #[test]
    fn identity_perturbation_is_exact() {
        let sys = sample_category(3, &RenderParams::default()).unwrap();
        for slot in ParamSlot::ALL {
            let p = perturb_instance(&sys, slot, 1.0).unwrap();
            assert!(p.contractive);
            assert_eq!(p.system.maps, sys.maps);
        }
    }

    #[test]
    fn perturbation_scales_only_the_selected_slot() {
        let sys = sample_category(3, &RenderParams::default()).unwrap();
        let p = perturb_instance(&sys, ParamSlot::A, 0.8).unwrap();
        for (orig, new) in sys.maps.iter().zip(&p.system.maps) {
            assert_eq!(new.a, orig.a * 0.8);
            assert_eq!(
                (new.b, new.c, new.d, new.e, new.f, new.p),
                (orig.b, orig.c, orig.d, orig.e, orig.f, orig.p)
            );
        }
        assert_eq!(p.system.category_id, sys.category_id);
    }

    #[test]
    fn perturbation_at_contraction_boundary_is_flagged() {
        // sigma_max = 0.99 exactly; scaling d by 1.2 crosses 1.
        let boundary = AffineMap {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.99,
            e: 0.1,
            f: 0.1,
            p: 0.5,
        };
        let sys = IFSSystem {
            maps: vec![boundary, boundary],
            category_id: 1,
            render: RenderParams::default(),
        };
        let up = perturb_instance(&sys, ParamSlot::D, 1.2).unwrap();
        assert!(!up.contractive);
        let down = perturb_instance(&sys, ParamSlot::D, 0.8).unwrap();
        assert!(down.contractive);
    }

    #[test]
    fn invalid_slot_index_is_rejected() {
        assert!(matches!(
            ParamSlot::from_index(6),
            Err(FractalError::InvalidParamSlot(6))
        ));
        assert_eq!(ParamSlot::from_index(4).unwrap(), ParamSlot::E);
    }

    #[test]
    fn invalid_weight_is_rejected() {
        let sys = sierpinski(RenderParams::default());
        assert!(perturb_instance(&sys, ParamSlot::A, 0.0).is_err());
        assert!(perturb_instance(&sys, ParamSlot::A, f64::NAN).is_err());
    }

    #[test]
    fn fixed_point_system_stamps_one_patch() {
        // Zero linear part and zero translation: the orbit sits on one pixel.
        let m = AffineMap {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            e: 0.0,
            f: 0.0,
            p: 0.5,
        };
        let rp = RenderParams {
            patch_size: 1,
            ..RenderParams::default()
        };
        let sys = IFSSystem {
            maps: vec![m, m],
            category_id: 0,
            render: rp,
        };
        let img = render(&sys, 5).unwrap();
        let occupied: usize = (0..32)
            .flat_map(|h| (0..32).map(move |w| (h, w)))
            .filter(|&(h, w)| img[[h, w, 0]] > 0.0)
            .count();
        assert_eq!(occupied, 1);
    }

    #[test]
    fn degenerate_offscreen_orbit_is_an_error() {
        // Fixed point at (10, 10), far outside the frame.
        let m = AffineMap {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            e: 10.0,
            f: 10.0,
            p: 0.5,
        };
        let sys = IFSSystem {
            maps: vec![m, m],
            category_id: 0,
            render: RenderParams::default(),
        };
        assert!(matches!(render(&sys, 0), Err(FractalError::EmptyRender)));
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let sys = sierpinski(RenderParams::default());
        let a = render(&sys, 42).unwrap();
        let b = render(&sys, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Channel planes replicate the intensity plane.
        for h in 0..32 {
            for w in 0..32 {
                assert_eq!(a[[h, w, 0]], a[[h, w, 1]]);
                assert_eq!(a[[h, w, 0]], a[[h, w, 2]]);
            }
        }
    }

    #[test]
    fn sierpinski_fill_is_nontrivial() {
        let sys = sierpinski(RenderParams {
            patch_size: 1,
            ..RenderParams::default()
        });
        let fill = rendered_fill_fraction(&sys, 0).unwrap();
        assert!(fill > 0.0 && fill < 1.0, "fill={fill}");
    }

    /// Independent oracle: a plain re-implementation of the chaos game run at
    /// 10x the point budget. For a saturated attractor the occupied set must
    /// agree with the production renderer up to a small Hamming distance.
    fn oracle_occupancy(sys: &IFSSystem, seed: u64, points: usize) -> Vec<bool> {
        let rp = &sys.render;
        let mut r = rng::stream(seed, "chaos_game", 0);
        let mut occ = vec![false; rp.height * rp.width];
        let (mut x, mut y) = (0.0f64, 0.0f64);
        for it in 0..rp.burn_in + points {
            let u: f64 = r.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut k = sys.maps.len() - 1;
            for (i, m) in sys.maps.iter().enumerate() {
                acc += m.p;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let m = &sys.maps[k];
            let (nx, ny) = (m.a * x + m.b * y + m.e, m.c * x + m.d * y + m.f);
            x = nx;
            y = ny;
            if it < rp.burn_in {
                continue;
            }
            let col = ((x + 1.0) * 0.5 * (rp.width - 1) as f64).round() as isize;
            let row = ((y + 1.0) * 0.5 * (rp.height - 1) as f64).round() as isize;
            if col < 0 || row < 0 || col >= rp.width as isize || row >= rp.height as isize {
                continue;
            }
            occ[row as usize * rp.width + col as usize] = true;
        }
        occ
    }

    #[test]
    fn sierpinski_matches_ten_x_oracle() {
        let rp = RenderParams {
            patch_size: 1,
            ..RenderParams::default()
        };
        let sys = sierpinski(rp);
        let img = render(&sys, 0).unwrap();
        let oracle = oracle_occupancy(&sys, 0, rp.point_count * 10);
        let total = rp.height * rp.width;
        let differing = (0..total)
            .filter(|&i| (img[[i / rp.width, i % rp.width, 0]] > 0.0) != oracle[i])
            .count();
        assert!(
            (differing as f64) / (total as f64) <= 0.02,
            "Hamming distance {differing}/{total} exceeds 2%"
        );
    }
}
