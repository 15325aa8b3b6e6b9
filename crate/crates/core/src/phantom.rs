//! Deterministic chest-like CT phantoms built from ellipsoids and cylinders.
//!
//! Geometry is expressed in normalized coordinates: each axis of the volume
//! spans [−1, 1] from the outer edge of the first voxel to the outer edge of
//! the last. Axes are (depth, height, width); height increases towards
//! anterior.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::preprocess::{HuWindow, ValueKind, Volume, AIR_HU};

fn sq(x: f64) -> f64 {
    x * x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub hu: f64,
}

impl Ellipsoid {
    /// Implicit function; ≤ 1 inside.
    #[inline]
    pub fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| sq((p[a] - self.center[a]) / self.radii[a])).sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }
}

/// Cylinder along the depth axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub depth_range: [f64; 2],
    pub hu: f64,
}

impl Cylinder {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (dy, dx) = (p[1] - self.center[0], p[2] - self.center[1]);
        p[0] >= self.depth_range[0] && p[0] <= self.depth_range[1] && dy * dy + dx * dx <= self.radius * self.radius
    }
}

/// Thin elliptical shells at evenly spaced depths, open anteriorly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RibCage {
    pub count: usize,
    pub first_depth: f64,
    pub depth_step: f64,
    pub half_thickness: f64,
    /// Ring radii along (height, width).
    pub radii: [f64; 2],
    /// Radial shell width as a fraction of the ring radius.
    pub width: f64,
    /// Rings stop at this fraction of the height radius towards anterior.
    pub anterior_cut: f64,
    pub hu: f64,
}

impl RibCage {
    fn depths(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(move |k| self.first_depth + k as f64 * self.depth_step)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        if p[1] > self.anterior_cut * self.radii[0] {
            return false;
        }
        let rho = libm::sqrt(sq(p[1] / self.radii[0]) + sq(p[2] / self.radii[1]));
        if !(rho >= 1.0 - self.width && rho <= 1.0) {
            return false;
        }
        self.depths().any(|z| libm::fabs(p[0] - z) <= self.half_thickness)
    }
}

/// Per-sample random perturbation bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Maximum absolute center shift (normalized units).
    pub center: f64,
    /// Maximum relative radius change.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub heart: Ellipsoid,
    pub spine: Cylinder,
    pub ribs: RibCage,
    pub jitter: Jitter,
}

impl PhantomSpec {
    /// 288 mm field of view at anisotropic 6×3×3 mm voxels.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            extents: [48, 96, 96],
            spacing: [6.0, 3.0, 3.0],
            body: Ellipsoid { center: [0.0, 0.0, 0.0], radii: [0.80, 0.55, 0.72], hu: 40.0 },
            lungs: [
                Ellipsoid { center: [0.12, -0.02, -0.34], radii: [0.55, 0.38, 0.26], hu: -800.0 },
                Ellipsoid { center: [0.12, -0.02, 0.34], radii: [0.55, 0.38, 0.26], hu: -800.0 },
            ],
            heart: Ellipsoid { center: [-0.05, 0.12, 0.06], radii: [0.28, 0.26, 0.24], hu: 50.0 },
            spine: Cylinder { center: [-0.42, 0.0], radius: 0.08, depth_range: [-0.78, 0.78], hu: 700.0 },
            ribs: RibCage {
                count: 5,
                first_depth: 0.45,
                depth_step: -0.2,
                half_thickness: 0.035,
                radii: [0.50, 0.67],
                width: 0.08,
                anterior_cut: 0.6,
                hu: 700.0,
            },
            jitter: Jitter { center: 0.04, radius: 0.08 },
        }
    }

    pub fn with_extents(mut self, extents: [usize; 3], spacing: [f64; 3]) -> Self {
        self.extents = extents;
        self.spacing = spacing;
        self
    }

    /// Checks that every structure stays inside the volume under the
    /// largest allowed jitter.
    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            bail!(Spec, "extents {:?} and spacing {:?} must be positive", self.extents, self.spacing);
        }
        let j = self.jitter;
        if !(j.center >= 0.0 && (0.0..1.0).contains(&j.radius)) {
            bail!(Spec, "jitter {:?} out of range", j);
        }
        let grow = 1.0 + j.radius;
        let check = |name: &str, lo: f64, hi: f64| -> Result<()> {
            if lo < -1.0 || hi > 1.0 {
                bail!(Spec, "{name} reaches [{lo:.3}, {hi:.3}] outside the volume after jitter");
            }
            Ok(())
        };
        for (name, e) in [("body", &self.body), ("left lung", &self.lungs[0]), ("right lung", &self.lungs[1]), ("heart", &self.heart)] {
            if e.radii.iter().any(|&r| !(r > 0.0)) {
                bail!(Spec, "{name} radii {:?} must be positive", e.radii);
            }
            for a in 0..3 {
                let reach = e.radii[a] * grow + j.center;
                check(name, e.center[a] - reach, e.center[a] + reach)?;
            }
        }
        let s = &self.spine;
        for a in 0..2 {
            let reach = s.radius * grow + j.center;
            check("spine", s.center[a] - reach, s.center[a] + reach)?;
        }
        check("spine", s.depth_range[0] - j.center, s.depth_range[1] + j.center)?;
        let r = &self.ribs;
        for a in 0..2 {
            let reach = r.radii[a] * grow + j.center;
            check("ribs", -reach, reach)?;
        }
        for z in r.depths() {
            check("ribs", z - r.half_thickness - j.center, z + r.half_thickness + j.center)?;
        }
        Ok(())
    }

    fn jittered(&self, index: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let j = self.jitter;
        let shift = |rng: &mut ChaCha8Rng| if j.center > 0.0 { rng.random_range(-j.center..=j.center) } else { 0.0 };
        let mut out = self.clone();
        let grow = |rng: &mut ChaCha8Rng| if j.radius > 0.0 { 1.0 + rng.random_range(-j.radius..=j.radius) } else { 1.0 };
        let ellipsoid = |e: &mut Ellipsoid, rng: &mut ChaCha8Rng| {
            for a in 0..3 {
                e.center[a] += shift(rng);
                e.radii[a] *= grow(rng);
            }
        };
        ellipsoid(&mut out.body, &mut rng);
        ellipsoid(&mut out.lungs[0], &mut rng);
        ellipsoid(&mut out.lungs[1], &mut rng);
        ellipsoid(&mut out.heart, &mut rng);
        for a in 0..2 {
            out.spine.center[a] += shift(&mut rng);
        }
        out.spine.radius *= grow(&mut rng);
        let dz = shift(&mut rng);
        out.spine.depth_range = [out.spine.depth_range[0] + dz, out.spine.depth_range[1] + dz];
        out.ribs.first_depth += shift(&mut rng);
        for a in 0..2 {
            out.ribs.radii[a] *= grow(&mut rng);
        }
        out
    }

    /// Normalized coordinates of a voxel center.
    pub fn coordinate(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        let c = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
        [c(z, self.extents[0]), c(y, self.extents[1]), c(x, self.extents[2])]
    }
}

/// The exact (jittered) geometry used for one phantom.
pub fn geometry(spec: &PhantomSpec, index: u64) -> Result<PhantomSpec> {
    spec.validate()?;
    Ok(spec.jittered(index))
}

/// Rasterizes phantom `index`; later structures overwrite earlier ones in
/// the order air, body, lungs, heart, bone. Everything is clipped to the body.
pub fn generate(spec: &PhantomSpec, index: u64) -> Result<Volume> {
    let g = geometry(spec, index)?;
    let [d, h, w] = g.extents;
    let mut voxels = vec![AIR_HU; d * h * w];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = g.coordinate(z, y, x);
                if !g.body.contains(p) {
                    i += 1;
                    continue;
                }
                let mut v = g.body.hu;
                for lung in &g.lungs {
                    if lung.contains(p) {
                        v = lung.hu;
                    }
                }
                if g.heart.contains(p) {
                    v = g.heart.hu;
                }
                if g.spine.contains(p) {
                    v = g.spine.hu;
                }
                if g.ribs.contains(p) {
                    v = g.ribs.hu;
                }
                voxels[i] = v;
                i += 1;
            }
        }
    }
    Volume::new(g.extents, g.spacing, ValueKind::Hounsfield, voxels)
}

/// Binary mask of voxels above `threshold_hu`. Normalized volumes are
/// compared against the threshold mapped through the default window.
pub fn outline_mask(v: &Volume, threshold_hu: f64) -> Result<Volume> {
    let threshold = match v.kind {
        ValueKind::Hounsfield => threshold_hu,
        ValueKind::Normalized => HuWindow::default().to_unit(threshold_hu),
        other => bail!(Data, "outline mask needs Hounsfield or normalized values, got {:?}", other),
    };
    let voxels: Vec<f64> = v.voxels().iter().map(|&x| if x > threshold { 1.0 } else { 0.0 }).collect();
    Volume::new(v.extents(), v.spacing(), ValueKind::Mask, voxels)
}

/// Default outline threshold: everything denser than half-air.
pub const OUTLINE_THRESHOLD_HU: f64 = -500.0;
