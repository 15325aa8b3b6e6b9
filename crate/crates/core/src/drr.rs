//! Digitally reconstructed radiographs by parallel Beer–Lambert projection.
//!
//! Volume axes are (depth, height, width) = (cranio-caudal, antero-posterior,
//! left-right). A posterior-anterior view integrates along the height axis and
//! yields a depth × width image; a lateral view integrates along the width
//! axis and yields a depth × height image.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::preprocess::{ValueKind, Volume};

/// Linear attenuation of water in mm⁻¹.
pub const MU_WATER: f64 = 0.02;
/// Path-integral value mapped to +1 by [`log_normalize_radiograph`].
pub const DEFAULT_LOG_MAX: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    PosteriorAnterior,
    Lateral,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::PosteriorAnterior => "pa",
            View::Lateral => "lat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pa" => Some(View::PosteriorAnterior),
            "lat" | "lateral" => Some(View::Lateral),
            _ => None,
        }
    }
}

/// Non-negative linear attenuation coefficients (mm⁻¹).
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationVolume(Volume);

impl AttenuationVolume {
    /// Wraps coefficients, clamping negative values to zero.
    pub fn from_coefficients(extents: [usize; 3], spacing: [f64; 3], mut mu: Vec<f64>) -> Result<Self> {
        for m in mu.iter_mut() {
            if m.is_nan() {
                bail!(Data, "attenuation coefficient is NaN");
            }
            *m = m.max(0.0);
        }
        Ok(Self(Volume::new(extents, spacing, ValueKind::Attenuation, mu)?))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }
}

/// Projected image. Raw pixels lie in `(0, i0]`; after
/// [`log_normalize_radiograph`] they lie in [−1, 1] and `log_max` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Radiograph {
    pub extents: [usize; 2],
    pub pixels: Vec<f64>,
    pub view: View,
    pub i0: f64,
    pub log_max: Option<f64>,
}

impl Radiograph {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.extents[1] + col]
    }
}

/// `u = μ_water · (1 + HU/1000)`, clamped at 0.
pub fn hu_to_attenuation(v: &Volume, mu_water: f64) -> Result<AttenuationVolume> {
    if !(mu_water > 0.0) {
        bail!(Usage, "water attenuation must be positive, got {mu_water}");
    }
    if v.kind != ValueKind::Hounsfield {
        bail!(Data, "attenuation conversion expects Hounsfield units, got {:?}", v.kind);
    }
    let mu = v.voxels().iter().map(|&h| mu_water * (1.0 + h / 1000.0)).collect();
    AttenuationVolume::from_coefficients(v.extents(), v.spacing(), mu)
}

/// `I0 · exp(−Σ uᵢ dᵢ)` along axis-aligned parallel rays, summed in index
/// order along each ray.
pub fn project(a: &AttenuationVolume, view: View, i0: f64) -> Result<Radiograph> {
    if !(i0 > 0.0) {
        bail!(Usage, "source intensity must be positive, got {i0}");
    }
    let v = a.volume();
    let [d, h, w] = v.extents();
    let spacing = v.spacing();
    let (extents, pixels) = match view {
        View::PosteriorAnterior => {
            let step = spacing[1];
            let mut px = Vec::with_capacity(d * w);
            for z in 0..d {
                for x in 0..w {
                    let mut sum = 0.0;
                    for y in 0..h {
                        sum += v.get(z, y, x) * step;
                    }
                    px.push(i0 * libm::exp(-sum));
                }
            }
            ([d, w], px)
        }
        View::Lateral => {
            let step = spacing[2];
            let mut px = Vec::with_capacity(d * h);
            for z in 0..d {
                for y in 0..h {
                    let mut sum = 0.0;
                    for x in 0..w {
                        sum += v.get(z, y, x) * step;
                    }
                    px.push(i0 * libm::exp(-sum));
                }
            }
            ([d, h], px)
        }
    };
    Ok(Radiograph { extents, pixels, view, i0, log_max: None })
}

/// Maps `−ln(p/I0)` from `[0, log_max]` onto [−1, 1] with clamping.
pub fn log_normalize_radiograph(r: &Radiograph, log_max: f64) -> Result<Radiograph> {
    if r.log_max.is_some() {
        bail!(Data, "radiograph is already log-normalized");
    }
    if !(log_max > 0.0) {
        bail!(Usage, "log range must be positive, got {log_max}");
    }
    let mut pixels = Vec::with_capacity(r.pixels.len());
    for (i, &p) in r.pixels.iter().enumerate() {
        if !(p > 0.0) {
            bail!(Data, "pixel {i} has non-positive intensity {p}");
        }
        let path = -libm::log(p / r.i0);
        pixels.push((2.0 * path / log_max - 1.0).clamp(-1.0, 1.0));
    }
    Ok(Radiograph { pixels, log_max: Some(log_max), ..r.clone() })
}

/// Inverse of [`log_normalize_radiograph`] on the unclamped range.
pub fn log_denormalize_radiograph(r: &Radiograph) -> Result<Radiograph> {
    let Some(l) = r.log_max else { bail!(Data, "radiograph is not log-normalized") };
    let pixels = r.pixels.iter().map(|&u| r.i0 * libm::exp(-(u + 1.0) * 0.5 * l)).collect();
    Ok(Radiograph { pixels, log_max: None, ..r.clone() })
}

/// Both normalized views of a Hounsfield volume.
pub fn radiograph_pair(hu: &Volume, log_max: f64) -> Result<(Radiograph, Radiograph)> {
    let mu = hu_to_attenuation(hu, MU_WATER)?;
    let pa = log_normalize_radiograph(&project(&mu, View::PosteriorAnterior, 1.0)?, log_max)?;
    let lat = log_normalize_radiograph(&project(&mu, View::Lateral, 1.0)?, log_max)?;
    Ok((pa, lat))
}
