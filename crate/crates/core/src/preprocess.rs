//! CT volume preparation: isotropic resampling, center crop/pad, resize,
//! intensity normalization and patient-level data splits.
//!
//! Voxel grids are stored width-fastest, then height, then depth. All
//! interpolation is trilinear with edge clamping, so outputs never leave the
//! value range of the input.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// Value semantics of a voxel grid. Discriminants match the on-disk tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ValueKind {
    Hounsfield = 0,
    Normalized = 1,
    Attenuation = 2,
    Mask = 3,
}

impl ValueKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Self::Hounsfield,
            1 => Self::Normalized,
            2 => Self::Attenuation,
            3 => Self::Mask,
            _ => return None,
        })
    }
}

/// Scalar voxel grid. `extents` and `spacing` are (depth, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    pub kind: ValueKind,
    voxels: Vec<f64>,
}

/// Air, used as the pad value.
pub const AIR_HU: f64 = -1000.0;

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], kind: ValueKind, voxels: Vec<f64>) -> Result<Self> {
        if extents.contains(&0) {
            bail!(Dimension, "volume extents {:?} must be positive", extents);
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            bail!(Usage, "voxel spacing {:?} must be positive", spacing);
        }
        let n = extents.iter().product::<usize>();
        if voxels.len() != n {
            bail!(Dimension, "extents {:?} need {} voxels, got {}", extents, n, voxels.len());
        }
        Ok(Self { extents, spacing, kind, voxels })
    }

    pub fn filled(extents: [usize; 3], spacing: [f64; 3], kind: ValueKind, value: f64) -> Result<Self> {
        let n = extents.iter().product();
        Self::new(extents, spacing, kind, vec![value; n])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Samples at continuous voxel coordinates with trilinear weights,
    /// clamping to the grid.
    fn sample(&self, c: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let max = (self.extents[a] - 1) as f64;
            let p = c[a].clamp(0.0, max);
            let f = libm::floor(p);
            lo[a] = f as usize;
            hi[a] = (lo[a] + 1).min(self.extents[a] - 1);
            t[a] = p - f;
        }
        let mut acc = 0.0;
        for (dz, wz) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
            if wz == 0.0 {
                continue;
            }
            for (dy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
                if wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wz * wy * wx * self.get(dz, dy, dx);
                }
            }
        }
        acc
    }

    /// Resamples onto a new grid whose voxel centers sit at
    /// `(j + ½)·scale[a] − ½` in source voxel coordinates.
    fn regrid(&self, extents: [usize; 3], scale: [f64; 3], spacing: [f64; 3]) -> Result<Volume> {
        let mut out = Vec::with_capacity(extents.iter().product());
        for z in 0..extents[0] {
            let cz = (z as f64 + 0.5) * scale[0] - 0.5;
            for y in 0..extents[1] {
                let cy = (y as f64 + 0.5) * scale[1] - 0.5;
                for x in 0..extents[2] {
                    let cx = (x as f64 + 0.5) * scale[2] - 0.5;
                    out.push(self.sample([cz, cy, cx]));
                }
            }
        }
        Volume::new(extents, spacing, self.kind, out)
    }
}

/// Resamples to isotropic `target_spacing` mm; new extent per axis is
/// `round(extent · spacing / target_spacing)`.
pub fn resample_isotropic(v: &Volume, target_spacing: f64) -> Result<Volume> {
    if !(target_spacing > 0.0) || !target_spacing.is_finite() {
        bail!(Usage, "target spacing must be positive, got {target_spacing}");
    }
    let mut extents = [0; 3];
    let mut scale = [0.0; 3];
    for a in 0..3 {
        extents[a] = (libm::round(v.extents[a] as f64 * v.spacing[a] / target_spacing) as usize).max(1);
        scale[a] = target_spacing / v.spacing[a];
    }
    v.regrid(extents, scale, [target_spacing; 3])
}

/// Centers the volume in `target` extents, padding with air or cropping.
/// An odd difference puts the extra voxel on the high-index side.
pub fn crop_or_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        bail!(Usage, "target extents {:?} must be positive", target);
    }
    let pad_value = match v.kind {
        ValueKind::Hounsfield => AIR_HU,
        ValueKind::Normalized => -1.0,
        ValueKind::Attenuation | ValueKind::Mask => 0.0,
    };
    // Offset of the source grid inside the target grid (negative when cropping).
    let offset: [isize; 3] =
        core::array::from_fn(|a| if target[a] >= v.extents[a] { ((target[a] - v.extents[a]) / 2) as isize } else { -(((v.extents[a] - target[a]) / 2) as isize) });
    let mut out = Volume::filled(target, v.spacing, v.kind, pad_value)?;
    for z in 0..target[0] {
        let sz = z as isize - offset[0];
        if sz < 0 || sz as usize >= v.extents[0] {
            continue;
        }
        for y in 0..target[1] {
            let sy = y as isize - offset[1];
            if sy < 0 || sy as usize >= v.extents[1] {
                continue;
            }
            for x in 0..target[2] {
                let sx = x as isize - offset[2];
                if sx < 0 || sx as usize >= v.extents[2] {
                    continue;
                }
                let i = out.index(z, y, x);
                out.voxels[i] = v.get(sz as usize, sy as usize, sx as usize);
            }
        }
    }
    Ok(out)
}

/// Trilinear rescale to `target` extents; spacing is scaled so the physical
/// field of view is unchanged.
pub fn resize(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        bail!(Usage, "target extents {:?} must be positive", target);
    }
    let scale: [f64; 3] = core::array::from_fn(|a| v.extents[a] as f64 / target[a] as f64);
    let spacing: [f64; 3] = core::array::from_fn(|a| v.spacing[a] * scale[a]);
    v.regrid(target, scale, spacing)
}

/// Intensity window mapped onto [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuWindow {
    pub min: f64,
    pub max: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self { min: -1000.0, max: 1000.0 }
    }
}

impl HuWindow {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) {
            bail!(Usage, "window minimum {min} must be below maximum {max}");
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn to_unit(&self, hu: f64) -> f64 {
        let c = hu.clamp(self.min, self.max);
        2.0 * (c - self.min) / (self.max - self.min) - 1.0
    }

    #[inline]
    pub fn to_hu(&self, unit: f64) -> f64 {
        (unit + 1.0) * 0.5 * (self.max - self.min) + self.min
    }
}

/// Clamps to the window and maps affinely onto [−1, 1].
pub fn normalize(v: &Volume, window: HuWindow) -> Result<Volume> {
    let window = HuWindow::new(window.min, window.max)?;
    let voxels = v.voxels.iter().map(|&h| window.to_unit(h)).collect();
    Volume::new(v.extents, v.spacing, ValueKind::Normalized, voxels)
}

/// Inverse of [`normalize`] on the clamped range.
pub fn denormalize(v: &Volume, window: HuWindow) -> Result<Volume> {
    let window = HuWindow::new(window.min, window.max)?;
    let voxels = v.voxels.iter().map(|&u| window.to_hu(u)).collect();
    Volume::new(v.extents, v.spacing, ValueKind::Hounsfield, voxels)
}

/// Settings of the full preparation chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub target_spacing: f64,
    pub crop_extents: [usize; 3],
    pub resize_extents: [usize; 3],
    pub window: HuWindow,
}

impl PreprocessConfig {
    /// 1 mm isotropic, 320³ field, resized to 120³.
    pub fn full_scale() -> Self {
        Self { target_spacing: 1.0, crop_extents: [320; 3], resize_extents: [120; 3], window: HuWindow::default() }
    }

    /// Same 320 mm field of view at 5 mm, resized to 32³.
    pub fn desk_scale() -> Self {
        Self { target_spacing: 5.0, crop_extents: [64; 3], resize_extents: [32; 3], window: HuWindow::default() }
    }
}

/// Output of [`prepare_volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Resized volume still in Hounsfield units (input to projection).
    pub hounsfield: Volume,
    /// The same grid mapped onto [−1, 1].
    pub normalized: Volume,
}

/// Resample → crop/pad → resize → normalize.
pub fn prepare_volume(v: &Volume, cfg: &PreprocessConfig) -> Result<Prepared> {
    if v.kind != ValueKind::Hounsfield {
        bail!(Data, "preprocessing expects Hounsfield units, got {:?}", v.kind);
    }
    let iso = resample_isotropic(v, cfg.target_spacing)?;
    let framed = crop_or_pad(&iso, cfg.crop_extents)?;
    let hounsfield = resize(&framed, cfg.resize_extents)?;
    let normalized = normalize(&hounsfield, cfg.window)?;
    Ok(Prepared { hounsfield, normalized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Patient → split labels, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub fractions: [f64; 3],
    pub seed: u64,
    pub labels: Vec<(String, Split)>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.labels.iter().find(|(p, _)| p == id).map(|&(_, s)| s)
    }

    pub fn members(&self, split: Split) -> Vec<&str> {
        self.labels.iter().filter(|(_, s)| *s == split).map(|(p, _)| p.as_str()).collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        [Split::Train, Split::Validation, Split::Test].map(|s| self.labels.iter().filter(|(_, l)| *l == s).count())
    }
}

/// Seeded shuffle, then contiguous partition: validation and test take
/// `floor(n·fraction)` patients each and the remainder goes to training.
pub fn split_patients(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ids.is_empty() {
        bail!(Usage, "no patient identifiers to split");
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || libm::fabs(fractions.iter().sum::<f64>() - 1.0) > 1e-9 {
        bail!(Usage, "split fractions {:?} must be in [0,1] and sum to 1", fractions);
    }
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            bail!(Usage, "duplicate patient identifier {id:?}");
        }
    }
    let n = ids.len();
    let count = |f: f64| (libm::floor(n as f64 * f + 1e-9) as usize).min(n);
    let n_val = count(fractions[1]);
    let n_test = count(fractions[2]).min(n - n_val);
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut label = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        label[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(SplitAssignment { fractions, seed, labels: ids.iter().cloned().zip(label).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn ramp(extents: [usize; 3], spacing: [f64; 3], f: impl Fn(f64, f64, f64) -> f64) -> Volume {
        let mut v = Vec::new();
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                for x in 0..extents[2] {
                    v.push(f(z as f64, y as f64, x as f64));
                }
            }
        }
        Volume::new(extents, spacing, ValueKind::Hounsfield, v).unwrap()
    }

    #[test]
    fn resample_at_same_spacing_is_identity() {
        let v = ramp([3, 4, 5], [2.0; 3], |z, y, x| z * 7.0 - y * 3.0 + x * x);
        let r = resample_isotropic(&v, 2.0).unwrap();
        assert_eq!(r.extents(), v.extents());
        for (a, b) in r.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_keeps_constant_volumes() {
        let v = Volume::filled([4, 6, 5], [1.5, 0.7, 3.0], ValueKind::Hounsfield, 100.0).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.extents(), [6, 4, 15]);
        assert!(r.voxels().iter().all(|&x| (x - 100.0).abs() < 1e-12));
        assert_eq!(r.spacing(), [1.0; 3]);
    }

    #[test]
    fn resample_halving_spacing_halves_ramp_slope() {
        let n = 10;
        let v = ramp([2, 3, n], [2.0; 3], |_, _, x| 4.0 * x);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.extents(), [4, 6, 2 * n]);
        for x in 0..2 * n {
            // closed-form: source coordinate j/2 − 1/4, clamped to the grid
            let c = (x as f64 / 2.0 - 0.25).clamp(0.0, (n - 1) as f64);
            assert!((r.get(1, 2, x) - 4.0 * c).abs() < 1e-6, "x={x}");
        }
        // slope per output voxel in the interior is 2 (half of 4)
        assert!((r.get(0, 0, 6) - r.get(0, 0, 5) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn pad_small_volume_centers_it() {
        let v = Volume::filled([2; 3], [1.0; 3], ValueKind::Hounsfield, 50.0).unwrap();
        let p = crop_or_pad(&v, [4; 3]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let inside = [z, y, x].iter().all(|&i| (1..=2).contains(&i));
                    assert_eq!(p.get(z, y, x), if inside { 50.0 } else { AIR_HU });
                }
            }
        }
    }

    #[test]
    fn crop_keeps_central_block() {
        let v = ramp([6; 3], [1.0; 3], |z, y, x| z * 100.0 + y * 10.0 + x);
        let c = crop_or_pad(&v, [4; 3]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(c.get(z, y, x), v.get(z + 1, y + 1, x + 1));
                }
            }
        }
    }

    #[test]
    fn odd_difference_goes_high() {
        let v = Volume::filled([1, 1, 1], [1.0; 3], ValueKind::Hounsfield, 7.0).unwrap();
        let p = crop_or_pad(&v, [1, 1, 4]).unwrap();
        assert_eq!(p.voxels(), &[AIR_HU, 7.0, AIR_HU, AIR_HU]);
        let v = ramp([1, 1, 5], [1.0; 3], |_, _, x| x);
        assert_eq!(crop_or_pad(&v, [1, 1, 2]).unwrap().voxels(), &[1.0, 2.0]);
    }

    #[test]
    fn crop_or_pad_identity() {
        let v = ramp([3, 4, 5], [1.0; 3], |z, y, x| z + y * x);
        assert_eq!(crop_or_pad(&v, [3, 4, 5]).unwrap(), v);
    }

    #[test]
    fn resize_identity_and_constant() {
        let v = ramp([4, 5, 6], [1.0; 3], |z, y, x| z * y - x);
        let r = resize(&v, [4, 5, 6]).unwrap();
        for (a, b) in r.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Volume::filled([5; 3], [1.0; 3], ValueKind::Hounsfield, -321.0).unwrap();
        assert!(resize(&c, [3, 7, 2]).unwrap().voxels().iter().all(|&x| (x + 321.0).abs() < 1e-12));
    }

    #[test]
    fn resize_downsamples_separable_ramp() {
        let v = ramp([8; 3], [1.0; 3], |z, y, x| 3.0 * z - 2.0 * y + 0.5 * x + 1.0);
        let r = resize(&v, [4; 3]).unwrap();
        assert_eq!(r.spacing(), [2.0; 3]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let c = |j: usize| 2.0 * j as f64 + 0.5;
                    let expected = 3.0 * c(z) - 2.0 * c(y) + 0.5 * c(x) + 1.0;
                    assert!((r.get(z, y, x) - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn normalize_endpoints_and_clamp() {
        let v = Volume::new([1, 1, 4], [1.0; 3], ValueKind::Hounsfield, vec![-1000.0, 1000.0, 0.0, 3000.0]).unwrap();
        let n = normalize(&v, HuWindow::default()).unwrap();
        assert_eq!(n.voxels(), &[-1.0, 1.0, 0.0, 1.0]);
        assert_eq!(n.kind, ValueKind::Normalized);
        assert!(HuWindow::new(5.0, 5.0).is_err());
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let ids: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let s = split_patients(&ids, [0.7, 0.2, 0.1], 42).unwrap();
        assert_eq!(s.sizes(), [7, 2, 1]);
        let all = split_patients(&ids, [1.0, 0.0, 0.0], 42).unwrap();
        assert_eq!(all.sizes(), [10, 0, 0]);
        assert_eq!(s, split_patients(&ids, [0.7, 0.2, 0.1], 42).unwrap());
    }

    #[test]
    fn split_rejects_duplicates_and_bad_fractions() {
        let ids: Vec<String> = ["a", "b", "a"].iter().map(|s| String::from(*s)).collect();
        assert!(matches!(split_patients(&ids, [0.7, 0.2, 0.1], 1), Err(crate::Error::Usage(_))));
        let ids: Vec<String> = ["a", "b"].iter().map(|s| String::from(*s)).collect();
        assert!(split_patients(&ids, [0.7, 0.2, 0.2], 1).is_err());
        assert!(split_patients(&[], [1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn rejects_non_positive_spacing() {
        assert!(Volume::filled([1; 3], [1.0, 0.0, 1.0], ValueKind::Hounsfield, 0.0).is_err());
        let v = Volume::filled([2; 3], [1.0; 3], ValueKind::Hounsfield, 0.0).unwrap();
        assert!(resample_isotropic(&v, 0.0).is_err());
        assert!(resample_isotropic(&v, -1.0).is_err());
    }
}
