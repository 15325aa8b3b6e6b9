//! Codebooks, nearest-neighbour quantization with straight-through gradients,
//! and the vector-quantization loss.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::numerics::{Graph, Param, Real, Tensor, Var};

/// `N` learnable `D`-dimensional vectors plus per-entry usage counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub entries: Param<T>,
    usage: Vec<u64>,
}

impl<T: Real> Codebook<T> {
    /// Entries drawn from `uniform(−1/N, 1/N)`.
    pub fn new<R: Rng>(n: usize, d: usize, rng: &mut R) -> Result<Self> {
        if n < 2 || d == 0 {
            bail!(Usage, "codebook needs N ≥ 2 and D ≥ 1, got N={n}, D={d}");
        }
        let r = 1.0 / n as f64;
        let data = (0..n * d).map(|_| T::of(rng.random_range(-r..r))).collect();
        Self::from_entries(Tensor::new(&[n, d], data)?)
    }

    pub fn from_entries(entries: Tensor<T>) -> Result<Self> {
        let s = entries.shape();
        if s.len() != 2 || s[0] < 2 {
            bail!(Usage, "codebook entries must be [N×D] with N ≥ 2, got {:?}", s);
        }
        if !entries.is_finite() {
            bail!(Numerical, "codebook contains non-finite entries");
        }
        let usage = vec![0; s[0]];
        Ok(Self { entries: Param::new(entries), usage })
    }

    pub fn size(&self) -> usize {
        self.entries.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.value.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.entries.value.data()[k * d..(k + 1) * d]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    pub fn clear_usage(&mut self) {
        self.usage.fill(0);
    }

    /// Fraction of entries selected at least once since the last reset.
    pub fn usage_fraction(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.size() as f64
    }

    /// Index of the closest entry to each `D`-long row of `rows`.
    pub fn nearest(&self, rows: &[T]) -> Result<Vec<usize>> {
        let d = self.dim();
        if rows.len() % d != 0 {
            bail!(Dimension, "{} values are not a whole number of {d}-dimensional rows", rows.len());
        }
        let entries = self.entries.value.data();
        Ok(rows.chunks(d).map(|z| nearest_index(entries, d, z)).collect())
    }
}

/// Argmin of squared Euclidean distance; ties go to the lowest index.
pub fn nearest_index<T: Real>(entries: &[T], d: usize, z: &[T]) -> usize {
    let mut best = 0;
    let mut best_dist = T::infinity();
    for (k, e) in entries.chunks(d).enumerate() {
        let dist = squared_distance(e, z);
        if dist < best_dist {
            best = k;
            best_dist = dist;
        }
    }
    best
}

pub fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Graph nodes produced by [`quantize`].
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Encoder output as `[P×D]` rows.
    pub z: Var,
    /// Selected codebook entries, `[P×D]`, differentiable w.r.t. the codebook.
    pub e: Var,
    /// Decoder input: entry values with identity gradient to the encoder,
    /// in the encoder's channels-first layout.
    pub quantized: Var,
    pub indices: Vec<usize>,
}

/// Snaps every position of the channels-first latent `z[B×D×…]` to its nearest
/// entry. `codebook` is the graph node holding `cb.entries`.
pub fn quantize<T: Real>(g: &mut Graph<T>, z: Var, codebook: Var, cb: &Codebook<T>) -> Result<Quantized> {
    let shape = g.shape(z).to_vec();
    if shape.len() < 3 || shape[1] != cb.dim() {
        bail!(Dimension, "latent {:?} does not carry {} channels", shape, cb.dim());
    }
    let rows = g.channels_last(z)?;
    let indices = cb.nearest(g.value(rows).data())?;
    let e = g.embedding(codebook, &indices)?;
    let values = g.value(e).clone();
    let st = g.straight_through(rows, &values)?;
    let quantized = g.channels_first(st, &shape)?;
    Ok(Quantized { z: rows, e, quantized, indices })
}

/// The three loss terms and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct VqLoss {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

/// `recon + mse(sg[z], e) + beta·mse(z, sg[e])`, given a precomputed
/// reconstruction term.
pub fn vq_loss_terms<T: Real>(g: &mut Graph<T>, reconstruction: Var, z: Var, e: Var, beta: f64) -> Result<VqLoss> {
    let zd = g.detach(z);
    let codebook = g.mse(zd, e)?;
    let ed = g.detach(e);
    let commit = g.mse(z, ed)?;
    let commitment = g.scale(commit, beta);
    let sum = g.add(reconstruction, codebook)?;
    let total = g.add(sum, commitment)?;
    Ok(VqLoss { reconstruction, codebook, commitment, total })
}

/// Vector-quantization loss with a squared-error reconstruction term.
pub fn vq_loss<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var, z: Var, e: Var, beta: f64) -> Result<VqLoss> {
    let recon = g.mse(x, x_hat)?;
    vq_loss_terms(g, recon, z, e, beta)
}

/// Re-seeds entries used fewer than `min_usage` times to randomly chosen rows
/// of `latents`, then clears all usage counters. Returns the reset count.
pub fn reset_dead_codes<T: Real, R: Rng>(cb: &mut Codebook<T>, latents: &[T], min_usage: u64, rng: &mut R) -> Result<usize> {
    let d = cb.dim();
    if latents.is_empty() || latents.len() % d != 0 {
        bail!(Usage, "dead-code reset needs a non-empty batch of {d}-dimensional latents");
    }
    let rows = latents.len() / d;
    let mut resets = 0;
    for k in 0..cb.size() {
        if cb.usage[k] < min_usage {
            let r = rng.random_range(0..rows);
            cb.entries.value.data_mut()[k * d..(k + 1) * d].copy_from_slice(&latents[r * d..(r + 1) * d]);
            resets += 1;
        }
    }
    cb.clear_usage();
    Ok(resets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Thrx,
    Ct,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Thrx => "thrx",
            Modality::Ct => "ct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "thrx" => Some(Modality::Thrx),
            "ct" => Some(Modality::Ct),
            _ => None,
        }
    }
}

/// Codebook indices over a latent grid of `h × w × d` positions, stored width
/// fastest, then height, then depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    extents: [usize; 3],
    indices: Vec<usize>,
    modality: Modality,
    codebook_size: usize,
}

impl TokenGrid {
    pub fn new(extents: [usize; 3], indices: Vec<usize>, modality: Modality, codebook_size: usize) -> Result<Self> {
        if extents.contains(&0) {
            bail!(Dimension, "token grid extents {:?} must be positive", extents);
        }
        if indices.len() != extents.iter().product::<usize>() {
            bail!(Dimension, "{} indices do not fill a {:?} grid", indices.len(), extents);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
            bail!(Index, "token {bad} outside codebook of {codebook_size}");
        }
        Ok(Self { extents, indices, modality, codebook_size })
    }

    /// `[h, w, d]`
    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn get(&self, y: usize, x: usize, z: usize) -> usize {
        let [h, w, _] = self.extents;
        self.indices[(z * h + y) * w + x]
    }
}
