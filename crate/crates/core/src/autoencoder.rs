//! Vector-quantized convolutional autoencoders for radiographs (rank 2) and
//! CT volumes (rank 3).
//!
//! Encoder: `conv k3` → SiLU, then per stage `conv k4 s2` → group norm → SiLU,
//! then a `k1` projection to the latent dimension. The decoder mirrors it with
//! transposed convolutions and ends in `conv k3` → tanh.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::numerics::{Adam, ConvSpec, Graph, ParamStore, Real, Tensor, Var};
use crate::vq::{self, Codebook, Modality, TokenGrid, VqLoss};

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    /// Spatial rank, 2 or 3.
    pub rank: usize,
    /// Input extents, `[h, w]` or `[d, h, w]`.
    pub extents: Vec<usize>,
    /// Channels after the input convolution.
    pub base_width: usize,
    /// Output channels of each downsampling stage.
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    /// Weight of the per-slice L1 reconstruction term.
    pub l1_weight: f64,
}

impl AutoencoderConfig {
    /// 32×32 radiographs to a 4×4 latent grid.
    pub fn desk_2d() -> Self {
        Self {
            rank: 2,
            extents: vec![32, 32],
            base_width: 16,
            widths: vec![32, 48, 64],
            latent_dim: 16,
            codebook_size: 256,
            beta: 0.25,
            l1_weight: 1.0,
        }
    }

    /// 32³ volumes to a 4³ latent grid.
    pub fn desk_3d() -> Self {
        Self {
            rank: 3,
            extents: vec![32, 32, 32],
            base_width: 8,
            widths: vec![16, 32, 48],
            latent_dim: 16,
            codebook_size: 256,
            beta: 0.25,
            l1_weight: 1.0,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn modality(&self) -> Modality {
        if self.rank == 2 {
            Modality::Thrx
        } else {
            Modality::Ct
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            bail!(Usage, "autoencoder rank must be 2 or 3, got {}", self.rank);
        }
        if self.extents.len() != self.rank {
            bail!(Usage, "{} extents given for rank {}", self.extents.len(), self.rank);
        }
        let f = 1usize << self.stages();
        if self.stages() == 0 || self.extents.iter().any(|&e| e == 0 || e % f != 0) {
            bail!(Usage, "extents {:?} not divisible by 2^{}", self.extents, self.stages());
        }
        if self.base_width == 0 || self.widths.contains(&0) || self.latent_dim == 0 {
            bail!(Usage, "channel widths must be positive");
        }
        if self.codebook_size < 2 {
            bail!(Usage, "codebook needs at least 2 entries");
        }
        if !(self.beta >= 0.0) || !(self.l1_weight >= 0.0) {
            bail!(Usage, "loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn latent_extents(&self) -> Vec<usize> {
        self.extents.iter().map(|e| e >> self.stages()).collect()
    }

    /// Token grid extents `[h, w, d]`.
    pub fn grid_extents(&self) -> [usize; 3] {
        let l = self.latent_extents();
        if self.rank == 2 {
            [l[0], l[1], 1]
        } else {
            [l[1], l[2], l[0]]
        }
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.latent_extents().iter().product()
    }

    fn input_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch, 1];
        s.extend_from_slice(&self.extents);
        s
    }

    fn latent_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch, self.latent_dim];
        s.extend(self.latent_extents());
        s
    }
}

fn groups(channels: usize) -> usize {
    if channels % 4 == 0 {
        4
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvSlots {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NormSlots {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc_in: ConvSlots,
    enc_stages: Vec<(ConvSlots, NormSlots)>,
    enc_out: ConvSlots,
    dec_in: (ConvSlots, NormSlots),
    dec_stages: Vec<(ConvSlots, NormSlots)>,
    dec_out: ConvSlots,
}

/// Scalar summaries of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Graph nodes of a full encode–quantize–decode pass.
pub struct AeForward<T> {
    pub graph: Graph<T>,
    pub params: Vec<Var>,
    pub codebook: Var,
    pub reconstruction: Var,
    pub loss: VqLoss,
    pub indices: Vec<usize>,
    /// Encoder output rows `[P×D]`.
    pub latents: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<T> {
    config: AutoencoderConfig,
    pub params: ParamStore<T>,
    pub codebook: Codebook<T>,
    layout: Layout,
}

fn kernel_shape(out: usize, inp: usize, k: usize, rank: usize) -> Vec<usize> {
    let mut s = vec![out, inp];
    s.extend(core::iter::repeat_n(k, rank));
    s
}

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

impl<T: Real> Autoencoder<T> {
    /// Freshly initialized model; weights are `uniform(±1/√fan_in)`, biases 0,
    /// norm gains 1.
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = config.rank;
        let mut store = ParamStore::new();
        let conv = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize, k: usize, transpose: bool| {
            let shape = if transpose { kernel_shape(inp, out, k, rank) } else { kernel_shape(out, inp, k, rank) };
            let fan_in = inp * k.pow(rank as u32);
            let weight = store.add(format!("{name}.weight"), uniform(rng, &shape, 1.0 / libm::sqrt(fan_in as f64)));
            let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out]));
            ConvSlots { weight, bias }
        };
        let norm = |store: &mut ParamStore<T>, name: &str, c: usize| NormSlots {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[c], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c])),
        };
        let c0 = config.base_width;
        let w = &config.widths;
        let last = *w.last().expect("validated");
        let enc_in = conv(&mut store, &mut rng, "encoder.in", c0, 1, 3, false);
        let mut enc_stages = Vec::new();
        let mut prev = c0;
        for (i, &c) in w.iter().enumerate() {
            let cs = conv(&mut store, &mut rng, &format!("encoder.down{i}"), c, prev, 4, false);
            enc_stages.push((cs, norm(&mut store, &format!("encoder.norm{i}"), c)));
            prev = c;
        }
        let enc_out = conv(&mut store, &mut rng, "encoder.out", config.latent_dim, last, 1, false);
        let dec_in = (
            conv(&mut store, &mut rng, "decoder.in", last, config.latent_dim, 3, false),
            norm(&mut store, "decoder.norm_in", last),
        );
        let mut dec_stages = Vec::new();
        for i in (0..w.len()).rev() {
            let out = if i == 0 { c0 } else { w[i - 1] };
            let cs = conv(&mut store, &mut rng, &format!("decoder.up{i}"), out, w[i], 4, true);
            dec_stages.push((cs, norm(&mut store, &format!("decoder.norm{i}"), out)));
        }
        let dec_out = conv(&mut store, &mut rng, "decoder.out", 1, c0, 3, false);
        let codebook = Codebook::new(config.codebook_size, config.latent_dim, &mut rng)?;
        let layout = Layout { enc_in, enc_stages, enc_out, dec_in, dec_stages, dec_out };
        Ok(Self { config, params: store, codebook, layout })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    fn check_shape(&self, shape: &[usize], expected: &[usize], what: &str) -> Result<()> {
        if shape.len() != expected.len() || shape[1..] != expected[1..] || shape[0] == 0 {
            bail!(Dimension, "{what} shape {:?} does not match {:?}", shape, &expected[1..]);
        }
        Ok(())
    }

    fn conv_layer(&self, g: &mut Graph<T>, p: &[Var], x: Var, c: ConvSlots, k: usize, stride: usize, transpose: bool) -> Result<Var> {
        let pad = if k == 1 { 0 } else { 1 };
        let spec = ConvSpec::new(self.config.rank, stride, pad);
        let y = if transpose { g.conv_transpose(x, p[c.weight], spec)? } else { g.conv(x, p[c.weight], spec)? };
        g.add_channel_bias(y, p[c.bias])
    }

    fn norm_act(&self, g: &mut Graph<T>, p: &[Var], x: Var, n: NormSlots) -> Result<Var> {
        let c = g.shape(x)[1];
        let y = g.group_norm(x, p[n.gain], p[n.bias], groups(c))?;
        Ok(g.silu(y))
    }

    /// Encoder forward on `x[B×1×…]`; returns `z[B×D×latent…]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        self.check_shape(g.shape(x), &self.config.input_shape(1), "encoder input")?;
        let l = &self.layout;
        let h = self.conv_layer(g, p, x, l.enc_in, 3, 1, false)?;
        let mut h = g.silu(h);
        for &(c, n) in &l.enc_stages {
            h = self.conv_layer(g, p, h, c, 4, 2, false)?;
            h = self.norm_act(g, p, h, n)?;
        }
        self.conv_layer(g, p, h, l.enc_out, 1, 1, false)
    }

    /// Decoder forward on `e[B×D×latent…]`; returns `x̂[B×1×…]` in (−1, 1).
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &[Var], e: Var) -> Result<Var> {
        self.check_shape(g.shape(e), &self.config.latent_shape(1), "decoder input")?;
        let l = &self.layout;
        let h = self.conv_layer(g, p, e, l.dec_in.0, 3, 1, false)?;
        let mut h = self.norm_act(g, p, h, l.dec_in.1)?;
        for &(c, n) in &l.dec_stages {
            h = self.conv_layer(g, p, h, c, 4, 2, true)?;
            h = self.norm_act(g, p, h, n)?;
        }
        let y = self.conv_layer(g, p, h, l.dec_out, 3, 1, false)?;
        Ok(g.tanh(y))
    }

    /// Continuous latents of `x[B×1×…]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &p, xv)?;
        Ok(g.value(z).clone())
    }

    /// Reconstruction from quantized latents `e[B×D×latent…]`.
    pub fn decode(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let ev = g.constant(e.clone());
        let y = self.decode_graph(&mut g, &p, ev)?;
        Ok(g.value(y).clone())
    }

    /// Nearest-entry latents `[B×D×latent…]` and indices of `z`.
    pub fn quantize(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let cb = g.constant(self.codebook.entries.value.clone());
        let q = vq::quantize(&mut g, zv, cb, &self.codebook)?;
        Ok((g.value(q.quantized).clone(), q.indices))
    }

    /// One token grid per batch element.
    pub fn tokenize(&self, x: &Tensor<T>) -> Result<Vec<TokenGrid>> {
        let (_, indices) = self.quantize(&self.encode(x)?)?;
        let per = self.config.tokens_per_sample();
        indices
            .chunks(per)
            .map(|c| TokenGrid::new(self.config.grid_extents(), c.to_vec(), self.config.modality(), self.config.codebook_size))
            .collect()
    }

    /// Channels-first latent `[1×D×latent…]` holding the entries of `grid`.
    pub fn embed_tokens(&self, grid: &TokenGrid) -> Result<Tensor<T>> {
        if grid.extents() != self.config.grid_extents() || grid.modality() != self.config.modality() {
            bail!(Data, "{:?} {:?} grid does not fit this autoencoder", grid.modality(), grid.extents());
        }
        if grid.codebook_size() != self.codebook.size() {
            bail!(Data, "grid indexes a codebook of {}, model has {}", grid.codebook_size(), self.codebook.size());
        }
        let d = self.codebook.dim();
        let p = grid.len();
        let mut data = vec![T::zero(); p * d];
        for (i, &k) in grid.indices().iter().enumerate() {
            for (c, &v) in self.codebook.entry(k).iter().enumerate() {
                data[c * p + i] = v;
            }
        }
        Tensor::new(&self.config.latent_shape(1), data)
    }

    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<Tensor<T>> {
        self.decode(&self.embed_tokens(grid)?)
    }

    /// Encode → quantize → decode with the full loss, parameters tracked.
    pub fn forward(&self, x: &Tensor<T>) -> Result<AeForward<T>> {
        let mut g = Graph::new();
        let params = self.params.bind(&mut g, true);
        let codebook = g.param(&self.codebook.entries);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &params, xv)?;
        let q = vq::quantize(&mut g, z, codebook, &self.codebook)?;
        let reconstruction = self.decode_graph(&mut g, &params, q.quantized)?;
        let recon = reconstruction_loss(&mut g, xv, reconstruction, self.config.rank, self.config.l1_weight)?;
        let loss = vq::vq_loss_terms(&mut g, recon, q.z, q.e, self.config.beta)?;
        Ok(AeForward { graph: g, params, codebook, reconstruction, loss, indices: q.indices, latents: q.z })
    }

    /// One optimizer update on batch `x`. Codebook usage is recorded.
    pub fn train_step(&mut self, x: &Tensor<T>, opt: &mut Adam<T>, lr: f64) -> Result<(StepStats, AeForward<T>)> {
        let f = self.forward(x)?;
        let scalar = |v: Var| f.graph.value(v).data()[0].to_f64();
        let stats = StepStats {
            total: scalar(f.loss.total),
            reconstruction: scalar(f.loss.reconstruction),
            codebook: scalar(f.loss.codebook),
            commitment: scalar(f.loss.commitment),
        };
        if !stats.total.is_finite() {
            bail!(Numerical, "autoencoder loss is {}", stats.total);
        }
        let grads = f.graph.backward(f.loss.total)?;
        self.params.zero_grad();
        self.codebook.entries.zero_grad();
        self.params.accumulate(&grads, &f.params);
        if let Some(gc) = grads.get(f.codebook) {
            self.codebook.entries.accumulate(gc);
        }
        self.codebook.record_usage(&f.indices);
        let mut refs = self.params.params_mut();
        refs.push(&mut self.codebook.entries);
        opt.step(&mut refs, lr)?;
        Ok((stats, f))
    }

    /// Loss of batch `x` without updating anything.
    pub fn evaluate(&self, x: &Tensor<T>) -> Result<StepStats> {
        let f = self.forward(x)?;
        let scalar = |v: Var| f.graph.value(v).data()[0].to_f64();
        Ok(StepStats {
            total: scalar(f.loss.total),
            reconstruction: scalar(f.loss.reconstruction),
            codebook: scalar(f.loss.codebook),
            commitment: scalar(f.loss.commitment),
        })
    }

    /// Re-seeds unused codebook entries from encoder outputs `latents[P×D]`.
    pub fn reset_dead_codes<R: Rng>(&mut self, latents: &[T], min_usage: u64, rng: &mut R) -> Result<usize> {
        vq::reset_dead_codes(&mut self.codebook, latents, min_usage, rng)
    }
}

/// `mse(x, x̂) + λ·L1`, where for rank 3 the L1 term is the mean over depth
/// slices of each slice's mean absolute error.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var, rank: usize, l1_weight: f64) -> Result<Var> {
    let mse = g.mse(x, x_hat)?;
    if l1_weight == 0.0 {
        return Ok(mse);
    }
    let diff = g.sub(x_hat, x)?;
    let abs = g.abs(diff);
    let l1 = if rank == 3 {
        let s = g.shape(x);
        let slice = s[s.len() - 2] * s[s.len() - 1];
        g.slice_mean(abs, slice)?
    } else {
        g.mean(abs)
    };
    let l1 = g.scale(l1, l1_weight);
    g.add(mse, l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;

    fn tiny(rank: usize) -> AutoencoderConfig {
        AutoencoderConfig {
            rank,
            extents: vec![8; rank],
            base_width: 4,
            widths: vec![4, 8],
            latent_dim: 3,
            codebook_size: 16,
            beta: 0.25,
            l1_weight: 1.0,
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| libm::sin(i as f64 * 0.37) * 0.8).collect()).unwrap()
    }

    #[test]
    fn desk_extents() {
        let c2 = AutoencoderConfig::desk_2d();
        assert_eq!(c2.latent_extents(), [4, 4]);
        assert_eq!(c2.grid_extents(), [4, 4, 1]);
        let c3 = AutoencoderConfig::desk_3d();
        assert_eq!(c3.latent_extents(), [4, 4, 4]);
        assert_eq!(c3.tokens_per_sample(), 64);
        let ae = Autoencoder::<f32>::new(c2, 0).unwrap();
        let z = ae.encode(&Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        assert_eq!(z.shape(), &[2, 16, 4, 4]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny(2);
        c.extents = vec![6, 8];
        assert!(c.validate().is_err());
        c = tiny(2);
        c.rank = 4;
        assert!(c.validate().is_err());
        let ae = Autoencoder::<f64>::new(tiny(3), 0).unwrap();
        assert!(matches!(ae.encode(&Tensor::zeros(&[1, 1, 8, 8, 4])), Err(crate::Error::Dimension(_))));
        assert!(matches!(ae.decode(&Tensor::zeros(&[1, 3, 2, 2])), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn round_trip_shape_and_bounds() {
        for rank in [2, 3] {
            let ae = Autoencoder::<f64>::new(tiny(rank), 1).unwrap();
            let mut shape = vec![2, 1];
            shape.extend(vec![8; rank]);
            let x = ramp(&shape);
            let z = ae.encode(&x).unwrap();
            assert_eq!(ae.encode(&x).unwrap(), z);
            let (q, idx) = ae.quantize(&z).unwrap();
            assert_eq!(idx.len(), 2 * 2usize.pow(rank as u32));
            let y = ae.decode(&q).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn tokens_decode_like_quantized_latents() {
        let ae = Autoencoder::<f64>::new(tiny(3), 2).unwrap();
        let x = ramp(&[1, 1, 8, 8, 8]);
        let grids = ae.tokenize(&x).unwrap();
        assert_eq!(grids.len(), 1);
        assert_eq!(grids[0].extents(), [2, 2, 2]);
        let (q, _) = ae.quantize(&ae.encode(&x).unwrap()).unwrap();
        assert_eq!(ae.embed_tokens(&grids[0]).unwrap(), q);
    }

    #[test]
    fn reconstruction_loss_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ramp(&[1, 1, 2, 3, 4]));
        let shifted = Tensor::new(&[1, 1, 2, 3, 4], g.value(x).data().iter().map(|v| v + 0.1).collect()).unwrap();
        let y = g.constant(shifted);
        let l = reconstruction_loss(&mut g, x, y, 3, 1.0).unwrap();
        assert!((g.value(l).data()[0] - 0.11).abs() < 1e-12);
        let l = reconstruction_loss(&mut g, x, x, 3, 1.0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn training_reduces_loss() {
        let mut ae = Autoencoder::<f64>::new(tiny(2), 3).unwrap();
        let x = ramp(&[2, 1, 8, 8]);
        let mut opt = Adam::new(AdamConfig::adam());
        let first = ae.train_step(&x, &mut opt, 3e-3).unwrap().0.total;
        for _ in 0..60 {
            ae.train_step(&x, &mut opt, 3e-3).unwrap();
        }
        assert!(ae.evaluate(&x).unwrap().total < 0.5 * first);
        assert!(ae.codebook.usage().iter().sum::<u64>() > 0);
    }
}
