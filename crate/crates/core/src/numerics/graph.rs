use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Param, Real, Tensor};
use crate::error::{bail, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial rank, stride and padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub rank: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(rank: usize, stride: usize, padding: usize) -> Self {
        Self { rank, stride, padding }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddChannelBias { x: Var, bias: Var, channels: usize, inner: usize },
    MatMul(Var, Var),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SliceMean(Var),
    Reshape(Var),
    Softmax { x: Var, len: usize, inner: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: Var, gain: Var, bias: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv { x: Var, w: Var, geom: ConvGeom, batch: usize, out_channels: usize },
    ConvTranspose { x: Var, w: Var, geom: ConvGeom, batch: usize, in_channels: usize },
    Embedding { table: Var, ids: Vec<usize> },
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    StraightThrough(Var),
    ChannelsLast { x: Var, batch: usize, channels: usize, spatial: usize },
    ChannelsFirst { x: Var, batch: usize, channels: usize, spatial: usize },
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Operation record for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); len],
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        bail!(Dimension, "{what}: shapes {:?} and {:?} differ", a, b);
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(value, op, tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, p: &Param<T>) -> Var {
        self.input(p.value.clone())
    }

    /// Stop-gradient: same value, no gradient flows back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(ta.shape(), tb.shape(), what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = &self.nodes[x.0].value;
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.derived(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.unary(x, |v| v * c);
        self.derived(t, Op::Scale(x, c), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.unary(x, kernels::silu);
        self.derived(t, Op::Silu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.tanh());
        self.derived(t, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v * v);
        self.derived(t, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.abs());
        self.derived(t, Op::Abs(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().fold(T::zero(), |a, &b| a + b);
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::of(t.len() as f64);
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over contiguous slices of `slice` elements, then mean of those.
    pub fn slice_mean(&mut self, x: Var, slice: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if slice == 0 || t.len() % slice != 0 {
            bail!(Dimension, "slice length {slice} does not divide {} elements", t.len());
        }
        let count = t.len() / slice;
        let mut total = T::zero();
        for chunk in t.data().chunks_exact(slice) {
            total = total + chunk.iter().fold(T::zero(), |a, &b| a + b) / T::of(slice as f64);
        }
        let m = total / T::of(count as f64);
        Ok(self.derived(Tensor::scalar(m), Op::SliceMean(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.derived(t, Op::Reshape(x), &[x]))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean(s))
    }

    /// `a[M×K] · b[K×P]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul of {:?} by {:?}", sa, sb);
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        kernels::gemm_nn(m, k, p, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(&[m, p], out)?;
        Ok(self.derived(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds `bias[C]` to every row of `x[…×C]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            bail!(Dimension, "row bias {:?} for rows of width {c}", self.shape(bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        Ok(self.derived(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Adds `bias[C]` along axis 1 of `x[B×C×…]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || self.shape(bias) != [s[1]] {
            bail!(Dimension, "channel bias {:?} for input {:?}", self.shape(bias), s);
        }
        let channels = s[1];
        let inner: usize = s[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, chunk) in t.data_mut().chunks_exact_mut(inner).enumerate() {
            let bv = b[i % channels];
            for v in chunk {
                *v = *v + bv;
            }
        }
        Ok(self.derived(t, Op::AddChannelBias { x, bias, channels, inner }, &[x, bias]))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            bail!(Dimension, "softmax axis {axis} for shape {:?}", s);
        }
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut t = self.value(x).clone();
        let mut buf = vec![T::zero(); len];
        for block in t.data_mut().chunks_exact_mut(len * inner) {
            for j in 0..inner {
                for i in 0..len {
                    buf[i] = block[i * inner + j];
                }
                kernels::softmax_in_place(&mut buf);
                for i in 0..len {
                    block[i * inner + j] = buf[i];
                }
            }
        }
        Ok(self.derived(t, Op::Softmax { x, len, inner }, &[x]))
    }

    /// Mean next-token cross-entropy of `logits[T×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            bail!(Dimension, "cross-entropy logits {:?} with {} targets", s, targets.len());
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            bail!(Index, "target {bad} outside vocabulary of {v}");
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(T::zero(), |a, &x| a + (x - max).exp()).ln() + max;
            loss = loss + (lse - row[t]);
            kernels::softmax_in_place(row);
        }
        let loss = loss / T::of(targets.len() as f64);
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Normalizes the last axis (ε = 1e-5) and applies `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            bail!(Dimension, "layer norm over {c} with gain {:?} and bias {:?}", self.shape(gain), self.shape(bias));
        }
        let eps = T::of(1e-5);
        let (g, b) = (self.value(gain).data().to_vec(), self.value(bias).data().to_vec());
        let src = self.value(x);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(src.len() / c);
        for (row, out) in src.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)) {
            rstd.push(kernels::normalize_row(row, out, eps));
        }
        let data = xhat.chunks_exact(c).flat_map(|r| r.iter().zip(&g).zip(&b).map(|((&v, &gv), &bv)| v * gv + bv)).collect();
        let t = Tensor::new(src.shape(), data)?;
        Ok(self.derived(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Group normalization of `x[B×C×…]` with per-channel affine (ε = 1e-5).
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
            bail!(Dimension, "group norm with {groups} groups over {:?}", s);
        }
        let channels = s[1];
        if self.shape(gain) != [channels] || self.shape(bias) != [channels] {
            bail!(Dimension, "group norm affine shapes {:?}/{:?} for {channels} channels", self.shape(gain), self.shape(bias));
        }
        let inner: usize = s[2..].iter().product();
        let glen = channels / groups * inner;
        let eps = T::of(1e-5);
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(src.len() / glen);
        for (row, out) in src.chunks_exact(glen).zip(xhat.chunks_exact_mut(glen)) {
            rstd.push(kernels::normalize_row(row, out, eps));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut data = xhat.clone();
        for (i, chunk) in data.chunks_exact_mut(inner).enumerate() {
            let c = i % channels;
            for v in chunk {
                *v = *v * g[c] + b[c];
            }
        }
        let t = Tensor::new(&s, data)?;
        Ok(self.derived(t, Op::GroupNorm { x, gain, bias, groups, xhat, rstd }, &[x, gain, bias]))
    }

    fn conv_layout(&self, x: Var, w: Var, spec: ConvSpec, transpose: bool) -> Result<(usize, usize, usize, [usize; 3], [usize; 3])> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let r = spec.rank;
        if !(r == 2 || r == 3) {
            bail!(Usage, "convolution rank must be 2 or 3, got {r}");
        }
        if sx.len() != r + 2 || sw.len() != r + 2 {
            bail!(Dimension, "rank-{r} convolution of input {:?} with kernel {:?}", sx, sw);
        }
        let (cin_w, cout_w) = if transpose { (sw[0], sw[1]) } else { (sw[1], sw[0]) };
        if sx[1] != cin_w {
            bail!(Dimension, "input {:?} has {} channels but kernel {:?} expects {}", sx, sx[1], sw, cin_w);
        }
        let lift = |s: &[usize]| if r == 3 { [s[0], s[1], s[2]] } else { [1, s[0], s[1]] };
        Ok((sx[0], cin_w, cout_w, lift(&sx[2..]), lift(&sw[2..])))
    }

    fn stride_pad(spec: ConvSpec) -> ([usize; 3], [usize; 3]) {
        if spec.rank == 3 {
            ([spec.stride; 3], [spec.padding; 3])
        } else {
            ([1, spec.stride, spec.stride], [0, spec.padding, spec.padding])
        }
    }

    fn restore_rank(spec: ConvSpec, batch: usize, channels: usize, sp: [usize; 3]) -> Vec<usize> {
        if spec.rank == 3 {
            vec![batch, channels, sp[0], sp[1], sp[2]]
        } else {
            vec![batch, channels, sp[1], sp[2]]
        }
    }

    /// Strided cross-correlation of `x[B×Cin×spatial]` with `w[Cout×Cin×k…]`.
    pub fn conv(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (batch, cin, cout, input, kernel) = self.conv_layout(x, w, spec, false)?;
        let (stride, pad) = Self::stride_pad(spec);
        let Some(geom) = ConvGeom::new(cin, input, kernel, stride, pad) else {
            bail!(Dimension, "kernel {:?} larger than padded input {:?} (pad {})", kernel, input, spec.padding);
        };
        let (iv, ov, kv) = (geom.input_volume(), geom.output_volume(), geom.kernel_volume());
        let mut out = vec![T::zero(); batch * cout * ov];
        let mut cols = vec![T::zero(); cin * kv * ov];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for b in 0..batch {
            geom.im2col(&xd[b * cin * iv..(b + 1) * cin * iv], &mut cols);
            kernels::gemm_nn(cout, cin * kv, ov, wd, &cols, &mut out[b * cout * ov..(b + 1) * cout * ov]);
        }
        let t = Tensor::new(&Self::restore_rank(spec, batch, cout, geom.output), out)?;
        Ok(self.derived(t, Op::Conv { x, w, geom, batch, out_channels: cout }, &[x, w]))
    }

    /// Transposed convolution (adjoint of [`Graph::conv`]) with
    /// `w[Cin×Cout×k…]`; output extent `(in−1)·stride − 2·pad + k`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (batch, cin, cout, input, kernel) = self.conv_layout(x, w, spec, true)?;
        let (stride, pad) = Self::stride_pad(spec);
        let mut big = [0usize; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * stride[a] + kernel[a];
            if full <= 2 * pad[a] {
                bail!(Dimension, "transposed convolution of {:?} collapses to nothing", input);
            }
            big[a] = full - 2 * pad[a];
        }
        let geom = match ConvGeom::new(cout, big, kernel, stride, pad) {
            Some(g) if g.output == input => g,
            _ => bail!(Dimension, "transposed convolution geometry {:?}/{:?} is not invertible", input, kernel),
        };
        let (iv, ov, kv) = (geom.input_volume(), geom.output_volume(), geom.kernel_volume());
        let mut out = vec![T::zero(); batch * cout * iv];
        let mut cols = vec![T::zero(); cout * kv * ov];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for b in 0..batch {
            cols.fill(T::zero());
            kernels::gemm_tn(cout * kv, cin, ov, wd, &xd[b * cin * ov..(b + 1) * cin * ov], &mut cols);
            geom.col2im(&cols, &mut out[b * cout * iv..(b + 1) * cout * iv]);
        }
        let t = Tensor::new(&Self::restore_rank(spec, batch, cout, big), out)?;
        Ok(self.derived(t, Op::ConvTranspose { x, w, geom, batch, in_channels: cin }, &[x, w]))
    }

    /// Gathers rows of `table[V×C]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            bail!(Dimension, "embedding table must be 2D, got {:?}", s);
        }
        let (v, c) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            bail!(Index, "embedding index {bad} outside table of {v} rows");
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[ids.len(), c], out)?;
        Ok(self.derived(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Multi-head causal self-attention over `qkv[(B·T)×3C]` laid out as
    /// query, key, value blocks; returns `[(B·T)×C]`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(qkv);
        if s.len() != 2 || s[1] % 3 != 0 || batch == 0 || s[0] % batch != 0 {
            bail!(Dimension, "attention input {:?} for batch {batch}", s);
        }
        let c = s[1] / 3;
        if heads == 0 || c % heads != 0 {
            bail!(Dimension, "embedding {c} not divisible by {heads} heads");
        }
        let seq = s[0] / batch;
        let hd = c / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); batch * seq * c];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for t in 0..seq {
                    let q = &src[(b * seq + t) * 3 * c + h * hd..][..hd];
                    let row = &mut p[t * seq..t * seq + t + 1];
                    for (s_, r) in row.iter_mut().enumerate() {
                        let k = &src[(b * seq + s_) * 3 * c + c + h * hd..][..hd];
                        *r = kernels::dot(q, k) * scale;
                    }
                    kernels::softmax_in_place(row);
                    let o = &mut out[(b * seq + t) * c + h * hd..][..hd];
                    for (s_, &w) in row.iter().enumerate() {
                        kernels::axpy(w, &src[(b * seq + s_) * 3 * c + 2 * c + h * hd..][..hd], o);
                    }
                }
            }
        }
        let t = Tensor::new(&[batch * seq, c], out)?;
        Ok(self.derived(t, Op::CausalAttention { qkv, batch, seq, heads, probs }, &[qkv]))
    }

    /// Forward value `replacement`, backward identity to `x`.
    pub fn straight_through(&mut self, x: Var, replacement: &Tensor<T>) -> Result<Var> {
        same_shape(self.shape(x), replacement.shape(), "straight-through")?;
        Ok(self.derived(replacement.clone(), Op::StraightThrough(x), &[x]))
    }

    /// `[B×C×spatial…] → [(B·S)×C]`
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 3 {
            bail!(Dimension, "channels_last needs [B×C×…], got {:?}", s);
        }
        let (batch, channels) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for c in 0..channels {
                for p in 0..spatial {
                    out[(b * spatial + p) * channels + c] = src[(b * channels + c) * spatial + p];
                }
            }
        }
        let t = Tensor::new(&[batch * spatial, channels], out)?;
        Ok(self.derived(t, Op::ChannelsLast { x, batch, channels, spatial }, &[x]))
    }

    /// Inverse of [`Graph::channels_last`]; `shape` is the full target shape.
    pub fn channels_first(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if shape.len() < 3 || s.len() != 2 || s[1] != shape[1] || s[0] * s[1] != shape.iter().product::<usize>() {
            bail!(Dimension, "channels_first of {:?} into {:?}", s, shape);
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for c in 0..channels {
                for p in 0..spatial {
                    out[(b * channels + c) * spatial + p] = src[(b * spatial + p) * channels + c];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::ChannelsFirst { x, batch, channels, spatial }, &[x]))
    }

    /// Inverted dropout; identity when `rate` is 0.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(t.shape(), data).expect("shape preserved");
        self.derived(t, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].tracked {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(crate::Error::Numerical(format!("non-finite gradient at node {i}, element {j}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        kernels::axpy(T::one(), g, d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    kernels::axpy(T::one(), g, d);
                }
                if let Some(d) = self.acc(grads, *b) {
                    kernels::axpy(-T::one(), g, d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d = *d + gv * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d = *d + gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.acc(grads, *x) {
                    kernels::axpy(*c, g, d);
                }
            }
            Op::AddRowBias(x, bias) => {
                if let Some(d) = self.acc(grads, *x) {
                    kernels::axpy(T::one(), g, d);
                }
                if let Some(d) = self.acc(grads, *bias) {
                    let c = d.len();
                    for row in g.chunks_exact(c) {
                        kernels::axpy(T::one(), row, d);
                    }
                }
            }
            Op::AddChannelBias { x, bias, channels, inner } => {
                if let Some(d) = self.acc(grads, *x) {
                    kernels::axpy(T::one(), g, d);
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for (k, chunk) in g.chunks_exact(*inner).enumerate() {
                        d[k % channels] = d[k % channels] + chunk.iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                if let Some(d) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    kernels::gemm_nt(m, p, k, g, val(*b), d);
                }
                if let Some(d) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    kernels::gemm_tn(k, m, p, val(*a), g, d);
                }
            }
            Op::Silu(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        *d = *d + gv * kernels::silu_grad(xv);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * (T::one() - yv * yv);
                    }
                }
            }
            Op::Square(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    let two = T::of(2.0);
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        *d = *d + two * gv * xv;
                    }
                }
            }
            Op::Abs(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        let s = if xv > T::zero() {
                            T::one()
                        } else if xv < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d = *d + gv * s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for d in d.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean(x) | Op::SliceMean(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    let s = g[0] / T::of(d.len() as f64);
                    for d in d.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    kernels::axpy(T::one(), g, d);
                }
            }
            Op::Softmax { x, len, inner } => {
                let (len, inner) = (*len, *inner);
                let y = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for (blk, (yb, gb)) in y.chunks_exact(len * inner).zip(g.chunks_exact(len * inner)).enumerate() {
                        for j in 0..inner {
                            let mut s = T::zero();
                            for k in 0..len {
                                s = s + yb[k * inner + j] * gb[k * inner + j];
                            }
                            for k in 0..len {
                                let idx = blk * len * inner + k * inner + j;
                                d[idx] = d[idx] + yb[k * inner + j] * (gb[k * inner + j] - s);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(d) = self.acc(grads, *logits) {
                    let v = probs.len() / targets.len();
                    let s = g[0] / T::of(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        for k in 0..v {
                            let onehot = if k == t { T::one() } else { T::zero() };
                            d[r * v + k] = d[r * v + k] + s * (probs[r * v + k] - onehot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = rstd.len();
                let c = xhat.len() / c;
                let gv = val(*gain).to_vec();
                if let Some(d) = self.acc(grads, *gain) {
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for k in 0..c {
                            d[k] = d[k] + gr[k] * xr[k];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for gr in g.chunks_exact(c) {
                        kernels::axpy(T::one(), gr, d);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let mut dxhat = vec![T::zero(); c];
                    for (r, (gr, xr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        for k in 0..c {
                            dxhat[k] = gr[k] * gv[k];
                        }
                        norm_backward(&dxhat, xr, rstd[r], &mut d[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::GroupNorm { x, gain, bias, groups, xhat, rstd } => {
                let s = self.shape(*x);
                let channels = s[1];
                let inner: usize = s[2..].iter().product();
                let glen = channels / groups * inner;
                if let Some(d) = self.acc(grads, *gain) {
                    for (k, (gc, xc)) in g.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
                        d[k % channels] = d[k % channels] + kernels::dot(gc, xc);
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for (k, gc) in g.chunks_exact(inner).enumerate() {
                        d[k % channels] = d[k % channels] + gc.iter().fold(T::zero(), |a, &b| a + b);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let gv = val(*gain);
                    let mut dxhat = vec![T::zero(); glen];
                    for (r, (gr, xr)) in g.chunks_exact(glen).zip(xhat.chunks_exact(glen)).enumerate() {
                        for (k, (dx, &gg)) in dxhat.iter_mut().zip(gr).enumerate() {
                            let c = (r * glen + k) / inner % channels;
                            *dx = gg * gv[c];
                        }
                        norm_backward(&dxhat, xr, rstd[r], &mut d[r * glen..(r + 1) * glen]);
                    }
                }
            }
            Op::Conv { x, w, geom, batch, out_channels } => {
                let (iv, ov, kv) = (geom.input_volume(), geom.output_volume(), geom.kernel_volume());
                let (cin, cout) = (geom.channels, *out_channels);
                let xd = val(*x);
                let wd = val(*w);
                let mut cols = vec![T::zero(); cin * kv * ov];
                let want_w = self.nodes[w.0].tracked;
                let want_x = self.nodes[x.0].tracked;
                let mut dw = vec![T::zero(); if want_w { wd.len() } else { 0 }];
                let mut dx = vec![T::zero(); if want_x { xd.len() } else { 0 }];
                for b in 0..*batch {
                    let gb = &g[b * cout * ov..(b + 1) * cout * ov];
                    if want_w {
                        geom.im2col(&xd[b * cin * iv..(b + 1) * cin * iv], &mut cols);
                        kernels::gemm_nt(cout, ov, cin * kv, gb, &cols, &mut dw);
                    }
                    if want_x {
                        cols.fill(T::zero());
                        kernels::gemm_tn(cin * kv, cout, ov, wd, gb, &mut cols);
                        geom.col2im(&cols, &mut dx[b * cin * iv..(b + 1) * cin * iv]);
                    }
                }
                if let Some(d) = self.acc(grads, *w) {
                    kernels::axpy(T::one(), &dw, d);
                }
                if let Some(d) = self.acc(grads, *x) {
                    kernels::axpy(T::one(), &dx, d);
                }
            }
            Op::ConvTranspose { x, w, geom, batch, in_channels } => {
                let (iv, ov, kv) = (geom.input_volume(), geom.output_volume(), geom.kernel_volume());
                let (cin, cout) = (*in_channels, geom.channels);
                let xd = val(*x);
                let wd = val(*w);
                let mut cols = vec![T::zero(); cout * kv * ov];
                let want_w = self.nodes[w.0].tracked;
                let want_x = self.nodes[x.0].tracked;
                let mut dw = vec![T::zero(); if want_w { wd.len() } else { 0 }];
                let mut dx = vec![T::zero(); if want_x { xd.len() } else { 0 }];
                for b in 0..*batch {
                    geom.im2col(&g[b * cout * iv..(b + 1) * cout * iv], &mut cols);
                    if want_x {
                        kernels::gemm_nn(cin, cout * kv, ov, wd, &cols, &mut dx[b * cin * ov..(b + 1) * cin * ov]);
                    }
                    if want_w {
                        kernels::gemm_nt(cin, ov, cout * kv, &xd[b * cin * ov..(b + 1) * cin * ov], &cols, &mut dw);
                    }
                }
                if let Some(d) = self.acc(grads, *w) {
                    kernels::axpy(T::one(), &dw, d);
                }
                if let Some(d) = self.acc(grads, *x) {
                    kernels::axpy(T::one(), &dx, d);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(d) = self.acc(grads, *table) {
                    let c = g.len() / ids.len();
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(T::one(), &g[r * c..(r + 1) * c], &mut d[id * c..(id + 1) * c]);
                    }
                }
            }
            Op::CausalAttention { qkv, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let src = val(*qkv);
                let c = src.len() / (batch * seq * 3);
                let hd = c / heads;
                let scale = T::one() / T::of(hd as f64).sqrt();
                if let Some(d) = self.acc(grads, *qkv) {
                    let mut dp = vec![T::zero(); seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                            for t in 0..seq {
                                let go = &g[(b * seq + t) * c + h * hd..][..hd];
                                let row = &p[t * seq..t * seq + t + 1];
                                let mut sum = T::zero();
                                for s_ in 0..=t {
                                    let v = &src[(b * seq + s_) * 3 * c + 2 * c + h * hd..][..hd];
                                    dp[s_] = kernels::dot(go, v);
                                    sum = sum + dp[s_] * row[s_];
                                    let dv = &mut d[(b * seq + s_) * 3 * c + 2 * c + h * hd..][..hd];
                                    kernels::axpy(row[s_], go, dv);
                                }
                                for s_ in 0..=t {
                                    let ds = row[s_] * (dp[s_] - sum) * scale;
                                    let qo = (b * seq + t) * 3 * c + h * hd;
                                    let ko = (b * seq + s_) * 3 * c + c + h * hd;
                                    for e in 0..hd {
                                        d[qo + e] = d[qo + e] + ds * src[ko + e];
                                        d[ko + e] = d[ko + e] + ds * src[qo + e];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelsLast { x, batch, channels, spatial } => {
                if let Some(d) = self.acc(grads, *x) {
                    for b in 0..*batch {
                        for c in 0..*channels {
                            for p in 0..*spatial {
                                let di = (b * channels + c) * spatial + p;
                                d[di] = d[di] + g[(b * spatial + p) * channels + c];
                            }
                        }
                    }
                }
            }
            Op::ChannelsFirst { x, batch, channels, spatial } => {
                if let Some(d) = self.acc(grads, *x) {
                    for b in 0..*batch {
                        for c in 0..*channels {
                            for p in 0..*spatial {
                                let di = (b * spatial + p) * channels + c;
                                d[di] = d[di] + g[(b * channels + c) * spatial + p];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, &gv), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d = *d + gv * m;
                    }
                }
            }
        }
    }
}

/// Accumulates the input gradient of a normalization given the gradient
/// with respect to its normalized output.
fn norm_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: T, out: &mut [T]) {
    let n = T::of(dxhat.len() as f64);
    let mean_d = dxhat.iter().fold(T::zero(), |a, &b| a + b) / n;
    let mean_dx = kernels::dot(dxhat, xhat) / n;
    for ((o, &dh), &xh) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o = *o + rstd * (dh - mean_d - xh * mean_dx);
    }
}
