use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::model::Translator;
use super::SequenceLayout;
use crate::error::{bail, Result};
use crate::numerics::{kernels, Real};

/// Token selection rule for autoregressive generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Highest logit, ties to the lowest token.
    Greedy,
    /// Sample from the `k` highest logits after dividing by `temperature`.
    TopK { temperature: f64, k: usize },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::TopK { temperature: 1.0, k: 100 }
    }
}

/// Per-step decoder holding the keys and values of every consumed token.
///
/// Uses the same kernels in the same order as the full forward pass, so its
/// logits are bit-identical to the corresponding rows of
/// [`Translator::logits`].
pub struct IncrementalDecoder<'a, T> {
    model: &'a Translator<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    position: usize,
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    let mut xhat = vec![T::zero(); x.len()];
    kernels::normalize_row(x, &mut xhat, T::of(1e-5));
    xhat.iter().zip(gain).zip(bias).map(|((&v, &g), &b)| v * g + b).collect()
}

impl<'a, T: Real> IncrementalDecoder<'a, T> {
    pub fn new(model: &'a Translator<T>) -> Self {
        let b = model.config().blocks;
        Self { model, keys: vec![Vec::new(); b], values: vec![Vec::new(); b], position: 0 }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    fn param(&self, slot: usize) -> &[T] {
        self.model.params.get(slot).value.data()
    }

    fn linear(&self, x: &[T], (w, b): (usize, usize)) -> Vec<T> {
        let bias = self.param(b);
        let mut out = vec![T::zero(); bias.len()];
        kernels::gemm_nn(1, x.len(), bias.len(), x, self.param(w), &mut out);
        for (o, &bv) in out.iter_mut().zip(bias) {
            *o = *o + bv;
        }
        out
    }

    /// Consumes `token` at the next position and returns the logits that
    /// predict the token after it.
    pub fn step(&mut self, token: usize) -> Result<Vec<T>> {
        let cfg = self.model.config();
        let (c, vocab) = (cfg.embed, cfg.vocab_size());
        if self.position >= cfg.context {
            bail!(Usage, "context of {} tokens exhausted", cfg.context);
        }
        if token >= vocab {
            bail!(Index, "token {token} outside vocabulary of {vocab}");
        }
        let sl = &self.model.slots;
        let t = self.position;
        let tok = &self.param(sl.tokens)[token * c..(token + 1) * c];
        let pos = &self.param(sl.positions)[t * c..(t + 1) * c];
        let mut h: Vec<T> = tok.iter().zip(pos).map(|(&a, &b)| a + b).collect();
        let heads = cfg.heads;
        let hd = c / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        for (bi, b) in sl.blocks.iter().enumerate() {
            let a = layer_norm(&h, self.param(b.ln1.0), self.param(b.ln1.1));
            let qkv = self.linear(&a, b.qkv);
            self.keys[bi].extend_from_slice(&qkv[c..2 * c]);
            self.values[bi].extend_from_slice(&qkv[2 * c..]);
            let (keys, values) = (&self.keys[bi], &self.values[bi]);
            let mut att = vec![T::zero(); c];
            let mut row = vec![T::zero(); t + 1];
            for hh in 0..heads {
                let q = &qkv[hh * hd..(hh + 1) * hd];
                for (s, r) in row.iter_mut().enumerate() {
                    *r = kernels::dot(q, &keys[s * c + hh * hd..][..hd]) * scale;
                }
                kernels::softmax_in_place(&mut row);
                let o = &mut att[hh * hd..(hh + 1) * hd];
                for (s, &w) in row.iter().enumerate() {
                    kernels::axpy(w, &values[s * c + hh * hd..][..hd], o);
                }
            }
            let o = self.linear(&att, b.proj);
            for (x, &y) in h.iter_mut().zip(&o) {
                *x = *x + y;
            }
            let m = layer_norm(&h, self.param(b.ln2.0), self.param(b.ln2.1));
            let f: Vec<T> = self.linear(&m, b.fc).into_iter().map(kernels::silu).collect();
            let f = self.linear(&f, b.out);
            for (x, &y) in h.iter_mut().zip(&f) {
                *x = *x + y;
            }
        }
        let hf = layer_norm(&h, self.param(sl.ln_f.0), self.param(sl.ln_f.1));
        self.position += 1;
        Ok(self.linear(&hf, sl.head))
    }
}

/// Picks a token from `logits` restricted to `allowed`.
pub(super) fn select<T: Real, R: Rng>(logits: &[T], allowed: core::ops::Range<usize>, strategy: Strategy, rng: &mut R) -> Result<usize> {
    if allowed.is_empty() || allowed.end > logits.len() {
        bail!(Usage, "allowed range {:?} invalid for {} logits", allowed, logits.len());
    }
    match strategy {
        Strategy::Greedy => {
            let mut best = allowed.start;
            for i in allowed {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        Strategy::TopK { temperature, k } => {
            if !(temperature > 0.0) || k == 0 {
                bail!(Usage, "top-k sampling needs k ≥ 1 and positive temperature");
            }
            let mut order: Vec<usize> = allowed.collect();
            order.sort_by(|&a, &b| logits[b].to_f64().total_cmp(&logits[a].to_f64()).then(a.cmp(&b)));
            order.truncate(k);
            let top = logits[order[0]].to_f64();
            let weights: Vec<f64> = order.iter().map(|&i| libm::exp((logits[i].to_f64() - top) / temperature)).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (&i, &w) in order.iter().zip(&weights) {
                if u < w {
                    return Ok(i);
                }
                u -= w;
            }
            Ok(*order.last().expect("k ≥ 1"))
        }
    }
}

impl<T: Real> Translator<T> {
    /// Extends `prompt` by `count` tokens, each drawn from the vocabulary of
    /// the span it lands in. Returns only the generated tokens.
    pub fn generate<R: Rng>(
        &self,
        prompt: &[usize],
        count: usize,
        layout: &SequenceLayout,
        strategy: Strategy,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if layout.codebook_size != self.config().codebook_size {
            bail!(Usage, "layout codebook {} differs from model codebook {}", layout.codebook_size, self.config().codebook_size);
        }
        if prompt.first() != Some(&layout.sos()) {
            bail!(Usage, "prompt must start with the start token {}", layout.sos());
        }
        let total = prompt.len() + count;
        if total > self.config().context || total > layout.len() {
            bail!(Usage, "{} prompt + {count} generated tokens exceed context {}", prompt.len(), self.config().context.min(layout.len()));
        }
        layout.validate_prefix(prompt)?;
        let mut dec = IncrementalDecoder::new(self);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = dec.step(t)?;
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let position = prompt.len() + i;
            let span = layout.span_at(position).expect("within layout");
            let token = select(&logits, layout.vocabulary(span), strategy, rng)?;
            out.push(token);
            if i + 1 < count {
                logits = dec.step(token)?;
            }
        }
        Ok(out)
    }
}
