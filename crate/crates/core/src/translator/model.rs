use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{SequenceLayout, TranslationSequence};
use crate::error::{bail, Result};
use crate::numerics::{Adam, Graph, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorConfig {
    pub blocks: usize,
    pub heads: usize,
    pub embed: usize,
    pub context: usize,
    pub codebook_size: usize,
    pub dropout: f64,
}

impl TranslatorConfig {
    /// 2 blocks, 2 heads, 64 dimensions over the desk sequence layout.
    pub fn desk() -> Self {
        let layout = SequenceLayout::desk();
        Self { blocks: 2, heads: 2, embed: 64, context: layout.len(), codebook_size: layout.codebook_size, dropout: 0.0 }
    }

    /// 8 blocks, 8 heads, 512 dimensions over the full-resolution layout.
    pub fn full_scale() -> Self {
        let layout = SequenceLayout::full_scale();
        Self { blocks: 8, heads: 8, embed: 512, context: layout.len(), codebook_size: layout.codebook_size, dropout: 0.0 }
    }

    pub fn vocab_size(&self) -> usize {
        2 * self.codebook_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.embed == 0 || self.context < 2 {
            bail!(Usage, "translator needs positive blocks, heads, width and a context of at least 2");
        }
        if self.embed % self.heads != 0 {
            bail!(Usage, "embedding {} not divisible by {} heads", self.embed, self.heads);
        }
        if self.codebook_size < 2 {
            bail!(Usage, "codebook size must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Usage, "dropout {} outside [0, 1)", self.dropout);
        }
        Ok(())
    }

    /// Number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let (c, v) = (self.embed, self.vocab_size());
        let block = 4 * c + (c * 3 * c + 3 * c) + (c * c + c) + (c * 4 * c + 4 * c) + (4 * c * c + c);
        v * c + self.context * c + self.blocks * block + 2 * c + c * v + v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) struct BlockSlots {
    pub ln1: (usize, usize),
    pub qkv: (usize, usize),
    pub proj: (usize, usize),
    pub ln2: (usize, usize),
    pub fc: (usize, usize),
    pub out: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub(super) struct Slots {
    pub tokens: usize,
    pub positions: usize,
    pub blocks: Vec<BlockSlots>,
    pub ln_f: (usize, usize),
    pub head: (usize, usize),
}

/// Decoder-only transformer with pre-norm blocks, learned positions and a
/// 4×-wide SiLU feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Translator<T> {
    config: TranslatorConfig,
    pub params: ParamStore<T>,
    pub(super) slots: Slots,
}

fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive deviation");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("positive extents")
}

impl<T: Real> Translator<T> {
    /// Weights and embeddings `normal(0, 0.02)`, biases 0, norm gains 1.
    pub fn new(config: TranslatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, v) = (config.embed, config.vocab_size());
        let mut s = ParamStore::new();
        let tokens = s.add("token_embedding", normal(&mut rng, &[v, c], 0.02));
        let positions = s.add("position_embedding", normal(&mut rng, &[config.context, c], 0.02));
        let norm = |s: &mut ParamStore<T>, name: &str| {
            (s.add(format!("{name}.gain"), Tensor::full(&[c], T::one())), s.add(format!("{name}.bias"), Tensor::zeros(&[c])))
        };
        let linear = |s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            (s.add(format!("{name}.weight"), normal(rng, &[i, o], 0.02)), s.add(format!("{name}.bias"), Tensor::zeros(&[o])))
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let p = format!("block{b}");
            blocks.push(BlockSlots {
                ln1: norm(&mut s, &format!("{p}.ln1")),
                qkv: linear(&mut s, &mut rng, &format!("{p}.attn.qkv"), c, 3 * c),
                proj: linear(&mut s, &mut rng, &format!("{p}.attn.proj"), c, c),
                ln2: norm(&mut s, &format!("{p}.ln2")),
                fc: linear(&mut s, &mut rng, &format!("{p}.mlp.fc"), c, 4 * c),
                out: linear(&mut s, &mut rng, &format!("{p}.mlp.proj"), 4 * c, c),
            });
        }
        let ln_f = norm(&mut s, "ln_f");
        let head = linear(&mut s, &mut rng, "head", c, v);
        let slots = Slots { tokens, positions, blocks, ln_f, head };
        Ok(Self { config, params: s, slots })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    fn linear(g: &mut Graph<T>, p: &[Var], x: Var, (w, b): (usize, usize)) -> Result<Var> {
        let y = g.matmul(x, p[w])?;
        g.add_row_bias(y, p[b])
    }

    /// Logits `[(B·T)×V]` for `batch` sequences of equal length laid end to end.
    pub fn forward_graph<R: Rng>(&self, g: &mut Graph<T>, p: &[Var], tokens: &[usize], batch: usize, rng: &mut R) -> Result<Var> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            bail!(Usage, "{} tokens cannot form {batch} equal sequences", tokens.len());
        }
        let t = tokens.len() / batch;
        if t > self.config.context {
            bail!(Usage, "sequence of {t} tokens exceeds context {}", self.config.context);
        }
        let rate = self.config.dropout;
        let sl = &self.slots;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let tok = g.embedding(p[sl.tokens], tokens)?;
        let pos = g.embedding(p[sl.positions], &positions)?;
        let h = g.add(tok, pos)?;
        let mut h = g.dropout(h, rate, rng);
        for b in &sl.blocks {
            let a = g.layer_norm(h, p[b.ln1.0], p[b.ln1.1])?;
            let qkv = Self::linear(g, p, a, b.qkv)?;
            let att = g.causal_attention(qkv, batch, self.config.heads)?;
            let o = Self::linear(g, p, att, b.proj)?;
            let o = g.dropout(o, rate, rng);
            h = g.add(h, o)?;
            let m = g.layer_norm(h, p[b.ln2.0], p[b.ln2.1])?;
            let f = Self::linear(g, p, m, b.fc)?;
            let f = g.silu(f);
            let f = Self::linear(g, p, f, b.out)?;
            let f = g.dropout(f, rate, rng);
            h = g.add(h, f)?;
        }
        let hf = g.layer_norm(h, p[sl.ln_f.0], p[sl.ln_f.1])?;
        Self::linear(g, p, hf, sl.head)
    }

    /// Logits `[T×V]` of one sequence with frozen weights.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = self.inference_graph(&mut g, &p, tokens, &mut rng)?;
        Ok(g.value(l).clone())
    }

    fn inference_graph(&self, g: &mut Graph<T>, p: &[Var], tokens: &[usize], rng: &mut ChaCha8Rng) -> Result<Var> {
        if self.config.dropout == 0.0 {
            return self.forward_graph(g, p, tokens, 1, rng);
        }
        let mut eval = self.clone();
        eval.config.dropout = 0.0;
        eval.forward_graph(g, p, tokens, 1, rng)
    }

    fn inputs_and_targets(&self, batch: &[TranslationSequence]) -> Result<(Vec<usize>, Vec<usize>)> {
        let Some(first) = batch.first() else { bail!(Usage, "empty batch") };
        let t = first.len();
        let vocab = self.config.vocab_size();
        let mut inputs = Vec::with_capacity(batch.len() * (t - 1));
        let mut targets = Vec::with_capacity(batch.len() * (t - 1));
        for s in batch {
            if s.len() != t {
                bail!(Usage, "sequences of length {} and {} in one batch", t, s.len());
            }
            if let Some(&bad) = s.tokens().iter().find(|&&x| x >= vocab) {
                bail!(Index, "token {bad} outside vocabulary of {vocab}");
            }
            inputs.extend_from_slice(&s.tokens()[..t - 1]);
            targets.extend_from_slice(&s.tokens()[1..]);
        }
        Ok((inputs, targets))
    }

    /// Mean next-token cross-entropy over all `T − 1` predicted positions.
    pub fn loss_graph<R: Rng>(&self, g: &mut Graph<T>, p: &[Var], batch: &[TranslationSequence], rng: &mut R) -> Result<Var> {
        let (inputs, targets) = self.inputs_and_targets(batch)?;
        let logits = self.forward_graph(g, p, &inputs, batch.len(), rng)?;
        g.cross_entropy(logits, &targets)
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn train_step<R: Rng>(&mut self, batch: &[TranslationSequence], opt: &mut Adam<T>, lr: f64, rng: &mut R) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let loss = self.loss_graph(&mut g, &p, batch, rng)?;
        let value = g.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            bail!(Numerical, "translator loss is {value}");
        }
        let grads = g.backward(loss)?;
        self.params.zero_grad();
        self.params.accumulate(&grads, &p);
        opt.step(&mut self.params.params_mut(), lr)?;
        Ok(value)
    }

    /// Batch loss with frozen weights and no dropout.
    pub fn evaluate(&self, batch: &[TranslationSequence]) -> Result<f64> {
        let mut eval = self.clone();
        eval.config.dropout = 0.0;
        let mut g = Graph::new();
        let p = eval.params.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = eval.loss_graph(&mut g, &p, batch, &mut rng)?;
        Ok(g.value(loss).data()[0].to_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;
    use alloc::vec;

    fn tiny() -> TranslatorConfig {
        TranslatorConfig { blocks: 2, heads: 2, embed: 8, context: 9, codebook_size: 4, dropout: 0.0 }
    }

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [tiny(), TranslatorConfig::desk()] {
            let m = Translator::<f32>::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.params.scalar_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shape_and_context_limit() {
        let m = Translator::<f64>::new(tiny(), 1).unwrap();
        let l = m.logits(&[8, 1, 2, 3]).unwrap();
        assert_eq!(l.shape(), &[4, 9]);
        assert!(l.is_finite());
        assert!(matches!(m.logits(&[0; 10]), Err(crate::Error::Usage(_))));
        assert!(matches!(m.logits(&[9]), Err(crate::Error::Index(_))));
    }

    #[test]
    fn training_lowers_loss_on_one_sequence() {
        let layout = SequenceLayout::new([2, 2, 1], [1, 1, 1], [1, 1, 3], 4).unwrap();
        let seq = TranslationSequence::from_tokens(vec![8, 1, 2, 3, 0, 1, 6, 5, 7], layout).unwrap();
        let mut m = Translator::<f64>::new(tiny(), 2).unwrap();
        let mut opt = Adam::new(AdamConfig::adam());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = m.train_step(core::slice::from_ref(&seq), &mut opt, 1e-2, &mut rng).unwrap();
        assert!((first - 9f64.ln()).abs() < 0.1 * 9f64.ln());
        for _ in 0..100 {
            m.train_step(core::slice::from_ref(&seq), &mut opt, 1e-2, &mut rng).unwrap();
        }
        assert!(m.evaluate(&[seq]).unwrap() < 0.05);
    }
}
