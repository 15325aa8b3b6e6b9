use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenct_core::numerics::Graph;
use tokenct_core::translator::{
    build_sequence, SequenceLayout, Span, Strategy, TranslationSequence, Translator, TranslatorConfig,
};
use tokenct_core::vq::{Modality, TokenGrid};

fn tiny(context: usize) -> TranslatorConfig {
    TranslatorConfig { blocks: 2, heads: 2, embed: 8, context, codebook_size: 4, dropout: 0.0 }
}

fn random_sequence(rng: &mut ChaCha8Rng, layout: &SequenceLayout) -> TranslationSequence {
    let tokens = (0..layout.len())
        .map(|p| rng.random_range(layout.vocabulary(layout.span_at(p).unwrap())))
        .collect();
    TranslationSequence::from_tokens(tokens, *layout).unwrap()
}

fn loss(m: &Translator<f64>, batch: &[TranslationSequence]) -> f64 {
    m.evaluate(batch).unwrap()
}

#[test]
fn full_model_matches_finite_differences() {
    let layout = SequenceLayout::new([1, 2, 1], [1, 2, 1], [1, 1, 3], 4).unwrap();
    assert_eq!(layout.len(), 8);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Translator::<f64>::new(tiny(8), seed).unwrap();
        // spread weights so the check is not dominated by the near-zero init
        for slot in 0..model.params.len() {
            for v in model.params.get_mut(slot).value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let batch = [random_sequence(&mut rng, &layout)];
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g, true);
        let l = model.loss_graph(&mut g, &vars, &batch, &mut rng).unwrap();
        let grads = g.backward(l).unwrap();
        for slot in 0..model.params.len() {
            let n = model.params.get(slot).value.len();
            let analytic = grads.get_or_zeros(vars[slot], n);
            for i in 0..n {
                let h = 1e-6;
                let mut plus = model.clone();
                plus.params.get_mut(slot).value.data_mut()[i] += h;
                let mut minus = model.clone();
                minus.params.get_mut(slot).value.data_mut()[i] -= h;
                let numeric = (loss(&plus, &batch) - loss(&minus, &batch)) / (2.0 * h);
                let err = (analytic[i] - numeric).abs();
                let scale = analytic[i].abs().max(numeric.abs());
                let name = model.params.iter().nth(slot).unwrap().0;
                assert!(
                    err <= 1e-3 * scale || err <= 1e-6,
                    "seed {seed} {name}[{i}]: analytic {} numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }
}

#[test]
fn perturbing_later_tokens_leaves_earlier_logits_bit_identical() {
    let layout = SequenceLayout::desk();
    let model = Translator::<f32>::new(TranslatorConfig::desk(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = layout.vocab_size();
    for _ in 0..20 {
        let base = random_sequence(&mut rng, &layout).tokens().to_vec();
        let reference = model.logits(&base).unwrap();
        let t = rng.random_range(1..base.len());
        let mut changed = base.clone();
        for x in &mut changed[t..] {
            *x = rng.random_range(0..v);
        }
        let out = model.logits(&changed).unwrap();
        assert_eq!(&out.data()[..t * v], &reference.data()[..t * v], "perturbation at {t}");
    }
}

#[test]
fn random_init_loss_is_near_uniform() {
    let layout = SequenceLayout::desk();
    let model = Translator::<f32>::new(TranslatorConfig::desk(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch: Vec<_> = (0..4).map(|_| random_sequence(&mut rng, &layout)).collect();
    let l = model.evaluate(&batch).unwrap();
    let uniform = 513f64.ln();
    assert!((l - uniform).abs() < 0.1 * uniform, "loss {l} vs ln 513 = {uniform}");
}

#[test]
fn monoplanar_generation_completes_the_sequence() {
    let layout = SequenceLayout::desk();
    let model = Translator::<f32>::new(TranslatorConfig::desk(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = random_sequence(&mut rng, &layout);
    let prompt = &seq.tokens()[..layout.positions(Span::Lat).start];
    let j = layout.len() - prompt.len();
    let out = model.generate(prompt, j, &layout, Strategy::default(), &mut rng).unwrap();
    assert_eq!(out.len(), 80);
    let mut full = prompt.to_vec();
    full.extend(out);
    let complete = TranslationSequence::from_tokens(full, layout).unwrap();
    let (_, lat, ct) = complete.grids().unwrap();
    assert_eq!(lat.modality(), Modality::Thrx);
    assert_eq!(ct.extents(), [4, 4, 4]);
}

#[test]
fn training_is_deterministic() {
    let layout = SequenceLayout::new([1, 2, 1], [1, 2, 1], [1, 1, 3], 4).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: Vec<_> = (0..2).map(|_| random_sequence(&mut rng, &layout)).collect();
        let mut cfg = tiny(8);
        cfg.dropout = 0.1;
        let mut m = Translator::<f64>::new(cfg, 9).unwrap();
        let mut opt = tokenct_core::numerics::Adam::new(tokenct_core::numerics::AdamConfig::adamw());
        (0..20).map(|_| m.train_step(&batch, &mut opt, 1e-2, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn sequences_from_grids_match_layout() {
    let g = |e: [usize; 3], m| TokenGrid::new(e, vec![1; e.iter().product()], m, 4).unwrap();
    let s = build_sequence(&g([1, 2, 1], Modality::Thrx), &g([1, 2, 1], Modality::Thrx), &g([1, 1, 3], Modality::Ct)).unwrap();
    assert_eq!(s.tokens(), &[8, 1, 1, 1, 1, 5, 5, 5]);
}

#[test]
fn desk_model_memorizes_one_sequence() {
    let layout = SequenceLayout::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = [random_sequence(&mut rng, &layout)];
    let mut m = Translator::<f32>::new(TranslatorConfig::desk(), 3).unwrap();
    let mut opt = tokenct_core::numerics::Adam::new(tokenct_core::numerics::AdamConfig::adamw());
    for _ in 0..500 {
        m.train_step(&batch, &mut opt, 1e-3, &mut rng).unwrap();
    }
    let l = m.evaluate(&batch).unwrap();
    assert!(l < 0.01, "loss {l}");
}
