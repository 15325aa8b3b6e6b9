use tokenct_core::autoencoder::{Autoencoder, AutoencoderConfig};
use tokenct_core::numerics::{Adam, AdamConfig};
use tokenct_core::phantom::{generate, PhantomSpec};
use tokenct_core::preprocess::{prepare_volume, PreprocessConfig};
use tokenct_core::Tensor;

fn phantom_batch(count: u64, side: usize) -> Tensor<f32> {
    let spec = PhantomSpec::desk(21);
    let cfg = PreprocessConfig { resize_extents: [side; 3], ..PreprocessConfig::desk_scale() };
    let mut data = Vec::new();
    for i in 0..count {
        let p = prepare_volume(&generate(&spec, i).unwrap(), &cfg).unwrap();
        data.extend(p.normalized.voxels().iter().map(|&v| v as f32));
    }
    Tensor::new(&[count as usize, 1, side, side, side], data).unwrap()
}

#[test]
fn two_hundred_steps_cut_the_loss_below_a_quarter() {
    let cfg = AutoencoderConfig {
        rank: 3,
        extents: vec![16; 3],
        base_width: 4,
        widths: vec![8, 16],
        latent_dim: 8,
        codebook_size: 64,
        beta: 0.25,
        l1_weight: 1.0,
    };
    let x = phantom_batch(4, 16);
    let mut ae = Autoencoder::<f32>::new(cfg, 5).unwrap();
    let mut opt = Adam::new(AdamConfig::adam());
    let initial = ae.evaluate(&x).unwrap().total;
    for _ in 0..200 {
        ae.train_step(&x, &mut opt, 2e-3).unwrap();
    }
    let last = ae.evaluate(&x).unwrap().total;
    assert!(last < 0.25 * initial, "loss {initial} → {last}");
    // frozen weights give repeatable tokens
    assert_eq!(ae.tokenize(&x).unwrap(), ae.tokenize(&x).unwrap());
}
