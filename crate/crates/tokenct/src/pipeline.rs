//! Tokenization of a prepared dataset and radiograph-to-CT reconstruction
//! with trained checkpoints.

use std::path::Path;

use rand::Rng;

use tokenct_core::autoencoder::Autoencoder;
use tokenct_core::drr::Radiograph;
use tokenct_core::numerics::Tensor;
use tokenct_core::preprocess::{ValueKind, Volume};
use tokenct_core::translator::{flatten_tokens, SequenceLayout, Strategy, TranslationSequence, Translator};
use tokenct_core::vq::TokenGrid;

use crate::dataset::load_samples;
use crate::error::{Error, Result};
use crate::io::checkpoint::{autoencoder_from_checkpoint, translator_from_checkpoint, Checkpoint};
use crate::io::text::{parse_list, TokenRecord, TokenSet};
use crate::training::Stage;

/// Token file written next to the checkpoints.
pub const TOKENS: &str = "tokens.txt";

fn data_error(m: String) -> Error {
    tokenct_core::Error::Data(m).into()
}

fn load_stage(dir: &Path, stage: Stage) -> Result<Checkpoint> {
    let p = stage.checkpoint_path(dir);
    if !p.exists() {
        return Err(Error::Dependency(format!("{} not found; train {} first", p.display(), stage.name())));
    }
    Checkpoint::load(p)
}

/// Token grid of one single-channel image or volume, encoded on its own so
/// every sample sees the same kernels regardless of dataset size.
pub fn tokenize_one(ae: &Autoencoder<f32>, values: &[f64]) -> Result<TokenGrid> {
    let extents = &ae.config().extents;
    if values.len() != extents.iter().product::<usize>() {
        return Err(data_error(format!("{} values do not fit model extents {extents:?}", values.len())));
    }
    let mut shape = vec![1, 1];
    shape.extend_from_slice(extents);
    let x = Tensor::new(&shape, values.iter().map(|&v| v as f32).collect())?;
    Ok(ae.tokenize(&x)?.remove(0))
}

/// Token grids of every sample in `data` under the autoencoders in
/// `checkpoints`.
pub fn tokenize_dir(data: &Path, checkpoints: &Path, log_max: f64) -> Result<TokenSet> {
    let vq2d = autoencoder_from_checkpoint::<f32>(&load_stage(checkpoints, Stage::Vq2d)?)?;
    let vq3d = autoencoder_from_checkpoint::<f32>(&load_stage(checkpoints, Stage::Vq3d)?)?;
    tokenize_samples(&vq2d, &vq3d, data, log_max)
}

pub fn tokenize_samples(vq2d: &Autoencoder<f32>, vq3d: &Autoencoder<f32>, data: &Path, log_max: f64) -> Result<TokenSet> {
    let n = vq2d.config().codebook_size;
    if vq3d.config().codebook_size != n {
        return Err(data_error(format!("codebook sizes differ: 2D {n}, 3D {}", vq3d.config().codebook_size)));
    }
    let g2 = vq2d.config().grid_extents();
    let mut set = TokenSet::new(n, g2, g2, vq3d.config().grid_extents());
    for s in load_samples(data, log_max)? {
        set.records.push(TokenRecord {
            index: s.entry.index,
            split: s.entry.split,
            pa: tokenize_one(vq2d, &s.pa.pixels)?,
            lat: tokenize_one(vq2d, &s.lat.pixels)?,
            ct: tokenize_one(vq3d, s.normalized.voxels())?,
        });
    }
    Ok(set)
}

/// The three trained stages.
pub struct Models {
    pub vq2d: Autoencoder<f32>,
    pub vq3d: Autoencoder<f32>,
    pub gpt: Translator<f32>,
    pub layout: SequenceLayout,
    /// Voxel spacing of the training volumes.
    pub spacing: [f64; 3],
    /// Log range the 2D autoencoder was trained with.
    pub log_max: f64,
}

impl Models {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let c2 = load_stage(dir, Stage::Vq2d)?;
        let c3 = load_stage(dir, Stage::Vq3d)?;
        let cg = load_stage(dir, Stage::Gpt)?;
        let vq2d = autoencoder_from_checkpoint(&c2)?;
        let vq3d = autoencoder_from_checkpoint(&c3)?;
        let (gpt, layout) = translator_from_checkpoint(&cg)?;
        let spacing: Vec<f64> = parse_list(c3.require("spacing")?).map_err(Error::Config)?;
        let spacing = spacing.try_into().map_err(|_| Error::Config("spacing needs three values".into()))?;
        let log_max = c2.parse("log_max")?;
        let m = Self { vq2d, vq3d, gpt, layout, spacing, log_max };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let l = &self.layout;
        let g2 = self.vq2d.config().grid_extents();
        if l.pa != g2 || l.lat != g2 || l.ct != self.vq3d.config().grid_extents() {
            return Err(data_error("translator layout does not match the autoencoder grids".into()));
        }
        if l.codebook_size != self.vq2d.config().codebook_size || l.codebook_size != self.vq3d.config().codebook_size {
            return Err(data_error("translator and autoencoders use different codebook sizes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// The complete `[SOS][PA][LAT][CT]` sequence, prompt included.
    pub sequence: TranslationSequence,
    /// Decoded volume in normalized units.
    pub volume: Volume,
}

/// Biplanar reconstruction when `lat` is given, otherwise monoplanar: the
/// lateral tokens are generated before the CT tokens.
pub fn reconstruct<R: Rng>(models: &Models, pa: &Radiograph, lat: Option<&Radiograph>, strategy: Strategy, rng: &mut R) -> Result<Reconstruction> {
    let l = &models.layout;
    let mut prompt = vec![l.sos()];
    prompt.extend(flatten_tokens(&tokenize_one(&models.vq2d, &pa.pixels)?));
    if let Some(lat) = lat {
        prompt.extend(flatten_tokens(&tokenize_one(&models.vq2d, &lat.pixels)?));
    }
    let generated = models.gpt.generate(&prompt, l.len() - prompt.len(), l, strategy, rng)?;
    prompt.extend(generated);
    let sequence = TranslationSequence::from_tokens(prompt, *l)?;
    let (_, _, ct) = sequence.grids()?;
    let volume = decode_ct(models, &ct)?;
    Ok(Reconstruction { sequence, volume })
}

/// Decodes a CT token grid into a normalized volume.
pub fn decode_ct(models: &Models, ct: &TokenGrid) -> Result<Volume> {
    let out = models.vq3d.decode_tokens(ct)?;
    let e = &models.vq3d.config().extents;
    let voxels = out.data().iter().map(|&v| v as f64).collect();
    Ok(Volume::new([e[0], e[1], e[2]], models.spacing, ValueKind::Normalized, voxels)?)
}
