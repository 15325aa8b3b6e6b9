//! Checkpoint container: a canonical `key=value` header followed by named
//! `f32` tensors.
//!
//! ```text
//! "TKCK" | version u32 | header_len u32 | header (UTF-8, one key=value per line)
//! tensor_count u32 | per tensor: name_len u32, name, rank u32, rank × u32 extents, f32 data
//! ```
//!
//! All integers and floats are little-endian. Header lines and tensors keep
//! their stored order, so decoding then encoding reproduces the input bytes.

use std::path::Path;

use tokenct_core::autoencoder::{Autoencoder, AutoencoderConfig};
use tokenct_core::numerics::{Real, Tensor};
use tokenct_core::translator::{SequenceLayout, Translator, TranslatorConfig, RASTER_ORDER};
use tokenct_core::vq::Codebook;

use crate::error::{Error, Result};
use crate::io::text::{format_list, parse_list};

pub const MAGIC: &[u8; 4] = b"TKCK";
pub const VERSION: u32 = 1;
const CODEBOOK: &str = "codebook.entries";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Replaces an existing key in place or appends a new one.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("checkpoint header lacks {key:?}")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Config(format!("checkpoint {key}={raw:?} is malformed")))
    }

    pub fn stage(&self) -> Option<&str> {
        self.get("stage")
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.error(0, format!("bad magic {:?}, expected \"TKCK\"", String::from_utf8_lossy(magic))));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, format!("unknown checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let start = r.at;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| r.error(start + e.valid_up_to(), "header is not UTF-8".into()))?;
        let mut header = Vec::new();
        let mut line_start = start;
        for line in text.split_terminator('\n') {
            let Some((k, v)) = line.split_once('=') else {
                return Err(r.error(line_start, format!("header line {line:?} lacks '='")));
            };
            header.push((k.to_string(), v.to_string()));
            line_start += line.len() + 1;
        }
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(r.error(start + len, "header does not end with a newline".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let at = r.at;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| r.error(at, "tensor name is not UTF-8".into()))?.to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let elems = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| r.error(at, format!("tensor {name} shape overflows")))?;
            let raw = r.take(elems.checked_mul(4).ok_or_else(|| r.error(at, format!("tensor {name} is too large")))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(r.error(r.at, format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: String) -> Error {
        Error::Format { path: self.path.into(), offset: offset as u64, message }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            path: self.path.into(),
            offset: self.at as u64,
            expected: self.at as u64 + n as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn named<T: Real>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor { name: name.into(), shape: t.shape().to_vec(), data: t.data().iter().map(|&v| Real::to_f64(v) as f32).collect() }
}

fn restore<T: Real>(t: &NamedTensor) -> Result<Tensor<T>> {
    Ok(Tensor::new(&t.shape, t.data.iter().map(|&v| T::of(v as f64)).collect())?)
}

fn expect_stage(ck: &Checkpoint, allowed: &[&str]) -> Result<String> {
    let stage = ck.require("stage")?;
    if !allowed.contains(&stage) {
        return Err(Error::Config(format!("checkpoint stage {stage:?}, expected one of {allowed:?}")));
    }
    let raster = ck.require("raster")?;
    if raster != RASTER_ORDER {
        return Err(Error::Config(format!("checkpoint raster order {raster:?} differs from {RASTER_ORDER:?}")));
    }
    Ok(stage.to_string())
}

/// Loads every tensor of `ck` into `store`-shaped slots; names must match
/// one to one.
fn load_params<T: Real>(ck: &Checkpoint, names: &[String], mut load: impl FnMut(&str, Tensor<T>) -> Result<()>) -> Result<()> {
    for t in &ck.tensors {
        if !names.contains(&t.name) {
            return Err(Error::Config(format!("checkpoint tensor {:?} is not a model parameter", t.name)));
        }
        load(&t.name, restore(t)?)?;
    }
    if let Some(missing) = names.iter().find(|n| ck.tensor(n).is_none()) {
        return Err(Error::Config(format!("checkpoint lacks tensor {missing:?}")));
    }
    Ok(())
}

/// Snapshot of an autoencoder under `stage` (`vq2d` or `vq3d`). `extra`
/// header pairs follow the model configuration.
pub fn autoencoder_checkpoint<T: Real>(ae: &Autoencoder<T>, stage: &str, seed: u64, extra: &[(&str, String)]) -> Checkpoint {
    let c = ae.config();
    let mut ck = Checkpoint::default();
    ck.set("stage", stage);
    ck.set("raster", RASTER_ORDER);
    ck.set("seed", seed);
    ck.set("rank", c.rank);
    ck.set("extents", format_list(&c.extents));
    ck.set("base_width", c.base_width);
    ck.set("widths", format_list(&c.widths));
    ck.set("latent_dim", c.latent_dim);
    ck.set("codebook_size", c.codebook_size);
    ck.set("beta", c.beta);
    ck.set("l1_weight", c.l1_weight);
    for (k, v) in extra {
        ck.set(k, v);
    }
    ck.tensors = ae.params.iter().map(|(n, p)| named(n, &p.value)).collect();
    ck.tensors.push(named(CODEBOOK, &ae.codebook.entries.value));
    ck
}

pub fn autoencoder_config(ck: &Checkpoint) -> Result<AutoencoderConfig> {
    let config = AutoencoderConfig {
        rank: ck.parse("rank")?,
        extents: parse_list(ck.require("extents")?).map_err(Error::Config)?,
        base_width: ck.parse("base_width")?,
        widths: parse_list(ck.require("widths")?).map_err(Error::Config)?,
        latent_dim: ck.parse("latent_dim")?,
        codebook_size: ck.parse("codebook_size")?,
        beta: ck.parse("beta")?,
        l1_weight: ck.parse("l1_weight")?,
    };
    config.validate()?;
    Ok(config)
}

pub fn autoencoder_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<Autoencoder<T>> {
    expect_stage(ck, &["vq2d", "vq3d"])?;
    let mut ae = Autoencoder::new(autoencoder_config(ck)?, ck.parse("seed")?)?;
    let mut names: Vec<String> = ae.params.iter().map(|(n, _)| n.to_string()).collect();
    names.push(CODEBOOK.into());
    let mut codebook = None;
    load_params(ck, &names, |name, t| {
        if name == CODEBOOK {
            codebook = Some(t);
            Ok(())
        } else {
            Ok(ae.params.load(name, t)?)
        }
    })?;
    let entries = codebook.expect("presence checked");
    if entries.shape() != ae.codebook.entries.value.shape() {
        return Err(Error::Config(format!("codebook shape {:?} does not match the configuration", entries.shape())));
    }
    ae.codebook = Codebook::from_entries(entries)?;
    Ok(ae)
}

/// Snapshot of a translator together with the sequence layout it models.
pub fn translator_checkpoint<T: Real>(m: &Translator<T>, layout: &SequenceLayout, seed: u64, extra: &[(&str, String)]) -> Checkpoint {
    let c = m.config();
    let mut ck = Checkpoint::default();
    ck.set("stage", "gpt");
    ck.set("raster", RASTER_ORDER);
    ck.set("seed", seed);
    ck.set("blocks", c.blocks);
    ck.set("heads", c.heads);
    ck.set("embed", c.embed);
    ck.set("context", c.context);
    ck.set("codebook_size", c.codebook_size);
    ck.set("dropout", c.dropout);
    ck.set("layout.pa", format_list(&layout.pa));
    ck.set("layout.lat", format_list(&layout.lat));
    ck.set("layout.ct", format_list(&layout.ct));
    for (k, v) in extra {
        ck.set(k, v);
    }
    ck.tensors = m.params.iter().map(|(n, p)| named(n, &p.value)).collect();
    ck
}

pub fn translator_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<(Translator<T>, SequenceLayout)> {
    expect_stage(ck, &["gpt"])?;
    let config = TranslatorConfig {
        blocks: ck.parse("blocks")?,
        heads: ck.parse("heads")?,
        embed: ck.parse("embed")?,
        context: ck.parse("context")?,
        codebook_size: ck.parse("codebook_size")?,
        dropout: ck.parse("dropout")?,
    };
    let extents = |key: &str| -> Result<[usize; 3]> {
        let v = parse_list(ck.require(key)?).map_err(Error::Config)?;
        v.try_into().map_err(|v: Vec<usize>| Error::Config(format!("{key} needs 3 extents, got {}", v.len())))
    };
    let layout = SequenceLayout::new(extents("layout.pa")?, extents("layout.lat")?, extents("layout.ct")?, config.codebook_size)?;
    let mut m = Translator::new(config, ck.parse("seed")?)?;
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    load_params(ck, &names, |name, t| Ok(m.params.load(name, t)?))?;
    Ok((m, layout))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ae() -> Autoencoder<f32> {
        let cfg = AutoencoderConfig {
            rank: 2,
            extents: vec![8, 8],
            base_width: 2,
            widths: vec![4],
            latent_dim: 3,
            codebook_size: 5,
            beta: 0.25,
            l1_weight: 1.0,
        };
        Autoencoder::new(cfg, 4).unwrap()
    }

    #[test]
    fn decode_then_encode_is_byte_identical() {
        let ck = autoencoder_checkpoint(&tiny_ae(), "vq2d", 4, &[("log_max", "12".into())]);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn autoencoder_survives_a_round_trip() {
        let mut ae = tiny_ae();
        ae.params.get_mut(0).value.data_mut()[0] = 0.123;
        let ck = autoencoder_checkpoint(&ae, "vq2d", 4, &[]);
        let back: Autoencoder<f32> = autoencoder_from_checkpoint(&ck).unwrap();
        assert_eq!(back.params, ae.params);
        assert_eq!(back.codebook.entries.value, ae.codebook.entries.value);
        assert_eq!(back.config(), ae.config());
    }

    #[test]
    fn translator_survives_a_round_trip() {
        let cfg = TranslatorConfig { blocks: 1, heads: 2, embed: 4, context: 9, codebook_size: 4, dropout: 0.0 };
        let layout = SequenceLayout::new([2, 1, 1], [2, 1, 1], [2, 2, 1], 4).unwrap();
        let m = Translator::<f32>::new(cfg, 2).unwrap();
        let ck = translator_checkpoint(&m, &layout, 2, &[]);
        let (back, l) = translator_from_checkpoint::<f32>(&ck).unwrap();
        assert_eq!(back, m);
        assert_eq!(l, layout);
        assert!(autoencoder_from_checkpoint::<f32>(&ck).is_err());
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let bytes = autoencoder_checkpoint(&tiny_ae(), "vq2d", 4, &[]).encode();
        let p = Path::new("mem");
        let mut b = bytes.clone();
        b[1] = b'X';
        assert!(matches!(Checkpoint::decode(&b, p), Err(Error::Format { offset: 0, .. })));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(matches!(Checkpoint::decode(&b, p), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1], p), Err(Error::Truncated { .. })));
        let mut b = bytes.clone();
        b.push(0);
        assert!(matches!(Checkpoint::decode(&b, p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_or_foreign_tensors_are_rejected() {
        let mut ck = autoencoder_checkpoint(&tiny_ae(), "vq2d", 4, &[]);
        ck.tensors.pop();
        assert!(autoencoder_from_checkpoint::<f32>(&ck).is_err());
        let mut ck = autoencoder_checkpoint(&tiny_ae(), "vq2d", 4, &[]);
        ck.tensors[0].name = "stray".into();
        assert!(autoencoder_from_checkpoint::<f32>(&ck).is_err());
        let mut ck = autoencoder_checkpoint(&tiny_ae(), "vq2d", 4, &[]);
        ck.set("raster", "depth,height,width");
        assert!(autoencoder_from_checkpoint::<f32>(&ck).is_err());
    }
}
