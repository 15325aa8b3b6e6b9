//! Phantom datasets on disk.
//!
//! ```text
//! {dir}/manifest.txt        index seed split, one sample per line
//! {dir}/raw/{index:05}.rvol raw phantom, Hounsfield units
//! {dir}/hu/{index:05}.rvol  prepared grid, Hounsfield units
//! {dir}/ct/{index:05}.rvol  prepared grid, normalized to [−1, 1]
//! {dir}/pa/{index:05}.rvol  log-normalized posterior-anterior radiograph
//! {dir}/lat/{index:05}.rvol log-normalized lateral radiograph
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tokenct_core::drr::{radiograph_pair, Radiograph, View};
use tokenct_core::phantom::{generate, PhantomSpec};
use tokenct_core::preprocess::{prepare_volume, split_patients, PreprocessConfig, Split, Volume};

use crate::error::{Error, Result};
use crate::io::export::{radiograph_volume, read_radiograph};
use crate::io::{read_rvol, write_rvol};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifestEntry {
    pub index: u64,
    /// Generator seed; `(seed, index)` determines the phantom.
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Seeded patient-level split of `count` phantoms.
    pub fn phantoms(count: usize, seed: u64, fractions: [f64; 3]) -> Result<Self> {
        if count == 0 {
            return Ok(Self::default());
        }
        let ids: Vec<String> = (0..count).map(|i| i.to_string()).collect();
        let split = split_patients(&ids, fractions, seed)?;
        let entries = split.labels.iter().enumerate().map(|(i, (_, s))| ManifestEntry { index: i as u64, seed, split: *s }).collect();
        Ok(Self { entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# index seed split\n");
        for e in &self.entries {
            let _ = writeln!(s, "{:05} {} {}", e.index, e.seed, e.split.name());
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Text { path: path.into(), line: i + 1, message: format!("{m} in {line:?}") };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(err("expected `index seed split`"));
            }
            let index = f[0].parse().map_err(|_| err("bad index"))?;
            let seed = f[1].parse().map_err(|_| err("bad seed"))?;
            let split = Split::parse(f[2]).ok_or_else(|| err("unknown split"))?;
            if entries.iter().any(|e: &ManifestEntry| e.index == index) {
                return Err(err("duplicate index"));
            }
            entries.push(ManifestEntry { index, seed, split });
        }
        Ok(Self { entries })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(MANIFEST);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// One prepared sample with both radiographs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub hounsfield: Volume,
    pub normalized: Volume,
    pub pa: Radiograph,
    pub lat: Radiograph,
}

pub fn sample_path(dir: &Path, kind: &str, index: u64) -> PathBuf {
    dir.join(kind).join(format!("{index:05}.rvol"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn raw_phantom(entry: &ManifestEntry) -> Result<Volume> {
    Ok(generate(&PhantomSpec::desk(entry.seed), entry.index)?)
}

/// Preparation chain and projections of a raw Hounsfield volume.
pub fn prepare_sample(entry: ManifestEntry, raw: &Volume, pre: &PreprocessConfig, log_max: f64) -> Result<Sample> {
    let p = prepare_volume(raw, pre)?;
    let (pa, lat) = radiograph_pair(&p.hounsfield, log_max)?;
    Ok(Sample { entry, hounsfield: p.hounsfield, normalized: p.normalized, pa, lat })
}

/// Generates, prepares and projects every phantom of `manifest` in memory.
pub fn phantom_samples(manifest: &Manifest, pre: &PreprocessConfig, log_max: f64) -> Result<Vec<Sample>> {
    manifest.entries.iter().map(|e| prepare_sample(*e, &raw_phantom(e)?, pre, log_max)).collect()
}

/// Writes the raw phantoms and the manifest.
pub fn write_raw(dir: &Path, manifest: &Manifest) -> Result<()> {
    create_dir(&dir.join("raw"))?;
    for e in &manifest.entries {
        write_rvol(&raw_phantom(e)?, sample_path(dir, "raw", e.index))?;
    }
    manifest.save(dir)
}

/// Raw volumes to `hu/` and `ct/`.
pub fn preprocess_dir(dir: &Path, pre: &PreprocessConfig) -> Result<usize> {
    let manifest = Manifest::load(dir)?;
    create_dir(&dir.join("hu"))?;
    create_dir(&dir.join("ct"))?;
    for e in &manifest.entries {
        let p = prepare_volume(&read_rvol(sample_path(dir, "raw", e.index))?, pre)?;
        write_rvol(&p.hounsfield, sample_path(dir, "hu", e.index))?;
        write_rvol(&p.normalized, sample_path(dir, "ct", e.index))?;
    }
    Ok(manifest.entries.len())
}

/// `hu/` volumes to `pa/` and `lat/` radiographs.
pub fn project_dir(dir: &Path, log_max: f64) -> Result<usize> {
    let manifest = Manifest::load(dir)?;
    create_dir(&dir.join("pa"))?;
    create_dir(&dir.join("lat"))?;
    for e in &manifest.entries {
        let (pa, lat) = radiograph_pair(&read_rvol(sample_path(dir, "hu", e.index))?, log_max)?;
        write_rvol(&radiograph_volume(&pa)?, sample_path(dir, "pa", e.index))?;
        write_rvol(&radiograph_volume(&lat)?, sample_path(dir, "lat", e.index))?;
    }
    Ok(manifest.entries.len())
}

/// Writes prepared samples (everything except `raw/`) and their manifest.
pub fn write_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    for kind in ["hu", "ct", "pa", "lat"] {
        create_dir(&dir.join(kind))?;
    }
    for s in samples {
        let i = s.entry.index;
        write_rvol(&s.hounsfield, sample_path(dir, "hu", i))?;
        write_rvol(&s.normalized, sample_path(dir, "ct", i))?;
        write_rvol(&radiograph_volume(&s.pa)?, sample_path(dir, "pa", i))?;
        write_rvol(&radiograph_volume(&s.lat)?, sample_path(dir, "lat", i))?;
    }
    Manifest { entries: samples.iter().map(|s| s.entry).collect() }.save(dir)
}

/// Reads the prepared samples listed in the manifest.
pub fn load_samples(dir: &Path, log_max: f64) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .entries
        .iter()
        .map(|&entry| {
            let i = entry.index;
            Ok(Sample {
                entry,
                hounsfield: read_rvol(sample_path(dir, "hu", i))?,
                normalized: read_rvol(sample_path(dir, "ct", i))?,
                pa: read_radiograph(sample_path(dir, "pa", i), View::PosteriorAnterior, log_max)?,
                lat: read_radiograph(sample_path(dir, "lat", i), View::Lateral, log_max)?,
            })
        })
        .collect()
}
