//! Line-oriented text formats: flat `key=value` configs and token files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tokenct_core::preprocess::Split;
use tokenct_core::translator::{flatten_tokens, unflatten_tokens, RASTER_ORDER};
use tokenct_core::vq::{Modality, TokenGrid};

use crate::error::{Error, Result};

pub fn format_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',').map(|p| p.trim().parse().map_err(|_| format!("bad list element {p:?} in {s:?}"))).collect()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Flat `key=value` settings. `#` starts a comment; blank lines are ignored;
/// a key may appear only once.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    entries: Vec<(String, String)>,
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Text { path: path.into(), line: i + 1, message };
            let Some((k, v)) = line.split_once('=') else {
                return Err(err(format!("expected key=value, found {line:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if c.get(k).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
            c.entries.push((k.into(), v.into()));
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.into(), value)),
        }
    }

    /// Applies a command-line `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(Error::Config(format!("override {assignment:?} is not key=value")));
        };
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("{key}={v:?} is malformed"))))
            .transpose()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Token grids of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub index: u64,
    pub split: Split,
    pub pa: TokenGrid,
    pub lat: TokenGrid,
    pub ct: TokenGrid,
}

/// A token file: shared grid geometry, then one line per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub codebook_size: usize,
    pub pa: [usize; 3],
    pub lat: [usize; 3],
    pub ct: [usize; 3],
    pub records: Vec<TokenRecord>,
}

const TOKEN_MAGIC: &str = "tokens 1";

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl TokenSet {
    pub fn new(codebook_size: usize, pa: [usize; 3], lat: [usize; 3], ct: [usize; 3]) -> Self {
        Self { codebook_size, pa, lat, ct, records: Vec::new() }
    }

    /// Serialized form. CT indices are written unshifted, in `[0, N)`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{TOKEN_MAGIC}");
        let _ = writeln!(s, "raster={RASTER_ORDER}");
        let _ = writeln!(s, "codebook_size={}", self.codebook_size);
        let _ = writeln!(s, "pa={}", format_list(&self.pa));
        let _ = writeln!(s, "lat={}", format_list(&self.lat));
        let _ = writeln!(s, "ct={}", format_list(&self.ct));
        let _ = writeln!(s, "samples={}", self.records.len());
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:05} {} {} | {} | {}",
                r.index,
                r.split.name(),
                join(&flatten_tokens(&r.pa)),
                join(&flatten_tokens(&r.lat)),
                join(&flatten_tokens(&r.ct))
            );
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Text { path: path.into(), line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, format!("missing {what}")));
        let (n, first) = next("format line")?;
        if first != TOKEN_MAGIC {
            return Err(err(n, format!("expected {TOKEN_MAGIC:?}, found {first:?}")));
        }
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (n, l) = next(key)?;
            match l.split_once('=') {
                Some((k, v)) if k == key => Ok((n, v.to_string())),
                _ => Err(err(n, format!("expected {key}=…, found {l:?}"))),
            }
        };
        let (n, raster) = field("raster")?;
        if raster != RASTER_ORDER {
            return Err(err(n, format!("raster order {raster:?} differs from {RASTER_ORDER:?}")));
        }
        let (n, cb) = field("codebook_size")?;
        let codebook_size = cb.parse().map_err(|_| err(n, format!("bad codebook size {cb:?}")))?;
        let mut extents = |key: &str| -> Result<[usize; 3]> {
            let (n, v) = field(key)?;
            let list: Vec<usize> = parse_list(&v).map_err(|m| err(n, m))?;
            list.try_into().map_err(|_| err(n, format!("{key} needs three extents")))
        };
        let (pa, lat, ct) = (extents("pa")?, extents("lat")?, extents("ct")?);
        let (n, count) = field("samples")?;
        let count: usize = count.parse().map_err(|_| err(n, format!("bad sample count {count:?}")))?;
        let mut set = Self::new(codebook_size, pa, lat, ct);
        for (n, line) in lines {
            let fail = |m: String| err(n, m);
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() != 3 {
                return Err(fail("expected three '|'-separated spans".into()));
            }
            let mut head = parts[0].split_whitespace();
            let index = head.next().and_then(|s| s.parse().ok()).ok_or_else(|| fail("missing sample index".into()))?;
            let split = head.next().and_then(Split::parse).ok_or_else(|| fail("missing or unknown split".into()))?;
            let numbers = |s: &str| -> Result<Vec<usize>> {
                s.split_whitespace().map(|t| t.parse().map_err(|_| fail(format!("bad token {t:?}")))).collect()
            };
            let grid = |tokens: Vec<usize>, e: [usize; 3], m: Modality| {
                unflatten_tokens(&tokens, e, m, codebook_size).map_err(|x| fail(x.to_string()))
            };
            set.records.push(TokenRecord {
                index,
                split,
                pa: grid(numbers(&head.collect::<Vec<_>>().join(" "))?, pa, Modality::Thrx)?,
                lat: grid(numbers(parts[1])?, lat, Modality::Thrx)?,
                ct: grid(numbers(parts[2])?, ct, Modality::Ct)?,
            });
        }
        if set.records.len() != count {
            return Err(err(0, format!("header announces {count} samples, found {}", set.records.len())));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, path)
    }
}

/// Writes `tokens` one integer per line.
pub fn write_token_lines(tokens: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text: String = tokens.iter().map(|t| format!("{t}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_token_lines(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path: PathBuf = path.as_ref().into();
    read_text(&path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| Error::Text { path: path.clone(), line: i + 1, message: format!("bad token {l:?}") }))
        .collect()
}
