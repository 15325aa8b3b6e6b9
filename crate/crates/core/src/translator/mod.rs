//! Token sequences and the causal transformer that translates radiograph
//! tokens into CT tokens.
//!
//! All tokens share one index space of size `2N + 1`: radiograph tokens keep
//! their codebook index in `[0, N)`, CT tokens are shifted into `[N, 2N)` and
//! `2N` is the start-of-sequence token. A sequence is laid out as
//! `[SOS][PA][LAT][CT]`, each grid flattened width fastest, then height, then
//! depth.

mod generate;
mod model;

pub use generate::{IncrementalDecoder, Strategy};
pub use model::{Translator, TranslatorConfig};

use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{bail, Result};
use crate::vq::{Modality, TokenGrid};

/// Flattening order of every token grid and voxel payload.
pub const RASTER_ORDER: &str = "width,height,depth";

/// Grid indices in raster order.
pub fn flatten_tokens(g: &TokenGrid) -> Vec<usize> {
    g.indices().to_vec()
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(tokens: &[usize], extents: [usize; 3], modality: Modality, codebook_size: usize) -> Result<TokenGrid> {
    TokenGrid::new(extents, tokens.to_vec(), modality, codebook_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    Sos,
    Pa,
    Lat,
    Ct,
}

/// Grid extents (`[h, w, d]`) of the three spans and the codebook size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub pa: [usize; 3],
    pub lat: [usize; 3],
    pub ct: [usize; 3],
    pub codebook_size: usize,
}

impl SequenceLayout {
    pub fn new(pa: [usize; 3], lat: [usize; 3], ct: [usize; 3], codebook_size: usize) -> Result<Self> {
        if [pa, lat, ct].iter().any(|e| e.contains(&0)) {
            bail!(Usage, "span extents must be positive");
        }
        if codebook_size < 2 {
            bail!(Usage, "codebook size must be at least 2");
        }
        Ok(Self { pa, lat, ct, codebook_size })
    }

    /// 4×4 radiograph grids and a 4×4×4 CT grid over 256 entries.
    pub fn desk() -> Self {
        Self { pa: [4, 4, 1], lat: [4, 4, 1], ct: [4, 4, 4], codebook_size: 256 }
    }

    /// 16×16 radiograph grids and a 16×16×16 CT grid over 8192 entries.
    pub fn full_scale() -> Self {
        Self { pa: [16, 16, 1], lat: [16, 16, 1], ct: [16, 16, 16], codebook_size: 8192 }
    }

    fn count(e: [usize; 3]) -> usize {
        e.iter().product()
    }

    pub fn len(&self) -> usize {
        1 + Self::count(self.pa) + Self::count(self.lat) + Self::count(self.ct)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sos(&self) -> usize {
        2 * self.codebook_size
    }

    pub fn vocab_size(&self) -> usize {
        2 * self.codebook_size + 1
    }

    /// Positions covered by `span`.
    pub fn positions(&self, span: Span) -> Range<usize> {
        let pa_end = 1 + Self::count(self.pa);
        let lat_end = pa_end + Self::count(self.lat);
        match span {
            Span::Sos => 0..1,
            Span::Pa => 1..pa_end,
            Span::Lat => pa_end..lat_end,
            Span::Ct => lat_end..self.len(),
        }
    }

    pub fn span_at(&self, position: usize) -> Option<Span> {
        [Span::Sos, Span::Pa, Span::Lat, Span::Ct].into_iter().find(|&s| self.positions(s).contains(&position))
    }

    /// Token values allowed in `span`.
    pub fn vocabulary(&self, span: Span) -> Range<usize> {
        let n = self.codebook_size;
        match span {
            Span::Sos => 2 * n..2 * n + 1,
            Span::Pa | Span::Lat => 0..n,
            Span::Ct => n..2 * n,
        }
    }

    /// Checks that `tokens` is a valid prefix of a sequence with this layout.
    pub fn validate_prefix(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.len() {
            bail!(Usage, "{} tokens exceed the sequence length {}", tokens.len(), self.len());
        }
        for (p, &t) in tokens.iter().enumerate() {
            let span = self.span_at(p).expect("within length");
            if !self.vocabulary(span).contains(&t) {
                bail!(Index, "token {t} at position {p} outside the {:?} vocabulary {:?}", span, self.vocabulary(span));
            }
        }
        Ok(())
    }
}

/// `[SOS][PA][LAT][CT]` tokens in the shared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslationSequence {
    tokens: Vec<usize>,
    layout: SequenceLayout,
}

/// Concatenates the three grids behind a start token, shifting CT tokens by N.
pub fn build_sequence(pa: &TokenGrid, lat: &TokenGrid, ct: &TokenGrid) -> Result<TranslationSequence> {
    for (g, m, what) in [(pa, Modality::Thrx, "PA"), (lat, Modality::Thrx, "lateral"), (ct, Modality::Ct, "CT")] {
        if g.modality() != m {
            bail!(Usage, "{what} grid has modality {:?}, expected {:?}", g.modality(), m);
        }
    }
    let n = ct.codebook_size();
    if pa.codebook_size() != n || lat.codebook_size() != n {
        bail!(Usage, "radiograph and CT codebooks differ in size");
    }
    let layout = SequenceLayout::new(pa.extents(), lat.extents(), ct.extents(), n)?;
    let mut tokens = Vec::with_capacity(layout.len());
    tokens.push(layout.sos());
    tokens.extend(flatten_tokens(pa));
    tokens.extend(flatten_tokens(lat));
    tokens.extend(flatten_tokens(ct).into_iter().map(|t| t + n));
    Ok(TranslationSequence { tokens, layout })
}

impl TranslationSequence {
    pub fn from_tokens(tokens: Vec<usize>, layout: SequenceLayout) -> Result<Self> {
        if tokens.len() != layout.len() {
            bail!(Usage, "{} tokens for a sequence of length {}", tokens.len(), layout.len());
        }
        layout.validate_prefix(&tokens)?;
        Ok(Self { tokens, layout })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span(&self, span: Span) -> &[usize] {
        &self.tokens[self.layout.positions(span)]
    }

    /// Splits back into PA, lateral and CT grids with CT tokens unshifted.
    pub fn grids(&self) -> Result<(TokenGrid, TokenGrid, TokenGrid)> {
        let l = &self.layout;
        let n = l.codebook_size;
        let pa = unflatten_tokens(self.span(Span::Pa), l.pa, Modality::Thrx, n)?;
        let lat = unflatten_tokens(self.span(Span::Lat), l.lat, Modality::Thrx, n)?;
        let ct: Vec<usize> = self.span(Span::Ct).iter().map(|t| t - n).collect();
        let ct = unflatten_tokens(&ct, l.ct, Modality::Ct, n)?;
        Ok((pa, lat, ct))
    }
}
