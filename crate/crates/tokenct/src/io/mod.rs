//! On-disk formats. Everything is little-endian `f32` except the PGM export,
//! whose samples are big-endian as that format requires.

pub mod checkpoint;
pub mod export;
pub mod rvol;
pub mod text;

pub use checkpoint::Checkpoint;
pub use export::{export_radiograph, export_slice_png, read_radiograph};
pub use rvol::{read_rvol, write_rvol};
pub use text::{Config, TokenRecord, TokenSet};
