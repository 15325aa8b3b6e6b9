//! Image exports: 8-bit PNG slices of volumes and 16-bit PGM radiographs.

use std::path::Path;

use tokenct_core::drr::{Radiograph, View};
use tokenct_core::preprocess::{HuWindow, ValueKind, Volume};

use crate::error::{Error, Result};
use crate::io::rvol::{read_rvol, write_rvol};

/// Maps [−1, 1] onto `[0, max]` with clamping.
fn window(v: f64, max: f64) -> f64 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * max).round()
}

fn unit(v: &Volume, x: f64) -> f64 {
    match v.kind {
        ValueKind::Hounsfield => HuWindow::default().to_unit(x),
        ValueKind::Mask => 2.0 * x - 1.0,
        _ => x,
    }
}

/// Pixels of the slice at `index` along `axis` (0 depth, 1 height, 2 width),
/// as rows × columns of the two remaining axes in storage order.
pub fn slice(v: &Volume, axis: usize, index: usize) -> Result<([usize; 2], Vec<f64>)> {
    let e = v.extents();
    if axis > 2 {
        return Err(tokenct_core::Error::Usage(format!("axis {axis} is not 0, 1 or 2")).into());
    }
    if index >= e[axis] {
        return Err(tokenct_core::Error::Usage(format!("slice {index} outside extent {} of axis {axis}", e[axis])).into());
    }
    let (rows, cols) = match axis {
        0 => (e[1], e[2]),
        1 => (e[0], e[2]),
        _ => (e[0], e[1]),
    };
    let mut px = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            px.push(match axis {
                0 => v.get(index, r, c),
                1 => v.get(r, index, c),
                _ => v.get(r, c, index),
            });
        }
    }
    Ok(([rows, cols], px))
}

/// 8-bit grayscale PNG bytes of one slice. Hounsfield volumes pass through
/// the default window first, masks map 0/1 to black/white.
pub fn encode_slice_png(v: &Volume, axis: usize, index: usize) -> Result<Vec<u8>> {
    let ([rows, cols], px) = slice(v, axis, index)?;
    let bytes: Vec<u8> = px.iter().map(|&x| window(unit(v, x), 255.0) as u8).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Config(format!("png encoder: {e}")))?;
        w.write_image_data(&bytes).map_err(|e| Error::Config(format!("png encoder: {e}")))?;
    }
    Ok(out)
}

pub fn export_slice_png(v: &Volume, axis: usize, index: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_slice_png(v, axis, index)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A log-normalized radiograph as a one-slice normalized volume.
pub fn radiograph_volume(r: &Radiograph) -> Result<Volume> {
    if r.log_max.is_none() {
        return Err(tokenct_core::Error::Data("only log-normalized radiographs are stored".into()).into());
    }
    Ok(Volume::new([1, r.extents[0], r.extents[1]], [1.0; 3], ValueKind::Normalized, r.pixels.clone())?)
}

pub fn volume_radiograph(v: &Volume, view: View, log_max: f64) -> Result<Radiograph> {
    let [d, h, w] = v.extents();
    if d != 1 || v.kind != ValueKind::Normalized {
        return Err(tokenct_core::Error::Data(format!("a radiograph file holds one normalized slice, found {d} of {:?}", v.kind)).into());
    }
    Ok(Radiograph { extents: [h, w], pixels: v.voxels().to_vec(), view, i0: 1.0, log_max: Some(log_max) })
}

/// Binary PGM (P5, maxval 65535, big-endian samples) of a log-normalized
/// radiograph; the comment line records view, I0 and the log range.
pub fn encode_pgm16(r: &Radiograph) -> Result<Vec<u8>> {
    let Some(lmax) = r.log_max else {
        return Err(tokenct_core::Error::Data("PGM export needs a log-normalized radiograph".into()).into());
    };
    let [rows, cols] = r.extents;
    let mut out = format!("P5\n# view={} i0={} log_max={}\n{cols} {rows}\n65535\n", r.view.name(), r.i0, lmax).into_bytes();
    for &p in &r.pixels {
        out.extend_from_slice(&(window(p, 65535.0) as u16).to_be_bytes());
    }
    Ok(out)
}

/// Writes `{stem}.pgm` and the lossless `{stem}.rvol` sidecar.
pub fn export_radiograph(r: &Radiograph, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    let pgm = stem.with_extension("pgm");
    std::fs::write(&pgm, encode_pgm16(r)?).map_err(|e| Error::io(&pgm, e))?;
    write_rvol(&radiograph_volume(r)?, stem.with_extension("rvol"))
}

pub fn read_radiograph(path: impl AsRef<Path>, view: View, log_max: f64) -> Result<Radiograph> {
    volume_radiograph(&read_rvol(path)?, view, log_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode_png(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        buf.truncate(info.buffer_size());
        (info.width, info.height, buf)
    }

    fn constant(v: f64) -> Volume {
        Volume::filled([3, 4, 5], [1.0; 3], ValueKind::Normalized, v).unwrap()
    }

    #[test]
    fn constant_volumes_export_black_and_white() {
        let (w, h, px) = decode_png(&encode_slice_png(&constant(-1.0), 0, 1).unwrap());
        assert_eq!((w, h), (5, 4));
        assert!(px.iter().all(|&p| p == 0));
        let (w, h, px) = decode_png(&encode_slice_png(&constant(1.0), 2, 4).unwrap());
        assert_eq!((w, h), (4, 3));
        assert!(px.iter().all(|&p| p == 255));
    }

    #[test]
    fn slice_export_is_deterministic_and_checked() {
        let v = Volume::new([2, 2, 2], [1.0; 3], ValueKind::Normalized, vec![-1.0, 0.0, 0.5, 1.0, 0.2, 0.3, 0.4, 0.9]).unwrap();
        assert_eq!(encode_slice_png(&v, 1, 1).unwrap(), encode_slice_png(&v, 1, 1).unwrap());
        let (_, _, px) = decode_png(&encode_slice_png(&v, 0, 0).unwrap());
        assert_eq!(px, vec![0, 128, 191, 255]);
        let err = encode_slice_png(&v, 0, 2).unwrap_err();
        assert!(matches!(err, Error::Core(tokenct_core::Error::Usage(_))));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn pgm_header_and_samples() {
        let r = Radiograph { extents: [1, 3], pixels: vec![-1.0, 0.0, 1.0], view: View::Lateral, i0: 1.0, log_max: Some(12.0) };
        let b = encode_pgm16(&r).unwrap();
        let head = b"P5\n# view=lat i0=1 log_max=12\n3 1\n65535\n";
        assert_eq!(&b[..head.len()], head);
        assert_eq!(&b[head.len()..], &[0, 0, 0x80, 0x00, 0xff, 0xff]);
    }

    #[test]
    fn radiograph_sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f64> = (0..12).map(|i| (i as f32 / 6.0 - 1.0) as f64).collect();
        let r = Radiograph { extents: [3, 4], pixels: px, view: View::PosteriorAnterior, i0: 1.0, log_max: Some(12.0) };
        let stem = dir.path().join("r");
        export_radiograph(&r, &stem).unwrap();
        assert!(stem.with_extension("pgm").exists());
        let back = read_radiograph(stem.with_extension("rvol"), View::PosteriorAnterior, 12.0).unwrap();
        assert_eq!(back, r);
    }
}
