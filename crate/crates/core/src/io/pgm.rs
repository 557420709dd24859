use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::dsp::GrayImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `frame_000042.pgm`
pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.pgm")
}

fn header_tokens(bytes: &[u8], want: usize) -> Option<(Vec<usize>, usize)> {
    let mut out = Vec::with_capacity(want);
    let mut i = 2;
    while out.len() < want {
        match bytes.get(i)? {
            b'#' => {
                while *bytes.get(i)? != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            c if c.is_ascii_digit() => {
                let start = i;
                while bytes.get(i).is_some_and(u8::is_ascii_digit) {
                    i += 1;
                }
                out.push(std::str::from_utf8(&bytes[start..i]).ok()?.parse().ok()?);
            }
            _ => return None,
        }
    }
    // exactly one whitespace byte separates the header from the raster
    bytes.get(i).filter(|c| c.is_ascii_whitespace())?;
    Some((out, i + 1))
}

/// Reads a binary (P5) PGM with maxval 255; pixels are scaled to `[0, 1]`.
pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    super::open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let ([width, height, maxval], start) = header_tokens(&bytes, 3)
        .and_then(|(t, s)| Some(([*t.first()?, *t.get(1)?, *t.get(2)?], s)))
        .ok_or_else(|| bad("malformed header"))?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, only 255 is supported")));
    }
    let raster = &bytes[start..];
    if raster.len() != width * height {
        return Err(bad(&format!("{} raster bytes for {width}x{height}", raster.len())));
    }
    GrayImage::new(height, width, raster.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Writes `[0, 1]` pixels (clamped) as an 8-bit P5 PGM.
pub fn save_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut w = super::create(path)?;
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads `frame_000000.pgm`, `frame_000001.pgm`, ... until the first gap.
/// A directory without `frame_000000.pgm` is an error, as is any other
/// `frame_*.pgm` past the gap.
pub fn load_frame_dir(dir: &Path) -> Result<Vec<GrayImage>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let name = e.map_err(|e| Error::io(dir, e))?.file_name().to_string_lossy().into_owned();
        if name.starts_with("frame_") && name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!("{}: no frame_%06d.pgm files", dir.display())));
    }
    let mut frames = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if *name != frame_name(i) {
            return Err(Error::Format(format!("{}: expected {} but found {name}", dir.display(), frame_name(i))));
        }
        frames.push(load_pgm(&dir.join(name))?);
    }
    Ok(frames)
}

pub fn save_frame_dir(dir: &Path, frames: &[GrayImage]) -> Result<Vec<PathBuf>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(frame_name(i));
            save_pgm(&p, f).map(|_| p)
        })
        .collect()
}

/// Min-max scales a `[rows, cols]` matrix into an image, with row 0 at the
/// bottom so low Mel bins sit low as in a spectrogram plot.
pub fn spectrogram_image<T: Scalar>(t: &Tensor<T>) -> Result<GrayImage> {
    let [rows, cols] = *t.dims() else {
        return Err(Error::shape("spectrogram_image", "rank", 2, t.rank()));
    };
    let (lo, hi) = t.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut data = Vec::with_capacity(rows * cols);
    for r in (0..rows).rev() {
        data.extend(t.data()[r * cols..(r + 1) * cols].iter().map(|v| ((v.as_f64() - lo) / span) as f32));
    }
    GrayImage::new(rows, cols, data)
}
