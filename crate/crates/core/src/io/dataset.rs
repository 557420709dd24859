use std::path::Path;

use crate::dsp::{GrayImage, MelSegment, Origin, SegmentTriple, VideoSegment};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{load_frame_dir, load_mten, save_mten};

pub const NOISY_FILE: &str = "noisy.mten";
pub const VIDEO_FILE: &str = "video.mten";
pub const CLEAN_FILE: &str = "clean.mten";

fn stack(items: impl Iterator<Item = Tensor<f32>>, dims: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend_from_slice(dims);
    Tensor::from_vec(&full, data)
}

/// Writes `noisy.mten` `[N, 80, 20]`, `video.mten` `[N, 5, 80, 80]` and
/// `clean.mten` `[N, 80, 20]`.
pub fn save_triples(dir: &Path, triples: &[SegmentTriple]) -> Result<()> {
    if triples.is_empty() {
        return Err(Error::invalid("save_triples", "no triples"));
    }
    save_mten(&dir.join(NOISY_FILE), &stack(triples.iter().map(|t| t.noisy.values.clone()), &[80, 20])?)?;
    save_mten(&dir.join(VIDEO_FILE), &stack(triples.iter().map(|t| t.video.frames.clone()), &[5, 80, 80])?)?;
    save_mten(&dir.join(CLEAN_FILE), &stack(triples.iter().map(|t| t.clean.values.clone()), &[80, 20])?)
}

/// Reads a directory written by [`save_triples`].
pub fn load_triples(dir: &Path) -> Result<Vec<SegmentTriple>> {
    let noisy = load_mten(&dir.join(NOISY_FILE))?;
    let video = load_mten(&dir.join(VIDEO_FILE))?;
    let clean = load_mten(&dir.join(CLEAN_FILE))?;
    let n = noisy.dims()[0];
    for (name, t, tail) in [(NOISY_FILE, &noisy, &[80, 20][..]), (VIDEO_FILE, &video, &[5, 80, 80][..]), (CLEAN_FILE, &clean, &[80, 20][..])] {
        if t.rank() != tail.len() + 1 || &t.dims()[1..] != tail || t.dims()[0] != n {
            return Err(Error::Format(format!("{}: {name} has dims {:?}, expected [{n}, {tail:?}]", dir.display(), t.dims())));
        }
    }
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (0..n)
        .map(|i| {
            let origin = Origin { clip: id.clone(), frame: i };
            Ok(SegmentTriple {
                noisy: MelSegment::new(noisy.narrow(0, i, i + 1)?.reshape(&[80, 20])?, origin.clone())?,
                video: VideoSegment::new(video.narrow(0, i, i + 1)?.reshape(&[5, 80, 80])?, origin.clone())?,
                clean: MelSegment::new(clean.narrow(0, i, i + 1)?.reshape(&[80, 20])?, origin)?,
            })
        })
        .collect()
}

/// Loads mouth frames from a `frame_%06d.pgm` directory or an MTEN tensor
/// `[T, H, W]` with values in `[0, 1]`.
pub fn load_video(path: &Path) -> Result<Vec<GrayImage>> {
    if path.is_dir() {
        return load_frame_dir(path);
    }
    let t = load_mten(path)?;
    let [frames, h, w] = *t.dims() else {
        return Err(Error::Format(format!("{}: video tensor must be [T, H, W], got {:?}", path.display(), t.dims())));
    };
    (0..frames).map(|f| GrayImage::new(h, w, t.data()[f * h * w..(f + 1) * h * w].to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::synth_dataset;

    #[test]
    fn triples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(4, 3).unwrap();
        save_triples(dir.path(), &data).unwrap();
        let back = load_triples(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.noisy.values, b.noisy.values);
            assert_eq!(a.video.frames, b.video.frames);
            assert_eq!(a.clean.values, b.clean.values);
        }
        std::fs::remove_file(dir.path().join(CLEAN_FILE)).unwrap();
        assert!(load_triples(dir.path()).is_err());
    }

    #[test]
    fn video_from_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mten");
        save_mten(&p, &Tensor::<f32>::full(&[6, 4, 3], 0.25)).unwrap();
        let frames = load_video(&p).unwrap();
        assert_eq!(frames.len(), 6);
        assert_eq!((frames[0].height, frames[0].width), (4, 3));
        save_mten(&p, &Tensor::<f32>::full(&[6, 4], 0.25)).unwrap();
        assert!(load_video(&p).is_err());
    }
}
