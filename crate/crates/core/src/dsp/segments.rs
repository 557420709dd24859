use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{bilinear_resize, log_mel, mix_at_snr, AudioClip, GrayImage, N_MELS, SEGMENT_FRAMES};

pub const VIDEO_FPS: usize = 25;
/// Video frames per segment: 200 ms at 25 fps.
pub const VIDEO_FRAMES: usize = 5;
pub const VIDEO_SIZE: usize = 80;

/// Where a segment came from: clip id and first frame index (STFT frames
/// for audio, video frames for video).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Origin {
    pub clip: String,
    pub frame: usize,
}

/// An `[80, 20]` log-Mel block.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSegment {
    pub values: Tensor<f32>,
    pub origin: Origin,
}

impl MelSegment {
    pub fn new(values: Tensor<f32>, origin: Origin) -> Result<Self> {
        if values.dims() != [N_MELS, SEGMENT_FRAMES] {
            return Err(Error::shape("mel_segment", "dims", "[80, 20]", format!("{:?}", values.dims())));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite { op: "mel_segment", what: "values".into() });
        }
        Ok(MelSegment { values, origin })
    }
}

/// Five `80×80` mouth frames in `[0, 1]`, stored `[5, 80, 80]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSegment {
    pub frames: Tensor<f32>,
    pub origin: Origin,
}

impl VideoSegment {
    pub fn new(frames: Tensor<f32>, origin: Origin) -> Result<Self> {
        if frames.dims() != [VIDEO_FRAMES, VIDEO_SIZE, VIDEO_SIZE] {
            return Err(Error::shape("video_segment", "dims", "[5, 80, 80]", format!("{:?}", frames.dims())));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("video_segment", format!("pixel {v} outside [0, 1]")));
        }
        Ok(VideoSegment { frames, origin })
    }

    /// Builds a segment from five images of any size of at least 2×2.
    pub fn from_images(images: &[GrayImage], origin: Origin) -> Result<Self> {
        if images.len() != VIDEO_FRAMES {
            return Err(Error::shape("video_segment", "frames", VIDEO_FRAMES, images.len()));
        }
        let mut data = Vec::with_capacity(VIDEO_FRAMES * VIDEO_SIZE * VIDEO_SIZE);
        for img in images {
            if (img.height, img.width) == (VIDEO_SIZE, VIDEO_SIZE) {
                data.extend_from_slice(&img.data);
            } else {
                data.extend(bilinear_resize(img, VIDEO_SIZE, VIDEO_SIZE)?.data);
            }
        }
        Self::new(Tensor::from_vec(&[VIDEO_FRAMES, VIDEO_SIZE, VIDEO_SIZE], data)?, origin)
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTriple {
    pub noisy: MelSegment,
    pub video: VideoSegment,
    pub clean: MelSegment,
}

/// Repeats (or crops) `x` to exactly `len` samples.
pub fn loop_to_len(x: &[f32], len: usize) -> Vec<f32> {
    if x.is_empty() {
        return vec![0.0; len];
    }
    x.iter().copied().cycle().take(len).collect()
}

/// Cuts an already noisy clip into log-Mel segments and pairs segment `k`
/// with video frames `5k..5k+5`.
pub fn pair_segments(noisy: &AudioClip, frames: &[GrayImage]) -> Result<Vec<(MelSegment, VideoSegment)>> {
    let mel = log_mel(noisy)?;
    let video_segments = frames.len() / VIDEO_FRAMES;
    if mel.len().abs_diff(video_segments) > 1 {
        return Err(Error::invalid(
            "pair_segments",
            format!("audio gives {} segments but {} video frames give {}", mel.len(), frames.len(), video_segments),
        ));
    }
    mel.into_iter()
        .take(video_segments)
        .enumerate()
        .map(|(k, m)| {
            let origin = Origin { clip: m.origin.clip.clone(), frame: k * VIDEO_FRAMES };
            Ok((m, VideoSegment::from_images(&frames[k * VIDEO_FRAMES..(k + 1) * VIDEO_FRAMES], origin)?))
        })
        .collect()
}

/// Mixes `noise` (looped or cropped to the clean length) into `clean` and
/// pairs audio segment `k` with video frames `5k..5k+5`.
pub fn make_segment_pairs(clean: &AudioClip, noise: &AudioClip, frames: &[GrayImage], snr_db: f64) -> Result<Vec<SegmentTriple>> {
    let noise = AudioClip::new(loop_to_len(noise.samples(), clean.len()), clean.sample_rate())?.with_id(noise.id().to_string());
    let noisy = mix_at_snr(clean, &noise, snr_db)?.clip;
    let pairs = pair_segments(&noisy, frames)?;
    let clean_mel = log_mel(clean)?;
    Ok(pairs.into_iter().zip(clean_mel).map(|((noisy, video), clean)| SegmentTriple { noisy, video, clean }).collect())
}
