//! Audio and video front end: STFT, Mel projection, SNR mixing, frame
//! resizing and alignment of model input segments.

mod clip;
mod image;
mod mel;
mod mix;
mod segments;
mod stft;

pub use clip::AudioClip;
pub use image::{bilinear_resize, GrayImage};
pub use mel::{hz_to_mel, log_mel, log_mel_frames, mel_to_hz, MelFilterbank, LOG_FLOOR};
pub use mix::{mix_at_snr, Mixture, NOISELESS_SNR_DB};
pub use segments::{loop_to_len, make_segment_pairs, pair_segments, MelSegment, Origin, SegmentTriple, VideoSegment, VIDEO_FPS, VIDEO_FRAMES, VIDEO_SIZE};
pub use stft::{hann_symmetric, stft, Spectrogram, Stft};

pub const SAMPLE_RATE: u32 = 16_000;
/// 40 ms analysis window.
pub const WIN_LEN: usize = 640;
/// 10 ms frame shift.
pub const HOP: usize = 160;
pub const N_FFT: usize = WIN_LEN;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 80;
pub const SEGMENT_FRAMES: usize = 20;
/// Samples spanned by exactly one segment: `640 + 160 * 19`.
pub const SEGMENT_SAMPLES: usize = WIN_LEN + HOP * (SEGMENT_FRAMES - 1);
