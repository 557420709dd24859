use std::path::Path;

use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Reads a RIFF WAV file. Only mono 16-bit PCM at 16 kHz is accepted.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::new(super::open(path)?)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: need mono 16-bit PCM at 16000 Hz, got {} channel(s), {} bit {:?}, {} Hz",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format,
            spec.sample_rate
        )));
    }
    let samples = reader.into_samples::<i16>().map(|s| s.map(|v| v as f32 / 32768.0)).collect::<std::result::Result<Vec<_>, _>>()?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(AudioClip::new(samples, SAMPLE_RATE)?.with_id(id))
}

/// Writes a clip as mono 16-bit PCM, rounding to the nearest code.
pub fn save_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate: clip.sample_rate(), bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::new(super::create(path)?, spec)?;
    for &s in clip.samples() {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}
