use crate::error::{Error, Result};

use super::AudioClip;

/// At or above this SNR the noise is dropped entirely.
pub const NOISELESS_SNR_DB: f64 = 100.0;

/// A noisy mixture and how it was made.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub clip: AudioClip,
    /// Factor applied to the noise before adding.
    pub noise_scale: f64,
    /// Peak normalization applied to the sum; 1 unless it would have clipped.
    pub gain: f64,
}

/// Adds `noise` to `clean` scaled to give `snr_db`.
pub fn mix_at_snr(clean: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<Mixture> {
    const OP: &str = "mix_at_snr";
    if clean.len() != noise.len() {
        return Err(Error::shape(OP, "samples", clean.len(), noise.len()));
    }
    if snr_db.is_nan() {
        return Err(Error::invalid(OP, "snr is NaN"));
    }
    let (pc, pn) = (clean.power(), noise.power());
    if pc == 0.0 {
        return Err(Error::invalid(OP, "clean signal has zero power"));
    }
    if pn == 0.0 {
        return Err(Error::invalid(OP, "noise has zero power"));
    }
    let noise_scale = if snr_db >= NOISELESS_SNR_DB { 0.0 } else { (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt() };
    let mut mixed: Vec<f64> = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(&c, &n)| c as f64 + noise_scale * n as f64)
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if gain != 1.0 {
        mixed.iter_mut().for_each(|v| *v = (*v * gain).clamp(-1.0, 1.0));
    }
    let clip = AudioClip::from_f64(&mixed)?.with_id(clean.id().to_string());
    Ok(Mixture { clip, noise_scale, gain })
}
