use crate::dsp::MelSegment;
use crate::error::{Error, Result};

/// Bound on the magnitude of [`si_sdr`].
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB, clamped to ±60.
pub fn si_sdr(clean: &[f64], processed: &[f64]) -> Result<f64> {
    const OP: &str = "si_sdr";
    if clean.len() != processed.len() {
        return Err(Error::shape(OP, "samples", clean.len(), processed.len()));
    }
    let ss: f64 = clean.iter().map(|v| v * v).sum();
    let pp: f64 = processed.iter().map(|v| v * v).sum();
    if ss == 0.0 || pp == 0.0 {
        return Err(Error::invalid(OP, "zero-energy input"));
    }
    let alpha = clean.iter().zip(processed).map(|(s, p)| s * p).sum::<f64>() / ss;
    let target = alpha * alpha * ss;
    let residual: f64 = clean.iter().zip(processed).map(|(s, p)| (p - alpha * s).powi(2)).sum();
    let db = if residual == 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Root-mean-square difference of two log-Mel segments.
pub fn log_spectral_distance(a: &MelSegment, b: &MelSegment) -> Result<f64> {
    if a.values.dims() != b.values.dims() {
        return Err(Error::shape("log_spectral_distance", "dims", format!("{:?}", a.values.dims()), format!("{:?}", b.values.dims())));
    }
    let n = a.values.len() as f64;
    let sq: f64 = a.values.data().iter().zip(b.values.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok((sq / n).sqrt())
}
