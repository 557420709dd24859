use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AudioClip, MelSegment, Origin, Stft, N_BINS, N_MELS, SAMPLE_RATE, SEGMENT_FRAMES, SEGMENT_SAMPLES};

/// Added to Mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centres equally spaced on the Mel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    centers: Vec<f64>,
    /// Row-major `[n_mels, n_bins]`.
    weights: Vec<f64>,
}

impl MelFilterbank {
    /// `n_mels` filters over `fft_bins` one-sided bins of a 16 kHz signal,
    /// spanning `f_lo..f_hi` Hz.
    pub fn new(n_mels: usize, fft_bins: usize, f_lo: f64, f_hi: f64) -> Result<Self> {
        const OP: &str = "mel_filterbank";
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if n_mels == 0 || fft_bins < 2 || n_mels >= fft_bins {
            return Err(Error::invalid(OP, format!("need 0 < n_mels < fft_bins, got {n_mels} / {fft_bins}")));
        }
        if !(0.0..nyquist).contains(&f_lo) || !(f_lo < f_hi && f_hi <= nyquist) {
            return Err(Error::invalid(OP, format!("degenerate band edges {f_lo}..{f_hi} Hz")));
        }
        let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64)).collect();
        let bin_hz = nyquist / (fft_bins - 1) as f64;
        let mut weights = vec![0.0; n_mels * fft_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..fft_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
                weights[m * fft_bins + k] = w.max(0.0);
            }
            if weights[m * fft_bins..(m + 1) * fft_bins].iter().all(|&w| w == 0.0) {
                return Err(Error::invalid(OP, format!("filter {m} ({lo:.1}..{hi:.1} Hz) falls between FFT bins")));
            }
        }
        Ok(MelFilterbank { n_mels, n_bins: fft_bins, centers: edges[1..=n_mels].to_vec(), weights })
    }

    /// 80 filters, 0 to 8000 Hz, over the 321 bins of the speech STFT.
    pub fn speech() -> Self {
        Self::new(N_MELS, N_BINS, 0.0, SAMPLE_RATE as f64 / 2.0).expect("valid constants")
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Projects a bin-major `[n_bins, frames]` power array to `[n_mels, frames]`.
    pub fn apply(&self, power: &[f64], frames: usize) -> Vec<f64> {
        assert_eq!(power.len(), self.n_bins * frames, "power layout");
        let mut out = vec![0.0; self.n_mels * frames];
        for m in 0..self.n_mels {
            let dst = &mut out[m * frames..(m + 1) * frames];
            for (k, &w) in self.row(m).iter().enumerate() {
                if w != 0.0 {
                    for (d, &p) in dst.iter_mut().zip(&power[k * frames..(k + 1) * frames]) {
                        *d += w * p;
                    }
                }
            }
        }
        out
    }
}

/// Full log-Mel spectrogram of a clip, `[80, frames]`.
pub fn log_mel_frames(clip: &AudioClip) -> Result<Tensor<f64>> {
    let spec = Stft::speech().analyze(&clip.to_f64())?;
    let mel = MelFilterbank::speech().apply(&spec.power(), spec.frames);
    Tensor::from_vec(&[N_MELS, spec.frames], mel.into_iter().map(|p| (p + LOG_FLOOR).ln()).collect())
}

/// Log-Mel spectrogram cut into consecutive 20-frame segments; a trailing
/// partial segment is dropped.
pub fn log_mel(clip: &AudioClip) -> Result<Vec<MelSegment>> {
    if clip.len() < SEGMENT_SAMPLES {
        return Err(Error::invalid("log_mel", format!("{} samples is shorter than one segment ({SEGMENT_SAMPLES})", clip.len())));
    }
    let full = log_mel_frames(clip)?;
    let frames = full.dims()[1];
    (0..frames / SEGMENT_FRAMES)
        .map(|k| {
            let t = full.narrow(1, k * SEGMENT_FRAMES, (k + 1) * SEGMENT_FRAMES)?.cast::<f32>();
            MelSegment::new(t, Origin { clip: clip.id().to_string(), frame: k * SEGMENT_FRAMES })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn filters_are_unimodal_triangles_with_rising_centres() {
        let fb = MelFilterbank::speech();
        assert_eq!((fb.n_mels(), fb.n_bins()), (80, 321));
        for m in 0..80 {
            let r = fb.row(m);
            assert!(r.iter().all(|&w| w >= 0.0));
            assert!(r.iter().sum::<f64>() > 0.0);
            let peak = (0..321).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
            assert!(r[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(r[peak..].windows(2).all(|w| w[0] >= w[1]));
        }
        assert!(fb.centers_hz().windows(2).all(|c| c[0] < c[1]));
    }

    #[test]
    fn rejects_degenerate_edges() {
        assert!(MelFilterbank::new(80, 321, 500.0, 500.0).is_err());
        assert!(MelFilterbank::new(321, 321, 0.0, 8000.0).is_err());
        assert!(MelFilterbank::new(80, 321, 0.0, 9000.0).is_err());
        // far more filters than bins in a narrow band
        assert!(MelFilterbank::new(200, 321, 0.0, 300.0).is_err());
    }

    #[test]
    fn segment_counts() {
        let one = AudioClip::new(vec![0.0; SEGMENT_SAMPLES], 16000).unwrap();
        let segs = log_mel(&one).unwrap();
        assert_eq!(segs.len(), 1);
        assert!(segs[0].values.data().iter().all(|&v| v == (LOG_FLOOR.ln() as f32)));
        let two = AudioClip::new(vec![0.0; 640 + 160 * 42], 16000).unwrap();
        assert_eq!(log_mel(&two).unwrap().len(), 2);
        assert!(log_mel(&AudioClip::new(vec![0.0; 3000], 16000).unwrap()).is_err());
    }

    #[test]
    fn gain_shifts_log_mel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..SEGMENT_SAMPLES).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let a = log_mel_frames(&AudioClip::from_f64(&x).unwrap()).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let b = log_mel_frames(&AudioClip::from_f64(&y).unwrap()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((q - p - 2.0 * 10f64.ln()).abs() < 1e-3);
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..8000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let c = AudioClip::from_f64(&x).unwrap();
        assert_eq!(log_mel(&c).unwrap(), log_mel(&c).unwrap());
    }
}
