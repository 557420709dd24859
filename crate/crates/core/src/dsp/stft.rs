use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

use super::{AudioClip, HOP, N_FFT, WIN_LEN};

/// `w[n] = 0.5 (1 - cos(2 pi n / (N - 1)))`.
pub fn hann_symmetric(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (n - 1) as f64).cos())).collect()
}

/// One-sided complex spectrogram, stored bin-major: `data[bin * frames + frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.frames + frame]
    }

    /// `|X|^2`, same layout.
    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Short-time Fourier transform with a fixed window, FFT size and hop.
#[derive(Clone)]
pub struct Stft {
    window: Vec<f64>,
    n_fft: usize,
    hop: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("win", &self.window.len()).field("n_fft", &self.n_fft).field("hop", &self.hop).finish()
    }
}

impl Stft {
    pub fn new(window: Vec<f64>, n_fft: usize, hop: usize) -> Result<Self> {
        if window.is_empty() || window.len() > n_fft || hop == 0 {
            return Err(Error::invalid("stft", format!("window {} / n_fft {n_fft} / hop {hop}", window.len())));
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n_fft);
        let inverse = planner.plan_fft_inverse(n_fft);
        Ok(Stft { window, n_fft, hop, forward, inverse })
    }

    /// 640-sample symmetric Hann, 640-point FFT, 160-sample hop.
    pub fn speech() -> Self {
        Self::new(hann_symmetric(WIN_LEN), N_FFT, HOP).expect("valid constants")
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// `1 + floor((len - win) / hop)` frames, or an error when `len < win`.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if len < self.window.len() {
            return Err(Error::invalid("stft", format!("signal of {len} samples is shorter than one window ({})", self.window.len())));
        }
        Ok(1 + (len - self.window.len()) / self.hop)
    }

    pub fn analyze(&self, x: &[f64]) -> Result<Spectrogram> {
        let frames = self.frame_count(x.len())?;
        let bins = self.bins();
        let mut data = vec![Complex64::default(); bins * frames];
        let mut buf = vec![Complex64::default(); self.n_fft];
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::default());
            let start = t * self.hop;
            for (i, w) in self.window.iter().enumerate() {
                buf[i] = Complex64::new(x[start + i] * w, 0.0);
            }
            self.forward.process(&mut buf);
            for b in 0..bins {
                data[b * frames + t] = buf[b];
            }
        }
        Ok(Spectrogram { bins, frames, data })
    }

    /// Weighted overlap-add inverse of [`analyze`](Self::analyze). Samples not
    /// covered by any window are zero.
    pub fn synthesize(&self, spec: &Spectrogram, len: usize) -> Result<Vec<f64>> {
        if spec.bins != self.bins() {
            return Err(Error::shape("istft", "bins", self.bins(), spec.bins));
        }
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::default(); self.n_fft];
        for t in 0..spec.frames {
            for b in 0..spec.bins {
                buf[b] = spec.at(b, t);
            }
            for b in spec.bins..self.n_fft {
                buf[b] = buf[self.n_fft - b].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for (i, w) in self.window.iter().enumerate() {
                if start + i >= len {
                    break;
                }
                out[start + i] += buf[i].re / self.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            } else {
                *o = 0.0;
            }
        }
        Ok(out)
    }
}

/// Speech STFT of a clip: 321 bins by `1 + floor((len - 640) / 160)` frames.
pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    Stft::speech().analyze(&clip.to_f64())
}
