//! Short-time objective intelligibility (Taal et al., 2011).

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Internal sample rate of the measure.
pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_CENTER_HZ: f64 = 150.0;
/// Frames per short-time segment (384 ms).
pub const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYNAMIC_RANGE_DB: f64 = 40.0;
const TINY: f64 = 1e-12;

/// Windowed-sinc rational resampling. The output has
/// `ceil(len * to / from)` samples.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let cutoff = (to as f64 / from as f64).min(1.0);
    const ZEROS: f64 = 16.0;
    let half = (ZEROS / cutoff).ceil() as isize;
    let n_out = (x.len() as u64 * to as u64).div_ceil(from as u64) as usize;
    (0..n_out)
        .map(|m| {
            let t = m as f64 * ratio;
            let centre = t.floor() as isize;
            let mut acc = 0.0;
            for n in (centre - half).max(0)..=(centre + half).min(x.len() as isize - 1) {
                let tau = t - n as f64;
                let arg = cutoff * tau;
                let sinc = if arg == 0.0 { 1.0 } else { (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg) };
                let win = 0.5 + 0.5 * (std::f64::consts::PI * tau / (half as f64 + 1.0)).cos();
                acc += x[n as usize] * cutoff * sinc * win;
            }
            acc
        })
        .collect()
}

/// `N`-point Hann window without the zero end points (a length `N + 2`
/// symmetric window with its ends dropped).
fn window() -> Vec<f64> {
    (1..=FRAME).map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / (FRAME + 1) as f64).cos()).collect()
}

/// Drops frames whose clean energy is more than 40 dB below the loudest
/// clean frame and overlap-adds the remaining frames of both signals.
fn remove_silent_frames(x: &[f64], y: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts: Vec<usize> = (0..).map(|k| k * HOP).take_while(|s| s + FRAME <= x.len()).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| 20.0 * (x[s..s + FRAME].iter().zip(w).map(|(v, w)| (v * w).powi(2)).sum::<f64>().sqrt() + TINY).log10())
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts.iter().zip(&energy).filter(|(_, &e)| e > max - DYNAMIC_RANGE_DB).map(|(&s, _)| s).collect();
    let len = if kept.is_empty() { 0 } else { (kept.len() - 1) * HOP + FRAME };
    let (mut xs, mut ys) = (vec![0.0; len], vec![0.0; len]);
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..FRAME {
            xs[j * HOP + i] += x[s + i] * w[i];
            ys[j * HOP + i] += y[s + i] * w[i];
        }
    }
    (xs, ys)
}

/// One-third octave band envelopes `[band][frame]`.
fn band_envelopes(x: &[f64], w: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let frames = if x.len() < FRAME { 0 } else { (x.len() - FRAME) / HOP + 1 };
    let mut out = vec![Vec::with_capacity(frames); BANDS];
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for f in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for i in 0..FRAME {
            buf[i] = Complex64::new(x[f * HOP + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            out[b].push(buf[lo..hi].iter().map(Complex64::norm_sqr).sum::<f64>().sqrt());
        }
    }
    out
}

/// Bin ranges `[lo, hi)` of the 15 one-third octave bands from 150 Hz.
fn third_octave_bins() -> Vec<(usize, usize)> {
    let freqs: Vec<f64> = (0..=NFFT / 2).map(|k| k as f64 * STOI_RATE as f64 / NFFT as f64).collect();
    let nearest = |f: f64| (0..freqs.len()).min_by(|&a, &b| (freqs[a] - f).abs().total_cmp(&(freqs[b] - f).abs())).unwrap();
    (0..BANDS)
        .map(|k| {
            let lo = MIN_CENTER_HZ * 2f64.powf((2 * k) as f64 / 6.0 - 1.0 / 6.0);
            let hi = MIN_CENTER_HZ * 2f64.powf((2 * k) as f64 / 6.0 + 1.0 / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

fn centred_norm(v: &mut [f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// STOI of `processed` against `clean`, in `[0, 1]` up to the sign of the
/// correlations (unrelated signals can score slightly below zero).
pub fn stoi(clean: &AudioClip, processed: &AudioClip) -> Result<f64> {
    stoi_f64(&clean.to_f64(), &processed.to_f64(), clean.sample_rate())
}

pub fn stoi_f64(clean: &[f64], processed: &[f64], rate: u32) -> Result<f64> {
    const OP: &str = "stoi";
    if clean.len() != processed.len() {
        return Err(Error::shape(OP, "samples", clean.len(), processed.len()));
    }
    if clean.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid(OP, "silent reference"));
    }
    let x = resample(clean, rate, STOI_RATE);
    let y = resample(processed, rate, STOI_RATE);
    let w = window();
    let (x, y) = remove_silent_frames(&x, &y, &w);
    let bands = third_octave_bins();
    let xe = band_envelopes(&x, &w, &bands);
    let ye = band_envelopes(&y, &w, &bands);
    let frames = xe[0].len();
    if frames < SEGMENT {
        return Err(Error::invalid(OP, format!("{frames} active frames, need {SEGMENT} (384 ms at 10 kHz)")));
    }
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT..=frames {
        for b in 0..BANDS {
            let xs = &xe[b][m - SEGMENT..m];
            let ys = &ye[b][m - SEGMENT..m];
            let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            count += 1;
            // a band with no energy in either signal carries no correlation
            if ny == 0.0 {
                continue;
            }
            let alpha = nx / ny;
            let mut yc: Vec<f64> = ys.iter().zip(xs).map(|(&y, &x)| (y * alpha).min(x * clip)).collect();
            let mut xc = xs.to_vec();
            let (nxc, nyc) = (centred_norm(&mut xc), centred_norm(&mut yc));
            if nxc > 0.0 && nyc > 0.0 {
                total += xc.iter().zip(&yc).map(|(a, b)| a * b).sum::<f64>() / nxc / nyc;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_edges() {
        let b = third_octave_bins();
        assert_eq!(b.len(), 15);
        // 150 Hz centre: 133.6..168.4 Hz, bins of 19.53 Hz
        assert_eq!(b[0], (7, 9));
        assert!(b.windows(2).all(|p| p[0].1 <= p[1].0 + 1 && p[0].0 < p[1].0));
        assert!(b[14].1 <= 257);
    }

    #[test]
    fn resampling_keeps_low_tones_and_dc() {
        let x: Vec<f64> = (0..1600).map(|i| (std::f64::consts::TAU * 440.0 * i as f64 / 16000.0).sin()).collect();
        let y = resample(&x, 16000, 10000);
        assert_eq!(y.len(), 1000);
        for (m, v) in y.iter().enumerate().skip(60).take(880) {
            let want = (std::f64::consts::TAU * 440.0 * m as f64 / 10000.0).sin();
            assert!((v - want).abs() < 2e-3, "{m}: {v} vs {want}");
        }
        let dc = resample(&vec![0.5; 800], 16000, 10000);
        assert!(dc[100..400].iter().all(|v| (v - 0.5).abs() < 2e-3));
    }

    #[test]
    fn resampling_rejects_aliases() {
        // 7 kHz is above the 5 kHz output Nyquist
        let x: Vec<f64> = (0..3200).map(|i| (std::f64::consts::TAU * 7000.0 * i as f64 / 16000.0).sin()).collect();
        let y = resample(&x, 16000, 10000);
        let rms = (y[200..1800].iter().map(|v| v * v).sum::<f64>() / 1600.0).sqrt();
        assert!(rms < 0.02, "{rms}");
    }

    #[test]
    fn silent_frames_are_dropped() {
        let w = window();
        let mut x = vec![0.0; 128 * 20];
        for (i, v) in x.iter_mut().enumerate().take(128 * 8) {
            *v = (i as f64 * 0.3).sin();
        }
        let (xs, ys) = remove_silent_frames(&x, &x, &w);
        assert_eq!(xs.len(), 7 * 128 + 256);
        assert_eq!(xs, ys);
    }

    #[test]
    fn rejects_short_and_silent() {
        let x: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.1).sin() * 0.3).collect();
        assert!(stoi_f64(&x, &x, 16000).is_err());
        assert!(stoi_f64(&[0.0; 16000], &[0.1; 16000], 16000).is_err());
        assert!(stoi_f64(&x, &x[1..], 16000).is_err());
    }
}
