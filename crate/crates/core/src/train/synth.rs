use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::dsp::{bilinear_resize, make_segment_pairs, mix_at_snr, AudioClip, GrayImage, SegmentTriple, SAMPLE_RATE, SEGMENT_SAMPLES, VIDEO_FPS, VIDEO_SIZE};
use crate::error::{Error, Result};

/// Interference type for synthetic mixtures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// Low-pass filtered white noise.
    Broadband,
    /// A handful of steady sinusoids.
    Tonal,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Broadband => "broadband",
            NoiseKind::Tonal => "tonal",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "broadband" => Ok(NoiseKind::Broadband),
            "tonal" => Ok(NoiseKind::Tonal),
            _ => Err(Error::invalid("noise", format!("unknown noise kind `{s}` (expected broadband or tonal)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub snr_range_db: (f64, f64),
    pub noise: NoiseKind,
    /// Audio samples per generated clip.
    pub samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { snr_range_db: (-10.0, 10.0), noise: NoiseKind::Broadband, samples: SEGMENT_SAMPLES }
    }
}

/// One generated speaker clip with its interference, mixture and mouth video.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clean: AudioClip,
    pub noise: AudioClip,
    pub noisy: AudioClip,
    pub snr_db: f64,
    pub noise_scale: f64,
    pub gain: f64,
    /// 80×80 mouth frames at 25 fps.
    pub frames: Vec<GrayImage>,
}

impl SynthClip {
    pub fn triples(&self) -> Result<Vec<SegmentTriple>> {
        make_segment_pairs(&self.clean, &self.noise, &self.frames, self.snr_db)
    }
}

const SOURCE_SIDE: usize = 128;
/// Room-noise floor under the synthetic voice, about 54 dB below its peak.
const FLOOR_RMS: f64 = 1e-3;
const SAMPLES_PER_FRAME: usize = SAMPLE_RATE as usize / VIDEO_FPS;

fn speech(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let sr = SAMPLE_RATE as f64;
    let f0 = rng.gen_range(100.0..220.0);
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_phase = rng.gen_range(0.0..TAU);
    let count = rng.gen_range(2..=4);
    let mut orders: Vec<usize> = (1..=8).collect();
    for i in 0..count {
        let j = rng.gen_range(i..orders.len());
        orders.swap(i, j);
    }
    let harmonics: Vec<(f64, f64, f64)> =
        orders[..count].iter().map(|&k| (k as f64, rng.gen_range(0.3..1.0) / k as f64, rng.gen_range(0.0..TAU))).collect();
    let syllable = rng.gen_range(3.0..6.0);
    let env_phase = rng.gen_range(0.0..TAU);

    let mut phase = 0.0;
    let mut x = Vec::with_capacity(n);
    let mut env = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        phase += TAU * f0 * (1.0 + 0.03 * (TAU * vib_rate * t + vib_phase).sin()) / sr;
        let e = (0.5 + 0.5 * (TAU * syllable * t + env_phase).sin()).powi(2);
        let s: f64 = harmonics.iter().map(|&(k, a, p)| a * (k * phase + p).sin()).sum();
        env.push(e);
        x.push(e * s);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    let floor = FLOOR_RMS * 3f64.sqrt();
    x.iter_mut().for_each(|v| *v += rng.gen_range(-floor..floor));
    (x, env)
}

fn interference(rng: &mut ChaCha8Rng, n: usize, kind: NoiseKind) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut x: Vec<f64> = match kind {
        NoiseKind::Broadband => {
            let a = rng.gen_range(0.0..0.9);
            let mut y = 0.0;
            (0..n)
                .map(|_| {
                    y = a * y + (1.0 - a) * rng.gen_range(-1.0..1.0);
                    y
                })
                .collect()
        }
        NoiseKind::Tonal => {
            let tones: Vec<(f64, f64, f64)> = (0..rng.gen_range(3..=6))
                .map(|_| (rng.gen_range(150.0..3000.0), rng.gen_range(0.2..1.0), rng.gen_range(0.0..TAU)))
                .collect();
            (0..n)
                .map(|i| tones.iter().map(|&(f, a, p)| a * (TAU * f * i as f64 / sr + p).sin()).sum())
                .collect()
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.1 / rms);
    }
    x
}

/// Mouth region: skin background, an ellipse of dark lips and darker
/// opening whose height follows the speech envelope.
fn mouth(aperture: f64, dx: f64) -> GrayImage {
    let side = SOURCE_SIDE as f64;
    let (cx, cy) = (side / 2.0 + dx, side * 0.55);
    let (ax, ay) = (side * 0.25, 3.0 + side * 0.2 * aperture);
    let mut data = Vec::with_capacity(SOURCE_SIDE * SOURCE_SIDE);
    for y in 0..SOURCE_SIDE {
        for x in 0..SOURCE_SIDE {
            let (u, v) = ((x as f64 + 0.5 - cx) / ax, (y as f64 + 0.5 - cy) / ay);
            let r = u * u + v * v;
            let lips = (u / 1.25).powi(2) + (v * ay / (ay + 6.0)).powi(2);
            let px = if r <= 1.0 {
                0.08
            } else if lips <= 1.0 {
                0.45
            } else {
                0.62 + 0.2 * y as f64 / side
            };
            data.push(px as f32);
        }
    }
    GrayImage { height: SOURCE_SIDE, width: SOURCE_SIDE, data }
}

/// Generates clip `index` of the stream identified by `seed`. Every clip has
/// its own random stream, so clips can be produced in any order.
pub fn synth_clip(cfg: &SynthConfig, seed: u64, index: u64) -> Result<SynthClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = cfg.samples;
    let (clean, env) = speech(&mut rng, n);
    let noise = interference(&mut rng, n, cfg.noise);
    let (lo, hi) = cfg.snr_range_db;
    let snr_db = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let drift = rng.gen_range(0.0..TAU);

    let clean = AudioClip::from_f64(&clean)?.with_id(format!("synth-{seed}-{index}"));
    let noise = AudioClip::from_f64(&noise)?.with_id(format!("noise-{seed}-{index}"));
    let mix = mix_at_snr(&clean, &noise, snr_db)?;
    let frames = (0..n / SAMPLES_PER_FRAME)
        .map(|f| {
            let span = &env[f * SAMPLES_PER_FRAME..(f + 1) * SAMPLES_PER_FRAME];
            let aperture = span.iter().sum::<f64>() / span.len() as f64;
            let dx = 6.0 * (TAU * 0.5 * f as f64 / VIDEO_FPS as f64 + drift).sin();
            bilinear_resize(&mouth(aperture, dx), VIDEO_SIZE, VIDEO_SIZE)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthClip { clean, noise, noisy: mix.clip, snr_db, noise_scale: mix.noise_scale, gain: mix.gain, frames })
}

/// `n_items` single-segment training triples with mixtures in -10..10 dB.
pub fn synth_dataset(seed: u64, n_items: usize) -> Result<Vec<SegmentTriple>> {
    synth_dataset_with(&SynthConfig::default(), seed, n_items)
}

pub fn synth_dataset_with(cfg: &SynthConfig, seed: u64, n_items: usize) -> Result<Vec<SegmentTriple>> {
    if n_items == 0 {
        return Err(Error::invalid("synth_dataset", "need at least one item"));
    }
    let cfg = SynthConfig { samples: SEGMENT_SAMPLES, ..*cfg };
    (0..n_items as u64)
        .into_par_iter()
        .map(|i| {
            let mut t = synth_clip(&cfg, seed, i)?.triples()?;
            Ok(t.swap_remove(0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = synth_dataset(3, 4).unwrap();
        assert_eq!(a, synth_dataset(3, 4).unwrap());
        assert_ne!(a, synth_dataset(4, 4).unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn triples_meet_segment_invariants() {
        for t in synth_dataset(1, 6).unwrap() {
            assert_eq!(t.noisy.values.dims(), &[80, 20]);
            assert_eq!(t.clean.values.dims(), &[80, 20]);
            assert_eq!(t.video.frames.dims(), &[5, 80, 80]);
            assert!(t.video.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mean_snr_is_range_midpoint() {
        let cfg = SynthConfig { samples: 1600, ..Default::default() };
        let snrs: Vec<f64> = (0..1000)
            .map(|i| {
                let c = synth_clip(&cfg, 11, i).unwrap();
                let clean = c.clean.to_f64();
                let residual: f64 = c.noisy.to_f64().iter().zip(&clean).map(|(y, s)| (y / c.gain - s).powi(2)).sum();
                10.0 * (clean.iter().map(|s| s * s).sum::<f64>() / residual).log10()
            })
            .collect();
        let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
        assert!(mean.abs() < 0.5, "{mean}");
    }

    #[test]
    fn mouth_opens_with_speech() {
        let cfg = SynthConfig { samples: 16000, ..Default::default() };
        let c = synth_clip(&cfg, 2, 0).unwrap();
        assert_eq!(c.frames.len(), 25);
        let dark = |img: &GrayImage| img.data.iter().filter(|&&v| v < 0.2).count() as f64;
        let env: Vec<f64> = c
            .clean
            .to_f64()
            .chunks(640)
            .map(|s| s.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let open: Vec<f64> = c.frames.iter().map(dark).collect();
        let (me, mo) = (env.iter().sum::<f64>() / 25.0, open.iter().sum::<f64>() / 25.0);
        let cov: f64 = env.iter().zip(&open).map(|(e, o)| (e - me) * (o - mo)).sum();
        assert!(cov > 0.0);
    }

    #[test]
    fn tonal_noise_is_narrowband() {
        let cfg = SynthConfig { noise: NoiseKind::Tonal, samples: 4000, ..Default::default() };
        let c = synth_clip(&cfg, 5, 0).unwrap();
        assert!((c.noise.power() - 0.01).abs() < 1e-3);
        assert!("pink".parse::<NoiseKind>().is_err());
    }
}
