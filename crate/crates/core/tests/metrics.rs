use std::path::Path;

use mffcn::dsp::{mix_at_snr, AudioClip};
use mffcn::eval::{si_sdr, stoi, stoi_f64};
use mffcn::io::{load_wav, save_wav};
use mffcn::train::{synth_clip, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SAMPLES: usize = 32_000;

fn speech(seed: u64) -> AudioClip {
    synth_clip(&SynthConfig { samples: SAMPLES, ..Default::default() }, seed, 0).unwrap().clean
}

fn white(seed: u64, amp: f32) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new((0..SAMPLES).map(|_| amp * rng.gen_range(-1.0f32..1.0)).collect(), 16_000).unwrap()
}

#[test]
fn identical_signals_score_at_least_099() {
    for seed in 0..3 {
        let s = speech(seed);
        assert!(stoi(&s, &s).unwrap() >= 0.99);
    }
}

/// Reference scores from the `pystoi` package on the same 16-bit WAV data:
/// synthetic speech of seed `s` against independent white noise (seed
/// `1000 + s`) and against their 0 dB mixture.
const PYSTOI: [(f64, f64); 10] = [
    (0.086200, 0.155462),
    (0.070792, 0.198139),
    (0.215426, 0.384723),
    (0.107366, 0.228081),
    (0.123071, 0.348105),
    (0.219465, 0.434328),
    (0.186426, 0.410905),
    (0.119933, 0.330301),
    (0.131596, 0.286619),
    (0.106832, 0.288251),
];

fn via_wav(dir: &Path, name: &str, clip: &AudioClip) -> AudioClip {
    let path = dir.join(name);
    save_wav(&path, clip).unwrap();
    load_wav(&path).unwrap()
}

#[test]
fn matches_reference_implementation() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, &(noise_ref, mix_ref)) in PYSTOI.iter().enumerate() {
        let seed = seed as u64;
        let clean = via_wav(dir.path(), "c.wav", &speech(seed));
        let noise = white(1000 + seed, 0.3);
        let mix = via_wav(dir.path(), "m.wav", &mix_at_snr(&speech(seed), &noise, 0.0).unwrap().clip);
        let noise = via_wav(dir.path(), "n.wav", &noise);
        let (a, b) = (stoi(&clean, &noise).unwrap(), stoi(&clean, &mix).unwrap());
        assert!((a - noise_ref).abs() < 2e-3, "seed {seed}: {a} vs {noise_ref}");
        assert!((b - mix_ref).abs() < 2e-3, "seed {seed}: {b} vs {mix_ref}");
    }
}

#[test]
fn unrelated_white_noise_scores_below_02() {
    for seed in 0..10 {
        let score = stoi(&white(seed, 0.5), &white(1000 + seed, 0.3)).unwrap();
        assert!(score < 0.2, "seed {seed}: {score}");
    }
}

#[test]
fn stoi_ignores_global_scaling() {
    let s = speech(4);
    let processed = mix_at_snr(&s, &white(77, 0.5), 0.0).unwrap().clip;
    let base = stoi(&s, &processed).unwrap();
    let (x, y) = (s.to_f64(), processed.to_f64());
    for k in [2.0, 0.5, 4.0] {
        let ky: Vec<f64> = y.iter().map(|v| v * k).collect();
        assert_eq!(stoi_f64(&x, &ky, 16_000).unwrap(), base);
    }
    let small: Vec<f64> = y.iter().map(|v| v * 0.37).collect();
    assert!((stoi_f64(&x, &small, 16_000).unwrap() - base).abs() < 1e-9);
}

#[test]
fn stoi_rises_with_snr_on_nine_of_ten_seeds() {
    let mut monotone = 0;
    for seed in 0..10 {
        let s = speech(seed);
        let noise = white(500 + seed, 0.5);
        let scores: Vec<f64> = [-5.0, 0.0, 5.0, 10.0].iter().map(|&snr| stoi(&s, &mix_at_snr(&s, &noise, snr).unwrap().clip).unwrap()).collect();
        monotone += usize::from(scores.windows(2).all(|w| w[1] >= w[0]));
    }
    assert!(monotone >= 9, "{monotone}/10 seeds monotone");
}

#[test]
fn si_sdr_scale_invariance_is_exact() {
    let s = speech(2).to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noisy: Vec<f64> = s.iter().map(|v| v + 0.05 * rng.gen_range(-1.0..1.0)).collect();
    let base = si_sdr(&s, &noisy).unwrap();
    for k in [2.0, 0.25, 8.0] {
        let scaled: Vec<f64> = noisy.iter().map(|v| v * k).collect();
        assert_eq!(si_sdr(&s, &scaled).unwrap(), base);
    }
    assert!(base > 0.0 && base < 60.0);
}
