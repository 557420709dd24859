use mffcn::dsp::{bilinear_resize, log_mel, mix_at_snr, AudioClip, GrayImage, Stft, SEGMENT_SAMPLES};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Interpolation matrix `[out, inp]` built from the tent kernel centred on
/// each output's source coordinate.
fn tent_matrix(out: usize, inp: usize) -> Vec<Vec<f64>> {
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            (0..inp).map(|k| (1.0 - (src - k as f64).abs()).max(0.0)).collect()
        })
        .collect()
}

#[test]
fn resize_128_to_80_matches_separable_tent_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (128, 128);
    let img = GrayImage::new(h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect()).unwrap();
    let out = bilinear_resize(&img, 80, 80).unwrap();
    let (rh, rw) = (tent_matrix(80, h), tent_matrix(80, w));
    for i in 0..80 {
        for j in 0..80 {
            let mut expected = 0.0;
            for y in 0..h {
                if rh[i][y] == 0.0 {
                    continue;
                }
                for x in 0..w {
                    expected += rh[i][y] * rw[j][x] * img.at(y, x) as f64;
                }
            }
            assert!((out.at(i, j) as f64 - expected).abs() < 1e-5, "({i}, {j}): {} vs {expected}", out.at(i, j));
        }
    }
}

#[test]
fn one_segment_from_3680_samples_and_two_from_7360() {
    let tone = |n: usize| AudioClip::new((0..n).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(), 16_000).unwrap();
    assert_eq!(SEGMENT_SAMPLES, 3680);
    let one = log_mel(&tone(3680)).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].values.dims(), &[80, 20]);
    assert_eq!(log_mel(&tone(3679 + 3200)).unwrap().len(), 1);
    assert_eq!(log_mel(&tone(7360)).unwrap().len(), 2);
    let silent = log_mel(&AudioClip::new(vec![0.0; 3680], 16_000).unwrap()).unwrap();
    let floor = (1e-10f64).ln() as f32;
    assert!(silent[0].values.data().iter().all(|&v| v == floor));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval_within_one_percent(seed in any::<u64>(), amp in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Stft::speech();
        let x: Vec<f64> = (0..640).map(|_| amp * rng.gen_range(-1.0..1.0)).collect();
        let spec = s.analyze(&x).unwrap();
        let p: Vec<f64> = (0..spec.bins).map(|k| spec.at(k, 0).norm_sqr()).collect();
        let one_sided = p[0] + p[320] + 2.0 * p[1..320].iter().sum::<f64>();
        let time: f64 = x.iter().zip(s.window()).map(|(a, w)| (a * w).powi(2)).sum();
        prop_assert!((one_sided / 640.0 / time - 1.0).abs() < 0.01);
    }

    #[test]
    fn mixing_hits_the_requested_snr(seed in any::<u64>(), snr in -20.0f64..40.0, loud in 0.05f32..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean: Vec<f32> = (0..4000).map(|i| loud * (i as f32 * 0.031).sin()).collect();
        let noise: Vec<f32> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = AudioClip::new(clean.clone(), 16_000).unwrap();
        let n = AudioClip::new(noise, 16_000).unwrap();
        let m = mix_at_snr(&c, &n, snr).unwrap();
        prop_assert!(m.clip.samples().iter().all(|v| v.abs() <= 1.0));
        let added: Vec<f64> = m.clip.samples().iter().zip(&clean).map(|(&y, &s)| y as f64 / m.gain - s as f64).collect();
        let pc: f64 = clean.iter().map(|&s| (s as f64).powi(2)).sum();
        let pn: f64 = added.iter().map(|v| v * v).sum();
        prop_assert!((10.0 * (pc / pn).log10() - snr).abs() < 0.01);
    }

    #[test]
    fn resize_keeps_ramps_monotone(h in 2usize..40, w in 2usize..40, oh in 1usize..60, ow in 1usize..60, slope in 0.001f32..0.02) {
        let img = GrayImage::new(h, w, (0..h * w).map(|i| ((i % w) as f32 * slope).min(1.0)).collect()).unwrap();
        let out = bilinear_resize(&img, oh, ow).unwrap();
        for y in 0..oh {
            for x in 1..ow {
                prop_assert!(out.at(y, x) >= out.at(y, x - 1));
            }
        }
    }
}
