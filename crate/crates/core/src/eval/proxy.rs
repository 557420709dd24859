use crate::dsp::{AudioClip, MelFilterbank, MelSegment, Stft, HOP, SEGMENT_FRAMES, WIN_LEN};
use crate::error::{Error, Result};

/// Samples covered by the first `segments` segments of a clip.
pub fn covered_samples(segments: usize) -> usize {
    WIN_LEN + HOP * (segments * SEGMENT_FRAMES - 1)
}

/// Waveform stand-in for an enhanced Mel spectrogram: each STFT bin of the
/// noisy signal is scaled by the amplitude gain `sqrt(exp(enhanced - noisy))`
/// of the Mel bands, spread back to bins through the normalized filterbank
/// transpose. Returns the first [`covered_samples`] samples.
pub fn waveform_proxy(noisy: &AudioClip, noisy_mel: &[MelSegment], enhanced_mel: &[MelSegment]) -> Result<Vec<f64>> {
    const OP: &str = "waveform_proxy";
    if noisy_mel.len() != enhanced_mel.len() || noisy_mel.is_empty() {
        return Err(Error::shape(OP, "segments", noisy_mel.len(), enhanced_mel.len()));
    }
    let stft = Stft::speech();
    let fb = MelFilterbank::speech();
    let mut spec = stft.analyze(&noisy.to_f64())?;
    let frames = noisy_mel.len() * SEGMENT_FRAMES;
    if spec.frames < frames {
        return Err(Error::shape(OP, "frames", frames, spec.frames));
    }
    let (n_mels, n_bins) = (fb.n_mels(), fb.n_bins());
    // column weights of the transpose, with empty columns (DC, Nyquist)
    // taking the band whose centre is nearest
    let centres = fb.centers_hz();
    let bin_hz = crate::dsp::SAMPLE_RATE as f64 / 2.0 / (n_bins - 1) as f64;
    let spread: Vec<Vec<(usize, f64)>> = (0..n_bins)
        .map(|k| {
            let col: Vec<(usize, f64)> = (0..n_mels).map(|m| (m, fb.row(m)[k])).filter(|&(_, w)| w > 0.0).collect();
            let total: f64 = col.iter().map(|&(_, w)| w).sum();
            if total > 0.0 {
                col.into_iter().map(|(m, w)| (m, w / total)).collect()
            } else {
                let f = k as f64 * bin_hz;
                let m = (0..n_mels).min_by(|&a, &b| (centres[a] - f).abs().total_cmp(&(centres[b] - f).abs())).unwrap();
                vec![(m, 1.0)]
            }
        })
        .collect();
    for (s, (ns, es)) in noisy_mel.iter().zip(enhanced_mel).enumerate() {
        if ns.values.dims() != es.values.dims() {
            return Err(Error::shape(OP, "segment dims", format!("{:?}", ns.values.dims()), format!("{:?}", es.values.dims())));
        }
        for t in 0..SEGMENT_FRAMES {
            let gain: Vec<f64> = (0..n_mels)
                .map(|m| {
                    let d = es.values.data()[m * SEGMENT_FRAMES + t] as f64 - ns.values.data()[m * SEGMENT_FRAMES + t] as f64;
                    (0.5 * d).exp()
                })
                .collect();
            let frame = s * SEGMENT_FRAMES + t;
            for (k, w) in spread.iter().enumerate() {
                let g: f64 = w.iter().map(|&(m, c)| c * gain[m]).sum();
                spec.data[k * spec.frames + frame] *= g;
            }
        }
    }
    let mut y = stft.synthesize(&spec, noisy.len())?;
    y.truncate(covered_samples(noisy_mel.len()));
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: OP, what: "proxy waveform".into() });
    }
    Ok(y)
}
