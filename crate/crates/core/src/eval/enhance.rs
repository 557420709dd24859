use crate::dsp::{MelSegment, Origin, VideoSegment};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::tape::{NormMode, Tape};
use crate::tensor::Tensor;

/// Segments per forward pass during inference.
pub const INFERENCE_BATCH: usize = 8;

/// Runs the network in inference mode on aligned noisy/video segments.
/// Output segments keep the origin of their noisy input.
pub fn enhance(ckpt: &Checkpoint, noisy: &[MelSegment], video: &[VideoSegment]) -> Result<Vec<MelSegment>> {
    if noisy.len() != video.len() {
        return Err(Error::shape("enhance", "segments", noisy.len(), video.len()));
    }
    let mut running = ckpt.params.running.clone();
    let mut out = Vec::with_capacity(noisy.len());
    for (ns, vs) in noisy.chunks(INFERENCE_BATCH).zip(video.chunks(INFERENCE_BATCH)) {
        let b = ns.len();
        let mel = Tensor::from_vec(&[b, 1, 80, 20], ns.iter().flat_map(|s| s.values.data().iter().copied()).collect())?;
        let vid = Tensor::from_vec(&[b, 5, 80, 80], vs.iter().flat_map(|s| s.frames.data().iter().copied()).collect())?;
        let mut tape = Tape::no_grad();
        let (m, v) = (tape.constant(mel), tape.constant(vid));
        let f = ckpt.arch.forward(&mut tape, &ckpt.params, &mut running, NormMode::Eval, m, v)?;
        let y = tape.value(f.output);
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "enhance", what: "network output".into() });
        }
        for (i, s) in ns.iter().enumerate() {
            let values = y.narrow(0, i, i + 1)?.reshape(&[80, 20])?;
            out.push(MelSegment::new(values, Origin { clip: s.origin.clip.clone(), frame: s.origin.frame })?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, FusionStrategy};
    use crate::train::synth_dataset;

    #[test]
    fn batching_does_not_change_results() {
        let arch = Architecture::new(FusionStrategy::EarlyFusion, 32).unwrap();
        let ckpt = Checkpoint { arch, params: arch.init_params(2) };
        let data = synth_dataset(9, 10).unwrap();
        let noisy: Vec<_> = data.iter().map(|t| t.noisy.clone()).collect();
        let video: Vec<_> = data.iter().map(|t| t.video.clone()).collect();
        let all = enhance(&ckpt, &noisy, &video).unwrap();
        assert_eq!(all.len(), 10);
        let one = enhance(&ckpt, &noisy[9..], &video[9..]).unwrap();
        assert!(all[9].values.max_abs_diff(&one[0].values) < 1e-5);
        assert_eq!(all[3].origin, noisy[3].origin);
        assert!(enhance(&ckpt, &noisy[1..], &video).is_err());
    }
}
