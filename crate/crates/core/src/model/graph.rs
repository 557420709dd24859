//! Encoder, bottleneck and decoder wiring for every fusion strategy.

use crate::error::{Error, Result};
use crate::model::blocks::{bottleneck, encoder_layer_audio, encoder_layer_video, fusion_block, norm_act, FusionProbe};
use crate::model::params::{BoundParams, MffcnParams};
use crate::model::schedule::{audio_layer_key, Architecture, Branch, FusionStrategy, LAYERS};
use crate::scalar::Scalar;
use crate::shape::ConvSpec;
use crate::tape::{NormMode, Tape, Var};

/// What the decoder mixes into its input before each deconvolution.
#[derive(Clone, Copy, Debug)]
enum Injection {
    None,
    /// Concatenate and reduce with a 1×1 conv.
    Skip(Var),
    /// Run a fusion block with the video feature as the visual input.
    Fuse(Var),
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B, 1, 80, 20]`
    pub output: Var,
    /// Every fusion block evaluated, in execution order.
    pub probes: Vec<FusionProbe>,
}

fn check_input<T: Scalar>(tape: &Tape<'_, T>, branch: Branch, x: Var) -> Result<usize> {
    let (c, h, w) = Architecture::input_shape(branch);
    let d = tape.dims(x);
    if d.len() != 4 || d[1..] != [c, h, w] {
        return Err(Error::shape("mffcn_forward", format!("{branch:?} input"), format!("[B, {c}, {h}, {w}]"), format!("{d:?}")));
    }
    Ok(d[0])
}

/// Max-pools a video feature down to the audio feature's extent when the
/// video one is an integer multiple of it (after layer 1 the video map is
/// twice as wide).
fn align_video<T: Scalar>(tape: &mut Tape<'_, T>, video: Var, audio: Var) -> Result<Var> {
    let (dv, da) = (tape.dims(video), tape.dims(audio));
    let n = dv.len();
    let (vh, vw, ah, aw) = (dv[n - 2], dv[n - 1], da[n - 2], da[n - 1]);
    if (vh, vw) == (ah, aw) {
        return Ok(video);
    }
    if vh % ah != 0 || vw % aw != 0 {
        return Err(Error::shape("fusion", "video extent", format!("multiple of {:?}", (ah, aw)), format!("{:?}", (vh, vw))));
    }
    tape.maxpool2d(video, (vh / ah, vw / aw))
}

impl Architecture {
    /// Runs the network on a batch of log-Mel segments `mel` `[B, 1, 80, 20]`
    /// and mouth frames `video` `[B, 5, 80, 80]`.
    pub fn forward<'p, T: Scalar>(
        &self,
        tape: &mut Tape<'p, T>,
        params: &'p MffcnParams<T>,
        running: &mut crate::model::params::BnStore<T>,
        mode: NormMode,
        mel: Var,
        video: Var,
    ) -> Result<Forward> {
        let p = params.weights.bind(tape);
        self.forward_bound(tape, &p, running, mode, mel, video)
    }

    /// As [`forward`](Self::forward) with parameters already on the tape.
    pub fn forward_bound<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &BoundParams,
        running: &mut crate::model::params::BnStore<T>,
        mode: NormMode,
        mel: Var,
        video: Var,
    ) -> Result<Forward> {
        let batch = check_input(tape, Branch::Audio, mel)?;
        if check_input(tape, Branch::Video, video)? != batch {
            return Err(Error::shape("mffcn_forward", "batch", batch, tape.dims(video)[0]));
        }
        let mut probes = Vec::new();
        let mut a = mel;
        let mut v = video;
        let mut audio_out = Vec::with_capacity(LAYERS);
        let mut video_out = Vec::with_capacity(LAYERS);
        let mut fused = Vec::new();
        for l in 1..=LAYERS {
            a = encoder_layer_audio(tape, self, p, running, mode, l, a)?;
            if l <= self.video_layers() {
                v = encoder_layer_video(tape, self, p, running, mode, l, v)?;
                video_out.push(v);
            }
            let fuse_here = match self.strategy {
                FusionStrategy::MultiLayer => true,
                FusionStrategy::EarlyFusion => l == 1,
                FusionStrategy::LateFusion | FusionStrategy::IntermediateBottleneck => l == LAYERS,
                FusionStrategy::IntermediateDecoder => false,
            };
            if fuse_here {
                let aligned = align_video(tape, v, a)?;
                let probe = fusion_block(tape, p, &format!("fusion.{l}"), aligned, a)?;
                probes.push(probe);
                fused.push(probe.output);
                if self.strategy == FusionStrategy::EarlyFusion {
                    a = probe.output;
                }
            }
            audio_out.push(a);
        }

        let encoded = match self.strategy {
            FusionStrategy::IntermediateDecoder | FusionStrategy::EarlyFusion => a,
            _ => *fused.last().expect("encoder-side strategies fuse at least once"),
        };
        let x = bottleneck(tape, p, encoded)?;

        let injections: Vec<Injection> = (1..=LAYERS)
            .map(|j| {
                let e = LAYERS + 1 - j;
                match self.strategy {
                    FusionStrategy::MultiLayer => Injection::Skip(fused[e - 1]),
                    FusionStrategy::EarlyFusion | FusionStrategy::IntermediateBottleneck => Injection::Skip(audio_out[e - 1]),
                    FusionStrategy::LateFusion => Injection::None,
                    FusionStrategy::IntermediateDecoder => Injection::Fuse(video_out[e - 1]),
                }
            })
            .collect();
        let output = self.decoder(tape, p, running, mode, x, &injections, &mut probes)?;
        Ok(Forward { output, probes })
    }

    fn decoder<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &BoundParams,
        running: &mut crate::model::params::BnStore<T>,
        mode: NormMode,
        mut x: Var,
        injections: &[Injection],
        probes: &mut Vec<FusionProbe>,
    ) -> Result<Var> {
        let table = self.shape_table();
        for (j, inj) in (1..=LAYERS).zip(injections) {
            let e = LAYERS + 1 - j;
            let prefix = format!("decoder.{j}");
            match *inj {
                Injection::None => {}
                Injection::Skip(s) => {
                    if tape.dims(s) != tape.dims(x) {
                        return Err(Error::shape(
                            "decoder",
                            format!("skip {j}"),
                            format!("{:?}", tape.dims(x)),
                            format!("{:?}", tape.dims(s)),
                        ));
                    }
                    let cat = tape.concat_channels(&[x, s])?;
                    let w = p.get(&format!("{prefix}.skip.weight"))?;
                    let b = p.get(&format!("{prefix}.skip.bias"))?;
                    let spec = ConvSpec::new(tape.dims(w)[0], (1, 1), (1, 1))?;
                    x = tape.conv2d(cat, w, Some(b), &spec)?;
                }
                Injection::Fuse(video) => {
                    let video = align_video(tape, video, x)?;
                    let probe = fusion_block(tape, p, &format!("{prefix}.fusion"), video, x)?;
                    probes.push(probe);
                    x = probe.output;
                }
            }
            let enc = self.conv_spec(Branch::Audio, e);
            let d = tape.dims(x);
            let hw = (d[d.len() - 2], d[d.len() - 1]);
            let target = table.invert(&audio_layer_key(e), hw)?;
            let spec = ConvSpec::new(self.channels(Branch::Audio, e - 1), enc.kernel, enc.stride)?;
            let w = p.get(&format!("{prefix}.deconv.weight"))?;
            let b = p.get(&format!("{prefix}.deconv.bias"))?;
            x = tape.conv_transpose2d(x, w, Some(b), &spec, target)?;
            if j < LAYERS {
                x = norm_act(tape, p, running, mode, &format!("{prefix}.bn"), x)?;
            }
        }
        Ok(x)
    }
}
