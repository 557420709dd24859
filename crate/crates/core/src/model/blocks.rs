//! Building blocks of the network, expressed as tape operations.

use crate::error::{Error, Result};
use crate::model::params::{BnStore, BoundParams};
use crate::model::schedule::{Architecture, Branch};
use crate::scalar::Scalar;
use crate::shape::ConvSpec;
use crate::tape::{NormMode, Tape, Var};
use crate::tensor::Tensor;

const POINTWISE: (usize, usize) = (1, 1);

fn conv1x1<T: Scalar>(tape: &mut Tape<'_, T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let spec = ConvSpec::new(tape.dims(w)[0], POINTWISE, POINTWISE)?;
    tape.conv2d(x, w, Some(b), &spec)
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.fully_connected(x, w, Some(b))
}

/// Intermediate values of one channel-attention call.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub output: Var,
    pub w_video: Var,
    pub w_audio: Var,
}

/// Channel attention over a visual/acoustic feature pair of equal shape.
///
/// `M = Conv(Concat[V, A])`, `g = GAP(M)`,
/// `(w_V, w_A) = softmax(FC1(g), FC2(g))`,
/// `N = Conv(Concat[V * w_V, A * w_A])`.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &BoundParams,
    prefix: &str,
    video: Var,
    audio: Var,
) -> Result<ChannelAttention> {
    if tape.dims(video) != tape.dims(audio) {
        return Err(Error::shape(
            "channel_attention",
            "modality",
            format!("{:?}", tape.dims(audio)),
            format!("{:?}", tape.dims(video)),
        ));
    }
    let cat = tape.concat_channels(&[video, audio])?;
    let m = conv1x1(tape, p, &format!("{prefix}.m_conv"), cat)?;
    let g = tape.global_avg_pool(m)?;
    let zv = linear(tape, p, &format!("{prefix}.fc1"), g)?;
    let za = linear(tape, p, &format!("{prefix}.fc2"), g)?;
    let (w_video, w_audio) = tape.softmax_pair(zv, za)?;
    let v = tape.scale_channels(video, w_video)?;
    let a = tape.scale_channels(audio, w_audio)?;
    let cat = tape.concat_channels(&[v, a])?;
    let output = conv1x1(tape, p, &format!("{prefix}.n_conv"), cat)?;
    Ok(ChannelAttention { output, w_video, w_audio })
}

#[derive(Clone, Copy, Debug)]
pub struct SpectralAttention {
    pub output: Var,
    pub mask: Var,
}

/// `O = N * sigmoid(Conv(relu(Conv(N))))`.
pub fn spectral_attention<T: Scalar>(tape: &mut Tape<'_, T>, p: &BoundParams, prefix: &str, n: Var) -> Result<SpectralAttention> {
    let h = conv1x1(tape, p, &format!("{prefix}.conv1"), n)?;
    let h = tape.relu(h)?;
    let h = conv1x1(tape, p, &format!("{prefix}.conv2"), h)?;
    let mask = tape.sigmoid(h)?;
    let output = tape.mul(n, mask)?;
    Ok(SpectralAttention { output, mask })
}

/// Everything one fusion block computes, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FusionProbe {
    pub output: Var,
    pub w_video: Var,
    pub w_audio: Var,
    pub mask: Var,
}

/// Channel attention followed by spectral attention.
pub fn fusion_block<T: Scalar>(tape: &mut Tape<'_, T>, p: &BoundParams, prefix: &str, video: Var, audio: Var) -> Result<FusionProbe> {
    let ca = channel_attention(tape, p, &format!("{prefix}.ca"), video, audio)?;
    let sa = spectral_attention(tape, p, &format!("{prefix}.sa"), ca.output)?;
    Ok(FusionProbe { output: sa.output, w_video: ca.w_video, w_audio: ca.w_audio, mask: sa.mask })
}

fn check_trace<T: Scalar>(tape: &Tape<'_, T>, arch: &Architecture, branch: Branch, layer: usize, x: Var) -> Result<()> {
    let (c, h, w) = arch.trace(branch)[layer - 1];
    let d = tape.dims(x);
    let got = &d[d.len() - 3..];
    if got != [c, h, w] {
        return Err(Error::shape("encoder", format!("{branch:?} layer {layer} input"), format!("{:?}", (c, h, w)), format!("{got:?}")));
    }
    Ok(())
}

/// Strided conv -> batch norm -> leaky ReLU.
pub fn encoder_layer_audio<T: Scalar>(
    tape: &mut Tape<'_, T>,
    arch: &Architecture,
    p: &BoundParams,
    running: &mut BnStore<T>,
    mode: NormMode,
    layer: usize,
    x: Var,
) -> Result<Var> {
    check_trace(tape, arch, Branch::Audio, layer, x)?;
    let prefix = format!("audio_enc.{layer}");
    let spec = arch.conv_spec(Branch::Audio, layer);
    let y = tape.conv2d(x, p.get(&format!("{prefix}.conv.weight"))?, Some(p.get(&format!("{prefix}.conv.bias"))?), &spec)?;
    norm_act(tape, p, running, mode, &format!("{prefix}.bn"), y)
}

/// Stride-1 conv -> max pool -> batch norm -> leaky ReLU.
pub fn encoder_layer_video<T: Scalar>(
    tape: &mut Tape<'_, T>,
    arch: &Architecture,
    p: &BoundParams,
    running: &mut BnStore<T>,
    mode: NormMode,
    layer: usize,
    x: Var,
) -> Result<Var> {
    check_trace(tape, arch, Branch::Video, layer, x)?;
    let prefix = format!("video_enc.{layer}");
    let spec = arch.conv_spec(Branch::Video, layer);
    let y = tape.conv2d(x, p.get(&format!("{prefix}.conv.weight"))?, Some(p.get(&format!("{prefix}.conv.bias"))?), &spec)?;
    let y = tape.maxpool2d(y, arch.pool(layer))?;
    norm_act(tape, p, running, mode, &format!("{prefix}.bn"), y)
}

pub(crate) fn norm_act<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &BoundParams,
    running: &mut BnStore<T>,
    mode: NormMode,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    let y = tape.batch_norm(x, g, b, running.get_mut(prefix)?, mode)?;
    tape.leaky_relu(y)
}

/// Tape handles of one LSTM layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[4H, F]`, gate order input, forget, cell, output.
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

impl LstmVars {
    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(LstmVars {
            w_ih: p.get(&format!("{prefix}.w_ih"))?,
            w_hh: p.get(&format!("{prefix}.w_hh"))?,
            bias: p.get(&format!("{prefix}.bias"))?,
        })
    }
}

/// Runs one LSTM layer over `xs` (each `[F]` or `[B, F]`) from state
/// `(h0, c0)` and returns every hidden state.
pub fn lstm_layer<T: Scalar>(tape: &mut Tape<'_, T>, w: &LstmVars, xs: &[Var], h0: Var, c0: Var) -> Result<Vec<Var>> {
    let hidden = tape.dims(w.w_hh)[1];
    if tape.dims(w.w_ih)[0] != 4 * hidden || tape.dims(w.w_hh)[0] != 4 * hidden || tape.dims(w.bias) != [4 * hidden] {
        return Err(Error::shape(
            "lstm",
            "gates",
            4 * hidden,
            format!("{:?} / {:?} / {:?}", tape.dims(w.w_ih), tape.dims(w.w_hh), tape.dims(w.bias)),
        ));
    }
    if *tape.dims(h0).last().unwrap() != hidden || tape.dims(h0) != tape.dims(c0) {
        return Err(Error::shape("lstm", "state", hidden, format!("{:?}", tape.dims(h0))));
    }
    let (mut h, mut c) = (h0, c0);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let gx = tape.fully_connected(x, w.w_ih, Some(w.bias))?;
        let gh = tape.fully_connected(h, w.w_hh, None)?;
        let gates = tape.add(gx, gh)?;
        let axis = tape.dims(gates).len() - 1;
        let parts = tape.chunk(gates, axis, 4)?;
        let i = tape.sigmoid(parts[0])?;
        let f = tape.sigmoid(parts[1])?;
        let g = tape.tanh(parts[2])?;
        let o = tape.sigmoid(parts[3])?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
        out.push(h);
    }
    Ok(out)
}

/// Single-sequence LSTM: `seq` is `[T, F]`, `h0`/`c0` are `[H]`; returns `[T, H]`.
pub fn lstm_forward<T: Scalar>(tape: &mut Tape<'_, T>, w: &LstmVars, seq: Var, h0: Var, c0: Var) -> Result<Var> {
    let d = tape.dims(seq).to_vec();
    if d.len() != 2 || d[1] != tape.dims(w.w_ih)[1] {
        return Err(Error::shape("lstm", "input", format!("[T, {}]", tape.dims(w.w_ih)[1]), format!("{d:?}")));
    }
    let xs: Vec<Var> = (0..d[0]).map(|t| tape.select(seq, 0, t)).collect::<Result<_>>()?;
    let hs = lstm_layer(tape, w, &xs, h0, c0)?;
    tape.stack(&hs, 0)
}

/// Spectral self-attention, then two stacked LSTMs running along the
/// frequency axis. Input and output are `[B, C, F, 1]`.
pub fn bottleneck<T: Scalar>(tape: &mut Tape<'_, T>, p: &BoundParams, x: Var) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    if d.len() != 4 || d[3] != 1 {
        return Err(Error::shape("bottleneck", "input", "[B, C, F, 1]", format!("{d:?}")));
    }
    let (batch, c, steps) = (d[0], d[1], d[2]);
    let sa = spectral_attention(tape, p, "bottleneck.sa", x)?;
    let seq = tape.reshape(sa.output, &[batch, c, steps])?;
    let mut xs: Vec<Var> = (0..steps).map(|t| tape.select(seq, 2, t)).collect::<Result<_>>()?;
    for layer in ["bottleneck.lstm.1", "bottleneck.lstm.2"] {
        let w = LstmVars::bind(p, layer)?;
        let hidden = tape.dims(w.w_hh)[1];
        let h0 = tape.constant(Tensor::zeros(&[batch, hidden]));
        let c0 = tape.constant(Tensor::zeros(&[batch, hidden]));
        xs = lstm_layer(tape, &w, &xs, h0, c0)?;
    }
    let hidden = tape.dims(xs[0])[1];
    let y = tape.stack(&xs, 2)?;
    tape.reshape(y, &[batch, hidden, steps, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{fusion_block_params, lstm_params, spectral_params, Init, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(specs: &[crate::model::params::ParamSpec], seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for p in specs {
            let t = match p.init {
                Init::Uniform { fan_in } => Tensor::uniform(&p.dims, (6.0 / fan_in as f64).sqrt(), &mut rng),
                _ => Tensor::uniform(&p.dims, 0.3, &mut rng),
            };
            s.insert(p.name.clone(), t);
        }
        s
    }

    #[test]
    fn equal_fc_weights_split_evenly() {
        let c = 3;
        let mut specs = Vec::new();
        fusion_block_params(&mut specs, "f", c);
        let mut s = store(&specs, 1);
        let fc1w = s.get("f.ca.fc1.weight").unwrap().clone();
        let fc1b = s.get("f.ca.fc1.bias").unwrap().clone();
        s.insert("f.ca.fc2.weight", fc1w);
        s.insert("f.ca.fc2.bias", fc1b);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Tensor::<f64>::uniform(&[c, 4, 3], 1.0, &mut rng);
        let a = Tensor::<f64>::uniform(&[c, 4, 3], 1.0, &mut rng);

        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let (vv, av) = (tape.constant(v.clone()), tape.constant(a.clone()));
        let ca = channel_attention(&mut tape, &p, "f.ca", vv, av).unwrap();
        assert!(tape.value(ca.w_video).data().iter().all(|&w| w == 0.5));
        assert!(tape.value(ca.w_audio).data().iter().all(|&w| w == 0.5));

        // N = Conv(Concat[V/2, A/2])
        let half = |t: &Tensor<f64>| Tensor::from_vec(t.dims(), t.data().iter().map(|x| x / 2.0).collect()).unwrap();
        let (hv, ha) = (tape.constant(half(&v)), tape.constant(half(&a)));
        let cat = tape.concat_channels(&[hv, ha]).unwrap();
        let n = conv1x1(&mut tape, &p, "f.ca.n_conv", cat).unwrap();
        assert!(tape.value(n).max_abs_diff(tape.value(ca.output)) < 1e-12);
    }

    #[test]
    fn channel_attention_rejects_mismatched_modalities() {
        let mut specs = Vec::new();
        fusion_block_params(&mut specs, "f", 2);
        let s = store(&specs, 1);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let v = tape.constant(Tensor::zeros(&[2, 3, 3]));
        let a = tape.constant(Tensor::zeros(&[2, 3, 2]));
        assert!(channel_attention(&mut tape, &p, "f.ca", v, a).is_err());
    }

    #[test]
    fn zero_second_conv_halves_input() {
        let mut specs = Vec::new();
        spectral_params(&mut specs, "s", 2);
        let mut s = store(&specs, 4);
        s.insert("s.conv2.weight", Tensor::zeros(&[2, 2, 1, 1]));
        s.insert("s.conv2.bias", Tensor::zeros(&[2]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Tensor::<f64>::uniform(&[2, 3, 3], 2.0, &mut rng);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let nv = tape.constant(n.clone());
        let sa = spectral_attention(&mut tape, &p, "s", nv).unwrap();
        assert!(tape.value(sa.mask).data().iter().all(|&m| m == 0.5));
        for (o, x) in tape.value(sa.output).data().iter().zip(n.data()) {
            assert_eq!(*o, 0.5 * x);
        }
    }

    #[test]
    fn spectral_output_bounded_by_input() {
        let mut specs = Vec::new();
        spectral_params(&mut specs, "s", 3);
        let s = store(&specs, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = Tensor::<f64>::uniform(&[2, 3, 4, 4], 3.0, &mut rng);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let nv = tape.constant(n.clone());
        let sa = spectral_attention(&mut tape, &p, "s", nv).unwrap();
        for (o, x) in tape.value(sa.output).data().iter().zip(n.data()) {
            assert!(o.abs() <= x.abs());
        }
        assert!(tape.value(sa.mask).data().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn zero_lstm_gives_zero_states() {
        let mut specs = Vec::new();
        lstm_params(&mut specs, "l", 3, 4);
        let mut s = ParamStore::<f64>::new();
        for p in &specs {
            s.insert(p.name.clone(), Tensor::zeros(&p.dims));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let w = LstmVars::bind(&p, "l").unwrap();
        let seq = tape.constant(Tensor::uniform(&[5, 3], 1.0, &mut rng));
        let h0 = tape.constant(Tensor::zeros(&[4]));
        let c0 = tape.constant(Tensor::zeros(&[4]));
        let out = lstm_forward(&mut tape, &w, seq, h0, c0).unwrap();
        assert_eq!(tape.dims(out), &[5, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_equations() {
        let (f, h) = (3, 2);
        let mut specs = Vec::new();
        lstm_params(&mut specs, "l", f, h);
        let s = store(&specs, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::uniform(&[1, f], 1.0, &mut rng);
        let h0 = Tensor::<f64>::uniform(&[h], 1.0, &mut rng);
        let c0 = Tensor::<f64>::uniform(&[h], 1.0, &mut rng);

        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let w = LstmVars::bind(&p, "l").unwrap();
        let (xv, hv, cv) = (tape.constant(x.clone()), tape.constant(h0.clone()), tape.constant(c0.clone()));
        let out = lstm_forward(&mut tape, &w, xv, hv, cv).unwrap();

        let (wih, whh, b) = (s.get("l.w_ih").unwrap(), s.get("l.w_hh").unwrap(), s.get("l.bias").unwrap());
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let gate = |r: usize| {
            b.data()[r]
                + (0..f).map(|k| wih.at(&[r, k]) * x.data()[k]).sum::<f64>()
                + (0..h).map(|k| whh.at(&[r, k]) * h0.data()[k]).sum::<f64>()
        };
        for u in 0..h {
            let i = sig(gate(u));
            let fg = sig(gate(h + u));
            let g = gate(2 * h + u).tanh();
            let o = sig(gate(3 * h + u));
            let c = fg * c0.data()[u] + i * g;
            let expect = o * c.tanh();
            assert!((tape.value(out).data()[u] - expect).abs() < 1e-12);
        }
    }
}
