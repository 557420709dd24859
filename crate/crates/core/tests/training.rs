use mffcn::gradcheck::{end_to_end, DEFAULT_TOLERANCE, E2E_EPS};
use mffcn::io::{load_checkpoint, save_checkpoint, Checkpoint};
use mffcn::model::schedule::{AUDIO_STRIDES, KERNELS, VIDEO_POOLS};
use mffcn::train::{stack_batch, synth_dataset, train, TrainConfig};
use mffcn::{Architecture, ConvSpec, FusionStrategy, NormMode, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn infer(ckpt: &Checkpoint, mel: &Tensor<f32>, video: &Tensor<f32>) -> Tensor<f32> {
    let mut running = ckpt.params.running.clone();
    let mut tape = Tape::no_grad();
    let (m, v) = (tape.constant(mel.clone()), tape.constant(video.clone()));
    let f = ckpt.arch.forward(&mut tape, &ckpt.params, &mut running, NormMode::Eval, m, v).unwrap();
    tape.value(f.output).clone()
}

#[test]
fn checkpoint_round_trip_gives_bit_identical_output() {
    let data = synth_dataset(3, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for strategy in [FusionStrategy::MultiLayer, FusionStrategy::EarlyFusion] {
        let cfg = TrainConfig { strategy, width_divisor: 32, batch_size: 2, steps: 3, ..Default::default() };
        let ckpt = train(&cfg, &data).unwrap().checkpoint;
        let path = dir.path().join(format!("{strategy}.mffc"));
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let batch = stack_batch(&data.iter().collect::<Vec<_>>()).unwrap();
        let (a, b) = (infer(&ckpt, &batch.noisy, &batch.video), infer(&back, &batch.noisy, &batch.video));
        assert_eq!(a.data(), b.data(), "{strategy}");
    }
}

#[test]
fn loss_falls_on_nearly_every_step_of_a_fixed_batch() {
    let data = synth_dataset(11, 4).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-4, width_divisor: 16, batch_size: 4, steps: 51, ..Default::default() };
    let history = train(&cfg, &data).unwrap().history;
    let falls = history.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falls * 100 >= 95 * 50, "loss fell on {falls} of 50 steps: {history:?}");
}

#[test]
fn every_strategy_passes_end_to_end_gradcheck() {
    for strategy in FusionStrategy::ALL {
        let arch = Architecture::new(strategy, 16).unwrap();
        let row = end_to_end(&arch, 1, 2, E2E_EPS).unwrap();
        assert!(row.max_rel_err < DEFAULT_TOLERANCE, "{}: {:.3e} at {}", row.name, row.max_rel_err, row.worst);
    }
}

#[test]
fn output_shape_equals_input_for_every_strategy_and_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mel = Tensor::<f32>::uniform(&[1, 1, 80, 20], 2.0, &mut rng);
    let video = Tensor::<f32>::uniform(&[1, 5, 80, 80], 1.0, &mut rng);
    for strategy in FusionStrategy::ALL {
        for width in [16, 32, 64] {
            let arch = Architecture::new(strategy, width).unwrap();
            let ckpt = Checkpoint { arch, params: arch.init_params(width as u64) };
            assert_eq!(infer(&ckpt, &mel, &video).dims(), &[1, 1, 80, 20]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_extents_are_ceil_of_input_over_stride(layer in 0usize..10, h in 1usize..24, w in 1usize..24, video in any::<bool>()) {
        let stride = if video { (1, 1) } else { AUDIO_STRIDES[layer] };
        let spec = ConvSpec::new(2, KERNELS[layer], stride).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64((layer * 1000 + h * 31 + w) as u64);
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::uniform(&[1, 3, h, w], 1.0, &mut rng));
        let k = tape.constant(Tensor::uniform(&[2, 3, KERNELS[layer].0, KERNELS[layer].1], 1.0, &mut rng));
        let mut y = tape.conv2d(x, k, None, &spec).unwrap();
        prop_assert_eq!(tape.dims(y), &[1, 2, h.div_ceil(stride.0), w.div_ceil(stride.1)]);
        if video {
            let pool = VIDEO_POOLS[layer];
            if h < pool.0 || w < pool.1 {
                prop_assert!(tape.maxpool2d(y, pool).is_err());
            } else {
                y = tape.maxpool2d(y, pool).unwrap();
                prop_assert_eq!(tape.dims(y), &[1, 2, h.div_ceil(pool.0), w.div_ceil(pool.1)]);
            }
        }
    }
}
