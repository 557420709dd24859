use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::SegmentTriple;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::model::{Architecture, MffcnParams};
use crate::tape::{NormMode, Tape};
use crate::tensor::Tensor;

use super::{adam_step, named_gradients, AdamState, NamedGrads, TrainConfig};

/// Model inputs and target for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 1, 80, 20]`
    pub noisy: Tensor<f32>,
    /// `[B, 5, 80, 80]`
    pub video: Tensor<f32>,
    /// `[B, 1, 80, 20]`
    pub clean: Tensor<f32>,
}

pub fn stack_batch(items: &[&SegmentTriple]) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::invalid("stack_batch", "empty batch"));
    }
    let b = items.len();
    let cat = |f: &dyn Fn(&SegmentTriple) -> &Tensor<f32>| items.iter().flat_map(|t| f(t).data().iter().copied()).collect::<Vec<_>>();
    Ok(Batch {
        noisy: Tensor::from_vec(&[b, 1, 80, 20], cat(&|t| &t.noisy.values))?,
        video: Tensor::from_vec(&[b, 5, 80, 80], cat(&|t| &t.video.frames))?,
        clean: Tensor::from_vec(&[b, 1, 80, 20], cat(&|t| &t.clean.values))?,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every step, measured before that step's update.
    pub history: Vec<f64>,
    pub adam: AdamState<f32>,
}

/// Draws batches from reshuffled passes over the data.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    next: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Sampler { rng, order: (0..n).collect(), next: n }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.next == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.next = 0;
                }
                self.next += 1;
                self.order[self.next - 1]
            })
            .collect()
    }
}

fn offending(params: &MffcnParams<f32>, grads: Option<&NamedGrads<f32>>) -> String {
    if let Some(g) = grads {
        if let Some((name, _)) = g.iter().find(|(_, t)| !t.is_finite()) {
            return name.clone();
        }
    }
    params
        .weights
        .iter()
        .find(|(_, t)| !t.is_finite())
        .map(|(n, _)| n.to_string())
        .unwrap_or_else(|| "loss".into())
}

pub fn train(cfg: &TrainConfig, data: &[SegmentTriple]) -> Result<TrainOutcome> {
    train_observed(cfg, data, None, |_, _| {})
}

/// Runs `cfg.steps` Adam steps on MSE between the network output and the
/// clean segments. Starts from `init` if given (its architecture must match
/// the config), else from the seeded initialization. `observe` sees every
/// step index and loss.
pub fn train_observed(
    cfg: &TrainConfig,
    data: &[SegmentTriple],
    init: Option<Checkpoint>,
    mut observe: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train", "no training data"));
    }
    let arch = Architecture::new(cfg.strategy, cfg.width_divisor)?;
    let mut params = match init {
        Some(c) if c.arch == arch => c.params,
        Some(c) => {
            return Err(Error::invalid(
                "train",
                format!("checkpoint is {} / width {}, config asks for {} / width {}", c.arch.strategy, c.arch.width_divisor, arch.strategy, arch.width_divisor),
            ))
        }
        None => arch.init_params::<f32>(cfg.seed),
    };
    let mut adam = AdamState::new(&params.weights);
    let mut sampler = Sampler::new(cfg.seed, data.len());
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let idx = sampler.batch(cfg.batch_size);
        let batch = stack_batch(&idx.iter().map(|&i| &data[i]).collect::<Vec<_>>())?;
        let pass = {
            let MffcnParams { weights, running } = &mut params;
            let mut tape = Tape::new();
            let bound = weights.bind(&mut tape);
            let mel = tape.constant(batch.noisy);
            let video = tape.constant(batch.video);
            let target = tape.constant(batch.clean);
            arch.forward_bound(&mut tape, &bound, running, NormMode::Train, mel, video).and_then(|f| {
                let loss_var = tape.mse_loss(f.output, target)?;
                let loss = tape.value(loss_var).data()[0] as f64;
                let grads = named_gradients(&bound, &tape.backward(loss_var)?)?;
                Ok((loss, grads))
            })
        };
        let (loss, grads) = match pass {
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, param: offending(&params, None) }),
            other => other?,
        };
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, param: offending(&params, Some(&grads)) });
        }
        history.push(loss);
        observe(step, loss);
        adam_step(&mut params.weights, &grads, &mut adam, cfg.learning_rate)?;
        if params.weights.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged { step, param: offending(&params, None) });
        }
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { arch, params }, history, adam })
}
