//! Central-difference gradient oracle and the gradient-check suites built on it.
//!
//! Every check projects an operation's output onto a fixed random tensor `R`,
//! `f(x) = sum(op(x) * R)`, and compares the tape gradient of `f` with the
//! central difference `(f(x + h e_i) - f(x - h e_i)) / 2h`, all in `f64`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::blocks::{bottleneck, channel_attention, fusion_block, lstm_forward, spectral_attention, LstmVars};
use crate::model::params::{fusion_block_params, lstm_params, spectral_params, BoundParams, Init, ParamSpec};
use crate::model::schedule::{Architecture, FusionStrategy};
use crate::scalar::Scalar;
use crate::shape::ConvSpec;
use crate::tape::{NormMode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;
/// Step of the per-operation suite: small enough that truncation error of the
/// smooth ops stays far below the tolerance.
pub const SUITE_EPS: f64 = 1e-5;
/// Step of the end-to-end check, which replays branch decisions and so can
/// afford a step large enough to drown out rounding in the deep graph.
pub const E2E_EPS: f64 = DEFAULT_EPS;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-6;
/// How many times a step that changes a branch decision is shrunk (by 4x).
const MAX_SHRINK: usize = 6;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
///
/// `f` is evaluated twice at `x` first; differing results are reported as
/// [`Error::NonDeterministic`].
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<f64>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    let g = finite_difference_at(|t| Ok((f(t)?, 0)), x, eps, &all)?;
    Tensor::from_vec(x.dims(), g)
}

/// Central differences at selected flat `indices`.
///
/// `f` returns its value together with a signature of its branch decisions
/// (see [`Tape::kink_signature`]). When either side of a step lands on a
/// different smooth piece than `x`, the step is shrunk and retried.
pub fn finite_difference_at<T, F>(mut f: F, x: &Tensor<T>, eps: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<(f64, u64)>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_difference", format!("eps must be positive, got {eps}")));
    }
    let base = deterministic(&mut f, x)?;
    let mut work = x.clone();
    indices
        .iter()
        .map(|&i| {
            let x0 = x.data()[i];
            let g = central(x0, eps, base, |v| {
                work.data_mut()[i] = v;
                f(&work)
            });
            work.data_mut()[i] = x0;
            g
        })
        .collect()
}

fn deterministic<T: Scalar, F>(f: &mut F, x: &Tensor<T>) -> Result<u64>
where
    F: FnMut(&Tensor<T>) -> Result<(f64, u64)>,
{
    let (a, sa) = f(x)?;
    let (b, sb) = f(x)?;
    if a.to_bits() != b.to_bits() || sa != sb {
        return Err(Error::NonDeterministic("finite_difference"));
    }
    Ok(sa)
}

fn central<T: Scalar>(x0: T, eps: f64, base: u64, mut eval: impl FnMut(T) -> Result<(f64, u64)>) -> Result<f64> {
    let mut h = eps;
    let mut attempt = 0;
    loop {
        let (xp, xm) = (T::lit(x0.as_f64() + h), T::lit(x0.as_f64() - h));
        let (fp, sp) = eval(xp)?;
        let (fm, sm) = eval(xm)?;
        if (sp == base && sm == base) || attempt == MAX_SHRINK {
            return Ok((fp - fm) / (xp.as_f64() - xm.as_f64()));
        }
        h /= 4.0;
        attempt += 1;
    }
}

/// One line of a gradient-check report.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub max_rel_err: f64,
    /// Gradient entries compared.
    pub checked: usize,
    /// Where the largest error occurred.
    pub worst: String,
}

impl GradRow {
    fn new(name: impl Into<String>) -> Self {
        GradRow { name: name.into(), max_rel_err: 0.0, checked: 0, worst: String::new() }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            if e >= self.max_rel_err {
                self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", at());
            }
        }
    }

    fn merge(&mut self, other: GradRow) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Table of gradient-check results.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed(self.tolerance))
    }

    pub fn worst(&self) -> Option<&GradRow> {
        self.rows.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
        writeln!(f, "{:<width$}  {:>12}  {:>8}  result", "op", "max rel-err", "entries")?;
        for r in &self.rows {
            let verdict = if r.passed(self.tolerance) { "pass" } else { "FAIL" };
            writeln!(f, "{:<width$}  {:>12.3e}  {:>8}  {verdict}", r.name, r.max_rel_err, r.checked)?;
        }
        write!(f, "tolerance {:.1e}: {}", self.tolerance, if self.passed() { "all pass" } else { "FAILED" })
    }
}

type Build = Box<dyn for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>>;

/// A differentiable function of several tensors, checked in every input.
struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl Case {
    fn new(name: &'static str, inputs: Vec<Tensor<f64>>, build: Build) -> Self {
        Case { name, inputs, build }
    }

    fn project(&self, inputs: &[Tensor<f64>], r: Option<&Tensor<f64>>) -> Result<(f64, u64, Vec<usize>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let value = match r {
            Some(r) => tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        Ok((value, tape.kink_signature(), tape.dims(out).to_vec()))
    }

    fn check(&self, rng: &mut ChaCha8Rng, eps: f64) -> Result<GradRow> {
        let (_, _, out_dims) = self.project(&self.inputs, None)?;
        let r = Tensor::<f64>::uniform(&out_dims, 1.0, rng);

        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        let loss = tape.sum(prod)?;
        let grads = tape.backward(loss)?;

        let mut row = GradRow::new(self.name);
        for (k, &v) in vars.iter().enumerate() {
            let numeric = finite_difference_at(
                |t| {
                    let mut inputs = self.inputs.clone();
                    inputs[k] = t.clone();
                    self.project(&inputs, Some(&r)).map(|(f, s, _)| (f, s))
                },
                &self.inputs[k],
                eps,
                &(0..self.inputs[k].len()).collect::<Vec<_>>(),
            )?;
            let zeros = Tensor::zeros(self.inputs[k].dims());
            let analytic = grads.get(v).unwrap_or(&zeros);
            for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
                row.record(a, n, || format!("{} input {k} entry {i}", self.name));
            }
        }
        Ok(row)
    }
}

fn extent(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize], bound: f64) -> Tensor<f64> {
    Tensor::uniform(dims, bound, rng)
}

fn init_block(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    specs
        .iter()
        .map(|p| match p.init {
            Init::Uniform { fan_in } => rand_t(rng, &p.dims, (6.0 / fan_in as f64).sqrt()),
            _ => rand_t(rng, &p.dims, 0.5),
        })
        .collect()
}

fn named(specs: &[ParamSpec], vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(specs.iter().zip(vars).map(|(p, &v)| (p.name.clone(), v)))
}

/// Random instances of every differentiable operation for one seed.
fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut out = Vec::new();

    {
        let (b, cin, cout) = (extent(rng, 1, 2), extent(rng, 1, 3), extent(rng, 1, 3));
        let (h, w) = (extent(rng, 1, 6), extent(rng, 1, 6));
        let spec = ConvSpec::new(cout, (extent(rng, 1, 4), extent(rng, 1, 4)), (extent(rng, 1, 3), extent(rng, 1, 3))).unwrap();
        let inputs = vec![
            rand_t(rng, &[b, cin, h, w], 1.0),
            rand_t(rng, &[cout, cin, spec.kernel.0, spec.kernel.1], 1.0),
            rand_t(rng, &[cout], 1.0),
        ];
        out.push(Case::new("conv2d", inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), &spec))));
    }
    {
        let (cin, cout) = (extent(rng, 1, 3), extent(rng, 1, 3));
        let (h, w) = (extent(rng, 1, 6), extent(rng, 1, 6));
        let spec = ConvSpec::new(cout, (extent(rng, 1, 3), extent(rng, 1, 3)), (1, 1)).unwrap();
        let inputs = vec![rand_t(rng, &[cin, h, w], 1.0), rand_t(rng, &[cout, cin, spec.kernel.0, spec.kernel.1], 1.0)];
        out.push(Case::new("conv2d (no bias, unbatched)", inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], None, &spec))));
    }
    {
        let (b, cin, cout) = (extent(rng, 1, 2), extent(rng, 1, 3), extent(rng, 1, 3));
        let target = (extent(rng, 1, 6), extent(rng, 1, 6));
        let spec = ConvSpec::new(cout, (extent(rng, 1, 4), extent(rng, 1, 4)), (extent(rng, 1, 3), extent(rng, 1, 3))).unwrap();
        let (h, w) = spec.output_hw(target);
        let inputs = vec![
            rand_t(rng, &[b, cin, h, w], 1.0),
            rand_t(rng, &[cin, cout, spec.kernel.0, spec.kernel.1], 1.0),
            rand_t(rng, &[cout], 1.0),
        ];
        out.push(Case::new(
            "conv_transpose2d",
            inputs,
            Box::new(move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), &spec, target)),
        ));
    }
    {
        let (b, c, h, w) = (extent(rng, 1, 2), extent(rng, 1, 3), extent(rng, 1, 6), extent(rng, 1, 6));
        let window = (extent(rng, 1, h), extent(rng, 1, w));
        let inputs = vec![rand_t(rng, &[b, c, h, w], 1.0)];
        out.push(Case::new("maxpool2d", inputs, Box::new(move |t, v| t.maxpool2d(v[0], window))));
    }
    {
        let (b, c, h, w) = (extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 4), extent(rng, 2, 4));
        let inputs = vec![rand_t(rng, &[b, c, h, w], 2.0), rand_t(rng, &[c], 1.5), rand_t(rng, &[c], 1.0)];
        out.push(Case::new(
            "batch_norm (train)",
            inputs,
            Box::new(move |t, v| {
                let mut stats = RunningStats::new(c);
                t.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train)
            }),
        ));
    }
    {
        let (b, c, h, w) = (extent(rng, 1, 3), extent(rng, 1, 3), extent(rng, 1, 4), extent(rng, 1, 4));
        let inputs = vec![rand_t(rng, &[b, c, h, w], 2.0), rand_t(rng, &[c], 1.5), rand_t(rng, &[c], 1.0)];
        let mean = rand_t(rng, &[c], 0.5);
        let var = Tensor::from_vec(&[c], (0..c).map(|_| rng.gen_range(0.25..2.0)).collect()).unwrap();
        out.push(Case::new(
            "batch_norm (eval)",
            inputs,
            Box::new(move |t, v| {
                let mut stats = RunningStats { mean: mean.clone(), var: var.clone() };
                t.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Eval)
            }),
        ));
    }
    let any_dims = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..extent(rng, 1, 4)).map(|_| extent(rng, 1, 6)).collect() };
    for (name, kind) in [
        ("leaky_relu", crate::tape::Activation::LeakyRelu),
        ("relu", crate::tape::Activation::Relu),
        ("sigmoid", crate::tape::Activation::Sigmoid),
        ("tanh", crate::tape::Activation::Tanh),
    ] {
        let d = any_dims(rng);
        out.push(Case::new(name, vec![rand_t(rng, &d, 3.0)], Box::new(move |t, v| t.activation(v[0], kind))));
    }
    {
        let (cin, cout) = (extent(rng, 1, 6), extent(rng, 1, 6));
        let x = if rng.gen_bool(0.5) { vec![cin] } else { vec![extent(rng, 1, 3), cin] };
        let inputs = vec![rand_t(rng, &x, 1.0), rand_t(rng, &[cout, cin], 1.0), rand_t(rng, &[cout], 1.0)];
        out.push(Case::new("fully_connected", inputs, Box::new(|t, v| t.fully_connected(v[0], v[1], Some(v[2])))));
    }
    {
        let d: Vec<usize> = if rng.gen_bool(0.5) { vec![] } else { vec![extent(rng, 1, 2)] };
        let dims: Vec<usize> = d.into_iter().chain([extent(rng, 1, 4), extent(rng, 1, 6), extent(rng, 1, 6)]).collect();
        out.push(Case::new("global_avg_pool", vec![rand_t(rng, &dims, 1.0)], Box::new(|t, v| t.global_avg_pool(v[0]))));
    }
    {
        let (b, h, w) = (extent(rng, 1, 2), extent(rng, 1, 6), extent(rng, 1, 6));
        let parts = extent(rng, 1, 3);
        let inputs = (0..parts).map(|_| { let c = extent(rng, 1, 3); rand_t(rng, &[b, c, h, w], 1.0) }).collect();
        out.push(Case::new("concat_channels", inputs, Box::new(|t, v| t.concat_channels(v))));
    }
    {
        let (c, h, w) = (extent(rng, 1, 4), extent(rng, 1, 6), extent(rng, 1, 6));
        let inputs = vec![rand_t(rng, &[c, h, w], 1.0), rand_t(rng, &[c], 1.0)];
        out.push(Case::new("scale_channels", inputs, Box::new(|t, v| t.scale_channels(v[0], v[1]))));
        let b = extent(rng, 1, 3);
        let inputs = vec![rand_t(rng, &[b, c, h, w], 1.0), rand_t(rng, &[b, c], 1.0)];
        out.push(Case::new("scale_channels (batched)", inputs, Box::new(|t, v| t.scale_channels(v[0], v[1]))));
    }
    {
        let d = any_dims(rng);
        let inputs = vec![rand_t(rng, &d, 1.0), rand_t(rng, &d, 1.0)];
        out.push(Case::new("mul", inputs.clone(), Box::new(|t, v| t.mul(v[0], v[1]))));
        out.push(Case::new("add", inputs, Box::new(|t, v| t.add(v[0], v[1]))));
    }
    {
        let d = vec![extent(rng, 1, 6)];
        let inputs = vec![rand_t(rng, &d, 2.0), rand_t(rng, &d, 2.0)];
        out.push(Case::new(
            "softmax_pair",
            inputs,
            Box::new(|t, v| {
                let (a, b) = t.softmax_pair(v[0], v[1])?;
                t.stack(&[a, b], 0)
            }),
        ));
    }
    {
        let d: Vec<usize> = (0..extent(rng, 2, 3)).map(|_| extent(rng, 2, 5)).collect();
        let axis = rng.gen_range(0..d.len());
        let index = rng.gen_range(0..d[axis]);
        out.push(Case::new("select", vec![rand_t(rng, &d, 1.0)], Box::new(move |t, v| t.select(v[0], axis, index))));

        let parts = extent(rng, 1, 3);
        let axis = rng.gen_range(0..=d.len());
        let inputs = (0..parts).map(|_| rand_t(rng, &d, 1.0)).collect();
        out.push(Case::new("stack", inputs, Box::new(move |t, v| t.stack(v, axis))));

        let mut cd = d.clone();
        let axis = rng.gen_range(0..cd.len());
        let parts = extent(rng, 1, 3);
        cd[axis] = parts * extent(rng, 1, 2);
        out.push(Case::new(
            "chunk",
            vec![rand_t(rng, &cd, 1.0)],
            Box::new(move |t, v| {
                let pieces = t.chunk(v[0], axis, parts)?;
                let scaled: Vec<Var> = pieces
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| {
                        let s = t.constant(Tensor::full(t.dims(p), (k + 1) as f64));
                        t.mul(p, s)
                    })
                    .collect::<Result<_>>()?;
                t.stack(&scaled, 0)
            }),
        ));

        let n: usize = d.iter().product();
        out.push(Case::new("reshape", vec![rand_t(rng, &d, 1.0)], Box::new(move |t, v| t.reshape(v[0], &[n]))));
        out.push(Case::new("sum", vec![rand_t(rng, &d, 1.0)], Box::new(|t, v| t.sum(v[0]))));
        let inputs = vec![rand_t(rng, &d, 1.0), rand_t(rng, &d, 1.0)];
        out.push(Case::new("mse_loss", inputs, Box::new(|t, v| t.mse_loss(v[0], v[1]))));
    }
    {
        let (steps, f, h) = (3, 4, 4);
        let mut specs = Vec::new();
        lstm_params(&mut specs, "l", f, h);
        let mut inputs = vec![rand_t(rng, &[steps, f], 1.0), rand_t(rng, &[h], 0.5), rand_t(rng, &[h], 0.5)];
        inputs.extend(init_block(&specs, rng));
        out.push(Case::new(
            "lstm_forward",
            inputs,
            Box::new(move |t, v| {
                let w = LstmVars { w_ih: v[3], w_hh: v[4], bias: v[5] };
                lstm_forward(t, &w, v[0], v[1], v[2])
            }),
        ));
    }
    {
        let (b, c, h, w) = (extent(rng, 1, 2), extent(rng, 1, 3), extent(rng, 1, 4), extent(rng, 1, 4));
        let mut specs = Vec::new();
        fusion_block_params(&mut specs, "f", c);
        let mut inputs = vec![rand_t(rng, &[b, c, h, w], 1.0), rand_t(rng, &[b, c, h, w], 1.0)];
        inputs.extend(init_block(&specs, rng));
        let ca_specs = specs.clone();
        out.push(Case::new(
            "channel_attention",
            inputs.clone(),
            Box::new(move |t, v| Ok(channel_attention(t, &named(&ca_specs, &v[2..]), "f.ca", v[0], v[1])?.output)),
        ));
        out.push(Case::new(
            "fusion_block",
            inputs,
            Box::new(move |t, v| Ok(fusion_block(t, &named(&specs, &v[2..]), "f", v[0], v[1])?.output)),
        ));
    }
    {
        let (c, h, w) = (2, 3, 3);
        let mut specs = Vec::new();
        spectral_params(&mut specs, "s", c);
        let mut inputs = vec![rand_t(rng, &[c, h, w], 1.0)];
        inputs.extend(init_block(&specs, rng));
        out.push(Case::new(
            "spectral_attention",
            inputs,
            Box::new(move |t, v| Ok(spectral_attention(t, &named(&specs, &v[1..]), "s", v[0])?.output)),
        ));
    }
    {
        let (b, c) = (extent(rng, 1, 2), 3);
        let mut specs = Vec::new();
        spectral_params(&mut specs, "bottleneck.sa", c);
        lstm_params(&mut specs, "bottleneck.lstm.1", c, c);
        lstm_params(&mut specs, "bottleneck.lstm.2", c, c);
        let mut inputs = vec![rand_t(rng, &[b, c, 5, 1], 1.0)];
        inputs.extend(init_block(&specs, rng));
        out.push(Case::new("bottleneck", inputs, Box::new(move |t, v| bottleneck(t, &named(&specs, &v[1..]), v[0]))));
    }
    out
}

/// Checks every differentiable operation on random inputs, once per seed.
/// Rows are aggregated over seeds.
pub fn op_suite(seeds: &[u64], eps: f64) -> Result<Vec<GradRow>> {
    let mut rows: Vec<GradRow> = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in cases(&mut rng) {
            let row = case.check(&mut rng, eps)?;
            match rows.iter_mut().find(|r| r.name == row.name) {
                Some(r) => r.merge(row),
                None => rows.push(row),
            }
        }
    }
    Ok(rows)
}

/// Whole-network check: batch norm in eval mode (with randomized running
/// statistics), `samples` random entries of every parameter tensor plus
/// `samples` entries of each input. Finite differences replay the branch
/// decisions of the unperturbed pass.
pub fn end_to_end(arch: &Architecture, seed: u64, samples: usize, eps: f64) -> Result<GradRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e2e);
    let mut params = arch.init_params::<f64>(seed);
    for (_, s) in params.running.iter_mut() {
        s.mean.data_mut().iter_mut().for_each(|m| *m = rng.gen_range(-0.2..0.2));
        s.var.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
    }
    for (name, t) in params.weights.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|b| *b += rng.gen_range(-0.1..0.1));
        }
    }
    let mel = Tensor::<f64>::uniform(&[1, 1, 80, 20], 1.0, &mut rng);
    let video = Tensor::<f64>::from_vec(&[1, 5, 80, 80], (0..5 * 80 * 80).map(|_| rng.gen_range(0.0..1.0)).collect())?;

    let r = Tensor::<f64>::uniform(&[1, 1, 80, 20], 1.0, &mut rng);
    let mut tape = Tape::new();
    tape.record_branches();
    let bound = params.weights.bind(&mut tape);
    let (m, v) = (tape.variable(mel.clone()), tape.variable(video.clone()));
    let mut running = params.running.clone();
    let out = arch.forward_bound(&mut tape, &bound, &mut running, NormMode::Eval, m, v)?.output;
    let branches = tape.branches().expect("recording");
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;
    let base_value = tape.value(prod).data().iter().sum::<f64>();

    let eval = |params: &crate::model::params::MffcnParams<f64>, mel: &Tensor<f64>, video: &Tensor<f64>| {
        let mut running = params.running.clone();
        let mut tape = Tape::no_grad();
        tape.replay_branches(branches.clone());
        let (m, v) = (tape.constant(mel.clone()), tape.constant(video.clone()));
        let out = arch.forward(&mut tape, params, &mut running, NormMode::Eval, m, v)?.output;
        let value: f64 = tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok::<_, Error>((value, 0))
    };

    let pick = |rng: &mut ChaCha8Rng, len: usize| -> Vec<usize> {
        if len <= samples {
            (0..len).collect()
        } else {
            rand::seq::index::sample(rng, len, samples).into_vec()
        }
    };

    let mut row = GradRow::new(format!("end-to-end {} /{}", arch.strategy, arch.width_divisor));
    let base = eval(&params, &mel, &video)?;
    if base.0.to_bits() != eval(&params, &mel, &video)?.0.to_bits() || (base.0 - base_value).abs() > 1e-9 * base_value.abs().max(1.0) {
        return Err(Error::NonDeterministic("end_to_end"));
    }
    let names: Vec<String> = params.weights.names().map(String::from).collect();
    let mut work = params.clone();
    for name in &names {
        let analytic = grads.get(bound.get(name)?).ok_or_else(|| Error::MissingGradient(name.clone()))?.clone();
        for i in pick(&mut rng, analytic.len()) {
            let x0 = work.weights.get(name)?.data()[i];
            let numeric = central(x0, eps, base.1, |val| {
                work.weights.get_mut(name)?.data_mut()[i] = val;
                eval(&work, &mel, &video)
            })?;
            work.weights.get_mut(name)?.data_mut()[i] = x0;
            row.record(analytic.data()[i], numeric, || format!("{name}[{i}]"));
        }
    }
    for (label, var, input) in [("input mel", m, &mel), ("input video", v, &video)] {
        let analytic = grads.get(var).ok_or_else(|| Error::MissingGradient(label.into()))?.clone();
        for i in pick(&mut rng, analytic.len()) {
            let mut x = input.clone();
            let numeric = central(input.data()[i], eps, base.1, |val| {
                x.data_mut()[i] = val;
                if label == "input mel" {
                    eval(&params, &x, &video)
                } else {
                    eval(&params, &mel, &x)
                }
            })?;
            row.record(analytic.data()[i], numeric, || format!("{label}[{i}]"));
        }
    }
    Ok(row)
}

/// Settings of a full gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Number of consecutive seeds starting at `seed`.
    pub seeds: usize,
    pub width_divisor: usize,
    pub tolerance: f64,
    /// Step of the per-operation suite.
    pub eps: f64,
    /// Step of the end-to-end check.
    pub e2e_eps: f64,
    /// Entries sampled per parameter tensor in the end-to-end check.
    pub samples: usize,
    pub strategies: Vec<FusionStrategy>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            seeds: 5,
            width_divisor: 16,
            tolerance: DEFAULT_TOLERANCE,
            eps: SUITE_EPS,
            e2e_eps: E2E_EPS,
            samples: 2,
            strategies: vec![FusionStrategy::MultiLayer],
        }
    }
}

/// Per-operation suite followed by the end-to-end check of every requested
/// strategy, each over `seeds` seeds.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradReport> {
    if !(cfg.tolerance >= 0.0) || cfg.seeds == 0 {
        return Err(Error::invalid("gradcheck", "tolerance must be >= 0 and seeds >= 1"));
    }
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let mut rows = op_suite(&seeds, cfg.eps)?;
    for &s in &cfg.strategies {
        let arch = Architecture::new(s, cfg.width_divisor)?;
        let mut row: Option<GradRow> = None;
        for &seed in &seeds {
            let r = end_to_end(&arch, seed, cfg.samples, cfg.e2e_eps)?;
            match row.as_mut() {
                Some(acc) => acc.merge(r),
                None => row = Some(r),
            }
        }
        rows.extend(row);
    }
    Ok(GradReport { rows, tolerance: cfg.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, DEFAULT_EPS).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn linear_is_exact() {
        let x = Tensor::<f64>::from_vec(&[3], vec![0.5, -1.0, 4.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(3.0 * t.data()[0] - 2.0 * t.data()[1] + 0.25 * t.data()[2]), &x, 0.5).unwrap();
        for (a, b) in g.data().iter().zip([3.0, -2.0, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detects_nondeterminism() {
        let x = Tensor::<f64>::zeros(&[2]);
        let mut calls = 0.0;
        let err = finite_difference_gradient(
            |_| {
                calls += 1.0;
                Ok(calls)
            },
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn shrinks_steps_across_kinks() {
        // |x| near 0 with a step that straddles the kink
        let x = Tensor::<f64>::from_vec(&[1], vec![1e-4]).unwrap();
        let g = finite_difference_at(|t| Ok((t.data()[0].abs(), (t.data()[0] > 0.0) as u64)), &x, 1e-3, &[0]).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn op_suite_passes_one_seed() {
        let rows = op_suite(&[11], SUITE_EPS).unwrap();
        for r in &rows {
            assert!(r.passed(DEFAULT_TOLERANCE), "{}: {:.3e} at {}", r.name, r.max_rel_err, r.worst);
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        let report = GradReport { rows: vec![GradRow { name: "x".into(), max_rel_err: 0.0, checked: 1, worst: String::new() }], tolerance: 0.0 };
        assert!(!report.passed());
    }
}
