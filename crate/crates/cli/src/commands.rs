use std::fmt;
use std::path::{Path, PathBuf};

use mffcn::dsp::{log_mel, pair_segments, AudioClip, MelSegment};
use mffcn::eval::{self, log_spectral_distance, waveform_proxy, EvalConfig, EVAL_SNRS_DB};
use mffcn::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use mffcn::io::{
    load_checkpoint, load_mten, load_pgm, load_triples, load_video, load_wav, read_matrix_csv, save_checkpoint, save_mten, save_pgm,
    save_wav, spectrogram_image, write_csv, write_matrix_csv,
};
use mffcn::train::{synth_dataset_with, train_observed, SynthConfig, TrainConfig};
use mffcn::{Error, FusionStrategy, Tensor};

use crate::{AblateArgs, EnhanceArgs, EvalArgs, ExportArgs, GradcheckArgs, TrainArgs, TrainFlags};

pub const EXIT_FAILED: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// A verification gate that ran and did not pass.
#[derive(Debug)]
pub struct Failed(pub String);

impl fmt::Display for Failed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Failed>() {
            return EXIT_FAILED;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite { .. } | Error::Diverged { .. } | Error::NonDeterministic(_) => EXIT_NUMERIC,
                Error::Tape(_) | Error::MissingGradient(_) => EXIT_FAILED,
                _ => EXIT_BAD_INPUT,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<rayon::ThreadPoolBuildError>() {
            return EXIT_BAD_INPUT;
        }
    }
    EXIT_FAILED
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        width_divisor: a.width_divisor,
        tolerance: a.tolerance,
        strategies: vec![a.strategy],
        ..Default::default()
    };
    let report = run_gradcheck(&cfg)?;
    println!("{report}");
    if report.passed() {
        return Ok(());
    }
    let worst = report.worst().expect("a failing report has rows");
    Err(Failed(format!("worst offender {}: max rel-err {:.3e} at {}", worst.name, worst.max_rel_err, worst.worst)).into())
}

fn resolve(flags: &TrainFlags, mut cfg: TrainConfig) -> anyhow::Result<TrainConfig> {
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        cfg.apply_text(&text)?;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.width_divisor {
        cfg.width_divisor = v;
    }
    if let Some(v) = flags.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.steps {
        cfg.steps = v;
    }
    if let Some(v) = flags.snr_low {
        cfg.snr_range_db.0 = v;
    }
    if let Some(v) = flags.snr_high {
        cfg.snr_range_db.1 = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_config(cfg: &TrainConfig) -> SynthConfig {
    SynthConfig { snr_range_db: cfg.snr_range_db, noise: cfg.noise, ..Default::default() }
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let init = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let mut base = TrainConfig::default();
    if let Some(c) = &init {
        base.strategy = c.arch.strategy;
        base.width_divisor = c.arch.width_divisor;
    }
    let cfg = resolve(&a.flags, base)?;
    let data = match &a.data {
        Some(dir) => load_triples(dir)?,
        None => synth_dataset_with(&synth_config(&cfg), cfg.seed, cfg.items)?,
    };
    println!(
        "training {} / width {} on {} segments: {} steps, batch {}, lr {}",
        cfg.strategy,
        cfg.width_divisor,
        data.len(),
        cfg.steps,
        cfg.batch_size,
        cfg.learning_rate
    );
    let every = (cfg.steps / 10).max(1);
    let steps = cfg.steps;
    let outcome = train_observed(&cfg, &data, init, |step, loss| {
        if step == 1 || step % every == 0 || step == steps {
            println!("step {step:>6}  loss {loss:.6}");
        }
    })?;

    let ckpt_path = a.out.join("checkpoint.mffc");
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    let rows: Vec<Vec<String>> = outcome.history.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]).collect();
    write_csv(&a.out.join("loss.csv"), &["step", "loss"], &rows)?;
    let config_path = a.out.join("config.txt");
    std::fs::write(&config_path, cfg.to_text()).map_err(|e| Error::Io { path: config_path, source: e })?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

/// `[80, 20·n]` Mel image of consecutive segments.
fn join_segments(segments: &[MelSegment]) -> anyhow::Result<Tensor<f32>> {
    let (rows, cols) = (80, 20);
    let width = cols * segments.len();
    let mut data = vec![0.0f32; rows * width];
    for (k, s) in segments.iter().enumerate() {
        for r in 0..rows {
            data[r * width + k * cols..r * width + (k + 1) * cols].copy_from_slice(&s.values.data()[r * cols..(r + 1) * cols]);
        }
    }
    Ok(Tensor::from_vec(&[rows, width], data)?)
}

fn stack_segments(segments: &[MelSegment]) -> anyhow::Result<Tensor<f32>> {
    let data = segments.iter().flat_map(|s| s.values.data().iter().copied()).collect();
    Ok(Tensor::from_vec(&[segments.len(), 80, 20], data)?)
}

pub fn enhance(a: EnhanceArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let noisy = load_wav(&a.data.join("noisy.wav"))?;
    let frames_dir = a.data.join("frames");
    let video_path = if frames_dir.is_dir() { frames_dir } else { a.data.join("video.mten") };
    let frames = load_video(&video_path)?;
    let pairs = pair_segments(&noisy, &frames)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument { op: "enhance", msg: "no complete audio-video segment".into() }.into());
    }
    let (noisy_mel, video): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let enhanced = eval::enhance(&ckpt, &noisy_mel, &video)?;
    let n = enhanced.len();

    let clean_path = a.data.join("clean.wav");
    let clean = if clean_path.exists() {
        let mut mel = log_mel(&load_wav(&clean_path)?)?;
        if mel.len() < n {
            return Err(Error::InvalidArgument { op: "enhance", msg: format!("clean.wav gives {} segments, noisy input {n}", mel.len()) }.into());
        }
        mel.truncate(n);
        Some(mel)
    } else {
        None
    };

    let mut sets = vec![("noisy", &noisy_mel), ("enhanced", &enhanced)];
    if let Some(c) = &clean {
        sets.push(("clean", c));
    }
    for (name, segs) in &sets {
        save_mten(&a.out.join(format!("{name}.mten")), &stack_segments(segs)?)?;
        save_pgm(&a.out.join(format!("{name}.pgm")), &spectrogram_image(&join_segments(segs)?)?)?;
        for (k, s) in segs.iter().enumerate() {
            save_pgm(&a.out.join("segments").join(format!("seg_{k:04}_{name}.pgm")), &spectrogram_image(&s.values)?)?;
        }
    }
    let mut proxy = waveform_proxy(&noisy, &noisy_mel, &enhanced)?;
    let peak = proxy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        proxy.iter_mut().for_each(|v| *v /= peak);
        println!("enhanced.wav peak-normalized by {:.3} dB", -20.0 * peak.log10());
    }
    save_wav(&a.out.join("enhanced.wav"), &AudioClip::from_f64(&proxy)?)?;

    if let Some(c) = &clean {
        let lsd = c.iter().zip(&enhanced).map(|(c, e)| log_spectral_distance(c, e)).collect::<mffcn::Result<Vec<_>>>()?;
        let mean = lsd.iter().sum::<f64>() / n as f64;
        let mut rows: Vec<Vec<String>> = lsd.iter().enumerate().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect();
        rows.push(vec!["mean".into(), mean.to_string()]);
        write_csv(&a.out.join("lsd.csv"), &["segment", "lsd"], &rows)?;
        println!("log-spectral distance to clean: {mean:.6}");
        if !mean.is_finite() {
            return Err(Error::NonFinite { op: "enhance", what: "log-spectral distance".into() }.into());
        }
    }
    println!("enhanced {n} segments into {}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = EvalConfig { seed: a.seed, ..Default::default() };
    let reports = EVAL_SNRS_DB.iter().map(|&snr| eval::evaluate(&ckpt, &cfg, snr)).collect::<mffcn::Result<Vec<_>>>()?;
    eval::write_reports_csv(&a.out.join("eval.csv"), &reports)?;
    println!("# {}", eval::REPORT_NOTE);
    println!("{:>8}  {:>8}  {:>10}  {:>8}", "snr_db", "stoi", "si_sdr_db", "lsd");
    for r in &reports {
        println!("{:>8}  {:>8.2}  {:>10.2}  {:>8.3}", r.snr_db, r.mean.stoi, r.mean.si_sdr_db, r.mean.log_spectral_distance);
    }
    if reports.iter().any(|r| !r.items.iter().all(|s| s.is_finite())) {
        return Err(Error::NonFinite { op: "eval", what: "report".into() }.into());
    }
    Ok(())
}

/// Defaults of the ablation: small, so all five strategies fit in minutes.
pub fn ablation_defaults() -> TrainConfig {
    TrainConfig { width_divisor: 8, steps: 50, batch_size: 4, items: 8, ..Default::default() }
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let cfg = resolve(&a.flags, ablation_defaults())?;
    println!(
        "ablation: width {}, {} steps, batch {}, {} items, seed {}",
        cfg.width_divisor, cfg.steps, cfg.batch_size, cfg.items, cfg.seed
    );
    let eval_cfg = EvalConfig { seed: cfg.seed, noise: cfg.noise, ..Default::default() };
    let table = eval::run_ablation(&cfg, &eval_cfg, &FusionStrategy::ALL)?;
    table.write_csv(&a.out.join("ablation.csv"))?;
    let text = table.to_text();
    let txt_path = a.out.join("ablation.txt");
    std::fs::write(&txt_path, &text).map_err(|e| Error::Io { path: txt_path, source: e })?;
    print!("{text}");
    for ((s, _), loss) in table.rows.iter().zip(&table.final_loss) {
        println!("final loss {s}: {loss:.6}");
    }
    if !table.is_finite() {
        return Err(Error::NonFinite { op: "ablate", what: "report".into() }.into());
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "tensor".into())
}

fn export_matrix(t: &Tensor<f32>, base: PathBuf) -> anyhow::Result<()> {
    save_pgm(&base.with_extension("pgm"), &spectrogram_image(t)?)?;
    write_matrix_csv(&base.with_extension("csv"), t)?;
    Ok(())
}

pub fn export_spec(a: ExportArgs) -> anyhow::Result<()> {
    let name = stem(&a.data);
    let ext = a.data.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "mten" => {
            let t = load_mten(&a.data)?;
            match *t.dims() {
                [_, _] => export_matrix(&t, a.out.join(&name))?,
                [n, h, w] => {
                    for k in 0..n {
                        let slice = t.narrow(0, k, k + 1)?.reshape(&[h, w])?;
                        export_matrix(&slice, a.out.join(format!("{name}_{k:04}")))?;
                    }
                }
                ref d => {
                    return Err(Error::InvalidArgument { op: "export-spec", msg: format!("expected a [rows, cols] or [n, rows, cols] tensor, got {d:?}") }
                        .into())
                }
            }
        }
        "pgm" => {
            let img = load_pgm(&a.data)?;
            save_mten(&a.out.join(format!("{name}.mten")), &Tensor::from_vec(&[img.height, img.width], img.data)?)?;
        }
        "csv" => save_mten(&a.out.join(format!("{name}.mten")), &read_matrix_csv(&a.data)?)?,
        _ => {
            return Err(Error::InvalidArgument { op: "export-spec", msg: format!("{}: expected a .mten, .pgm or .csv file", a.data.display()) }.into())
        }
    }
    println!("exported {} into {}", a.data.display(), a.out.display());
    Ok(())
}
