use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::io::{write_csv, Checkpoint};
use crate::model::FusionStrategy;
use crate::train::{synth_clip, synth_dataset_with, train, NoiseKind, SynthConfig, TrainConfig};

use super::{enhance, log_spectral_distance, si_sdr, stoi_f64, waveform_proxy, covered_samples};

/// Mixing SNRs of the evaluation sets.
pub const EVAL_SNRS_DB: [f64; 2] = [0.0, -5.0];
/// Held-out clips are drawn from this offset of the synthetic stream.
const HELD_OUT: u64 = 1 << 32;

pub const REPORT_NOTE: &str =
    "PESQ is not computed; SI-SDR and log-spectral distance (LSD) stand in for it. Waveform scores use the Mel-gain proxy of the noisy signal.";

/// Scores of one evaluated item (or their mean).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    /// Percent, 0 to 100.
    pub stoi: f64,
    pub si_sdr_db: f64,
    pub log_spectral_distance: f64,
}

impl Scores {
    pub fn is_finite(&self) -> bool {
        self.stoi.is_finite() && self.si_sdr_db.is_finite() && self.log_spectral_distance.is_finite()
    }

    fn mean(items: &[Scores]) -> Scores {
        let n = items.len() as f64;
        Scores {
            stoi: items.iter().map(|s| s.stoi).sum::<f64>() / n,
            si_sdr_db: items.iter().map(|s| s.si_sdr_db).sum::<f64>() / n,
            log_spectral_distance: items.iter().map(|s| s.log_spectral_distance).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub strategy: FusionStrategy,
    pub snr_db: f64,
    pub seed: u64,
    pub items: Vec<Scores>,
    pub mean: Scores,
}

/// What to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub items: usize,
    /// Length of each held-out clip in samples.
    pub samples: usize,
    pub noise: NoiseKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 0, items: 4, samples: 32_000, noise: NoiseKind::Broadband }
    }
}

/// Scores one clean/noisy pair with its mouth video.
pub fn score_clip(ckpt: &Checkpoint, clean: &AudioClip, noisy: &AudioClip, triples: &[crate::dsp::SegmentTriple]) -> Result<Scores> {
    let noisy_mel: Vec<_> = triples.iter().map(|t| t.noisy.clone()).collect();
    let video: Vec<_> = triples.iter().map(|t| t.video.clone()).collect();
    let enhanced = enhance(ckpt, &noisy_mel, &video)?;
    let proxy = waveform_proxy(noisy, &noisy_mel, &enhanced)?;
    let reference = &clean.to_f64()[..covered_samples(triples.len())];
    let lsd = triples.iter().zip(&enhanced).map(|(t, e)| log_spectral_distance(&t.clean, e)).sum::<Result<f64>>()? / triples.len() as f64;
    Ok(Scores {
        stoi: 100.0 * stoi_f64(reference, &proxy, clean.sample_rate())?.clamp(0.0, 1.0),
        si_sdr_db: si_sdr(reference, &proxy)?,
        log_spectral_distance: lsd,
    })
}

/// Evaluates `ckpt` on held-out synthetic mixtures at `snr_db`.
pub fn evaluate(ckpt: &Checkpoint, cfg: &EvalConfig, snr_db: f64) -> Result<EvalReport> {
    if cfg.items == 0 {
        return Err(Error::invalid("evaluate", "need at least one item"));
    }
    let synth = SynthConfig { snr_range_db: (snr_db, snr_db), noise: cfg.noise, samples: cfg.samples };
    let items = (0..cfg.items as u64)
        .into_par_iter()
        .map(|i| {
            let clip = synth_clip(&synth, cfg.seed, HELD_OUT + i)?;
            score_clip(ckpt, &clip.clean, &clip.noisy, &clip.triples()?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = Scores::mean(&items);
    Ok(EvalReport { strategy: ckpt.arch.strategy, snr_db, seed: cfg.seed, items, mean })
}

/// Strategies × SNRs table of mean scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub snrs_db: Vec<f64>,
    /// One row per strategy with one report per SNR.
    pub rows: Vec<(FusionStrategy, Vec<EvalReport>)>,
    /// Final training loss per strategy.
    pub final_loss: Vec<f64>,
}

/// Trains every strategy with the same data and seed (`train.strategy` is
/// ignored) and evaluates each at the paper's two SNRs.
pub fn run_ablation(train_cfg: &TrainConfig, eval_cfg: &EvalConfig, strategies: &[FusionStrategy]) -> Result<AblationTable> {
    let synth = SynthConfig { snr_range_db: train_cfg.snr_range_db, noise: train_cfg.noise, ..Default::default() };
    let data = synth_dataset_with(&synth, train_cfg.seed, train_cfg.items)?;
    let mut rows = Vec::with_capacity(strategies.len());
    let mut final_loss = Vec::with_capacity(strategies.len());
    for &s in strategies {
        let cfg = TrainConfig { strategy: s, ..train_cfg.clone() };
        let out = train(&cfg, &data)?;
        final_loss.push(out.history.last().copied().unwrap_or(f64::NAN));
        let reports = EVAL_SNRS_DB.iter().map(|&snr| evaluate(&out.checkpoint, eval_cfg, snr)).collect::<Result<Vec<_>>>()?;
        rows.push((s, reports));
    }
    Ok(AblationTable { snrs_db: EVAL_SNRS_DB.to_vec(), rows, final_loss })
}

impl AblationTable {
    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|(_, r)| r.iter().all(|e| e.mean.is_finite()))
    }

    fn columns(&self) -> Vec<String> {
        let mut cols = vec!["strategy".to_string()];
        for metric in ["stoi", "si_sdr_db", "lsd"] {
            for snr in &self.snrs_db {
                cols.push(format!("{metric}@{snr}dB"));
            }
        }
        cols
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(s, reports)| {
                let mut row = vec![s.name().to_string()];
                row.extend(reports.iter().map(|r| format!("{:.2}", r.mean.stoi)));
                row.extend(reports.iter().map(|r| format!("{:.2}", r.mean.si_sdr_db)));
                row.extend(reports.iter().map(|r| format!("{:.3}", r.mean.log_spectral_distance)));
                row
            })
            .collect()
    }

    /// Aligned plain-text table with a header note.
    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let cells = self.cells();
        let widths: Vec<usize> = (0..cols.len()).map(|c| cells.iter().map(|r| r[c].len()).chain([cols[c].len()]).max().unwrap()).collect();
        let mut out = format!("# {REPORT_NOTE}\n");
        let line = |row: &[String]| row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect::<Vec<_>>().join("  ");
        let _ = writeln!(out, "{}", line(&cols));
        for r in &cells {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let cols = self.columns();
        let header: Vec<&str> = cols.iter().map(String::as_str).collect();
        write_csv(path, &header, &self.cells())
    }
}

impl EvalReport {
    /// One line per item plus a `mean` line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_reports_csv(path, std::slice::from_ref(self))
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        let fmt = |label: String, s: &Scores| {
            vec![
                label,
                self.strategy.name().to_string(),
                self.snr_db.to_string(),
                self.seed.to_string(),
                format!("{:.4}", s.stoi),
                format!("{:.4}", s.si_sdr_db),
                format!("{:.4}", s.log_spectral_distance),
            ]
        };
        let mut rows: Vec<Vec<String>> = self.items.iter().enumerate().map(|(i, s)| fmt(i.to_string(), s)).collect();
        rows.push(fmt("mean".into(), &self.mean));
        rows
    }
}

/// Several reports in one CSV, each with its items and a `mean` line.
pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = reports.iter().flat_map(EvalReport::csv_rows).collect();
    write_csv(path, &["item", "strategy", "snr_db", "seed", "stoi", "si_sdr_db", "lsd"], &rows)
}
