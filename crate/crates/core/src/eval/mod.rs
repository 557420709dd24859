//! Quality measures, inference and the fusion-strategy ablation.

mod enhance;
mod metrics;
mod proxy;
mod report;
mod stoi;

pub use enhance::{enhance, INFERENCE_BATCH};
pub use metrics::{log_spectral_distance, si_sdr, SI_SDR_CAP_DB};
pub use proxy::{covered_samples, waveform_proxy};
pub use report::{evaluate, run_ablation, score_clip, write_reports_csv, AblationTable, EvalConfig, EvalReport, Scores, EVAL_SNRS_DB, REPORT_NOTE};
pub use stoi::{resample, stoi, stoi_f64, SEGMENT as STOI_SEGMENT, STOI_RATE};
