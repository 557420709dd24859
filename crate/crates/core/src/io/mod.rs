//! File formats: MTEN tensors, MFFC checkpoints, 16 kHz WAV, PGM frames and
//! CSV tables.

mod checkpoint;
mod dataset;
mod mten;
mod pgm;
mod table;
mod wav;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use dataset::{load_triples, load_video, save_triples, CLEAN_FILE, NOISY_FILE, VIDEO_FILE};
pub use mten::{load_mten, read_mten, save_mten, write_mten};
pub use pgm::{frame_name, load_frame_dir, load_pgm, save_frame_dir, save_pgm, spectrogram_image};
pub use table::{read_matrix_csv, write_csv, write_matrix_csv};
pub use wav::{load_wav, save_wav};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}
