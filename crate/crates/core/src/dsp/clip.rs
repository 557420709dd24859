use crate::error::{Error, Result};

use super::SAMPLE_RATE;

/// Mono 16 kHz audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::invalid("audio_clip", format!("sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}")));
        }
        if samples.is_empty() {
            return Err(Error::invalid("audio_clip", "empty clip"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { op: "audio_clip", what: format!("sample {i}") });
        }
        if let Some(i) = samples.iter().position(|s| s.abs() > 1.0) {
            return Err(Error::invalid("audio_clip", format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(AudioClip { samples, sample_rate, id: String::new() })
    }

    /// Builds a 16 kHz clip from `f64` samples.
    pub fn from_f64(samples: &[f64]) -> Result<Self> {
        Self::new(samples.iter().map(|&s| s as f32).collect(), SAMPLE_RATE)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Mean square.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.len() as f64
    }
}
