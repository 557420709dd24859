use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FusionStrategy;

use super::NoiseKind;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Lower and upper mixing SNR in dB for synthetic data.
    pub snr_range_db: (f64, f64),
    pub strategy: FusionStrategy,
    pub width_divisor: usize,
    /// Synthetic items generated when no data directory is given.
    pub items: usize,
    pub noise: NoiseKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0002,
            batch_size: 8,
            steps: 100,
            seed: 0,
            snr_range_db: (-10.0, 10.0),
            strategy: FusionStrategy::MultiLayer,
            width_divisor: 1,
            items: 64,
            noise: NoiseKind::Broadband,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::invalid("config", format!("bad value `{value}` for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "config";
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(OP, format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid(OP, "batch size must be at least 1"));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(OP, format!("snr range {lo}..{hi} is not ordered")));
        }
        if self.width_divisor == 0 {
            return Err(Error::invalid(OP, "width divisor must be at least 1"));
        }
        if self.items == 0 {
            return Err(Error::invalid(OP, "items must be at least 1"));
        }
        Ok(())
    }

    /// Sets one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "batch_size" | "batch" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "snr_low" => self.snr_range_db.0 = parse(key, value)?,
            "snr_high" => self.snr_range_db.1 = parse(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "width_divisor" => self.width_divisor = parse(key, value)?,
            "items" => self.items = parse(key, value)?,
            "noise" => self.noise = value.parse()?,
            _ => return Err(Error::invalid("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// `key = value` lines that [`apply_text`](Self::apply_text) reads back.
    pub fn to_text(&self) -> String {
        format!(
            "learning_rate = {}\nbatch_size = {}\nsteps = {}\nseed = {}\nsnr_low = {}\nsnr_high = {}\nstrategy = {}\nwidth_divisor = {}\nitems = {}\nnoise = {}\n",
            self.learning_rate,
            self.batch_size,
            self.steps,
            self.seed,
            self.snr_range_db.0,
            self.snr_range_db.1,
            self.strategy,
            self.width_divisor,
            self.items,
            self.noise
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.snr_range_db), (0.0002, 8, (-10.0, 10.0)));
        c.validate().unwrap();
    }

    #[test]
    fn parses_key_values() {
        let mut c = TrainConfig::default();
        c.apply_text("# run\nlr = 0.001\nbatch=4\n\nstrategy = late\nsnr_low=-5\nnoise = tonal\n").unwrap();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.strategy, FusionStrategy::LateFusion);
        assert_eq!(c.snr_range_db, (-5.0, 10.0));
        assert_eq!(c.noise, NoiseKind::Tonal);
        assert!(c.apply_text("momentum = 0.9").is_err());
        assert!(c.apply_text("steps").is_err());
        assert!(c.apply_text("steps = many").is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = TrainConfig { learning_rate: 1.5e-4, steps: 7, snr_range_db: (-2.5, 3.0), strategy: FusionStrategy::IntermediateDecoder, noise: NoiseKind::Tonal, ..Default::default() };
        let mut back = TrainConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { snr_range_db: (5.0, -5.0), ..Default::default() },
            TrainConfig { width_divisor: 0, ..Default::default() },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
    }
}
