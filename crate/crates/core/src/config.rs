//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;

use crate::align::Gate;
use crate::error::{Error, Result};

/// Which model components take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub lam: bool,
    pub spb: bool,
    pub ccr: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub bank_size: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    pub c_i: usize,
    pub c_r: usize,
    pub mask_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: [usize; 3],
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub lambda_proto: f64,
    pub lambda_recon: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    /// Scale of the Gumbel noise in the bank relaxation.
    pub gumbel_noise: f64,
    /// L2-normalize embeddings before every dot-product similarity.
    pub normalize_embeddings: bool,
    /// Quantize class prompts through the bank at evaluation time.
    pub quantize_prompts: bool,
    /// Re-seed prototypes left unused by a whole epoch.
    pub reseed_prototypes: bool,
    pub seed: u64,
    pub gate: Gate,
    pub toggles: Toggles,
    pub model: ModelConfig,
    /// Fraction of the corpus held out for evaluation.
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: [20, 30, 50],
            lr: 3e-4,
            weight_decay: 1e-6,
            clip_norm: 5.0,
            lambda_proto: 10.0,
            lambda_recon: 1.0,
            tau1: 0.01,
            tau2: 0.01,
            tau3: 0.01,
            gumbel_noise: 1.0,
            normalize_embeddings: true,
            quantize_prompts: true,
            reseed_prototypes: true,
            seed: 0,
            gate: Gate::Sigmoid,
            toggles: Toggles {
                lam: true,
                spb: true,
                ccr: true,
            },
            model: ModelConfig {
                dim: 64,
                bank_size: 32,
                queries: 8,
                decoder_layers: 2,
                c_i: 64,
                c_r: 64,
                mask_rate: 0.5,
            },
            test_fraction: 0.2,
        }
    }
}

pub const KEYS: &[&str] = &[
    "batch_size",
    "epochs_stage1",
    "epochs_stage2",
    "epochs_stage3",
    "lr",
    "weight_decay",
    "clip_norm",
    "lambda_proto",
    "lambda_recon",
    "tau1",
    "tau2",
    "tau3",
    "gumbel_noise",
    "normalize_embeddings",
    "quantize_prompts",
    "reseed_prototypes",
    "seed",
    "gate",
    "lam",
    "spb",
    "ccr",
    "dim",
    "bank_size",
    "queries",
    "decoder_layers",
    "c_i",
    "c_r",
    "mask_rate",
    "test_fraction",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl TrainConfig {
    /// Applies `key = value` lines over `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{raw}'", i + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs_stage1" => self.epochs[0] = parse(key, value)?,
            "epochs_stage2" => self.epochs[1] = parse(key, value)?,
            "epochs_stage3" => self.epochs[2] = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "lambda_proto" => self.lambda_proto = parse(key, value)?,
            "lambda_recon" => self.lambda_recon = parse(key, value)?,
            "tau1" => self.tau1 = parse(key, value)?,
            "tau2" => self.tau2 = parse(key, value)?,
            "tau3" => self.tau3 = parse(key, value)?,
            "gumbel_noise" => self.gumbel_noise = parse(key, value)?,
            "normalize_embeddings" => self.normalize_embeddings = parse(key, value)?,
            "quantize_prompts" => self.quantize_prompts = parse(key, value)?,
            "reseed_prototypes" => self.reseed_prototypes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "gate" => self.gate = value.parse().map_err(Error::Config)?,
            "lam" => self.toggles.lam = parse(key, value)?,
            "spb" => self.toggles.spb = parse(key, value)?,
            "ccr" => self.toggles.ccr = parse(key, value)?,
            "dim" => self.model.dim = parse(key, value)?,
            "bank_size" => self.model.bank_size = parse(key, value)?,
            "queries" => self.model.queries = parse(key, value)?,
            "decoder_layers" => self.model.decoder_layers = parse(key, value)?,
            "c_i" => self.model.c_i = parse(key, value)?,
            "c_r" => self.model.c_r = parse(key, value)?,
            "mask_rate" => self.model.mask_rate = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Every key with its value, in [`KEYS`] order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let values: Vec<String> = vec![
            self.batch_size.to_string(),
            self.epochs[0].to_string(),
            self.epochs[1].to_string(),
            self.epochs[2].to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.clip_norm.to_string(),
            self.lambda_proto.to_string(),
            self.lambda_recon.to_string(),
            self.tau1.to_string(),
            self.tau2.to_string(),
            self.tau3.to_string(),
            self.gumbel_noise.to_string(),
            self.normalize_embeddings.to_string(),
            self.quantize_prompts.to_string(),
            self.reseed_prototypes.to_string(),
            self.seed.to_string(),
            self.gate.to_string(),
            self.toggles.lam.to_string(),
            self.toggles.spb.to_string(),
            self.toggles.ccr.to_string(),
            m.dim.to_string(),
            m.bank_size.to_string(),
            m.queries.to_string(),
            m.decoder_layers.to_string(),
            m.c_i.to_string(),
            m.c_r.to_string(),
            m.mask_rate.to_string(),
            self.test_fraction.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("tau3", self.tau3),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("lambda_proto", self.lambda_proto),
            ("lambda_recon", self.lambda_recon),
            ("gumbel_noise", self.gumbel_noise),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be nonnegative, got {v}")));
            }
        }
        let m = &self.model;
        for (k, v) in [
            ("batch_size", self.batch_size),
            ("dim", m.dim),
            ("queries", m.queries),
            ("c_i", m.c_i),
            ("c_r", m.c_r),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if m.bank_size < 2 {
            return Err(Error::Config(format!(
                "bank_size must be at least 2, got {}",
                m.bank_size
            )));
        }
        if !(0.0..1.0).contains(&m.mask_rate) {
            return Err(Error::Config(format!(
                "mask_rate must lie in [0, 1), got {}",
                m.mask_rate
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.toggles.ccr && !self.toggles.lam {
            return Err(Error::Config(
                "ccr requires lam: image reconstruction is conditioned on cross-attention features"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.lr = 1.25e-3;
        c.gate = Gate::Softmax;
        c.toggles.spb = false;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_line() {
        let err = TrainConfig::from_text("lr = 0.1\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(TrainConfig::from_text("lam = false\n").is_err());
    }
}
