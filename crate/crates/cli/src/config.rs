//! Run configuration: JSON file values overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use iphash_core::dataio::SynthSpec;
use iphash_core::evalkit::{ApDenominator, DEFAULT_K};
use iphash_core::hashcore::KlDirection;
use iphash_core::trainer::{EncoderInit, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub ap_denominator: ApDenominator,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: DEFAULT_K,
            ap_denominator: ApDenominator::TopK,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset manifest.
    pub data: Option<PathBuf>,
    /// Model file.
    pub model: Option<PathBuf>,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Teacher feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Tokens per sample.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub teacher_classes: Option<usize>,
    #[arg(long)]
    pub center_scale: Option<f64>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    #[arg(long)]
    pub token_noise: Option<f64>,
    #[arg(long)]
    pub query_per_class: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthFlags {
    pub fn apply(&self, s: &mut SynthSpec) {
        set(&mut s.num_classes, self.classes);
        set(&mut s.samples_per_class, self.per_class);
        set(&mut s.dim, self.dim);
        set(&mut s.token_dim, self.token_dim);
        set(&mut s.tokens, self.tokens);
        set(&mut s.teacher_classes, self.teacher_classes);
        set(&mut s.center_scale, self.center_scale);
        set(&mut s.feature_noise, self.feature_noise);
        set(&mut s.token_noise, self.token_noise);
        set(&mut s.query_per_class, self.query_per_class);
        set(&mut s.train_size, self.train_size);
        set(&mut s.seed, self.seed);
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub bits: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_hash: Option<f64>,
    #[arg(long)]
    pub lr_encoder: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop the distillation term.
    #[arg(long)]
    pub no_kl: bool,
    /// Drop the reconstruction term.
    #[arg(long)]
    pub no_rec: bool,
    #[arg(long, value_parser = parse_kl_direction)]
    pub kl_direction: Option<KlDirection>,
    #[arg(long, value_parser = parse_encoder_init)]
    pub encoder_init: Option<EncoderInit>,
}

impl TrainFlags {
    pub fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.bits, self.bits);
        set(&mut c.tau, self.tau);
        set(&mut c.gamma, self.gamma);
        set(&mut c.mask_ratio, self.mask_ratio);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.lr_hash, self.lr_hash);
        set(&mut c.lr_encoder, self.lr_encoder);
        set(&mut c.hidden, self.hidden);
        set(&mut c.seed, self.seed);
        set(&mut c.kl_direction, self.kl_direction);
        set(&mut c.encoder_init, self.encoder_init);
        if self.no_kl {
            c.use_kl = false;
        }
        if self.no_rec {
            c.use_rec = false;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalFlags {
    /// Cut-off of MAP@k [default: 1000]
    #[arg(long)]
    pub k: Option<usize>,
    /// Normalizer of AP: relevant items in the top-k, or in the whole database.
    #[arg(long)]
    pub ap_denominator: Option<ApDenominator>,
}

impl EvalFlags {
    pub fn apply(&self, e: &mut EvalSection) {
        set(&mut e.k, self.k);
        set(&mut e.ap_denominator, self.ap_denominator);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_kl_direction(s: &str) -> Result<KlDirection, String> {
    match s {
        "teacher-student" => Ok(KlDirection::TeacherStudent),
        "student-teacher" => Ok(KlDirection::StudentTeacher),
        _ => Err("expected teacher-student or student-teacher".into()),
    }
}

fn parse_encoder_init(s: &str) -> Result<EncoderInit, String> {
    match s {
        "warm-start" => Ok(EncoderInit::WarmStart),
        "random" => Ok(EncoderInit::Random),
        _ => Err("expected warm-start or random".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"bitz": 16}}"#).unwrap();
        assert!(RunConfig::load(Some(&path)).is_err());
        std::fs::write(&path, r#"{"train": {"bits": 16}, "eval": {"k": 100}}"#).unwrap();
        let c = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(c.train.bits, 16);
        assert_eq!(c.train.tau, 10.0);
        assert_eq!(c.eval.k, 100);
    }

    #[test]
    fn flags_override_file_values() {
        let mut c = TrainConfig {
            bits: 64,
            tau: 3.0,
            ..TrainConfig::default()
        };
        let flags = TrainFlags {
            bits: Some(16),
            tau: None,
            gamma: None,
            mask_ratio: None,
            epochs: None,
            batch_size: None,
            lr_hash: None,
            lr_encoder: None,
            hidden: None,
            seed: None,
            no_kl: true,
            no_rec: false,
            kl_direction: None,
            encoder_init: None,
        };
        flags.apply(&mut c);
        assert_eq!(c.bits, 16);
        assert_eq!(c.tau, 3.0);
        assert!(!c.use_kl && c.use_rec);
    }
}
