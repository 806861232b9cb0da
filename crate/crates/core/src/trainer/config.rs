use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashcore::{KlDirection, LossConfig, DEFAULT_GAMMA};
use crate::teacher::DEFAULT_TAU;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How the student encoder is initialised before training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInit {
    /// Random token weights, readout fitted to the teacher features of the
    /// training split on complete inputs.
    #[default]
    WarmStart,
    /// Random weights throughout.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub bits: usize,
    pub tau: f64,
    pub gamma: f64,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_hash: f64,
    pub lr_encoder: f64,
    pub adam: AdamParams,
    pub seed: u64,
    /// Width `d_h` of the encoder's token layer.
    pub hidden: usize,
    pub use_kl: bool,
    pub use_rec: bool,
    pub kl_direction: KlDirection,
    pub encoder_init: EncoderInit,
    /// Ridge penalty of the warm-start readout fit.
    pub ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bits: 32,
            tau: DEFAULT_TAU,
            gamma: DEFAULT_GAMMA,
            mask_ratio: 0.25,
            epochs: 100,
            batch_size: 64,
            lr_hash: 1e-3,
            lr_encoder: 1e-5,
            adam: AdamParams::default(),
            seed: 0,
            hidden: 64,
            use_kl: true,
            use_rec: true,
            kl_direction: KlDirection::TeacherStudent,
            encoder_init: EncoderInit::WarmStart,
            ridge: 1e-3,
        }
    }
}

fn positive(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {x}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 {
            return Err(Error::invalid("bits", "must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be >= 1"));
        }
        positive("tau", self.tau)?;
        positive("lr_hash", self.lr_hash)?;
        positive("lr_encoder", self.lr_encoder)?;
        positive("adam.eps", self.adam.eps)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(
                "gamma",
                format!("must be >= 0, got {}", self.gamma),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(
                "mask_ratio",
                format!("must lie in [0, 1), got {}", self.mask_ratio),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "batch_size",
                "must be >= 2 for the pairwise loss",
            ));
        }
        for (name, b) in [
            ("adam.beta1", self.adam.beta1),
            ("adam.beta2", self.adam.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::invalid(
                "ridge",
                format!("must be >= 0, got {}", self.ridge),
            ));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            gamma: self.gamma,
            use_kl: self.use_kl,
            use_rec: self.use_rec,
            kl_direction: self.kl_direction,
        }
    }
}
