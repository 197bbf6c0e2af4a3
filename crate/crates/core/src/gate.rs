//! Top-confidence stream gate.
//!
//! The first `warmup` frames only feed the threshold estimate; once the
//! warm-up sample is complete, the threshold is frozen at its `1 - alpha`
//! nearest-rank quantile and every later frame is selected iff its
//! confidence is strictly greater.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::quantile;
use crate::model::{frame_confidence, FrameRecord};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_WARMUP: usize = 720;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub alpha: f64,
    pub warmup: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            alpha: DEFAULT_ALPHA,
            warmup: DEFAULT_WARMUP,
        }
    }
}

impl GateConfig {
    pub fn new(alpha: f64, warmup: usize) -> Result<Self> {
        let cfg = GateConfig { alpha, warmup };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "gate.alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.warmup == 0 {
            return Err(Error::Config("gate.warmup must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    WarmingUp,
    Active,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    DiscardedWarmup,
    Selected,
    Rejected,
}

#[derive(Clone, Debug)]
pub struct GateState {
    config: GateConfig,
    warmup_confidences: Vec<f64>,
    threshold: Option<f64>,
    seen: u64,
    selected: u64,
}

impl GateState {
    pub fn new(config: GateConfig) -> Result<Self> {
        config.validate()?;
        Ok(GateState {
            config,
            warmup_confidences: Vec::with_capacity(config.warmup),
            threshold: None,
            seen: 0,
            selected: 0,
        })
    }

    pub fn config(&self) -> &GateConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        if self.threshold.is_some() {
            Phase::Active
        } else {
            Phase::WarmingUp
        }
    }

    /// The frozen threshold, once warm-up is complete.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn warmup_confidences(&self) -> &[f64] {
        &self.warmup_confidences
    }

    pub fn observe(&mut self, frame: &FrameRecord) -> Decision {
        self.observe_confidence(frame_confidence(frame))
    }

    pub fn observe_confidence(&mut self, confidence: f64) -> Decision {
        match self.threshold {
            None => {
                self.warmup_confidences.push(confidence);
                if self.warmup_confidences.len() == self.config.warmup {
                    // non-empty and the level lies in (0, 1)
                    let tau = quantile(&self.warmup_confidences, 1.0 - self.config.alpha)
                        .expect("warm-up sample is non-empty");
                    self.threshold = Some(tau);
                }
                Decision::DiscardedWarmup
            }
            Some(tau) => {
                self.seen += 1;
                if confidence > tau {
                    self.selected += 1;
                    Decision::Selected
                } else {
                    Decision::Rejected
                }
            }
        }
    }

    /// Post-warm-up frames observed and selected so far.
    pub fn counts(&self) -> (u64, u64) {
        (self.seen, self.selected)
    }

    pub fn acceptance_rate(&self) -> Result<f64> {
        if self.phase() != Phase::Active {
            return Err(Error::Config("gate is still warming up".into()));
        }
        acceptance_rate(self.seen, self.selected)
    }
}

pub fn acceptance_rate(frames_seen: u64, frames_selected: u64) -> Result<f64> {
    if frames_seen == 0 {
        return Err(Error::Empty("no post-warm-up frames observed"));
    }
    if frames_selected > frames_seen {
        return Err(Error::Config(format!(
            "{frames_selected} frames selected out of {frames_seen} seen"
        )));
    }
    Ok(frames_selected as f64 / frames_seen as f64)
}
