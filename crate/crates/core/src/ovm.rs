//! Optimal velocity model.
//!
//! The headway policy `v°(d)` rises along a half cosine from zero at the stop
//! spacing to `v_max` at the go spacing; the acceleration command blends the
//! gap to `v°(d)` with the gap to the predecessor's speed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::clip_accel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OvmParams {
    /// Spacing gain, 1/s.
    pub alpha: f64,
    /// Relative-velocity gain, 1/s.
    pub beta: f64,
    pub d_stop: f64,
    pub d_go: f64,
    pub v_max: f64,
}

impl Default for OvmParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            d_stop: 5.0,
            d_go: 35.0,
            v_max: 30.0,
        }
    }
}

impl OvmParams {
    pub fn with_gains(self, alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_stop < self.d_go) {
            return Err(Error::config(
                "ovm.d_stop",
                format!("must be below d_go ({} >= {})", self.d_stop, self.d_go),
            ));
        }
        if !(self.v_max > 0.0) {
            return Err(Error::config("ovm.v_max", "must be > 0"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("ovm.alpha/beta", "gains must be >= 0"));
        }
        Ok(())
    }
}

/// Spacing-dependent target velocity `v°(d)`.
pub fn headway_velocity(p: &OvmParams, d: f64) -> f64 {
    if d < p.d_stop {
        0.0
    } else if d > p.d_go {
        p.v_max
    } else {
        0.5 * p.v_max * (1.0 - (PI * (d - p.d_stop) / (p.d_go - p.d_stop)).cos())
    }
}

/// `α(v°(d) − v) + β(v_prev − v)`, clipped to the acceleration box.
pub fn ovm_accel(p: &OvmParams, d: f64, v: f64, v_prev: f64) -> f64 {
    let raw = p.alpha * (headway_velocity(p, d) - v) + p.beta * (v_prev - v);
    clip_accel(raw)
}
