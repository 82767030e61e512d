use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Step count for RK4.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tol")]
    pub rtol: f64,
    #[serde(default = "default_tol")]
    pub atol: f64,
    /// Budget of attempted steps for dopri5.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_steps() -> usize {
    8
}

fn default_tol() -> f64 {
    1e-5
}

fn default_max_steps() -> usize {
    10_000
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: Method::Rk4,
            steps,
            rtol: default_tol(),
            atol: default_tol(),
            max_steps: default_max_steps(),
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            steps: default_steps(),
            rtol,
            atol,
            max_steps: default_max_steps(),
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::SolverConfig("steps must be at least 1".into()));
        }
        for (name, v) in [("rtol", self.rtol), ("atol", self.atol)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::SolverConfig(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.max_steps < 1 {
            return Err(Error::SolverConfig("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::dopri5(default_tol(), default_tol())
    }
}
