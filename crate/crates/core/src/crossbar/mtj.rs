//! Behavioural model of the MTJ-based dropout module.
//!
//! A SET pulse switches the junction to the anti-parallel state with the
//! programmed probability; RESET restores the parallel state. While the HOLD
//! signal is asserted the state is frozen and sampling is illegal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::{bernoulli, check_rho};
use crate::error::{Error, Result};

/// Latency of one RESET + SET sampling operation.
pub const SAMPLING_LATENCY_NS: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MtjState {
    /// Low resistance: the driven word-lines stay enabled.
    Parallel,
    /// High resistance after a successful SET: the word-lines are disabled.
    AntiParallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtjDropoutModule {
    pub id: usize,
    state: MtjState,
    set_probability: f64,
    hold: bool,
    samples: u64,
}

impl MtjDropoutModule {
    pub fn new(id: usize, set_probability: f64) -> Result<Self> {
        check_rho(set_probability)?;
        Ok(Self { id, state: MtjState::Parallel, set_probability, hold: false, samples: 0 })
    }

    pub fn state(&self) -> MtjState {
        self.state
    }

    pub fn set_probability(&self) -> f64 {
        self.set_probability
    }

    pub fn is_held(&self) -> bool {
        self.hold
    }

    /// Number of RESET + SET operations performed so far.
    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// Whether the driven word-lines are enabled.
    pub fn keeps(&self) -> bool {
        self.state == MtjState::Parallel
    }

    pub fn sampling_latency_ns(&self) -> f64 {
        SAMPLING_LATENCY_NS
    }

    /// RESET followed by a stochastic SET. Illegal while held.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.hold {
            return Err(Error::IllegalTransition {
                module: self.id,
                message: "sampling requested while HOLD is asserted".into(),
            });
        }
        self.state = MtjState::Parallel;
        if bernoulli(rng, self.set_probability) {
            self.state = MtjState::AntiParallel;
        }
        self.samples += 1;
        Ok(())
    }

    /// Forces a state, as an externally injected mask would. Illegal while held.
    pub fn preset(&mut self, state: MtjState) -> Result<()> {
        if self.hold {
            return Err(Error::IllegalTransition { module: self.id, message: "preset while HOLD is asserted".into() });
        }
        self.state = state;
        Ok(())
    }

    pub fn assert_hold(&mut self) {
        self.hold = true;
    }

    pub fn release_hold(&mut self) {
        self.hold = false;
    }
}

/// One sampling operation on `module`.
pub fn mtj_sample<R: Rng + ?Sized>(module: &mut MtjDropoutModule, rng: &mut R) -> Result<()> {
    module.sample(rng)
}

/// `count` fresh modules with ids `0..count`.
pub fn module_bank(count: usize, set_probability: f64) -> Result<Vec<MtjDropoutModule>> {
    (0..count).map(|id| MtjDropoutModule::new(id, set_probability)).collect()
}
