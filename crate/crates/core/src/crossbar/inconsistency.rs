//! Why element-wise masks resampled every cycle break dropout semantics on
//! moving windows: an input element read by several windows gets several
//! independent keep/drop decisions within a single inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::{bernoulli, check_rho};
use crate::error::{Error, Result};

use super::stream::{Coord, InputStream};

/// One keep bit per stream position per cycle, drawn independently.
pub fn sample_per_cycle_element_masks<R: Rng + ?Sized>(
    stream: &InputStream,
    rho: f64,
    rng: &mut R,
) -> Result<Vec<Vec<bool>>> {
    check_rho(rho)?;
    Ok(stream.cycles.iter().map(|c| c.iter().map(|_| !bernoulli(rng, rho)).collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub coord: Coord,
    /// `(cycle, position, keep)` for every read of the coordinate.
    pub reads: Vec<(usize, usize, bool)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub shared_coordinates: usize,
    pub violations: Vec<Violation>,
}

impl InconsistencyReport {
    pub fn count(&self) -> usize {
        self.violations.len()
    }
}

/// Lists every shared input coordinate whose reads saw differing mask bits.
pub fn demonstrate_mask_inconsistency(stream: &InputStream, masks: &[Vec<bool>]) -> Result<InconsistencyReport> {
    if masks.len() != stream.n_cycles() || masks.iter().any(|m| m.len() != stream.positions()) {
        return Err(Error::dims(
            "per-cycle masks",
            &[stream.n_cycles(), stream.positions()],
            &[masks.len(), masks.first().map_or(0, Vec::len)],
        ));
    }
    let shared = stream.shared_coordinates();
    let violations = shared
        .iter()
        .filter_map(|(&coord, reads)| {
            let reads: Vec<(usize, usize, bool)> = reads.iter().map(|&(t, p)| (t, p, masks[t][p])).collect();
            let first = reads[0].2;
            reads.iter().any(|r| r.2 != first).then_some(Violation { coord, reads })
        })
        .collect();
    Ok(InconsistencyReport { shared_coordinates: shared.len(), violations })
}
