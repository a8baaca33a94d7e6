//! Iteration traces recorded during inference.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, S3cError};

/// Which half-update (or CG step) a trace point was recorded after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePhase {
    /// After the damped slab update of an iteration.
    Slab,
    /// After one conjugate-gradient step inside the slab phase.
    CgStep,
    /// After the damped spike update closing an iteration.
    Spike,
}

/// The energy functional and sparsity counts at one point of the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    /// Outer iteration index, 0-based.
    pub iteration: usize,
    pub phase: UpdatePhase,
    /// Energy functional F after this update.
    pub functional: f64,
    /// Number of units with spike probability above 0.5.
    pub active_at_half: usize,
    /// Number of units with spike probability above 0.01.
    pub active_at_hundredth: usize,
}

/// Recorded progress of one inference run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferenceTrace {
    pub points: Vec<TracePoint>,
}

impl InferenceTrace {
    /// All functional values in recording order.
    pub fn functional_values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.functional).collect()
    }

    /// Points closing each full iteration (after the spike update).
    pub fn iteration_points(&self) -> impl Iterator<Item = &TracePoint> {
        self.points.iter().filter(|p| p.phase == UpdatePhase::Spike)
    }

    /// Functional values of the CG steps inside one outer iteration.
    pub fn cg_phase(&self, iteration: usize) -> Vec<f64> {
        self.points
            .iter()
            .filter(|p| p.iteration == iteration && p.phase == UpdatePhase::CgStep)
            .map(|p| p.functional)
            .collect()
    }

    /// Final functional value, if anything was recorded.
    pub fn final_functional(&self) -> Option<f64> {
        self.points.last().map(|p| p.functional)
    }

    /// Writes one CSV row per completed iteration:
    /// `iteration,F,n_active@0.5,n_active@0.01`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| S3cError::io(path.display().to_string(), e))?;
        let io_err = |e| S3cError::io(path.display().to_string(), e);
        writeln!(file, "iteration,F,n_active@0.5,n_active@0.01").map_err(io_err)?;
        for p in self.iteration_points() {
            writeln!(
                file,
                "{},{},{},{}",
                p.iteration, p.functional, p.active_at_half, p.active_at_hundredth
            )
            .map_err(io_err)?;
        }
        Ok(())
    }
}
