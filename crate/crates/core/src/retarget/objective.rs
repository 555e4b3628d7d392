//! Similarity objectives between robot palm/fingertip positions and human
//! keypoint targets.
//!
//! Each objective is a sum of squared 3-D residuals. A residual compares the
//! robot's vector `x_a - x_b` with the target's `t_a - t_b`, where points are
//! indexed palm = 0, fingertip i = i + 1, and `b` may be absent (absolute
//! position).

use std::fmt;
use std::sync::Arc;

use crate::registry::Registry;

pub const PALM: usize = 0;

pub const POSITION: &str = "position";
pub const VECTOR: &str = "vector";
pub const DEXPILOT: &str = "dexpilot";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualTerm {
    pub point: usize,
    pub relative_to: Option<usize>,
}

impl ResidualTerm {
    pub fn absolute(point: usize) -> Self {
        Self {
            point,
            relative_to: None,
        }
    }

    pub fn relative(point: usize, to: usize) -> Self {
        Self {
            point,
            relative_to: Some(to),
        }
    }
}

pub trait SimilarityObjective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Residual terms for a hand with `num_tips` fingertips.
    fn terms(&self, num_tips: usize) -> Vec<ResidualTerm>;
}

impl fmt::Debug for dyn SimilarityObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Absolute palm and fingertip positions.
#[derive(Debug, Clone, Copy, Default)]
pub struct PositionObjective;

impl SimilarityObjective for PositionObjective {
    fn name(&self) -> &'static str {
        POSITION
    }

    fn terms(&self, num_tips: usize) -> Vec<ResidualTerm> {
        (0..=num_tips).map(ResidualTerm::absolute).collect()
    }
}

/// Palm-to-fingertip vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct VectorObjective;

impl SimilarityObjective for VectorObjective {
    fn name(&self) -> &'static str {
        VECTOR
    }

    fn terms(&self, num_tips: usize) -> Vec<ResidualTerm> {
        (1..=num_tips).map(|t| ResidualTerm::relative(t, PALM)).collect()
    }
}

/// Palm-to-fingertip vectors plus every fingertip-to-fingertip vector
/// (without distance-dependent switching weights).
#[derive(Debug, Clone, Copy, Default)]
pub struct DexPilotObjective;

impl SimilarityObjective for DexPilotObjective {
    fn name(&self) -> &'static str {
        DEXPILOT
    }

    fn terms(&self, num_tips: usize) -> Vec<ResidualTerm> {
        let mut terms = VectorObjective.terms(num_tips);
        for i in 1..=num_tips {
            for j in i + 1..=num_tips {
                terms.push(ResidualTerm::relative(i, j));
            }
        }
        terms
    }
}

pub fn objective_registry() -> Registry<dyn SimilarityObjective> {
    let mut reg: Registry<dyn SimilarityObjective> = Registry::new("objective");
    reg.register(POSITION, Arc::new(PositionObjective));
    reg.register(VECTOR, Arc::new(VectorObjective));
    reg.register(DEXPILOT, Arc::new(DexPilotObjective));
    reg
}
