//! Information-form Gaussian beliefs over pose variables, factor graphs and a
//! dense Gauss-Newton backend.

mod density;
mod factor;
mod graph;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use density::{GaussianDensity, LinearizationPolicy};
pub use factor::{Factor, SemanticFactor};
pub use graph::{FactorGraph, GaussNewtonSettings};

pub type RobotId = u32;
pub type ObjectId = u64;

/// Identifies one pose variable.
///
/// Robot poses are owned by a robot and indexed by time step; object IDs are
/// global across robots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKey {
    Robot { owner: RobotId, step: u64 },
    Object(ObjectId),
}

impl VariableKey {
    pub fn robot(owner: RobotId, step: u64) -> Self {
        VariableKey::Robot { owner, step }
    }

    pub fn object(id: ObjectId) -> Self {
        VariableKey::Object(id)
    }

    pub fn is_object(&self) -> bool {
        matches!(self, VariableKey::Object(_))
    }

    pub fn object_id(&self) -> Option<ObjectId> {
        match self {
            VariableKey::Object(id) => Some(*id),
            VariableKey::Robot { .. } => None,
        }
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariableKey::Robot { owner, step } => write!(f, "x[r{owner}, k={step}]"),
            VariableKey::Object(id) => write!(f, "o[{id}]"),
        }
    }
}
