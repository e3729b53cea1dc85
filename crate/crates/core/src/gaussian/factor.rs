use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{GaussianDensity, VariableKey};
use crate::classifier::{ClassLabel, ViewpointModel};
use crate::error::{Error, Result};
use crate::geometry::{between_jacobians, Pose2};

/// Semantic observation of an object under a fixed class hypothesis.
#[derive(Clone, Debug)]
pub struct SemanticFactor {
    pub robot: VariableKey,
    pub object: VariableKey,
    pub class: ClassLabel,
    pub model: Arc<ViewpointModel>,
    pub measurement: DVector<f64>,
}

#[derive(Clone, Debug)]
pub enum Factor {
    Prior {
        key: VariableKey,
        mean: Pose2,
        information: Matrix3<f64>,
    },
    /// Relative motion `from⁻¹ ∘ to` measured by odometry.
    Odometry {
        from: VariableKey,
        to: VariableKey,
        measurement: Pose2,
        information: Matrix3<f64>,
    },
    /// Object pose measured in the robot frame.
    Geometric {
        robot: VariableKey,
        object: VariableKey,
        measurement: Pose2,
        information: Matrix3<f64>,
    },
    Semantic(SemanticFactor),
    /// An information-form density (or ratio of densities) used as a factor.
    Density(GaussianDensity),
}

/// Whitened residual and per-variable Jacobian blocks of a least-squares
/// factor.
pub(crate) struct Linearized {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(VariableKey, DMatrix<f64>)>,
}

/// Upper-triangular `U` with `UᵀU = Λ`.
fn whitener(information: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    information
        .cholesky()
        .map(|c| c.l().transpose())
        .ok_or_else(|| Error::contract("factor information matrix is not positive-definite"))
}

fn to_dmatrix(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(3, 3, m.iter().copied())
}

fn to_dvector(v: &Vector3<f64>) -> DVector<f64> {
    DVector::from_iterator(3, v.iter().copied())
}

impl Factor {
    pub fn prior(key: VariableKey, mean: Pose2, covariance: &Matrix3<f64>) -> Result<Self> {
        let information = covariance
            .cholesky()
            .ok_or_else(|| Error::contract(format!("prior covariance on {key} is not positive-definite")))?
            .inverse();
        Ok(Factor::Prior { key, mean, information })
    }

    pub fn keys(&self) -> Vec<VariableKey> {
        match self {
            Factor::Prior { key, .. } => vec![*key],
            Factor::Odometry { from, to, .. } => vec![*from, *to],
            Factor::Geometric { robot, object, .. } => vec![*robot, *object],
            Factor::Semantic(s) => vec![s.robot, s.object],
            Factor::Density(d) => d.keys().to_vec(),
        }
    }

    /// True for factors that carry absolute information and so anchor the
    /// gauge of the variables they touch.
    pub fn is_anchor(&self) -> bool {
        matches!(self, Factor::Prior { .. } | Factor::Density(_))
    }

    /// Linearizes a least-squares factor at `value`; `None` for density
    /// factors, which enter the normal equations directly.
    pub(crate) fn linearize(&self, value: impl Fn(&VariableKey) -> Pose2) -> Result<Option<Linearized>> {
        let out = match self {
            Factor::Prior { key, mean, information } => {
                let u = whitener(information)?;
                let r = mean.local(&value(key));
                Linearized {
                    residual: to_dvector(&(u * r)),
                    jacobians: vec![(*key, to_dmatrix(&u))],
                }
            }
            Factor::Odometry {
                from: a,
                to: b,
                measurement,
                information,
            }
            | Factor::Geometric {
                robot: a,
                object: b,
                measurement,
                information,
            } => {
                let u = whitener(information)?;
                let (pa, pb) = (value(a), value(b));
                let r = measurement.local(&pa.between(&pb));
                let (ja, jb) = between_jacobians(&pa, &pb);
                Linearized {
                    residual: to_dvector(&(u * r)),
                    jacobians: vec![(*a, to_dmatrix(&(u * ja))), (*b, to_dmatrix(&(u * jb)))],
                }
            }
            Factor::Semantic(s) => s.linearize(value(&s.robot), value(&s.object))?,
            Factor::Density(_) => return Ok(None),
        };
        Ok(Some(out))
    }
}

impl SemanticFactor {
    /// Whitened residual `L⁻¹(h_c(rel) - z)` with `LLᵀ = Σ`.
    fn residual(&self, robot: &Pose2, object: &Pose2) -> Result<DVector<f64>> {
        let (mean, cov) = self.model.predict(self.class, &robot.between(object))?;
        let l = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::contract("semantic factor needs a positive-definite covariance"))?
            .l();
        Ok(l.solve_lower_triangular(&(mean - &self.measurement))
            .expect("cholesky factor has a positive diagonal"))
    }

    fn linearize(&self, robot: Pose2, object: Pose2) -> Result<Linearized> {
        const STEP: f64 = 1e-6;
        let residual = self.residual(&robot, &object)?;
        let mut jr = DMatrix::zeros(residual.len(), 3);
        let mut jo = DMatrix::zeros(residual.len(), 3);
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = STEP;
            let col = (self.residual(&robot.retract(&d), &object)? - self.residual(&robot.retract(&-d), &object)?)
                / (2.0 * STEP);
            jr.set_column(i, &col);
            let col = (self.residual(&robot, &object.retract(&d))? - self.residual(&robot, &object.retract(&-d))?)
                / (2.0 * STEP);
            jo.set_column(i, &col);
        }
        Ok(Linearized {
            residual,
            jacobians: vec![(self.robot, jr), (self.object, jo)],
        })
    }
}
