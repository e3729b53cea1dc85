use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::classifier::{load_lookup_model, ViewpointModel};
use crate::error::{Error, Result};
use crate::gaussian::{ObjectId, RobotId};
use crate::geometry::{NoiseCovariance3, Pose2};

fn default_prune_ratio() -> f64 {
    0.01
}

fn default_samples() -> usize {
    100
}

fn default_initial_prior() -> [f64; 3] {
    [1e-4, 1e-4, 1e-6]
}

/// Scenario file contents. Units are part of the field names.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub steps: u64,
    pub num_classes: usize,
    /// Defaults to uniform.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
    pub robots: Vec<RobotConfig>,
    pub objects: Vec<ObjectConfig>,
    pub odometry_noise_diag_m2_rad2: [f64; 3],
    pub geometric_noise_diag_m2_rad2: [f64; 3],
    #[serde(default = "default_initial_prior")]
    pub initial_pose_prior_diag_m2_rad2: [f64; 3],
    pub sensing_range_m: f64,
    pub communication_range_m: f64,
    pub classifier: ClassifierConfig,
    #[serde(default = "default_prune_ratio")]
    pub prune_ratio: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub id: RobotId,
    pub initial_pose: Pose2,
    /// Points visited in order; the robot stops after the last one.
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub speed_m_per_step: Option<f64>,
    /// Relative motion per step, used instead of waypoints. Missing steps
    /// are zero motion.
    #[serde(default)]
    pub controls: Vec<Pose2>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub x_m: f64,
    pub y_m: f64,
    /// Overrides the robot speed while heading to this waypoint.
    #[serde(default)]
    pub speed_m_per_step: Option<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub id: ObjectId,
    pub pose: Pose2,
    pub class: u16,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierConfig {
    /// Two-class model with an ambiguous viewpoint at ψ = -90°.
    Aliasing,
    /// Viewpoint-independent means.
    Constant {
        means: Vec<Vec<f64>>,
        covariance: Vec<Vec<f64>>,
    },
    /// Grid file relative to the scenario file.
    Lookup {
        path: PathBuf,
        #[serde(default)]
        covariance: Option<Vec<Vec<f64>>>,
    },
}

/// A validated scenario with its classifier model loaded.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: Arc<ViewpointModel>,
    pub class_prior: DVector<f64>,
    pub odometry_noise: NoiseCovariance3,
    pub geometric_noise: NoiseCovariance3,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(format!("{what} must be a square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn diag(v: [f64; 3]) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::from(v))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ScenarioConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::new(config, path.parent().unwrap_or(Path::new(".")))
    }

    /// Validates `config`; lookup paths are resolved against `base_dir`.
    // Negated comparisons so that NaN fails every check.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(mut config: ScenarioConfig, base_dir: &Path) -> Result<Self> {
        let m = config.num_classes;
        if m < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if config.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        for (name, v) in [
            ("sensing_range_m", config.sensing_range_m),
            ("communication_range_m", config.communication_range_m),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&config.prune_ratio) {
            return Err(Error::config("prune_ratio must be in [0, 1)"));
        }
        if config.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        if config.robots.is_empty() {
            return Err(Error::config("at least one robot is required"));
        }
        let mut ids = BTreeSet::new();
        for r in &mut config.robots {
            if !ids.insert(r.id) {
                return Err(Error::config(format!("duplicate robot id {}", r.id)));
            }
            if !r.waypoints.is_empty() && !r.controls.is_empty() {
                return Err(Error::config(format!("robot {} has both waypoints and controls", r.id)));
            }
            if !r.waypoints.is_empty() {
                let base = r.speed_m_per_step;
                for w in &r.waypoints {
                    match w.speed_m_per_step.or(base) {
                        Some(s) if s > 0.0 => {}
                        _ => {
                            return Err(Error::config(format!(
                                "robot {} needs a positive speed_m_per_step for its waypoints",
                                r.id
                            )))
                        }
                    }
                }
            }
            r.initial_pose = Pose2::new(r.initial_pose.x, r.initial_pose.y, r.initial_pose.theta);
        }
        let mut ids = BTreeSet::new();
        for o in &mut config.objects {
            if !ids.insert(o.id) {
                return Err(Error::config(format!("duplicate object id {}", o.id)));
            }
            if o.class == 0 || o.class as usize > m {
                return Err(Error::config(format!("object {} has class {} outside 1..={m}", o.id, o.class)));
            }
            o.pose = Pose2::new(o.pose.x, o.pose.y, o.pose.theta);
        }

        let model = match &config.classifier {
            ClassifierConfig::Aliasing => ViewpointModel::aliasing(),
            ClassifierConfig::Constant { means, covariance } => ViewpointModel::constant(
                means.iter().map(|v| DVector::from_vec(v.clone())).collect(),
                matrix(covariance, "classifier covariance")?,
            )?,
            ClassifierConfig::Lookup { path, covariance } => {
                let table = load_lookup_model(&base_dir.join(path))?;
                let cov = match covariance {
                    Some(c) => matrix(c, "classifier covariance")?,
                    None => DMatrix::from_diagonal_element(table.num_classes(), table.num_classes(), 0.01),
                };
                ViewpointModel::lookup(table, cov)?
            }
        };
        if model.num_classes() != m {
            return Err(Error::config(format!(
                "classifier has {} classes but num_classes is {m}",
                model.num_classes()
            )));
        }
        let class_prior = match &config.class_prior {
            Some(p) => {
                if p.len() != m || p.iter().any(|v| !(*v > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::config("class_prior must be a positive probability vector of length num_classes"));
                }
                DVector::from_vec(p.clone())
            }
            None => DVector::from_element(m, 1.0 / m as f64),
        };
        let positive = |v: [f64; 3], name: &str| -> Result<()> {
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::config(format!("{name} entries must be positive")));
            }
            Ok(())
        };
        // Zero noise is allowed for measurement generation; inference needs
        // positive entries and checks them when a simulation is built.
        for (v, name) in [
            (config.odometry_noise_diag_m2_rad2, "odometry_noise_diag_m2_rad2"),
            (config.geometric_noise_diag_m2_rad2, "geometric_noise_diag_m2_rad2"),
        ] {
            if v.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::config(format!("{name} entries must be non-negative")));
            }
        }
        positive(config.initial_pose_prior_diag_m2_rad2, "initial_pose_prior_diag_m2_rad2")?;
        Ok(Self {
            odometry_noise: NoiseCovariance3::new(diag(config.odometry_noise_diag_m2_rad2))?,
            geometric_noise: NoiseCovariance3::new(diag(config.geometric_noise_diag_m2_rad2))?,
            model: Arc::new(model),
            class_prior,
            config,
        })
    }

    pub fn initial_prior_covariance(&self) -> Matrix3<f64> {
        diag(self.config.initial_pose_prior_diag_m2_rad2)
    }
}
