//! Viewpoint-dependent semantic measurement models.
//!
//! A classifier output `z` (a probability vector over `M` classes) is modeled
//! as Gaussian with a class- and viewpoint-dependent mean:
//! `z ~ N(h_c(rel), Σ_c)`, where `rel = robot⁻¹ ∘ object`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::ObjectId;
use crate::geometry::{wrap_angle, Pose2};

/// Class label in `1..=M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(pub u16);

impl ClassLabel {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        ClassLabel(i as u16 + 1)
    }

    /// All labels for `m` classes.
    pub fn all(m: usize) -> impl Iterator<Item = ClassLabel> {
        (0..m).map(ClassLabel::from_index)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// A classifier output associated with an object.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMeasurement {
    pub object: ObjectId,
    pub probs: DVector<f64>,
}

/// Gaussian noise on the classifier output, `M x M`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticNoise {
    cov: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    /// Cholesky factor of the information matrix and log-determinant of the
    /// covariance; absent for singular covariances.
    info: Option<(DMatrix<f64>, f64)>,
}

impl SemanticNoise {
    pub fn new(cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("semantic covariance must be a finite square matrix"));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 {
            return Err(Error::config("semantic covariance is not symmetric"));
        }
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
            return Err(Error::config("semantic covariance is not positive semi-definite"));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        let info = cov.clone().cholesky().map(|ch| {
            let log_det = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            (ch.l(), log_det)
        });
        Ok(Self { cov, sqrt, info })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Gaussian log-density of a residual.
    pub fn log_density(&self, residual: &DVector<f64>) -> Result<f64> {
        let (l, log_det) = self
            .info
            .as_ref()
            .ok_or_else(|| Error::contract("semantic likelihood needs a positive-definite covariance"))?;
        let w = l
            .solve_lower_triangular(residual)
            .expect("cholesky factor has a positive diagonal");
        Ok(-0.5 * w.norm_squared() - 0.5 * log_det - 0.5 * self.dim() as f64 * (2.0 * PI).ln())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.sqrt * n
    }
}

/// Mean probability vectors on a (ψ, θ) grid, one table per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTable {
    num_classes: usize,
    psi_deg: Vec<f64>,
    theta_deg: Vec<f64>,
    /// Indexed `[class][psi][theta]`.
    nodes: Vec<Vec<Vec<DVector<f64>>>>,
}

impl LookupTable {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn mean(&self, class: ClassLabel, psi_deg: f64, theta_deg: f64) -> DVector<f64> {
        let (i0, i1, s) = bracket(&self.psi_deg, psi_deg);
        let (j0, j1, t) = bracket(&self.theta_deg, theta_deg);
        let g = &self.nodes[class.index()];
        let v = &g[i0][j0] * ((1.0 - s) * (1.0 - t))
            + &g[i1][j0] * (s * (1.0 - t))
            + &g[i0][j1] * ((1.0 - s) * t)
            + &g[i1][j1] * (s * t);
        to_simplex(v)
    }
}

/// Interpolation cell of `x` on a sorted grid, clamped at the ends.
fn bracket(grid: &[f64], x: f64) -> (usize, usize, f64) {
    if grid.len() == 1 || x <= grid[0] {
        return (0, 0, 0.0);
    }
    let last = grid.len() - 1;
    if x >= grid[last] {
        return (last, last, 0.0);
    }
    let hi = grid.partition_point(|&g| g <= x);
    let lo = hi - 1;
    (lo, hi, (x - grid[lo]) / (grid[hi] - grid[lo]))
}

/// Clamps to non-negative entries and rescales to sum one.
fn to_simplex(mut v: DVector<f64>) -> DVector<f64> {
    v.apply(|x| *x = x.clamp(0.0, 1.0));
    let s = v.sum();
    if s > 0.0 {
        v / s
    } else {
        let n = v.len();
        DVector::from_element(n, 1.0 / n as f64)
    }
}

/// Per-class mean function and covariance of the classifier output.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewpointModel {
    /// Two-class model with perceptual aliasing: both classes predict
    /// `[0.5, 0.5]` when viewed from ψ = -90° and are best separated at +90°.
    Aliasing { noise: SemanticNoise },
    /// Viewpoint-independent means, one per class.
    Constant { means: Vec<DVector<f64>>, noise: SemanticNoise },
    /// Means interpolated from a (ψ, θ) grid.
    Lookup { table: LookupTable, noise: SemanticNoise },
}

impl ViewpointModel {
    /// Square-root information factor of the aliasing model's covariance.
    pub const ALIASING_SQRT_INFO: [[f64; 2]; 2] = [[1.5, -0.75], [0.0, 1.5]];

    /// The two-class aliasing model with covariance `(RᵀR)⁻¹`.
    pub fn aliasing() -> Self {
        let [[a, b], [c, d]] = Self::ALIASING_SQRT_INFO;
        let r = Matrix2::new(a, b, c, d);
        let cov = (r.transpose() * r)
            .try_inverse()
            .expect("aliasing square-root information is invertible");
        let cov = DMatrix::from_iterator(2, 2, cov.iter().copied());
        ViewpointModel::Aliasing {
            noise: SemanticNoise::new((&cov + cov.transpose()) * 0.5).expect("valid covariance"),
        }
    }

    pub fn constant(means: Vec<DVector<f64>>, cov: DMatrix<f64>) -> Result<Self> {
        let m = means.len();
        if m < 2 {
            return Err(Error::config("a classifier model needs at least two classes"));
        }
        for (i, mean) in means.iter().enumerate() {
            if mean.len() != m || mean.iter().any(|p| !(0.0..=1.0).contains(p)) || (mean.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "mean of class {} is not a probability vector of length {m}",
                    i + 1
                )));
            }
        }
        let noise = SemanticNoise::new(cov)?;
        if noise.dim() != m {
            return Err(Error::config(format!("semantic covariance must be {m}x{m}")));
        }
        Ok(ViewpointModel::Constant { means, noise })
    }

    pub fn lookup(table: LookupTable, cov: DMatrix<f64>) -> Result<Self> {
        let noise = SemanticNoise::new(cov)?;
        if noise.dim() != table.num_classes {
            return Err(Error::config(format!(
                "semantic covariance must be {m}x{m}",
                m = table.num_classes
            )));
        }
        Ok(ViewpointModel::Lookup { table, noise })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ViewpointModel::Aliasing { .. } => 2,
            ViewpointModel::Constant { means, .. } => means.len(),
            ViewpointModel::Lookup { table, .. } => table.num_classes,
        }
    }

    pub fn noise(&self) -> &SemanticNoise {
        match self {
            ViewpointModel::Aliasing { noise }
            | ViewpointModel::Constant { noise, .. }
            | ViewpointModel::Lookup { noise, .. } => noise,
        }
    }

    fn check_class(&self, class: ClassLabel) -> Result<()> {
        if class.0 == 0 || class.index() >= self.num_classes() {
            return Err(Error::contract(format!(
                "class label {} outside 1..={}",
                class.0,
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Predicted mean and covariance for an object at `rel` in the robot frame.
    ///
    /// ψ is the yaw of `rel`; θ is the bearing of the camera seen from the
    /// object frame.
    pub fn predict(&self, class: ClassLabel, rel: &Pose2) -> Result<(DVector<f64>, &DMatrix<f64>)> {
        self.check_class(class)?;
        if !rel.is_finite() {
            return Err(Error::contract("relative pose is not finite"));
        }
        let psi = rel.theta;
        let mean = match self {
            ViewpointModel::Aliasing { .. } => {
                let hi = 0.25 * psi.sin() + 0.75;
                let lo = 0.25 * (1.0 - psi.sin());
                if class.0 == 1 {
                    DVector::from_vec(vec![hi, lo])
                } else {
                    DVector::from_vec(vec![lo, hi])
                }
            }
            ViewpointModel::Constant { means, .. } => means[class.index()].clone(),
            ViewpointModel::Lookup { table, .. } => {
                let cam = rel.inverse().translation();
                let theta = wrap_angle(cam.y.atan2(cam.x));
                table.mean(class, psi.to_degrees(), theta.to_degrees())
            }
        };
        Ok((mean, self.noise().covariance()))
    }

    /// `log p(z | c, robot, object)`.
    pub fn semantic_log_likelihood(
        &self,
        z: &DVector<f64>,
        class: ClassLabel,
        robot: &Pose2,
        object: &Pose2,
    ) -> Result<f64> {
        let (mean, _) = self.predict(class, &robot.between(object))?;
        if z.len() != mean.len() {
            return Err(Error::contract(format!(
                "semantic measurement has {} entries, model has {} classes",
                z.len(),
                mean.len()
            )));
        }
        self.noise().log_density(&(z - mean))
    }

    /// Draws a classifier output for an object of class `class` at `rel`,
    /// clamped to [0, 1] and renormalized.
    pub fn sample_semantic<R: Rng + ?Sized>(
        &self,
        object: ObjectId,
        class: ClassLabel,
        rel: &Pose2,
        rng: &mut R,
    ) -> Result<SemanticMeasurement> {
        let (mean, _) = self.predict(class, rel)?;
        let z = mean + self.noise().sample(rng);
        Ok(SemanticMeasurement {
            object,
            probs: to_simplex(z),
        })
    }
}

/// Loads a lookup grid from CSV with header `class,psi_deg,theta_deg,p1..pM`.
///
/// The ψ grid must span [-180, 180]. Queries outside the θ grid are clamped
/// to its ends.
pub fn load_lookup_model(path: &Path) -> Result<LookupTable> {
    let err = |msg: String| Error::Lookup(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    let m = header.len().saturating_sub(3);
    let expected: Vec<String> = ["class", "psi_deg", "theta_deg"]
        .into_iter()
        .map(String::from)
        .chain((1..=m).map(|i| format!("p{i}")))
        .collect();
    if m < 2 || header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(err(format!("header must be {}", expected.join(","))));
    }

    let mut rows: BTreeMap<(u16, i64, i64), DVector<f64>> = BTreeMap::new();
    let mut psis = Vec::new();
    let mut thetas = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let row = line + 2;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("row {row}: field {} is not a number", i + 1)))
        };
        let class: u16 = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .filter(|c| (1..=m as u16).contains(c))
            .ok_or_else(|| err(format!("row {row}: class must be in 1..={m}")))?;
        let psi = num(1)?;
        let theta = num(2)?;
        let p = DVector::from_iterator(m, (0..m).map(|i| num(3 + i)).collect::<Result<Vec<_>>>()?);
        if p.iter().any(|v| *v < -1e-3 || *v > 1.0 + 1e-3) || (p.sum() - 1.0).abs() > 1e-3 {
            return Err(err(format!("row {row}: probabilities do not sum to one")));
        }
        // Grid coordinates keyed at micro-degree resolution.
        let key = (class, (psi * 1e6).round() as i64, (theta * 1e6).round() as i64);
        if rows.insert(key, p).is_some() {
            return Err(err(format!("row {row}: duplicate grid node")));
        }
        psis.push(key.1);
        thetas.push(key.2);
    }
    psis.sort_unstable();
    psis.dedup();
    thetas.sort_unstable();
    thetas.dedup();
    if psis.first() != Some(&-180_000_000) || psis.last() != Some(&180_000_000) {
        return Err(err("psi_deg grid must span -180..180".into()));
    }
    let mut nodes = Vec::with_capacity(m);
    for c in 1..=m as u16 {
        let mut by_psi = Vec::with_capacity(psis.len());
        for &psi in &psis {
            let mut by_theta = Vec::with_capacity(thetas.len());
            for &theta in &thetas {
                let p = rows
                    .get(&(c, psi, theta))
                    .ok_or_else(|| {
                        err(format!(
                            "missing node class={c} psi={} theta={}",
                            psi as f64 / 1e6,
                            theta as f64 / 1e6
                        ))
                    })?
                    .clone();
                by_theta.push(p);
            }
            by_psi.push(by_theta);
        }
        nodes.push(by_psi);
    }
    Ok(LookupTable {
        num_classes: m,
        psi_deg: psis.iter().map(|&v| v as f64 / 1e6).collect(),
        theta_deg: thetas.iter().map(|&v| v as f64 / 1e6).collect(),
        nodes,
    })
}
