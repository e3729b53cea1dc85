//! Hybrid beliefs: one Gaussian pose belief per joint class realization,
//! with log-space weights.

mod realization;
mod update;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{DVector, Matrix3};

pub use realization::ClassRealization;
pub use update::{ExternalFactor, ExternalTerm, GeometricMeasurement, StepInputs, UpdateContext};

use crate::classifier::{ClassLabel, ViewpointModel};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianDensity, ObjectId, RobotId, VariableKey};
use crate::geometry::{wrap_angle, Pose2};

/// Standard deviation (m and rad) of the weak prior placed on a newly
/// observed object.
pub const OBJECT_PRIOR_SIGMA: f64 = 1e3;

/// Weak prior centered on a first-observation estimate.
pub fn weak_object_prior(object: ObjectId, mean: Pose2) -> GaussianDensity {
    let var = OBJECT_PRIOR_SIGMA * OBJECT_PRIOR_SIGMA;
    GaussianDensity::from_pose_prior(VariableKey::object(object), mean, &(Matrix3::identity() * var))
        .expect("diagonal prior is positive-definite")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub realization: ClassRealization,
    /// Belief over the current robot pose and every known object.
    pub belief: GaussianDensity,
    pub log_weight: f64,
}

/// Weighted means of a hybrid belief and the per-hypothesis moments behind
/// them.
#[derive(Clone, Debug)]
pub struct PoseSummary {
    pub mean: BTreeMap<VariableKey, Pose2>,
    pub hypotheses: Vec<HypothesisSummary>,
}

#[derive(Clone, Debug)]
pub struct HypothesisSummary {
    pub weight: f64,
    pub mean: BTreeMap<VariableKey, Pose2>,
    /// Marginal 3x3 covariance of each variable.
    pub covariance: BTreeMap<VariableKey, Matrix3<f64>>,
}

#[derive(Clone, Debug)]
pub struct HybridBelief {
    owner: RobotId,
    step: u64,
    num_classes: usize,
    class_prior: DVector<f64>,
    /// Sorted by realization.
    hypotheses: Vec<Hypothesis>,
    object_priors: BTreeMap<ObjectId, GaussianDensity>,
}

pub(crate) fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl HybridBelief {
    /// Belief at step 0 with no known objects.
    pub fn new(owner: RobotId, initial_pose: GaussianDensity, class_prior: DVector<f64>) -> Result<Self> {
        if initial_pose.keys() != [VariableKey::robot(owner, 0)] {
            return Err(Error::contract(format!(
                "initial belief must be over x[r{owner}, k=0] only"
            )));
        }
        let m = class_prior.len();
        if m < 2 || class_prior.iter().any(|p| *p <= 0.0) || (class_prior.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::config("class prior must be a positive probability vector with M >= 2"));
        }
        Ok(Self {
            owner,
            step: 0,
            num_classes: m,
            class_prior,
            hypotheses: vec![Hypothesis {
                realization: ClassRealization::new(),
                belief: initial_pose,
                log_weight: 0.0,
            }],
            object_priors: BTreeMap::new(),
        })
    }

    /// Assembles a belief from explicit hypotheses; weights are normalized.
    pub fn from_parts(
        owner: RobotId,
        step: u64,
        class_prior: DVector<f64>,
        hypotheses: Vec<Hypothesis>,
        object_priors: BTreeMap<ObjectId, GaussianDensity>,
    ) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::contract("a hybrid belief needs at least one hypothesis"));
        }
        let known: BTreeSet<ObjectId> = object_priors.keys().copied().collect();
        for h in &hypotheses {
            if h.realization.objects().ne(known.iter().copied()) {
                return Err(Error::contract(format!(
                    "realization {} does not cover the known objects",
                    h.realization
                )));
            }
        }
        let mut hb = Self {
            owner,
            step,
            num_classes: class_prior.len(),
            class_prior,
            hypotheses,
            object_priors,
        };
        hb.hypotheses.sort_by(|a, b| a.realization.cmp(&b.realization));
        if hb.hypotheses.windows(2).any(|w| w[0].realization == w[1].realization) {
            return Err(Error::contract("duplicate realization"));
        }
        hb.normalize();
        Ok(hb)
    }

    pub fn owner(&self) -> RobotId {
        self.owner
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn robot_key(&self) -> VariableKey {
        VariableKey::robot(self.owner, self.step)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_prior(&self) -> &DVector<f64> {
        &self.class_prior
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn hypothesis(&self, realization: &ClassRealization) -> Option<&Hypothesis> {
        self.hypotheses
            .binary_search_by(|h| h.realization.cmp(realization))
            .ok()
            .map(|i| &self.hypotheses[i])
    }

    pub fn known_objects(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.object_priors.keys().copied()
    }

    pub fn knows(&self, object: ObjectId) -> bool {
        self.object_priors.contains_key(&object)
    }

    pub fn object_priors(&self) -> &BTreeMap<ObjectId, GaussianDensity> {
        &self.object_priors
    }

    /// Prior probability of a realization, `∏ P(c_o)`.
    pub fn log_class_prior(&self, realization: &ClassRealization) -> f64 {
        realization.iter().map(|(_, c)| self.class_prior[c.index()].ln()).sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.hypotheses.iter().map(|h| h.log_weight.exp()).collect()
    }

    fn normalize(&mut self) {
        let total = log_sum_exp(self.hypotheses.iter().map(|h| h.log_weight));
        for h in &mut self.hypotheses {
            h.log_weight -= total;
        }
    }

    /// Adds objects to every hypothesis: the hypothesis set becomes the
    /// Cartesian product with the new objects' classes, weights pick up the
    /// class prior and beliefs the pose priors.
    pub fn expand_for_new_objects(&mut self, new: &[(ObjectId, GaussianDensity)]) -> Result<()> {
        if new.is_empty() {
            return Ok(());
        }
        let mut seen = BTreeSet::new();
        for (id, prior) in new {
            if self.knows(*id) || !seen.insert(*id) {
                return Err(Error::contract(format!("object {id} is already known")));
            }
            if prior.keys() != [VariableKey::object(*id)] {
                return Err(Error::contract(format!("prior for object {id} must be over o[{id}] only")));
            }
        }
        let mut product = GaussianDensity::empty();
        for (_, prior) in new {
            product = product.multiply(prior)?;
        }
        let mut out = Vec::with_capacity(self.hypotheses.len() * self.num_classes.pow(new.len() as u32));
        for h in &self.hypotheses {
            let belief = h.belief.multiply(&product)?;
            let mut partial = vec![(h.realization.clone(), h.log_weight)];
            for (id, _) in new {
                partial = partial
                    .into_iter()
                    .flat_map(|(r, w)| {
                        ClassLabel::all(self.num_classes)
                            .map(move |c| (r.with(*id, c), w))
                            .collect::<Vec<_>>()
                    })
                    .map(|(r, w)| {
                        let c = r.get(*id).expect("just inserted");
                        (r, w + self.class_prior[c.index()].ln())
                    })
                    .collect();
            }
            out.extend(partial.into_iter().map(|(realization, log_weight)| Hypothesis {
                realization,
                belief: belief.clone(),
                log_weight,
            }));
        }
        out.sort_by(|a, b| a.realization.cmp(&b.realization));
        self.hypotheses = out;
        self.object_priors.extend(new.iter().cloned());
        self.normalize();
        Ok(())
    }

    /// First-observation estimates of objects in `inputs` that are not yet
    /// known, from the highest-weight hypothesis's predicted robot pose.
    pub fn new_object_guesses(&self, inputs: &StepInputs) -> Result<Vec<(ObjectId, Pose2)>> {
        let best = self
            .hypotheses
            .iter()
            .max_by(|a, b| a.log_weight.total_cmp(&b.log_weight))
            .expect("non-empty");
        let robot = best.belief.mean()?[&self.robot_key()].compose(&inputs.odometry);
        let mut out: Vec<(ObjectId, Pose2)> = Vec::new();
        for g in &inputs.geometric {
            if !self.knows(g.object) && !out.iter().any(|(o, _)| *o == g.object) {
                out.push((g.object, robot.compose(&g.measurement)));
            }
        }
        Ok(out)
    }

    /// Removes hypotheses whose weight is below `ratio` times the largest one.
    pub fn prune(&mut self, ratio: f64) {
        if ratio <= 0.0 || self.hypotheses.len() <= 1 {
            return;
        }
        let max = self
            .hypotheses
            .iter()
            .map(|h| h.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let floor = ratio.ln() + max;
        self.hypotheses.retain(|h| h.log_weight >= floor);
        self.normalize();
    }

    /// Marginal class distribution of `object`.
    pub fn class_marginal(&self, object: ObjectId) -> Result<DVector<f64>> {
        if !self.knows(object) {
            return Err(Error::contract(format!("object {object} is not known to robot {}", self.owner)));
        }
        let mut p = DVector::zeros(self.num_classes);
        for h in &self.hypotheses {
            let c = h.realization.get(object).expect("realization covers known objects");
            p[c.index()] += h.log_weight.exp();
        }
        Ok(p)
    }

    /// Weighted mean of every variable (angles by circular mean) together
    /// with per-hypothesis means and marginal covariances.
    pub fn pose_summary(&self) -> Result<PoseSummary> {
        let mut hypotheses = Vec::with_capacity(self.hypotheses.len());
        for h in &self.hypotheses {
            let mean = h.belief.mean()?;
            let cov = h.belief.covariance()?;
            let covariance = h
                .belief
                .keys()
                .iter()
                .enumerate()
                .map(|(i, k)| (*k, cov.fixed_view::<3, 3>(3 * i, 3 * i).into_owned()))
                .collect();
            hypotheses.push(HypothesisSummary {
                weight: h.log_weight.exp(),
                mean,
                covariance,
            });
        }
        let mut acc: BTreeMap<VariableKey, (f64, f64, f64, f64, f64)> = BTreeMap::new();
        for h in &hypotheses {
            for (k, p) in &h.mean {
                let e = acc.entry(*k).or_default();
                e.0 += h.weight * p.x;
                e.1 += h.weight * p.y;
                e.2 += h.weight * p.theta.sin();
                e.3 += h.weight * p.theta.cos();
                e.4 += h.weight;
            }
        }
        let mean = acc
            .into_iter()
            .map(|(k, (x, y, s, c, w))| (k, Pose2::new(x / w, y / w, wrap_angle(s.atan2(c)))))
            .collect();
        Ok(PoseSummary { mean, hypotheses })
    }

    /// Replaces the hypotheses after an update.
    pub(crate) fn set_hypotheses(&mut self, step: u64, hypotheses: Vec<Hypothesis>) {
        self.step = step;
        self.hypotheses = hypotheses;
        self.normalize();
    }

    pub(crate) fn model_classes_match(&self, model: &Arc<ViewpointModel>) -> Result<()> {
        if model.num_classes() != self.num_classes {
            return Err(Error::contract(format!(
                "classifier model has {} classes, belief has {}",
                model.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }
}
