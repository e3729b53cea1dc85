use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3};

use super::{log_sum_exp, ClassRealization, HybridBelief, Hypothesis};
use crate::classifier::{SemanticMeasurement, ViewpointModel};
use crate::error::{Error, Result};
use crate::gaussian::{Factor, FactorGraph, GaussNewtonSettings, GaussianDensity, ObjectId, RobotId, SemanticFactor, VariableKey};
use crate::geometry::Pose2;
use crate::par::Execution;
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricMeasurement {
    pub object: ObjectId,
    /// Object pose in the robot frame.
    pub measurement: Pose2,
}

/// Everything one robot measures at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub step: u64,
    /// Relative motion from the previous pose.
    pub odometry: Pose2,
    pub geometric: Vec<GeometricMeasurement>,
    pub semantic: Vec<SemanticMeasurement>,
}

/// Models and solver settings shared by all updates of a run.
#[derive(Clone, Debug)]
pub struct UpdateContext {
    pub model: Arc<ViewpointModel>,
    pub odometry_information: Matrix3<f64>,
    pub geometric_information: Matrix3<f64>,
    /// Samples per hypothesis for the semantic part of the weight integral.
    pub n_samples: usize,
    pub seed: u64,
    pub gauss_newton: GaussNewtonSettings,
    pub execution: Execution,
}

/// Produces the external term of each realization.
pub type ExternalFactor<'a> = dyn Fn(&ClassRealization) -> Result<ExternalTerm> + Sync + 'a;

/// Information from other robots for one realization: a continuous factor
/// over object poses and a log discrete factor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalTerm {
    pub density: GaussianDensity,
    pub log_phi: f64,
}

impl HybridBelief {
    /// Advances the belief by one step using only local measurements.
    pub fn local_update(&mut self, inputs: &StepInputs, ctx: &UpdateContext) -> Result<()> {
        self.update(inputs, ctx, None)
    }

    /// Advances the belief by one step. `external` supplies, per realization,
    /// information received from other robots since the previous step.
    ///
    /// Every measured object must already be known.
    pub fn update(
        &mut self,
        inputs: &StepInputs,
        ctx: &UpdateContext,
        external: Option<&ExternalFactor<'_>>,
    ) -> Result<()> {
        if inputs.step != self.step + 1 {
            return Err(Error::contract(format!(
                "robot {} is at step {} and cannot process step {}",
                self.owner, self.step, inputs.step
            )));
        }
        if ctx.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        self.model_classes_match(&ctx.model)?;
        let objects = inputs
            .geometric
            .iter()
            .map(|g| g.object)
            .chain(inputs.semantic.iter().map(|s| s.object));
        for o in objects {
            if !self.knows(o) {
                return Err(Error::contract(format!(
                    "measurement of object {o} which robot {} has not added",
                    self.owner
                )));
            }
        }
        let owner = self.owner;
        let updated = ctx.execution.map(&self.hypotheses, |h| {
            let ext = match external {
                Some(f) => f(&h.realization)?,
                None => ExternalTerm::default(),
            };
            update_hypothesis(h, owner, inputs, ctx, ext)
        });
        let hypotheses = updated.into_iter().collect::<Result<Vec<_>>>()?;
        self.set_hypotheses(inputs.step, hypotheses);
        Ok(())
    }
}

fn update_hypothesis(
    h: &Hypothesis,
    owner: RobotId,
    inputs: &StepInputs,
    ctx: &UpdateContext,
    ext: ExternalTerm,
) -> Result<Hypothesis> {
    let prev = VariableKey::robot(owner, inputs.step - 1);
    let cur = VariableKey::robot(owner, inputs.step);
    let mut graph = FactorGraph::with_classes(h.realization.as_map().clone());
    graph.add_factor(Factor::Density(h.belief.clone()))?;
    graph.add_factor(Factor::Odometry {
        from: prev,
        to: cur,
        measurement: inputs.odometry,
        information: ctx.odometry_information,
    })?;
    if !ext.density.is_empty() {
        graph.add_factor(Factor::Density(ext.density))?;
    }
    let keep: Vec<VariableKey> = graph.keys().iter().copied().filter(|k| *k != prev).collect();
    let propagated = graph.optimize(&ctx.gauss_newton)?.marginalize(&keep)?;
    let mut log_weight = h.log_weight + ext.log_phi;

    if inputs.geometric.is_empty() && inputs.semantic.is_empty() {
        return Ok(Hypothesis {
            realization: h.realization.clone(),
            belief: propagated,
            log_weight,
        });
    }

    let mut rng = rng_for(&[
        ctx.seed,
        stream::WEIGHT_SAMPLES,
        owner as u64,
        inputs.step,
        h.realization.stable_hash(),
    ]);
    log_weight += log_evidence(&propagated, cur, &h.realization, inputs, ctx, &mut rng)?;

    for g in &inputs.geometric {
        graph.add_factor(Factor::Geometric {
            robot: cur,
            object: VariableKey::object(g.object),
            measurement: g.measurement,
            information: ctx.geometric_information,
        })?;
    }
    for s in &inputs.semantic {
        let class = h
            .realization
            .get(s.object)
            .ok_or_else(|| Error::contract(format!("object {} has no class in {}", s.object, h.realization)))?;
        graph.add_factor(Factor::Semantic(SemanticFactor {
            robot: cur,
            object: VariableKey::object(s.object),
            class,
            model: ctx.model.clone(),
            measurement: s.probs.clone(),
        }))?;
    }
    let belief = graph.optimize(&ctx.gauss_newton)?.marginalize(&keep)?;
    Ok(Hypothesis {
        realization: h.realization.clone(),
        belief,
        log_weight,
    })
}

/// Log of the measurement likelihood integrated over the propagated belief
/// of the involved variables (current robot pose and observed objects).
///
/// The geometric part is integrated in closed form after linearization; the
/// semantic part is averaged over samples from the belief conditioned on the
/// geometric measurements.
fn log_evidence(
    propagated: &GaussianDensity,
    cur: VariableKey,
    realization: &ClassRealization,
    inputs: &StepInputs,
    ctx: &UpdateContext,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let mut involved = vec![cur];
    let mut objects: Vec<ObjectId> = inputs
        .geometric
        .iter()
        .map(|g| g.object)
        .chain(inputs.semantic.iter().map(|s| s.object))
        .collect();
    objects.sort_unstable();
    objects.dedup();
    involved.extend(objects.iter().map(|o| VariableKey::object(*o)));
    let marginal = propagated.marginalize(&involved)?;
    let keys = marginal.keys().to_vec();
    let lin: BTreeMap<VariableKey, Pose2> = keys
        .iter()
        .copied()
        .zip(marginal.linearization_points().iter().copied())
        .collect();
    let offset: BTreeMap<VariableKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, 3 * i)).collect();
    let dim = marginal.dim();

    let rows = 3 * inputs.geometric.len();
    let mut log_z = 0.0;
    let mut info = marginal.information().clone();
    let mut vec = marginal.information_vector().clone();
    if rows > 0 {
        let mut jac = DMatrix::zeros(rows, dim);
        let mut e0 = DVector::zeros(rows);
        for (i, g) in inputs.geometric.iter().enumerate() {
            let factor = Factor::Geometric {
                robot: cur,
                object: VariableKey::object(g.object),
                measurement: g.measurement,
                information: ctx.geometric_information,
            };
            let lin = factor.linearize(|k| lin[k])?.expect("geometric factors are least squares");
            e0.rows_mut(3 * i, 3).copy_from(&lin.residual);
            for (k, j) in &lin.jacobians {
                jac.view_mut((3 * i, offset[k]), (3, 3)).copy_from(j);
            }
        }
        let cov = marginal.covariance()?;
        let mu = marginal.mean_offset()?;
        let predicted = &e0 + &jac * mu;
        let s = &jac * cov * jac.transpose() + DMatrix::identity(rows, rows);
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::contract("innovation covariance is not positive-definite"))?;
        let log_det_s: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let log_det_w: f64 = ctx
            .geometric_information
            .cholesky()
            .ok_or_else(|| Error::contract("geometric information is not positive-definite"))?
            .l()
            .diagonal()
            .iter()
            .map(|v| 2.0 * v.ln())
            .sum();
        log_z += -0.5 * predicted.dot(&chol.solve(&predicted)) - 0.5 * log_det_s
            - 0.5 * rows as f64 * (2.0 * PI).ln()
            + 0.5 * inputs.geometric.len() as f64 * log_det_w;
        info += jac.transpose() * &jac;
        vec -= jac.transpose() * e0;
    }

    if inputs.semantic.is_empty() {
        return Ok(log_z);
    }
    let conditioned = GaussianDensity::new(keys, marginal.linearization_points().to_vec(), info, vec)?;
    let samples = conditioned.sample(ctx.n_samples, rng)?;
    let mut terms = Vec::with_capacity(samples.len());
    for sample in &samples {
        let mut l = 0.0;
        for s in &inputs.semantic {
            let class = realization.get(s.object).expect("checked by caller");
            l += ctx.model.semantic_log_likelihood(
                &s.probs,
                class,
                &sample[&cur],
                &sample[&VariableKey::object(s.object)],
            )?;
        }
        terms.push(l);
    }
    Ok(log_z + log_sum_exp(terms) - (samples.len() as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassLabel;
    use crate::hybrid::weak_object_prior;
    use approx::assert_abs_diff_eq;

    fn ctx(model: ViewpointModel) -> UpdateContext {
        UpdateContext {
            model: Arc::new(model),
            odometry_information: Matrix3::from_diagonal(&nalgebra::Vector3::new(100.0, 100.0, 1e3)),
            geometric_information: Matrix3::from_diagonal(&nalgebra::Vector3::new(100.0, 100.0, 1e3)),
            n_samples: 50,
            seed: 11,
            gauss_newton: GaussNewtonSettings::default(),
            execution: Execution::Sequential,
        }
    }

    fn start() -> HybridBelief {
        let x0 = GaussianDensity::from_pose_prior(VariableKey::robot(0, 0), Pose2::identity(), &(Matrix3::identity() * 1e-4))
            .unwrap();
        HybridBelief::new(0, x0, DVector::from_vec(vec![0.5, 0.5])).unwrap()
    }

    fn constant_model() -> ViewpointModel {
        ViewpointModel::constant(
            vec![DVector::from_vec(vec![0.8, 0.2]), DVector::from_vec(vec![0.3, 0.7])],
            DMatrix::from_diagonal_element(2, 2, 0.05),
        )
        .unwrap()
    }

    #[test]
    fn odometry_only_grows_covariance() {
        let c = ctx(constant_model());
        let mut hb = start();
        let inputs = StepInputs {
            step: 1,
            odometry: Pose2::new(1.0, 0.0, 0.0),
            geometric: vec![],
            semantic: vec![],
        };
        hb.local_update(&inputs, &c).unwrap();
        assert_eq!(hb.step(), 1);
        let h = &hb.hypotheses()[0];
        let cov = h.belief.covariance().unwrap();
        // 1e-4 prior plus 1e-2 odometry noise along x.
        assert_abs_diff_eq!(cov[(0, 0)], 1e-4 + 1e-2, epsilon = 1e-9);
        let m = h.belief.mean().unwrap()[&VariableKey::robot(0, 1)];
        assert_abs_diff_eq!(m.x, 1.0, epsilon = 1e-12);
        assert!(hb.local_update(&inputs, &c).is_err());
    }

    #[test]
    fn constant_model_matches_bayes_rule() {
        let c = ctx(constant_model());
        let mut hb = start();
        let z = Pose2::new(2.0, 0.5, 0.3);
        let inputs = StepInputs {
            step: 1,
            odometry: Pose2::new(1.0, 0.0, 0.0),
            geometric: vec![GeometricMeasurement { object: 4, measurement: z }],
            semantic: vec![SemanticMeasurement {
                object: 4,
                probs: DVector::from_vec(vec![0.6, 0.4]),
            }],
        };
        let guesses = hb.new_object_guesses(&inputs).unwrap();
        assert_eq!(guesses.len(), 1);
        let priors: Vec<_> = guesses.iter().map(|(o, m)| (*o, weak_object_prior(*o, *m))).collect();
        hb.expand_for_new_objects(&priors).unwrap();
        hb.local_update(&inputs, &c).unwrap();

        let lik = |mean: [f64; 2]| {
            let d = [0.6 - mean[0], 0.4 - mean[1]];
            (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * 0.05)).exp()
        };
        let (l1, l2) = (lik([0.8, 0.2]), lik([0.3, 0.7]));
        let p = hb.class_marginal(4).unwrap();
        assert_abs_diff_eq!(p[0], l1 / (l1 + l2), epsilon = 1e-9);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn aliased_viewpoint_leaves_weights_alone() {
        let c = ctx(ViewpointModel::aliasing());
        let mut hb = start();
        // Object yaw relative to the robot is -90 degrees.
        let z = Pose2::new(2.0, 0.0, -std::f64::consts::FRAC_PI_2);
        let inputs = StepInputs {
            step: 1,
            odometry: Pose2::identity(),
            geometric: vec![GeometricMeasurement { object: 1, measurement: z }],
            semantic: vec![SemanticMeasurement {
                object: 1,
                probs: DVector::from_vec(vec![0.9, 0.1]),
            }],
        };
        let guesses = hb.new_object_guesses(&inputs).unwrap();
        let priors: Vec<_> = guesses.iter().map(|(o, m)| (*o, weak_object_prior(*o, *m))).collect();
        hb.expand_for_new_objects(&priors).unwrap();
        hb.local_update(&inputs, &c).unwrap();
        let p = hb.class_marginal(1).unwrap();
        // Sampled viewpoints scatter around -90 degrees with σ ≈ 0.03 rad, so
        // the class likelihoods agree to second order.
        assert!((p[0] - 0.5).abs() < 0.01, "{p}");
    }

    #[test]
    fn unknown_object_is_rejected() {
        let c = ctx(constant_model());
        let mut hb = start();
        let inputs = StepInputs {
            step: 1,
            odometry: Pose2::identity(),
            geometric: vec![GeometricMeasurement {
                object: 9,
                measurement: Pose2::identity(),
            }],
            semantic: vec![],
        };
        assert!(matches!(hb.local_update(&inputs, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn permutation_of_measurements_is_irrelevant() {
        let c = ctx(ViewpointModel::aliasing());
        let run = |reverse: bool| {
            let mut hb = start();
            let mut inputs = StepInputs {
                step: 1,
                odometry: Pose2::new(0.5, 0.0, 0.1),
                geometric: vec![
                    GeometricMeasurement { object: 1, measurement: Pose2::new(2.0, 1.0, 0.4) },
                    GeometricMeasurement { object: 2, measurement: Pose2::new(3.0, -1.0, 1.2) },
                ],
                semantic: vec![
                    SemanticMeasurement { object: 1, probs: DVector::from_vec(vec![0.7, 0.3]) },
                    SemanticMeasurement { object: 2, probs: DVector::from_vec(vec![0.2, 0.8]) },
                ],
            };
            let guesses = hb.new_object_guesses(&inputs).unwrap();
            let priors: Vec<_> = guesses.iter().map(|(o, m)| (*o, weak_object_prior(*o, *m))).collect();
            hb.expand_for_new_objects(&priors).unwrap();
            if reverse {
                inputs.geometric.reverse();
                inputs.semantic.reverse();
            }
            hb.local_update(&inputs, &c).unwrap();
            hb.weights()
        };
        let (a, b) = (run(false), run(true));
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
        assert_eq!(a.len(), 4);
        let _ = ClassLabel(1);
    }
}
