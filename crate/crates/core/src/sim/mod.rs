//! Scenario engine: ground truth, measurement generation, communication
//! scheduling and the per-step orchestration of local and distributed
//! updates.

mod config;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DVector;

pub use config::{ClassifierConfig, ObjectConfig, RobotConfig, Scenario, ScenarioConfig, Waypoint};

use crate::classifier::ClassLabel;
use crate::error::{Error, Result};
use crate::fusion::{build_own_slot, compute_external_update, distributed_update, merge_stacks, FusionMode, Stack};
use crate::gaussian::{GaussNewtonSettings, GaussianDensity, ObjectId, RobotId, VariableKey};
use crate::geometry::{sample_pose_noise, Pose2};
use crate::hybrid::{weak_object_prior, GeometricMeasurement, HybridBelief, StepInputs, UpdateContext};
use crate::metrics::{self, MetricRecord};
use crate::par::Execution;
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Local,
    Distributed,
    DoubleCount,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Local, Mode::Distributed, Mode::DoubleCount];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Local => "local",
            Mode::Distributed => "distributed",
            Mode::DoubleCount => "double-count",
        }
    }

    fn fusion(self) -> Option<FusionMode> {
        match self {
            Mode::Local => None,
            Mode::Distributed => Some(FusionMode::Distributed),
            Mode::DoubleCount => Some(FusionMode::DoubleCount),
        }
    }
}

/// Ground-truth robot poses (steps 0..=N) and the controls between them.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub poses: BTreeMap<RobotId, Vec<Pose2>>,
    pub controls: BTreeMap<RobotId, Vec<Pose2>>,
}

pub fn ground_truth(cfg: &ScenarioConfig) -> GroundTruth {
    let mut poses = BTreeMap::new();
    let mut controls = BTreeMap::new();
    for r in &cfg.robots {
        let mut pose = r.initial_pose;
        let mut path = vec![pose];
        let mut us = Vec::with_capacity(cfg.steps as usize);
        let mut next = 0;
        for k in 0..cfg.steps as usize {
            let u = if !r.controls.is_empty() {
                r.controls.get(k).copied().unwrap_or_default()
            } else if let Some(w) = r.waypoints.get(next) {
                let speed = w.speed_m_per_step.or(r.speed_m_per_step).expect("validated");
                let (dx, dy) = (w.x_m - pose.x, w.y_m - pose.y);
                let d = dx.hypot(dy);
                let target = if d <= speed {
                    next += 1;
                    (w.x_m, w.y_m)
                } else {
                    (pose.x + speed * dx / d, pose.y + speed * dy / d)
                };
                let heading = if d > 0.0 { dy.atan2(dx) } else { pose.theta };
                pose.between(&Pose2::new(target.0, target.1, heading))
            } else {
                Pose2::identity()
            };
            pose = pose.compose(&u);
            path.push(pose);
            us.push(u);
        }
        poses.insert(r.id, path);
        controls.insert(r.id, us);
    }
    GroundTruth { poses, controls }
}

/// Measurements of all robots at one step and the communication pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub inputs: BTreeMap<RobotId, StepInputs>,
    /// Unordered pairs `(a, b)` with `a < b` within communication range.
    pub links: Vec<(RobotId, RobotId)>,
}

impl StepRecord {
    pub fn neighbours(&self, robot: RobotId) -> Vec<RobotId> {
        self.links
            .iter()
            .filter_map(|&(a, b)| {
                if a == robot {
                    Some(b)
                } else if b == robot {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Noisy measurements at step `k` (1-based). Draws depend only on
/// `(seed, k, robot)`, so every mode sees the same measurements.
pub fn generate_step(scn: &Scenario, gt: &GroundTruth, k: u64, seed: u64) -> Result<StepRecord> {
    let cfg = &scn.config;
    if k == 0 || k > cfg.steps {
        return Err(Error::contract(format!("step {k} outside 1..={}", cfg.steps)));
    }
    let mut inputs = BTreeMap::new();
    for r in &cfg.robots {
        let mut rng = rng_for(&[seed, stream::MEASUREMENT, k, r.id as u64]);
        let pose = gt.poses[&r.id][k as usize];
        let u = gt.controls[&r.id][k as usize - 1];
        let odometry = u.compose(&sample_pose_noise(&scn.odometry_noise, &mut rng));
        let mut geometric = Vec::new();
        let mut semantic = Vec::new();
        for o in &cfg.objects {
            if pose.distance(&o.pose) > cfg.sensing_range_m {
                continue;
            }
            let rel = pose.between(&o.pose);
            geometric.push(GeometricMeasurement {
                object: o.id,
                measurement: rel.compose(&sample_pose_noise(&scn.geometric_noise, &mut rng)),
            });
            semantic.push(scn.model.sample_semantic(o.id, ClassLabel(o.class), &rel, &mut rng)?);
        }
        inputs.insert(
            r.id,
            StepInputs {
                step: k,
                odometry,
                geometric,
                semantic,
            },
        );
    }
    let mut links = Vec::new();
    for (i, a) in cfg.robots.iter().enumerate() {
        for b in &cfg.robots[i + 1..] {
            let (pa, pb) = (gt.poses[&a.id][k as usize], gt.poses[&b.id][k as usize]);
            if pa.distance(&pb) <= cfg.communication_range_m {
                links.push((a.id.min(b.id), a.id.max(b.id)));
            }
        }
    }
    links.sort_unstable();
    Ok(StepRecord { step: k, inputs, links })
}

/// Per-robot state: the local belief (which alone feeds the own slot), the
/// distributed belief, the stack and the snapshot of the stack taken after
/// the previous distributed update.
#[derive(Clone, Debug)]
pub struct RobotState {
    pub id: RobotId,
    pub local: HybridBelief,
    pub distributed: Option<HybridBelief>,
    pub stack: Stack,
    pub snapshot: Stack,
    pub diagnostics: usize,
}

impl RobotState {
    /// The belief that is scored in this mode.
    pub fn scored(&self) -> &HybridBelief {
        self.distributed.as_ref().unwrap_or(&self.local)
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub step: u64,
    pub wall_time_s: f64,
    pub metrics: Vec<MetricRecord>,
    /// Stack timestamps per robot after the step (absent slots omitted).
    pub timestamps: BTreeMap<RobotId, BTreeMap<RobotId, u64>>,
}

/// A stepping simulation of one run.
pub struct Simulation<'a> {
    scenario: &'a Scenario,
    mode: Mode,
    seed: u64,
    ctx: UpdateContext,
    truth: GroundTruth,
    robots: Vec<RobotState>,
    step: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(scenario: &'a Scenario, mode: Mode, seed: u64, execution: Execution) -> Result<Self> {
        let cfg = &scenario.config;
        let truth = ground_truth(cfg);
        let mut robots = Vec::new();
        for r in &cfg.robots {
            let prior = GaussianDensity::from_pose_prior(
                VariableKey::robot(r.id, 0),
                r.initial_pose,
                &scenario.initial_prior_covariance(),
            )?;
            let local = HybridBelief::new(r.id, prior, scenario.class_prior.clone())?;
            robots.push(RobotState {
                id: r.id,
                distributed: mode.fusion().map(|_| local.clone()),
                local,
                stack: Stack::new(r.id),
                snapshot: Stack::new(r.id),
                diagnostics: 0,
            });
        }
        let ctx = UpdateContext {
            model: scenario.model.clone(),
            odometry_information: scenario
                .odometry_noise
                .information()
                .ok_or_else(|| Error::config("odometry noise must be positive-definite"))?,
            geometric_information: scenario
                .geometric_noise
                .information()
                .ok_or_else(|| Error::config("geometric noise must be positive-definite"))?,
            n_samples: cfg.n_samples,
            seed,
            gauss_newton: GaussNewtonSettings::default(),
            execution,
        };
        Ok(Self {
            scenario,
            mode,
            seed,
            ctx,
            truth,
            robots,
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn robots(&self) -> &[RobotState] {
        &self.robots
    }

    pub fn robot(&self, id: RobotId) -> Option<&RobotState> {
        self.robots.iter().find(|r| r.id == id)
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.scenario.config.steps
    }

    /// Runs one step for every robot.
    ///
    /// Robots first merge the stacks their neighbours held at the end of the
    /// previous step, then update locally, refresh their own slot and, in the
    /// distributed modes, apply the change of their stack since the previous
    /// step to the distributed belief.
    pub fn advance(&mut self) -> Result<StepResult> {
        let k = self.step + 1;
        let started = Instant::now();
        let record = generate_step(self.scenario, &self.truth, k, self.seed)?;
        let fusion = self.mode.fusion();

        if fusion.is_some() {
            let published: BTreeMap<RobotId, Stack> = self.robots.iter().map(|r| (r.id, r.stack.clone())).collect();
            for r in &mut self.robots {
                let received: Vec<&Stack> = record.neighbours(r.id).iter().map(|n| &published[n]).collect();
                r.stack = merge_stacks(&r.stack, &received);
            }
        }

        let ctx = &self.ctx;
        let prune = self.scenario.config.prune_ratio;
        let outcomes = ctx.execution.map_mut(&mut self.robots, |r| -> Result<()> {
            let inputs = &record.inputs[&r.id];
            let guesses = r.local.new_object_guesses(inputs)?;
            let priors: Vec<(ObjectId, GaussianDensity)> =
                guesses.into_iter().map(|(o, m)| (o, weak_object_prior(o, m))).collect();
            r.local.expand_for_new_objects(&priors)?;
            r.local.local_update(inputs, ctx)?;
            r.local.prune(prune);
            if let (Some(mode), Some(dist)) = (fusion, r.distributed.as_mut()) {
                if r.local.known_objects().next().is_some() {
                    r.stack.set_own_slot(build_own_slot(&r.local, k)?)?;
                }
                let ext = compute_external_update(&r.stack, &r.snapshot, r.id, mode);
                r.diagnostics += distributed_update(dist, inputs, &ext, ctx, prune)?.len();
                r.snapshot = r.stack.clone();
            }
            Ok(())
        });
        outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        self.step = k;

        let mut metrics = Vec::new();
        let mut timestamps = BTreeMap::new();
        for r in &self.robots {
            metrics.extend(self.score(r)?);
            timestamps.insert(r.id, r.stack.slots.iter().map(|(id, s)| (*id, s.timestamp)).collect());
        }
        Ok(StepResult {
            step: k,
            wall_time_s: started.elapsed().as_secs_f64(),
            metrics,
            timestamps,
        })
    }

    fn score(&self, r: &RobotState) -> Result<Vec<MetricRecord>> {
        let cfg = &self.scenario.config;
        let hb = r.scored();
        let k = self.step;
        let mut out = Vec::new();
        let mut push = |metric: &str, value: f64| {
            out.push(MetricRecord {
                seed: self.seed,
                step: k,
                robot: r.id,
                mode: self.mode.name().into(),
                metric: metric.into(),
                value,
            })
        };

        let mut msde = 0.0;
        for o in &cfg.objects {
            let marginal: DVector<f64> = if hb.knows(o.id) {
                hb.class_marginal(o.id)?
            } else {
                self.scenario.class_prior.clone()
            };
            msde += metrics::msde(&marginal, ClassLabel(o.class));
        }
        if !cfg.objects.is_empty() {
            push(metrics::MSDE, msde / cfg.objects.len() as f64);
        }

        let summary = hb.pose_summary()?;
        let robot_key = VariableKey::robot(r.id, k);
        let truth = [(robot_key, self.truth.poses[&r.id][k as usize])].into();
        push(metrics::ROBOT_POSITION_ERROR, metrics::weighted_position_error(&summary, &truth)?);
        push(metrics::ROBOT_SQRT_COV, metrics::sqrt_position_covariance(&summary, &[robot_key])?);
        let objects: BTreeMap<VariableKey, Pose2> = cfg
            .objects
            .iter()
            .filter(|o| hb.knows(o.id))
            .map(|o| (VariableKey::object(o.id), o.pose))
            .collect();
        if !objects.is_empty() {
            push(metrics::OBJECT_POSITION_ERROR, metrics::weighted_position_error(&summary, &objects)?);
            let keys: Vec<VariableKey> = objects.keys().copied().collect();
            push(metrics::OBJECT_SQRT_COV, metrics::sqrt_position_covariance(&summary, &keys)?);
        }
        push(metrics::HYPOTHESES, hb.hypotheses().len() as f64);
        Ok(out)
    }
}

/// All steps of one run.
#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub steps: Vec<StepResult>,
    pub final_state: Vec<RobotState>,
}

impl RunArtifact {
    pub fn metrics(&self) -> impl Iterator<Item = &MetricRecord> {
        self.steps.iter().flat_map(|s| s.metrics.iter())
    }

    /// Value of `metric` at `step`, averaged over robots.
    pub fn robot_average(&self, step: u64, metric: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .metrics()
            .filter(|m| m.step == step && m.metric == metric)
            .map(|m| m.value)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub fn run(scenario: &Scenario, mode: Mode, seed: u64, execution: Execution) -> Result<RunArtifact> {
    let mut sim = Simulation::new(scenario, mode, seed, execution)?;
    let mut steps = Vec::new();
    while !sim.is_done() {
        steps.push(sim.advance()?);
    }
    Ok(RunArtifact {
        scenario: scenario.config.name.clone(),
        mode,
        seed,
        steps,
        final_state: sim.robots,
    })
}
