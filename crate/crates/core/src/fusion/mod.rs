//! Stack-based fusion of hybrid beliefs across robots.
//!
//! Every robot broadcasts a stack holding, per robot it has heard of, the
//! latest local belief of that robot with priors divided out. A receiver
//! multiplies in only the change of each slot since its previous update, so
//! information relayed along several paths is counted once.

pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianDensity, LinearizationPolicy, ObjectId, RobotId, VariableKey};
use crate::hybrid::{weak_object_prior, ClassRealization, ExternalFactor, ExternalTerm, HybridBelief, StepInputs, UpdateContext};

/// One realization's contribution to a slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotEntry {
    pub realization: ClassRealization,
    /// Marginal over the sender's object poses divided by their priors.
    pub xi: GaussianDensity,
    /// Weight divided by the realization's class prior.
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackSlot {
    pub robot: RobotId,
    pub timestamp: u64,
    /// Sorted by realization; all entries cover the same objects.
    pub entries: Vec<SlotEntry>,
}

impl StackSlot {
    pub fn objects(&self) -> BTreeSet<ObjectId> {
        self.entries
            .first()
            .map(|e| e.realization.objects().collect())
            .unwrap_or_default()
    }

    pub fn entry(&self, realization: &ClassRealization) -> Option<&SlotEntry> {
        self.entries
            .binary_search_by(|e| e.realization.cmp(realization))
            .ok()
            .map(|i| &self.entries[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub owner: RobotId,
    pub slots: BTreeMap<RobotId, StackSlot>,
}

impl Stack {
    pub fn new(owner: RobotId) -> Self {
        Self {
            owner,
            slots: BTreeMap::new(),
        }
    }

    pub fn timestamp(&self, robot: RobotId) -> Option<u64> {
        self.slots.get(&robot).map(|s| s.timestamp)
    }

    /// Installs or replaces the owner's slot.
    pub fn set_own_slot(&mut self, slot: StackSlot) -> Result<()> {
        if slot.robot != self.owner {
            return Err(Error::contract(format!(
                "slot of robot {} cannot be the own slot of robot {}",
                slot.robot, self.owner
            )));
        }
        self.slots.insert(slot.robot, slot);
        Ok(())
    }
}

/// Robots whose local maps have drifted apart can place the same object many
/// metres apart. Transport is exact in the pose chart, so fusion never refuses
/// an offset.
const FUSION_POLICY: LinearizationPolicy = LinearizationPolicy {
    align_tolerance: 1e-6,
    max_position_offset: f64::INFINITY,
};

/// Summarizes a robot's local belief as a stack slot stamped `timestamp`.
pub fn build_own_slot(local: &HybridBelief, timestamp: u64) -> Result<StackSlot> {
    let objects: Vec<VariableKey> = local.known_objects().map(VariableKey::object).collect();
    let mut entries = Vec::new();
    if !objects.is_empty() {
        let mut prior = GaussianDensity::empty();
        for p in local.object_priors().values() {
            prior = prior.multiply(p)?;
        }
        for h in local.hypotheses() {
            let xi = h.belief.marginalize(&objects)?.divide_with(&prior, &FUSION_POLICY)?;
            let phi = (h.log_weight - local.log_class_prior(&h.realization)).exp();
            entries.push(SlotEntry {
                realization: h.realization.clone(),
                xi,
                phi,
            });
        }
    }
    Ok(StackSlot {
        robot: local.owner(),
        timestamp,
        entries,
    })
}

/// Keeps, per robot, the slot with the newest timestamp; ties keep the
/// incumbent.
pub fn merge_stacks(mine: &Stack, received: &[&Stack]) -> Stack {
    let mut out = mine.clone();
    for stack in received {
        for (robot, slot) in &stack.slots {
            match out.slots.get(robot) {
                Some(have) if have.timestamp >= slot.timestamp => {}
                _ => {
                    out.slots.insert(*robot, slot.clone());
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Multiply in `ξ_k / ξ_{k-1}` and `φ_k / φ_{k-1}` for changed slots.
    Distributed,
    /// Multiply in every other robot's `ξ_k`, `φ_k` at every step.
    DoubleCount,
}

/// A slot whose realization could not be matched because one side pruned it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub robot: RobotId,
    pub realization: ClassRealization,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "slot of robot {} has no entry for {}; treated as identity",
            self.robot, self.realization
        )
    }
}

#[derive(Clone, Debug)]
struct Contribution {
    numerator: StackSlot,
    denominator: Option<StackSlot>,
}

/// Per-realization information received from other robots.
#[derive(Clone, Debug, Default)]
pub struct ExternalUpdate {
    contributions: Vec<Contribution>,
}

enum Term<'a> {
    Identity,
    Mismatch,
    Ratio(&'a SlotEntry, Option<&'a SlotEntry>),
}

impl Contribution {
    fn term(&self, realization: &ClassRealization) -> Result<Term<'_>> {
        let restrict = |slot: &StackSlot| -> Result<Option<ClassRealization>> {
            let objects = slot.objects();
            if objects.is_empty() {
                return Ok(None);
            }
            realization.restrict(&objects).map(Some).ok_or_else(|| {
                Error::contract(format!(
                    "realization {realization} does not cover the objects of robot {}",
                    slot.robot
                ))
            })
        };
        let Some(num_r) = restrict(&self.numerator)? else {
            return Ok(Term::Identity);
        };
        let Some(num) = self.numerator.entry(&num_r) else {
            return Ok(Term::Mismatch);
        };
        let den = match &self.denominator {
            Some(slot) => match restrict(slot)? {
                Some(r) => match slot.entry(&r) {
                    Some(e) => Some(e),
                    None => return Ok(Term::Mismatch),
                },
                None => None,
            },
            None => None,
        };
        Ok(Term::Ratio(num, den))
    }
}

impl ExternalUpdate {
    pub fn is_identity(&self) -> bool {
        self.contributions.is_empty()
    }

    /// Robots whose slots contribute.
    pub fn robots(&self) -> Vec<RobotId> {
        self.contributions.iter().map(|c| c.numerator.robot).collect()
    }

    /// Objects the receiver must know before applying the update.
    pub fn objects(&self) -> BTreeSet<ObjectId> {
        self.contributions.iter().flat_map(|c| c.numerator.objects()).collect()
    }

    /// Linearization point of `object` in the newest slot that carries it.
    fn object_estimate(&self, object: ObjectId) -> Option<crate::geometry::Pose2> {
        self.contributions
            .iter()
            .filter_map(|c| c.numerator.entries.first())
            .find_map(|e| e.xi.linearization_point(&VariableKey::object(object)))
    }

    /// Continuous and discrete factors for one receiver realization, lifted
    /// from each slot's objects.
    pub fn factor_for(&self, realization: &ClassRealization) -> Result<ExternalTerm> {
        let mut out = ExternalTerm::default();
        for c in &self.contributions {
            if let Term::Ratio(num, den) = c.term(realization)? {
                let mut xi = num.xi.clone();
                let mut log_phi = num.phi.ln();
                if let Some(den) = den {
                    xi = xi.divide_with(&den.xi, &FUSION_POLICY)?;
                    log_phi -= den.phi.ln();
                }
                out.density = out.density.multiply_with(&xi, &FUSION_POLICY)?;
                out.log_phi += log_phi;
            }
        }
        Ok(out)
    }

    /// Slots that fall back to identity for `realization`.
    pub fn mismatches(&self, realization: &ClassRealization) -> Result<Vec<Diagnostic>> {
        let mut out = Vec::new();
        for c in &self.contributions {
            if let Term::Mismatch = c.term(realization)? {
                out.push(Diagnostic {
                    robot: c.numerator.robot,
                    realization: realization.clone(),
                });
            }
        }
        Ok(out)
    }
}

/// External update from the change between `previous` (the stack after the
/// owner's last distributed update) and `current`. The owner's own slot never
/// contributes.
pub fn compute_external_update(current: &Stack, previous: &Stack, self_id: RobotId, mode: FusionMode) -> ExternalUpdate {
    let mut contributions = Vec::new();
    for (robot, slot) in &current.slots {
        if *robot == self_id {
            continue;
        }
        let prev = previous.slots.get(robot);
        match mode {
            FusionMode::Distributed => {
                if prev.is_some_and(|p| p.timestamp == slot.timestamp) {
                    continue;
                }
                contributions.push(Contribution {
                    numerator: slot.clone(),
                    denominator: prev.cloned(),
                });
            }
            FusionMode::DoubleCount => contributions.push(Contribution {
                numerator: slot.clone(),
                denominator: None,
            }),
        }
    }
    ExternalUpdate { contributions }
}

/// One step of the distributed belief: adds objects first seen locally or in
/// the external update, applies local measurements and external factors,
/// then prunes. Returns the pruning-mismatch diagnostics.
pub fn distributed_update(
    dist: &mut HybridBelief,
    inputs: &StepInputs,
    ext: &ExternalUpdate,
    ctx: &UpdateContext,
    prune_ratio: f64,
) -> Result<Vec<Diagnostic>> {
    let mut new: BTreeMap<ObjectId, GaussianDensity> = BTreeMap::new();
    for o in ext.objects() {
        if !dist.knows(o) {
            let mean = ext.object_estimate(o).expect("object listed by a slot");
            new.insert(o, weak_object_prior(o, mean));
        }
    }
    for (o, mean) in dist.new_object_guesses(inputs)? {
        new.entry(o).or_insert_with(|| weak_object_prior(o, mean));
    }
    dist.expand_for_new_objects(&new.into_iter().collect::<Vec<_>>())?;

    let mut diagnostics = Vec::new();
    for h in dist.hypotheses() {
        diagnostics.extend(ext.mismatches(&h.realization)?);
    }
    let factor = |r: &ClassRealization| ext.factor_for(r);
    let external: Option<&ExternalFactor<'_>> =
        if ext.is_identity() { None } else { Some(&factor) };
    dist.update(inputs, ctx, external)?;
    dist.prune(prune_ratio);
    Ok(diagnostics)
}
