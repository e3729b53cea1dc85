use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use super::factor::Factor;
use super::{GaussianDensity, ObjectId, VariableKey};
use crate::classifier::ClassLabel;
use crate::error::{Error, Result};
use crate::geometry::Pose2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussNewtonSettings {
    pub max_iters: usize,
    /// Stop once the update norm falls below this.
    pub tolerance: f64,
}

impl Default for GaussNewtonSettings {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-9,
        }
    }
}

/// Dense factor graph over pose variables with a Gauss-Newton solver.
///
/// Variables keep their insertion order, which fixes the layout of the
/// returned densities.
#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    factors: Vec<Factor>,
    keys: Vec<VariableKey>,
    values: BTreeMap<VariableKey, Pose2>,
    classes: BTreeMap<ObjectId, ClassLabel>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph for one class hypothesis; semantic factors must agree with
    /// `classes`.
    pub fn with_classes(classes: BTreeMap<ObjectId, ClassLabel>) -> Self {
        Self {
            classes,
            ..Self::default()
        }
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn value(&self, key: &VariableKey) -> Option<Pose2> {
        self.values.get(key).copied()
    }

    pub fn values(&self) -> &BTreeMap<VariableKey, Pose2> {
        &self.values
    }

    pub fn insert_value(&mut self, key: VariableKey, value: Pose2) -> Result<()> {
        if self.values.contains_key(&key) {
            return Err(Error::contract(format!("{key} already exists in the graph")));
        }
        self.keys.push(key);
        self.values.insert(key, value);
        Ok(())
    }

    /// Appends a factor. Absent variables are created from the factor itself
    /// where it determines them: a prior's mean, a density's linearization
    /// point, or the composition of an existing robot pose with an odometry or
    /// geometric measurement.
    pub fn add_factor(&mut self, factor: Factor) -> Result<()> {
        let mut guesses = Vec::new();
        match &factor {
            Factor::Prior { key, mean, .. } => guesses.push((*key, *mean)),
            Factor::Density(d) => guesses.extend(d.keys().iter().copied().zip(d.linearization_points().iter().copied())),
            Factor::Odometry {
                from: a,
                to: b,
                measurement,
                ..
            }
            | Factor::Geometric {
                robot: a,
                object: b,
                measurement,
                ..
            } => {
                if let Some(pa) = self.value(a) {
                    guesses.push((*b, pa.compose(measurement)));
                }
            }
            Factor::Semantic(_) => {}
        }
        guesses.retain(|(k, _)| !self.values.contains_key(k));
        self.add_factor_with_guess(factor, &guesses)
    }

    /// Appends a factor, creating absent variables at the given guesses.
    pub fn add_factor_with_guess(&mut self, factor: Factor, guesses: &[(VariableKey, Pose2)]) -> Result<()> {
        if let Factor::Semantic(s) = &factor {
            let object = s
                .object
                .object_id()
                .ok_or_else(|| Error::contract("semantic factor must observe an object variable"))?;
            match self.classes.get(&object) {
                Some(c) if *c == s.class => {}
                Some(c) => {
                    return Err(Error::contract(format!(
                        "semantic factor on {} assumes {} but the hypothesis fixes {c}",
                        s.object, s.class
                    )))
                }
                None => {
                    return Err(Error::contract(format!(
                        "semantic factor on {} whose class is not fixed in the hypothesis",
                        s.object
                    )))
                }
            }
        }
        for key in factor.keys() {
            if !self.values.contains_key(&key) && !guesses.iter().any(|(k, _)| *k == key) {
                return Err(Error::contract(format!("{key} is not in the graph and has no initial guess")));
            }
        }
        for (key, value) in guesses {
            if !self.values.contains_key(key) {
                self.insert_value(*key, *value)?;
            }
        }
        self.factors.push(factor);
        Ok(())
    }

    /// Variables not connected to any prior or density factor.
    fn unanchored(&self) -> Vec<VariableKey> {
        let mut anchored: BTreeSet<VariableKey> = self
            .factors
            .iter()
            .filter(|f| f.is_anchor())
            .flat_map(|f| f.keys())
            .collect();
        loop {
            let before = anchored.len();
            for f in &self.factors {
                let keys = f.keys();
                if keys.iter().any(|k| anchored.contains(k)) {
                    anchored.extend(keys);
                }
            }
            if anchored.len() == before {
                break;
            }
        }
        self.keys.iter().filter(|k| !anchored.contains(k)).copied().collect()
    }

    /// Hessian and gradient of the total cost at the current values.
    fn normal_equations(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = 3 * self.keys.len();
        let index: BTreeMap<VariableKey, usize> = self.keys.iter().enumerate().map(|(i, k)| (*k, 3 * i)).collect();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for f in &self.factors {
            if let Factor::Density(d) = f {
                let slots: Vec<usize> = d.keys().iter().map(|k| index[k]).collect();
                let mut delta = DVector::zeros(d.dim());
                for (i, k) in d.keys().iter().enumerate() {
                    delta
                        .fixed_rows_mut::<3>(3 * i)
                        .copy_from(&d.linearization_points()[i].local(&self.values[k]));
                }
                let grad = d.information() * delta - d.information_vector();
                for (a, &sa) in slots.iter().enumerate() {
                    let mut gv = g.fixed_rows_mut::<3>(sa);
                    gv += grad.fixed_rows::<3>(3 * a);
                    for (b, &sb) in slots.iter().enumerate() {
                        let mut blk = h.fixed_view_mut::<3, 3>(sa, sb);
                        blk += d.information().fixed_view::<3, 3>(3 * a, 3 * b);
                    }
                }
                continue;
            }
            let lin = f
                .linearize(|k| self.values[k])?
                .expect("non-density factors linearize to least squares");
            for (ka, ja) in &lin.jacobians {
                let sa = index[ka];
                let mut gv = g.rows_mut(sa, 3);
                gv += ja.transpose() * &lin.residual;
                for (kb, jb) in &lin.jacobians {
                    let mut blk = h.view_mut((sa, index[kb]), (3, 3));
                    blk += ja.transpose() * jb;
                }
            }
        }
        Ok((h, g))
    }

    fn solve(&self, h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(ch) = h.clone().cholesky() {
            return Ok(-ch.solve(g));
        }
        if let Some(x) = h.clone().lu().solve(g) {
            if x.iter().all(|v| v.is_finite()) {
                return Ok(-x);
            }
        }
        let weak: Vec<VariableKey> = self
            .keys
            .iter()
            .enumerate()
            .filter(|(i, _)| h.fixed_view::<3, 3>(3 * i, 3 * i).abs().max() < 1e-12)
            .map(|(_, k)| *k)
            .collect();
        Err(Error::UnderConstrained {
            variables: if weak.is_empty() { self.keys.clone() } else { weak },
        })
    }

    /// Laplace approximation at the current values, without iterating.
    pub fn linearize(&self) -> Result<GaussianDensity> {
        let (h, g) = self.normal_equations()?;
        GaussianDensity::new(
            self.keys.clone(),
            self.keys.iter().map(|k| self.values[k]).collect(),
            h,
            -g,
        )
    }

    /// Runs Gauss-Newton and returns the Laplace approximation at the
    /// converged estimate; the graph's values are updated in place.
    pub fn optimize(&mut self, settings: &GaussNewtonSettings) -> Result<GaussianDensity> {
        if self.keys.is_empty() {
            return Ok(GaussianDensity::empty());
        }
        let loose = self.unanchored();
        if !loose.is_empty() {
            return Err(Error::UnderConstrained { variables: loose });
        }
        for _ in 0..settings.max_iters {
            let (h, g) = self.normal_equations()?;
            let dx = self.solve(&h, &g)?;
            for (i, k) in self.keys.iter().enumerate() {
                let v = self.values.get_mut(k).expect("key has a value");
                *v = v.retract(&dx.fixed_rows::<3>(3 * i).into_owned());
            }
            if dx.norm() < settings.tolerance {
                break;
            }
        }
        self.linearize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::SemanticFactor;
    use crate::classifier::ViewpointModel;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector3};
    use std::sync::Arc;

    fn x(k: u64) -> VariableKey {
        VariableKey::robot(0, k)
    }

    fn odo(from: u64, to: u64, z: Pose2, var: f64) -> Factor {
        Factor::Odometry {
            from: x(from),
            to: x(to),
            measurement: z,
            information: Matrix3::identity() / var,
        }
    }

    #[test]
    fn building_a_chain() {
        let mut g = FactorGraph::new();
        g.add_factor(Factor::prior(x(0), Pose2::identity(), &Matrix3::identity()).unwrap())
            .unwrap();
        assert_eq!((g.factors().len(), g.keys().len()), (1, 1));
        g.add_factor(odo(0, 1, Pose2::new(1.0, 0.0, 0.1), 1.0)).unwrap();
        assert_eq!((g.factors().len(), g.keys().len()), (2, 2));
        let z = Pose2::new(2.0, 1.0, 0.4);
        g.add_factor(Factor::Geometric {
            robot: x(1),
            object: VariableKey::object(5),
            measurement: z,
            information: Matrix3::identity(),
        })
        .unwrap();
        let expect = Pose2::new(1.0, 0.0, 0.1).compose(&z);
        assert_eq!(g.value(&VariableKey::object(5)), Some(expect));
        assert!(g.add_factor(odo(7, 8, Pose2::identity(), 1.0)).is_err());
    }

    #[test]
    fn single_prior_posterior() {
        let cov = Matrix3::new(0.5, 0.1, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0, 0.2);
        let mut g = FactorGraph::new();
        g.add_factor(Factor::prior(x(0), Pose2::new(1.0, 2.0, 0.3), &cov).unwrap())
            .unwrap();
        let d = g.optimize(&GaussNewtonSettings::default()).unwrap();
        let m = d.mean().unwrap()[&x(0)];
        assert_abs_diff_eq!(m.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.y, 2.0, epsilon = 1e-12);
        let inv = cov.try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(d.information()[(i, j)], inv[(i, j)], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn exact_chain_reproduces_composition() {
        let steps = [Pose2::new(1.0, 0.0, 0.3), Pose2::new(0.5, 0.2, -0.1), Pose2::new(2.0, 0.0, 1.0)];
        let mut g = FactorGraph::new();
        g.add_factor(Factor::prior(x(0), Pose2::new(0.5, 0.5, 0.0), &(Matrix3::identity() * 1e-2)).unwrap())
            .unwrap();
        let mut truth = Pose2::new(0.5, 0.5, 0.0);
        for (k, s) in steps.iter().enumerate() {
            g.add_factor_with_guess(odo(k as u64, k as u64 + 1, *s, 0.1), &[(x(k as u64 + 1), Pose2::identity())])
                .unwrap();
            truth = truth.compose(s);
        }
        let d = g.optimize(&GaussNewtonSettings::default()).unwrap();
        let m = d.mean().unwrap()[&x(3)];
        assert!(m.distance(&truth) < 1e-9);
        assert_abs_diff_eq!(m.theta, truth.theta, epsilon = 1e-9);
        assert!(d.information_vector().norm() < 1e-6);
    }

    #[test]
    fn unanchored_variables_are_named() {
        let mut g = FactorGraph::new();
        g.insert_value(x(0), Pose2::identity()).unwrap();
        g.add_factor(odo(0, 1, Pose2::new(1.0, 0.0, 0.0), 1.0)).unwrap();
        match g.optimize(&GaussNewtonSettings::default()) {
            Err(Error::UnderConstrained { variables }) => assert_eq!(variables, vec![x(0), x(1)]),
            other => panic!("expected under-constrained error, got {other:?}"),
        }
    }

    #[test]
    fn semantic_factor_requires_fixed_class() {
        let model = Arc::new(ViewpointModel::aliasing());
        let sem = |class| {
            Factor::Semantic(SemanticFactor {
                robot: x(0),
                object: VariableKey::object(1),
                class: ClassLabel(class),
                model: model.clone(),
                measurement: nalgebra::DVector::from_vec(vec![0.5, 0.5]),
            })
        };
        let mut free = FactorGraph::new();
        free.insert_value(x(0), Pose2::identity()).unwrap();
        free.insert_value(VariableKey::object(1), Pose2::identity()).unwrap();
        assert!(matches!(free.add_factor(sem(1)), Err(Error::Contract(_))));
        let mut fixed = FactorGraph::with_classes([(1, ClassLabel(2))].into());
        fixed.insert_value(x(0), Pose2::identity()).unwrap();
        fixed.insert_value(VariableKey::object(1), Pose2::identity()).unwrap();
        assert!(fixed.add_factor(sem(1)).is_err());
        fixed.add_factor(sem(2)).unwrap();
    }

    #[test]
    fn density_factor_acts_as_prior() {
        let cov = Matrix3::from_diagonal(&Vector3::new(0.3, 0.2, 0.1));
        let d = GaussianDensity::from_pose_prior(x(0), Pose2::new(1.0, -1.0, 0.5), &cov).unwrap();
        let mut g = FactorGraph::new();
        g.add_factor(Factor::Density(d.clone())).unwrap();
        let post = g.optimize(&GaussNewtonSettings::default()).unwrap();
        let m = post.mean().unwrap()[&x(0)];
        assert!(m.distance(&Pose2::new(1.0, -1.0, 0.5)) < 1e-12);
        assert_abs_diff_eq!(post.information()[(0, 0)], 1.0 / 0.3, epsilon = 1e-12);
    }
}
