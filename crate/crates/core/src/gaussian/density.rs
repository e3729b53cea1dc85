use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use super::VariableKey;
use crate::error::{Error, Result};
use crate::geometry::Pose2;

/// Controls how densities linearized at different points are aligned before
/// they are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearizationPolicy {
    /// Linearization points closer than this (position in m, angle in rad)
    /// are treated as identical.
    pub align_tolerance: f64,
    /// Largest position offset for which first-order transport is accepted.
    pub max_position_offset: f64,
}

impl Default for LinearizationPolicy {
    fn default() -> Self {
        Self {
            align_tolerance: 1e-6,
            max_position_offset: 25.0,
        }
    }
}

/// Gaussian in information form over an ordered list of pose variables.
///
/// The density is expressed in the tangent displacement `δ` of each variable
/// from its linearization point:
///
/// ```text
/// p(δ) ∝ exp(-½ δᵀ Λ δ + ηᵀ δ)
/// ```
///
/// so the mean is `lin ⊕ Λ⁻¹η`. A result of [`GaussianDensity::divide`] may be
/// indefinite; it is then a factor rather than a normalizable density.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDensity {
    keys: Vec<VariableKey>,
    lin: Vec<Pose2>,
    info: DMatrix<f64>,
    vec: DVector<f64>,
}

impl Default for GaussianDensity {
    fn default() -> Self {
        Self::empty()
    }
}

impl GaussianDensity {
    /// Zero-variable density; the identity of [`GaussianDensity::multiply`].
    pub fn empty() -> Self {
        Self {
            keys: Vec::new(),
            lin: Vec::new(),
            info: DMatrix::zeros(0, 0),
            vec: DVector::zeros(0),
        }
    }

    pub fn new(
        keys: Vec<VariableKey>,
        lin: Vec<Pose2>,
        info: DMatrix<f64>,
        vec: DVector<f64>,
    ) -> Result<Self> {
        let n = keys.len();
        if lin.len() != n || info.nrows() != 3 * n || info.ncols() != 3 * n || vec.len() != 3 * n {
            return Err(Error::contract(format!(
                "density dimensions disagree: {} keys, {} points, {}x{} information, {} vector",
                n,
                lin.len(),
                info.nrows(),
                info.ncols(),
                vec.len()
            )));
        }
        let unique: BTreeSet<_> = keys.iter().collect();
        if unique.len() != n {
            return Err(Error::contract("duplicate variable in density"));
        }
        let scale = info.abs().max().max(1.0);
        let asym = (&info - info.transpose()).abs().max();
        if asym > 1e-10 * scale {
            return Err(Error::contract(format!(
                "information matrix is not symmetric (asymmetry {asym:.3e})"
            )));
        }
        let info = (&info + info.transpose()) * 0.5;
        Ok(Self {
            keys,
            lin,
            info,
            vec,
        })
    }

    /// Single-variable density with the given mean and covariance.
    pub fn from_pose_prior(key: VariableKey, mean: Pose2, cov: &Matrix3<f64>) -> Result<Self> {
        let info = cov
            .cholesky()
            .ok_or_else(|| Error::contract(format!("prior covariance on {key} is not positive-definite")))?
            .inverse();
        Self::new(
            vec![key],
            vec![mean],
            DMatrix::from_iterator(3, 3, info.iter().copied()),
            DVector::zeros(3),
        )
    }

    pub fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        3 * self.keys.len()
    }

    pub fn index_of(&self, key: &VariableKey) -> Option<usize> {
        self.keys.iter().position(|k| k == key)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.index_of(key).is_some()
    }

    pub fn information(&self) -> &DMatrix<f64> {
        &self.info
    }

    pub fn information_vector(&self) -> &DVector<f64> {
        &self.vec
    }

    pub fn linearization_points(&self) -> &[Pose2] {
        &self.lin
    }

    pub fn linearization_point(&self, key: &VariableKey) -> Option<Pose2> {
        self.index_of(key).map(|i| self.lin[i])
    }

    /// 3x3 information block between two variables.
    pub fn information_block(&self, a: &VariableKey, b: &VariableKey) -> Option<Matrix3<f64>> {
        let i = self.index_of(a)?;
        let j = self.index_of(b)?;
        Some(self.info.fixed_view::<3, 3>(3 * i, 3 * j).into_owned())
    }

    /// True when Λ and η are all zero within `tol`.
    pub fn is_zero_information(&self, tol: f64) -> bool {
        self.info.iter().chain(self.vec.iter()).all(|v| v.abs() <= tol)
    }

    /// Tangent offset of the mean from the linearization point, `Λ⁻¹η`.
    pub fn mean_offset(&self) -> Result<DVector<f64>> {
        if self.is_empty() {
            return Ok(DVector::zeros(0));
        }
        let chol = self
            .info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SamplingUnavailable("information matrix is not positive-definite".into()))?;
        Ok(chol.solve(&self.vec))
    }

    /// Mean of every variable.
    pub fn mean(&self) -> Result<BTreeMap<VariableKey, Pose2>> {
        let off = self.mean_offset()?;
        Ok(self
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| (*k, self.lin[i].retract(&off.fixed_rows::<3>(3 * i).into_owned())))
            .collect())
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.is_empty() {
            return Ok(DMatrix::zeros(0, 0));
        }
        self.info
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::SamplingUnavailable("information matrix is not positive-definite".into()))
    }

    /// Re-expresses the density around new linearization points by first-order
    /// transport: `η' = η - Λ d` with `d` the offset of the new points from the
    /// old ones. Keys missing from `points` keep their linearization point.
    pub fn relinearized(&self, points: &BTreeMap<VariableKey, Pose2>) -> Self {
        let mut d = DVector::zeros(self.dim());
        let mut lin = self.lin.clone();
        for (i, key) in self.keys.iter().enumerate() {
            if let Some(p) = points.get(key) {
                d.fixed_rows_mut::<3>(3 * i).copy_from(&self.lin[i].local(p));
                lin[i] = *p;
            }
        }
        Self {
            keys: self.keys.clone(),
            lin,
            vec: &self.vec - &self.info * d,
            info: self.info.clone(),
        }
    }

    /// Transports `other` onto this density's linearization points for every
    /// shared variable.
    fn align(&self, other: &GaussianDensity, policy: &LinearizationPolicy) -> Result<GaussianDensity> {
        let mut targets = BTreeMap::new();
        for (j, key) in other.keys.iter().enumerate() {
            if let Some(i) = self.index_of(key) {
                let off = other.lin[j].local(&self.lin[i]);
                let pos = off.x.hypot(off.y);
                if pos > policy.max_position_offset {
                    return Err(Error::RelinearizationRequired { key: *key, offset: pos });
                }
                if pos > policy.align_tolerance || off.z.abs() > policy.align_tolerance {
                    targets.insert(*key, self.lin[i]);
                }
            }
        }
        Ok(if targets.is_empty() {
            other.clone()
        } else {
            other.relinearized(&targets)
        })
    }

    pub fn multiply(&self, other: &GaussianDensity) -> Result<GaussianDensity> {
        self.multiply_with(other, &LinearizationPolicy::default())
    }

    /// Product of two densities over the union of their variables. The
    /// result keeps `self`'s linearization points for shared variables.
    pub fn multiply_with(&self, other: &GaussianDensity, policy: &LinearizationPolicy) -> Result<GaussianDensity> {
        self.combine(other, policy, 1.0)
    }

    pub fn divide(&self, denominator: &GaussianDensity) -> Result<GaussianDensity> {
        self.divide_with(denominator, &LinearizationPolicy::default())
    }

    /// Quotient `self / denominator`; the denominator's variables must be a
    /// subset of `self`'s.
    pub fn divide_with(&self, denominator: &GaussianDensity, policy: &LinearizationPolicy) -> Result<GaussianDensity> {
        if let Some(missing) = denominator.keys.iter().find(|k| !self.contains(k)) {
            return Err(Error::contract(format!(
                "cannot divide: {missing} is not a variable of the numerator"
            )));
        }
        self.combine(denominator, policy, -1.0)
    }

    fn combine(&self, other: &GaussianDensity, policy: &LinearizationPolicy, sign: f64) -> Result<GaussianDensity> {
        if other.is_empty() {
            return Ok(self.clone());
        }
        let other = self.align(other, policy)?;
        let mut keys = self.keys.clone();
        let mut lin = self.lin.clone();
        for (j, key) in other.keys.iter().enumerate() {
            if !self.contains(key) {
                keys.push(*key);
                lin.push(other.lin[j]);
            }
        }
        let n = 3 * keys.len();
        let mut info = DMatrix::zeros(n, n);
        let mut vec = DVector::zeros(n);
        let old = self.dim();
        info.view_mut((0, 0), (old, old)).copy_from(&self.info);
        vec.rows_mut(0, old).copy_from(&self.vec);
        let slots: Vec<usize> = other
            .keys
            .iter()
            .map(|k| keys.iter().position(|x| x == k).expect("key inserted above"))
            .collect();
        for (a, &sa) in slots.iter().enumerate() {
            let mut v = vec.fixed_rows_mut::<3>(3 * sa);
            v += other.vec.fixed_rows::<3>(3 * a) * sign;
            for (b, &sb) in slots.iter().enumerate() {
                let mut blk = info.fixed_view_mut::<3, 3>(3 * sa, 3 * sb);
                blk += other.info.fixed_view::<3, 3>(3 * a, 3 * b) * sign;
            }
        }
        Ok(GaussianDensity { keys, lin, info, vec })
    }

    /// Marginal over `keep` by Schur complement. The result lists the kept
    /// variables in this density's order.
    pub fn marginalize(&self, keep: &[VariableKey]) -> Result<GaussianDensity> {
        if keep.is_empty() {
            return Err(Error::contract("marginalize: empty keep set"));
        }
        if let Some(missing) = keep.iter().find(|k| !self.contains(k)) {
            return Err(Error::contract(format!("marginalize: {missing} is not in the density")));
        }
        let keep_set: BTreeSet<_> = keep.iter().collect();
        let (kept, dropped): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&i| keep_set.contains(&self.keys[i]));
        if dropped.is_empty() {
            return Ok(self.clone());
        }
        let idx = |vars: &[usize]| -> Vec<usize> { vars.iter().flat_map(|&i| 3 * i..3 * i + 3).collect() };
        let ki = idx(&kept);
        let di = idx(&dropped);
        let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |r, c| self.info[(rows[r], cols[c])]);
        let l_kk = sub(&ki, &ki);
        let l_kd = sub(&ki, &di);
        let l_dd = sub(&di, &di);
        let e_k = DVector::from_fn(ki.len(), |r, _| self.vec[ki[r]]);
        let e_d = DVector::from_fn(di.len(), |r, _| self.vec[di[r]]);

        let (x_info, x_vec) = match l_dd.clone().cholesky() {
            Some(ch) => (ch.solve(&l_kd.transpose()), ch.solve(&e_d)),
            None => {
                let lu = l_dd.lu();
                match (lu.solve(&l_kd.transpose()), lu.solve(&e_d)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(Error::UnderConstrained {
                            variables: dropped.iter().map(|&i| self.keys[i]).collect(),
                        })
                    }
                }
            }
        };
        let info = &l_kk - &l_kd * x_info;
        let vec = &e_k - &l_kd * x_vec;
        GaussianDensity::new(
            kept.iter().map(|&i| self.keys[i]).collect(),
            kept.iter().map(|&i| self.lin[i]).collect(),
            (&info + info.transpose()) * 0.5,
            vec,
        )
    }

    /// Stacked tangent displacement of `point` from the linearization point.
    fn displacement(&self, point: &BTreeMap<VariableKey, Pose2>) -> Result<DVector<f64>> {
        let mut d = DVector::zeros(self.dim());
        for (i, key) in self.keys.iter().enumerate() {
            let p = point
                .get(key)
                .ok_or_else(|| Error::contract(format!("no value for {key}")))?;
            d.fixed_rows_mut::<3>(3 * i).copy_from(&self.lin[i].local(p));
        }
        Ok(d)
    }

    /// Normalized Gaussian log-density at `point`.
    pub fn log_density(&self, point: &BTreeMap<VariableKey, Pose2>) -> Result<f64> {
        let d = self.displacement(point)?;
        if self.is_empty() {
            return Ok(0.0);
        }
        let chol = self
            .info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SamplingUnavailable("information matrix is not positive-definite".into()))?;
        let mu = chol.solve(&self.vec);
        let r = d - mu;
        let quad = (r.transpose() * &self.info * &r)[(0, 0)];
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        Ok(-0.5 * quad + 0.5 * log_det - 0.5 * self.dim() as f64 * (2.0 * PI).ln())
    }

    /// `n` joint samples of all variables.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<BTreeMap<VariableKey, Pose2>>> {
        let chol = self
            .info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SamplingUnavailable("density is not positive-definite".into()))?;
        let mu = chol.solve(&self.vec);
        let upper = chol.l().transpose();
        let dim = self.dim();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = upper
                .solve_upper_triangular(&z)
                .expect("cholesky factor has a positive diagonal");
            let d = &mu + x;
            out.push(
                self.keys
                    .iter()
                    .enumerate()
                    .map(|(i, k)| (*k, self.lin[i].retract(&Vector3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]))))
                    .collect(),
            );
        }
        Ok(out)
    }
}
