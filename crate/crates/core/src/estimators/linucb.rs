use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{ArmEstimate, EstimatorError};

/// Ridge-regression state of one arm: `A = I + Σ x xᵀ`, `b = Σ loss·x`.
#[derive(Debug, Clone)]
pub struct LinUcbArm {
    a: DMatrix<f64>,
    b: DVector<f64>,
    theta: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    count: usize,
}

impl LinUcbArm {
    fn fresh(dim: usize) -> Self {
        Self::from_parts(DMatrix::identity(dim, dim), DVector::zeros(dim), 0)
            .expect("identity is positive definite")
    }

    fn from_parts(a: DMatrix<f64>, b: DVector<f64>, count: usize) -> Option<Self> {
        let chol = Cholesky::new(a.clone())?;
        let theta = chol.solve(&b);
        Some(Self { a, b, theta, chol, count })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `xᵀ A⁻¹ x`, through the Cholesky factor.
    fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(x)
            .expect("cholesky factor has a positive diagonal");
        y.norm_squared()
    }
}

impl PartialEq for LinUcbArm {
    fn eq(&self, other: &Self) -> bool {
        self.a == other.a && self.b == other.b && self.theta == other.theta && self.count == other.count
    }
}

/// LinUCB over the loss: one linear model per action, queried as a lower
/// confidence bound `r̂ − α·√(xᵀA⁻¹x)` by the policy.
///
/// Contexts are expected to be normalized into the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct LinUcbState {
    action_ids: Vec<String>,
    dim: usize,
    alpha: f64,
    arms: Vec<LinUcbArm>,
}

impl LinUcbState {
    pub fn new(action_ids: Vec<String>, dim: usize, alpha: f64) -> Result<Self, EstimatorError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(EstimatorError::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
        }
        if dim == 0 || action_ids.is_empty() {
            return Err(EstimatorError::InvalidParameter("need at least one action and dimension".into()));
        }
        let arms = action_ids.iter().map(|_| LinUcbArm::fresh(dim)).collect();
        Ok(Self { action_ids, dim, alpha, arms })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn action_ids(&self) -> &[String] {
        &self.action_ids
    }

    pub fn arm(&self, index: usize) -> &LinUcbArm {
        &self.arms[index]
    }

    fn index_of(&self, action: &str) -> Result<usize, EstimatorError> {
        self.action_ids
            .iter()
            .position(|a| a == action)
            .ok_or_else(|| EstimatorError::UnknownAction(action.to_owned()))
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), EstimatorError> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(EstimatorError::DimensionMismatch { expected: self.dim, actual: x.len() })
        }
    }

    /// Raw linear prediction `⟨θ_a, x⟩`, unclamped.
    pub fn predict_at(&self, index: usize, x: &[f64]) -> f64 {
        self.arms[index].theta.iter().zip(x).map(|(t, v)| t * v).sum()
    }

    /// Estimate for the arm at `index`. `r_hat` is clamped into `[0, 1]`.
    pub fn estimate_at(&self, index: usize, x: &[f64]) -> Result<ArmEstimate, EstimatorError> {
        self.check_dim(x)?;
        let arm = self.arms.get(index).ok_or_else(|| EstimatorError::UnknownAction(format!("#{index}")))?;
        let xv = DVector::from_column_slice(x);
        let bonus = self.alpha * arm.quadratic_form(&xv).max(0.0).sqrt();
        Ok(ArmEstimate {
            action_id: self.action_ids[index].clone(),
            r_hat: self.predict_at(index, x).clamp(0.0, 1.0),
            bonus,
            support_count: arm.count,
        })
    }

    pub fn estimate(&self, x: &[f64], action: &str) -> Result<ArmEstimate, EstimatorError> {
        let index = self.index_of(action)?;
        self.estimate_at(index, x)
    }

    pub fn estimate_all(&self, x: &[f64]) -> Result<Vec<ArmEstimate>, EstimatorError> {
        (0..self.arms.len()).map(|i| self.estimate_at(i, x)).collect()
    }

    /// Rank-one update of one arm; the other arms are untouched.
    pub fn update_at(&mut self, index: usize, x: &[f64], loss: u8) -> Result<(), EstimatorError> {
        self.check_dim(x)?;
        if loss > 1 {
            return Err(EstimatorError::InvalidLoss(loss));
        }
        let arm = self.arms.get_mut(index).ok_or_else(|| EstimatorError::UnknownAction(format!("#{index}")))?;
        let xv = DVector::from_column_slice(x);
        arm.a.ger(1.0, &xv, &xv, 1.0);
        if loss == 1 {
            arm.b += &xv;
        }
        arm.count += 1;
        arm.chol = Cholesky::new(arm.a.clone()).expect("I + Σxxᵀ stays positive definite");
        arm.theta = arm.chol.solve(&arm.b);
        Ok(())
    }

    pub fn update(&mut self, x: &[f64], action: &str, loss: u8) -> Result<(), EstimatorError> {
        let index = self.index_of(action)?;
        self.update_at(index, x, loss)
    }
}

#[derive(Serialize, Deserialize)]
struct ArmWire {
    /// Row-major `p × p`.
    a: Vec<f64>,
    b: Vec<f64>,
    theta: Vec<f64>,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct StateWire {
    action_ids: Vec<String>,
    dim: usize,
    alpha: f64,
    arms: Vec<ArmWire>,
}

impl Serialize for LinUcbState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let arms = self
            .arms
            .iter()
            .map(|arm| ArmWire {
                a: arm.a.transpose().as_slice().to_vec(),
                b: arm.b.as_slice().to_vec(),
                theta: arm.theta.as_slice().to_vec(),
                count: arm.count,
            })
            .collect();
        StateWire { action_ids: self.action_ids.clone(), dim: self.dim, alpha: self.alpha, arms }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LinUcbState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let wire = StateWire::deserialize(d)?;
        if wire.arms.len() != wire.action_ids.len() {
            return Err(D::Error::custom("arm count does not match action count"));
        }
        let p = wire.dim;
        let arms = wire
            .arms
            .into_iter()
            .map(|arm| {
                if arm.a.len() != p * p || arm.b.len() != p {
                    return Err(D::Error::custom("arm matrix has the wrong shape"));
                }
                LinUcbArm::from_parts(DMatrix::from_row_slice(p, p, &arm.a), DVector::from_vec(arm.b), arm.count)
                    .ok_or_else(|| D::Error::custom("design matrix is not positive definite"))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { action_ids: wire.action_ids, dim: p, alpha: wire.alpha, arms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(alpha: f64) -> LinUcbState {
        LinUcbState::new(vec!["a1".into(), "a2".into()], 2, alpha).unwrap()
    }

    #[test]
    fn fresh_state_estimates_zero_with_norm_bonus() {
        let s = state(1.0);
        let e = s.estimate(&[0.6, 0.8], "a1").unwrap();
        assert_eq!(e.r_hat, 0.0);
        assert!((e.bonus - 1.0).abs() < 1e-12);
        let e = s.estimate(&[0.3, 0.0], "a2").unwrap();
        assert!((e.bonus - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_update_matches_hand_algebra() {
        let mut s = state(1.0);
        s.update(&[1.0, 0.0], "a1", 1).unwrap();
        let arm = s.arm(0);
        assert_eq!(arm.design(), &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));
        assert_eq!(arm.response().as_slice(), &[1.0, 0.0]);

        let e1 = s.estimate(&[1.0, 0.0], "a1").unwrap();
        assert!((e1.r_hat - 0.5).abs() < 1e-12);
        assert!((e1.bonus - 0.5f64.sqrt()).abs() < 1e-12);
        let e2 = s.estimate(&[0.0, 1.0], "a1").unwrap();
        assert_eq!(e2.r_hat, 0.0);
        assert!((e2.bonus - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_leaves_response_alone() {
        let mut s = state(1.0);
        s.update(&[0.5, 0.5], "a2", 0).unwrap();
        assert_eq!(s.arm(1).response().as_slice(), &[0.0, 0.0]);
        assert_ne!(s.arm(1).design(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn updates_are_isolated_per_arm() {
        let mut s = state(1.0);
        s.update(&[0.5, 0.1], "a1", 1).unwrap();
        s.update(&[0.2, 0.9], "a1", 0).unwrap();
        assert_eq!(s.arm(1).design(), &DMatrix::identity(2, 2));
        assert_eq!(s.arm(1).response().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let mut s = state(1.0);
        assert_eq!(s.estimate(&[0.0, 0.0], "zz"), Err(EstimatorError::UnknownAction("zz".into())));
        assert_eq!(
            s.update(&[0.0], "a1", 1),
            Err(EstimatorError::DimensionMismatch { expected: 2, actual: 1 })
        );
        assert!(LinUcbState::new(vec!["a".into()], 2, -1.0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut s = state(0.7);
        s.update(&[0.3, 0.4], "a1", 1).unwrap();
        s.update(&[-0.2, 0.9], "a2", 0).unwrap();
        s.update(&[0.1, 0.1], "a1", 1).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: LinUcbState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["arms"][1]["a"].as_array().unwrap().len(), 4);
    }
}
