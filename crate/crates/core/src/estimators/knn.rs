use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{ArmEstimate, EstimatorError, UNINFORMED_ESTIMATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnRecord {
    pub context: Vec<f64>,
    pub action: usize,
    pub loss: u8,
}

/// Append-only interaction buffer queried by K-nearest-neighbour averaging.
///
/// Neighbours are the `k` records closest to the query in Euclidean
/// distance over the whole buffer; equal distances go to the earlier record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnBuffer {
    action_ids: Vec<String>,
    dim: usize,
    k: usize,
    warmup: usize,
    gamma: f64,
    records: Vec<KnnRecord>,
}

impl KnnBuffer {
    pub fn new(
        action_ids: Vec<String>,
        dim: usize,
        k: usize,
        warmup: usize,
        gamma: f64,
    ) -> Result<Self, EstimatorError> {
        if k == 0 {
            return Err(EstimatorError::InvalidParameter("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(EstimatorError::InvalidParameter(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if action_ids.is_empty() {
            return Err(EstimatorError::InvalidParameter("need at least one action".into()));
        }
        Ok(Self { action_ids, dim, k, warmup, gamma, records: Vec::new() })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn action_ids(&self) -> &[String] {
        &self.action_ids
    }

    pub fn records(&self) -> &[KnnRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), EstimatorError> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(EstimatorError::DimensionMismatch { expected: self.dim, actual: x.len() })
        }
    }

    pub fn push(&mut self, context: &[f64], action: usize, loss: u8) -> Result<(), EstimatorError> {
        self.check_dim(context)?;
        if action >= self.action_ids.len() {
            return Err(EstimatorError::UnknownAction(format!("#{action}")));
        }
        if loss > 1 {
            return Err(EstimatorError::InvalidLoss(loss));
        }
        self.records.push(KnnRecord { context: context.to_vec(), action, loss });
        Ok(())
    }

    pub fn push_action(&mut self, context: &[f64], action: &str, loss: u8) -> Result<(), EstimatorError> {
        let index = self
            .action_ids
            .iter()
            .position(|a| a == action)
            .ok_or_else(|| EstimatorError::UnknownAction(action.to_owned()))?;
        self.push(context, index, loss)
    }

    /// Indices of the `k` nearest records, nearest first.
    pub fn neighbours(&self, x: &[f64]) -> Result<Vec<usize>, EstimatorError> {
        self.check_dim(x)?;
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (squared_distance(&r.context, x), i))
            .collect();
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if scored.len() > self.k {
            scored.select_nth_unstable_by(self.k - 1, by_distance);
            scored.truncate(self.k);
        }
        scored.sort_unstable_by(by_distance);
        Ok(scored.into_iter().map(|(_, i)| i).collect())
    }

    /// Mean neighbour loss per action. Actions with no neighbour among the
    /// `k` nearest keep the uninformed estimate.
    pub fn estimate(&self, x: &[f64]) -> Result<Vec<ArmEstimate>, EstimatorError> {
        let mut sums = vec![0u32; self.action_ids.len()];
        let mut counts = vec![0usize; self.action_ids.len()];
        for i in self.neighbours(x)? {
            let r = &self.records[i];
            sums[r.action] += u32::from(r.loss);
            counts[r.action] += 1;
        }
        Ok(self
            .action_ids
            .iter()
            .enumerate()
            .map(|(a, id)| ArmEstimate {
                action_id: id.clone(),
                r_hat: if counts[a] == 0 {
                    UNINFORMED_ESTIMATE
                } else {
                    f64::from(sums[a]) / counts[a] as f64
                },
                bonus: 0.0,
                support_count: counts[a],
            })
            .collect())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn buffer(k: usize) -> KnnBuffer {
        KnnBuffer::new(vec!["a1".into(), "a2".into()], 2, k, 25, 0.1).unwrap()
    }

    fn r_hats(b: &KnnBuffer, x: &[f64]) -> Vec<f64> {
        b.estimate(x).unwrap().into_iter().map(|e| e.r_hat).collect()
    }

    #[test]
    fn empty_buffer_is_uninformed() {
        let b = buffer(8);
        let est = b.estimate(&[0.3, -1.0]).unwrap();
        assert!(est.iter().all(|e| e.r_hat == 0.5 && e.support_count == 0 && e.bonus == 0.0));
    }

    #[test]
    fn neighbourhood_average_per_arm() {
        let mut b = buffer(3);
        b.push(&[0.0, 0.0], 0, 1).unwrap();
        b.push(&[0.1, 0.0], 0, 0).unwrap();
        b.push(&[0.0, 0.1], 1, 1).unwrap();
        assert_eq!(r_hats(&b, &[0.05, 0.05]), vec![0.5, 1.0]);
    }

    #[test]
    fn single_neighbour() {
        let mut b = buffer(1);
        b.push(&[0.2, 0.2], 0, 0).unwrap();
        b.push(&[9.0, 9.0], 0, 1).unwrap();
        let est = b.estimate(&[0.2, 0.2]).unwrap();
        assert_eq!(est[0].r_hat, 0.0);
        assert_eq!(est[1].r_hat, 0.5);
        assert_eq!(est[1].support_count, 0);
    }

    #[test]
    fn distance_ties_go_to_earlier_records() {
        let mut b = buffer(1);
        b.push(&[1.0, 0.0], 1, 1).unwrap();
        b.push(&[-1.0, 0.0], 0, 0).unwrap();
        assert_eq!(b.neighbours(&[0.0, 0.0]).unwrap(), vec![0]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut b = buffer(2);
        assert!(matches!(b.push(&[1.0], 0, 0), Err(EstimatorError::DimensionMismatch { .. })));
        assert!(matches!(b.push(&[1.0, 1.0], 5, 0), Err(EstimatorError::UnknownAction(_))));
        assert!(KnnBuffer::new(vec!["a".into()], 2, 0, 0, 0.1).is_err());
        assert!(KnnBuffer::new(vec!["a".into()], 2, 1, 0, 1.5).is_err());
    }
}
