use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemcError};
use crate::nn::ops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub label: usize,
}

/// Fixed-capacity FIFO of detached unit-norm embeddings and their labels.
///
/// Values are stored in f64 regardless of the model dtype and materialized
/// as constants, so nothing read from the queue can carry gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
}

impl ContrastiveQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends one entry, evicting the oldest when full.
    pub fn push(&mut self, embedding: Vec<f64>, label: usize) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(SemcError::State(format!(
                "queue holds {}-d embeddings, got {}",
                self.dim,
                embedding.len()
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry { embedding, label });
        Ok(())
    }

    /// Enqueues each key batch in order (all rows of the first, then the
    /// second, ...), pairing row `b` with `labels[b]`.
    pub fn update(&mut self, keys: &[Tensor], labels: &[usize]) -> Result<()> {
        for k in keys {
            let (b, d) = k.dims2()?;
            if b != labels.len() {
                return Err(SemcError::State(format!(
                    "{b} key embeddings for {} labels",
                    labels.len()
                )));
            }
            if d != self.dim {
                return Err(SemcError::State(format!(
                    "queue holds {}-d embeddings, got {d}",
                    self.dim
                )));
            }
        }
        for k in keys {
            let rows = ops::to_vec_f64(&k.detach())?;
            for (row, &label) in rows.chunks(self.dim).zip(labels) {
                self.push(row.to_vec(), label)?;
            }
        }
        Ok(())
    }

    /// Constant (len × dim) tensor of the stored embeddings, oldest first.
    pub fn embeddings(&self, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        let flat: Vec<f64> = self
            .entries
            .iter()
            .flat_map(|e| e.embedding.iter().copied())
            .collect();
        Ok(Some(
            Tensor::from_vec(flat, (self.entries.len(), self.dim), device)?.to_dtype(dtype)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(values: &[f64], dim: usize) -> Tensor {
        Tensor::from_vec(values.to_vec(), (values.len() / dim, dim), &Device::Cpu).unwrap()
    }

    #[test]
    fn eviction_drops_oldest() {
        let mut q = ContrastiveQueue::new(8, 1);
        for i in 0..8 {
            q.push(vec![i as f64], i).unwrap();
        }
        q.update(&[rows(&[10.0, 11.0], 1), rows(&[12.0, 13.0], 1)], &[1, 2])
            .unwrap();
        let first: Vec<f64> = q.iter().map(|e| e.embedding[0]).collect();
        assert_eq!(first, vec![4.0, 5.0, 6.0, 7.0, 10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn enqueue_order_is_second_view_then_third() {
        let mut q = ContrastiveQueue::new(16, 2);
        let e2 = rows(&[1.0, 0.0, 0.0, 1.0], 2);
        let e3 = rows(&[-1.0, 0.0, 0.0, -1.0], 2);
        q.update(&[e2, e3], &[3, 5]).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q.labels(), vec![3, 5, 3, 5]);
        assert_eq!(q.iter().nth(2).unwrap().embedding, vec![-1.0, 0.0]);
    }

    #[test]
    fn mismatched_labels_rejected() {
        let mut q = ContrastiveQueue::new(4, 2);
        let e = rows(&[1.0, 0.0, 0.0, 1.0], 2);
        assert!(matches!(q.update(&[e], &[0]), Err(SemcError::State(_))));
        assert!(q.is_empty());
    }

    #[test]
    fn materialized_queue_is_constant() {
        let mut q = ContrastiveQueue::new(4, 2);
        q.push(vec![0.6, 0.8], 1).unwrap();
        let t = q.embeddings(DType::F32, &Device::Cpu).unwrap().unwrap();
        assert!(!t.is_variable());
        assert!(!t.track_op());
        assert_eq!(t.dims(), &[1, 2]);
    }

    proptest! {
        #[test]
        fn fifo_matches_reference(capacity in 1usize..12, pushes in proptest::collection::vec(0usize..5, 0..60)) {
            let mut q = ContrastiveQueue::new(capacity, 1);
            let mut reference: Vec<(f64, usize)> = Vec::new();
            for (i, label) in pushes.iter().enumerate() {
                q.push(vec![i as f64], *label).unwrap();
                reference.push((i as f64, *label));
                if reference.len() > capacity {
                    reference.remove(0);
                }
            }
            let got: Vec<(f64, usize)> = q.iter().map(|e| (e.embedding[0], e.label)).collect();
            prop_assert_eq!(got, reference);
            prop_assert!(q.len() <= capacity);
        }
    }
}
