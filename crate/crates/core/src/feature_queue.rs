//! Bounded FIFO of paired embeddings from recent minibatches.
//!
//! The transport problems are solved over the queue contents rather than a
//! single minibatch, so the uniform class marginal is enforced over a
//! population larger than the number of classes. Rows are detached copies;
//! nothing in the queue links back to the encoders that produced them.

use std::collections::VecDeque;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

#[derive(Debug, Clone)]
struct Entry {
    a: Vec<f64>,
    b: Vec<f64>,
    seq: u64,
}

#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    dim: Option<usize>,
    entries: VecDeque<Entry>,
    /// With capacity 0 the most recent batch stands in for the queue.
    last_batch: Vec<Entry>,
    last_batch_len: usize,
    next_seq: u64,
}

/// Queue contents in insertion order (oldest first), plus the rows holding
/// the most recent minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueSnapshot {
    pub a: Matrix,
    pub b: Matrix,
    pub batch_rows: Range<usize>,
    /// Insertion sequence number of every row; both modalities share them.
    pub seq: Vec<u64>,
}

impl QueueSnapshot {
    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.rows() == 0
    }

    pub fn batch_indices(&self) -> Vec<usize> {
        self.batch_rows.clone().collect()
    }
}

impl FeatureQueue {
    pub fn new(capacity: usize) -> Self {
        FeatureQueue {
            capacity,
            dim: None,
            entries: VecDeque::with_capacity(capacity),
            last_batch: Vec::new(),
            last_batch_len: 0,
            next_seq: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a minibatch of paired rows and returns how many old pairs were
    /// evicted.
    pub fn push(&mut self, a: &Matrix, b: &Matrix) -> Result<usize> {
        if a.rows() != b.rows() {
            return Err(Error::Contract(format!(
                "paired push with {} and {} rows",
                a.rows(),
                b.rows()
            )));
        }
        if a.cols() != b.cols() {
            return Err(Error::dim(
                "FeatureQueue::push",
                format!("modality widths {} vs {}", a.cols(), b.cols()),
            ));
        }
        if let Some(d) = self.dim {
            if a.cols() != d {
                return Err(Error::dim(
                    "FeatureQueue::push",
                    format!("queue holds {d}-dim rows, got {}", a.cols()),
                ));
            }
        }
        if self.capacity > 0 && a.rows() > self.capacity {
            return Err(Error::Contract(format!(
                "batch of {} exceeds queue capacity {}",
                a.rows(),
                self.capacity
            )));
        }
        self.dim = Some(a.cols());

        let batch: Vec<Entry> = (0..a.rows())
            .map(|i| {
                let e = Entry {
                    a: a.row(i).to_vec(),
                    b: b.row(i).to_vec(),
                    seq: self.next_seq,
                };
                self.next_seq += 1;
                e
            })
            .collect();

        if self.capacity == 0 {
            self.last_batch = batch;
            return Ok(0);
        }
        let evicted = (self.entries.len() + batch.len()).saturating_sub(self.capacity);
        self.entries.drain(..evicted);
        self.entries.extend(batch);
        self.last_batch_len = a.rows();
        Ok(evicted)
    }

    pub fn snapshot(&self) -> Result<QueueSnapshot> {
        let (rows, batch_len): (Vec<&Entry>, usize) = if self.capacity == 0 {
            (self.last_batch.iter().collect(), self.last_batch.len())
        } else {
            (self.entries.iter().collect(), self.last_batch_len)
        };
        if rows.is_empty() {
            return Err(Error::Contract(
                "snapshot of an empty queue with no current batch".into(),
            ));
        }
        let d = self.dim.unwrap_or(0);
        let n = rows.len();
        let mut a = Vec::with_capacity(n * d);
        let mut b = Vec::with_capacity(n * d);
        let mut seq = Vec::with_capacity(n);
        for e in rows {
            a.extend_from_slice(&e.a);
            b.extend_from_slice(&e.b);
            seq.push(e.seq);
        }
        Ok(QueueSnapshot {
            a: Matrix::from_vec(n, d, a)?,
            b: Matrix::from_vec(n, d, b)?,
            batch_rows: n - batch_len..n,
            seq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(start: f64, rows: usize) -> (Matrix, Matrix) {
        let a =
            Matrix::from_vec(rows, 2, (0..rows * 2).map(|i| start + i as f64).collect()).unwrap();
        let b = a.map(|v| -v);
        (a, b)
    }

    #[test]
    fn fills_then_evicts_oldest() {
        let mut q = FeatureQueue::new(4);
        let (a1, b1) = batch(0.0, 2);
        let (a2, b2) = batch(10.0, 2);
        assert_eq!(q.push(&a1, &b1).unwrap(), 0);
        assert_eq!(q.push(&a2, &b2).unwrap(), 0);
        let s = q.snapshot().unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.batch_indices(), vec![2, 3]);
        assert_eq!(s.a.select_rows(&[0, 1]), a1);
        assert_eq!(s.b.select_rows(&[2, 3]), b2);

        let (a3, b3) = batch(20.0, 2);
        assert_eq!(q.push(&a3, &b3).unwrap(), 2);
        let s = q.snapshot().unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.a.select_rows(&[0, 1]), a2);
        assert_eq!(s.seq, vec![2, 3, 4, 5]);
    }

    #[test]
    fn full_eviction() {
        let mut q = FeatureQueue::new(2);
        let (a1, b1) = batch(0.0, 2);
        let (a2, b2) = batch(5.0, 2);
        q.push(&a1, &b1).unwrap();
        q.push(&a2, &b2).unwrap();
        let s = q.snapshot().unwrap();
        assert_eq!(s.batch_indices(), vec![0, 1]);
        assert_eq!(s.a, a2);
        assert_eq!(s.b, b2);
    }

    #[test]
    fn zero_capacity_uses_current_batch() {
        let mut q = FeatureQueue::new(0);
        assert!(matches!(q.snapshot(), Err(Error::Contract(_))));
        let (a, b) = batch(0.0, 3);
        assert_eq!(q.push(&a, &b).unwrap(), 0);
        assert!(q.is_empty());
        let s = q.snapshot().unwrap();
        assert_eq!(s.a, a);
        assert_eq!(s.batch_indices(), vec![0, 1, 2]);
    }

    #[test]
    fn contract_errors() {
        let mut q = FeatureQueue::new(2);
        let (a, b) = batch(0.0, 3);
        assert!(matches!(q.push(&a, &b), Err(Error::Contract(_))));
        let (a, b) = batch(0.0, 1);
        q.push(&a, &b).unwrap();
        assert!(matches!(
            q.push(&Matrix::zeros(1, 3), &Matrix::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
        assert!(q.push(&Matrix::zeros(1, 2), &Matrix::zeros(2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn retains_last_capacity_pairs(
            capacity in 1usize..20,
            sizes in proptest::collection::vec(1usize..8, 1..12),
        ) {
            let mut q = FeatureQueue::new(capacity);
            let mut pushed: Vec<f64> = Vec::new();
            let mut next = 0.0;
            for s in sizes.into_iter().map(|s| s.min(capacity)) {
                let a = Matrix::from_vec(s, 1, (0..s).map(|i| next + i as f64).collect()).unwrap();
                let b = a.map(|v| v * 2.0);
                pushed.extend_from_slice(a.as_slice());
                next += s as f64;
                q.push(&a, &b).unwrap();
                let snap = q.snapshot().unwrap();
                let keep = pushed.len().min(capacity);
                prop_assert_eq!(snap.a.as_slice(), &pushed[pushed.len() - keep..]);
                // Alignment: every B row is the partner of the A row.
                for (x, y) in snap.a.as_slice().iter().zip(snap.b.as_slice()) {
                    prop_assert_eq!(*y, *x * 2.0);
                }
                prop_assert_eq!(snap.batch_rows.len(), s);
                prop_assert_eq!(snap.batch_rows.end, keep);
            }
        }
    }
}
