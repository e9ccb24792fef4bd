use std::collections::VecDeque;

use super::config::Fusion;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Group-aggregated attention row of one producer token.
///
/// `scores[k]` is the weight the producer gave to the k-th live entry. Columns
/// for entries newer than the producer hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow<T> {
    pub producer: usize,
    pub scores: Vec<T>,
}

/// Ring buffer of the last `capacity` producers' attention rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfileWindow<T> {
    capacity: usize,
    rows: VecDeque<ProfileRow<T>>,
}

impl<T: Scalar> AttentionProfileWindow<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows ordered oldest producer first.
    pub fn rows(&self) -> &VecDeque<ProfileRow<T>> {
        &self.rows
    }

    /// Appends the newest row, dropping the oldest when over capacity.
    ///
    /// `occupancy` is the store's current entry count; the row must cover it.
    pub fn record(&mut self, aggregated: Vec<T>, producer: usize, occupancy: usize) -> Result<()> {
        if aggregated.len() != occupancy {
            return Err(Error::InvalidShape(format!(
                "profile row of length {} for occupancy {occupancy}",
                aggregated.len()
            )));
        }
        if let Some(stale) = self.rows.iter().find(|r| r.scores.len() != occupancy) {
            return Err(Error::InternalInvariantViolation(format!(
                "profile row of producer {} has length {} but occupancy is {occupancy}",
                stale.producer,
                stale.scores.len()
            )));
        }
        self.rows.push_back(ProfileRow {
            producer,
            scores: aggregated,
        });
        while self.rows.len() > self.capacity {
            self.rows.pop_front();
        }
        Ok(())
    }

    pub(crate) fn push_zero_column(&mut self) {
        for row in &mut self.rows {
            row.scores.push(T::zero());
        }
    }

    pub(crate) fn retain_columns(&mut self, keep: &[usize]) {
        for row in &mut self.rows {
            row.scores = keep.iter().map(|&k| row.scores[k]).collect();
        }
    }

    pub(crate) fn check(&self, occupancy: usize) -> Result<(), String> {
        if self.rows.len() > self.capacity {
            return Err(format!(
                "{} profile rows exceed window {}",
                self.rows.len(),
                self.capacity
            ));
        }
        if self
            .rows
            .iter()
            .zip(self.rows.iter().skip(1))
            .any(|(a, b)| a.producer >= b.producer)
        {
            return Err("profile rows not ordered by producer".into());
        }
        match self.rows.iter().find(|r| r.scores.len() != occupancy) {
            Some(r) => Err(format!(
                "profile row of producer {} has length {} but occupancy is {occupancy}",
                r.producer,
                r.scores.len()
            )),
            None => Ok(()),
        }
    }
}

/// Fused relevance scores over a store's distant (non-recent) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxScoreVector<T>(pub Vec<T>);

impl<T> AuxScoreVector<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

/// Combines the window rows into one score per distant entry.
///
/// The recent set is the last `min(capacity, occupancy)` entries; only the
/// columns before it are returned.
pub fn fuse<T: Scalar>(window: &AttentionProfileWindow<T>, fusion: Fusion) -> Result<AuxScoreVector<T>> {
    let first = window.rows.front().ok_or(Error::EmptyWindow)?;
    let occupancy = first.scores.len();
    let distant = occupancy - window.capacity.min(occupancy);
    let mut scores = first.scores[..distant].to_vec();
    for row in window.rows.iter().skip(1) {
        if row.scores.len() != occupancy {
            return Err(Error::InternalInvariantViolation(format!(
                "ragged profile window: {} vs {occupancy}",
                row.scores.len()
            )));
        }
        for (f, &x) in scores.iter_mut().zip(&row.scores[..distant]) {
            *f = match fusion {
                Fusion::Sum => *f + x,
                Fusion::Max => f.max(x),
            };
        }
    }
    Ok(AuxScoreVector(scores))
}
