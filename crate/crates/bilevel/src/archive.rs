//! Archive of verified lower-level optimizations.
//!
//! Every entry pairs an upper vector with the lower vector a completed
//! lower-level optimization returned for it, so the archive samples the
//! reaction-set mapping and the optimal-value function. Surrogate-predicted
//! members never enter.

use crate::individual::{Individual, Tag};

#[derive(Debug, Clone, Default)]
pub struct Archive {
    entries: Vec<Individual>,
    capacity: Option<usize>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bounded archive; once full, the oldest entry is dropped first.
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity: Some(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Individual] {
        &self.entries
    }

    /// Inserts a member produced by a completed lower-level optimization.
    ///
    /// # Panics
    ///
    /// Panics if the member is surrogate-predicted; callers must verify a
    /// prediction with a true solve before archiving it.
    pub fn insert(&mut self, member: Individual) {
        assert_eq!(
            member.tag,
            Tag::Optimized,
            "only verified lower-level solutions may be archived"
        );
        if let Some(cap) = self.capacity {
            if self.entries.len() == cap {
                self.entries.remove(0);
            }
        }
        self.entries.push(member);
    }

    /// Indices of the `k` entries nearest to `x_u` in Euclidean distance,
    /// nearest first; insertion order breaks ties. Returns fewer than `k`
    /// indices only when the archive is smaller than `k`.
    pub fn nearest(&self, x_u: &[f64], k: usize) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (squared_distance(&e.x_u, x_u), i))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        order.truncate(k);
        order.into_iter().map(|(_, i)| i).collect()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(x: f64, tag: Tag) -> Individual {
        Individual {
            x_u: vec![x],
            x_l: vec![0.0],
            f_upper: 0.0,
            f_lower: 0.0,
            ul_violation: 0.0,
            ll_violation: 0.0,
            ul_constraints: vec![],
            ll_constraints: vec![],
            tag,
        }
    }

    #[test]
    fn nearest_orders_by_distance_then_insertion() {
        let mut archive = Archive::new();
        for x in [5.0, 1.0, 3.0, 1.0] {
            archive.insert(entry(x, Tag::Optimized));
        }
        // Distances from 0.0: 5, 1, 3, 1; the two entries at 1.0 tie and
        // keep insertion order.
        assert_eq!(archive.nearest(&[0.0], 3), vec![1, 3, 2]);
        assert_eq!(archive.nearest(&[0.0], 10).len(), 4);
    }

    #[test]
    #[should_panic(expected = "verified")]
    fn predictions_cannot_be_archived() {
        let mut archive = Archive::new();
        archive.insert(entry(0.0, Tag::Predicted));
    }

    #[test]
    fn capacity_drops_oldest_first() {
        let mut archive = Archive::with_capacity(2);
        archive.insert(entry(1.0, Tag::Optimized));
        archive.insert(entry(2.0, Tag::Optimized));
        archive.insert(entry(3.0, Tag::Optimized));
        let xs: Vec<f64> = archive.entries().iter().map(|e| e.x_u[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0]);
    }
}
