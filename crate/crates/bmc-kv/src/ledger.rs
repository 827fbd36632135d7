//! Exact operation counters for cache movement and attention compute.

use serde::{Deserialize, Serialize};

/// Counts of work performed, kept exact so analytical formulas can be checked
/// without tolerances. All counters are monotonically non-decreasing and
/// ledgers from independent components merge by pairwise sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Elements moved when a reallocation copies existing rows (K and V).
    pub realloc_copy_elems: u64,
    /// Elements written for new or staged token rows (K and V).
    pub append_write_elems: u64,
    /// Multiply-accumulate operations in attention score and value matmuls.
    pub sdpa_macs: u64,
    /// Buffer allocations, one per layer per allocation point (a layer's K/V
    /// pair counts once).
    pub alloc_events: u64,
    /// Bytes allocated across all allocation events.
    pub alloc_bytes: u64,
}

impl CostLedger {
    /// Pairwise sum. Associative and commutative.
    pub fn merge(&mut self, other: &CostLedger) {
        self.realloc_copy_elems += other.realloc_copy_elems;
        self.append_write_elems += other.append_write_elems;
        self.sdpa_macs += other.sdpa_macs;
        self.alloc_events += other.alloc_events;
        self.alloc_bytes += other.alloc_bytes;
    }

    pub fn merged(mut self, other: &CostLedger) -> CostLedger {
        self.merge(other);
        self
    }

    /// Total element movement: reallocation copies plus new-row writes.
    /// This is the per-iteration movement convention used by the copy
    /// closed forms.
    pub fn moved_elems(&self) -> u64 {
        self.realloc_copy_elems + self.append_write_elems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(a: u64) -> CostLedger {
        CostLedger {
            realloc_copy_elems: a,
            append_write_elems: 2 * a,
            sdpa_macs: 3 * a,
            alloc_events: a / 2,
            alloc_bytes: 4 * a,
        }
    }

    #[test]
    fn merge_is_commutative_and_associative() {
        let (a, b, c) = (sample(3), sample(5), sample(11));
        assert_eq!(a.merged(&b), b.merged(&a));
        assert_eq!(a.merged(&b).merged(&c), a.merged(&b.merged(&c)));
    }

    #[test]
    fn moved_elems_sums_copies_and_writes() {
        let l = sample(7);
        assert_eq!(l.moved_elems(), 7 + 14);
    }
}
