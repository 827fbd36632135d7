//! Speculative-decoding integration: candidate token trees staged in the
//! cache's padded rows, tree-structured verification masks, acceptance
//! commits, and rollback of rejected rows.
//!
//! Under chunked allocation the rows between `valid_len` and `capacity`
//! already exist and already participate in the attention matmul; parking
//! candidate K/V rows there turns that wasted compute into verification work
//! without any extra allocation. When fewer padded rows remain than
//! candidates, the tree is truncated rather than triggering a reallocation.

use crate::attention::MASK_VALUE;
use crate::cache::{KvCache, TokenKv};
use crate::error::{Error, Result};

/// Candidate token tree in placement order: parents precede children, and
/// node `i` occupies cache row `valid_len + i` once placed. Roots attach to
/// the last committed token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeculationTree {
    tokens: Vec<u32>,
    parents: Vec<Option<usize>>,
}

impl SpeculationTree {
    /// Builds a tree from nodes listed in placement (breadth-first) order.
    pub fn new(tokens: Vec<u32>, parents: Vec<Option<usize>>) -> Result<Self> {
        if tokens.len() != parents.len() {
            return Err(Error::SpecDecode(format!(
                "{} tokens but {} parent links",
                tokens.len(),
                parents.len()
            )));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = p {
                if *p >= i {
                    return Err(Error::SpecDecode(format!(
                        "node {i} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        Ok(SpeculationTree { tokens, parents })
    }

    /// A linear chain: each node is the child of the previous one.
    pub fn chain(tokens: &[u32]) -> Self {
        let parents = (0..tokens.len())
            .map(|i| if i == 0 { None } else { Some(i - 1) })
            .collect();
        SpeculationTree {
            tokens: tokens.to_vec(),
            parents,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, node: usize) -> u32 {
        self.tokens[node]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents[node]
    }

    /// Keeps the first `len` nodes in placement order. A prefix is always
    /// parent-closed because parents precede children.
    pub fn truncated(&self, len: usize) -> SpeculationTree {
        let len = len.min(self.len());
        SpeculationTree {
            tokens: self.tokens[..len].to_vec(),
            parents: self.parents[..len].to_vec(),
        }
    }

    /// Node indices on the path from a root down to `node`, inclusive.
    pub fn ancestors_inclusive(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

/// Outcome of verifying a placed tree: the accepted root-to-node chain, in
/// placement order. `accepted_len` is the number of committed tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceResult {
    path: Vec<usize>,
}

impl AcceptanceResult {
    /// Validates that `path` is a root-anchored parent chain of `tree`.
    /// An empty path means full rejection.
    pub fn new(tree: &SpeculationTree, path: Vec<usize>) -> Result<Self> {
        if let Some(&first) = path.first() {
            if first >= tree.len() || tree.parent(first).is_some() {
                return Err(Error::SpecDecode(format!(
                    "acceptance path must start at a root, got node {first}"
                )));
            }
        }
        for w in path.windows(2) {
            if w[1] >= tree.len() || tree.parent(w[1]) != Some(w[0]) {
                return Err(Error::SpecDecode(format!(
                    "acceptance path breaks parent chain at node {}",
                    w[1]
                )));
            }
        }
        Ok(AcceptanceResult { path })
    }

    pub fn accepted_len(&self) -> usize {
        self.path.len()
    }

    pub fn path(&self) -> &[usize] {
        &self.path
    }
}

/// Limits a candidate tree to the padded rows available right now. Returns
/// the tree unchanged when it fits, a placement-order prefix when it does
/// not, and an empty tree when no padded rows remain (the caller must commit
/// or append to trigger the normal reallocation; admission never allocates).
pub fn admit_candidates(cache: &KvCache, tree: &SpeculationTree) -> SpeculationTree {
    let available = cache.capacity() - cache.valid_len() - cache.staged_len();
    if tree.len() <= available {
        tree.clone()
    } else {
        tree.truncated(available)
    }
}

/// Writes candidate K/V rows into the padded region at rows
/// `valid_len .. valid_len + tree.len()`, leaving `valid_len` unchanged.
/// `rows[i]` carries node `i`'s per-layer K/V. Never reallocates; an
/// oversized tree (possible only if admission was skipped) is an error.
pub fn place_candidates(
    cache: &mut KvCache,
    tree: &SpeculationTree,
    rows: &[TokenKv],
) -> Result<()> {
    if cache.staged_len() != 0 {
        return Err(Error::SpecDecode(
            "placement over already-staged rows; commit or clear first".into(),
        ));
    }
    if rows.len() != tree.len() {
        return Err(Error::DimensionMismatch {
            context: "candidate rows",
            expected: tree.len(),
            got: rows.len(),
        });
    }
    if tree.len() > cache.capacity() - cache.valid_len() {
        return Err(Error::CapacityExceeded {
            requested: cache.valid_len() + tree.len(),
            limit: cache.capacity(),
        });
    }
    let layers = cache.dims().layers;
    for (offset, tok) in rows.iter().enumerate() {
        if tok.k.len() != layers || tok.v.len() != layers {
            return Err(Error::DimensionMismatch {
                context: "candidate layers",
                expected: layers,
                got: tok.k.len(),
            });
        }
        for layer in 0..layers {
            cache.write_staged_row(layer, offset, &tok.k[layer], &tok.v[layer])?;
        }
    }
    Ok(())
}

/// Verification mask `[tree.len(), capacity]`: node `i`'s row is 0 over the
/// committed prefix, 0 at its ancestors and itself, and `-1e9` everywhere
/// else (sibling candidates and unstaged padding). Combine with a padding
/// bias built for `valid_len + tree.len()` attendable rows.
pub fn tree_mask(tree: &SpeculationTree, valid_len: usize, capacity: usize) -> Result<Vec<f32>> {
    if valid_len + tree.len() > capacity {
        return Err(Error::MaskBounds {
            valid_len: valid_len + tree.len(),
            capacity,
        });
    }
    let mut mask = vec![MASK_VALUE; tree.len() * capacity];
    for node in 0..tree.len() {
        let row = &mut mask[node * capacity..(node + 1) * capacity];
        row[..valid_len].fill(0.0);
        for a in tree.ancestors_inclusive(node) {
            row[valid_len + a] = 0.0;
        }
    }
    Ok(mask)
}

/// Commits the accepted chain: its rows are compacted to the front of the
/// staged region, `valid_len` advances by the accepted length, and every
/// remaining staged row is re-zeroed. Compaction writes are charged to
/// `append_write_elems`, one row's worth per accepted token, so the ledger
/// matches appending the accepted rows directly.
pub fn verify_and_commit(
    cache: &mut KvCache,
    tree: &SpeculationTree,
    result: &AcceptanceResult,
) -> Result<()> {
    for &node in result.path() {
        if node >= cache.staged_len() {
            return Err(Error::SpecDecode(format!(
                "accepted node {node} is not staged (staged rows: {})",
                cache.staged_len()
            )));
        }
    }
    // Re-validate against this tree; the result may have been built elsewhere.
    AcceptanceResult::new(tree, result.path().to_vec())?;
    let m = result.accepted_len();
    for (dst, &src) in result.path().iter().enumerate() {
        cache.move_staged_row(src, dst);
    }
    let dims = *cache.dims();
    cache.zero_staged_tail(m);
    cache.commit_staged(m);
    let moved = 2 * (dims.layers * dims.token_row_elems()) as u64 * m as u64;
    let mut ledger = *cache.ledger();
    ledger.append_write_elems += moved;
    cache.set_ledger(ledger);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::AllocationPolicy;
    use crate::dims::ModelDims;
    use crate::det;

    fn tiny_dims(n: usize) -> ModelDims {
        ModelDims::new(1, 1, 1, 2, n).unwrap()
    }

    fn filled_token(dims: &ModelDims, seed: u64) -> TokenKv {
        let mut tok = TokenKv::zeroed(dims);
        for layer in 0..dims.layers {
            for (e, x) in tok.k[layer].iter_mut().enumerate() {
                *x = det::uniform_f32(seed, 2 * layer as u64, e as u64, -1.0, 1.0);
            }
            for (e, x) in tok.v[layer].iter_mut().enumerate() {
                *x = det::uniform_f32(seed, 2 * layer as u64 + 1, e as u64, -1.0, 1.0);
            }
        }
        tok
    }

    /// Root with two children, one grandchild: the four-candidate tree with
    /// paths (0,2) and (0,1,3) in placement order.
    fn four_node_tree() -> SpeculationTree {
        SpeculationTree::new(vec![11, 21, 22, 31], vec![None, Some(0), Some(0), Some(1)]).unwrap()
    }

    #[test]
    fn tree_construction_checks_order() {
        assert!(SpeculationTree::new(vec![1, 2], vec![Some(1), None]).is_err());
        assert!(SpeculationTree::new(vec![1, 2], vec![None]).is_err());
        let t = SpeculationTree::chain(&[5, 6, 7]);
        assert_eq!(t.ancestors_inclusive(2), vec![0, 1, 2]);
    }

    #[test]
    fn admission_truncates_to_padded_rows() {
        let dims = tiny_dims(16);
        let mut cache = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0).unwrap();
        cache.append_token(&filled_token(&dims, 1)).unwrap();
        assert_eq!(cache.padded_rows(), 7);

        let tree = four_node_tree();
        let admitted = admit_candidates(&cache, &tree);
        assert_eq!(admitted, tree);
        assert_eq!(cache.padded_rows() - admitted.len(), 3);

        // Two padded rows left: tree of 4 truncates to 2 nodes.
        let dims2 = tiny_dims(16);
        let mut small = KvCache::new(dims2, AllocationPolicy::Bmc { chunk: 4 }, 0).unwrap();
        for i in 0..2 {
            small.append_token(&filled_token(&dims2, i)).unwrap();
        }
        assert_eq!(small.padded_rows(), 2);
        let admitted = admit_candidates(&small, &tree);
        assert_eq!(admitted.len(), 2);
        assert_eq!(admitted.tokens(), &[11, 21]);

        // No padded rows: empty tree, no reallocation.
        let dims3 = tiny_dims(16);
        let mut full = KvCache::new(dims3, AllocationPolicy::Bmc { chunk: 2 }, 0).unwrap();
        for i in 0..2 {
            full.append_token(&filled_token(&dims3, i)).unwrap();
        }
        assert_eq!(full.padded_rows(), 0);
        let before = full.ledger().alloc_events;
        let admitted = admit_candidates(&full, &tree);
        assert!(admitted.is_empty());
        assert_eq!(full.ledger().alloc_events, before);
    }

    #[test]
    fn placement_stages_without_commit() {
        let dims = tiny_dims(16);
        let mut cache = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0).unwrap();
        cache.append_token(&filled_token(&dims, 1)).unwrap();
        let tree = four_node_tree();
        let rows: Vec<TokenKv> = (0..4).map(|i| filled_token(&dims, 100 + i)).collect();
        let valid_before = cache.valid_len();
        let events_before = cache.ledger().alloc_events;
        place_candidates(&mut cache, &tree, &rows).unwrap();
        assert_eq!(cache.valid_len(), valid_before);
        assert_eq!(cache.staged_len(), 4);
        assert_eq!(cache.wasted_rows(), 3);
        assert_eq!(cache.ledger().alloc_events, events_before);
        // Staged rows land at valid_len.. in placement order.
        for (i, tok) in rows.iter().enumerate() {
            assert_eq!(cache.k_row(0, 0, valid_before + i), &tok.k[0][..]);
        }

        // Empty tree placement is a no-op.
        let dims2 = tiny_dims(16);
        let mut c2 = KvCache::new(dims2, AllocationPolicy::Bmc { chunk: 4 }, 0).unwrap();
        place_candidates(&mut c2, &SpeculationTree::chain(&[]), &[]).unwrap();
        assert_eq!(c2.staged_len(), 0);
    }

    #[test]
    fn placement_overflow_is_rejected() {
        let dims = tiny_dims(4);
        let mut cache = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 2 }, 0).unwrap();
        cache.append_token(&filled_token(&dims, 1)).unwrap();
        let tree = four_node_tree();
        let rows: Vec<TokenKv> = (0..4).map(|i| filled_token(&dims, i)).collect();
        assert!(place_candidates(&mut cache, &tree, &rows).is_err());
    }

    #[test]
    fn tree_mask_follows_ancestry() {
        // Chain of 2 at valid_len=2, capacity=8: node 0 attends columns
        // {0,1,2}, node 1 attends {0,1,2,3}, columns 4..8 stay masked.
        let chain = SpeculationTree::chain(&[7, 8]);
        let mask = tree_mask(&chain, 2, 8).unwrap();
        let row0: Vec<bool> = mask[0..8].iter().map(|&x| x == 0.0).collect();
        let row1: Vec<bool> = mask[8..16].iter().map(|&x| x == 0.0).collect();
        assert_eq!(
            row0,
            [true, true, true, false, false, false, false, false]
        );
        assert_eq!(row1, [true, true, true, true, false, false, false, false]);

        // Single root: committed prefix plus itself.
        let single = SpeculationTree::chain(&[9]);
        let mask = tree_mask(&single, 1, 4).unwrap();
        assert_eq!(mask, vec![0.0, 0.0, MASK_VALUE, MASK_VALUE]);

        // Two sibling roots mask each other.
        let siblings = SpeculationTree::new(vec![1, 2], vec![None, None]).unwrap();
        let mask = tree_mask(&siblings, 0, 2).unwrap();
        assert_eq!(mask[0..2], [0.0, MASK_VALUE]);
        assert_eq!(mask[2..4], [MASK_VALUE, 0.0]);

        assert!(tree_mask(&siblings, 3, 4).is_err());
    }

    #[test]
    fn figure_sequence_reproduces_wasted_rows() {
        // Seven padded rows, trees of four, acceptance lengths 2 then 1 then
        // enough space: wasted compute rows go 3 -> 1 -> 0.
        let dims = tiny_dims(16);
        let mut cache = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0).unwrap();
        cache.append_token(&filled_token(&dims, 0)).unwrap();
        assert_eq!(cache.padded_rows(), 7);

        let tree = four_node_tree();
        let rows: Vec<TokenKv> = (0..4).map(|i| filled_token(&dims, 10 + i)).collect();
        place_candidates(&mut cache, &tree, &rows).unwrap();
        assert_eq!(cache.wasted_rows(), 3);
        let accept = AcceptanceResult::new(&tree, vec![0, 2]).unwrap();
        verify_and_commit(&mut cache, &tree, &accept).unwrap();
        assert_eq!(cache.padded_rows(), 5);

        let rows: Vec<TokenKv> = (0..4).map(|i| filled_token(&dims, 20 + i)).collect();
        place_candidates(&mut cache, &tree, &rows).unwrap();
        assert_eq!(cache.wasted_rows(), 1);
        let accept = AcceptanceResult::new(&tree, vec![0]).unwrap();
        verify_and_commit(&mut cache, &tree, &accept).unwrap();
        assert_eq!(cache.padded_rows(), 4);

        let rows: Vec<TokenKv> = (0..4).map(|i| filled_token(&dims, 30 + i)).collect();
        place_candidates(&mut cache, &tree, &rows).unwrap();
        assert_eq!(cache.wasted_rows(), 0);
    }

    #[test]
    fn commit_matches_append_oracle() {
        // Committing an accepted path leaves the same committed rows as
        // appending those tokens' K/V directly.
        let dims = ModelDims::new(2, 2, 2, 3, 16).unwrap();
        let mut spec = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0).unwrap();
        let mut oracle = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0).unwrap();
        let seed_tok = filled_token(&dims, 0);
        spec.append_token(&seed_tok).unwrap();
        oracle.append_token(&seed_tok).unwrap();

        let tree = four_node_tree();
        let rows: Vec<TokenKv> = (0..4).map(|i| filled_token(&dims, 40 + i)).collect();
        place_candidates(&mut spec, &tree, &rows).unwrap();
        let accept = AcceptanceResult::new(&tree, vec![0, 1, 3]).unwrap();
        verify_and_commit(&mut spec, &tree, &accept).unwrap();

        for &node in accept.path() {
            oracle.append_token(&rows[node]).unwrap();
        }
        assert_eq!(spec.valid_len(), oracle.valid_len());
        let bh_rows = dims.batch * dims.kv_heads();
        for layer in 0..dims.layers {
            for bh in 0..bh_rows {
                for pos in 0..spec.valid_len() {
                    assert_eq!(spec.k_row(layer, bh, pos), oracle.k_row(layer, bh, pos));
                    assert_eq!(spec.v_row(layer, bh, pos), oracle.v_row(layer, bh, pos));
                }
            }
        }
        // Write accounting matches the append route too.
        assert_eq!(
            spec.ledger().append_write_elems,
            // seed + 4 placed + 3 compacted vs oracle: seed + 3 appended,
            // placement of rejected rows is the speculation overhead.
            oracle.ledger().append_write_elems + 2 * 4 * (dims.layers * dims.token_row_elems()) as u64
        );
        assert!(spec.padding_is_zeroed());
    }

    #[test]
    fn full_rejection_only_rezeroes() {
        let dims = tiny_dims(8);
        let mut cache = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0).unwrap();
        cache.append_token(&filled_token(&dims, 0)).unwrap();
        let tree = four_node_tree();
        let rows: Vec<TokenKv> = (0..4).map(|i| filled_token(&dims, 50 + i)).collect();
        place_candidates(&mut cache, &tree, &rows).unwrap();
        let valid = cache.valid_len();
        let accept = AcceptanceResult::new(&tree, vec![]).unwrap();
        verify_and_commit(&mut cache, &tree, &accept).unwrap();
        assert_eq!(cache.valid_len(), valid);
        assert_eq!(cache.staged_len(), 0);
        assert!(cache.padding_is_zeroed());
    }

    #[test]
    fn bad_acceptance_paths_are_rejected() {
        let tree = four_node_tree();
        // Not starting at a root.
        assert!(AcceptanceResult::new(&tree, vec![1]).is_err());
        // Skipping a link.
        assert!(AcceptanceResult::new(&tree, vec![0, 3]).is_err());
        // Out of range.
        assert!(AcceptanceResult::new(&tree, vec![0, 9]).is_err());
        // Valid chains.
        assert!(AcceptanceResult::new(&tree, vec![0, 1, 3]).is_ok());
        assert!(AcceptanceResult::new(&tree, vec![0, 2]).is_ok());

        // Unstaged node.
        let dims = tiny_dims(8);
        let mut cache = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0).unwrap();
        cache.append_token(&filled_token(&dims, 0)).unwrap();
        let rows: Vec<TokenKv> = (0..2).map(|i| filled_token(&dims, i)).collect();
        let small = tree.truncated(2);
        place_candidates(&mut cache, &small, &rows).unwrap();
        let accept = AcceptanceResult::new(&tree, vec![0, 1, 3]).unwrap();
        assert!(verify_and_commit(&mut cache, &tree, &accept).is_err());
    }
}
