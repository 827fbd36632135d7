//! Walk through repurposing padded rows for speculative candidates.
//!
//! A freshly allocated chunk carries padded rows whose attention compute is
//! pure overhead. Parking a draft model's candidate tree there converts the
//! overhead into verification: each placement shrinks the wasted-row count,
//! reaching zero once acceptances line the chunk up with the tree size.
//!
//! ```bash
//! cargo run --example speculative_reuse
//! ```

use bmc_kv::{
    admit_candidates, place_candidates, tree_mask, verify_and_commit, AcceptanceResult,
    AllocationPolicy, KvCache, ModelDims, SpeculationTree, TokenKv,
};

fn token(dims: &ModelDims, tag: u64) -> TokenKv {
    let mut t = TokenKv::zeroed(dims);
    for layer in 0..dims.layers {
        for (e, x) in t.k[layer].iter_mut().enumerate() {
            *x = bmc_kv::det::uniform_f32(tag, layer as u64, e as u64, -1.0, 1.0);
        }
        for (e, x) in t.v[layer].iter_mut().enumerate() {
            *x = bmc_kv::det::uniform_f32(tag + 1000, layer as u64, e as u64, -1.0, 1.0);
        }
    }
    t
}

fn main() -> bmc_kv::Result<()> {
    let dims = ModelDims::new(1, 1, 2, 4, 32)?;
    let mut cache = KvCache::new(dims, AllocationPolicy::Bmc { chunk: 8 }, 0)?;
    cache.append_token(&token(&dims, 1))?;
    println!(
        "chunk of 8 allocated, 1 token committed -> {} padded rows\n",
        cache.padded_rows()
    );

    // Candidate tree of four: root, two children, one grandchild. Two paths
    // are explored: (root, child2) and (root, child1, grandchild).
    let tree = SpeculationTree::new(vec![11, 21, 22, 31], vec![None, Some(0), Some(0), Some(1)])?;
    println!("candidate tree: 4 nodes, parents [root, 0, 0, 1]");

    let mask = tree_mask(&tree, cache.valid_len(), cache.capacity())?;
    println!("verification mask rows (0 = attend, x = masked):");
    for node in 0..tree.len() {
        let row: String = mask[node * cache.capacity()..(node + 1) * cache.capacity()]
            .iter()
            .map(|&v| if v == 0.0 { '0' } else { 'x' })
            .collect();
        println!("  node {node}: {row}");
    }

    let accepts: [&[usize]; 3] = [&[0, 2], &[0], &[0, 1, 3]];
    for (round, accept) in accepts.iter().enumerate() {
        let admitted = admit_candidates(&cache, &tree);
        let rows: Vec<TokenKv> = (0..admitted.len())
            .map(|i| token(&dims, (round * 10 + i) as u64 + 100))
            .collect();
        place_candidates(&mut cache, &admitted, &rows)?;
        println!(
            "\nround {}: placed {} candidates, wasted rows = {}",
            round + 1,
            admitted.len(),
            cache.wasted_rows()
        );
        let result = AcceptanceResult::new(&admitted, accept.to_vec())?;
        verify_and_commit(&mut cache, &admitted, &result)?;
        println!(
            "  accepted path {:?} -> valid_len = {}, padded rows = {}",
            accept,
            cache.valid_len(),
            cache.padded_rows()
        );
    }

    println!(
        "\nwasted rows went 3 -> 1 -> 0 with no reallocation (alloc events: {}).",
        cache.ledger().alloc_events
    );
    println!("rejected candidates were re-zeroed: padding clean = {}", cache.padding_is_zeroed());
    Ok(())
}
