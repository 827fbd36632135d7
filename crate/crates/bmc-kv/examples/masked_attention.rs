//! Show that zero-padded rows are numerically inert under the bias mask.
//!
//! The same committed K/V prefix is scored once in an exact-fit buffer and
//! once in a padded buffer; the outputs match the exact-prefix oracle and
//! the padded positions carry no post-softmax mass, while the MAC count
//! grows with the padding (the compute the mask does not remove).
//!
//! ```bash
//! cargo run --example masked_attention
//! ```

use bmc_kv::{
    build_bias_mask, exact_reference_attention, sdpa, sdpa_probs, AllocationPolicy,
    AttentionQuery, CostLedger, KvCache, ModelDims, TokenKv,
};

fn main() -> bmc_kv::Result<()> {
    let d = 8;
    let valid = 5;
    let capacity = 16;
    let dims = ModelDims::new(1, 1, 1, d, capacity)?;

    let mut exact = KvCache::new(dims, AllocationPolicy::Iterative, 0)?;
    let mut padded = KvCache::new(dims, AllocationPolicy::Upfront, 0)?;
    let mut flat_k = Vec::new();
    let mut flat_v = Vec::new();
    for i in 0..valid {
        let k: Vec<f32> = (0..d)
            .map(|e| bmc_kv::det::uniform_f32(3, i as u64, e as u64, -1.0, 1.0))
            .collect();
        let v: Vec<f32> = (0..d)
            .map(|e| bmc_kv::det::uniform_f32(4, i as u64, e as u64, -1.0, 1.0))
            .collect();
        flat_k.extend_from_slice(&k);
        flat_v.extend_from_slice(&v);
        let tok = TokenKv { k: vec![k], v: vec![v] };
        exact.append_token(&tok)?;
        padded.append_token(&tok)?;
    }
    println!("committed rows: {valid}; exact capacity: {}; padded capacity: {}", exact.capacity(), padded.capacity());

    let q: Vec<f32> = (0..d)
        .map(|e| bmc_kv::det::uniform_f32(5, 0, e as u64, -1.0, 1.0))
        .collect();
    let query = AttentionQuery::new(q.clone(), 1, 1, d)?;

    let mask_exact = build_bias_mask(valid, exact.capacity())?;
    let mask_padded = build_bias_mask(valid, padded.capacity())?;
    println!("padding bias over {} columns: first {valid} are 0, rest -1e9", padded.capacity());

    let mut l_exact = CostLedger::default();
    let mut l_padded = CostLedger::default();
    let out_exact = sdpa(&query, &exact, 0, &mask_exact, None, &mut l_exact)?;
    let out_padded = sdpa(&query, &padded, 0, &mask_padded, None, &mut l_padded)?;
    let oracle = exact_reference_attention(&q, &flat_k, &flat_v, d);

    let max_diff = out_padded
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("\npadded output vs exact-prefix oracle: max abs diff = {max_diff:.2e}");
    println!("padded output vs exact-fit output: bitwise equal = {}", out_exact == out_padded);

    let probs = sdpa_probs(&query, &padded, 0, &mask_padded, None)?;
    let padded_mass: f32 = probs[valid..].iter().sum();
    println!("probability mass on the {} padded positions: {padded_mass:.1e}", capacity - valid);

    println!(
        "\nMACs charged: exact-fit {} vs padded {} (padding costs compute, never accuracy)",
        l_exact.sdpa_macs, l_padded.sdpa_macs
    );
    Ok(())
}
