//! End-to-end decode with a toy transformer: every policy and speculative
//! mode emits exactly the same tokens, at very different operation counts.
//!
//! ```bash
//! cargo run --release --example decode_parity
//! ```

use bmc_kv::{generate, generate_speculative, AllocationPolicy, ModelDims, SpeculationMode, ToyModel};

fn main() -> bmc_kv::Result<()> {
    let dims = ModelDims::new(1, 2, 4, 8, 128)?;
    let model = ToyModel::new(dims, 256, 42)?;
    let prompt = [17u32, 4, 99, 3];
    let steps = 96;

    println!("decoding {steps} tokens from a {}-token prompt (greedy)\n", prompt.len());
    println!(
        "{:<18} {:>6} {:>12} {:>12} {:>8} {:>6}",
        "run", "iters", "copy_elems", "sdpa_macs", "allocs", "match"
    );

    let base = generate(&model, AllocationPolicy::Iterative, &prompt, steps, 0)?;
    let show = |name: &str, rep: &bmc_kv::DecodeReport| {
        println!(
            "{:<18} {:>6} {:>12} {:>12} {:>8} {:>6}",
            name,
            rep.per_iteration.len(),
            rep.ledger.realloc_copy_elems,
            rep.ledger.sdpa_macs,
            rep.ledger.alloc_events,
            rep.tokens == base.tokens,
        );
    };
    show("iterative", &base);

    let rep = generate(&model, AllocationPolicy::Upfront, &prompt, steps, 0)?;
    show("upfront", &rep);

    for chunk in [8usize, 16, 32] {
        let rep = generate(&model, AllocationPolicy::Bmc { chunk }, &prompt, steps, 0)?;
        show(&format!("bmc r={chunk}"), &rep);
    }

    let rep = generate_speculative(
        &model,
        AllocationPolicy::Bmc { chunk: 16 },
        &prompt,
        steps,
        &SpeculationMode::SelfChain { depth: 4 },
        0,
    )?;
    show("bmc + self-spec", &rep);
    let mean_accept = rep.per_iteration.iter().map(|r| r.accepted).sum::<usize>() as f64
        / rep.per_iteration.len() as f64;

    let rep = generate_speculative(
        &model,
        AllocationPolicy::Bmc { chunk: 16 },
        &prompt,
        steps,
        &SpeculationMode::Scripted { depth: 4, accept_lens: vec![2, 1, 3] },
        0,
    )?;
    show("bmc + scripted", &rep);

    println!("\nfirst 12 tokens: {:?}", &base.tokens[0][..12]);
    println!("self-speculation accepted {mean_accept:.2} tokens per iteration on average.");
    println!("identical outputs, fewer iterations under speculation, and");
    println!("copy volume collapses once reallocation is amortized over chunks.");
    Ok(())
}
