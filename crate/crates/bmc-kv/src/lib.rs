//! Chunked KV-cache allocation for transformer decoding.
//!
//! Growing the decode-time K/V cache one row per token means reallocating
//! and copying the whole cache every iteration; allocating the full context
//! window upfront avoids the copies but drags zero padding through every
//! attention matmul. This crate implements the middle ground: reallocate
//! once every `r` tokens with up to `r` zero-padded rows, keep attention
//! numerically exact with an additive bias mask over the padding, pick `r`
//! analytically (the optimal allocation count grows as the square root of
//! the context length), and reuse the padded rows to verify speculative
//! candidate tokens for free.
//!
//! Everything is exact-counting first: the [`ledger::CostLedger`] tracks
//! every element copied, written, and multiplied, so the analytical model is
//! checked against real traces rather than wall clocks.
//!
//! ## Examples
//!
//! One runnable example per capability:
//!
//! ```bash
//! cargo run --release --example policy_ledgers       # allocation policies and exact copy counts
//! cargo run --release --example masked_attention     # padded attention vs the exact oracle
//! cargo run --release --example optimal_allocations  # the analytical time model and sqrt(N) law
//! cargo run --release --example speculative_reuse    # candidate trees in the padded rows
//! cargo run --release --example decode_parity        # end-to-end decode, identical tokens everywhere
//! cargo run --release --example calibrate_and_advise # measure rates, derive C', pick r
//! ```
//!
//! ## CLI
//!
//! The `bmc-bench` binary wraps the same machinery:
//!
//! ```bash
//! cargo run --release --bin bmc-bench -- calibrate
//! cargo run --release --bin bmc-bench -- advise --n 512 --cprime 0.1
//! cargo run --release --bin bmc-bench -- sweep --policy iterative,upfront,bmc \
//!     --allocs auto --seq-len 256 --steps 128 --format csv --out sweep.csv
//! ```

// Positivity guards are written `!(x > 0.0)` so NaN parameters are rejected
// along with non-positive ones.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod cache;
pub mod cost;
pub mod det;
pub mod dims;
pub mod error;
pub mod ledger;
pub mod sim;
pub mod spec_decode;
pub mod sweep;

pub use attention::{
    build_bias_mask, sdpa, sdpa_flops_closed_form, sdpa_probs, AttentionQuery, BiasMask,
    MASK_VALUE,
};
pub use cache::{copy_total_closed_form, AllocationPolicy, KvCache, TokenKv};
pub use cost::{
    chunk_copy_time, chunk_sum_total, chunk_time, optimal_allocs, optimal_allocs_sd,
    round_pow2_clamped, sdpa_step_time, total_time, total_time_sd, CostParams, OptimalAllocs,
};
pub use dims::ModelDims;
pub use error::{Error, Result};
pub use ledger::CostLedger;
pub use sim::{
    exact_reference_attention, generate, generate_speculative, DecodeReport, IterationRecord,
    SpeculationMode, ToyModel,
};
pub use spec_decode::{
    admit_candidates, place_candidates, tree_mask, verify_and_commit, AcceptanceResult,
    SpeculationTree,
};
pub use sweep::{advise, advise_sd, run_sweep, Advice, SweepPoint, SweepReport, SweepSpec};
