//! Masked scaled-dot-product attention over padded K/V buffers.
//!
//! Padded rows stay in the matmul; a reusable additive bias of `0` for
//! committed columns and `-1e9` for padded columns makes their softmax
//! contribution underflow to zero after row-max subtraction. The bias is a
//! single `[capacity]` vector broadcast over every batch row, head, and
//! layer; causal or tree structure rides in a separate per-query mask.

use crate::cache::{AllocationPolicy, KvCache};
use crate::dims::ModelDims;
use crate::error::{Error, Result};
use crate::ledger::CostLedger;

/// Additive mask value for positions that must not attend.
pub const MASK_VALUE: f32 = -1e9;

/// Reusable padding mask: `values[j] = 0` for `j < valid_len`, `-1e9` for
/// `j >= valid_len`. Independent of layer, batch row, and head.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMask {
    values: Vec<f32>,
    valid_len: usize,
}

impl BiasMask {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn capacity(&self) -> usize {
        self.values.len()
    }
}

/// Builds the padding bias for `capacity` columns of which the first
/// `valid_len` are attendable.
pub fn build_bias_mask(valid_len: usize, capacity: usize) -> Result<BiasMask> {
    if valid_len > capacity {
        return Err(Error::MaskBounds {
            valid_len,
            capacity,
        });
    }
    let mut values = vec![MASK_VALUE; capacity];
    values[..valid_len].fill(0.0);
    Ok(BiasMask { values, valid_len })
}

/// Query block of shape `[batch * heads, t, head_dim]`, row-major. `t = 1`
/// for auto-regressive decoding, `t = k` when verifying k speculative
/// candidates in one pass.
#[derive(Debug, Clone)]
pub struct AttentionQuery {
    data: Vec<f32>,
    rows: usize,
    t: usize,
    head_dim: usize,
    scale: f32,
}

impl AttentionQuery {
    /// Scale defaults to `1 / sqrt(head_dim)`.
    pub fn new(data: Vec<f32>, rows: usize, t: usize, head_dim: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidConfig("query needs t >= 1".into()));
        }
        if data.len() != rows * t * head_dim {
            return Err(Error::DimensionMismatch {
                context: "attention query",
                expected: rows * t * head_dim,
                got: data.len(),
            });
        }
        Ok(AttentionQuery {
            data,
            rows,
            t,
            head_dim,
            scale: 1.0 / (head_dim as f32).sqrt(),
        })
    }

    pub fn with_scale(mut self, scale: f32) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidConfig("query scale must be positive".into()));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }
}

fn check_shapes(query: &AttentionQuery, cache: &KvCache, layer: usize, mask: &BiasMask) -> Result<()> {
    let dims = cache.dims();
    if layer >= dims.layers {
        return Err(Error::DimensionMismatch {
            context: "layer index",
            expected: dims.layers,
            got: layer,
        });
    }
    if query.head_dim != dims.head_dim {
        return Err(Error::DimensionMismatch {
            context: "query head_dim",
            expected: dims.head_dim,
            got: query.head_dim,
        });
    }
    if query.rows != dims.batch * dims.heads {
        return Err(Error::DimensionMismatch {
            context: "query rows",
            expected: dims.batch * dims.heads,
            got: query.rows,
        });
    }
    if mask.capacity() != cache.capacity() {
        return Err(Error::DimensionMismatch {
            context: "bias mask",
            expected: cache.capacity(),
            got: mask.capacity(),
        });
    }
    Ok(())
}

/// Core loop shared by [`sdpa`] and [`sdpa_probs`]. Scores every allocated
/// column, applies bias and optional per-query extra mask after scaling, and
/// runs a max-subtracted softmax. Reduction order is fixed: sequential over
/// head_dim for scores and sequential over columns for the sums, so results
/// are bitwise reproducible and independent of how much zero padding follows
/// the committed rows. NaN inputs propagate to the output.
fn attend(
    query: &AttentionQuery,
    cache: &KvCache,
    layer: usize,
    mask: &BiasMask,
    extra_mask: Option<&[f32]>,
    mut out: Option<&mut [f32]>,
    mut probs_out: Option<&mut [f32]>,
) -> Result<()> {
    check_shapes(query, cache, layer, mask)?;
    let dims = *cache.dims();
    let capacity = cache.capacity();
    let d = dims.head_dim;
    let t = query.t;
    if let Some(extra) = extra_mask {
        if extra.len() != t * capacity {
            return Err(Error::DimensionMismatch {
                context: "extra mask",
                expected: t * capacity,
                got: extra.len(),
            });
        }
    }
    let k_buf = cache.layer_k(layer);
    let v_buf = cache.layer_v(layer);
    let heads_per_kv = dims.groups;
    let mut scores = vec![0.0f32; capacity];

    for bh in 0..query.rows {
        let batch = bh / dims.heads;
        let head = bh % dims.heads;
        let kv_bh = batch * dims.kv_heads() + head / heads_per_kv;
        for ti in 0..t {
            let q_row = &query.data[(bh * t + ti) * d..(bh * t + ti + 1) * d];
            for (j, slot) in scores.iter_mut().enumerate() {
                let k_row = &k_buf[(kv_bh * capacity + j) * d..(kv_bh * capacity + j + 1) * d];
                let dot: f32 = q_row.iter().zip(k_row).map(|(a, b)| a * b).sum();
                let extra = extra_mask.map_or(0.0, |m| m[ti * capacity + j]);
                *slot = dot * query.scale + mask.values[j] + extra;
            }
            let mut max = f32::NEG_INFINITY;
            for &s in &scores {
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for s in scores.iter_mut() {
                *s /= denom;
            }
            if let Some(p) = probs_out.as_deref_mut() {
                p[(bh * t + ti) * capacity..(bh * t + ti + 1) * capacity]
                    .copy_from_slice(&scores);
            }
            if let Some(o) = out.as_deref_mut() {
                let o_row = &mut o[(bh * t + ti) * d..(bh * t + ti + 1) * d];
                o_row.fill(0.0);
                for (j, &p) in scores.iter().enumerate() {
                    let v_row = &v_buf[(kv_bh * capacity + j) * d..(kv_bh * capacity + j + 1) * d];
                    for (oe, &ve) in o_row.iter_mut().zip(v_row) {
                        *oe += p * ve;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Masked attention over the full allocated buffer of one layer, padded rows
/// included. Returns `[batch * heads, t, head_dim]` and charges
/// `2 * batch * heads * t * capacity * head_dim` multiply-accumulates to the
/// ledger (score and value matmuls).
pub fn sdpa(
    query: &AttentionQuery,
    cache: &KvCache,
    layer: usize,
    mask: &BiasMask,
    extra_mask: Option<&[f32]>,
    ledger: &mut CostLedger,
) -> Result<Vec<f32>> {
    let mut out = vec![0.0f32; query.rows * query.t * cache.dims().head_dim];
    attend(query, cache, layer, mask, extra_mask, Some(&mut out), None)?;
    ledger.sdpa_macs +=
        2 * (query.rows * query.t * cache.capacity() * cache.dims().head_dim) as u64;
    Ok(out)
}

/// Post-softmax attention probabilities `[batch * heads, t, capacity]`.
/// Diagnostic path for checking how much mass lands on padded rows; does not
/// touch any ledger.
pub fn sdpa_probs(
    query: &AttentionQuery,
    cache: &KvCache,
    layer: usize,
    mask: &BiasMask,
    extra_mask: Option<&[f32]>,
) -> Result<Vec<f32>> {
    let mut probs = vec![0.0f32; query.rows * query.t * cache.capacity()];
    attend(query, cache, layer, mask, extra_mask, None, Some(&mut probs))?;
    Ok(probs)
}

/// Multiply-accumulate total for the attention matmuls of a full
/// `max_context`-token decode from an empty cache, `t` query rows per
/// iteration.
///
/// Iterative: `t*L*B*N*(N+1)*D`. Upfront: `t*2*L*B*N^2*D`.
/// Bmc: `t*L*B*N*(N+chunk)*D`, requiring `chunk | N`.
pub fn sdpa_flops_closed_form(
    policy: &AllocationPolicy,
    dims: &ModelDims,
    t: usize,
) -> Result<u64> {
    policy.validate(dims.max_context)?;
    let n = dims.max_context as u64;
    let scale = (t * dims.layers * dims.batch) as u64 * dims.hidden as u64;
    match policy {
        AllocationPolicy::Iterative => Ok(scale * n * (n + 1)),
        AllocationPolicy::Upfront => Ok(2 * scale * n * n),
        AllocationPolicy::Bmc { chunk } => {
            if !dims.max_context.is_multiple_of(*chunk) {
                return Err(Error::RaggedChunk {
                    chunk: *chunk,
                    max_context: dims.max_context,
                });
            }
            Ok(scale * n * (n + *chunk as u64))
        }
    }
}
