//! Growable per-layer K/V buffers under three allocation policies.
//!
//! `Iterative` reallocates an exact-fit buffer every appended token,
//! `Upfront` allocates the full context window once and pads unused rows
//! with zeros, and `Bmc` reallocates once every `chunk` tokens so that at
//! most `chunk - 1` padded rows are ever carried. Every element moved,
//! written, or multiplied is counted in a [`CostLedger`].

use serde::{Deserialize, Serialize};

use crate::dims::ModelDims;
use crate::error::{Error, Result};
use crate::ledger::CostLedger;

/// How K/V buffer capacity tracks the committed token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationPolicy {
    /// Exact-fit reallocation on every append.
    Iterative,
    /// One allocation at the maximum context length.
    Upfront,
    /// Reallocation every `chunk` tokens, with up to `chunk` padded rows.
    /// `chunk = max_context` behaves like `Upfront`; `chunk = 1` matches
    /// `Iterative`'s allocation cadence.
    Bmc { chunk: usize },
}

impl AllocationPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AllocationPolicy::Iterative => "iterative",
            AllocationPolicy::Upfront => "upfront",
            AllocationPolicy::Bmc { .. } => "bmc",
        }
    }

    pub fn chunk(&self) -> Option<usize> {
        match self {
            AllocationPolicy::Bmc { chunk } => Some(*chunk),
            _ => None,
        }
    }

    pub fn validate(&self, max_context: usize) -> Result<()> {
        if let AllocationPolicy::Bmc { chunk } = self {
            if *chunk == 0 || *chunk > max_context {
                return Err(Error::InvalidConfig(format!(
                    "bmc chunk ({chunk}) must satisfy 1 <= chunk <= max_context ({max_context})"
                )));
            }
        }
        Ok(())
    }
}

struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Per-layer K/V buffers of shape `[batch * kv_heads, capacity, head_dim]`,
/// row-major, with `valid_len` committed token rows. Rows at positions
/// `>= valid_len` are zero except those temporarily staged for speculative
/// verification.
///
/// Single writer: appends, staging, and reallocation must be externally
/// serialized. Read-only views of the committed prefix may be shared
/// between mutations.
pub struct KvCache {
    dims: ModelDims,
    policy: AllocationPolicy,
    layers: Vec<LayerKv>,
    valid_len: usize,
    staged: usize,
    capacity: usize,
    element_size: usize,
    ledger: CostLedger,
}

fn bmc_capacity(valid_len: usize, chunk: usize, max_context: usize) -> usize {
    let rows = valid_len.max(1);
    (chunk * rows.div_ceil(chunk)).min(max_context)
}

impl KvCache {
    /// Creates a cache with `prompt_len` committed rows and capacity set by
    /// the policy (Bmc: the next multiple of `chunk` covering the prompt,
    /// minimum one chunk). Prompt row contents start zeroed; fill them with
    /// [`KvCache::write_prompt_row`] before decoding.
    pub fn new(dims: ModelDims, policy: AllocationPolicy, prompt_len: usize) -> Result<Self> {
        policy.validate(dims.max_context)?;
        if prompt_len > dims.max_context {
            return Err(Error::CapacityExceeded {
                requested: prompt_len,
                limit: dims.max_context,
            });
        }
        let capacity = match policy {
            AllocationPolicy::Iterative => prompt_len,
            AllocationPolicy::Upfront => dims.max_context,
            AllocationPolicy::Bmc { chunk } => bmc_capacity(prompt_len, chunk, dims.max_context),
        };
        let mut cache = KvCache {
            dims,
            policy,
            layers: Vec::new(),
            valid_len: prompt_len,
            staged: 0,
            capacity: 0,
            element_size: 4,
            ledger: CostLedger::default(),
        };
        let buf_len = dims.batch * dims.kv_heads() * capacity * dims.head_dim;
        for _ in 0..dims.layers {
            cache.layers.push(LayerKv {
                k: vec![0.0; buf_len],
                v: vec![0.0; buf_len],
            });
        }
        cache.capacity = capacity;
        cache.record_allocation(capacity);
        Ok(cache)
    }

    /// Bytes per stored element, used only for `alloc_bytes` accounting.
    /// Defaults to 4 (the f32 buffers used here); set 2 to model
    /// half-precision byte volumes.
    pub fn set_element_size(&mut self, bytes: usize) {
        self.element_size = bytes;
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn policy(&self) -> AllocationPolicy {
        self.policy
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Token rows currently staged for speculative verification.
    pub fn staged_len(&self) -> usize {
        self.staged
    }

    /// Rows above the committed prefix: `capacity - valid_len`.
    pub fn padded_rows(&self) -> usize {
        self.capacity - self.valid_len
    }

    /// Padded rows holding neither committed nor staged tokens. These are the
    /// rows whose attention compute is pure overhead.
    pub fn wasted_rows(&self) -> usize {
        self.capacity - self.valid_len - self.staged
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub(crate) fn set_ledger(&mut self, ledger: CostLedger) {
        self.ledger = ledger;
    }

    /// Full K buffer for one layer: `[batch * kv_heads, capacity, head_dim]`.
    pub fn layer_k(&self, layer: usize) -> &[f32] {
        &self.layers[layer].k
    }

    /// Full V buffer for one layer, same shape as [`KvCache::layer_k`].
    pub fn layer_v(&self, layer: usize) -> &[f32] {
        &self.layers[layer].v
    }

    /// One token row of K for a `(layer, batch * kv_head)` pair.
    pub fn k_row(&self, layer: usize, bh: usize, pos: usize) -> &[f32] {
        let d = self.dims.head_dim;
        let start = (bh * self.capacity + pos) * d;
        &self.layers[layer].k[start..start + d]
    }

    pub fn v_row(&self, layer: usize, bh: usize, pos: usize) -> &[f32] {
        let d = self.dims.head_dim;
        let start = (bh * self.capacity + pos) * d;
        &self.layers[layer].v[start..start + d]
    }

    /// True when every row above the committed-plus-staged region is zero.
    pub fn padding_is_zeroed(&self) -> bool {
        let d = self.dims.head_dim;
        let rows = self.dims.batch * self.dims.kv_heads();
        for layer in &self.layers {
            for bh in 0..rows {
                for pos in self.valid_len + self.staged..self.capacity {
                    let start = (bh * self.capacity + pos) * d;
                    if layer.k[start..start + d].iter().any(|&x| x != 0.0)
                        || layer.v[start..start + d].iter().any(|&x| x != 0.0)
                    {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn record_allocation(&mut self, capacity: usize) {
        if capacity == 0 {
            return;
        }
        let layers = self.dims.layers as u64;
        self.ledger.alloc_events += layers;
        self.ledger.alloc_bytes += 2
            * layers
            * (self.dims.token_row_elems() * capacity * self.element_size) as u64;
    }

    /// Reallocates every layer pair to `new_capacity`, copying the committed
    /// prefix and zeroing the rest.
    fn realloc(&mut self, new_capacity: usize) {
        debug_assert_eq!(self.staged, 0, "reallocation during speculation");
        let d = self.dims.head_dim;
        let rows = self.dims.batch * self.dims.kv_heads();
        let buf_len = rows * new_capacity * d;
        for layer in &mut self.layers {
            let mut k = vec![0.0; buf_len];
            let mut v = vec![0.0; buf_len];
            for bh in 0..rows {
                let copy = self.valid_len.min(new_capacity) * d;
                let src = bh * self.capacity * d;
                let dst = bh * new_capacity * d;
                k[dst..dst + copy].copy_from_slice(&layer.k[src..src + copy]);
                v[dst..dst + copy].copy_from_slice(&layer.v[src..src + copy]);
            }
            layer.k = k;
            layer.v = v;
        }
        self.ledger.realloc_copy_elems +=
            2 * (self.dims.layers * self.dims.token_row_elems() * self.valid_len) as u64;
        self.capacity = new_capacity;
        self.record_allocation(new_capacity);
    }

    /// Grows capacity if the policy requires it before the next token row.
    /// Returns whether a reallocation happened.
    pub(crate) fn ensure_capacity_for_next(&mut self) -> Result<bool> {
        if self.valid_len == self.dims.max_context {
            return Err(Error::CapacityExceeded {
                requested: self.valid_len + 1,
                limit: self.dims.max_context,
            });
        }
        match self.policy {
            AllocationPolicy::Iterative => {
                self.realloc(self.valid_len + 1);
                Ok(true)
            }
            AllocationPolicy::Upfront => Ok(false),
            AllocationPolicy::Bmc { chunk } => {
                if self.valid_len == self.capacity {
                    let target = (self.capacity + chunk).min(self.dims.max_context);
                    self.realloc(target);
                    Ok(true)
                } else {
                    Ok(false)
                }
            }
        }
    }

    /// Writes one layer's K/V row at staged offset `offset` (absolute
    /// position `valid_len + offset`) without committing it. Rows are
    /// `[batch * kv_heads, head_dim]` flattened.
    pub(crate) fn write_staged_row(
        &mut self,
        layer: usize,
        offset: usize,
        k_row: &[f32],
        v_row: &[f32],
    ) -> Result<()> {
        let expected = self.dims.token_row_elems();
        if k_row.len() != expected || v_row.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "token row",
                expected,
                got: k_row.len(),
            });
        }
        let pos = self.valid_len + offset;
        if pos >= self.capacity {
            return Err(Error::CapacityExceeded {
                requested: pos + 1,
                limit: self.capacity,
            });
        }
        let d = self.dims.head_dim;
        let rows = self.dims.batch * self.dims.kv_heads();
        let buf = &mut self.layers[layer];
        for bh in 0..rows {
            let dst = (bh * self.capacity + pos) * d;
            buf.k[dst..dst + d].copy_from_slice(&k_row[bh * d..(bh + 1) * d]);
            buf.v[dst..dst + d].copy_from_slice(&v_row[bh * d..(bh + 1) * d]);
        }
        self.ledger.append_write_elems += 2 * expected as u64;
        self.staged = self.staged.max(offset + 1);
        Ok(())
    }

    /// Fills a committed prompt row. Only meaningful between construction and
    /// the first append or staging operation.
    pub fn write_prompt_row(
        &mut self,
        layer: usize,
        pos: usize,
        k_row: &[f32],
        v_row: &[f32],
    ) -> Result<()> {
        if pos >= self.valid_len {
            return Err(Error::CapacityExceeded {
                requested: pos + 1,
                limit: self.valid_len,
            });
        }
        let expected = self.dims.token_row_elems();
        if k_row.len() != expected || v_row.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "prompt row",
                expected,
                got: k_row.len(),
            });
        }
        let d = self.dims.head_dim;
        let rows = self.dims.batch * self.dims.kv_heads();
        let buf = &mut self.layers[layer];
        for bh in 0..rows {
            let dst = (bh * self.capacity + pos) * d;
            buf.k[dst..dst + d].copy_from_slice(&k_row[bh * d..(bh + 1) * d]);
            buf.v[dst..dst + d].copy_from_slice(&v_row[bh * d..(bh + 1) * d]);
        }
        self.ledger.append_write_elems += 2 * expected as u64;
        Ok(())
    }

    /// Commits the first `count` staged rows. Remaining staged rows must have
    /// been compacted or zeroed by the caller.
    pub(crate) fn commit_staged(&mut self, count: usize) {
        debug_assert!(count <= self.staged);
        self.valid_len += count;
        self.staged = 0;
    }

    /// Copies a staged row to another staged offset across all layers.
    /// Does not touch the ledger; callers charge movement explicitly.
    pub(crate) fn move_staged_row(&mut self, from: usize, to: usize) {
        if from == to {
            return;
        }
        let d = self.dims.head_dim;
        let rows = self.dims.batch * self.dims.kv_heads();
        let (src_pos, dst_pos) = (self.valid_len + from, self.valid_len + to);
        for layer in &mut self.layers {
            for bh in 0..rows {
                let src = (bh * self.capacity + src_pos) * d;
                let dst = (bh * self.capacity + dst_pos) * d;
                layer.k.copy_within(src..src + d, dst);
                layer.v.copy_within(src..src + d, dst);
            }
        }
    }

    /// Zeroes staged rows at offsets `[from, staged)` and forgets them.
    pub(crate) fn zero_staged_tail(&mut self, from: usize) {
        let d = self.dims.head_dim;
        let rows = self.dims.batch * self.dims.kv_heads();
        for layer in &mut self.layers {
            for bh in 0..rows {
                for off in from..self.staged {
                    let start = (bh * self.capacity + self.valid_len + off) * d;
                    layer.k[start..start + d].fill(0.0);
                    layer.v[start..start + d].fill(0.0);
                }
            }
        }
        self.staged = from;
    }

    /// Drops all staged rows, restoring the zero-padding law.
    pub(crate) fn clear_staged(&mut self) {
        self.zero_staged_tail(0);
    }

    /// Appends one committed token row across all layers, reallocating per
    /// the policy. `rows.k[layer]` and `rows.v[layer]` are
    /// `[batch * kv_heads, head_dim]` flattened.
    pub fn append_token(&mut self, rows: &TokenKv) -> Result<()> {
        if self.staged > 0 {
            return Err(Error::SpecDecode(
                "append_token while speculative rows are staged".into(),
            ));
        }
        if rows.k.len() != self.dims.layers || rows.v.len() != self.dims.layers {
            return Err(Error::DimensionMismatch {
                context: "token layers",
                expected: self.dims.layers,
                got: rows.k.len(),
            });
        }
        self.ensure_capacity_for_next()?;
        for layer in 0..self.dims.layers {
            self.write_staged_row(layer, 0, &rows.k[layer], &rows.v[layer])?;
        }
        self.commit_staged(1);
        Ok(())
    }
}

/// One token's K/V rows for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenKv {
    pub k: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl TokenKv {
    pub fn zeroed(dims: &ModelDims) -> Self {
        let row = vec![0.0; dims.token_row_elems()];
        TokenKv {
            k: vec![row.clone(); dims.layers],
            v: vec![row; dims.layers],
        }
    }
}

/// Exact element movement (reallocation copies plus new-row writes, K and V)
/// for decoding `max_context` tokens from an empty cache.
///
/// Iterative: `B*L*N*(N+1)*D/G`. Upfront: `2*B*L*N*D/G` (writes only).
/// Bmc: `B*L*D*N*(T-1)/G` copies plus `2*B*L*N*D/G` writes with `T = N/chunk`.
/// Requires `chunk | N`; ragged tails are handled by the ledger, not here.
pub fn copy_total_closed_form(policy: &AllocationPolicy, dims: &ModelDims) -> Result<u64> {
    policy.validate(dims.max_context)?;
    let n = dims.max_context as u64;
    let l = dims.layers as u64;
    let per_row = dims.token_row_elems() as u64;
    match policy {
        AllocationPolicy::Iterative => Ok(l * n * (n + 1) * per_row),
        AllocationPolicy::Upfront => Ok(2 * l * n * per_row),
        AllocationPolicy::Bmc { chunk } => {
            if !dims.max_context.is_multiple_of(*chunk) {
                return Err(Error::RaggedChunk {
                    chunk: *chunk,
                    max_context: dims.max_context,
                });
            }
            let t = n / *chunk as u64;
            Ok(l * n * (t - 1) * per_row + 2 * l * n * per_row)
        }
    }
}
