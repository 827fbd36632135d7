//! Model dimensions shared by the cache, attention, and simulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor dimensions of the decoded model.
///
/// `hidden` is always `heads * head_dim`. With `groups > 1` the key/value
/// tensors carry `heads / groups` heads (grouped-query attention); `groups = 1`
/// is plain multi-head attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub batch: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub max_context: usize,
    pub groups: usize,
}

impl ModelDims {
    pub fn new(
        batch: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        max_context: usize,
    ) -> Result<Self> {
        Self::with_groups(batch, layers, heads, head_dim, max_context, 1)
    }

    pub fn with_groups(
        batch: usize,
        layers: usize,
        heads: usize,
        head_dim: usize,
        max_context: usize,
        groups: usize,
    ) -> Result<Self> {
        if batch == 0 || layers == 0 || heads == 0 || head_dim == 0 || max_context == 0 {
            return Err(Error::InvalidConfig(
                "batch, layers, heads, head_dim, and max_context must be positive".into(),
            ));
        }
        if groups == 0 || groups > heads || !heads.is_multiple_of(groups) {
            return Err(Error::InvalidConfig(format!(
                "groups ({groups}) must satisfy 1 <= groups <= heads ({heads}) and divide heads"
            )));
        }
        Ok(Self {
            batch,
            layers,
            heads,
            head_dim,
            hidden: heads * head_dim,
            max_context,
            groups,
        })
    }

    /// Key/value heads per layer: `heads / groups`.
    pub fn kv_heads(&self) -> usize {
        self.heads / self.groups
    }

    /// Elements in one token row of one K or V tensor: `batch * kv_heads * head_dim`.
    pub fn token_row_elems(&self) -> usize {
        self.batch * self.kv_heads() * self.head_dim
    }

    /// Hidden width of the key/value projection: `kv_heads * head_dim`.
    pub fn kv_hidden(&self) -> usize {
        self.kv_heads() * self.head_dim
    }
}
