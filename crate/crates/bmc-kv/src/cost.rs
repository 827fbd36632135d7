//! Analytical time model for the decode loop and the optimal allocation count.
//!
//! A full decode of `N` tokens under chunked allocation with `T = N / r`
//! allocation points costs, for constants folded into a copy rate and a
//! compute rate,
//!
//! ```text
//! total(T) = 2*C1*N*T/a + 2*C1*N/a + T*c0 + C1*N^2/b + C1*N^2/(b*T)
//! ```
//!
//! where `a` is the normalized K/V-pair copy rate, `b` the attention compute
//! rate, and `C1 = B*L*D`. Copy time falls with fewer allocations while the
//! padded-row compute term grows, so with `c0 = 0` the minimizer is
//! `T* = sqrt(N * a / (2 * b)) = sqrt(C' * N)` with `C' = a / (2 * b)`.

use serde::{Deserialize, Serialize};

use crate::dims::ModelDims;
use crate::error::{Error, Result};

/// Constants of the analytical model.
///
/// Rates are "effective": achieved bandwidth and achieved MAC throughput, not
/// peaks. `copy_bw` is in bytes/s; `elem_bytes`, `groups`, and `quant_factor`
/// normalize it to an element rate for the K/V pair (grouped-query heads and
/// quantized storage shrink the copied volume, leaving compute unchanged).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostParams {
    /// Element scale `B * L * D`.
    pub c1: f64,
    /// Effective copy bandwidth in bytes/s.
    pub copy_bw: f64,
    /// Effective attention compute rate in MAC/s (vector-mode decode).
    pub mac_rate: f64,
    /// Fixed seconds per allocation event. Zero by default; when positive the
    /// closed-form optimum no longer applies and solvers fall back to an
    /// exhaustive integer sweep.
    pub alloc_overhead_s: f64,
    /// Bytes per stored element.
    pub elem_bytes: f64,
    /// Maximum context length `N`.
    pub max_context: u64,
    /// Speculative candidates verified per iteration.
    pub candidates: u64,
    /// Mean accepted tokens per speculative iteration.
    pub mean_accepted: f64,
    /// Effective compute rate in MAC/s for batched (matrix-mode) verification.
    pub gemm_mac_rate: f64,
    /// Query-head groups sharing one KV head.
    pub groups: f64,
    /// Storage quantization factor (1 = unquantized).
    pub quant_factor: f64,
}

impl CostParams {
    /// Unit-rate parameters: `elem_bytes = 2` so the normalized pair copy
    /// rate equals `copy_bw`.
    pub fn new(max_context: u64) -> Self {
        CostParams {
            c1: 1.0,
            copy_bw: 1.0,
            mac_rate: 1.0,
            alloc_overhead_s: 0.0,
            elem_bytes: 2.0,
            max_context,
            candidates: 1,
            mean_accepted: 1.0,
            gemm_mac_rate: 1.0,
            groups: 1.0,
            quant_factor: 1.0,
        }
    }

    /// Parameters whose copy/compute ratio is exactly `c_prime`, with unit
    /// compute rate. Absolute times are arbitrary; the curve shape and the
    /// optimum are what matter.
    pub fn from_c_prime(max_context: u64, c_prime: f64) -> Self {
        let mut p = Self::new(max_context);
        p.copy_bw = c_prime * p.elem_bytes;
        p
    }

    pub fn for_dims(dims: &ModelDims) -> Self {
        let mut p = Self::new(dims.max_context as u64);
        p.c1 = (dims.batch * dims.layers * dims.hidden) as f64;
        p.groups = dims.groups as f64;
        p
    }

    /// Normalized copy rate for the K/V pair, in elements/s:
    /// `2 * copy_bw * groups * quant / elem_bytes`. With 2-byte elements and
    /// no grouping this equals `copy_bw`.
    pub fn pair_copy_rate(&self) -> f64 {
        2.0 * self.copy_bw * self.groups * self.quant_factor / self.elem_bytes
    }

    /// The copy/compute constant `C' = pair_copy_rate / (2 * mac_rate)`, so
    /// that the continuous optimum is `sqrt(C' * N)`.
    pub fn c_prime(&self) -> f64 {
        self.pair_copy_rate() / (2.0 * self.mac_rate)
    }

    /// Installs measured copy bandwidth (bytes/s) and MAC throughput (MAC/s)
    /// and returns the derived constant `C'`.
    pub fn calibrate(&mut self, measured_copy_bw: f64, measured_mac_rate: f64) -> Result<f64> {
        if !(measured_copy_bw > 0.0) || !(measured_mac_rate > 0.0) {
            return Err(Error::Calibration(format!(
                "measurements must be positive (copy {measured_copy_bw} B/s, compute {measured_mac_rate} MAC/s)"
            )));
        }
        self.copy_bw = measured_copy_bw;
        self.mac_rate = measured_mac_rate;
        Ok(self.c_prime())
    }
}

/// Seconds to copy the cache at the `i`-th allocation point of chunk size
/// `chunk`: the new buffers hold `(i + 1) * chunk` rows and both tensors
/// move, shrunk by grouping and quantization.
pub fn chunk_copy_time(i: u64, chunk: u64, p: &CostParams) -> f64 {
    let rows = ((i + 1) * chunk) as f64;
    2.0 * p.elem_bytes * p.c1 * rows / (p.copy_bw * p.groups * p.quant_factor)
}

/// Seconds for one attention step over a buffer of `(i + 1) * chunk` rows:
/// two matmuls, `2 * C1 * rows` MACs.
pub fn sdpa_step_time(i: u64, chunk: u64, p: &CostParams) -> f64 {
    let rows = ((i + 1) * chunk) as f64;
    2.0 * p.c1 * rows / p.mac_rate
}

/// Seconds for the `chunk` iterations served by allocation point `i`: one
/// copy, one allocation constant, and `chunk` attention steps at fixed
/// buffer size.
pub fn chunk_time(i: u64, chunk: u64, p: &CostParams) -> f64 {
    chunk_copy_time(i, chunk, p) + p.alloc_overhead_s + chunk as f64 * sdpa_step_time(i, chunk, p)
}

/// Closed-form decode time for `max_context` tokens with `t_allocs`
/// allocation points. Valid for any integer `t_allocs >= 1`; equals the
/// explicit sum of [`chunk_time`] whenever `t_allocs` divides `max_context`.
pub fn total_time(t_allocs: u64, p: &CostParams) -> f64 {
    let t = t_allocs as f64;
    let n = p.max_context as f64;
    let a = p.pair_copy_rate();
    2.0 * p.c1 * n * t / a
        + 2.0 * p.c1 * n / a
        + t * p.alloc_overhead_s
        + p.c1 * n * n / p.mac_rate
        + p.c1 * n * n / (p.mac_rate * t)
}

/// Explicit per-chunk sum of the decode time. Cross-check route for
/// [`total_time`]; requires `t_allocs | max_context`.
pub fn chunk_sum_total(t_allocs: u64, p: &CostParams) -> Result<f64> {
    if t_allocs == 0 || !p.max_context.is_multiple_of(t_allocs) {
        return Err(Error::RaggedChunk {
            chunk: t_allocs as usize,
            max_context: p.max_context as usize,
        });
    }
    let chunk = p.max_context / t_allocs;
    Ok((0..t_allocs).map(|i| chunk_time(i, chunk, p)).sum())
}

/// Decode time with speculative verification: copies are unchanged, but only
/// `N / m` verification iterations run, each scoring `candidates` query rows
/// in matrix mode.
pub fn total_time_sd(t_allocs: u64, p: &CostParams) -> f64 {
    let t = t_allocs as f64;
    let n = p.max_context as f64;
    let a = p.pair_copy_rate();
    2.0 * p.c1 * n * (t + 1.0) / a
        + t * p.alloc_overhead_s
        + p.c1 * p.candidates as f64 * (n * n / p.mean_accepted) * (1.0 + 1.0 / t)
            / p.gemm_mac_rate
}

/// Continuous minimizer and its power-of-two rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalAllocs {
    pub continuous: f64,
    pub rounded: u64,
}

/// Rounds to the nearest power of two in log space (ties round up), clamped
/// to `[1, n]`.
pub fn round_pow2_clamped(x: f64, n: u64) -> u64 {
    if !(x > 1.0) {
        return 1;
    }
    let f = x.log2();
    let lo = f.floor();
    let exp = if f - lo >= 0.5 { lo + 1.0 } else { lo };
    let pow = 1u64 << (exp as u32).min(63);
    pow.clamp(1, n.max(1))
}

fn exhaustive_argmin(f: impl Fn(u64) -> f64, n: u64) -> u64 {
    let mut best_t = 1;
    let mut best = f(1);
    for t in 2..=n {
        let v = f(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    best_t
}

/// Optimal allocation count for plain decoding. With no per-allocation
/// constant the continuous optimum is `sqrt(N * pair_copy_rate / (2 *
/// mac_rate))`; otherwise an exhaustive integer sweep of [`total_time`] is
/// used and `continuous` reports the integer argmin.
pub fn optimal_allocs(p: &CostParams) -> OptimalAllocs {
    let continuous = if p.alloc_overhead_s == 0.0 {
        (p.max_context as f64 * p.pair_copy_rate() / (2.0 * p.mac_rate)).sqrt()
    } else {
        exhaustive_argmin(|t| total_time(t, p), p.max_context) as f64
    };
    OptimalAllocs {
        continuous,
        rounded: round_pow2_clamped(continuous, p.max_context),
    }
}

/// Optimal allocation count under speculative decoding:
/// `sqrt(N * candidates * pair_copy_rate / (2 * mean_accepted * gemm_mac_rate))`.
pub fn optimal_allocs_sd(p: &CostParams) -> OptimalAllocs {
    let continuous = if p.alloc_overhead_s == 0.0 {
        (p.max_context as f64 * p.candidates as f64 * p.pair_copy_rate()
            / (2.0 * p.mean_accepted * p.gemm_mac_rate))
            .sqrt()
    } else {
        exhaustive_argmin(|t| total_time_sd(t, p), p.max_context) as f64
    };
    OptimalAllocs {
        continuous,
        rounded: round_pow2_clamped(continuous, p.max_context),
    }
}
