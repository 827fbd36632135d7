//! Microbenchmarks measuring the two rates the analytical model needs:
//! achieved copy bandwidth and achieved attention-style MAC throughput.

use std::time::Instant;

use crate::cost::CostParams;
use crate::error::{Error, Result};

/// Measured rates and the derived copy/compute constant (reported for
/// 2-byte elements, the convention the reference constant 0.1 uses).
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    /// Achieved large-buffer copy bandwidth, bytes/s.
    pub copy_bw: f64,
    /// Achieved multiply-accumulate throughput, MAC/s.
    pub mac_rate: f64,
    /// Derived constant `C'` such that the optimal allocation count is
    /// `sqrt(C' * N)`.
    pub c_prime: f64,
}

const COPY_BUF_ELEMS: usize = 8 << 20; // 32 MiB of f32 per pass

fn measure_copy_bw(budget_s: f64) -> Result<f64> {
    let src = vec![1.0f32; COPY_BUF_ELEMS];
    let mut dst = vec![0.0f32; COPY_BUF_ELEMS];
    // Warm both buffers.
    dst.copy_from_slice(&src);
    let mut bytes = 0u64;
    let start = Instant::now();
    loop {
        dst.copy_from_slice(&src);
        bytes += (COPY_BUF_ELEMS * 4) as u64;
        if start.elapsed().as_secs_f64() >= budget_s {
            break;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    std::hint::black_box(&dst);
    if elapsed < 1e-6 {
        return Err(Error::Calibration(
            "timer resolution too coarse for the copy benchmark".into(),
        ));
    }
    Ok(bytes as f64 / elapsed)
}

fn measure_mac_rate(budget_s: f64) -> Result<f64> {
    // Dot-product shape matching the attention inner loops.
    const ROWS: usize = 64;
    const COLS: usize = 512;
    const D: usize = 64;
    let a = vec![0.5f32; ROWS * D];
    let bmat = vec![0.25f32; COLS * D];
    let mut out = vec![0.0f32; ROWS * COLS];
    let mut macs = 0u64;
    let start = Instant::now();
    loop {
        for r in 0..ROWS {
            let ar = &a[r * D..(r + 1) * D];
            for c in 0..COLS {
                let br = &bmat[c * D..(c + 1) * D];
                let dot: f32 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                out[r * COLS + c] = dot;
            }
        }
        macs += (ROWS * COLS * D) as u64;
        std::hint::black_box(&out);
        if start.elapsed().as_secs_f64() >= budget_s {
            break;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed < 1e-6 {
        return Err(Error::Calibration(
            "timer resolution too coarse for the matmul benchmark".into(),
        ));
    }
    Ok(macs as f64 / elapsed)
}

/// Runs both microbenchmarks, splitting the time budget between them.
pub fn run_calibration(duration_s: f64) -> Result<Calibration> {
    if !(duration_s > 0.0) {
        return Err(Error::Calibration("duration must be positive".into()));
    }
    let copy_bw = measure_copy_bw(duration_s / 2.0)?;
    let mac_rate = measure_mac_rate(duration_s / 2.0)?;
    let mut params = CostParams::new(1);
    let c_prime = params.calibrate(copy_bw, mac_rate)?;
    Ok(Calibration {
        copy_bw,
        mac_rate,
        c_prime,
    })
}
