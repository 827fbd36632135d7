//! Sweep the analytical decode-time model over the allocation count and
//! locate the optimum.
//!
//! With a measured copy/compute constant C', the model predicts the total
//! decode time as a function of the number of allocations T. Few allocations
//! waste compute on padding; many allocations waste bandwidth on copies. The
//! minimum sits at sqrt(C' * N) and therefore doubles when the context
//! quadruples.
//!
//! ```bash
//! cargo run --example optimal_allocations
//! ```

use bmc_kv::sweep::advise;
use bmc_kv::{optimal_allocs, total_time, CostParams};

fn main() -> bmc_kv::Result<()> {
    let n = 512u64;
    let c_prime = 0.1;
    let params = CostParams::from_c_prime(n, c_prime);

    println!("N = {n}, C' = {c_prime}\n");
    println!("{:>6} {:>14} {:>10}", "T", "model time", "vs best");
    let mut best = f64::MAX;
    let mut t = 1u64;
    let mut rows = Vec::new();
    while t <= n {
        let time = total_time(t, &params);
        best = best.min(time);
        rows.push((t, time));
        t *= 2;
    }
    for (t, time) in rows {
        println!("{:>6} {:>14.1} {:>9.2}x", t, time, time / best);
    }

    let opt = optimal_allocs(&params);
    println!(
        "\ncontinuous optimum T* = {:.2}, power-of-two rounding -> T = {}",
        opt.continuous, opt.rounded
    );

    let advice = advise(n, c_prime)?;
    println!("advice: {advice}");

    println!("\nsquare-root scaling:");
    for n in [128u64, 512, 2048, 8192] {
        let a = advise(n, c_prime)?;
        println!(
            "  N = {:>5}: T* = {:>6.2}  -> T = {:>3}, r = {:>4}",
            n, a.continuous, a.rounded, a.chunk
        );
    }
    println!("quadrupling N doubles the optimal allocation count.");
    Ok(())
}
