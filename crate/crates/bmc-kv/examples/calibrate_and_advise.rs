//! Measure this machine's copy bandwidth and MAC throughput, derive the
//! copy/compute constant C', and turn it into a chunk-size recommendation.
//!
//! ```bash
//! cargo run --release --example calibrate_and_advise
//! ```

use bmc_kv::bench::run_calibration;
use bmc_kv::sweep::{advise, advise_sd};

fn main() -> bmc_kv::Result<()> {
    println!("calibrating (about one second)...");
    let cal = run_calibration(1.0)?;
    println!("  copy bandwidth: {:.3e} bytes/s", cal.copy_bw);
    println!("  MAC throughput: {:.3e} MAC/s", cal.mac_rate);
    println!("  C' = {:.4}\n", cal.c_prime);

    for n in [512u64, 2048, 8192] {
        let a = advise(n, cal.c_prime)?;
        println!(
            "N = {:>5}: T* = {:>7.2} -> allocate {} times, chunk r = {}",
            n, a.continuous, a.rounded, a.chunk
        );
    }

    let sd = advise_sd(2048, cal.c_prime, 26, 4.0, 1.0)?;
    println!(
        "\nwith speculation (26 candidates, 4 accepted on average): T = {}, r = {}",
        sd.rounded, sd.chunk
    );
    println!("(the reference desk constant is C' ~ 0.1, advising T=8 at N=512)");
    Ok(())
}
