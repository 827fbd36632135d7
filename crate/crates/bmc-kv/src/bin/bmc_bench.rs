//! Benchmark harness around the chunked KV-cache library: calibration
//! microbenchmarks, policy/allocation sweeps, and allocation advice.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bmc_kv::dims::ModelDims;
use bmc_kv::sweep::{
    advise, advise_sd, run_sweep, write_report, AllocChoice, OutputFormat, PolicyChoice,
    SpecChoice, SweepSpec,
};
use bmc_kv::{bench, Error};

#[derive(Parser)]
#[command(name = "bmc-bench", version, about = "KV-cache allocation benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure copy bandwidth and MAC throughput, print the derived C'.
    Calibrate {
        /// Total measurement budget in seconds.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Run decode simulations across policies and allocation counts.
    Sweep(SweepArgs),
    /// Print the recommended allocation count for a context length.
    Advise(AdviseArgs),
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated policy set: iterative, upfront, bmc.
    #[arg(long, value_delimiter = ',', default_value = "iterative,upfront,bmc")]
    policy: Vec<String>,
    /// Allocation counts for bmc points: "auto" (powers of two) or a
    /// comma-separated list; each count must divide the context length.
    #[arg(long, default_value = "auto", conflicts_with = "chunk")]
    allocs: String,
    /// Chunk size for a single bmc point; ragged tails allowed.
    #[arg(long)]
    chunk: Option<u64>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    /// Maximum context length N.
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    /// Decode steps per point; defaults to seq_len - prompt_len.
    #[arg(long)]
    steps: Option<usize>,
    /// Speculation: off, script:<m>, or self:<depth>.
    #[arg(long, default_value = "off")]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Report format: json or csv.
    #[arg(long, default_value = "json")]
    format: String,
    /// Output path; stdout when omitted. Files are written atomically.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Copy/compute constant for the analytical overlay column.
    #[arg(long)]
    cprime: Option<f64>,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
}

#[derive(Args)]
struct AdviseArgs {
    /// Maximum context length N.
    #[arg(long)]
    n: u64,
    /// Copy/compute constant C' (from `calibrate` or measured elsewhere).
    #[arg(long)]
    cprime: Option<f64>,
    /// Speculative candidates per verification round.
    #[arg(long)]
    spec_k: Option<u64>,
    /// Mean accepted tokens per round.
    #[arg(long)]
    spec_m: Option<f64>,
    /// Matrix-mode compute rate as a multiple of the vector-mode rate.
    #[arg(long, default_value_t = 1.0)]
    beta_prime_ratio: f64,
}

fn parse_policies(names: &[String]) -> Result<Vec<PolicyChoice>, Error> {
    let mut out = Vec::new();
    for name in names {
        out.push(match name.as_str() {
            "iterative" => PolicyChoice::Iterative,
            "upfront" => PolicyChoice::Upfront,
            "bmc" => PolicyChoice::Bmc,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown policy '{other}' (expected iterative, upfront, or bmc)"
                )))
            }
        });
    }
    Ok(out)
}

fn parse_allocs(args: &SweepArgs) -> Result<AllocChoice, Error> {
    if let Some(chunk) = args.chunk {
        return Ok(AllocChoice::Chunk(chunk));
    }
    if args.allocs == "auto" {
        return Ok(AllocChoice::Auto);
    }
    let mut ts = Vec::new();
    for part in args.allocs.split(',') {
        ts.push(part.trim().parse::<u64>().map_err(|_| {
            Error::InvalidConfig(format!("bad allocation count '{part}' in --allocs"))
        })?);
    }
    Ok(AllocChoice::List(ts))
}

fn parse_spec(spec: &str) -> Result<SpecChoice, Error> {
    if spec == "off" {
        return Ok(SpecChoice::Off);
    }
    if let Some(m) = spec.strip_prefix("script:") {
        let m = m
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("bad --spec value '{spec}'")))?;
        return Ok(SpecChoice::Scripted { m });
    }
    if let Some(depth) = spec.strip_prefix("self:") {
        let depth = depth
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("bad --spec value '{spec}'")))?;
        return Ok(SpecChoice::SelfChain { depth });
    }
    Err(Error::InvalidConfig(format!(
        "bad --spec value '{spec}' (expected off, script:<m>, or self:<depth>)"
    )))
}

fn parse_format(format: &str) -> Result<OutputFormat, Error> {
    match format {
        "json" => Ok(OutputFormat::Json),
        "csv" => Ok(OutputFormat::Csv),
        other => Err(Error::InvalidConfig(format!(
            "unknown format '{other}' (expected json or csv)"
        ))),
    }
}

fn cmd_calibrate(duration: f64) -> Result<(), Error> {
    let cal = bench::run_calibration(duration)?;
    println!("copy bandwidth (alpha*BW): {:.3e} bytes/s", cal.copy_bw);
    println!("compute rate   (beta*C):   {:.3e} MAC/s", cal.mac_rate);
    println!("C' = {:.6}", cal.c_prime);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let dims = ModelDims::with_groups(
        args.batch,
        args.layers,
        args.heads,
        args.head_dim,
        args.seq_len,
        args.groups,
    )?;
    let steps = args
        .steps
        .unwrap_or_else(|| args.seq_len.saturating_sub(args.prompt_len));
    let spec = SweepSpec {
        policies: parse_policies(&args.policy)?,
        allocs: parse_allocs(args)?,
        dims,
        vocab: args.vocab,
        prompt_len: args.prompt_len,
        steps,
        reps: args.reps,
        speculation: parse_spec(&args.spec)?,
        seed: args.seed,
        c_prime: args.cprime,
        format: parse_format(&args.format)?,
        out: args.out.clone(),
    };
    let (report, err) = run_sweep(&spec);
    // Flush whatever completed even when a point failed.
    if !report.points.is_empty() || err.is_none() {
        write_report(&report, spec.format, spec.out.as_deref())?;
    }
    match err {
        None => Ok(()),
        Some(e) => Err(e),
    }
}

fn cmd_advise(args: &AdviseArgs) -> Result<(), Error> {
    let c_prime = args.cprime.ok_or_else(|| {
        Error::InvalidConfig("--cprime is required (run `calibrate` to measure it)".into())
    })?;
    let plain = advise(args.n, c_prime)?;
    println!("{plain}");
    if let Some(k) = args.spec_k {
        let m = args.spec_m.unwrap_or(1.0);
        let sd = advise_sd(args.n, c_prime, k, m, args.beta_prime_ratio)?;
        println!("speculative (k={k}, m={m}): T={}, r={}", sd.rounded, sd.chunk);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calibrate { duration } => cmd_calibrate(*duration),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Advise(args) => cmd_advise(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
