// SPDX-License-Identifier: Apache-2.0

use std::io::Write;
use std::os::unix::net::UnixListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::RngCore;

use sbpf_core::bench::{self, BenchEnv, BenchError, BenchReport};
use sbpf_core::integrity::{ServiceKey, KEY_LEN};
use sbpf_core::isa::decode_program;
use sbpf_core::transport::{Client, Service, ServiceConfig, ServiceProcess, Status, TransportError};
use sbpf_core::verifier;
use sbpf_core::vm::{Context, HelperEnv, VmInstance};

const EXIT_REJECTED: u8 = 1;
const EXIT_SERVICE: u8 = 2;

#[derive(Parser)]
#[command(name = "sbpf", version, about = "Verified userspace BPF runtime and boundary benchmarks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Global {
    /// Service socket path.
    #[arg(long, global = true)]
    socket: Option<PathBuf>,
    /// Seed for randomized inputs and base handles.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Iterations per measurement.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// File holding the 64-hex-character service key.
    #[arg(long, global = true)]
    key_file: Option<PathBuf>,
    /// Output file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify a raw .bpf program.
    Verify { program: PathBuf },
    /// Verify and execute a raw .bpf program.
    Run {
        program: PathBuf,
        /// Context word passed in r1.
        #[arg(long, default_value_t = 0)]
        ctx: u64,
    },
    /// Wrap a raw program into an authenticated .sbpf container.
    Sign { payload: PathBuf },
    /// Submit a .sbpf container to the service.
    Load {
        container: PathBuf,
        #[arg(long, default_value_t = 1)]
        task: u64,
    },
    /// Run the service in the foreground.
    Serve,
    /// Run a benchmark and emit CSV.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Print service counters.
    Stats,
}

#[derive(Subcommand)]
enum BenchCmd {
    Ring,
    Copy,
    Pss {
        #[arg(long, default_value_t = bench::DEFAULT_PSS_SAMPLES)]
        samples: usize,
        /// Samples between boundary flips; 0 disables drift.
        #[arg(long, default_value_t = bench::DEFAULT_FLIP_PERIOD)]
        flip_period: usize,
        #[arg(long, default_value_t = bench::default_pss_batch())]
        batch_size: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Rejected(String),
    #[error("{0}")]
    Service(String),
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        match e.status() {
            Some(Status::IntegrityRejected | Status::VerificationRejected) => CliError::Rejected(e.to_string()),
            _ => CliError::Service(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Transport(t) => t.into(),
            other => CliError::Service(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Service(format!("{}: {e}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            let _ = std::io::stdout().flush();
            Ok(())
        }
    }
}

fn key(g: &Global) -> Result<ServiceKey, CliError> {
    ServiceKey::resolve(g.key_file.as_deref()).map_err(|e| CliError::Service(e.to_string()))
}

fn socket(g: &Global) -> Result<&Path, CliError> {
    g.socket
        .as_deref()
        .ok_or_else(|| CliError::Service("--socket is required".into()))
}

fn cmd_verify(path: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let program = decode_program(&bytes).map_err(|e| CliError::Rejected(format!("decode failed: {e}")))?;
    let report = verifier::report(&program, &sbpf_core::vm::HelperTable::standard().ids());
    if report.accepted {
        println!("accepted ({} instructions)", report.instruction_count);
        Ok(())
    } else {
        print!("{report}");
        Err(CliError::Rejected(format!("{} violation(s)", report.violations.len())))
    }
}

fn cmd_run(path: &Path, ctx: u64) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let program = decode_program(&bytes).map_err(|e| CliError::Rejected(format!("decode failed: {e}")))?;
    let vm = VmInstance::standard(HelperEnv::default());
    let verified = verifier::verify(&program, &vm.helpers().ids()).map_err(|r| {
        print!("{r}");
        CliError::Rejected("verification failed".into())
    })?;
    let r0 = vm
        .execute(&verified, Context::word(ctx, 8))
        .map_err(|e| CliError::Service(format!("execution failed: {e}")))?;
    println!("{r0} {r0:#x}");
    Ok(())
}

fn cmd_serve(g: &Global) -> Result<(), CliError> {
    let path = socket(g)?;
    let mut config = ServiceConfig::new(key(g)?);
    config.seed = g.seed;
    let _ = std::fs::remove_file(path);
    let listener = UnixListener::bind(path).map_err(io_err(path))?;
    log::info!("serving on {}", path.display());
    let result = Arc::new(Service::new(config)).serve(listener);
    let _ = std::fs::remove_file(path);
    result.map_err(|e| CliError::Service(e.to_string()))
}

fn cmd_bench(g: &Global, which: &BenchCmd) -> Result<(), CliError> {
    // Without --socket, run against a private service process.
    let (env, _child) = match &g.socket {
        Some(p) => (
            BenchEnv {
                socket: p.clone(),
                key: key(g)?,
                seed: g.seed.unwrap_or(0),
            },
            None,
        ),
        None => {
            let mut k = [0u8; KEY_LEN];
            rand::thread_rng().fill_bytes(&mut k);
            let key = ServiceKey(k);
            let exe = std::env::current_exe().map_err(|e| CliError::Service(e.to_string()))?;
            let child = ServiceProcess::spawn(&exe, &key, g.seed)
                .map_err(|e| CliError::Service(format!("cannot start service: {e}")))?;
            let env = BenchEnv {
                socket: child.path().to_path_buf(),
                key,
                seed: g.seed.unwrap_or(0),
            };
            (env, Some(child))
        }
    };
    let report: BenchReport = match which {
        BenchCmd::Ring => bench::cmd_bench_ring(
            &env,
            &bench::RING_SIZES,
            g.iterations.unwrap_or(bench::DEFAULT_RING_ITERATIONS),
        )?,
        BenchCmd::Copy => bench::cmd_bench_copy(
            &env,
            &bench::COPY_LENGTHS,
            g.iterations.unwrap_or(bench::DEFAULT_COPY_ITERATIONS),
        )?,
        BenchCmd::Pss {
            samples,
            flip_period,
            batch_size,
        } => {
            let flip = (*flip_period > 0).then_some(*flip_period);
            let (report, outcome) = bench::cmd_bench_pss(&env, *samples, flip, *batch_size)?;
            eprintln!(
                "accuracy: baseline {:.4} sbpf {:.4}; round trips: baseline {} sbpf {}",
                outcome.baseline_accuracy, outcome.sbpf_accuracy, outcome.baseline_round_trips, outcome.sbpf_round_trips
            );
            report
        }
    };
    eprint!("{}", report.summary());
    emit(g.out.as_deref(), &report.to_csv())
}

fn cmd_stats(g: &Global) -> Result<(), CliError> {
    let mut c = Client::connect(socket(g)?)?;
    let (copies, trips) = c.stats()?;
    let gate = c.counters()?;
    println!("copy_bytes {copies}");
    println!("round_trips {trips}");
    println!("integrity_checks {}", gate.integrity_checks);
    println!("integrity_rejections {}", gate.integrity_rejections);
    println!("verifier_invocations {}", gate.verifier_invocations);
    println!("verifier_rejections {}", gate.verifier_rejections);
    println!("loads_accepted {}", gate.loads_accepted);
    println!("drain_calls {}", gate.drain_calls);
    Ok(())
}

fn cmd_load(g: &Global, path: &Path, task: u64) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut c = Client::connect(socket(g)?)?;
    let lib = c.load_library(task, &bytes)?;
    println!(
        "accepted: task {task}, segment {} ({} bytes), handle {:#018x}",
        lib.view.name(),
        lib.view.len(),
        lib.handle
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Cmd::Verify { program } => cmd_verify(program),
        Cmd::Run { program, ctx } => cmd_run(program, *ctx),
        Cmd::Sign { payload } => key(g).and_then(|k| {
            let out = bench::cmd_sign(payload, &k, g.out.as_deref())?;
            println!("{}", out.display());
            Ok(())
        }),
        Cmd::Load { container, task } => cmd_load(g, container, *task),
        Cmd::Serve => cmd_serve(g),
        Cmd::Bench(b) => cmd_bench(g, b),
        Cmd::Stats => cmd_stats(g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Rejected(m)) => {
            eprintln!("rejected: {m}");
            ExitCode::from(EXIT_REJECTED)
        }
        Err(CliError::Service(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_SERVICE)
        }
    }
}
