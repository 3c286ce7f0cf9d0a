// SPDX-License-Identifier: Apache-2.0

//! Benchmark drivers comparing the copy-based baseline with the shared
//! memory path. Each driver talks to a running service.
//!
//! Reported times are per operation, where an operation is one call (copy),
//! one transfer of `param` records (ring), or one pass over the stream (pss).
//! The copy columns use the same unit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::integrity::{sign_library, IntegrityError, ServiceKey};
use crate::isa::BpfProgram;
use crate::programs;
use crate::pss::{DriftStream, PssConfig, UpdateBatch, DEFAULT_BATCH_SIZE};
use crate::transport::{
    baseline_predict_update, sbpf_predict_update, sbpf_statfs, sign_program, Client, LoadedLibrary,
    TransportError,
};
use crate::vm::{Context, VmError, RING_PUSH_FULL};

pub const CSV_HEADER: &str = "scenario,param,baseline_ns,sbpf_ns,speedup,copies_baseline,copies_sbpf";
pub const RING_SIZES: [usize; 8] = [32, 64, 96, 128, 160, 192, 224, 256];
pub const COPY_LENGTHS: [usize; 9] = [9, 38, 68, 97, 126, 155, 185, 214, 243];
pub const RING_REPS: usize = 5;
pub const COPY_REPS: usize = 7;
pub const DEFAULT_RING_ITERATIONS: usize = 50;
pub const DEFAULT_COPY_ITERATIONS: usize = 10_000;
pub const DEFAULT_PSS_SAMPLES: usize = 20_000;
pub const DEFAULT_FLIP_PERIOD: usize = 500;

/// Task IDs used by the drivers; distinct so drivers can share a service.
const RING_TASK: u64 = 0xbe_0001;
const COPY_TASK: u64 = 0xbe_0002;
const PSS_SBPF_TASK: u64 = 0xbe_0003;
const PSS_BASE_TASK: u64 = 0xbe_0004;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("result mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub param: u64,
    pub baseline_ns: u64,
    pub sbpf_ns: u64,
    pub speedup: f64,
    pub copies_baseline: u64,
    pub copies_sbpf: u64,
}

impl BenchRow {
    pub fn new(scenario: &str, param: u64, baseline_ns: f64, sbpf_ns: f64, copies: (u64, u64)) -> Self {
        let speedup = if sbpf_ns > 0.0 { baseline_ns / sbpf_ns } else { 0.0 };
        BenchRow {
            scenario: scenario.to_string(),
            param,
            baseline_ns: baseline_ns.round() as u64,
            sbpf_ns: sbpf_ns.round() as u64,
            speedup: (speedup * 1000.0).round() / 1000.0,
            copies_baseline: copies.0,
            copies_sbpf: copies.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub host: String,
    pub iterations: usize,
    pub timestamp: u64,
}

impl Metadata {
    pub fn now(iterations: usize) -> Self {
        let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
        Metadata {
            host: format!("{}-{} ({cpus} cpus)", std::env::consts::OS, std::env::consts::ARCH),
            iterations,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub metadata: Metadata,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{},{}",
                r.scenario, r.param, r.baseline_ns, r.sbpf_ns, r.speedup, r.copies_baseline, r.copies_sbpf
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "# host={} iterations={} timestamp={}\n",
            self.metadata.host, self.metadata.iterations, self.metadata.timestamp
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "# {:<6} {:>6}: baseline {:>10} ns  sbpf {:>10} ns  speedup {:>7.3}x",
                r.scenario, r.param, r.baseline_ns, r.sbpf_ns, r.speedup
            );
        }
        s
    }
}

/// Mean after dropping one minimum and one maximum.
pub fn trimmed_mean(samples: &[f64]) -> f64 {
    assert!(samples.len() >= 3, "need at least three samples");
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let inner = &v[1..v.len() - 1];
    inner.iter().sum::<f64>() / inner.len() as f64
}

pub fn median(samples: &mut [u64]) -> u64 {
    samples.sort_unstable();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

/// Where the drivers find the service and how they sign programs.
#[derive(Clone, Debug)]
pub struct BenchEnv {
    pub socket: PathBuf,
    pub key: ServiceKey,
    pub seed: u64,
}

impl BenchEnv {
    pub fn connect(&self) -> Result<Client, BenchError> {
        Client::connect(&self.socket).map_err(|e| BenchError::ServiceUnavailable(e.to_string()))
    }

    pub fn load(&self, client: &mut Client, task: u64, program: &BpfProgram) -> Result<LoadedLibrary, BenchError> {
        Ok(client.load_library(task, &sign_program(program, &self.key)?)?)
    }
}

fn elapsed_ns(t: Instant) -> f64 {
    t.elapsed().as_nanos() as f64
}

// ---------------------------------------------------------------------------
// Ring

/// Per-record round trips versus VM pushes plus one batch drain.
pub fn cmd_bench_ring(env: &BenchEnv, sizes: &[usize], iterations: usize) -> Result<BenchReport, BenchError> {
    let iterations = iterations.max(1);
    let mut client = env.connect()?;
    let lib = env.load(&mut client, RING_TASK, &programs::ring_push())?;
    let vm = lib.vm(None);
    let mut rows = Vec::new();
    for &n in sizes {
        let records: Vec<[u8; 4]> = (0..n as u32).map(u32::to_le_bytes).collect();
        let mut base = Vec::new();
        let mut fast = Vec::new();
        let (mut copies_base, mut copies_fast) = (0, 0);
        for _ in 0..RING_REPS {
            let (c0, r0) = client.stats()?;
            let t = Instant::now();
            for _ in 0..iterations {
                for rec in &records {
                    let echo = client.baseline_drain_one(rec)?;
                    if echo != rec {
                        return Err(BenchError::Mismatch("ring echo".into()));
                    }
                }
            }
            base.push(elapsed_ns(t) / iterations as f64);
            let (c1, r1) = client.stats()?;
            if r1 - r0 != (n * iterations) as u64 {
                return Err(BenchError::Mismatch(format!("{} round trips for {n} records", r1 - r0)));
            }
            copies_base = (c1 - c0) / iterations as u64;

            let mut producer = 0.0;
            let mut consumer = 0.0;
            for _ in 0..iterations {
                let t = Instant::now();
                for rec in &records {
                    if vm.execute(&lib.program, Context::input(rec))? == RING_PUSH_FULL {
                        return Err(BenchError::Mismatch("ring unexpectedly full".into()));
                    }
                }
                producer += elapsed_ns(t);
                let t = Instant::now();
                let drained = client.drain_batch(0)?;
                consumer += elapsed_ns(t);
                if drained.records != n as u64 {
                    return Err(BenchError::Mismatch(format!("drained {} of {n} records", drained.records)));
                }
            }
            fast.push((producer + consumer) / iterations as f64);
            copies_fast = client.stats()?.0 - c1;
        }
        rows.push(BenchRow::new(
            "ring",
            n as u64,
            trimmed_mean(&base),
            trimmed_mean(&fast),
            (copies_base, copies_fast),
        ));
    }
    client.release(RING_TASK)?;
    Ok(BenchReport {
        rows,
        metadata: Metadata::now(iterations),
    })
}

// ---------------------------------------------------------------------------
// Copy

const PATH_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_-./";

/// A deterministic path of exactly `len` bytes starting with '/'.
pub fn random_path(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(len);
    p.push(b'/');
    p.extend((1..len).map(|_| PATH_ALPHABET[rng.gen_range(0..PATH_ALPHABET.len())]));
    p
}

/// A connected, loaded statfs setup for one thread slot.
pub struct StatfsBench {
    pub client: Client,
    pub lib: LoadedLibrary,
    pub vm: crate::vm::VmInstance,
}

impl StatfsBench {
    pub fn new(env: &BenchEnv, task: u64, thread: usize) -> Result<Self, BenchError> {
        let mut client = env.connect()?;
        let lib = env.load(&mut client, task, &programs::statfs())?;
        let vm = lib.vm(Some(thread));
        Ok(StatfsBench { client, lib, vm })
    }

    /// Fail on the first path whose two results differ.
    pub fn check_equal(&mut self, paths: &[Vec<u8>]) -> Result<(), BenchError> {
        for p in paths {
            let a = self.client.baseline_statfs(p)?;
            let b = sbpf_statfs(&mut self.client, &self.vm, &self.lib.program, p)?;
            if a != b {
                return Err(BenchError::Mismatch(format!(
                    "statfs results differ for path of {} bytes",
                    p.len()
                )));
            }
        }
        Ok(())
    }

    /// Per-call latencies (ns) for both paths, interleaved call by call.
    pub fn latencies(&mut self, paths: &[Vec<u8>]) -> Result<(Vec<u64>, Vec<u64>), BenchError> {
        let mut base = Vec::with_capacity(paths.len());
        let mut fast = Vec::with_capacity(paths.len());
        for p in paths {
            let t = Instant::now();
            self.client.baseline_statfs(p)?;
            base.push(t.elapsed().as_nanos() as u64);
            let t = Instant::now();
            sbpf_statfs(&mut self.client, &self.vm, &self.lib.program, p)?;
            fast.push(t.elapsed().as_nanos() as u64);
        }
        Ok((base, fast))
    }
}

/// Baseline statfs versus the doorbell path, per path length.
pub fn cmd_bench_copy(env: &BenchEnv, lengths: &[usize], iterations: usize) -> Result<BenchReport, BenchError> {
    let iterations = iterations.max(1);
    let mut b = StatfsBench::new(env, COPY_TASK, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(env.seed);
    let mut rows = Vec::new();
    for &len in lengths {
        let paths: Vec<Vec<u8>> = (0..iterations).map(|_| random_path(&mut rng, len)).collect();
        b.check_equal(&paths[..paths.len().min(100)])?;
        let mut base = Vec::new();
        let mut fast = Vec::new();
        let (mut copies_base, mut copies_fast) = (0, 0);
        for _ in 0..COPY_REPS {
            let (c0, _) = b.client.stats()?;
            let t = Instant::now();
            for p in &paths {
                b.client.baseline_statfs(p)?;
            }
            base.push(elapsed_ns(t) / iterations as f64);
            let (c1, _) = b.client.stats()?;
            let expect = (iterations * (len + 64)) as u64;
            if c1 - c0 != expect {
                return Err(BenchError::Mismatch(format!("copied {} bytes, expected {expect}", c1 - c0)));
            }
            copies_base = (c1 - c0) / iterations as u64;
            let t = Instant::now();
            for p in &paths {
                sbpf_statfs(&mut b.client, &b.vm, &b.lib.program, p)?;
            }
            fast.push(elapsed_ns(t) / iterations as f64);
            copies_fast = b.client.stats()?.0 - c1;
        }
        rows.push(BenchRow::new(
            "copy",
            len as u64,
            trimmed_mean(&base),
            trimmed_mean(&fast),
            (copies_base, copies_fast),
        ));
    }
    b.client.release(COPY_TASK)?;
    Ok(BenchReport {
        rows,
        metadata: Metadata::now(iterations),
    })
}

// ---------------------------------------------------------------------------
// PSS

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PssOutcome {
    pub baseline_accuracy: f64,
    pub sbpf_accuracy: f64,
    pub baseline_round_trips: u64,
    pub sbpf_round_trips: u64,
}

/// Batched-update baseline versus immediate in-place updates on a drift
/// stream. `flip_period = None` disables drift.
pub fn cmd_bench_pss(
    env: &BenchEnv,
    samples: usize,
    flip_period: Option<usize>,
    batch_size: usize,
) -> Result<(BenchReport, PssOutcome), BenchError> {
    let config = PssConfig::default();
    let mut client = env.connect()?;

    let fast_lib = env.load(&mut client, PSS_SBPF_TASK, &programs::pss_predict_update())?;
    let vm = fast_lib.vm(None);
    let (c0, r0) = client.stats()?;
    let mut correct = 0usize;
    let t = Instant::now();
    for u in DriftStream::new(env.seed, flip_period).take(samples) {
        correct += (sbpf_predict_update(&vm, &fast_lib.program, u.features, u.outcome)? == u.outcome) as usize;
    }
    let fast_ns = elapsed_ns(t);
    let (c1, r1) = client.stats()?;
    let sbpf_accuracy = correct as f64 / samples.max(1) as f64;

    // Loaded last, so flushes on this connection reach this segment.
    let base_lib = env.load(&mut client, PSS_BASE_TASK, &programs::pss_predict_update())?;
    let mut batch = UpdateBatch::new(batch_size);
    let (c2, r2) = client.stats()?;
    let mut correct = 0usize;
    let t = Instant::now();
    for u in DriftStream::new(env.seed, flip_period).take(samples) {
        let d = baseline_predict_update(&mut client, &base_lib.view, config, &mut batch, u.features, u.outcome)?;
        correct += (d == u.outcome) as usize;
    }
    let base_ns = elapsed_ns(t);
    let (c3, r3) = client.stats()?;
    let baseline_accuracy = correct as f64 / samples.max(1) as f64;

    client.release(PSS_SBPF_TASK)?;
    client.release(PSS_BASE_TASK)?;
    let per_op = samples.max(1) as f64;
    let report = BenchReport {
        rows: vec![BenchRow::new(
            "pss",
            samples as u64,
            base_ns / per_op,
            fast_ns / per_op,
            (c3 - c2, c1 - c0),
        )],
        metadata: Metadata::now(samples),
    };
    Ok((
        report,
        PssOutcome {
            baseline_accuracy,
            sbpf_accuracy,
            baseline_round_trips: r3 - r2,
            sbpf_round_trips: r1 - r0,
        },
    ))
}

pub fn default_pss_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

// ---------------------------------------------------------------------------
// Signing

/// Sign the program at `payload` and write `<out>` (default: `.sbpf` next to it).
pub fn cmd_sign(payload: &Path, key: &ServiceKey, out: Option<&Path>) -> Result<PathBuf, BenchError> {
    let bytes = std::fs::read(payload)?;
    let lib = sign_library(&bytes, key)?;
    let out = out.map_or_else(|| payload.with_extension("sbpf"), Path::to_path_buf);
    std::fs::write(&out, lib.to_bytes())?;
    Ok(out)
}
