//! End-to-end speed benchmarking of the defacing pipeline.
//!
//! Each repetition times the whole program path: read the input file,
//! preprocess, forward, postprocess, write the outputs. Warm-up runs are
//! excluded from the statistics. An external command can be timed on the
//! same files for comparison.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::deface::run_deface;
use crate::error::{Error, Result};
use crate::io::{read_nifti, write_nifti, write_nifti_mask};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::pipeline::FitOptions;
use crate::unet::{ModelConfig, WeightStore};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dims: [usize; 3],
    /// Timed repetitions, at least 3.
    pub reps: usize,
    /// Untimed warm-up runs before the measurement.
    pub warmup: usize,
    pub fit: FitOptions,
    pub tau: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dims: [128, 128, 128],
            reps: 3,
            warmup: 1,
            fit: FitOptions::default(),
            tau: 0.5,
            seed: 2024,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Usage(format!(
                "bench needs at least 3 repetitions, got {}",
                self.reps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub label: String,
    pub threads: usize,
    pub dims: [usize; 3],
    pub reps: usize,
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
}

fn summarize(label: String, threads: usize, dims: [usize; 3], times_ms: Vec<f64>) -> BenchRow {
    let n = times_ms.len() as f64;
    let mean = times_ms.iter().sum::<f64>() / n;
    let mut sorted = times_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    let var = times_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    BenchRow {
        label,
        threads,
        dims,
        reps: times_ms.len(),
        times_ms,
        mean_ms: mean,
        median_ms: median,
        stddev_ms: var.sqrt(),
    }
}

/// Writes a deterministic phantom of the requested dims for benchmarking.
pub fn make_bench_input(dims: [usize; 3], spacing: [f32; 3], seed: u64, path: &Path) -> Result<()> {
    let spec = PhantomSpec::default_for(dims, spacing, seed);
    let (image, _) = generate_phantom(&spec)?;
    write_nifti(&image, path)
}

/// Times the full deface pipeline (load -> preprocess -> forward ->
/// postprocess -> write) on a fixed thread pool.
pub fn bench_deface(
    store: &WeightStore,
    config: &ModelConfig,
    label: &str,
    threads: usize,
    bench: &BenchConfig,
    input: &Path,
    out_dir: &Path,
) -> Result<BenchRow> {
    bench.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Usage(format!("cannot build a {threads}-thread pool: {e}")))?;

    let defaced_path = out_dir.join(format!("bench_{label}_{threads}t_defaced.nii"));
    let mask_path = out_dir.join(format!("bench_{label}_{threads}t_mask.nii"));
    let run = || -> Result<f64> {
        let t0 = Instant::now();
        let image = read_nifti(input)?;
        let result = pool.install(|| run_deface(store, config, &image, &bench.fit, bench.tau))?;
        write_nifti(&result.defaced, &defaced_path)?;
        write_nifti_mask(&result.mask, &mask_path)?;
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    };

    for _ in 0..bench.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(bench.reps);
    for _ in 0..bench.reps {
        times.push(run()?);
    }
    Ok(summarize(label.to_string(), threads, bench.dims, times))
}

/// Times an arbitrary defacing command on the same input. `{in}` and
/// `{out}` in the template are replaced per run.
pub fn bench_external(
    template: &str,
    bench: &BenchConfig,
    input: &Path,
    out_dir: &Path,
) -> Result<BenchRow> {
    bench.validate()?;
    let out_path = out_dir.join("bench_external_out.nii");
    let run = || -> Result<f64> {
        let rendered = template
            .replace("{in}", &input.display().to_string())
            .replace("{out}", &out_path.display().to_string());
        let mut parts = rendered.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Usage("empty external command".into()))?;
        let args: Vec<&str> = parts.collect();
        let t0 = Instant::now();
        let status = std::process::Command::new(program)
            .args(&args)
            .status()
            .map_err(|e| Error::Usage(format!("cannot run '{program}': {e}")))?;
        if !status.success() {
            return Err(Error::Usage(format!(
                "external command exited with {status}"
            )));
        }
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    };

    for _ in 0..bench.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(bench.reps);
    for _ in 0..bench.reps {
        times.push(run()?);
    }
    Ok(summarize("external".into(), 1, bench.dims, times))
}

/// Mean-time ratio of `slow` over `fast` (how many times faster `fast` is).
pub fn speedup(fast: &BenchRow, slow: &BenchRow) -> f64 {
    slow.mean_ms / fast.mean_ms
}

/// Plain-text table of bench rows.
pub fn format_table(rows: &[BenchRow]) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>7} {:>14} {:>10} {:>10} {:>9}",
        "model", "threads", "dims", "mean ms", "median ms", "stddev"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>14} {:>10.1} {:>10.1} {:>9.1}",
            r.label,
            r.threads,
            format!("{}x{}x{}", r.dims[0], r.dims[1], r.dims[2]),
            r.mean_ms,
            r.median_ms,
            r.stddev_ms
        );
    }
    out
}
