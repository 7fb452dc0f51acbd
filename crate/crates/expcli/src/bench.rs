//! Round duration as a function of cohort size and backend.

use std::fs;
use std::path::Path;
use std::time::Instant;

use fedsim_core::runner::Backend;

use crate::error::{ExpError, Result};
use crate::experiment::Experiment;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub cohort_size: usize,
    pub backend: Backend,
    pub mean_s: f64,
    /// Sample standard deviation; zero for a single measured round.
    pub std_s: f64,
    pub durations_s: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Times `measured` rounds after `warmup` discarded ones, for every cohort
/// size and backend. Each measurement starts from the experiment's initial
/// state.
pub fn bench_cohort_scaling(
    exp: &Experiment,
    cohort_sizes: &[usize],
    backends: &[Backend],
    warmup: usize,
    measured: usize,
) -> Result<Vec<BenchRow>> {
    if measured == 0 {
        return Err(ExpError::config("bench.measured_rounds", "must be >= 1"));
    }
    let available = exp.train.num_clients();
    if let Some(&c) = cohort_sizes.iter().find(|&&c| c == 0 || c > available) {
        return Err(ExpError::config(
            "bench.cohort_sizes",
            format!("cohort size {c} outside 1..={available}"),
        ));
    }
    let mut rows = Vec::new();
    for &cohort in cohort_sizes {
        for &backend in backends {
            let trainer = exp.trainer(backend, cohort);
            let mut state = exp.initial_state(&trainer)?;
            let mut durations = Vec::with_capacity(measured);
            for r in 0..warmup + measured {
                let start = Instant::now();
                let (next, _) = trainer.run_round(&exp.train, state)?;
                let elapsed = start.elapsed().as_secs_f64();
                state = next;
                if r >= warmup {
                    durations.push(elapsed);
                }
            }
            let (mean_s, std_s) = mean_std(&durations);
            rows.push(BenchRow {
                cohort_size: cohort,
                backend,
                mean_s,
                std_s,
                durations_s: durations,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cohort_size", "backend", "mean_s", "std_s"])?;
    for r in rows {
        w.write_record([
            r.cohort_size.to_string(),
            r.backend.to_string(),
            r.mean_s.to_string(),
            r.std_s.to_string(),
        ])?;
    }
    Ok(String::from_utf8(
        w.into_inner()
            .map_err(|e| ExpError::Format(e.to_string()))?,
    )
    .expect("ascii"))
}

/// One gnuplot data block per backend (select with `index`).
pub fn bench_dat(rows: &[BenchRow]) -> String {
    let mut backends: Vec<Backend> = Vec::new();
    for r in rows {
        if !backends.contains(&r.backend) {
            backends.push(r.backend);
        }
    }
    let mut out = String::new();
    for (i, b) in backends.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(&format!("# backend {b}\n# cohort_size mean_s std_s\n"));
        for r in rows.iter().filter(|r| r.backend == *b) {
            out.push_str(&format!("{} {} {}\n", r.cohort_size, r.mean_s, r.std_s));
        }
    }
    out
}

pub fn write_bench(dir: &Path, rows: &[BenchRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ExpError::io(dir, e))?;
    let csv_path = dir.join("bench.csv");
    fs::write(&csv_path, bench_csv(rows)?).map_err(|e| ExpError::io(&csv_path, e))?;
    let dat_path = dir.join("bench.dat");
    fs::write(&dat_path, bench_dat(rows)).map_err(|e| ExpError::io(&dat_path, e))
}
