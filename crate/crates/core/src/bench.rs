//! Sampling latency and throughput measurements.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::sampling::{sample, SampleOptions, SampleTrace, SamplerKind};

pub const BENCH_HEADER: [&str; 9] = [
    "model",
    "sampler",
    "steps",
    "L",
    "batch",
    "latency_ms_mean",
    "latency_ms_sd",
    "tok_per_s",
    "positions_processed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub sampler: SamplerKind,
    pub steps: usize,
    #[serde(rename = "L")]
    pub seq_len: usize,
    pub batch: usize,
    pub latency_ms_mean: f64,
    pub latency_ms_sd: f64,
    pub tok_per_s: f64,
    /// Mean over timed repeats of the positions pushed through the network per batch.
    pub positions_processed: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub environment: Vec<(String, String)>,
    pub rows: Vec<BenchRow>,
    /// Traces of the last timed batch of every row.
    pub traces: Vec<Vec<SampleTrace>>,
}

impl BenchReport {
    /// Environment as `# key: value` lines, then the CSV table.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.environment {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let err = |e: csv::Error| Error::Evaluation(e.to_string());
        w.write_record(BENCH_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                serde_json::to_value(r.sampler)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                r.steps.to_string(),
                r.seq_len.to_string(),
                r.batch.to_string(),
                format!("{:.4}", r.latency_ms_mean),
                format!("{:.4}", r.latency_ms_sd),
                format!("{:.3}", r.tok_per_s),
                format!("{:.1}", r.positions_processed),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Key facts about the machine and build.
pub fn environment() -> Vec<(String, String)> {
    vec![
        ("os".into(), std::env::consts::OS.into()),
        ("arch".into(), std::env::consts::ARCH.into()),
        (
            "cpus".into(),
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).to_string(),
        ),
        ("threads".into(), rayon::current_num_threads().to_string()),
        (
            "profile".into(),
            if cfg!(debug_assertions) { "debug" } else { "optimized" }.into(),
        ),
        ("version".into(), env!("CARGO_PKG_VERSION").into()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub samplers: Vec<SamplerKind>,
    pub steps: Vec<usize>,
    pub seq_len: usize,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            samplers: vec![SamplerKind::FixedK],
            steps: vec![8, 16, 32],
            seq_len: 32,
            batch: 16,
            warmup: 2,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Times every `(model, sampler, steps)` combination. Warmup batches are run
/// and discarded before the timed repeats.
pub fn throughput_bench(
    models: &[(&str, &dyn Denoiser)],
    config: &BenchConfig,
    opts: &SampleOptions,
) -> Result<BenchReport> {
    if config.repeats < 2 {
        return Err(Error::Config("benchmarks need at least 2 repeats".into()));
    }
    if config.batch == 0 || config.seq_len == 0 {
        return Err(Error::Config("batch and sequence length must be positive".into()));
    }
    let mut report = BenchReport {
        environment: environment(),
        ..Default::default()
    };
    for &(name, model) in models {
        for &sampler in &config.samplers {
            for &steps in &config.steps {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                for _ in 0..config.warmup {
                    sample(sampler, model, config.seq_len, steps, config.batch, opts, &mut rng)?;
                }
                let mut ms = Vec::with_capacity(config.repeats);
                let mut positions = 0u64;
                let mut last = Vec::new();
                for _ in 0..config.repeats {
                    let start = Instant::now();
                    let traces = sample(sampler, model, config.seq_len, steps, config.batch, opts, &mut rng)?;
                    ms.push(start.elapsed().as_secs_f64() * 1e3);
                    positions += traces.iter().map(SampleTrace::positions_processed).sum::<u64>();
                    last = traces;
                }
                let (mean, sd) = mean_sd(&ms);
                report.rows.push(BenchRow {
                    model: name.to_string(),
                    sampler,
                    steps,
                    seq_len: config.seq_len,
                    batch: config.batch,
                    latency_ms_mean: mean,
                    latency_ms_sd: sd,
                    tok_per_s: (config.batch * config.seq_len) as f64 / (mean / 1e3),
                    positions_processed: positions as f64 / config.repeats as f64,
                });
                report.traces.push(last);
            }
        }
    }
    Ok(report)
}

/// Mean and unbiased standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument("regression needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Argument("regressor is constant".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Per-step latency against the number of clean positions, pooled over traces.
pub fn latency_vs_clean(traces: &[SampleTrace]) -> Result<LinearFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    // Steps are timed per batch, so one trace per batch suffices.
    if let Some(t) = traces.first() {
        for s in t.steps.iter().filter(|s| s.model_calls > 0) {
            xs.push(s.n_clean as f64);
            ys.push(s.ms);
        }
    }
    linear_fit(&xs, &ys)
}
