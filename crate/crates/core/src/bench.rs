//! Throughput benchmarks.
//!
//! Every measured configuration runs `warmup` untimed and `runs` timed
//! forward passes over a batch of instances. `instances_per_s` is derived
//! from the median run time.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{synthetic_corpus, DataError, TreeInstance, TreeShape};
use crate::executor::{ExecError, Executor, RunOptions};
use crate::models::{build, Mode, ModelConfig, ModelError, ModelKind, ModelParams};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("bench csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Balancedness,
    Scaling,
    Threads,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Balancedness => "balancedness",
            Suite::Scaling => "scaling",
            Suite::Threads => "threads",
        })
    }
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "balancedness" => Ok(Suite::Balancedness),
            "scaling" => Ok(Suite::Scaling),
            "threads" => Ok(Suite::Threads),
            other => Err(format!("unknown suite `{other}` (balancedness|scaling|threads)")),
        }
    }
}

/// One measured configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub mode: String,
    pub batch: usize,
    pub threads: usize,
    /// Tree shape, with the node count appended for the scaling suite
    /// (`balanced:511`).
    pub shape: String,
    pub n_instances: usize,
    pub instances_per_s: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub model: ModelKind,
    pub d: usize,
    pub vocab: usize,
    pub classes: usize,
    pub modes: Vec<Mode>,
    pub warmup: usize,
    pub runs: usize,
    /// Worker count for the balancedness and scaling suites.
    pub threads: usize,
    pub seed: u64,
    /// Distinct trees generated per configuration; runs cycle through them.
    pub pool: usize,
    pub kernel_delay: Option<Duration>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelKind::TreeRnn,
            d: 32,
            vocab: 100,
            classes: 2,
            modes: vec![Mode::Recursive],
            warmup: 10,
            runs: 100,
            threads: 8,
            seed: 0,
            pool: 50,
            kernel_delay: None,
        }
    }
}

pub const BALANCEDNESS_LEAVES: usize = 64;
pub const BALANCEDNESS_BATCHES: [usize; 3] = [1, 10, 25];
pub const SCALING_NODES: [usize; 6] = [15, 31, 63, 127, 255, 511];
pub const THREAD_COUNTS: [usize; 4] = [1, 2, 4, 8];
pub const THREADS_LEAVES: usize = 128;

/// Per-run wall times of one configuration.
#[derive(Debug, Clone)]
pub struct Timings {
    pub runs: Vec<Duration>,
}

impl Timings {
    fn ms(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.runs.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        v
    }

    pub fn median_ms(&self) -> f64 {
        let v = self.ms();
        let n = v.len();
        if n == 0 {
            return 0.0;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }

    pub fn mean_ms(&self) -> f64 {
        let v = self.ms();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Nearest-rank 95th percentile.
    pub fn p95_ms(&self) -> f64 {
        let v = self.ms();
        if v.is_empty() {
            return 0.0;
        }
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1]
    }
}

/// Time forward passes of `mode` over batches drawn cyclically from `trees`.
pub fn measure(
    cfg: &BenchConfig,
    mode: Mode,
    trees: &[TreeInstance],
    batch: usize,
    threads: usize,
) -> Result<Timings, BenchError> {
    if trees.is_empty() || batch == 0 {
        return Err(BenchError::Config("need at least one tree and batch >= 1".into()));
    }
    let mcfg = ModelConfig::new(cfg.model, cfg.d, cfg.vocab, cfg.classes);
    let capacity = trees.iter().map(|t| t.len()).max().unwrap_or(1);
    let model = build(&mcfg, mode, capacity)?;
    let params = ModelParams::init(&mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).shared();
    let feeds = trees
        .iter()
        .map(|t| model.feeds(t, &params))
        .collect::<Result<Vec<_>, _>>()?;
    let executor = Executor::new(threads);
    let opts = RunOptions {
        kernel_delay: cfg.kernel_delay,
        ..Default::default()
    };
    let mut next = 0;
    let mut times = Vec::with_capacity(cfg.runs);
    for i in 0..cfg.warmup + cfg.runs {
        let group: Vec<_> = (0..batch)
            .map(|k| feeds[(next + k) % feeds.len()].clone())
            .collect();
        next = (next + batch) % feeds.len();
        let start = Instant::now();
        for r in executor.run_batch(&model.forward, &group, &[model.logits], &opts) {
            r?;
        }
        if i >= cfg.warmup {
            times.push(start.elapsed());
        }
    }
    Ok(Timings { runs: times })
}

fn row(cfg: &BenchConfig, mode: Mode, batch: usize, threads: usize, shape: String, t: &Timings) -> BenchRow {
    let median = t.median_ms();
    BenchRow {
        model: cfg.model.name().into(),
        mode: mode.name().into(),
        batch,
        threads,
        shape,
        n_instances: batch * t.runs.len(),
        instances_per_s: batch as f64 / (median.max(1e-9) / 1e3),
        mean_ms: t.mean_ms(),
        p95_ms: t.p95_ms(),
    }
}

fn trees(cfg: &BenchConfig, shape: TreeShape, leaves: usize, salt: u64) -> Result<Vec<TreeInstance>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(salt));
    Ok(synthetic_corpus(shape, leaves, cfg.pool.max(1), cfg.vocab, cfg.classes, &mut rng)?)
}

pub fn run_suite(suite: Suite, cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    if cfg.runs == 0 {
        return Err(BenchError::Config("runs must be at least 1".into()));
    }
    let mut rows = Vec::new();
    match suite {
        Suite::Balancedness => {
            for &mode in &cfg.modes {
                for (s, shape) in TreeShape::ALL.into_iter().enumerate() {
                    let pool = trees(cfg, shape, BALANCEDNESS_LEAVES, s as u64)?;
                    for batch in BALANCEDNESS_BATCHES {
                        let t = measure(cfg, mode, &pool, batch, cfg.threads)?;
                        rows.push(row(cfg, mode, batch, cfg.threads, shape.to_string(), &t));
                        log::info!("{:?}", rows.last());
                    }
                }
            }
        }
        Suite::Scaling => {
            for &mode in &cfg.modes {
                for n in SCALING_NODES {
                    let pool = trees(cfg, TreeShape::Balanced, n.div_ceil(2), n as u64)?;
                    let t = measure(cfg, mode, &pool, 1, cfg.threads)?;
                    rows.push(row(cfg, mode, 1, cfg.threads, format!("balanced:{n}"), &t));
                    log::info!("{:?}", rows.last());
                }
            }
        }
        Suite::Threads => {
            for &mode in &cfg.modes {
                for (s, shape) in [TreeShape::Balanced, TreeShape::Linear].into_iter().enumerate() {
                    let pool = trees(cfg, shape, THREADS_LEAVES, 100 + s as u64)?;
                    for threads in THREAD_COUNTS {
                        let t = measure(cfg, mode, &pool, 1, threads)?;
                        rows.push(row(cfg, mode, 1, threads, shape.to_string(), &t));
                        log::info!("{:?}", rows.last());
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<BenchRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig {
            d: 4,
            vocab: 10,
            warmup: 1,
            runs: 3,
            threads: 2,
            pool: 3,
            modes: vec![Mode::Recursive, Mode::Iterative],
            ..Default::default()
        }
    }

    #[test]
    fn percentiles() {
        let t = Timings {
            runs: (1..=100).map(Duration::from_millis).collect(),
        };
        assert_eq!(t.median_ms(), 50.5);
        assert_eq!(t.p95_ms(), 95.0);
        assert!((t.mean_ms() - 50.5).abs() < 1e-9);
    }

    #[test]
    fn balancedness_rows_and_csv_round_trip() {
        let rows = run_suite(Suite::Balancedness, &tiny()).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 3);
        assert!(rows.iter().all(|r| r.instances_per_s > 0.0));
        assert_eq!(rows[1].batch, 10);
        assert_eq!(rows[1].n_instances, 30);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        write_bench_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model,mode,batch,threads,shape,n_instances,instances_per_s,mean_ms,p95_ms\n"));
        assert_eq!(read_bench_csv(&path).unwrap(), rows);
    }

    #[test]
    fn scaling_and_threads_shapes() {
        let mut cfg = tiny();
        cfg.runs = 1;
        cfg.pool = 1;
        let s = run_suite(Suite::Scaling, &cfg).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s[5].shape, "balanced:511");
        cfg.modes = vec![Mode::Recursive];
        let t = run_suite(Suite::Threads, &cfg).unwrap();
        assert_eq!(t.iter().map(|r| r.threads).collect::<Vec<_>>(), vec![1, 2, 4, 8, 1, 2, 4, 8]);
    }
}
