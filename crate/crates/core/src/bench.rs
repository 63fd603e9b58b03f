//! In-memory experiments on the synthetic benchmark: train each method over
//! the stream, evaluate every boundary on every test split and summarize.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, SynthSpec};
use crate::error::Result;
use crate::eval::{summarize, EvalSet, LifelongSummary, PerformanceMatrix};
use crate::trainer::{LossSection, Method, Retained, RunHooks, StepReport, TrainConfig, Trainer};

/// A generated dataset with its evaluation pairs prepared once.
pub struct Benchmark {
    pub dataset: Dataset,
    pub sets: Vec<EvalSet>,
}

impl Benchmark {
    pub fn new(dataset: Dataset) -> Result<Self> {
        let sets = (0..dataset.num_environments())
            .map(|j| EvalSet::from_dataset(&dataset, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dataset, sets })
    }

    pub fn synthetic(spec: &SynthSpec) -> Result<Self> {
        Self::new(generate_synthetic(spec)?.into_dataset()?)
    }

    /// Trains with `config` and fills the performance matrix.
    pub fn run(&self, config: &TrainConfig) -> Result<MethodRun> {
        let start = Instant::now();
        let mut trainer = Trainer::for_dataset(config.clone(), &self.dataset)?;
        let mut hooks = Collect::default();
        trainer.run_stream(&self.dataset, &mut hooks)?;
        let model = trainer.model().clone();
        let per_query = config.eval.per_query;
        let r = hooks
            .boundaries
            .iter()
            .map(|params| {
                self.sets
                    .iter()
                    .map(|set| set.evaluate(&model, params, per_query))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let names = self
            .dataset
            .manifest()
            .environments
            .iter()
            .map(|e| e.name.clone())
            .collect();
        let matrix = PerformanceMatrix::new(names, r)?;
        Ok(MethodRun {
            method: config.method,
            seed: config.seed,
            summary: summarize(&matrix),
            matrix,
            steps: trainer.steps(),
            skipped: hooks.skipped,
            peak: hooks.peak,
            final_params: trainer.params().to_vec(),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Default)]
struct Collect {
    boundaries: Vec<Vec<f64>>,
    skipped: u64,
    peak: Retained,
}

impl RunHooks for Collect {
    fn on_step(&mut self, trainer: &Trainer, report: &StepReport) -> Result<()> {
        let now = trainer.retained();
        self.peak.frames = self.peak.frames.max(now.frames);
        self.peak.floats = self.peak.floats.max(now.floats);
        self.skipped += u64::from(report.skipped);
        Ok(())
    }

    fn on_boundary(&mut self, trainer: &Trainer, _env: u32) -> Result<()> {
        self.boundaries.push(trainer.params().to_vec());
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub matrix: PerformanceMatrix,
    pub summary: LifelongSummary,
    pub steps: u64,
    pub skipped: u64,
    pub peak: Retained,
    #[serde(skip)]
    pub final_params: Vec<f64>,
    pub seconds: f64,
}

/// Loss weights selected by a grid sweep on the default synthetic benchmark.
pub const BENCH_LAMBDA1: f64 = 3.0;
pub const BENCH_LAMBDA2: f64 = 0.03;

/// Benchmark plus training settings shared by every method and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            train: TrainConfig {
                loss: LossSection {
                    lambda1: BENCH_LAMBDA1,
                    lambda2: BENCH_LAMBDA2,
                    ..LossSection::default()
                },
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodMean {
    pub method: Method,
    pub ap: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub runs: usize,
}

/// Runs every method on every seed. Seed `s` drives both the generated
/// dataset and training.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MethodRun>> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let bench = Benchmark::synthetic(&SynthSpec {
            seed,
            ..cfg.synth.clone()
        })?;
        for &method in &cfg.methods {
            let config = TrainConfig {
                seed,
                method,
                ..cfg.train.clone()
            };
            let run = bench.run(&config)?;
            log::info!(
                "seed {seed} {method}: AP {:.4} BWT {:.4} FWT {:.4} ({:.1}s)",
                run.summary.ap,
                run.summary.bwt.unwrap_or(f64::NAN),
                run.summary.fwt.unwrap_or(f64::NAN),
                run.seconds
            );
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Per-method means over seeds, in first-seen method order.
pub fn method_means(runs: &[MethodRun]) -> Vec<MethodMean> {
    let mut out: Vec<MethodMean> = Vec::new();
    for r in runs {
        let idx = match out.iter().position(|m| m.method == r.method) {
            Some(i) => i,
            None => {
                out.push(MethodMean {
                    method: r.method,
                    ap: 0.0,
                    bwt: 0.0,
                    fwt: 0.0,
                    runs: 0,
                });
                out.len() - 1
            }
        };
        let m = &mut out[idx];
        m.ap += r.summary.ap;
        m.bwt += r.summary.bwt.unwrap_or(0.0);
        m.fwt += r.summary.fwt.unwrap_or(0.0);
        m.runs += 1;
    }
    for m in &mut out {
        let n = m.runs as f64;
        m.ap /= n;
        m.bwt /= n;
        m.fwt /= n;
    }
    out
}
