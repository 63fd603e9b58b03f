//! Command-line entry point tying dataset generation, labeling, training,
//! evaluation and reporting together. Every flag can also be set through an
//! `LCD_`-prefixed environment variable.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::bench::{method_means, run_experiment, ExperimentConfig};
use crate::data::{generate_synthetic, Dataset, Split, SynthSpec};
use crate::eval::{build_performance_matrix, PerformanceMatrix, SummaryReport};
use crate::geometry::{classify_pair_detailed, Label};
use crate::gradcheck::run_gradcheck;
use crate::model::DescriptorModel;
use crate::trainer::{
    boundary_checkpoints, run, Method, Retained, RunOptions, TrainConfig, LOSS_LOG,
};

pub const RUN_REPORT: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "lifelong-lcd",
    version,
    about = "Lifelong loop-closure descriptor training"
)]
pub struct Cli {
    /// Overrides the seed of the dataset spec or training config.
    #[arg(long, global = true, env = "LCD_SEED")]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true, env = "LCD_VERBOSE")]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ring-of-places dataset.
    GenSynth(GenSynthArgs),
    /// Write ground-truth labels for every frame pair of a dataset.
    Label(LabelArgs),
    /// Train over the environment stream, writing checkpoints and loss logs.
    Train(TrainArgs),
    /// Evaluate boundary checkpoints on every test split.
    Eval(EvalArgs),
    /// Summarize a performance matrix.
    Report(ReportArgs),
    /// Check every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Grid search over loss weights and margin on the synthetic benchmark.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Generator settings (TOML, or JSON with a `.json` extension); defaults
    /// apply when omitted.
    #[arg(long, env = "LCD_SPEC")]
    pub spec: Option<PathBuf>,
    #[arg(long, env = "LCD_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Both,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long, env = "LCD_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "LCD_OUT")]
    pub out: PathBuf,
    /// Restrict to one environment, by name.
    #[arg(long, env = "LCD_ENV")]
    pub env: Option<String>,
    #[arg(long, value_enum, default_value = "both", env = "LCD_SPLIT")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "LCD_MANIFEST")]
    pub manifest: PathBuf,
    /// Training config (TOML); defaults apply when omitted.
    #[arg(long, env = "LCD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides the method named in the config.
    #[arg(long, env = "LCD_METHOD")]
    pub method: Option<Method>,
    #[arg(long, env = "LCD_OUT")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, env = "LCD_RESUME")]
    pub resume: Option<PathBuf>,
    /// Record every frame read in `access.csv`.
    #[arg(long, env = "LCD_ACCESS_LOG")]
    pub access_log: bool,
    /// Also evaluate the boundary checkpoints and put the matrix in the run
    /// report.
    #[arg(long, env = "LCD_EVALUATE")]
    pub evaluate: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding `env_{t}.ckpt` for every environment.
    #[arg(long, env = "LCD_CHECKPOINTS")]
    pub checkpoints: PathBuf,
    #[arg(long, env = "LCD_MANIFEST")]
    pub manifest: PathBuf,
    #[arg(long, env = "LCD_OUT")]
    pub out: PathBuf,
    /// Score per query instead of per pair; defaults to the checkpoint's
    /// config.
    #[arg(long, env = "LCD_PER_QUERY")]
    pub per_query: Option<bool>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, env = "LCD_MATRIX")]
    pub matrix: PathBuf,
    #[arg(long, env = "LCD_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Write the per-loss results as JSON.
    #[arg(long, env = "LCD_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Generator settings; benchmark defaults when omitted.
    #[arg(long, env = "LCD_SPEC")]
    pub spec: Option<PathBuf>,
    /// Base training config; benchmark defaults when omitted.
    #[arg(long, env = "LCD_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "airloop", env = "LCD_METHOD")]
    pub method: Method,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1,3,10",
        env = "LCD_LAMBDA1"
    )]
    pub lambda1: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.03,0.1,1",
        env = "LCD_LAMBDA2"
    )]
    pub lambda2: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.2", env = "LCD_MARGIN")]
    pub margin: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,1,2",
        env = "LCD_SEEDS"
    )]
    pub seeds: Vec<u64>,
    #[arg(long, env = "LCD_OUT")]
    pub out: PathBuf,
}

/// Everything a training run produced, with paths relative to the output
/// directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: String,
    pub loss_log: String,
    pub steps: u64,
    pub skipped_steps: u64,
    pub frames: u64,
    pub peak_retained: Retained,
    pub matrix: Option<PerformanceMatrix>,
    pub summary: Option<SummaryReport>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub finished_unix: u64,
    pub train_seconds: f64,
    pub eval_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    rank: usize,
    lambda1: f64,
    lambda2: f64,
    margin: f64,
    ap: f64,
    bwt: f64,
    fwt: f64,
    runs: usize,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on any other error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, cli.seed),
        Command::Label(a) => label(a),
        Command::Train(a) => train(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a, cli.seed),
        Command::Sweep(a) => sweep(a, cli.seed),
    }
}

fn load_structured<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("cannot parse {}", path.display()))
}

fn load_config(path: Option<&Path>, default: TrainConfig) -> anyhow::Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => default,
    })
}

fn gen_synth(a: &GenSynthArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => load_structured(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let synth = generate_synthetic(&spec)?;
    synth
        .materialize(&a.out)
        .with_context(|| format!("cannot write dataset to {}", a.out.display()))?;
    println!(
        "wrote {} environments, {} frames to {}",
        spec.envs,
        synth.manifest.stream_len(),
        a.out.display()
    );
    Ok(())
}

fn label(a: &LabelArgs) -> anyhow::Result<()> {
    let dataset = Dataset::open(&a.manifest)?;
    let envs = &dataset.manifest().environments;
    let selected: Vec<usize> = match &a.env {
        Some(name) => match envs.iter().position(|e| &e.name == name) {
            Some(i) => vec![i],
            None => bail!("no environment named `{name}`"),
        },
        None => (0..envs.len()).collect(),
    };
    let splits: &[Split] = match a.split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::Both => &[Split::Train, Split::Test],
    };
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["env", "seq_a", "idx_a", "seq_b", "idx_b", "label", "siou"])?;
    let mut counts = [0usize; 3];
    for &env in &selected {
        let spec = &envs[env];
        for &split in splits {
            let rule = match split {
                Split::Train => &spec.rule,
                Split::Test => spec.eval_rule(),
            };
            let frames = dataset.frames(env, split)?;
            for (i, fa) in frames.iter().enumerate() {
                for fb in &frames[i + 1..] {
                    let (l, s) = classify_pair_detailed(&fa.meta, &fb.meta, rule)?;
                    counts[match l {
                        Label::Positive => 0,
                        Label::Negative => 1,
                        Label::Ambiguous => 2,
                    }] += 1;
                    w.write_record([
                        spec.name.clone(),
                        fa.meta.sequence.to_string(),
                        fa.meta.index.to_string(),
                        fb.meta.sequence.to_string(),
                        fb.meta.index.to_string(),
                        l.to_string(),
                        s.map(|v| v.to_string()).unwrap_or_default(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    println!(
        "{} positive, {} negative, {} ambiguous pairs",
        counts[0], counts[1], counts[2]
    );
    Ok(())
}

fn train(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut config = load_config(a.config.as_deref(), TrainConfig::default())?;
    if let Some(m) = a.method {
        config.method = m;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let dataset = Dataset::open(&a.manifest)?;
    let start = Instant::now();
    let summary = run(
        &dataset,
        &config,
        &RunOptions {
            out_dir: a.out.clone(),
            resume: a.resume.clone(),
            access_log: a.access_log,
        },
    )?;
    let train_seconds = start.elapsed().as_secs_f64();
    fs::write(a.out.join(CONFIG_SNAPSHOT), config.to_toml()?)?;

    let (matrix, eval_seconds) = if a.evaluate {
        let start = Instant::now();
        let model = DescriptorModel::new(config.model.clone(), config.seed)?;
        let params = boundary_checkpoints(&a.out, dataset.num_environments())?
            .iter()
            .map(|c| c.params().map(<[f64]>::to_vec))
            .collect::<crate::Result<Vec<_>>>()?;
        let m = build_performance_matrix(&dataset, &model, &params, config.eval.per_query)?;
        (Some(m), Some(start.elapsed().as_secs_f64()))
    } else {
        (None, None)
    };
    let relative = |p: &Path| p.strip_prefix(&a.out).unwrap_or(p).display().to_string();
    let report = RunReport {
        config_hash: config.hash(),
        seed: config.seed,
        checkpoints: summary
            .boundary_checkpoints
            .iter()
            .map(|p| relative(p))
            .collect(),
        final_checkpoint: relative(&summary.final_checkpoint),
        loss_log: LOSS_LOG.to_string(),
        steps: summary.steps,
        skipped_steps: summary.skipped,
        frames: summary.frames,
        peak_retained: summary.peak_retained,
        summary: matrix.as_ref().map(SummaryReport::new),
        matrix,
        timing: Timing {
            finished_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            train_seconds,
            eval_seconds,
        },
        config,
    };
    fs::write(
        a.out.join(RUN_REPORT),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{} steps ({} skipped) over {} frames; checkpoints in {}",
        report.steps,
        report.skipped_steps,
        report.frames,
        a.out.display()
    );
    if let Some(s) = &report.summary {
        print_summary(s);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let dataset = Dataset::open(&a.manifest)?;
    let ckpts = boundary_checkpoints(&a.checkpoints, dataset.num_environments())?;
    let config = &ckpts[0].header.config;
    let model = DescriptorModel::new(config.model.clone(), config.seed)?;
    let params = ckpts
        .iter()
        .map(|c| c.params().map(<[f64]>::to_vec))
        .collect::<crate::Result<Vec<_>>>()?;
    let per_query = a.per_query.unwrap_or(config.eval.per_query);
    let matrix = build_performance_matrix(&dataset, &model, &params, per_query)?;
    matrix.write_csv(&a.out)?;
    println!(
        "wrote {}x{} matrix to {}",
        matrix.size(),
        matrix.size(),
        a.out.display()
    );
    Ok(())
}

fn print_summary(s: &SummaryReport) {
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    println!("AP {:.4}  BWT {}  FWT {}", s.ap, fmt(s.bwt), fmt(s.fwt));
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let matrix = PerformanceMatrix::read_csv(&a.matrix)?;
    let summary = SummaryReport::new(&matrix);
    summary.save(&a.out)?;
    print_summary(&summary);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let report = run_gradcheck(seed.unwrap_or(0))?;
    println!(
        "{} parameters, h = {:e}, tolerance {:e}",
        report.params, report.step, report.tolerance
    );
    for c in &report.cases {
        println!(
            "{:<12} max rel error {:.3e} at {:>5}  {}",
            c.name,
            c.max_rel_error,
            c.worst_index,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn sweep(a: &SweepArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let base = ExperimentConfig::default();
    let synth = match &a.spec {
        Some(p) => load_structured(p)?,
        None => base.synth.clone(),
    };
    let train = load_config(a.config.as_deref(), base.train.clone())?;
    let seeds = match seed {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    let mut rows = Vec::new();
    for &lambda1 in &a.lambda1 {
        for &lambda2 in &a.lambda2 {
            for &margin in &a.margin {
                let mut train = train.clone();
                train.loss.lambda1 = lambda1;
                train.loss.lambda2 = lambda2;
                train.loss.margin = margin;
                train.validate()?;
                let cfg = ExperimentConfig {
                    synth: synth.clone(),
                    train,
                    seeds: seeds.clone(),
                    methods: vec![a.method],
                };
                let runs = run_experiment(&cfg)?;
                let m = method_means(&runs)[0];
                log::info!(
                    "lambda1 {lambda1} lambda2 {lambda2} margin {margin}: AP {:.4} BWT {:.4}",
                    m.ap,
                    m.bwt
                );
                rows.push(SweepRow {
                    rank: 0,
                    lambda1,
                    lambda2,
                    margin,
                    ap: m.ap,
                    bwt: m.bwt,
                    fwt: m.fwt,
                    runs: m.runs,
                });
            }
        }
    }
    rows.sort_by(|x, y| y.ap.total_cmp(&x.ap).then(y.bwt.total_cmp(&x.bwt)));
    let mut w = csv::Writer::from_path(&a.out)?;
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
        w.serialize(&*row)?;
    }
    w.flush()?;
    if let Some(best) = rows.first() {
        println!(
            "best: lambda1 {} lambda2 {} margin {} (AP {:.4}, BWT {:.4})",
            best.lambda1, best.lambda2, best.margin, best.ap, best.bwt
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(dispatch(["lifelong-lcd"]), 2);
        assert_eq!(dispatch(["lifelong-lcd", "frobnicate"]), 2);
        assert_eq!(dispatch(["lifelong-lcd", "report", "--bogus"]), 2);
        assert_eq!(dispatch(["lifelong-lcd", "--help"]), 0);
    }

    #[test]
    fn module_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.csv");
        let out = dir.path().join("s.json");
        let code = dispatch([
            "lifelong-lcd".as_ref(),
            "report".as_ref(),
            "--matrix".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn method_flag_parses() {
        let cli = Cli::try_parse_from([
            "lifelong-lcd",
            "--seed",
            "4",
            "train",
            "--manifest",
            "m.json",
            "--method",
            "rkd",
            "--out",
            "o",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(4));
        match cli.command {
            Command::Train(t) => assert_eq!(t.method, Some(Method::Rkd)),
            other => panic!("{other:?}"),
        }
    }
}
