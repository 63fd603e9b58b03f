//! Single-pass lifelong training over an ordered stream of environments.
//!
//! Every arriving frame enters the memory buffer, one or more triplets are
//! drawn from it and one momentum-SGD step is taken on the method's
//! combined objective. Relational importance is accumulated from the same
//! triplets. At an environment boundary the importance is finalized, the
//! parameters become the next teacher and the buffer is emptied.

pub mod checkpoint;
pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Split, Stream, StreamEvent};
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameKey};
use crate::geometry::LabelRule;
use crate::losses::{
    combined_loss, kd_on, penalty_on, rkd_on, triplet_on, ImportanceTrack, ImportanceVector,
    LifelongState,
};
use crate::memory::{MemoryBuffer, Triplet};
use crate::model::{forward_with, gram_on, DescriptorModel, GramTriplet};

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::{
    Distillation, EvalSection, ImportanceSection, LossSection, MemorySection, Method, OptimSection,
    TrainConfig,
};

/// Stream of the sampling RNG; the model initializer uses stream 0.
const SAMPLER_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    /// Optimizer steps taken so far, this one included.
    pub step: u64,
    /// 1-based environment.
    pub env: u32,
    /// No triplet could be drawn; parameters were left unchanged.
    pub skipped: bool,
    pub triplet: f64,
    pub reg: f64,
    pub distill: f64,
    pub total: f64,
}

/// What the trainer holds on to between frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Retained {
    pub frames: usize,
    /// Floats in parameters, momentum, teacher and importance arrays.
    pub floats: usize,
}

struct StepOutcome {
    gradient: Vec<f64>,
    rmas: Vec<Vec<f64>>,
    mas: Vec<Vec<f64>>,
    triplet: f64,
    reg: f64,
    distill: f64,
    total: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: DescriptorModel,
    velocity: Vec<f64>,
    state: LifelongState,
    buffer: MemoryBuffer,
    rules: Vec<LabelRule>,
    rng: ChaCha8Rng,
    step: u64,
    position: u64,
    env_frames: u64,
}

impl Trainer {
    /// Fresh trainer for a stream whose environments use `rules`.
    pub fn new(config: TrainConfig, rules: Vec<LabelRule>) -> Result<Self> {
        config.validate()?;
        let first = *rules
            .first()
            .ok_or_else(|| Error::InvalidArgument("stream has no environments".into()))?;
        let model = DescriptorModel::new(config.model.clone(), config.seed)?;
        let n = model.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self {
            buffer: MemoryBuffer::new(config.memory.capacity, first)?,
            state: LifelongState::new(n, config.method == Method::Mas),
            velocity: vec![0.0; n],
            config,
            model,
            rules,
            rng,
            step: 0,
            position: 0,
            env_frames: 0,
        })
    }

    pub fn for_dataset(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        Self::new(config, dataset.manifest().rules())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DescriptorModel {
        &self.model
    }

    pub fn params(&self) -> &[f64] {
        self.model.params()
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn state(&self) -> &LifelongState {
        &self.state
    }

    pub fn buffer(&self) -> &MemoryBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Stream events consumed, end markers included.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn retained(&self) -> Retained {
        let track = |t: &ImportanceTrack| {
            t.running.len() + t.prior.as_ref().map_or(0, ImportanceVector::len)
        };
        Retained {
            frames: self.buffer.len(),
            floats: self.model.num_params()
                + self.velocity.len()
                + self.state.teacher.as_ref().map_or(0, Vec::len)
                + track(&self.state.rmas)
                + self.state.mas.as_ref().map_or(0, track),
        }
    }

    /// Inserts `frame`, then takes one optimizer step when a triplet is
    /// available.
    pub fn train_step(&mut self, frame: Frame) -> Result<StepReport> {
        let current = self.state.env - 1;
        if frame.env() != current {
            return Err(Error::StreamNotSequential(format!(
                "frame {} of environment {} arrived while training environment {}",
                frame.key(),
                frame.env() + 1,
                self.state.env
            )));
        }
        self.buffer.insert(frame)?;
        self.env_frames += 1;
        let mut triplets = Vec::with_capacity(self.config.train.triplets_per_step);
        for _ in 0..self.config.train.triplets_per_step {
            match self.buffer.sample_triplet(&mut self.rng) {
                Some(t) => triplets.push(t),
                None => break,
            }
        }
        if triplets.is_empty() {
            return Ok(StepReport {
                step: self.step,
                env: self.state.env,
                skipped: true,
                triplet: 0.0,
                reg: 0.0,
                distill: 0.0,
                total: 0.0,
            });
        }
        let out = self.evaluate(&triplets)?;
        for g in &out.rmas {
            self.state.rmas.running.accumulate(g)?;
        }
        if let Some(mas) = self.state.mas.as_mut() {
            for g in &out.mas {
                mas.running.accumulate(g)?;
            }
        }
        let (lr, mu) = (self.config.train.learning_rate, self.config.train.momentum);
        for ((theta, v), g) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&out.gradient)
        {
            *v = mu * *v + g;
            *theta -= lr * *v;
        }
        self.state.steps += 1;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            env: self.state.env,
            skipped: false,
            triplet: out.triplet,
            reg: out.reg,
            distill: out.distill,
            total: out.total,
        })
    }

    fn evaluate(&self, triplets: &[Triplet]) -> Result<StepOutcome> {
        let cfg = &self.config;
        let model = &self.model;
        let env = self.state.env;
        let teacher = self.state.teacher.as_deref().filter(|_| env >= 2);
        let distill_kind = cfg.method.distillation().filter(|_| teacher.is_some());
        let n = triplets.len() as f64;

        let mut tape = Tape::new();
        let theta = model.params_on(&mut tape, true);
        let mut trip_terms = Vec::with_capacity(triplets.len());
        let mut distill_terms = Vec::new();
        let mut grams = Vec::with_capacity(triplets.len());
        let mut raws = Vec::new();
        for t in triplets {
            let images = [&*t.anchor.image, &*t.positive.image, &*t.negative.image];
            let mut desc = [theta; 3];
            for (k, image) in images.iter().enumerate() {
                let vars = model.record(&mut tape, theta, image)?;
                desc[k] = vars.descriptor;
                raws.push(vars.raw);
            }
            tape.set_scope("loss.triplet");
            let gram = gram_on(&mut tape, desc);
            let s_ap = tape.slice(gram, 1, 1);
            let s_an = tape.slice(gram, 2, 1);
            trip_terms.push(triplet_on(&mut tape, s_ap, s_an, cfg.loss.margin));
            grams.push(gram);
            if let (Some(kind), Some(teacher)) = (distill_kind, teacher) {
                let td = images
                    .iter()
                    .map(|img| forward_with(model, teacher, img))
                    .collect::<Result<Vec<_>>>()?;
                tape.set_scope("loss.distill");
                distill_terms.push(match kind {
                    Distillation::Relational => {
                        let tg = GramTriplet::from_descriptors([&td[0], &td[1], &td[2]])?;
                        rkd_on(&mut tape, gram, &tg.entries())
                    }
                    Distillation::Descriptor => kd_on(&mut tape, desc, [&td[0], &td[1], &td[2]]),
                });
            }
        }
        let mean = |tape: &mut Tape, terms: &[Var]| -> Option<Var> {
            let first = *terms.first()?;
            let sum = terms[1..].iter().fold(first, |acc, &t| tape.add(acc, t));
            Some(tape.scale(sum, 1.0 / n))
        };
        tape.set_scope("loss.total");
        let triplet = mean(&mut tape, &trip_terms).expect("at least one triplet");
        let distill = mean(&mut tape, &distill_terms);
        let reg = match (cfg.method.penalty(), teacher) {
            (Some(variant), Some(anchor)) => self
                .state
                .importance(variant)
                .map(|omega| penalty_on(&mut tape, theta, anchor, omega.values())),
            _ => None,
        };
        let mut total = triplet;
        if env >= 2 {
            if let Some(r) = reg.filter(|_| cfg.loss.lambda1 != 0.0) {
                let t = tape.scale(r, cfg.loss.lambda1);
                total = tape.add(total, t);
            }
            if let Some(d) = distill.filter(|_| cfg.loss.lambda2 != 0.0) {
                let t = tape.scale(d, cfg.loss.lambda2);
                total = tape.add(total, t);
            }
        }
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar_value(v));
        let (l_trip, l_reg, l_distill) = (tape.scalar_value(triplet), value(reg), value(distill));
        let l_total = combined_loss(
            l_trip,
            l_reg,
            l_distill,
            cfg.loss.lambda1,
            cfg.loss.lambda2,
            env,
        );
        if !tape.scalar_value(total).is_finite() {
            tape.check_finite()?;
            return Err(Error::NonFinite {
                layer: "loss.total".into(),
            });
        }
        let gradient = tape.backward(total)?.wrt(&tape, theta);

        let squared = |g: Vec<f64>| g.into_iter().map(|v| v * v).collect::<Vec<_>>();
        let mut rmas = Vec::with_capacity(grams.len());
        for &gram in &grams {
            let root = tape.norm(gram);
            rmas.push(squared(tape.backward(root)?.wrt(&tape, theta)));
        }
        let mut mas = Vec::new();
        if self.state.mas.is_some() {
            for chunk in raws.chunks(3) {
                let mut acc = vec![0.0; model.num_params()];
                for &raw in chunk {
                    let root = tape.norm(raw);
                    for (a, g) in acc.iter_mut().zip(tape.backward(root)?.wrt(&tape, theta)) {
                        *a += g * g / chunk.len() as f64;
                    }
                }
                mas.push(acc);
            }
        }
        Ok(StepOutcome {
            gradient,
            rmas,
            mas,
            triplet: l_trip,
            reg: l_reg,
            distill: l_distill,
            total: l_total,
        })
    }

    /// Closes the current environment. Returns `false` (a no-op) when no
    /// frame arrived since the previous boundary.
    pub fn finish_environment(&mut self) -> bool {
        if self.env_frames == 0 {
            warn!(
                "environment {} finished twice or without frames; ignoring",
                self.state.env
            );
            return false;
        }
        self.state
            .finish_environment(self.model.params(), self.config.rmas.cumulative);
        let next = self.rules.get(self.state.env as usize - 1).copied();
        self.buffer.clear(next);
        if self.config.train.reset_momentum {
            self.velocity.iter_mut().for_each(|v| *v = 0.0);
        }
        self.env_frames = 0;
        true
    }

    /// Consumes the rest of the dataset's stream, starting from the
    /// trainer's recorded position.
    pub fn run_stream(&mut self, dataset: &Dataset, hooks: &mut dyn RunHooks) -> Result<()> {
        if dataset.manifest().rules() != self.rules {
            return Err(Error::InvalidArgument(
                "dataset label rules differ from the trainer's".into(),
            ));
        }
        let mut stream = Stream::with_epochs(dataset, self.config.train.epochs_per_env)
            .starting_at(self.position as usize);
        while let Some(event) = stream.next() {
            match event? {
                StreamEvent::Frame(frame) => {
                    let key = frame.key();
                    hooks.on_frame(key)?;
                    let report = match self.train_step(frame) {
                        Ok(r) => r,
                        Err(e) => {
                            hooks.on_failure(self, &e);
                            return Err(e);
                        }
                    };
                    self.position += 1;
                    if !report.skipped && report.step % 500 == 0 {
                        debug!(
                            "step {} env {} triplet {:.4} reg {:.4} distill {:.4}",
                            report.step, report.env, report.triplet, report.reg, report.distill
                        );
                    }
                    hooks.on_step(self, &report)?;
                }
                StreamEvent::EndOfEnvironment { env } => {
                    self.position += 1;
                    if env + 1 != self.state.env {
                        return Err(Error::StreamNotSequential(format!(
                            "end of environment {} while training environment {}",
                            env + 1,
                            self.state.env
                        )));
                    }
                    self.finish_environment();
                    info!("finished environment {} after {} steps", env + 1, self.step);
                    hooks.on_boundary(self, env + 1)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        use checkpoint::*;
        let cfg = self.config.clone();
        let counts = |t: &ImportanceTrack| TrackCounts {
            running: t.running.sample_count(),
            prior: t.prior.as_ref().map(ImportanceVector::sample_count),
            blended: t.blended,
        };
        let mut arrays = vec![
            ("theta".to_string(), self.model.params().to_vec()),
            ("velocity".to_string(), self.velocity.clone()),
        ];
        if let Some(t) = &self.state.teacher {
            arrays.push(("teacher".into(), t.clone()));
        }
        let mut push_track = |name: &str, t: &ImportanceTrack| {
            arrays.push((format!("{name}.running"), t.running.values().to_vec()));
            if let Some(p) = &t.prior {
                arrays.push((format!("{name}.prior"), p.values().to_vec()));
            }
        };
        push_track("rmas", &self.state.rmas);
        if let Some(m) = &self.state.mas {
            push_track("mas", m);
        }
        Checkpoint {
            header: CheckpointHeader {
                config_hash: cfg.hash(),
                config: cfg,
                rng: RngState {
                    seed: self.rng.get_seed(),
                    stream: self.rng.get_stream(),
                    word_pos: self.rng.get_word_pos().to_string(),
                },
                buffer: BufferState {
                    keys: self.buffer.slots().iter().map(Frame::key).collect(),
                    next_slot: self.buffer.next_slot(),
                },
                counters: Counters {
                    step: self.step,
                    position: self.position,
                    env_frames: self.env_frames,
                    env: self.state.env,
                    env_steps: self.state.steps,
                    rmas: counts(&self.state.rmas),
                    mas: self.state.mas.as_ref().map(counts),
                },
            },
            arrays,
        }
    }

    /// Rebuilds a trainer; buffer frames are re-read from `dataset`.
    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Self> {
        let h = &ckpt.header;
        let config = h.config.clone();
        config.validate()?;
        let rules = dataset.manifest().rules();
        let c = &h.counters;
        if c.env == 0 || c.env as usize > rules.len() + 1 {
            return Err(Error::corrupt(format!(
                "checkpoint environment {} outside a {}-environment stream",
                c.env,
                rules.len()
            )));
        }
        let model = DescriptorModel::from_params(config.model.clone(), ckpt.params()?.to_vec())?;
        let n = model.num_params();
        let sized = |name: &str| -> Result<Vec<f64>> {
            let v = ckpt.require(name)?;
            if v.len() != n {
                return Err(Error::corrupt(format!(
                    "array `{name}` has {} entries, expected {n}",
                    v.len()
                )));
            }
            Ok(v.to_vec())
        };
        let track = |name: &str, counts: &checkpoint::TrackCounts| -> Result<ImportanceTrack> {
            let running =
                ImportanceVector::from_values(sized(&format!("{name}.running"))?, counts.running)?;
            let prior = match counts.prior {
                Some(k) => Some(ImportanceVector::from_values(
                    sized(&format!("{name}.prior"))?,
                    k,
                )?),
                None => None,
            };
            Ok(ImportanceTrack {
                prior,
                running,
                blended: counts.blended,
            })
        };
        let state = LifelongState {
            teacher: ckpt
                .array("teacher")
                .map(|_| sized("teacher"))
                .transpose()?,
            rmas: track("rmas", &c.rmas)?,
            mas: c.mas.as_ref().map(|m| track("mas", m)).transpose()?,
            env: c.env,
            steps: c.env_steps,
        };
        let rule = rules[(c.env as usize - 1).min(rules.len() - 1)];
        let mut buffer = MemoryBuffer::new(config.memory.capacity, rule)?;
        let frames = h
            .buffer
            .keys
            .iter()
            .map(|k| {
                dataset.load_frame(
                    k.env as usize,
                    Split::Train,
                    k.seq as usize,
                    k.ordinal as usize,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        buffer.restore(frames, h.buffer.next_slot)?;
        let mut rng = ChaCha8Rng::from_seed(h.rng.seed);
        rng.set_stream(h.rng.stream);
        rng.set_word_pos(
            h.rng
                .word_pos
                .parse()
                .map_err(|_| Error::corrupt("invalid RNG word position"))?,
        );
        Ok(Self {
            velocity: sized("velocity")?,
            config,
            model,
            state,
            buffer,
            rules,
            rng,
            step: c.step,
            position: c.position,
            env_frames: c.env_frames,
        })
    }
}

/// Observers of [`Trainer::run_stream`].
pub trait RunHooks {
    fn on_frame(&mut self, _key: FrameKey) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _trainer: &Trainer, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    /// Called after the boundary bookkeeping of 1-based environment `env`.
    fn on_boundary(&mut self, _trainer: &Trainer, _env: u32) -> Result<()> {
        Ok(())
    }

    fn on_failure(&mut self, _trainer: &Trainer, _error: &Error) {}
}

impl RunHooks for () {}

pub fn boundary_checkpoint_name(env: u32) -> String {
    format!("env_{env}.ckpt")
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOSS_LOG: &str = "losses.csv";
pub const ACCESS_LOG: &str = "access.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Record every frame read in `access.csv`.
    pub access_log: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub boundary_checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub skipped: u64,
    pub frames: u64,
    pub peak_retained: Retained,
    pub params: Vec<f64>,
}

struct FileHooks {
    out_dir: PathBuf,
    losses: csv::Writer<File>,
    access: Option<BufWriter<File>>,
    checkpoint_every: u64,
    boundaries: Vec<PathBuf>,
    skipped: u64,
    frames: u64,
    peak: Retained,
}

impl RunHooks for FileHooks {
    fn on_frame(&mut self, key: FrameKey) -> Result<()> {
        self.frames += 1;
        if let Some(a) = self.access.as_mut() {
            writeln!(a, "{},{},{}", key.env, key.seq, key.ordinal)?;
        }
        Ok(())
    }

    fn on_step(&mut self, trainer: &Trainer, r: &StepReport) -> Result<()> {
        let now = trainer.retained();
        self.peak.frames = self.peak.frames.max(now.frames);
        self.peak.floats = self.peak.floats.max(now.floats);
        if r.skipped {
            self.skipped += 1;
            return Ok(());
        }
        self.losses.write_record([
            r.step.to_string(),
            r.env.to_string(),
            r.triplet.to_string(),
            r.reg.to_string(),
            r.distill.to_string(),
            r.total.to_string(),
        ])?;
        if self.checkpoint_every > 0 && r.step.is_multiple_of(self.checkpoint_every) {
            trainer
                .to_checkpoint()
                .save(&self.out_dir.join(format!("step_{}.ckpt", r.step)))?;
        }
        Ok(())
    }

    fn on_boundary(&mut self, trainer: &Trainer, env: u32) -> Result<()> {
        let path = self.out_dir.join(boundary_checkpoint_name(env));
        trainer.to_checkpoint().save(&path)?;
        self.losses.flush()?;
        self.boundaries.push(path);
        Ok(())
    }

    fn on_failure(&mut self, trainer: &Trainer, error: &Error) {
        let path = self.out_dir.join("diagnostic.ckpt");
        let note = self.out_dir.join("diagnostic.txt");
        let saved = trainer.to_checkpoint().save(&path);
        let _ = fs::write(
            &note,
            format!(
                "error: {error}\nstep: {}\nposition: {}\nenvironment: {}\n",
                trainer.steps(),
                trainer.position(),
                trainer.state().env
            ),
        );
        match saved {
            Ok(()) => warn!(
                "training aborted; state before the failing step saved to {}",
                path.display()
            ),
            Err(e) => warn!("training aborted and the diagnostic snapshot failed: {e}"),
        }
    }
}

/// Trains over `dataset`, writing the loss log and boundary checkpoints to
/// `options.out_dir`.
pub fn run(dataset: &Dataset, config: &TrainConfig, options: &RunOptions) -> Result<RunSummary> {
    fs::create_dir_all(&options.out_dir)?;
    let mut trainer = match &options.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.header.config_hash != config.hash() {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(&ckpt, dataset)?
        }
        None => Trainer::for_dataset(config.clone(), dataset)?,
    };
    let resuming = options.resume.is_some();
    let loss_path = options.out_dir.join(LOSS_LOG);
    let append = resuming && loss_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&loss_path)?;
    let mut losses = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if !append {
        losses.write_record(["step", "env", "L_triplet", "L_reg", "L_kd", "total"])?;
    }
    let access = if options.access_log {
        let path = options.out_dir.join(ACCESS_LOG);
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(resuming)
            .truncate(!resuming)
            .open(path)?;
        Some(BufWriter::new(f))
    } else {
        None
    };
    let mut hooks = FileHooks {
        out_dir: options.out_dir.clone(),
        losses,
        access,
        checkpoint_every: config.train.checkpoint_every,
        boundaries: Vec::new(),
        skipped: 0,
        frames: 0,
        peak: trainer.retained(),
    };
    trainer.run_stream(dataset, &mut hooks)?;
    hooks.losses.flush()?;
    if let Some(a) = hooks.access.as_mut() {
        a.flush()?;
    }
    let final_checkpoint = options.out_dir.join(FINAL_CHECKPOINT);
    trainer.to_checkpoint().save(&final_checkpoint)?;
    Ok(RunSummary {
        boundary_checkpoints: hooks.boundaries,
        final_checkpoint,
        steps: trainer.steps(),
        skipped: hooks.skipped,
        frames: hooks.frames,
        peak_retained: hooks.peak,
        params: trainer.params().to_vec(),
    })
}

/// Boundary checkpoints `env_1.ckpt ..= env_{count}.ckpt` inside `dir`.
pub fn boundary_checkpoints(dir: &Path, count: usize) -> Result<Vec<Checkpoint>> {
    (1..=count as u32)
        .map(|t| Checkpoint::load(&dir.join(boundary_checkpoint_name(t))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::frame::{FrameMeta, ImageTensor};
    use crate::losses::PenaltyVariant;
    use crate::model::{ConvLayer, ModelConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input: [3, 8, 8],
            conv: vec![ConvLayer {
                channels: 4,
                kernel: 3,
                stride: 2,
            }],
            activation: Activation::Softplus,
            gem_p: 1.0,
            input_offset: 0.5,
            hidden: 8,
            dim: 8,
        }
    }

    fn config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            model: tiny_model(),
            memory: config::MemorySection { capacity: 16 },
            ..TrainConfig::default()
        }
    }

    fn dataset() -> Dataset {
        generate_synthetic(&SynthSpec::small())
            .unwrap()
            .into_dataset()
            .unwrap()
    }

    fn train(method: Method, cfg: Option<TrainConfig>) -> Trainer {
        let ds = dataset();
        let mut t = Trainer::for_dataset(cfg.unwrap_or_else(|| config(method)), &ds).unwrap();
        t.run_stream(&ds, &mut ()).unwrap();
        t
    }

    #[test]
    fn first_frame_step_is_skipped() {
        let ds = dataset();
        let mut t = Trainer::for_dataset(config(Method::Airloop), &ds).unwrap();
        let before = t.params().to_vec();
        let frame = ds.load_frame(0, Split::Train, 0, 0).unwrap();
        let r = t.train_step(frame).unwrap();
        assert!(r.skipped);
        assert_eq!(t.params(), &before[..]);
    }

    #[test]
    fn zero_weights_reduce_airloop_to_finetune() {
        let mut cfg = config(Method::Airloop);
        cfg.loss.lambda1 = 0.0;
        cfg.loss.lambda2 = 0.0;
        let a = train(Method::Airloop, Some(cfg));
        let b = train(Method::Finetune, None);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn sgd_update_matches_closed_form() {
        let ds = dataset();
        let cfg = config(Method::Finetune);
        let mut t = Trainer::for_dataset(cfg.clone(), &ds).unwrap();
        let mut theta = t.params().to_vec();
        let mut v = vec![0.0; theta.len()];
        for i in 0..20 {
            let frame = ds.load_frame(0, Split::Train, 0, i).unwrap();
            let mut probe = t.clone();
            let triplet = {
                probe.buffer.insert(frame.clone()).unwrap();
                probe.buffer.sample_triplet(&mut probe.rng)
            };
            let r = t.train_step(frame).unwrap();
            if let Some(tr) = triplet {
                let g = probe.evaluate(&[tr]).unwrap().gradient;
                for k in 0..theta.len() {
                    v[k] = cfg.train.momentum * v[k] + g[k];
                    theta[k] -= cfg.train.learning_rate * v[k];
                }
                assert!(!r.skipped);
            }
            assert_eq!(t.params(), &theta[..]);
        }
    }

    #[test]
    fn teacher_is_snapshotted_at_the_boundary() {
        let ds = dataset();
        let mut t = Trainer::for_dataset(config(Method::Airloop), &ds).unwrap();
        let n = ds.manifest().environments[0].train_len();
        for i in 0..n {
            t.train_step(ds.load_frame(0, Split::Train, 0, i).unwrap())
                .unwrap();
        }
        let env1 = t.params().to_vec();
        assert!(t.finish_environment());
        assert_eq!(t.state().teacher.as_deref(), Some(&env1[..]));
        assert_eq!(t.state().env, 2);
        assert!(t.buffer().is_empty());
        assert!(!t.finish_environment());
        assert_eq!(t.state().env, 2);
    }

    #[test]
    fn finalized_importance_equals_mean_of_logged_steps() {
        let ds = dataset();
        let mut t = Trainer::for_dataset(config(Method::Rmas), &ds).unwrap();
        let mut logged: Vec<Vec<f64>> = Vec::new();
        let n = ds.manifest().environments[0].train_len();
        for i in 0..n {
            let frame = ds.load_frame(0, Split::Train, 0, i).unwrap();
            let mut probe = t.clone();
            probe.buffer.insert(frame.clone()).unwrap();
            if let Some(tr) = probe.buffer.sample_triplet(&mut probe.rng) {
                let images = [&*tr.anchor.image, &*tr.positive.image, &*tr.negative.image];
                logged.push(crate::losses::rmas_importance_step(t.model(), images).unwrap());
            }
            t.train_step(frame).unwrap();
        }
        t.finish_environment();
        let omega = t.state().importance(PenaltyVariant::Rmas).unwrap();
        assert_eq!(omega.sample_count(), logged.len() as u64);
        for k in 0..omega.len() {
            let mean = logged.iter().map(|g| g[k]).sum::<f64>() / logged.len() as f64;
            let got = omega.values()[k];
            assert!(
                (got - mean).abs() <= 1e-12 * mean.abs().max(1e-12),
                "{k}: {got} vs {mean}"
            );
        }
    }

    #[test]
    fn out_of_order_environment_rejected() {
        let ds = dataset();
        let mut t = Trainer::for_dataset(config(Method::Finetune), &ds).unwrap();
        let frame = ds.load_frame(1, Split::Train, 0, 0).unwrap();
        let err = t.train_step(frame).unwrap_err().to_string();
        assert!(err.contains("stream not sequential"), "{err}");
    }

    #[test]
    fn non_finite_image_aborts() {
        let ds = dataset();
        let mut t = Trainer::for_dataset(config(Method::Finetune), &ds).unwrap();
        for i in 0..5 {
            t.train_step(ds.load_frame(0, Split::Train, 0, i).unwrap())
                .unwrap();
        }
        t.model.params_mut()[0] = f64::NAN;
        let frame = ds.load_frame(0, Split::Train, 0, 5).unwrap();
        let err = t.train_step(frame).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn every_method_trains_with_finite_losses() {
        for m in Method::ALL {
            let t = train(m, None);
            assert!(t.params().iter().all(|v| v.is_finite()), "{m}");
            assert_eq!(t.state().env, 3);
        }
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let ds = dataset();
        let cfg = config(Method::Airloop);
        let mut a = Trainer::for_dataset(cfg.clone(), &ds).unwrap();
        let mut b = a.clone();
        a.run_stream(&ds, &mut ()).unwrap();

        struct StopAt(u64);
        impl RunHooks for StopAt {
            fn on_step(&mut self, _t: &Trainer, r: &StepReport) -> Result<()> {
                if r.step == self.0 {
                    Err(Error::InvalidArgument("stop".into()))
                } else {
                    Ok(())
                }
            }
        }
        assert!(b.run_stream(&ds, &mut StopAt(70)).is_err());
        let ckpt = Checkpoint::from_bytes(&b.to_checkpoint().to_bytes().unwrap()).unwrap();
        let mut c = Trainer::from_checkpoint(&ckpt, &ds).unwrap();
        c.run_stream(&ds, &mut ()).unwrap();
        assert_eq!(a.params(), c.params());
        assert_eq!(a.velocity(), c.velocity());
    }

    #[test]
    fn retained_state_is_bounded_by_the_buffer() {
        let ds = dataset();
        let mut t = Trainer::for_dataset(config(Method::Airloop), &ds).unwrap();
        struct Peak(usize);
        impl RunHooks for Peak {
            fn on_step(&mut self, t: &Trainer, _r: &StepReport) -> Result<()> {
                self.0 = self.0.max(t.retained().frames);
                Ok(())
            }
        }
        let mut peak = Peak(0);
        t.run_stream(&ds, &mut peak).unwrap();
        assert_eq!(peak.0, 16);
    }

    #[test]
    fn frames_from_other_environment_cannot_enter_buffer() {
        let mut meta = FrameMeta::bare(0, "a", "s", 0);
        meta.place = Some(0);
        let f = Frame::new(meta, ImageTensor::filled(3, 8, 8, 0.5).unwrap());
        let mut t =
            Trainer::new(config(Method::Finetune), vec![SynthSpec::small().rule(); 2]).unwrap();
        t.train_step(f.clone()).unwrap();
        t.finish_environment();
        assert!(t.train_step(f).is_err());
    }
}
