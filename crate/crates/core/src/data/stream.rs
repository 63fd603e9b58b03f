use crate::data::source::{Dataset, Split};
use crate::error::Result;
use crate::frame::{Frame, FrameKey};

#[derive(Debug, Clone)]
pub enum StreamEvent {
    Frame(Frame),
    /// Emitted right after the last frame of environment `env` (0-based).
    EndOfEnvironment {
        env: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Frame { env: u32, seq: u32, ordinal: u32 },
    End { env: u32 },
}

/// Single-consumer iterator over the training stream: environments in
/// manifest order, each followed by an end marker. Every position is
/// produced at most once per iterator.
pub struct Stream<'a> {
    dataset: &'a Dataset,
    plan: Vec<Step>,
    position: usize,
    consumed: Vec<FrameKey>,
}

impl<'a> Stream<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self::with_epochs(dataset, 1)
    }

    /// Repeats each environment's frames `epochs` times before its end
    /// marker.
    pub fn with_epochs(dataset: &'a Dataset, epochs: usize) -> Self {
        let mut plan = Vec::new();
        for (e, env) in dataset.manifest().environments.iter().enumerate() {
            for _ in 0..epochs.max(1) {
                for (s, seq) in env.train.iter().enumerate() {
                    for f in 0..seq.frames.len() {
                        plan.push(Step::Frame {
                            env: e as u32,
                            seq: s as u32,
                            ordinal: f as u32,
                        });
                    }
                }
            }
            plan.push(Step::End { env: e as u32 });
        }
        Self {
            dataset,
            plan,
            position: 0,
            consumed: Vec::new(),
        }
    }

    /// Skips ahead to `position` without reading the skipped frames.
    pub fn starting_at(mut self, position: usize) -> Self {
        self.position = position.min(self.plan.len());
        self
    }

    /// Events consumed so far, markers included.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Total events, markers included.
    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    /// Keys of frames read by this iterator, in read order.
    pub fn consumed(&self) -> &[FrameKey] {
        &self.consumed
    }
}

impl Iterator for Stream<'_> {
    type Item = Result<StreamEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        let step = *self.plan.get(self.position)?;
        self.position += 1;
        Some(match step {
            Step::End { env } => Ok(StreamEvent::EndOfEnvironment { env }),
            Step::Frame { env, seq, ordinal } => {
                let frame = self.dataset.load_frame(
                    env as usize,
                    Split::Train,
                    seq as usize,
                    ordinal as usize,
                );
                if let Ok(f) = &frame {
                    self.consumed.push(f.key());
                }
                frame.map(StreamEvent::Frame)
            }
        })
    }
}
