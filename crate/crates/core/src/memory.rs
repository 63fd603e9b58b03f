//! Similarity-aware FIFO memory for the current environment.
//!
//! The buffer keeps the `capacity` most recent frames together with a cached
//! ternary relation matrix, so ground-truth-consistent triplets can be drawn
//! from a stream that is only ever seen once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{classify_pair, Label, LabelRule};

/// Anchor re-draws before a sampling attempt gives up.
pub const ANCHOR_RETRIES: usize = 16;

pub const DEFAULT_CAPACITY: usize = 1000;

#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: Frame,
    pub positive: Frame,
    pub negative: Frame,
}

#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    capacity: usize,
    rule: LabelRule,
    slots: Vec<Frame>,
    next_slot: usize,
    /// Row-major `capacity x capacity`; only occupied rows/columns are valid.
    relations: Vec<Label>,
    env: Option<u32>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, rule: LabelRule) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "buffer capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            rule,
            slots: Vec::with_capacity(capacity),
            next_slot: 0,
            relations: vec![Label::Negative; capacity * capacity],
            env: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn rule(&self) -> &LabelRule {
        &self.rule
    }

    pub fn environment(&self) -> Option<u32> {
        self.env
    }

    /// Empties the buffer for a new environment, optionally with a new rule.
    pub fn clear(&mut self, rule: Option<LabelRule>) {
        self.slots.clear();
        self.next_slot = 0;
        self.env = None;
        if let Some(rule) = rule {
            self.rule = rule;
        }
    }

    /// Frame in slot `i` (slot order, not age order).
    pub fn slot(&self, i: usize) -> &Frame {
        &self.slots[i]
    }

    pub fn slots(&self) -> &[Frame] {
        &self.slots
    }

    /// Slot that the next insert overwrites once the buffer is full.
    pub fn next_slot(&self) -> usize {
        self.next_slot
    }

    /// Occupied frames from oldest to newest.
    pub fn frames_by_age(&self) -> impl Iterator<Item = &Frame> {
        let split = if self.slots.len() < self.capacity {
            0
        } else {
            self.next_slot
        };
        self.slots[split..].iter().chain(&self.slots[..split])
    }

    pub fn relation(&self, i: usize, j: usize) -> Label {
        assert!(
            i < self.slots.len() && j < self.slots.len(),
            "slot out of range"
        );
        self.relations[i * self.capacity + j]
    }

    /// Overwrites the oldest slot (or appends while not yet full) and
    /// refreshes that slot's row and column of the relation matrix.
    pub fn insert(&mut self, frame: Frame) -> Result<()> {
        match self.env {
            Some(env) if env != frame.env() => {
                return Err(Error::CrossEnvironmentInsert {
                    buffer: self
                        .slots
                        .first()
                        .map(|f| f.meta.env_name.to_string())
                        .unwrap_or_else(|| env.to_string()),
                    frame: frame.meta.env_name.to_string(),
                })
            }
            _ => {}
        }
        // labels first so a failing rule leaves the buffer untouched
        let slot = self.next_slot;
        let occupied = self.slots.len().max(slot + 1).min(self.capacity);
        let mut row = Vec::with_capacity(occupied);
        for j in 0..occupied {
            row.push(if j == slot {
                Label::Positive
            } else {
                classify_pair(&frame.meta, &self.slots[j].meta, &self.rule)?
            });
        }
        self.env = Some(frame.env());
        if slot < self.slots.len() {
            self.slots[slot] = frame;
        } else {
            self.slots.push(frame);
        }
        for (j, label) in row.into_iter().enumerate() {
            self.relations[slot * self.capacity + j] = label;
            self.relations[j * self.capacity + slot] = label;
        }
        self.next_slot = (slot + 1) % self.capacity;
        Ok(())
    }

    /// Rebuilds a buffer from frames in slot order, as saved in a checkpoint.
    pub fn restore(&mut self, frames: Vec<Frame>, next_slot: usize) -> Result<()> {
        if frames.len() > self.capacity
            || (frames.len() < self.capacity && next_slot != frames.len() % self.capacity)
            || next_slot >= self.capacity
        {
            return Err(Error::InvalidArgument(format!(
                "cannot restore {} frames with next slot {next_slot} into capacity {}",
                frames.len(),
                self.capacity
            )));
        }
        if let Some(env) = frames.first().map(Frame::env) {
            if let Some(f) = frames.iter().find(|f| f.env() != env) {
                return Err(Error::CrossEnvironmentInsert {
                    buffer: frames[0].meta.env_name.to_string(),
                    frame: f.meta.env_name.to_string(),
                });
            }
        }
        let n = frames.len();
        let mut relations = vec![Label::Negative; self.capacity * self.capacity];
        for i in 0..n {
            relations[i * self.capacity + i] = Label::Positive;
            for j in 0..i {
                let label = classify_pair(&frames[i].meta, &frames[j].meta, &self.rule)?;
                relations[i * self.capacity + j] = label;
                relations[j * self.capacity + i] = label;
            }
        }
        self.env = frames.first().map(Frame::env);
        self.slots = frames;
        self.next_slot = next_slot;
        self.relations = relations;
        Ok(())
    }

    /// Uniform anchor, then a uniform positive (other than the anchor) and a
    /// uniform negative. Gives up after [`ANCHOR_RETRIES`] anchors without
    /// both.
    pub fn sample_triplet<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Triplet> {
        let n = self.slots.len();
        if n < 3 {
            return None;
        }
        let mut positives = Vec::with_capacity(n);
        let mut negatives = Vec::with_capacity(n);
        for _ in 0..ANCHOR_RETRIES {
            let a = rng.random_range(0..n);
            positives.clear();
            negatives.clear();
            let row = &self.relations[a * self.capacity..a * self.capacity + n];
            for (j, label) in row.iter().enumerate() {
                match label {
                    Label::Positive if j != a => positives.push(j),
                    Label::Negative => negatives.push(j),
                    _ => {}
                }
            }
            if positives.is_empty() || negatives.is_empty() {
                continue;
            }
            let p = positives[rng.random_range(0..positives.len())];
            let q = negatives[rng.random_range(0..negatives.len())];
            return Some(Triplet {
                anchor: self.slots[a].clone(),
                positive: self.slots[p].clone(),
                negative: self.slots[q].clone(),
            });
        }
        None
    }
}
