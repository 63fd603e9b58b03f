//! Observations flowing through the lifelong stream.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, DepthMap, Intrinsics};

/// Channel-major image with values expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "image buffer holds {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite pixel value at offset {pos}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Stable address of a frame inside a manifest: environment, training
/// sequence ordinal and frame ordinal within the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub env: u32,
    pub seq: u32,
    pub ordinal: u32,
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "env{}/seq{}/#{}", self.env, self.seq, self.ordinal)
    }
}

#[derive(Debug, Clone)]
pub struct FrameMeta {
    pub key: FrameKey,
    pub env_name: Arc<str>,
    pub sequence: Arc<str>,
    /// Frame index as written in the manifest (strictly increasing per sequence).
    pub index: u64,
    pub pose: Option<CameraPose>,
    pub intrinsics: Option<Intrinsics>,
    pub depth: Option<Arc<DepthMap>>,
    pub place: Option<u32>,
}

impl FrameMeta {
    /// Metadata with only the bookkeeping fields set.
    pub fn bare(env: u32, env_name: &str, sequence: &str, index: u64) -> Self {
        Self {
            key: FrameKey {
                env,
                seq: 0,
                ordinal: index as u32,
            },
            env_name: Arc::from(env_name),
            sequence: Arc::from(sequence),
            index,
            pose: None,
            intrinsics: None,
            depth: None,
            place: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub meta: FrameMeta,
    pub image: Arc<ImageTensor>,
}

impl Frame {
    pub fn new(meta: FrameMeta, image: ImageTensor) -> Self {
        Self {
            meta,
            image: Arc::new(image),
        }
    }

    pub fn env(&self) -> u32 {
        self.meta.key.env
    }

    pub fn key(&self) -> FrameKey {
        self.meta.key
    }
}
