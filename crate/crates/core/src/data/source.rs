use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ColorType, DynamicImage, ImageBuffer, Luma, Rgb};

use crate::data::manifest::{DatasetManifest, FrameRecord, SequenceSpec};
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameKey, FrameMeta, ImageTensor};
use crate::geometry::DepthMap;

/// Where frame payloads referenced by a manifest come from.
pub trait FrameSource: Send + Sync {
    fn image(&self, path: &str) -> Result<Arc<ImageTensor>>;
    fn depth(&self, path: &str) -> Result<Arc<DepthMap>>;
}

/// Files relative to a dataset root; read lazily on first access.
#[derive(Debug, Clone)]
pub struct DiskSource {
    root: PathBuf,
}

impl DiskSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl FrameSource for DiskSource {
    fn image(&self, path: &str) -> Result<Arc<ImageTensor>> {
        read_image(&self.root.join(path)).map(Arc::new)
    }

    fn depth(&self, path: &str) -> Result<Arc<DepthMap>> {
        read_depth(&self.root.join(path)).map(Arc::new)
    }
}

/// Payloads held in memory, keyed by manifest path.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<String, Arc<ImageTensor>>,
    depths: HashMap<String, Arc<DepthMap>>,
}

impl MemorySource {
    pub fn insert_image(&mut self, path: impl Into<String>, image: ImageTensor) {
        self.images.insert(path.into(), Arc::new(image));
    }

    pub fn insert_depth(&mut self, path: impl Into<String>, depth: DepthMap) {
        self.depths.insert(path.into(), Arc::new(depth));
    }

    pub fn images(&self) -> impl Iterator<Item = (&str, &ImageTensor)> {
        self.images.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }
}

impl FrameSource for MemorySource {
    fn image(&self, path: &str) -> Result<Arc<ImageTensor>> {
        self.images
            .get(path)
            .cloned()
            .ok_or_else(|| Error::FrameRead {
                frame: path.to_string(),
                message: "not present in memory source".into(),
            })
    }

    fn depth(&self, path: &str) -> Result<Arc<DepthMap>> {
        self.depths
            .get(path)
            .cloned()
            .ok_or_else(|| Error::FrameRead {
                frame: path.to_string(),
                message: "not present in memory source".into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A validated manifest bound to the place its frames live.
pub struct Dataset {
    manifest: DatasetManifest,
    source: Box<dyn FrameSource>,
    env_names: Vec<Arc<str>>,
    seq_names: Vec<(Vec<Arc<str>>, Vec<Arc<str>>)>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("manifest", &self.manifest)
            .finish_non_exhaustive()
    }
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, source: Box<dyn FrameSource>) -> Result<Self> {
        manifest.validate()?;
        let env_names = manifest
            .environments
            .iter()
            .map(|e| Arc::from(e.name.as_str()))
            .collect();
        let names =
            |seqs: &[SequenceSpec]| seqs.iter().map(|s| Arc::from(s.name.as_str())).collect();
        let seq_names = manifest
            .environments
            .iter()
            .map(|e| (names(&e.train), names(&e.test)))
            .collect();
        Ok(Self {
            manifest,
            source,
            env_names,
            seq_names,
        })
    }

    /// Loads `manifest.json` (or the given file) with payloads on disk next
    /// to it.
    pub fn open(path: &Path) -> Result<Self> {
        let (file, root) = if path.is_dir() {
            (path.join(super::MANIFEST_FILE), path.to_path_buf())
        } else {
            let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (path.to_path_buf(), root)
        };
        let manifest = DatasetManifest::load(&file)?;
        Self::new(manifest, Box::new(DiskSource::new(root)))
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_environments(&self) -> usize {
        self.manifest.environments.len()
    }

    fn sequences(&self, env: usize, split: Split) -> &[SequenceSpec] {
        let e = &self.manifest.environments[env];
        match split {
            Split::Train => &e.train,
            Split::Test => &e.test,
        }
    }

    /// Reads one frame. Test-split sequences get keys after the training
    /// ones so keys stay unique within an environment.
    pub fn load_frame(
        &self,
        env: usize,
        split: Split,
        seq: usize,
        ordinal: usize,
    ) -> Result<Frame> {
        let seqs = self.sequences(env, split);
        let spec = &seqs[seq];
        let record = &spec.frames[ordinal];
        let seq_key = match split {
            Split::Train => seq,
            Split::Test => self.manifest.environments[env].train.len() + seq,
        };
        let sequence = match split {
            Split::Train => self.seq_names[env].0[seq].clone(),
            Split::Test => self.seq_names[env].1[seq].clone(),
        };
        let key = FrameKey {
            env: env as u32,
            seq: seq_key as u32,
            ordinal: ordinal as u32,
        };
        self.build(key, sequence, spec, record)
            .map_err(|e| match e {
                Error::FrameRead { message, .. } => Error::FrameRead {
                    frame: format!("{} {} ({})", self.env_names[env], key, record.image),
                    message,
                },
                other => other,
            })
    }

    fn build(
        &self,
        key: FrameKey,
        sequence: Arc<str>,
        spec: &SequenceSpec,
        record: &FrameRecord,
    ) -> Result<Frame> {
        let image = self.source.image(&record.image)?;
        let depth = record
            .depth
            .as_deref()
            .map(|d| self.source.depth(d))
            .transpose()?;
        let pose = record.camera_pose().transpose()?;
        let meta = FrameMeta {
            key,
            env_name: self.env_names[key.env as usize].clone(),
            sequence,
            index: record.index,
            pose,
            intrinsics: record.intrinsics.or(spec.intrinsics),
            depth,
            place: record.place,
        };
        Ok(Frame { meta, image })
    }

    /// Every frame of one split of an environment, in manifest order.
    pub fn frames(&self, env: usize, split: Split) -> Result<Vec<Frame>> {
        let mut out = Vec::new();
        for (s, seq) in self.sequences(env, split).iter().enumerate() {
            for f in 0..seq.frames.len() {
                out.push(self.load_frame(env, split, s, f)?);
            }
        }
        Ok(out)
    }

    pub fn test_frames(&self, env: usize) -> Result<Vec<Frame>> {
        self.frames(env, Split::Test)
    }
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let err = |message: String| Error::FrameRead {
        frame: path.display().to_string(),
        message,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    );
    let (channels, interleaved): (usize, Vec<u16>) = if gray {
        (1, img.to_luma16().into_raw())
    } else {
        (3, img.to_rgb16().into_raw())
    };
    let mut data = vec![0.0; channels * h * w];
    for (i, v) in interleaved.iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * h * w + pixel] = *v as f64 / u16::MAX as f64;
    }
    ImageTensor::new(channels, h, w, data).map_err(|e| err(e.to_string()))
}

/// Writes a 1- or 3-channel image as 16-bit PNG. Values are clamped to
/// `[0, 1]` and quantized.
pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    let [c, h, w] = image.shape();
    let q = |v: f64| (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16;
    let mut raw = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            raw.push(q(image.data()[ch * h * w + p]));
        }
    }
    let dynamic = match c {
        1 => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        ),
        3 => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        ),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "only 1 or 3 channel images can be written, got {c}"
            )))
        }
    };
    dynamic.save(path).map_err(|e| Error::FrameRead {
        frame: path.display().to_string(),
        message: e.to_string(),
    })
}

/// 16-bit grayscale, millimeters; zero marks a missing measurement.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| Error::FrameRead {
        frame: path.display().to_string(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma16();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let data = luma
        .into_raw()
        .into_iter()
        .map(|mm| mm as f64 / 1000.0)
        .collect();
    DepthMap::new(w, h, data)
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let raw: Vec<u16> = depth
        .raw()
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                (d * 1000.0).round().min(u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let img =
        ImageBuffer::<Luma<u16>, _>::from_raw(depth.width() as u32, depth.height() as u32, raw)
            .expect("buffer size");
    img.save(path).map_err(|e| Error::FrameRead {
        frame: path.display().to_string(),
        message: e.to_string(),
    })
}
