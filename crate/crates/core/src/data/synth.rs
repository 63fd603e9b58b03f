use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{
    DatasetManifest, EnvironmentSpec, FrameRecord, SequenceSpec, MANIFEST_FILE,
};
use crate::data::source::{write_image, Dataset, MemorySource};
use crate::error::{Error, Result};
use crate::frame::ImageTensor;
use crate::geometry::LabelRule;

/// Generator settings for a ring-of-places benchmark. Each place lights up
/// its own grating, blended with its ring neighbors; each environment picks
/// which frequency every place uses and how gratings mix into channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub envs: usize,
    pub places: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frames per environment, training and test segments together.
    pub walk_len: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Per-frame amplitude perturbation standard deviation.
    pub jitter: f64,
    /// Weight of the two ring neighbors mixed into each place code.
    pub ring_blend: f64,
    /// Pre-activation scale of the rendering transform.
    pub gain: f64,
    /// Fraction of a full turn by which grating phases vary between frames.
    pub phase_jitter: f64,
    /// Highest grating frequency in cycles per image.
    pub max_frequency: f64,
    /// Probability that a place moves to a fresh frequency in each
    /// environment; also the weight of the per-environment channel mixing.
    pub env_shift: f64,
    pub forward_prob: f64,
    pub backward_prob: f64,
    pub max_ring_dist: u32,
    /// Trailing fraction of each walk held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            envs: 3,
            places: 32,
            channels: 3,
            height: 16,
            width: 16,
            walk_len: 3000,
            noise: 0.01,
            jitter: 0.03,
            ring_blend: 0.5,
            gain: 2.0,
            phase_jitter: 0.1,
            max_frequency: 7.0,
            env_shift: 1.0,
            forward_prob: 0.5,
            backward_prob: 0.1,
            max_ring_dist: 1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Tiny setting for unit tests.
    pub fn small() -> Self {
        Self {
            envs: 2,
            places: 6,
            height: 8,
            width: 8,
            walk_len: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.places < 4 {
            return fail(format!("places must be at least 4, got {}", self.places));
        }
        if self.envs == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return fail("envs and image dims must be positive".into());
        }
        if !(self.noise >= 0.0
            && self.jitter >= 0.0
            && self.ring_blend >= 0.0
            && self.phase_jitter >= 0.0
            && self.gain > 0.0)
        {
            return fail(
                "noise, jitter, ring_blend and phase_jitter must be non-negative and gain positive"
                    .into(),
            );
        }
        let bins = self.frequency_bins().len();
        if bins < self.places {
            return fail(format!(
                "max_frequency {} offers {bins} gratings for {} places",
                self.max_frequency, self.places
            ));
        }
        if !(0.0..=1.0).contains(&self.env_shift) {
            return fail(format!(
                "env_shift must lie in [0, 1], got {}",
                self.env_shift
            ));
        }
        if !(self.forward_prob >= 0.0
            && self.backward_prob >= 0.0
            && self.forward_prob + self.backward_prob <= 1.0)
        {
            return fail("step probabilities must be non-negative and sum to at most 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            ));
        }
        let (train, test) = self.split_sizes();
        if train < 3 || test < 2 {
            return fail(format!(
                "walk_len {} leaves {train} training and {test} test frames",
                self.walk_len
            ));
        }
        if self.walk_len < 10 * self.places {
            log::warn!(
                "walk_len {} is below 10 x places; some places may be rarely visited",
                self.walk_len
            );
        }
        Ok(())
    }

    /// Distinct gratings `(u, v)` in cycles per image along rows and columns,
    /// one per conjugate pair.
    pub fn frequency_bins(&self) -> Vec<(i64, i64)> {
        let (h, w) = (self.height as i64, self.width as i64);
        let mut bins = Vec::new();
        for u in -(h - 1) / 2..=h / 2 {
            for v in 0..=w / 2 {
                let upper = v > 0 || u > 0;
                let radius = ((u * u + v * v) as f64).sqrt();
                if upper && radius <= self.max_frequency && 2 * u.abs() < h && 2 * v < w {
                    bins.push((u, v));
                }
            }
        }
        bins
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        let test = (self.walk_len as f64 * self.test_fraction).round() as usize;
        (self.walk_len.saturating_sub(test), test)
    }

    pub fn rule(&self) -> LabelRule {
        LabelRule::PlaceId {
            max_ring_dist: self.max_ring_dist,
            places: Some(self.places as u32),
        }
    }
}

/// Generated manifest together with its in-memory frames.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub frames: MemorySource,
}

impl SyntheticDataset {
    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::new(self.manifest, Box::new(self.frames))
    }

    /// Writes frames as 16-bit PNG and the manifest under `dir`.
    pub fn materialize(&self, dir: &Path) -> Result<()> {
        for (path, image) in self.frames.images() {
            let target = dir.join(path);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            write_image(&target, image)?;
        }
        self.manifest.save(&dir.join(MANIFEST_FILE))
    }
}

/// Sum of gratings squashed through a sigmoid per channel.
struct Renderer {
    /// Angular frequencies along rows and columns.
    freqs: Vec<[f64; 2]>,
    mixing: Vec<f64>,
    bias: Vec<f64>,
}

impl Renderer {
    fn render(
        &self,
        amplitudes: &[f64],
        phases: &[f64],
        gain: f64,
        height: usize,
        width: usize,
    ) -> Vec<f64> {
        let d = amplitudes.len();
        let channels = self.bias.len();
        let mut out = vec![0.0; channels * height * width];
        let mut waves = vec![0.0; d];
        for y in 0..height {
            for x in 0..width {
                for (k, w) in waves.iter_mut().enumerate() {
                    let [fy, fx] = self.freqs[k];
                    *w = amplitudes[k] * (fy * y as f64 + fx * x as f64 + phases[k]).cos();
                }
                for c in 0..channels {
                    let row = &self.mixing[c * d..(c + 1) * d];
                    let pre = self.bias[c]
                        + gain * row.iter().zip(&waves).map(|(m, w)| m * w).sum::<f64>();
                    out[(c * height + y) * width + x] = 1.0 / (1.0 + (-pre).exp());
                }
            }
        }
        out
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * u16::MAX as f64).round() / u16::MAX as f64
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = spec.places;
    let tau = std::f64::consts::TAU;

    let norm = (1.0 + 2.0 * spec.ring_blend * spec.ring_blend).sqrt();
    let codes: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut code = vec![0.0; p];
            code[i] = 1.0 / norm;
            code[(i + 1) % p] += spec.ring_blend / norm;
            code[(i + p - 1) % p] += spec.ring_blend / norm;
            code
        })
        .collect();
    let mut bins = spec.frequency_bins();
    bins.shuffle(&mut rng);
    let shared_mix = normals(&mut rng, spec.channels * p);
    let alpha = spec.env_shift;
    let keep = (1.0 - alpha * alpha).sqrt();
    let (h, w) = (spec.height as f64, spec.width as f64);

    let rule = spec.rule();
    let (n_train, _) = spec.split_sizes();
    let mut frames = MemorySource::default();
    let mut environments = Vec::with_capacity(spec.envs);
    for t in 0..spec.envs {
        let own_mix = normals(&mut rng, spec.channels * p);
        let mut assigned = bins.clone();
        for k in 0..p {
            if rng.random::<f64>() < alpha {
                let other = rng.random_range(0..assigned.len());
                assigned.swap(k, other);
            }
        }
        let freqs = assigned[..p]
            .iter()
            .map(|&(u, v)| [tau * u as f64 / h, tau * v as f64 / w])
            .collect();
        let renderer = Renderer {
            freqs,
            mixing: shared_mix
                .iter()
                .zip(&own_mix)
                .map(|(s, o)| keep * s + alpha * o)
                .collect(),
            bias: normals(&mut rng, spec.channels)
                .into_iter()
                .map(|b| 0.5 * b)
                .collect(),
        };
        let base_phase: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..tau)).collect();
        let name = format!("env{t}");
        let mut place = rng.random_range(0..p);
        let mut train = Vec::with_capacity(n_train);
        let mut test = Vec::new();
        for i in 0..spec.walk_len {
            if i > 0 {
                let r: f64 = rng.random();
                if r < spec.forward_prob {
                    place = (place + 1) % p;
                } else if r < spec.forward_prob + spec.backward_prob {
                    place = (place + p - 1) % p;
                }
            }
            let amplitudes: Vec<f64> = codes[place]
                .iter()
                .map(|z| (z + spec.jitter * rng.sample::<f64, _>(StandardNormal)).abs())
                .collect();
            let phases: Vec<f64> = base_phase
                .iter()
                .map(|b| b + spec.phase_jitter * rng.random_range(0.0..tau))
                .collect();
            let data: Vec<f64> = renderer
                .render(&amplitudes, &phases, spec.gain, spec.height, spec.width)
                .into_iter()
                .map(|v| quantize(v + spec.noise * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let split = if i < n_train { "train" } else { "test" };
            let path = format!("{name}/{split}/{i:05}.png");
            frames.insert_image(
                path.clone(),
                ImageTensor::new(spec.channels, spec.height, spec.width, data)?,
            );
            let record = FrameRecord {
                index: i as u64,
                image: path,
                pose: None,
                depth: None,
                intrinsics: None,
                place: Some(place as u32),
            };
            if i < n_train {
                train.push(record);
            } else {
                test.push(record);
            }
        }
        environments.push(EnvironmentSpec {
            name,
            rule,
            test_rule: None,
            exclusion_window: Some(0),
            train: vec![SequenceSpec {
                name: "train".into(),
                intrinsics: None,
                frames: train,
            }],
            test: vec![SequenceSpec {
                name: "test".into(),
                intrinsics: None,
                frames: test,
            }],
        });
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest::new(environments),
        frames,
    })
}
