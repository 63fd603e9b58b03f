//! Geometric loop-closure ground truth.
//!
//! Covisibility between two posed RGB-D frames is estimated by projecting a
//! regular grid of test points from one camera into the other. The two
//! directional fractions are combined into the surface IoU
//! `1 / (1/f1 + 1/f2 - 1)`. Simpler rules (frame distance, pose thresholds,
//! place identity) cover datasets without depth.
//!
//! Camera convention: pinhole, `x` right, `y` down, `z` forward. Poses are
//! camera-to-world. The world `+z` axis is taken as "up" when extracting yaw.

use std::fmt;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameMeta;

/// Default relative depth tolerance for the occlusion test.
pub const DEFAULT_OCCLUSION: f64 = 0.03;
/// Default number of test points per image side.
pub const DEFAULT_GRID: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    /// Builds a pose from a `(w, x, y, z)` quaternion and a translation in
    /// meters. The quaternion is renormalized; norms further than `1e-3`
    /// from one are rejected.
    pub fn new(quat_wxyz: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let [w, x, y, z] = quat_wxyz;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "pose quaternion norm {norm} is not 1"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: Vector3::from(translation),
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// `(w, x, y, z)`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn distance_to(&self, other: &CameraPose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Heading of the optical axis in the world horizontal plane, radians.
    pub fn yaw(&self) -> f64 {
        let forward = self.rotation * Vector3::z();
        let (hx, hy) = if forward.x.hypot(forward.y) > 1e-9 {
            (forward.x, forward.y)
        } else {
            // optical axis vertical: fall back to the camera's x axis
            let right = self.rotation * Vector3::x();
            (right.x, right.y)
        };
        hy.atan2(hx)
    }

    /// Absolute yaw difference in degrees, wrapped to `[0, 180]`.
    pub fn yaw_difference_deg(&self, other: &CameraPose) -> f64 {
        let mut d = (self.yaw() - other.yaw()).to_degrees().rem_euclid(360.0);
        if d > 180.0 {
            d = 360.0 - d;
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Pixel coordinates of a camera-frame point with positive depth.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Per-pixel z-depth in meters. Non-positive or non-finite entries are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth map holds {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.data.get(y * self.width + x)?;
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

/// Everything covisibility needs to know about one frame.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub pose: &'a CameraPose,
    pub intrinsics: &'a Intrinsics,
    pub depth: &'a DepthMap,
}

impl<'a> View<'a> {
    pub fn from_meta(meta: &'a FrameMeta) -> Option<Self> {
        Some(Self {
            pose: meta.pose.as_ref()?,
            intrinsics: meta.intrinsics.as_ref()?,
            depth: meta.depth.as_deref()?,
        })
    }

    fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.depth.width != self.intrinsics.width || self.depth.height != self.intrinsics.height
        {
            return Err(Error::DimensionMismatch(format!(
                "depth map is {}x{} but intrinsics describe {}x{}",
                self.depth.width, self.depth.height, self.intrinsics.width, self.intrinsics.height
            )));
        }
        Ok(())
    }
}

/// How covisible test points are turned into an area ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counting {
    /// Fraction of valid test points that are covisible.
    #[default]
    Points,
    /// Fraction of the target camera's grid cells hit by covisible points.
    Cells,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovisibilityParams {
    pub grid: usize,
    pub occlusion: f64,
    pub counting: Counting,
}

impl Default for CovisibilityParams {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            occlusion: DEFAULT_OCCLUSION,
            counting: Counting::Points,
        }
    }
}

/// Fraction of `a`'s grid of test points that are visible from `b`.
pub fn covisible_fraction(a: View<'_>, b: View<'_>, params: &CovisibilityParams) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let g = params.grid;
    if g < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid must be >= 2, got {g}"
        )));
    }
    let ia = a.intrinsics;
    let ib = b.intrinsics;
    let mut valid = 0usize;
    let mut covisible = 0usize;
    let mut cells = vec![false; g * g];
    for gy in 0..g {
        let v = (gy as f64 + 0.5) * ia.height as f64 / g as f64;
        for gx in 0..g {
            let u = (gx as f64 + 0.5) * ia.width as f64 / g as f64;
            let Some(depth) = a.depth.get(u as usize, v as usize) else {
                continue;
            };
            valid += 1;
            let world = a.pose.camera_to_world(&ia.backproject(u, v, depth));
            let in_b = b.pose.world_to_camera(&world);
            if in_b.z <= 0.0 {
                continue;
            }
            let (ub, vb) = ib.project(&in_b);
            if !ib.contains(ub, vb) {
                continue;
            }
            let Some(surface) = b.depth.get(ub as usize, vb as usize) else {
                continue;
            };
            if (in_b.z - surface).abs() > params.occlusion * surface {
                continue;
            }
            covisible += 1;
            let cx = ((ub / ib.width as f64 * g as f64) as usize).min(g - 1);
            let cy = ((vb / ib.height as f64 * g as f64) as usize).min(g - 1);
            cells[cy * g + cx] = true;
        }
    }
    if valid == 0 {
        return Ok(0.0);
    }
    Ok(match params.counting {
        Counting::Points => covisible as f64 / valid as f64,
        Counting::Cells => cells.iter().filter(|&&c| c).count() as f64 / (g * g) as f64,
    })
}

/// Surface IoU from the two directional covisible fractions.
pub fn siou(f1: f64, f2: f64) -> Result<f64> {
    for f in [f1, f2] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!(
                "covisible fraction {f} outside [0, 1]"
            )));
        }
    }
    if f1 == 0.0 || f2 == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 / f1 + 1.0 / f2 - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapResult {
    pub f1: f64,
    pub f2: f64,
    pub siou: f64,
}

/// Covisibility in both directions and the resulting sIoU.
pub fn overlap(a: View<'_>, b: View<'_>, params: &CovisibilityParams) -> Result<OverlapResult> {
    let f1 = covisible_fraction(a, b, params)?;
    let f2 = covisible_fraction(b, a, params)?;
    Ok(OverlapResult {
        f1,
        f2,
        siou: siou(f1, f2)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Ambiguous,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Ambiguous => "ambiguous",
        })
    }
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

fn default_occlusion() -> f64 {
    DEFAULT_OCCLUSION
}

/// Ground-truth loop indicator for a pair of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LabelRule {
    /// Same sequence and at most `k` frames apart.
    FrameDistance { k: u64 },
    /// Closer than `max_dist_m` and with yaw difference below `max_yaw_deg`.
    PoseThreshold { max_dist_m: f64, max_yaw_deg: f64 },
    /// sIoU above `pos` is a loop, below `neg` is not, anything between is
    /// left out.
    Siou {
        pos: f64,
        neg: f64,
        #[serde(default = "default_grid")]
        grid: usize,
        #[serde(default = "default_occlusion")]
        occlusion: f64,
        #[serde(default)]
        counting: Counting,
    },
    /// Place ids within `max_ring_dist` on a ring of `places` (linear
    /// distance when `places` is absent).
    PlaceId {
        max_ring_dist: u32,
        #[serde(default)]
        places: Option<u32>,
    },
}

impl LabelRule {
    pub fn siou(pos: f64, neg: f64) -> Self {
        LabelRule::Siou {
            pos,
            neg,
            grid: DEFAULT_GRID,
            occlusion: DEFAULT_OCCLUSION,
            counting: Counting::Points,
        }
    }

    pub fn needs_pose(&self) -> bool {
        matches!(
            self,
            LabelRule::PoseThreshold { .. } | LabelRule::Siou { .. }
        )
    }

    pub fn needs_depth(&self) -> bool {
        matches!(self, LabelRule::Siou { .. })
    }

    pub fn needs_place(&self) -> bool {
        matches!(self, LabelRule::PlaceId { .. })
    }
}

pub fn ring_distance(a: u32, b: u32, places: Option<u32>) -> u32 {
    let d = a.abs_diff(b);
    match places {
        Some(p) if p > 0 => {
            let d = d % p;
            d.min(p - d)
        }
        _ => d,
    }
}

/// Labels a pair; also returns the sIoU when the rule computes one.
pub fn classify_pair_detailed(
    a: &FrameMeta,
    b: &FrameMeta,
    rule: &LabelRule,
) -> Result<(Label, Option<f64>)> {
    let bool_label = |positive: bool| {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    };
    match *rule {
        LabelRule::FrameDistance { k } => {
            let positive = a.env_name == b.env_name
                && a.sequence == b.sequence
                && a.index.abs_diff(b.index) <= k;
            Ok((bool_label(positive), None))
        }
        LabelRule::PoseThreshold {
            max_dist_m,
            max_yaw_deg,
        } => {
            let (Some(pa), Some(pb)) = (a.pose.as_ref(), b.pose.as_ref()) else {
                return Err(Error::InsufficientMetadata(
                    "pose threshold rule needs a pose on both frames".into(),
                ));
            };
            let positive =
                pa.distance_to(pb) < max_dist_m && pa.yaw_difference_deg(pb) < max_yaw_deg;
            Ok((bool_label(positive), None))
        }
        LabelRule::Siou {
            pos,
            neg,
            grid,
            occlusion,
            counting,
        } => {
            let (Some(va), Some(vb)) = (View::from_meta(a), View::from_meta(b)) else {
                return Err(Error::InsufficientMetadata(
                    "sIoU rule needs pose, intrinsics and depth on both frames".into(),
                ));
            };
            let params = CovisibilityParams {
                grid,
                occlusion,
                counting,
            };
            let s = overlap(va, vb, &params)?.siou;
            let label = if s > pos {
                Label::Positive
            } else if s < neg {
                Label::Negative
            } else {
                Label::Ambiguous
            };
            Ok((label, Some(s)))
        }
        LabelRule::PlaceId {
            max_ring_dist,
            places,
        } => {
            let (Some(pa), Some(pb)) = (a.place, b.place) else {
                return Err(Error::InsufficientMetadata(
                    "place-id rule needs a place id on both frames".into(),
                ));
            };
            Ok((
                bool_label(ring_distance(pa, pb, places) <= max_ring_dist),
                None,
            ))
        }
    }
}

pub fn classify_pair(a: &FrameMeta, b: &FrameMeta, rule: &LabelRule) -> Result<Label> {
    classify_pair_detailed(a, b, rule).map(|(l, _)| l)
}
