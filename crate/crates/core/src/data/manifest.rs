use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, LabelRule};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Ordered description of a lifelong dataset. Environment order is stream
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub environments: Vec<EnvironmentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    /// Loop indicator used while training.
    pub rule: LabelRule,
    /// Loop indicator for evaluation; defaults to `rule`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_rule: Option<LabelRule>,
    /// Same-sequence frames closer than this are not scored against each
    /// other during evaluation. Defaults to 0 for place-id labels and 10
    /// otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_window: Option<u64>,
    pub train: Vec<SequenceSpec>,
    #[serde(default)]
    pub test: Vec<SequenceSpec>,
}

impl EnvironmentSpec {
    pub fn eval_rule(&self) -> &LabelRule {
        self.test_rule.as_ref().unwrap_or(&self.rule)
    }

    pub fn eval_window(&self) -> u64 {
        self.exclusion_window.unwrap_or(match self.rule {
            LabelRule::PlaceId { .. } => 0,
            _ => 10,
        })
    }

    pub fn train_len(&self) -> usize {
        self.train.iter().map(|s| s.frames.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub name: String,
    /// Shared by every frame that does not set its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: u64,
    /// Image path relative to the dataset root.
    pub image: String,
    /// `[tx, ty, tz, qw, qx, qy, qz]`, camera-to-world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 7]>,
    /// 16-bit millimeter depth image relative to the dataset root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place: Option<u32>,
}

impl FrameRecord {
    pub fn camera_pose(&self) -> Option<Result<CameraPose>> {
        self.pose
            .map(|[tx, ty, tz, qw, qx, qy, qz]| CameraPose::new([qw, qx, qy, qz], [tx, ty, tz]))
    }
}

impl DatasetManifest {
    pub fn new(environments: Vec<EnvironmentSpec>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            environments,
        }
    }

    /// Frames in the training stream.
    pub fn stream_len(&self) -> usize {
        self.environments.iter().map(|e| e.train_len()).sum()
    }

    pub fn rules(&self) -> Vec<LabelRule> {
        self.environments.iter().map(|e| e.rule).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::manifest(
                "version",
                format!(
                    "unsupported version {}, expected {MANIFEST_VERSION}",
                    self.version
                ),
            ));
        }
        if self.environments.is_empty() {
            return Err(Error::manifest("environments", "no environments"));
        }
        let mut names = HashSet::new();
        for (e, env) in self.environments.iter().enumerate() {
            let at = format!("environments[{e}]");
            if env.name.is_empty() {
                return Err(Error::manifest(format!("{at}.name"), "empty name"));
            }
            if !names.insert(env.name.as_str()) {
                return Err(Error::manifest(
                    format!("{at}.name"),
                    format!("duplicate environment `{}`", env.name),
                ));
            }
            validate_rule(&env.rule, &format!("{at}.rule"))?;
            if let Some(r) = &env.test_rule {
                validate_rule(r, &format!("{at}.test_rule"))?;
            }
            for (split, seqs, rule) in [
                ("train", &env.train, &env.rule),
                ("test", &env.test, env.eval_rule()),
            ] {
                for (s, seq) in seqs.iter().enumerate() {
                    validate_sequence(seq, rule, &format!("{at}.{split}[{s}]"))?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text).map_err(|e| {
            Error::manifest(
                format!("{}:{}:{}", path.display(), e.line(), e.column()),
                e.to_string(),
            )
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }
}

fn validate_rule(rule: &LabelRule, at: &str) -> Result<()> {
    let bad = match *rule {
        LabelRule::Siou {
            pos,
            neg,
            grid,
            occlusion,
            ..
        } => {
            !(0.0..=1.0).contains(&pos)
                || !(0.0..=1.0).contains(&neg)
                || neg > pos
                || grid < 2
                || occlusion < 0.0
        }
        LabelRule::PoseThreshold {
            max_dist_m,
            max_yaw_deg,
        } => !(max_dist_m > 0.0 && max_yaw_deg > 0.0),
        LabelRule::PlaceId {
            places: Some(0), ..
        } => true,
        _ => false,
    };
    if bad {
        return Err(Error::manifest(
            at,
            format!("invalid rule parameters {rule:?}"),
        ));
    }
    Ok(())
}

fn validate_sequence(seq: &SequenceSpec, rule: &LabelRule, at: &str) -> Result<()> {
    if seq.name.is_empty() {
        return Err(Error::manifest(format!("{at}.name"), "empty name"));
    }
    if let Some(i) = &seq.intrinsics {
        i.validate()
            .map_err(|e| Error::manifest(format!("{at}.intrinsics"), e.to_string()))?;
    }
    let mut last: Option<u64> = None;
    for (f, frame) in seq.frames.iter().enumerate() {
        let fat = format!("{at}.frames[{f}]");
        if let Some(prev) = last {
            if frame.index <= prev {
                return Err(Error::manifest(
                    format!("{fat}.index"),
                    format!("index {} does not increase (previous {prev})", frame.index),
                ));
            }
        }
        last = Some(frame.index);
        if frame.image.is_empty() {
            return Err(Error::manifest(format!("{fat}.image"), "empty path"));
        }
        if let Some(pose) = frame.camera_pose() {
            pose.map_err(|e| Error::manifest(format!("{fat}.pose"), e.to_string()))?;
        } else if rule.needs_pose() {
            return Err(Error::manifest(
                format!("{fat}.pose"),
                "missing pose required by label rule",
            ));
        }
        if rule.needs_depth() {
            if frame.depth.is_none() {
                return Err(Error::manifest(
                    format!("{fat}.depth"),
                    "missing depth required by label rule",
                ));
            }
            if frame.intrinsics.or(seq.intrinsics).is_none() {
                return Err(Error::manifest(
                    format!("{fat}.intrinsics"),
                    "missing intrinsics required by label rule",
                ));
            }
        }
        if let Some(i) = &frame.intrinsics {
            i.validate()
                .map_err(|e| Error::manifest(format!("{fat}.intrinsics"), e.to_string()))?;
        }
        if rule.needs_place() && frame.place.is_none() {
            return Err(Error::manifest(
                format!("{fat}.place"),
                "missing place id required by label rule",
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> DatasetManifest {
        DatasetManifest::new(vec![EnvironmentSpec {
            name: "spring".into(),
            rule: LabelRule::FrameDistance { k: 3 },
            test_rule: None,
            exclusion_window: None,
            train: vec![SequenceSpec {
                name: "s0".into(),
                intrinsics: None,
                frames: (0..4)
                    .map(|i| FrameRecord {
                        index: i,
                        image: format!("img/{i}.png"),
                        pose: None,
                        depth: None,
                        intrinsics: None,
                        place: None,
                    })
                    .collect(),
            }],
            test: vec![],
        }])
    }

    #[test]
    fn minimal_manifest_validates() {
        let m = minimal();
        m.validate().unwrap();
        assert_eq!(m.stream_len(), 4);
        assert_eq!(m.environments[0].eval_window(), 10);
    }

    #[test]
    fn out_of_order_indices_rejected() {
        let mut m = minimal();
        m.environments[0].train[0].frames[2].index = 0;
        let err = m.validate().unwrap_err().to_string();
        assert!(
            err.contains("environments[0].train[0].frames[2].index"),
            "{err}"
        );
    }

    #[test]
    fn pose_rule_requires_poses() {
        let mut m = minimal();
        m.environments[0].rule = LabelRule::PoseThreshold {
            max_dist_m: 10.0,
            max_yaw_deg: 15.0,
        };
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("frames[0].pose"), "{err}");
    }

    #[test]
    fn unknown_fields_and_schema_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"version": 1, "environments": [{"name": "a"}]}"#).unwrap();
        let err = DatasetManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("manifest.json:1"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let m = minimal();
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}
