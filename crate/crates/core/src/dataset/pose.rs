use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::schema::{KeypointDef, KeypointId, KeypointSchema};
use crate::error::{Error, Result};

/// `(x, y)` in pixels at reference resolution.
pub type Point = [f64; 2];

/// One concrete keypoint layout for one frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub positions: BTreeMap<KeypointId, Point>,
    #[serde(default)]
    pub active_states: BTreeMap<u32, KeypointId>,
}

/// Annotation file layout: a pose plus an optional schema hash guard.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseFileRepr", into = "PoseFileRepr")]
pub struct PoseFile {
    pub pose: Pose,
    pub schema_hash: Option<String>,
}

// serde's flatten buffers map keys as strings, which breaks integer ids.
#[derive(Clone, Serialize, Deserialize)]
struct PoseFileRepr {
    positions: BTreeMap<KeypointId, Point>,
    #[serde(default)]
    active_states: BTreeMap<u32, KeypointId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema_hash: Option<String>,
}

impl From<PoseFileRepr> for PoseFile {
    fn from(r: PoseFileRepr) -> Self {
        Self {
            pose: Pose {
                positions: r.positions,
                active_states: r.active_states,
            },
            schema_hash: r.schema_hash,
        }
    }
}

impl From<PoseFile> for PoseFileRepr {
    fn from(f: PoseFile) -> Self {
        Self {
            positions: f.pose.positions,
            active_states: f.pose.active_states,
            schema_hash: f.schema_hash,
        }
    }
}

impl Pose {
    pub fn position(&self, id: KeypointId) -> Option<Point> {
        self.positions.get(&id).copied()
    }

    /// Whether `kp` contributes to rendering under this pose.
    pub fn is_active(&self, kp: &KeypointDef) -> bool {
        match kp.state_group {
            None => true,
            Some(g) => self.active_states.get(&g) == Some(&kp.id),
        }
    }

    /// Active keypoints with their positions, in schema order.
    pub fn active<'a>(
        &'a self,
        schema: &'a KeypointSchema,
    ) -> impl Iterator<Item = (&'a KeypointDef, Point)> + 'a {
        schema
            .keypoints
            .iter()
            .filter(move |k| self.is_active(k))
            .filter_map(move |k| self.position(k.id).map(|p| (k, p)))
    }

    pub fn validate(&self, schema: &KeypointSchema) -> Result<()> {
        let (w, h) = schema.reference_resolution;
        for (&id, &[x, y]) in &self.positions {
            if schema.keypoint(id).is_none() {
                return Err(Error::Pose {
                    keypoint: id,
                    reason: "unknown keypoint id".into(),
                    context: None,
                });
            }
            if !(x.is_finite() && y.is_finite()) {
                return Err(Error::Pose {
                    keypoint: id,
                    reason: "non-finite position".into(),
                    context: None,
                });
            }
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return Err(Error::Pose {
                    keypoint: id,
                    reason: format!("position ({x}, {y}) outside the {w}x{h} canvas"),
                    context: None,
                });
            }
        }
        let groups = schema.state_groups();
        for (&group, &id) in &self.active_states {
            match schema.keypoint(id) {
                None => {
                    return Err(Error::Pose {
                        keypoint: id,
                        reason: format!("unknown keypoint selected for state group {group}"),
                        context: None,
                    })
                }
                Some(k) if k.state_group != Some(group) => {
                    return Err(Error::Pose {
                        keypoint: id,
                        reason: format!("keypoint is not a member of state group {group}"),
                        context: None,
                    })
                }
                Some(_) => {}
            }
        }
        for (group, members) in &groups {
            let Some(&active) = self.active_states.get(group) else {
                return Err(Error::PoseStructure {
                    reason: format!("state group {group} has no active keypoint"),
                    context: None,
                });
            };
            debug_assert!(members.contains(&active));
            if !self.positions.contains_key(&active) {
                return Err(Error::Pose {
                    keypoint: active,
                    reason: "active state keypoint has no position".into(),
                    context: None,
                });
            }
        }
        for k in &schema.keypoints {
            if k.state_group.is_none() && !self.positions.contains_key(&k.id) {
                return Err(Error::Pose {
                    keypoint: k.id,
                    reason: format!("missing position for '{}'", k.name),
                    context: None,
                });
            }
        }
        Ok(())
    }

    /// Every position moved by `(dx, dy)`; no validation.
    pub fn translated(&self, dx: f64, dy: f64) -> Pose {
        Pose {
            positions: self
                .positions
                .iter()
                .map(|(&id, &[x, y])| (id, [x + dx, y + dy]))
                .collect(),
            active_states: self.active_states.clone(),
        }
    }

    /// Positions rescaled from one resolution to another, pixel-center aligned.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Pose {
        if from == to {
            return self.clone();
        }
        let sx = to.0 as f64 / from.0 as f64;
        let sy = to.1 as f64 / from.1 as f64;
        Pose {
            positions: self
                .positions
                .iter()
                .map(|(&id, &[x, y])| (id, [(x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5]))
                .collect(),
            active_states: self.active_states.clone(),
        }
    }
}
