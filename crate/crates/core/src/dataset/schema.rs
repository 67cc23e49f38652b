use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::Rgb;

/// Minimum L∞ distance between any two keypoint colors.
pub const MIN_COLOR_DISTANCE: f32 = 0.1;
/// Default Gaussian falloff as a fraction of the reference height.
pub const DEFAULT_SIGMA_FRAC: f64 = 0.02;
/// Default hard cutoff radius in units of sigma.
pub const DEFAULT_RADIUS_SIGMAS: f64 = 3.0;
pub const DEFAULT_LAYER_COUNT: usize = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointId(pub u32);

impl fmt::Display for KeypointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointDef {
    pub id: KeypointId,
    pub name: String,
    pub layer_index: usize,
    pub color: Rgb,
    /// Gaussian falloff in pixels at reference resolution.
    pub sigma: f64,
    /// Hard cutoff in pixels at reference resolution.
    pub radius: f64,
    /// Keypoints sharing a group are mutually exclusive appearance variants.
    pub state_group: Option<u32>,
}

/// The per-character contract every pose is validated against.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSchema {
    pub name: String,
    pub keypoints: Vec<KeypointDef>,
    pub layer_count: usize,
    pub skeleton: Vec<(KeypointId, KeypointId)>,
    /// `(width, height)` in pixels.
    pub reference_resolution: (usize, usize),
    pub background: Rgb,
}

/// On-disk `schema.json` layout. Optional fields are resolved on load.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SchemaFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_layer_count")]
    pub layer_count: usize,
    pub reference_resolution: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Rgb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_seed: Option<u64>,
    pub keypoints: Vec<KeypointEntry>,
    #[serde(default)]
    pub skeleton: Vec<[u32; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct KeypointEntry {
    pub id: u32,
    pub name: String,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Rgb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_group: Option<u32>,
}

fn default_layer_count() -> usize {
    DEFAULT_LAYER_COUNT
}

impl KeypointSchema {
    /// Resolve defaults (colors, sigma, radius) and validate.
    ///
    /// Missing colors are assigned by seeded farthest-point sampling on the
    /// RGB cube; `seed_override` takes precedence over the file's
    /// `color_seed`.
    pub fn from_file(file: &SchemaFile, seed_override: Option<u64>) -> Result<Self> {
        let [width, height] = file.reference_resolution;
        if width == 0 || height == 0 {
            return Err(Error::Schema("reference_resolution must be non-zero".into()));
        }
        let seed = seed_override.or(file.color_seed).unwrap_or(0);
        let fixed: Vec<Rgb> = file.keypoints.iter().filter_map(|k| k.color).collect();
        let missing = file.keypoints.iter().filter(|k| k.color.is_none()).count();
        let mut assigned = assign_colors(&fixed, missing, seed).into_iter();

        let default_sigma = DEFAULT_SIGMA_FRAC * height as f64;
        let keypoints = file
            .keypoints
            .iter()
            .map(|k| {
                let sigma = k.sigma.unwrap_or(default_sigma);
                KeypointDef {
                    id: KeypointId(k.id),
                    name: k.name.clone(),
                    layer_index: k.layer,
                    color: k.color.unwrap_or_else(|| assigned.next().expect("one color per gap")),
                    sigma,
                    radius: k.radius.unwrap_or(DEFAULT_RADIUS_SIGMAS * sigma),
                    state_group: k.state_group,
                }
            })
            .collect();

        let schema = KeypointSchema {
            name: file.name.clone().unwrap_or_else(|| "character".to_string()),
            keypoints,
            layer_count: file.layer_count,
            skeleton: file
                .skeleton
                .iter()
                .map(|&[a, b]| (KeypointId(a), KeypointId(b)))
                .collect(),
            reference_resolution: (width, height),
            background: file.background.unwrap_or([1.0, 1.0, 1.0]),
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Fully explicit file form; re-loading it yields an identical schema.
    pub fn to_file(&self) -> SchemaFile {
        SchemaFile {
            name: Some(self.name.clone()),
            layer_count: self.layer_count,
            reference_resolution: [self.reference_resolution.0, self.reference_resolution.1],
            background: Some(self.background),
            color_seed: None,
            keypoints: self
                .keypoints
                .iter()
                .map(|k| KeypointEntry {
                    id: k.id.0,
                    name: k.name.clone(),
                    layer: k.layer_index,
                    color: Some(k.color),
                    sigma: Some(k.sigma),
                    radius: Some(k.radius),
                    state_group: k.state_group,
                })
                .collect(),
            skeleton: self.skeleton.iter().map(|&(a, b)| [a.0, b.0]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 {
            return Err(Error::Schema("layer_count must be at least 1".into()));
        }
        if self.keypoints.is_empty() {
            return Err(Error::Schema("schema has no keypoints".into()));
        }
        let mut ids = BTreeSet::new();
        for k in &self.keypoints {
            if !ids.insert(k.id) {
                return Err(Error::Schema(format!("duplicate keypoint id {}", k.id)));
            }
            if k.layer_index >= self.layer_count {
                return Err(Error::Schema(format!(
                    "keypoint {} ({}) has layer {} but layer_count is {}",
                    k.id, k.name, k.layer_index, self.layer_count
                )));
            }
            if !(k.sigma.is_finite() && k.sigma > 0.0) {
                return Err(Error::Schema(format!("keypoint {}: sigma must be > 0", k.id)));
            }
            if !(k.radius.is_finite() && k.radius >= k.sigma) {
                return Err(Error::Schema(format!(
                    "keypoint {}: radius must be >= sigma",
                    k.id
                )));
            }
            if k.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Schema(format!(
                    "keypoint {}: color components must lie in [0, 1]",
                    k.id
                )));
            }
        }
        for (i, a) in self.keypoints.iter().enumerate() {
            for b in &self.keypoints[i + 1..] {
                if linf(a.color, b.color) < MIN_COLOR_DISTANCE {
                    return Err(Error::Schema(format!(
                        "keypoints {} and {} have indistinguishable colors",
                        a.id, b.id
                    )));
                }
            }
        }
        for layer in 0..self.layer_count {
            if !self.keypoints.iter().any(|k| k.layer_index == layer) {
                return Err(Error::Schema(format!("layer {layer} has no keypoints")));
            }
        }
        for &(a, b) in &self.skeleton {
            if a == b {
                return Err(Error::Schema(format!("skeleton self-edge on {a}")));
            }
            for id in [a, b] {
                if !ids.contains(&id) {
                    return Err(Error::Schema(format!(
                        "skeleton edge references unknown keypoint {id}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn keypoint(&self, id: KeypointId) -> Option<&KeypointDef> {
        self.keypoints.iter().find(|k| k.id == id)
    }

    /// Members of each state group, keyed by group id.
    pub fn state_groups(&self) -> BTreeMap<u32, Vec<KeypointId>> {
        let mut groups: BTreeMap<u32, Vec<KeypointId>> = BTreeMap::new();
        for k in &self.keypoints {
            if let Some(g) = k.state_group {
                groups.entry(g).or_default().push(k.id);
            }
        }
        groups
    }

    /// Content hash of the resolved schema; checkpoints record it.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("schema serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn linf(a: Rgb, b: Rgb) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f32::max)
}

/// Seeded farthest-point sampling of `count` colors on the RGB cube, kept
/// away from black (an unlit condition pixel) and from `fixed`.
pub fn assign_colors(fixed: &[Rgb], count: usize, seed: u64) -> Vec<Rgb> {
    if count == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<Rgb> = Vec::with_capacity(4096);
    while candidates.len() < 4096 {
        let c: Rgb = [
            quantize(rng.random::<f32>()),
            quantize(rng.random::<f32>()),
            quantize(rng.random::<f32>()),
        ];
        if c.iter().cloned().fold(0.0, f32::max) >= 0.35 {
            candidates.push(c);
        }
    }
    let mut occupied: Vec<Rgb> = vec![[0.0; 3]];
    occupied.extend_from_slice(fixed);
    let mut nearest: Vec<f32> = candidates
        .iter()
        .map(|&c| occupied.iter().map(|&o| linf(c, o)).fold(f32::INFINITY, f32::min))
        .collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (best, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        let chosen = candidates[best];
        out.push(chosen);
        for (c, d) in candidates.iter().zip(nearest.iter_mut()) {
            *d = d.min(linf(*c, chosen));
        }
    }
    out
}

fn quantize(v: f32) -> f32 {
    (v * 1000.0).round() / 1000.0
}
