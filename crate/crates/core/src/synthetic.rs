//! Procedural stick-figure character with exact keypoints, masks and
//! per-layer coverage, for exercising the pipeline without real artwork.
//!
//! Layer 0 is the back arm, layer 1 the head, torso and legs, layer 2 the
//! front arm. Parts are flat-colored capsules painted back to front.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    CharacterDataset, KeypointEntry, KeypointId, KeypointSchema, Point, Pose, SchemaFile,
    TrainingSample,
};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask, Rgb};

pub const BACKGROUND: Rgb = [1.0, 1.0, 1.0];
pub const LAYER_COLORS: [Rgb; 3] = [[0.20, 0.30, 0.75], [0.85, 0.30, 0.20], [0.25, 0.70, 0.30]];

const MAX_ATTEMPTS: usize = 100_000;

// keypoint ids
const HEAD: u32 = 0;
const NECK: u32 = 1;
const PELVIS: u32 = 2;
const FOOT_L: u32 = 3;
const FOOT_R: u32 = 4;
const SHOULDER_B: u32 = 5;
const ELBOW_B: u32 = 6;
const HAND_B: u32 = 7;
const SHOULDER_F: u32 = 8;
const ELBOW_F: u32 = 9;
const HAND_F: u32 = 10;

const KEYPOINTS: [(u32, &str, usize); 11] = [
    (HEAD, "head", 1),
    (NECK, "neck", 1),
    (PELVIS, "pelvis", 1),
    (FOOT_L, "foot_l", 1),
    (FOOT_R, "foot_r", 1),
    (SHOULDER_B, "shoulder_back", 0),
    (ELBOW_B, "elbow_back", 0),
    (HAND_B, "hand_back", 0),
    (SHOULDER_F, "shoulder_front", 2),
    (ELBOW_F, "elbow_front", 2),
    (HAND_F, "hand_front", 2),
];

const SKELETON: [[u32; 2]; 10] = [
    [HEAD, NECK],
    [NECK, PELVIS],
    [PELVIS, FOOT_L],
    [PELVIS, FOOT_R],
    [NECK, SHOULDER_B],
    [SHOULDER_B, ELBOW_B],
    [ELBOW_B, HAND_B],
    [NECK, SHOULDER_F],
    [SHOULDER_F, ELBOW_F],
    [ELBOW_F, HAND_F],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_poses: usize,
    /// `(width, height)`
    pub size: (usize, usize),
    pub seed: u64,
    /// Minimum fraction of poses whose front arm overlaps the torso.
    pub crossing_frac: f64,
}

impl SyntheticConfig {
    pub fn new(n_poses: usize, size: (usize, usize), seed: u64) -> Self {
        Self {
            n_poses,
            size,
            seed,
            crossing_frac: 0.4,
        }
    }
}

/// The dataset plus ground truth the dataset format does not carry.
#[derive(Clone, Debug)]
pub struct SyntheticCharacter {
    pub dataset: CharacterDataset,
    /// Per sample, one coverage mask per layer.
    pub coverage: Vec<[Mask; 3]>,
    /// Per sample, whether the front arm overlaps the torso.
    pub crossing: Vec<bool>,
}

pub fn make_synthetic_character(
    n_poses: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<CharacterDataset> {
    Ok(generate(&SyntheticConfig::new(n_poses, size, seed))?.dataset)
}

pub fn synthetic_schema(size: (usize, usize), seed: u64) -> Result<KeypointSchema> {
    let file = SchemaFile {
        name: Some("stick-figure".into()),
        layer_count: 3,
        reference_resolution: [size.0, size.1],
        background: Some(BACKGROUND),
        color_seed: Some(seed),
        keypoints: KEYPOINTS
            .iter()
            .map(|&(id, name, layer)| KeypointEntry {
                id,
                name: name.into(),
                layer,
                color: None,
                sigma: None,
                radius: None,
                state_group: None,
            })
            .collect(),
        skeleton: SKELETON.to_vec(),
    };
    KeypointSchema::from_file(&file, None)
}

#[derive(Clone, Copy)]
struct Capsule {
    a: Point,
    b: Point,
    r: f64,
}

impl Capsule {
    fn contains(&self, p: Point) -> bool {
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        let len_sq = dx * dx + dy * dy;
        let t = if len_sq == 0.0 {
            0.0
        } else {
            (((p[0] - self.a[0]) * dx + (p[1] - self.a[1]) * dy) / len_sq).clamp(0.0, 1.0)
        };
        let (qx, qy) = (self.a[0] + t * dx - p[0], self.a[1] + t * dy - p[1]);
        qx * qx + qy * qy <= self.r * self.r
    }

    fn inside(&self, w: f64, h: f64) -> bool {
        [self.a, self.b].iter().all(|&[x, y]| {
            x - self.r >= 0.0 && y - self.r >= 0.0 && x + self.r <= w - 1.0 && y + self.r <= h - 1.0
        })
    }
}

struct Figure {
    keypoints: Vec<(u32, Point)>,
    layers: [Vec<Capsule>; 3],
    torso: Capsule,
    shoulder_f: Point,
}

fn polar(origin: Point, angle: f64, len: f64) -> Point {
    [origin[0] + len * angle.sin(), origin[1] + len * angle.cos()]
}

fn sample_figure<R: Rng>(rng: &mut R, w: f64, h: f64) -> Figure {
    let s = w.min(h);
    let cx = w / 2.0 + rng.random_range(-0.06..0.06) * s;
    let neck = [cx, 0.30 * h + rng.random_range(-0.03..0.03) * s];
    let pelvis = [neck[0] + rng.random_range(-0.04..0.04) * s, neck[1] + 0.27 * s];
    let head = polar(neck, PI + rng.random_range(-0.25..0.25), 0.13 * s);
    // angles are measured from straight down, positive towards +x
    let foot_l = polar(pelvis, -rng.random_range(0.08..0.6), 0.26 * s);
    let foot_r = polar(pelvis, rng.random_range(0.08..0.6), 0.26 * s);
    let arm = |rng: &mut R, shoulder: Point| {
        let upper = rng.random_range(-PI..PI);
        let elbow = polar(shoulder, upper, 0.15 * s);
        let hand = polar(elbow, upper + rng.random_range(-2.6..2.6), 0.14 * s);
        (elbow, hand)
    };
    let shoulder_b = [neck[0] + 0.02 * s, neck[1] + 0.03 * s];
    let shoulder_f = [neck[0] - 0.02 * s, neck[1] + 0.03 * s];
    let (elbow_b, hand_b) = arm(rng, shoulder_b);
    let (elbow_f, hand_f) = arm(rng, shoulder_f);

    let cap = |a, b, r: f64| Capsule { a, b, r: r * s };
    let torso = cap(neck, pelvis, 0.07);
    Figure {
        keypoints: vec![
            (HEAD, head),
            (NECK, neck),
            (PELVIS, pelvis),
            (FOOT_L, foot_l),
            (FOOT_R, foot_r),
            (SHOULDER_B, shoulder_b),
            (ELBOW_B, elbow_b),
            (HAND_B, hand_b),
            (SHOULDER_F, shoulder_f),
            (ELBOW_F, elbow_f),
            (HAND_F, hand_f),
        ],
        layers: [
            vec![cap(shoulder_b, elbow_b, 0.032), cap(elbow_b, hand_b, 0.032)],
            vec![
                cap(head, head, 0.085),
                cap(head, neck, 0.03),
                torso,
                cap(pelvis, foot_l, 0.04),
                cap(pelvis, foot_r, 0.04),
            ],
            vec![cap(shoulder_f, elbow_f, 0.032), cap(elbow_f, hand_f, 0.032)],
        ],
        torso,
        shoulder_f,
    }
}

fn coverage(parts: &[Capsule], w: usize, h: usize) -> Mask {
    Mask::from_fn(w, h, |x, y| {
        let p = [x as f64, y as f64];
        parts.iter().any(|c| c.contains(p))
    })
}

/// Front-arm pixels over the torso, away from the shoulder joint, exceed
/// 2% of the torso area.
fn crosses_torso(fig: &Figure, front: &Mask) -> bool {
    let (w, h) = front.dims();
    let joint = Capsule {
        a: fig.shoulder_f,
        b: fig.shoulder_f,
        r: 2.0 * fig.torso.r,
    };
    let mut torso_px = 0usize;
    let mut overlap = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            if fig.torso.contains(p) {
                torso_px += 1;
                if front.get(x, y) && !joint.contains(p) {
                    overlap += 1;
                }
            }
        }
    }
    overlap as f64 > 0.02 * torso_px as f64
}

/// Render `cfg.n_poses` poses. Poses with index `i` where
/// `floor((i + 1) f) > floor(i f)` are forced to cross the torso, so at
/// least `floor(n f)` of them do.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCharacter> {
    if cfg.n_poses < 2 {
        return Err(Error::InvalidArgument("n_poses must be at least 2".into()));
    }
    let (w, h) = cfg.size;
    if w < 32 || h < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic character needs at least 32x32, got {w}x{h}"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.crossing_frac) {
        return Err(Error::InvalidArgument("crossing_frac must lie in [0, 1]".into()));
    }
    let schema = synthetic_schema(cfg.size, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (wf, hf) = (w as f64, h as f64);

    let mut samples = Vec::with_capacity(cfg.n_poses);
    let mut coverages = Vec::with_capacity(cfg.n_poses);
    let mut crossing = Vec::with_capacity(cfg.n_poses);
    for i in 0..cfg.n_poses {
        let f = cfg.crossing_frac;
        let want_cross = ((i + 1) as f64 * f).floor() > (i as f64 * f).floor();
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let fig = sample_figure(&mut rng, wf, hf);
            if !fig.layers.iter().flatten().all(|c| c.inside(wf, hf)) {
                continue;
            }
            let cov = [0, 1, 2].map(|l| coverage(&fig.layers[l], w, h));
            let crosses = crosses_torso(&fig, &cov[2]);
            // non-forced poses take whatever was drawn
            if want_cross && !crosses {
                continue;
            }
            found = Some((fig, cov, crosses));
            break;
        }
        let (fig, cov, crosses) = found.ok_or_else(|| {
            Error::InvalidArgument(format!("could not place pose {i} at {w}x{h}"))
        })?;

        let mut image = Image::filled(w, h, BACKGROUND);
        for (layer, m) in cov.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if m.get(x, y) {
                        image.set(x, y, LAYER_COLORS[layer]);
                    }
                }
            }
        }
        // 8-bit levels, so a saved and reloaded set is identical
        let image = Image::from_rgb8(&image.to_rgb8());
        let mask = Mask::from_fn(w, h, |x, y| cov.iter().any(|m| m.get(x, y)));
        let pose = Pose {
            positions: fig
                .keypoints
                .iter()
                .map(|&(id, p)| (KeypointId(id), p))
                .collect(),
            active_states: Default::default(),
        };
        samples.push(TrainingSample {
            name: format!("pose_{i:03}"),
            image,
            pose,
            mask: Some(mask),
        });
        coverages.push(cov);
        crossing.push(crosses);
    }
    Ok(SyntheticCharacter {
        dataset: CharacterDataset::new(schema, samples)?,
        coverage: coverages,
        crossing,
    })
}
