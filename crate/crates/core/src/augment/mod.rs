//! Training-time augmentation applied jointly to image, mask and keypoints.

mod tps;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use tps::{ThinPlateSpline, TpsWarp};

use crate::dataset::{KeypointId, Point, Pose, TrainingSample};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask, Rgb};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum translation as a fraction of the image size, both axes.
    pub max_translate_frac: f64,
    pub allow_hflip: bool,
    /// Control grid is `tps_grid x tps_grid`.
    pub tps_grid: usize,
    pub tps_max_shift_frac: f64,
    pub translate_prob: f64,
    pub flip_prob: f64,
    pub tps_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_translate_frac: 0.1,
            allow_hflip: true,
            tps_grid: 4,
            tps_max_shift_frac: 0.05,
            translate_prob: 0.5,
            flip_prob: 0.5,
            tps_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        Self {
            translate_prob: 0.0,
            flip_prob: 0.0,
            tps_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_translate_frac", self.max_translate_frac),
            ("tps_max_shift_frac", self.tps_max_shift_frac),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 0.5], got {v}")));
            }
        }
        for (name, v) in [
            ("translate_prob", self.translate_prob),
            ("flip_prob", self.flip_prob),
            ("tps_prob", self.tps_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.tps_grid < 2 {
            return Err(Error::InvalidArgument("tps_grid must be at least 2".into()));
        }
        Ok(())
    }
}

/// Horizontal flip followed by an integer translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AffineTransform {
    pub dx: i64,
    pub dy: i64,
    pub flip: bool,
}

impl AffineTransform {
    pub fn is_identity(&self) -> bool {
        self.dx == 0 && self.dy == 0 && !self.flip
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, dims: (usize, usize), rng: &mut R) -> Self {
        let mut t = Self::default();
        if rng.random_bool(cfg.translate_prob) {
            let mx = (cfg.max_translate_frac * dims.0 as f64).round() as i64;
            let my = (cfg.max_translate_frac * dims.1 as f64).round() as i64;
            t.dx = rng.random_range(-mx..=mx);
            t.dy = rng.random_range(-my..=my);
        }
        if cfg.allow_hflip && rng.random_bool(cfg.flip_prob) {
            t.flip = true;
        }
        t
    }

    pub fn map_point(&self, p: Point, width: usize) -> Point {
        let x = if self.flip { (width - 1) as f64 - p[0] } else { p[0] };
        [x + self.dx as f64, p[1] + self.dy as f64]
    }

    fn source_pixel(&self, x: usize, y: usize, dims: (usize, usize)) -> Option<(usize, usize)> {
        let sx = x as i64 - self.dx;
        let sy = y as i64 - self.dy;
        if sx < 0 || sy < 0 || sx >= dims.0 as i64 || sy >= dims.1 as i64 {
            return None;
        }
        let sx = if self.flip { dims.0 as i64 - 1 - sx } else { sx };
        Some((sx as usize, sy as usize))
    }

    pub fn apply_image(&self, img: &Image, fill: Rgb) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let dims = img.dims();
        let mut out = Image::filled(dims.0, dims.1, fill);
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if let Some((sx, sy)) = self.source_pixel(x, y, dims) {
                    out.set(x, y, img.get(sx, sy));
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let dims = mask.dims();
        Mask::from_fn(dims.0, dims.1, |x, y| {
            self.source_pixel(x, y, dims)
                .is_some_and(|(sx, sy)| mask.get(sx, sy))
        })
    }
}

/// Result of augmenting one sample; `clamped` lists keypoints that were
/// pushed off the canvas and clamped back to its border.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub sample: TrainingSample,
    pub clamped: Vec<KeypointId>,
}

/// The transforms drawn for one sample, replayable on other rasters.
#[derive(Clone, Debug)]
pub struct AugmentPlan {
    pub affine: AffineTransform,
    pub tps: TpsWarp,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self {
            affine: AffineTransform::default(),
            tps: TpsWarp::identity(),
        }
    }

    /// Draw a random subset of {translate, flip, TPS}, each with its own
    /// probability.
    pub fn sample<R: Rng + ?Sized>(
        cfg: &AugmentConfig,
        dims: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let affine = AffineTransform::sample(cfg, dims, rng);
        let tps = if rng.random_bool(cfg.tps_prob) {
            TpsWarp::random(dims, cfg.tps_grid, cfg.tps_max_shift_frac, rng)?
        } else {
            TpsWarp::identity()
        };
        Ok(Self { affine, tps })
    }

    /// Unclamped image of `p` under the plan.
    pub fn map_point(&self, p: Point, width: usize) -> Point {
        self.tps.map_point(self.affine.map_point(p, width))
    }

    pub fn apply_image(&self, img: &Image, fill: Rgb) -> Image {
        self.tps.warp_image(&self.affine.apply_image(img, fill), fill)
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        self.tps.warp_mask(&self.affine.apply_mask(mask))
    }

    pub fn apply(&self, sample: &TrainingSample, fill: Rgb) -> Augmented {
        let dims = sample.image.dims();
        let (pose, clamped) = map_pose(&sample.pose, dims, |p| self.map_point(p, dims.0));
        Augmented {
            sample: TrainingSample {
                name: sample.name.clone(),
                image: self.apply_image(&sample.image, fill),
                pose,
                mask: sample.mask.as_ref().map(|m| self.apply_mask(m)),
            },
            clamped,
        }
    }
}

fn map_pose(
    pose: &Pose,
    dims: (usize, usize),
    f: impl Fn(Point) -> Point,
) -> (Pose, Vec<KeypointId>) {
    let max_x = (dims.0 - 1) as f64;
    let max_y = (dims.1 - 1) as f64;
    let mut clamped = Vec::new();
    let positions = pose
        .positions
        .iter()
        .map(|(&id, &p)| {
            let [x, y] = f(p);
            let c = [x.clamp(0.0, max_x), y.clamp(0.0, max_y)];
            if c != [x, y] {
                clamped.push(id);
            }
            (id, c)
        })
        .collect();
    (
        Pose {
            positions,
            active_states: pose.active_states.clone(),
        },
        clamped,
    )
}

pub fn random_affine<R: Rng + ?Sized>(
    sample: &TrainingSample,
    cfg: &AugmentConfig,
    rng: &mut R,
    fill: Rgb,
) -> Augmented {
    let plan = AugmentPlan {
        affine: AffineTransform::sample(cfg, sample.image.dims(), rng),
        tps: TpsWarp::identity(),
    };
    plan.apply(sample, fill)
}

pub fn tps_warp<R: Rng + ?Sized>(
    sample: &TrainingSample,
    cfg: &AugmentConfig,
    rng: &mut R,
    fill: Rgb,
) -> Result<Augmented> {
    let plan = AugmentPlan {
        affine: AffineTransform::default(),
        tps: TpsWarp::random(sample.image.dims(), cfg.tps_grid, cfg.tps_max_shift_frac, rng)?,
    };
    Ok(plan.apply(sample, fill))
}

/// Draw and apply a random subset of the configured transforms.
pub fn augment<R: Rng + ?Sized>(
    sample: &TrainingSample,
    cfg: &AugmentConfig,
    rng: &mut R,
    fill: Rgb,
) -> Result<Augmented> {
    let plan = AugmentPlan::sample(cfg, sample.image.dims(), rng)?;
    Ok(plan.apply(sample, fill))
}
