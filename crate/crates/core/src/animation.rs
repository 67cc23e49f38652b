//! Keyframe timelines, pose interpolation and frame export.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame as GifFrame, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::connectivity::{RefineConfig, RefinementResult};
use crate::dataset::{load_pose_file, KeypointId, KeypointSchema, Pose};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::raster::{Image, Mask};

// Interpolation parameters are snapped to this dyadic grid so that `t` and
// `1 - t` are exact complements; mirrored frames then get identical poses.
const T_GRID: f64 = (1u64 << 24) as f64;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        (a + b) * 0.5 + (t - 0.5) * (b - a)
    }
}

/// Linear interpolation of every position; discrete states come from `a`
/// below `t = 0.5` and from `b` from there on. Keypoints positioned in only
/// one pose are taken from the side whose states are used.
pub fn interpolate(a: &Pose, b: &Pose, t: f64) -> Result<Pose> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    if !a.active_states.keys().eq(b.active_states.keys()) {
        return Err(Error::InvalidArgument(
            "poses have different state groups; they do not share a schema".into(),
        ));
    }
    let t = (t * T_GRID).round() / T_GRID;
    let take_b = t >= 0.5;
    let mut positions = std::collections::BTreeMap::new();
    for (&id, &pa) in &a.positions {
        match b.positions.get(&id) {
            Some(&pb) => {
                positions.insert(id, [lerp(pa[0], pb[0], t), lerp(pa[1], pb[1], t)]);
            }
            None if !take_b => {
                positions.insert(id, pa);
            }
            None => {}
        }
    }
    if take_b {
        for (&id, &pb) in &b.positions {
            positions.entry(id).or_insert(pb);
        }
    }
    Ok(Pose {
        positions,
        active_states: if take_b { b.active_states.clone() } else { a.active_states.clone() },
    })
}

/// [`interpolate`] after validating both poses against `schema`.
pub fn interpolate_checked(schema: &KeypointSchema, a: &Pose, b: &Pose, t: f64) -> Result<Pose> {
    a.validate(schema)?;
    b.validate(schema)?;
    interpolate(a, b, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    /// Seconds.
    pub time: f64,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationTimeline {
    pub keyframes: Vec<Keyframe>,
    pub fps: f64,
    /// Exported GIFs repeat forever when set, otherwise play once.
    #[serde(rename = "loop")]
    pub looping: bool,
    pub mask_fix: bool,
}

impl AnimationTimeline {
    pub fn new(keyframes: Vec<Keyframe>, fps: f64) -> Result<Self> {
        let tl = Self {
            keyframes,
            fps,
            looping: true,
            mask_fix: false,
        };
        tl.check()?;
        Ok(tl)
    }

    fn check(&self) -> Result<()> {
        if self.keyframes.is_empty() {
            return Err(Error::InvalidArgument("timeline has no keyframes".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {}", self.fps)));
        }
        for k in &self.keyframes {
            if !k.time.is_finite() {
                return Err(Error::InvalidArgument("keyframe time must be finite".into()));
            }
        }
        for w in self.keyframes.windows(2) {
            if w[1].time <= w[0].time {
                return Err(Error::InvalidArgument(format!(
                    "keyframe times must increase strictly ({} then {})",
                    w[0].time, w[1].time
                )));
            }
        }
        Ok(())
    }

    /// Structural checks plus pose validation against `schema`.
    pub fn validate(&self, schema: &KeypointSchema) -> Result<()> {
        self.check()?;
        for (i, k) in self.keyframes.iter().enumerate() {
            k.pose
                .validate(schema)
                .map_err(|e| e.with_context(format!("keyframe {i}")))?;
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.keyframes.last().map_or(0.0, |l| l.time) - self.keyframes.first().map_or(0.0, |f| f.time)
    }

    /// `ceil(duration * fps) + 1`.
    pub fn frame_count(&self) -> usize {
        // absorb float noise such as 1.0 * 10.0 landing just above 10
        let n = self.duration() * self.fps;
        let r = n.round();
        let n = if (n - r).abs() < 1e-9 { r } else { n.ceil() };
        n as usize + 1
    }

    /// Timestamp of frame `i`, clamped to the last keyframe.
    pub fn frame_time(&self, i: usize) -> f64 {
        let first = self.keyframes[0].time;
        let last = self.keyframes[self.keyframes.len() - 1].time;
        if i + 1 == self.frame_count() {
            return last;
        }
        (first + i as f64 / self.fps).min(last)
    }

    /// Index of the segment containing `time` and the local parameter.
    fn locate(&self, time: f64) -> (usize, f64) {
        let k = &self.keyframes;
        if k.len() == 1 || time <= k[0].time {
            return (0, 0.0);
        }
        let seg = k
            .windows(2)
            .position(|w| time <= w[1].time)
            .unwrap_or(k.len() - 2);
        let (t0, t1) = (k[seg].time, k[seg + 1].time);
        (seg, ((time - t0) / (t1 - t0)).clamp(0.0, 1.0))
    }

    pub fn pose_at(&self, time: f64) -> Result<Pose> {
        let (seg, t) = self.locate(time);
        if self.keyframes.len() == 1 {
            return Ok(self.keyframes[0].pose.clone());
        }
        interpolate(&self.keyframes[seg].pose, &self.keyframes[seg + 1].pose, t)
    }

    /// Timestamp, interpolated pose and segment start pose of every frame.
    pub fn frame_plan(&self) -> Result<Vec<FramePlan>> {
        (0..self.frame_count())
            .map(|index| {
                let time = self.frame_time(index);
                let (seg, _) = self.locate(time);
                Ok(FramePlan {
                    index,
                    time,
                    pose: self.pose_at(time)?,
                    segment_start: self.keyframes[seg].pose.clone(),
                })
            })
            .collect()
    }

    pub fn frame_poses(&self) -> Result<Vec<(f64, Pose)>> {
        Ok(self.frame_plan()?.into_iter().map(|f| (f.time, f.pose)).collect())
    }
}

/// On-disk timeline: keyframes carry an inline pose or a pose file path
/// relative to the timeline file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineFile {
    pub fps: f64,
    #[serde(rename = "loop", default = "default_true")]
    pub looping: bool,
    #[serde(default)]
    pub mask_fix: bool,
    pub keyframes: Vec<KeyframeEntry>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeEntry {
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_file: Option<PathBuf>,
}

impl TimelineFile {
    /// Resolve pose references against `base_dir`.
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<AnimationTimeline> {
        let keyframes = self
            .keyframes
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let pose = match (&k.pose, &k.pose_file) {
                    (Some(p), None) => p.clone(),
                    (None, Some(f)) => {
                        let path = match base_dir {
                            Some(d) if f.is_relative() => d.join(f),
                            _ => f.clone(),
                        };
                        load_pose_file(&path)?.pose
                    }
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "keyframe {i} needs exactly one of pose or pose_file"
                        )))
                    }
                };
                Ok(Keyframe { time: k.time, pose })
            })
            .collect::<Result<Vec<_>>>()?;
        let tl = AnimationTimeline {
            keyframes,
            fps: self.fps,
            looping: self.looping,
            mask_fix: self.mask_fix,
        };
        tl.check()?;
        Ok(tl)
    }
}

pub fn load_timeline(path: &Path) -> Result<AnimationTimeline> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TimelineFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    file.resolve(path.parent())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePlan {
    pub index: usize,
    pub time: f64,
    pub pose: Pose,
    pub segment_start: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub time: f64,
    /// Pose the image was generated from (after repair, if any).
    pub pose: Pose,
    pub image: Image,
    pub mask: Option<Mask>,
    pub refinement: Option<RefinementResult>,
    /// Mask repair ran and did not converge.
    pub flagged: bool,
}

/// The keypoint that moved furthest from `from` to `to`, with its
/// displacement; `None` when nothing moved.
pub fn largest_move(from: &Pose, to: &Pose) -> Option<(KeypointId, [f64; 2])> {
    to.positions
        .iter()
        .filter_map(|(&id, &q)| from.position(id).map(|p| (id, [q[0] - p[0], q[1] - p[1]])))
        .filter(|(_, d)| d[0] != 0.0 || d[1] != 0.0)
        .max_by(|a, b| a.1[0].hypot(a.1[1]).total_cmp(&b.1[0].hypot(b.1[1])))
}

/// Generate one planned frame. With `refine`, the pose is repaired on its
/// own: the keypoint that moved furthest since the segment's start keyframe
/// stands in for the user's drag.
pub fn render_frame(model: &Model, plan: &FramePlan, refine: Option<&RefineConfig>) -> Result<Frame> {
    let moved = refine.and_then(|cfg| largest_move(&plan.segment_start, &plan.pose).map(|m| (cfg, m)));
    Ok(match moved {
        Some((cfg, (kp, vec))) => {
            let (gen, res) = model.generate_refined(&plan.pose, kp, vec, cfg)?;
            Frame {
                index: plan.index,
                time: plan.time,
                pose: res.pose.clone(),
                image: gen.image,
                mask: gen.mask,
                flagged: !res.converged,
                refinement: Some(res),
            }
        }
        None => {
            let gen = model.generate(&plan.pose)?;
            Frame {
                index: plan.index,
                time: plan.time,
                pose: plan.pose.clone(),
                image: gen.image,
                mask: gen.mask,
                refinement: None,
                flagged: false,
            }
        }
    })
}

/// Generate every frame of `timeline`; see [`render_frame`].
pub fn render_timeline(
    timeline: &AnimationTimeline,
    model: &Model,
    refine: Option<&RefineConfig>,
) -> Result<Vec<Frame>> {
    timeline.validate(model.schema())?;
    if refine.is_some() && !model.predicts_mask() {
        return Err(Error::Unavailable("mask repair needs a model trained with masks".into()));
    }
    timeline
        .frame_plan()?
        .iter()
        .map(|plan| render_frame(model, plan, refine))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    #[default]
    Gif,
    PngSequence,
}

/// File name of frame `i` in a PNG sequence of `n` frames.
pub fn frame_file_name(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(4);
    format!("{i:0width$}.png")
}

fn encode_gif<W: std::io::Write>(out: W, images: &[&Image], fps: f64, looping: bool) -> Result<()> {
    let mut enc = GifEncoder::new_with_speed(out, 10);
    let repeat = if looping { Repeat::Infinite } else { Repeat::Finite(0) };
    let wrap = |e: image::ImageError| Error::InvalidArgument(format!("gif encoding: {e}"));
    enc.set_repeat(repeat).map_err(wrap)?;
    let delay = Delay::from_numer_denom_ms(1000, fps.round().max(1.0) as u32);
    for img in images {
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(img.to_rgb8()).to_rgba8();
        enc.encode_frame(GifFrame::from_parts(rgba, 0, 0, delay)).map_err(wrap)?;
    }
    Ok(())
}

/// Animated GIF bytes for `images`.
pub fn gif_bytes(images: &[&Image], fps: f64, looping: bool) -> Result<Vec<u8>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no frames to export".into()));
    }
    let mut buf = Vec::new();
    encode_gif(&mut buf, images, fps, looping)?;
    Ok(buf)
}

/// Write `frames` as `<path>/0000.png ...` or as one animated GIF at `path`.
/// Returns the written files.
pub fn export_frames(
    frames: &[Frame],
    format: ExportFormat,
    path: &Path,
    fps: f64,
    looping: bool,
) -> Result<Vec<PathBuf>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to export".into()));
    }
    match format {
        ExportFormat::PngSequence => {
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let p = path.join(frame_file_name(i, frames.len()));
                    f.image.save_png(&p)?;
                    Ok(p)
                })
                .collect()
        }
        ExportFormat::Gif => {
            let images: Vec<&Image> = frames.iter().map(|f| &f.image).collect();
            let bytes = gif_bytes(&images, fps, looping)?;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
            Ok(vec![path.to_path_buf()])
        }
    }
}
