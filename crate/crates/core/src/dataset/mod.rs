//! Character datasets: a keypoint schema plus a handful of annotated frames.
//!
//! On disk a character is a directory:
//!
//! ```text
//! schema.json
//! frames/<name>.png
//! frames/<name>.keypoints.json
//! masks/<name>.png            (optional, all-or-nothing)
//! ```

mod pose;
mod schema;

use std::fs;
use std::path::{Path, PathBuf};

pub use pose::{Point, Pose, PoseFile};
pub use schema::{
    assign_colors, KeypointDef, KeypointEntry, KeypointId, KeypointSchema, SchemaFile,
    DEFAULT_LAYER_COUNT, MIN_COLOR_DISTANCE,
};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask, Rgb};

pub const SCHEMA_FILE: &str = "schema.json";
pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
const ANNOTATION_SUFFIX: &str = ".keypoints.json";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub name: String,
    pub image: Image,
    pub pose: Pose,
    pub mask: Option<Mask>,
}

/// A validated, immutable set of samples for one character.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacterDataset {
    schema: KeypointSchema,
    samples: Vec<TrainingSample>,
    has_masks: bool,
}

impl CharacterDataset {
    pub fn new(schema: KeypointSchema, samples: Vec<TrainingSample>) -> Result<Self> {
        schema.validate()?;
        if samples.is_empty() {
            return Err(Error::Dataset("dataset has no samples".into()));
        }
        let (w, h) = schema.reference_resolution;
        for s in &samples {
            if s.image.dims() != (w, h) {
                return Err(Error::Dataset(format!(
                    "{}: image is {}x{}, schema expects {w}x{h}",
                    s.name,
                    s.image.width(),
                    s.image.height()
                )));
            }
            if let Some(m) = &s.mask {
                if m.dims() != (w, h) {
                    return Err(Error::Dataset(format!(
                        "{}: mask is {}x{}, image is {w}x{h}",
                        s.name,
                        m.width(),
                        m.height()
                    )));
                }
            }
            s.pose.validate(&schema).map_err(|e| e.with_context(&s.name))?;
        }
        let with_masks = samples.iter().filter(|s| s.mask.is_some()).count();
        if with_masks != 0 && with_masks != samples.len() {
            return Err(Error::Dataset(format!(
                "{with_masks} of {} samples have masks; masks must be provided for all or none",
                samples.len()
            )));
        }
        Ok(Self {
            schema,
            has_masks: with_masks == samples.len(),
            samples,
        })
    }

    pub fn schema(&self) -> &KeypointSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.has_masks
    }

    /// The dataset with sample `index` held out.
    pub fn without(&self, index: usize) -> Result<Self> {
        let samples: Vec<_> = self
            .samples
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, s)| s.clone())
            .collect();
        Self::new(self.schema.clone(), samples)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.schema.clone(), samples)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Overrides the schema's `color_seed` for auto-assigned colors.
    pub color_seed: Option<u64>,
}

pub fn load_dataset(root: &Path) -> Result<CharacterDataset> {
    load_dataset_with(root, &LoadOptions::default())
}

pub fn load_schema(path: &Path, color_seed: Option<u64>) -> Result<KeypointSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SchemaFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    KeypointSchema::from_file(&file, color_seed)
}

pub fn load_pose_file(path: &Path) -> Result<PoseFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn load_dataset_with(root: &Path, opts: &LoadOptions) -> Result<CharacterDataset> {
    let schema_path = root.join(SCHEMA_FILE);
    if !schema_path.is_file() {
        return Err(Error::Dataset(format!(
            "missing {} in {}",
            SCHEMA_FILE,
            root.display()
        )));
    }
    let mut schema = load_schema(&schema_path, opts.color_seed)?;
    if schema.name == "character" {
        if let Some(dir) = root.file_name().and_then(|n| n.to_str()) {
            schema.name = dir.to_string();
        }
    }

    let frames = root.join(FRAMES_DIR);
    let mut names: Vec<String> = fs::read_dir(&frames)
        .map_err(|e| Error::io(&frames, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| {
            let name = entry.file_name().to_str()?.to_string();
            name.strip_suffix(ANNOTATION_SUFFIX).map(str::to_string)
        })
        .collect();
    names.sort();

    let masks_dir = root.join(MASKS_DIR);
    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let ann_path = frames.join(format!("{name}{ANNOTATION_SUFFIX}"));
        let ann = load_pose_file(&ann_path)?;
        ann.pose
            .validate(&schema)
            .map_err(|e| e.with_context(ann_path.display().to_string()))?;
        let image_path = frames.join(format!("{name}.png"));
        let image = Image::load_png(&image_path)?;
        let mask_path = masks_dir.join(format!("{name}.png"));
        let mask = if mask_path.is_file() {
            let m = Mask::load_png(&mask_path)?;
            if m.dims() != image.dims() {
                return Err(Error::Dataset(format!(
                    "{}: mask size {:?} does not match image size {:?}",
                    mask_path.display(),
                    m.dims(),
                    image.dims()
                )));
            }
            Some(m)
        } else {
            None
        };
        samples.push(TrainingSample {
            name,
            image,
            pose: ann.pose,
            mask,
        });
    }
    CharacterDataset::new(schema, samples)
}

pub fn save_dataset(dataset: &CharacterDataset, root: &Path) -> Result<()> {
    let frames = root.join(FRAMES_DIR);
    fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    let schema_path = root.join(SCHEMA_FILE);
    write_json(&schema_path, &dataset.schema.to_file())?;
    let masks = root.join(MASKS_DIR);
    if dataset.has_masks {
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    }
    for s in &dataset.samples {
        s.image.save_png(&frames.join(format!("{}.png", s.name)))?;
        write_json(
            &frames.join(format!("{}{ANNOTATION_SUFFIX}", s.name)),
            &PoseFile {
                pose: s.pose.clone(),
                schema_hash: None,
            },
        )?;
        if let Some(m) = &s.mask {
            m.save_png(&masks.join(format!("{}.png", s.name)))?;
        }
    }
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(PathBuf::from(path), e))
}

/// Foreground mask from a uniform background: pixels within L∞ `tolerance`
/// of `background` are 0, everything else 1.
pub fn extract_mask(image: &Image, background: Rgb, tolerance: f32) -> Mask {
    let (w, h) = image.dims();
    let mask = Mask::from_fn(w, h, |x, y| {
        let c = image.get(x, y);
        let d = (0..3).map(|i| (c[i] - background[i]).abs()).fold(0.0, f32::max);
        d > tolerance
    });
    if mask.count_ones() == 0 {
        log::warn!("extracted mask is empty: every pixel matches the background");
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn write_minimal(root: &Path, schema: serde_json::Value, pose: serde_json::Value) {
        fs::create_dir_all(root.join(FRAMES_DIR)).unwrap();
        fs::write(root.join(SCHEMA_FILE), schema.to_string()).unwrap();
        Image::filled(8, 6, [1.0, 1.0, 1.0])
            .save_png(&root.join("frames/a.png"))
            .unwrap();
        fs::write(root.join("frames/a.keypoints.json"), pose.to_string()).unwrap();
    }

    fn minimal_schema() -> serde_json::Value {
        serde_json::json!({
            "layer_count": 1,
            "reference_resolution": [8, 6],
            "keypoints": [
                {"id": 0, "name": "head", "layer": 0},
                {"id": 1, "name": "tail", "layer": 0}
            ],
            "skeleton": [[0, 1]]
        })
    }

    #[test]
    fn loads_minimal_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(
            dir.path(),
            minimal_schema(),
            serde_json::json!({"positions": {"0": [1, 1], "1": [4, 3]}}),
        );
        let d = load_dataset(dir.path()).unwrap();
        assert_eq!(d.len(), 1);
        assert!(!d.has_masks());
        assert_eq!(d.schema().keypoints.len(), 2);
    }

    #[test]
    fn out_of_canvas_position_names_keypoint_and_file() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(
            dir.path(),
            minimal_schema(),
            serde_json::json!({"positions": {"0": [-5, 10], "1": [4, 3]}}),
        );
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("#0"), "{msg}");
        assert!(msg.contains("a.keypoints.json"), "{msg}");
    }

    #[test]
    fn unknown_keypoint_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(
            dir.path(),
            minimal_schema(),
            serde_json::json!({"positions": {"0": [1, 1], "1": [4, 3], "7": [1, 1]}}),
        );
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("unknown keypoint") && msg.contains("a.keypoints.json"));
    }

    #[test]
    fn missing_schema_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn mask_size_mismatch_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(
            dir.path(),
            minimal_schema(),
            serde_json::json!({"positions": {"0": [1, 1], "1": [4, 3]}}),
        );
        fs::create_dir_all(dir.path().join(MASKS_DIR)).unwrap();
        Mask::zeros(3, 3).save_png(&dir.path().join("masks/a.png")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn image_size_mismatch_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut schema = minimal_schema();
        schema["reference_resolution"] = serde_json::json!([16, 16]);
        write_minimal(
            dir.path(),
            schema,
            serde_json::json!({"positions": {"0": [1, 1], "1": [4, 3]}}),
        );
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn color_assignment_is_reproducible_across_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(
            dir.path(),
            minimal_schema(),
            serde_json::json!({"positions": {"0": [1, 1], "1": [4, 3]}}),
        );
        let opts = LoadOptions {
            color_seed: Some(42),
        };
        let a = load_dataset_with(dir.path(), &opts).unwrap();
        let b = load_dataset_with(dir.path(), &opts).unwrap();
        let bytes = |d: &CharacterDataset| serde_json::to_vec(&d.schema().to_file()).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_minimal(
            dir.path(),
            minimal_schema(),
            serde_json::json!({"positions": {"0": [1.25, 1], "1": [4, 3]}}),
        );
        fs::create_dir_all(dir.path().join(MASKS_DIR)).unwrap();
        Mask::from_fn(8, 6, |x, _| x > 3)
            .save_png(&dir.path().join("masks/a.png"))
            .unwrap();
        let d = load_dataset(dir.path()).unwrap();
        assert!(d.has_masks());
        let out = tempfile::tempdir().unwrap();
        let out_root = out.path().join(dir.path().file_name().unwrap());
        save_dataset(&d, &out_root).unwrap();
        assert_eq!(load_dataset(&out_root).unwrap(), d);
    }

    #[test]
    fn partial_masks_rejected() {
        let schema = KeypointSchema::from_file(
            &serde_json::from_value(minimal_schema()).unwrap(),
            None,
        )
        .unwrap();
        let pose = Pose {
            positions: BTreeMap::from([(KeypointId(0), [1.0, 1.0]), (KeypointId(1), [2.0, 2.0])]),
            active_states: BTreeMap::new(),
        };
        let s = |name: &str, mask| TrainingSample {
            name: name.into(),
            image: Image::filled(8, 6, [1.0; 3]),
            pose: pose.clone(),
            mask,
        };
        let err = CharacterDataset::new(schema, vec![s("a", Some(Mask::zeros(8, 6))), s("b", None)]);
        assert!(err.is_err());
    }

    #[test]
    fn extract_mask_cases() {
        let white = Image::filled(10, 10, [1.0; 3]);
        assert_eq!(extract_mask(&white, [1.0; 3], 0.05).count_ones(), 0);

        let mut img = white.clone();
        for y in 2..5 {
            for x in 3..7 {
                img.set(x, y, [1.0, 0.0, 0.0]);
            }
        }
        let m = extract_mask(&img, [1.0; 3], 0.05);
        // independent scan
        let mut expected = 0;
        for y in 0..10 {
            for x in 0..10 {
                let is_red = img.get(x, y) != [1.0, 1.0, 1.0];
                assert_eq!(m.get(x, y), is_red);
                expected += usize::from(is_red);
            }
        }
        assert_eq!(m.count_ones(), expected);
        assert_eq!(expected, 12);

        assert_eq!(extract_mask(&img, [1.0; 3], 1.0).count_ones(), 0);
    }
}
