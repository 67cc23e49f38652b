//! Trained generator bundled with its schema; checkpoint I/O and inference.

use std::collections::HashMap;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::connectivity::{refine_pose, RefineConfig, RefinementResult};
use crate::dataset::{KeypointId, KeypointSchema, Pose, SchemaFile};
use crate::error::{Error, Result};
use crate::network::{Generator, GeneratorConfig};
use crate::raster::{Image, Mask};
use crate::render::{render_stack, ConditioningStack};

pub const CHECKPOINT_FORMAT: &str = "chargan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Output of one inference call, at the schema's reference resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub image: Image,
    pub mask: Option<Mask>,
}

pub struct Model {
    schema: KeypointSchema,
    generator: Generator,
    iteration: u64,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("schema", &self.schema.name)
            .field("generator", &self.generator)
            .field("iteration", &self.iteration)
            .finish()
    }
}

/// Write a generator checkpoint. Metadata carries the schema, its hash,
/// the generator config and the iteration count.
pub fn save_checkpoint(
    path: &Path,
    schema: &KeypointSchema,
    generator: &Generator,
    iteration: u64,
) -> Result<()> {
    let schema_json = serde_json::to_string(&schema.to_file())
        .map_err(|e| Error::Checkpoint(format!("serializing schema: {e}")))?;
    let cfg_json = serde_json::to_string(generator.config())
        .map_err(|e| Error::Checkpoint(format!("serializing generator config: {e}")))?;
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("format_version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("schema_hash".to_string(), schema.hash()),
        ("schema".to_string(), schema_json),
        ("generator_config".to_string(), cfg_json),
        ("iteration".to_string(), iteration.to_string()),
    ]);
    let tensors: Vec<(String, Tensor)> = generator
        .params()
        .named()
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

impl Model {
    pub fn new(schema: KeypointSchema, generator: Generator, iteration: u64) -> Result<Self> {
        if generator.config().layer_count != schema.layer_count {
            return Err(Error::Checkpoint(format!(
                "generator built for {} layers, schema has {}",
                generator.config().layer_count,
                schema.layer_count
            )));
        }
        Ok(Self {
            schema,
            generator,
            iteration,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_on(path, &Device::Cpu)
    }

    pub fn load_on(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("missing metadata".into()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(bad("not a checkpoint".into()));
        }
        let version: u32 = field("format_version")?
            .parse()
            .map_err(|_| bad("bad format_version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let schema_file: SchemaFile =
            serde_json::from_str(&field("schema")?).map_err(|e| bad(format!("schema: {e}")))?;
        let schema = KeypointSchema::from_file(&schema_file, None)?;
        let stored_hash = field("schema_hash")?;
        if schema.hash() != stored_hash {
            return Err(Error::SchemaMismatch {
                expected: stored_hash,
                actual: schema.hash(),
            });
        }
        let cfg: GeneratorConfig = serde_json::from_str(&field("generator_config")?)
            .map_err(|e| bad(format!("generator_config: {e}")))?;
        let iteration: u64 = field("iteration")?
            .parse()
            .map_err(|_| bad("bad iteration".into()))?;

        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut dtype = DType::F32;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let t = view.load(device)?;
            dtype = t.dtype();
            tensors.insert(name, t);
        }
        let generator = Generator::new(&cfg, 0, dtype, device)?;
        let expected = generator.params().named().len();
        if tensors.len() != expected {
            return Err(bad(format!("expected {expected} tensors, found {}", tensors.len())));
        }
        for (name, _) in generator.params().named() {
            let t = tensors
                .get(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            generator.params().set(name, t)?;
        }
        Self::new(schema, generator, iteration)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.schema, &self.generator, self.iteration)
    }

    pub fn schema(&self) -> &KeypointSchema {
        &self.schema
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn predicts_mask(&self) -> bool {
        self.generator.config().predict_mask
    }

    pub fn working_resolution(&self) -> (usize, usize) {
        let [w, h] = self.generator.config().resolution;
        (w, h)
    }

    /// Conditioning stack for `pose` at the working resolution.
    pub fn condition(&self, pose: &Pose) -> Result<ConditioningStack> {
        render_stack(pose, &self.schema, self.working_resolution())
    }

    /// Validate `pose`, then generate the image (and mask, if predicted).
    pub fn generate(&self, pose: &Pose) -> Result<Generation> {
        pose.validate(&self.schema)?;
        let out = self.generator.generate(&self.condition(pose)?)?;
        let (rw, rh) = self.schema.reference_resolution;
        let mut image = Image::from_tensor(&out.image.squeeze(0)?)?;
        if image.dims() != (rw, rh) {
            image = image.resize(rw, rh);
        }
        let mask = match out.mask_logits {
            Some(l) => {
                let m = Mask::from_logits(&l.squeeze(0)?)?;
                Some(if m.dims() != (rw, rh) { m.resize(rw, rh) } else { m })
            }
            None => None,
        };
        Ok(Generation { image, mask })
    }

    pub fn predict_mask(&self, pose: &Pose) -> Result<Mask> {
        if !self.predicts_mask() {
            return Err(Error::Unavailable("model was trained without masks".into()));
        }
        Ok(self.generate(pose)?.mask.expect("mask head present"))
    }

    /// Run connectivity repair for a user move, then generate from the
    /// repaired pose.
    pub fn generate_refined(
        &self,
        pose: &Pose,
        moved_kp: KeypointId,
        move_vec: [f64; 2],
        cfg: &RefineConfig,
    ) -> Result<(Generation, RefinementResult)> {
        if !self.predicts_mask() {
            return Err(Error::Unavailable("mask repair needs a model trained with masks".into()));
        }
        pose.validate(&self.schema)?;
        // keep the latest generation so the final pose is not generated twice
        let mut last: Option<(Pose, Generation)> = None;
        let refinement = refine_pose(
            &mut |p: &Pose| {
                let g = self.generate(p)?;
                let mask = g.mask.clone().expect("mask head present");
                last = Some((p.clone(), g));
                Ok(mask)
            },
            &self.schema,
            pose,
            moved_kp,
            move_vec,
            cfg,
        )?;
        let generation = match last {
            Some((p, g)) if p == refinement.pose => g,
            _ => self.generate(&refinement.pose)?,
        };
        Ok((generation, refinement))
    }
}
