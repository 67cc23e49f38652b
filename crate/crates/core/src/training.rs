//! Alternating discriminator / generator optimization on augmented samples.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, AugmentPlan};
use crate::dataset::CharacterDataset;
use crate::error::{Error, Result};
use crate::losses::{
    build_extractor, discriminator_adversarial_loss, feature_matching_loss,
    generator_adversarial_loss, mask_bce_loss, perceptual_loss, FeatureExtractor, LossReport,
    LossWeights, PerceptualConfig,
};
use crate::model::{save_checkpoint, Model};
use crate::network::{
    discriminator_input, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
    GeneratorOutput,
};
use crate::nn::{scalar, sigmoid};
use crate::render::render_stack;

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.safetensors";
const RECENT_REPORTS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `[width, height]`; overrides `generator.resolution`.
    pub working_resolution: [usize; 2],
    pub augment: AugmentConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss_weights: LossWeights,
    pub perceptual: PerceptualConfig,
    /// Write an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            batch_size: 4,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            working_resolution: [256, 256],
            augment: AugmentConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss_weights: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            checkpoint_every: 5_000,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&s).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Generator config with the working resolution and schema layer count applied.
    pub fn resolved_generator(&self, layer_count: usize) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.working_resolution,
            layer_count,
            ..self.generator.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        if self.iterations == 0 {
            return invalid("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive".into());
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return invalid(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return invalid(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        self.augment.validate()?;
        self.resolved_generator(self.generator.layer_count).validate()
    }
}

/// One training batch: augmented, rendered and stacked.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, L, 3, H, W]`
    pub layers: Tensor,
    /// `[B, 3, H, W]`
    pub combined: Tensor,
    /// `[B, 3, H, W]` in `[-1, 1]`
    pub real: Tensor,
    /// `[B, 1, H, W]` in `{0, 1}`
    pub mask: Option<Tensor>,
}

pub struct Trainer {
    dataset: CharacterDataset,
    cfg: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: AdamW,
    opt_d: AdamW,
    extractor: Box<dyn FeatureExtractor>,
    rng: ChaCha8Rng,
    iteration: u64,
    recent: VecDeque<LossReport>,
    device: Device,
}

impl Trainer {
    pub fn new(dataset: &CharacterDataset, cfg: &TrainConfig) -> Result<Self> {
        let extractor = build_extractor(&cfg.perceptual, cfg.precision.dtype(), &Device::Cpu)?;
        Self::with_extractor(dataset, cfg, extractor)
    }

    pub fn with_extractor(
        dataset: &CharacterDataset,
        cfg: &TrainConfig,
        extractor: Box<dyn FeatureExtractor>,
    ) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        let gen_cfg = cfg.resolved_generator(dataset.schema().layer_count);
        if gen_cfg.predict_mask && !dataset.has_masks() {
            return Err(Error::Dataset(
                "predict_mask requires a dataset with masks".into(),
            ));
        }
        let device = Device::Cpu;
        let dtype = cfg.precision.dtype();
        let generator = Generator::new(&gen_cfg, cfg.seed, dtype, &device)?;
        let d_in = if gen_cfg.predict_mask { 7 } else { 6 };
        let discriminator = Discriminator::new(&cfg.discriminator, d_in, cfg.seed, dtype, &device)?;
        let adam = |lr| ParamsAdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let opt_g = AdamW::new(generator.params().vars(), adam(cfg.lr_g))?;
        let opt_d = AdamW::new(discriminator.params().vars(), adam(cfg.lr_d))?;
        Ok(Self {
            dataset: dataset.clone(),
            cfg: cfg.clone(),
            generator,
            discriminator,
            opt_g,
            opt_d,
            extractor,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            iteration: 0,
            recent: VecDeque::with_capacity(RECENT_REPORTS),
            device,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Draw `batch_size` samples with replacement and augment each with a
    /// freshly drawn plan.
    pub fn sample_batch(&mut self) -> Result<Batch> {
        let schema = self.dataset.schema();
        let size = (self.cfg.working_resolution[0], self.cfg.working_resolution[1]);
        let dtype = self.cfg.precision.dtype();
        let (mut layers, mut combined, mut real, mut masks) = (vec![], vec![], vec![], vec![]);
        let mut indices = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = self.rng.random_range(0..self.dataset.len());
            let sample = &self.dataset.samples()[idx];
            let plan = AugmentPlan::sample(&self.cfg.augment, sample.image.dims(), &mut self.rng)?;
            let aug = plan.apply(sample, schema.background).sample;
            let image = if aug.image.dims() == size {
                aug.image
            } else {
                aug.image.resize(size.0, size.1)
            };
            let stack = render_stack(&aug.pose, schema, size)?;
            layers.push(stack.layers_tensor(dtype, &self.device)?);
            combined.push(stack.combined_tensor(dtype, &self.device)?);
            real.push(image.to_tensor(dtype, &self.device)?);
            if let Some(m) = aug.mask {
                let m = if m.dims() == size { m } else { m.resize(size.0, size.1) };
                masks.push(m.to_tensor(dtype, &self.device)?);
            }
            indices.push(idx);
        }
        let mask = if self.generator.config().predict_mask {
            Some(Tensor::stack(&masks, 0)?)
        } else {
            None
        };
        Ok(Batch {
            indices,
            layers: Tensor::stack(&layers, 0)?,
            combined: Tensor::stack(&combined, 0)?,
            real: Tensor::stack(&real, 0)?,
            mask,
        })
    }

    fn non_finite(&self, what: &str) -> Error {
        let recent: Vec<String> = self
            .recent
            .iter()
            .map(|r| serde_json::to_string(r).unwrap_or_default())
            .collect();
        Error::NonFinite {
            step: self.iteration,
            details: format!("{what}; last reports: [{}]", recent.join(", ")),
        }
    }

    fn real_input(batch: &Batch) -> Result<Tensor> {
        let mask = match &batch.mask {
            Some(m) => Some(((m * 2.0)? - 1.0)?),
            None => None,
        };
        discriminator_input(&batch.real, &batch.combined, mask.as_ref())
    }

    fn fake_input(batch: &Batch, fake: &GeneratorOutput, detach: bool) -> Result<Tensor> {
        let d = |t: &Tensor| if detach { t.detach() } else { t.clone() };
        let mask = match &fake.mask_logits {
            Some(l) => Some(((sigmoid(&d(l))? * 2.0)? - 1.0)?),
            None => None,
        };
        discriminator_input(&d(&fake.image), &batch.combined, mask.as_ref())
    }

    fn d_update(&mut self, batch: &Batch, fake: &GeneratorOutput) -> Result<f64> {
        let d_real = self.discriminator.forward(&Self::real_input(batch)?)?;
        let d_fake = self.discriminator.forward(&Self::fake_input(batch, fake, true)?)?;
        let loss = discriminator_adversarial_loss(&d_real.logits, &d_fake.logits)
            .map_err(|e| self.tag(e))?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(self.non_finite("discriminator loss"));
        }
        self.opt_d.backward_step(&loss)?;
        Ok(value)
    }

    fn g_update(&mut self, batch: &Batch, fake: &GeneratorOutput) -> Result<[Option<f64>; 5]> {
        let d_fake = self
            .discriminator
            .forward_frozen(&Self::fake_input(batch, fake, false)?)?;
        let d_real = self
            .discriminator
            .forward_frozen(&Self::real_input(batch)?)?
            .detach();
        let adv_g = generator_adversarial_loss(&d_fake.logits).map_err(|e| self.tag(e))?;
        let fm = feature_matching_loss(&d_real.features, &d_fake.features)?;
        let perc = perceptual_loss(&fake.image, &batch.real, self.extractor.as_ref())?;
        let mask = match (&fake.mask_logits, &batch.mask) {
            (Some(l), Some(m)) => Some(mask_bce_loss(l, m)?),
            _ => None,
        };
        let total = self.cfg.loss_weights.combine(&adv_g, &fm, &perc, mask.as_ref())?;
        let values = [
            Some(scalar(&adv_g)?),
            Some(scalar(&fm)?),
            Some(scalar(&perc)?),
            mask.as_ref().map(scalar).transpose()?,
            Some(scalar(&total)?),
        ];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.non_finite("generator loss"));
        }
        self.opt_g.backward_step(&total)?;
        Ok(values)
    }

    fn tag(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { details, .. } => self.non_finite(&details),
            other => other,
        }
    }

    /// Discriminator update alone on `batch`.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<f64> {
        let fake = self.generator.forward(&batch.layers, &batch.combined)?;
        self.d_update(batch, &fake)
    }

    /// Generator update alone on `batch`; returns the weighted total.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<f64> {
        let fake = self.generator.forward(&batch.layers, &batch.combined)?;
        Ok(self.g_update(batch, &fake)?[4].expect("total"))
    }

    /// One iteration: sample, one discriminator step, then one generator step.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.sample_batch()?;
        // The generator is untouched by the discriminator step, so one
        // forward pass serves both updates.
        let fake = self.generator.forward(&batch.layers, &batch.combined)?;
        let adv_d = self.d_update(&batch, &fake)?;
        let [adv_g, fm, perc, mask, total] = self.g_update(&batch, &fake)?;
        let report = LossReport {
            step: self.iteration,
            adv_g: adv_g.expect("adv_g"),
            adv_d,
            fm: fm.expect("fm"),
            perceptual: perc.expect("perceptual"),
            mask,
            total_g: total.expect("total"),
        };
        self.iteration += 1;
        if self.recent.len() == RECENT_REPORTS {
            self.recent.pop_front();
        }
        self.recent.push_back(report.clone());
        Ok(report)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self.dataset.schema(), &self.generator, self.iteration)
    }

    pub fn into_model(self) -> Result<Model> {
        Model::new(self.dataset.schema().clone(), self.generator, self.iteration)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<LossReport>,
}

/// Train in memory; no files are written.
pub fn train(dataset: &CharacterDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(Trainer::new(dataset, cfg)?, None, &mut |_| {})
}

/// Train and write `train_log.jsonl`, periodic `ckpt-<iteration>.safetensors`
/// files and a final `model.safetensors` into `out_dir`.
pub fn train_to_dir(
    dataset: &CharacterDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    run(Trainer::new(dataset, cfg)?, Some(out_dir), progress)
}

pub fn run(
    mut trainer: Trainer,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<TrainOutcome> {
    let mut log = match out_dir {
        Some(dir) => {
            let p = dir.join(TRAIN_LOG_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let iterations = trainer.cfg.iterations;
    let every = trainer.cfg.checkpoint_every;
    let mut reports = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let report = trainer.step()?;
        if let Some((w, p)) = log.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        progress(&report);
        reports.push(report);
        if let Some(dir) = out_dir {
            if every > 0 && trainer.iteration % every == 0 && trainer.iteration < iterations {
                trainer.save_checkpoint(&dir.join(format!("ckpt-{:06}.safetensors", trainer.iteration)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        model: trainer.into_model()?,
        reports,
    })
}
