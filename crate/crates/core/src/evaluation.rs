//! Reconstruction metrics and the leave-one-out protocol.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::{CharacterDataset, Pose, TrainingSample};
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::model::Model;
use crate::network::GeneratorMode;
use crate::nn::{scalar, Conv2d};
use crate::raster::Image;
use crate::training::{train, TrainConfig};

pub const LPIPS_WEIGHTS_ENV: &str = "CHARGAN_LPIPS_WEIGHTS";
/// Reported in place of +inf when two images are identical.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "psnr inputs have {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// PSNR of two images in `[0, 1]` with peak 1.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "psnr of {:?} and {:?} images",
            a.dims(),
            b.dims()
        )));
    }
    let to64 = |i: &Image| i.as_raw().iter().map(|&v| v as f64).collect::<Vec<_>>();
    psnr_values(&to64(a), &to64(b), 1.0)
}

/// Learned perceptual image distance; 0 for identical inputs.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Per-stage channel-normalized squared feature differences, weighted per
/// channel (or uniformly), averaged spatially and summed over stages.
fn lpips_from_features(fa: &[Tensor], fb: &[Tensor], lin: Option<&[Tensor]>) -> Result<f64> {
    let mut total = 0.0;
    for (i, (a, b)) in fa.iter().zip(fb).enumerate() {
        let unit = |t: &Tensor| -> Result<Tensor> {
            let norm = (t.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            Ok(t.broadcast_div(&norm)?)
        };
        let d = (unit(a)? - unit(b)?)?.sqr()?;
        let per_pixel = match lin {
            Some(l) => d.broadcast_mul(&l[i])?.sum_keepdim(1)?,
            None => d.mean_keepdim(1)?,
        };
        total += scalar(&per_pixel.mean_all()?)?;
    }
    Ok(total)
}

fn image_batch(img: &Image, dtype: DType) -> Result<Tensor> {
    Ok(img.to_tensor(dtype, &Device::Cpu)?.unsqueeze(0)?)
}

// torchvision `alexnet().features` convolutions: (module index, cout, cin, kernel, stride, pad)
const ALEX_CONVS: [(usize, usize, usize, usize, usize, usize); 5] = [
    (0, 64, 3, 11, 4, 2),
    (3, 192, 64, 5, 1, 2),
    (6, 384, 192, 3, 1, 1),
    (8, 256, 384, 3, 1, 1),
    (10, 256, 256, 3, 1, 1),
];
const LPIPS_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const LPIPS_SCALE: [f64; 3] = [0.458, 0.448, 0.450];

/// LPIPS with the AlexNet backbone.
///
/// The safetensors file holds the torchvision AlexNet feature weights
/// (`features.<i>.weight` / `.bias`) and the five linear heads
/// (`lin<k>.model.1.weight`, shape `[1, C, 1, 1]`).
pub struct LpipsAlex {
    convs: Vec<Conv2d>,
    lin: Vec<Tensor>,
    shift: Tensor,
    scale: Tensor,
}

impl LpipsAlex {
    pub fn load(path: &Path) -> Result<Self> {
        let device = Device::Cpu;
        let tensors = candle_core::safetensors::load(path, &device)
            .map_err(|e| Error::Unavailable(format!("LPIPS weights {}: {e}", path.display())))?;
        Self::from_tensors(&tensors)
    }

    /// Load from the path in `CHARGAN_LPIPS_WEIGHTS`.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(LPIPS_WEIGHTS_ENV) {
            Some(p) => Self::load(Path::new(&p)),
            None => Err(Error::Unavailable(format!(
                "LPIPS needs pretrained AlexNet weights; set {LPIPS_WEIGHTS_ENV}"
            ))),
        }
    }

    pub fn from_tensors(tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let get = |key: String, dims: &[usize]| -> Result<Tensor> {
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Unavailable(format!("LPIPS weights lack {key}")))?;
            if t.dims() != dims {
                return Err(Error::Shape(format!("{key}: expected {dims:?}, got {:?}", t.dims())));
            }
            Ok(t.to_dtype(DType::F32)?)
        };
        let mut convs = Vec::with_capacity(ALEX_CONVS.len());
        let mut lin = Vec::with_capacity(ALEX_CONVS.len());
        for (k, &(idx, cout, cin, kernel, stride, pad)) in ALEX_CONVS.iter().enumerate() {
            let w = get(format!("features.{idx}.weight"), &[cout, cin, kernel, kernel])?;
            let b = get(format!("features.{idx}.bias"), &[cout])?;
            convs.push(Conv2d::from_tensors(w, Some(b), stride, pad));
            lin.push(get(format!("lin{k}.model.1.weight"), &[1, cout, 1, 1])?.reshape((1, cout, 1, 1))?);
        }
        let dev = Device::Cpu;
        Ok(Self {
            convs,
            lin,
            shift: Tensor::new(&LPIPS_SHIFT, &dev)?.to_dtype(DType::F32)?.reshape((1, 3, 1, 1))?,
            scale: Tensor::new(&LPIPS_SCALE, &dev)?.to_dtype(DType::F32)?.reshape((1, 3, 1, 1))?,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut y = x.broadcast_sub(&self.shift)?.broadcast_div(&self.scale)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            // max pools precede the second and third convolutions
            if i == 1 || i == 2 {
                y = y.max_pool2d_with_stride(3, 2)?;
            }
            y = c.forward(&y)?.relu()?;
            out.push(y.clone());
        }
        Ok(out)
    }
}

impl PerceptualMetric for LpipsAlex {
    fn name(&self) -> &str {
        "lpips-alex"
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("lpips of {:?} and {:?} images", a.dims(), b.dims())));
        }
        let fa = self.features(&image_batch(a, DType::F32)?)?;
        let fb = self.features(&image_batch(b, DType::F32)?)?;
        lpips_from_features(&fa, &fb, Some(&self.lin))
    }
}

/// LPIPS-shaped distance over an arbitrary frozen extractor with uniform
/// channel weights. For tests only; reports never use it.
pub struct ExtractorMetric<E: FeatureExtractor> {
    pub extractor: E,
}

impl<E: FeatureExtractor> PerceptualMetric for ExtractorMetric<E> {
    fn name(&self) -> &str {
        self.extractor.name()
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("distance of {:?} and {:?} images", a.dims(), b.dims())));
        }
        let fa = self.extractor.features(&image_batch(a, DType::F64)?)?;
        let fb = self.extractor.features(&image_batch(b, DType::F64)?)?;
        lpips_from_features(&fa, &fb, None)
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

/// Anything that renders an image for a pose.
pub trait PosePredictor {
    fn predict(&self, pose: &Pose) -> Result<Image>;
}

impl PosePredictor for Model {
    fn predict(&self, pose: &Pose) -> Result<Image> {
        Ok(self.generate(pose)?.image)
    }
}

/// Produces one predictor per fold.
pub trait FoldTrainer {
    fn fit(&self, train: &CharacterDataset, run: usize, fold: usize) -> Result<Box<dyn PosePredictor>>;
}

/// Trains the full model per fold; run `r` uses seed `cfg.seed + r`.
pub struct GanFoldTrainer {
    pub cfg: TrainConfig,
}

impl FoldTrainer for GanFoldTrainer {
    fn fit(&self, train_set: &CharacterDataset, run: usize, _fold: usize) -> Result<Box<dyn PosePredictor>> {
        let cfg = TrainConfig {
            seed: self.cfg.seed.wrapping_add(run as u64),
            ..self.cfg.clone()
        };
        Ok(Box::new(train(train_set, &cfg)?.model))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub run: usize,
    /// Index of the held-out sample.
    pub held_out: usize,
    pub name: String,
    pub psnr: Option<f64>,
    pub lpips: Option<f64>,
    /// Set when training or inference for this fold failed.
    pub error: Option<String>,
}

impl FoldResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub folds: Vec<FoldResult>,
    pub mean_psnr: Option<f64>,
    pub mean_lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub character: String,
    pub runs: Vec<RunReport>,
    /// Across runs, over per-run means.
    pub psnr: Option<Summary>,
    pub lpips: Option<Summary>,
    /// Name of the perceptual backend, or `None` when unavailable.
    pub lpips_backend: Option<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    Summary::of(&v).map(|s| s.mean)
}

impl CrossValReport {
    pub fn failed_folds(&self) -> usize {
        self.runs.iter().flat_map(|r| &r.folds).filter(|f| !f.ok()).count()
    }

    /// Text table in `mean±std` form.
    pub fn to_table(&self) -> String {
        let fmt = |s: Option<Summary>, digits: usize| match s {
            Some(s) => format!("{:.d$}±{:.e$}", s.mean, s.std, d = digits, e = digits + 1),
            None => "n/a".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>16} {:>18}", "character", "PSNR ↑", "LPIPS ↓");
        let _ = writeln!(
            out,
            "{:<20} {:>16} {:>18}",
            self.character,
            fmt(self.psnr, 2),
            fmt(self.lpips, 3)
        );
        for r in &self.runs {
            let ok = r.folds.iter().filter(|f| f.ok()).count();
            let _ = writeln!(
                out,
                "  run {}: {ok}/{} folds, psnr {}, lpips {}",
                r.run,
                r.folds.len(),
                r.mean_psnr.map_or("n/a".into(), |v| format!("{v:.2}")),
                r.mean_lpips.map_or("n/a".into(), |v| format!("{v:.4}")),
            );
        }
        if self.lpips_backend.is_none() {
            let _ = writeln!(out, "  lpips unavailable: no pretrained backend loaded");
        }
        out
    }
}

fn score(
    predictor: &dyn PosePredictor,
    sample: &TrainingSample,
    metric: Option<&dyn PerceptualMetric>,
) -> Result<(f64, Option<f64>)> {
    let out = predictor.predict(&sample.pose)?;
    let p = psnr(&out, &sample.image)?;
    let l = metric.map(|m| m.distance(&out, &sample.image)).transpose()?;
    Ok((p, l))
}

/// `runs` rounds of leave-one-out: each sample is held out exactly once per
/// run, a predictor is fit on the rest and scored on the held-out pose.
/// Failed folds are recorded and left out of the aggregates.
pub fn cross_validate(
    dataset: &CharacterDataset,
    runs: usize,
    trainer: &dyn FoldTrainer,
    metric: Option<&dyn PerceptualMetric>,
    progress: &mut dyn FnMut(&FoldResult),
) -> Result<CrossValReport> {
    if dataset.len() < 2 {
        return Err(Error::InvalidArgument(
            "cross-validation needs at least 2 samples".into(),
        ));
    }
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be positive".into()));
    }
    let mut run_reports = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut folds = Vec::with_capacity(dataset.len());
        for (i, sample) in dataset.samples().iter().enumerate() {
            let outcome = dataset
                .without(i)
                .and_then(|train_set| trainer.fit(&train_set, run, i))
                .and_then(|pred| score(pred.as_ref(), sample, metric));
            let fold = match outcome {
                Ok((p, l)) => FoldResult {
                    run,
                    held_out: i,
                    name: sample.name.clone(),
                    psnr: Some(p),
                    lpips: l,
                    error: None,
                },
                Err(e) => {
                    log::warn!("run {run} fold {i} ({}) failed: {e}", sample.name);
                    FoldResult {
                        run,
                        held_out: i,
                        name: sample.name.clone(),
                        psnr: None,
                        lpips: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            progress(&fold);
            folds.push(fold);
        }
        run_reports.push(RunReport {
            run,
            mean_psnr: mean(folds.iter().filter_map(|f| f.psnr)),
            mean_lpips: mean(folds.iter().filter_map(|f| f.lpips)),
            folds,
        });
    }
    let per_run = |f: fn(&RunReport) -> Option<f64>| {
        let v: Vec<f64> = run_reports.iter().filter_map(f).collect();
        Summary::of(&v)
    };
    Ok(CrossValReport {
        character: dataset.schema().name.clone(),
        psnr: per_run(|r| r.mean_psnr),
        lpips: per_run(|r| r.mean_lpips),
        lpips_backend: metric.map(|m| m.name().to_string()),
        runs: run_reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: GeneratorMode,
    pub seed: u64,
    pub psnr: f64,
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn psnr(&self, mode: GeneratorMode) -> Option<Summary> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.mode == mode).map(|r| r.psnr).collect();
        Summary::of(&v)
    }

    pub fn lpips(&self, mode: GeneratorMode) -> Option<Summary> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode)
            .filter_map(|r| r.lpips)
            .collect();
        Summary::of(&v)
    }

    /// Whether mean LPIPS satisfies full <= layer_no_scaling <= no_layer;
    /// `None` without LPIPS values.
    pub fn lpips_ordering_holds(&self) -> Option<bool> {
        let full = self.lpips(GeneratorMode::Full)?.mean;
        let lns = self.lpips(GeneratorMode::LayerNoScaling)?.mean;
        let nol = self.lpips(GeneratorMode::NoLayer)?.mean;
        Some(full <= lns && lns <= nol)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>16} {:>18}", "mode", "PSNR ↑", "LPIPS ↓");
        for mode in GeneratorMode::ALL {
            let p = self.psnr(mode).map_or("n/a".into(), |s| format!("{:.2}±{:.3}", s.mean, s.std));
            let l = self.lpips(mode).map_or("n/a".into(), |s| format!("{:.3}±{:.4}", s.mean, s.std));
            let _ = writeln!(out, "{:<18} {p:>16} {l:>18}", mode.as_str());
        }
        out
    }
}

/// Train every generator mode once per seed on `train_set` and score each
/// model on the held-out `test` samples.
pub fn ablation(
    train_set: &CharacterDataset,
    test: &[TrainingSample],
    base: &TrainConfig,
    seeds: &[u64],
    metric: Option<&dyn PerceptualMetric>,
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<AblationReport> {
    if test.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs test samples and seeds".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for mode in GeneratorMode::ALL {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.generator.mode = mode;
            let model = train(train_set, &cfg)?.model;
            let mut ps = Vec::with_capacity(test.len());
            let mut ls = Vec::with_capacity(test.len());
            for s in test {
                let (p, l) = score(&model, s, metric)?;
                ps.push(p);
                ls.extend(l);
            }
            let row = AblationRow {
                mode,
                seed,
                psnr: Summary::of(&ps).expect("non-empty").mean,
                lpips: Summary::of(&ls).map(|s| s.mean),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationReport { rows })
}
