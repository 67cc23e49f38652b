//! Adversarial, feature-matching, perceptual and mask losses.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::DiscriminatorOutput;
use crate::nn::{leaky_relu, scalar, softplus, Conv2d, Init, ParamStore};

/// Environment variable consulted for VGG19 weights when the config names none.
pub const VGG19_WEIGHTS_ENV: &str = "CHARGAN_VGG19_WEIGHTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub feature_matching: f64,
    pub perceptual: f64,
    /// Only used when the generator predicts masks.
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            feature_matching: 10.0,
            perceptual: 10.0,
            mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn unit() -> Self {
        Self {
            adversarial: 1.0,
            feature_matching: 1.0,
            perceptual: 1.0,
            mask: 1.0,
        }
    }

    /// Weighted generator objective as a differentiable scalar.
    pub fn combine(
        &self,
        adv_g: &Tensor,
        fm: &Tensor,
        perceptual: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut total = ((adv_g * self.adversarial)? + (fm * self.feature_matching)?)?;
        total = (total + (perceptual * self.perceptual)?)?;
        if let Some(m) = mask {
            total = (total + (m * self.mask)?)?;
        }
        Ok(total)
    }
}

/// Weighted sum of the three generator loss terms.
pub fn total_generator_loss(adv_g: f64, fm: f64, perceptual: f64, weights: &LossWeights) -> f64 {
    weights.adversarial * adv_g + weights.feature_matching * fm + weights.perceptual * perceptual
}

fn check_finite(logits: &[Tensor], what: &str) -> Result<()> {
    for (s, l) in logits.iter().enumerate() {
        let v = scalar(&l.abs()?.max_all()?)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                details: format!("{what} logits at scale {s} are not finite"),
            });
        }
    }
    Ok(())
}

fn mean_over_scales(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len();
    if n == 0 {
        return Err(Error::Shape("no discriminator scales".into()));
    }
    let sum = terms
        .into_iter()
        .reduce(|a, b| (a + b).expect("scalar add"))
        .expect("non-empty");
    Ok((sum / n as f64)?)
}

/// `-log D(real) - log(1 - D(fake))`, averaged over patches and scales.
pub fn discriminator_adversarial_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::Shape("real and fake scale counts differ".into()));
    }
    check_finite(real, "real")?;
    check_finite(fake, "fake")?;
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| Ok((softplus(&r.neg()?)?.mean_all()? + softplus(f)?.mean_all()?)?))
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

/// Non-saturating generator loss `-log D(fake)`, averaged over patches and scales.
pub fn generator_adversarial_loss(fake: &[Tensor]) -> Result<Tensor> {
    check_finite(fake, "fake")?;
    let terms = fake
        .iter()
        .map(|f| Ok(softplus(&f.neg()?)?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

/// `(adv_g, adv_d)` from discriminator outputs on real and fake pairs.
pub fn adversarial_losses(
    d_real: &DiscriminatorOutput,
    d_fake: &DiscriminatorOutput,
) -> Result<(Tensor, Tensor)> {
    let adv_d = discriminator_adversarial_loss(&d_real.logits, &d_fake.logits)?;
    let adv_g = generator_adversarial_loss(&d_fake.logits)?;
    Ok((adv_g, adv_d))
}

/// Sum over layers of the mean absolute feature difference, averaged over
/// scales. Real features are treated as constants.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!(
            "feature lists cover {} and {} scales",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (s, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.len() != f.len() || r.is_empty() {
            return Err(Error::Shape(format!(
                "scale {s}: {} real vs {} fake feature maps",
                r.len(),
                f.len()
            )));
        }
        let mut sum: Option<Tensor> = None;
        for (i, (a, b)) in r.iter().zip(f).enumerate() {
            if a.dims() != b.dims() {
                return Err(Error::Shape(format!(
                    "scale {s} layer {i}: {:?} vs {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            let d = (a.detach() - b)?.abs()?.mean_all()?;
            sum = Some(match sum {
                Some(acc) => (acc + d)?,
                None => d,
            });
        }
        terms.push(sum.expect("non-empty"));
    }
    mean_over_scales(terms)
}

/// Pixel-wise binary cross-entropy between mask logits and a `{0,1}` target.
pub fn mask_bce_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "mask logits {:?} vs target {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    // softplus(z) - t * z == -t log s(z) - (1 - t) log(1 - s(z))
    Ok((softplus(logits)? - (target * logits)?)?.mean_all()?)
}

/// Multi-stage feature backbone for the perceptual loss. Inputs are
/// `[B, 3, H, W]` in `[-1, 1]`; parameters are frozen.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    /// One weight per stage returned by [`features`](Self::features).
    fn stage_weights(&self) -> &[f64];
}

/// Weighted sum over stages of the mean absolute feature difference.
pub fn perceptual_loss(x: &Tensor, y: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "perceptual loss inputs {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let fx = extractor.features(x)?;
    let fy = extractor.features(y)?;
    let weights = extractor.stage_weights();
    let mut total: Option<Tensor> = None;
    for ((a, b), w) in fx.iter().zip(&fy).zip(weights) {
        let d = ((a - b)?.abs()?.mean_all()? * *w)?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Shape("extractor produced no features".into()))
}

/// Frozen random-weight convolutional pyramid. Deterministic in its seed;
/// stands in for a pretrained backbone when none is available.
pub struct RandomConvExtractor {
    stages: Vec<Conv2d>,
    weights: Vec<f64>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let spec = [(3, 16, 1), (16, 32, 2), (32, 64, 2)];
        let stages = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w = store.var(&format!("stage{i}"), &[cout, cin, 3, 3], Init::Normal { std })?;
                Ok(Conv2d::from_tensors(w.detach(), None, stride, 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stages,
            weights: vec![1.0 / 3.0; spec.len()],
        })
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut y = x.clone();
        for s in &self.stages {
            y = leaky_relu(&s.forward(&y)?, 0.2)?;
            out.push(y.clone());
        }
        Ok(out)
    }

    fn stage_weights(&self) -> &[f64] {
        &self.weights
    }
}

// torchvision `vgg19().features` layout up to relu5_1: channel counts, `0`
// marks a 2x2 max pool.
const VGG19_LAYOUT: [usize; 17] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512];
/// Module indices of relu1_1, relu2_1, relu3_1, relu4_1, relu5_1.
const VGG19_TAPS: [usize; 5] = [1, 6, 11, 20, 29];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

enum VggOp {
    Conv(Conv2d),
    Pool,
}

/// VGG19 feature backbone loaded from a safetensors file with torchvision
/// parameter names (`features.<index>.weight` / `.bias`).
pub struct Vgg19Extractor {
    // (torchvision module index of the relu that follows, op)
    ops: Vec<(usize, VggOp)>,
    mean: Tensor,
    std: Tensor,
    weights: Vec<f64>,
}

impl Vgg19Extractor {
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Unavailable(format!("VGG19 weights {}: {e}", path.display())))?;
        let mut ops = Vec::new();
        let mut index = 0;
        let mut cin = 3;
        for &c in &VGG19_LAYOUT {
            if c == 0 {
                ops.push((index, VggOp::Pool));
                index += 1;
                continue;
            }
            let get = |suffix: &str| -> Result<Tensor> {
                let key = format!("features.{index}.{suffix}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Unavailable(format!("VGG19 weights lack {key}")))?;
                Ok(t.to_dtype(dtype)?)
            };
            let w = get("weight")?;
            if w.dims() != [c, cin, 3, 3] {
                return Err(Error::Shape(format!(
                    "features.{index}.weight: expected [{c}, {cin}, 3, 3], got {:?}",
                    w.dims()
                )));
            }
            ops.push((index + 1, VggOp::Conv(Conv2d::from_tensors(w, Some(get("bias")?), 1, 1))));
            index += 2;
            cin = c;
        }
        let mean = Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            ops,
            mean,
            std,
            weights: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0],
        })
    }
}

impl FeatureExtractor for Vgg19Extractor {
    fn name(&self) -> &str {
        "vgg19"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let unit = ((x + 1.0)? * 0.5)?;
        let mut y = unit.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut out = Vec::with_capacity(VGG19_TAPS.len());
        for (relu_index, op) in &self.ops {
            match op {
                VggOp::Pool => y = y.max_pool2d(2)?,
                VggOp::Conv(c) => {
                    y = c.forward(&y)?.relu()?;
                    if VGG19_TAPS.contains(relu_index) {
                        out.push(y.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    fn stage_weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualBackend {
    #[default]
    Vgg19,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    pub backend: PerceptualBackend,
    /// VGG19 safetensors file; falls back to `CHARGAN_VGG19_WEIGHTS`.
    pub weights: Option<PathBuf>,
    /// Use the random extractor when VGG19 weights cannot be loaded.
    pub fallback_to_random: bool,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            backend: PerceptualBackend::Vgg19,
            weights: None,
            fallback_to_random: true,
            seed: 0,
        }
    }
}

pub fn build_extractor(
    cfg: &PerceptualConfig,
    dtype: DType,
    device: &Device,
) -> Result<Box<dyn FeatureExtractor>> {
    if cfg.backend == PerceptualBackend::Random {
        return Ok(Box::new(RandomConvExtractor::new(cfg.seed, dtype, device)?));
    }
    let path = cfg
        .weights
        .clone()
        .or_else(|| std::env::var_os(VGG19_WEIGHTS_ENV).map(PathBuf::from));
    let loaded = match &path {
        Some(p) => Vgg19Extractor::load(p, dtype, device),
        None => Err(Error::Unavailable(format!(
            "no VGG19 weights configured (set perceptual.weights or {VGG19_WEIGHTS_ENV})"
        ))),
    };
    match loaded {
        Ok(vgg) => Ok(Box::new(vgg)),
        Err(e) if cfg.fallback_to_random => {
            log::warn!("{e}; using the random-weight perceptual extractor");
            Ok(Box::new(RandomConvExtractor::new(cfg.seed, dtype, device)?))
        }
        Err(e) => Err(e),
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub fm: f64,
    pub perceptual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<f64>,
    pub total_g: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.fm, self.perceptual, self.total_g]
            .iter()
            .chain(self.mask.iter())
            .all(|v| v.is_finite())
    }

    /// Adversarial plus weighted feature-matching generator loss.
    pub fn adv_fm(&self, weights: &LossWeights) -> f64 {
        weights.adversarial * self.adv_g + weights.feature_matching * self.fm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_generator_loss(0.0, 0.0, 0.0, &LossWeights::default()), 0.0);
        assert_eq!(total_generator_loss(1.0, 2.0, 3.0, &LossWeights::unit()), 6.0);
        let w = LossWeights::default();
        assert!((total_generator_loss(0.5, 0.1, 0.2, &w) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn mask_bce_matches_definition() {
        let z = t(&[0.3, -1.2], &[1, 1, 1, 2]);
        let y = t(&[1.0, 0.0], &[1, 1, 1, 2]);
        let got = scalar(&mask_bce_loss(&z, &y).unwrap()).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = -(s(0.3).ln() + (1.0 - s(-1.2)).ln()) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn extractor_fallback() {
        let cfg = PerceptualConfig {
            weights: Some(PathBuf::from("/nonexistent/vgg19.safetensors")),
            ..Default::default()
        };
        let e = build_extractor(&cfg, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(e.name(), "random-conv");
        let strict = PerceptualConfig {
            fallback_to_random: false,
            ..cfg
        };
        assert!(matches!(
            build_extractor(&strict, DType::F32, &Device::Cpu),
            Err(Error::Unavailable(_))
        ));
    }

    #[test]
    fn report_finiteness() {
        let mut r = LossReport {
            step: 0,
            adv_g: 1.0,
            adv_d: 1.0,
            fm: 0.0,
            perceptual: 0.0,
            mask: None,
            total_g: 1.0,
        };
        assert!(r.is_finite());
        r.mask = Some(f64::NAN);
        assert!(!r.is_finite());
    }
}
