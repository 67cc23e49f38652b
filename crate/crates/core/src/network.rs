//! Layered generator with adaptive per-layer feature scaling, and the
//! two-scale patch discriminator.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, sigmoid, Conv2d, ParamStore};
use crate::render::ConditioningStack;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// Shared layer encoder plus scale maps from the global embedding.
    #[default]
    Full,
    /// Shared layer encoder, scaling bypassed.
    LayerNoScaling,
    /// A single encoder on the combined map.
    NoLayer,
}

impl GeneratorMode {
    pub const ALL: [GeneratorMode; 3] = [Self::NoLayer, Self::LayerNoScaling, Self::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::LayerNoScaling => "layer_no_scaling",
            Self::NoLayer => "no_layer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub num_downsamples: usize,
    pub num_residual_blocks: usize,
    /// Channel cap for the deepest stages.
    pub max_channels: usize,
    pub predict_mask: bool,
    pub layer_count: usize,
    pub mode: GeneratorMode,
    /// Working `[width, height]` the network is built for.
    pub resolution: [usize; 2],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            num_downsamples: 3,
            num_residual_blocks: 6,
            max_channels: 256,
            predict_mask: false,
            layer_count: 3,
            mode: GeneratorMode::Full,
            resolution: [256, 256],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::InvalidArgument(
                "need 0 < base_channels <= max_channels".into(),
            ));
        }
        if self.layer_count == 0 {
            return Err(Error::InvalidArgument("layer_count must be positive".into()));
        }
        let f = 1usize << self.num_downsamples;
        let [w, h] = self.resolution;
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {w}x{h} must be divisible by 2^{} = {f}",
                self.num_downsamples
            )));
        }
        Ok(())
    }

    /// Channels after `i` downsampling stages.
    pub fn channels_at(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }

    pub fn feature_channels(&self) -> usize {
        self.channels_at(self.num_downsamples)
    }

    fn global_channels_at(&self, i: usize) -> usize {
        ((self.base_channels / 2).max(4) << i).min(self.max_channels / 2)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: bool,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = if self.norm { instance_norm(&y)? } else { y };
        Ok(y.relu()?)
    }
}

/// Conv stem followed by strided downsampling stages.
#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<ConvBlock>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, channels: &[usize], stem_kernel: usize) -> Result<Self> {
        let mut blocks = vec![ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.in"), 3, channels[0], stem_kernel, 1, stem_kernel / 2, false)?,
            norm: true,
        }];
        for i in 1..channels.len() {
            blocks.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}.down{}", i - 1), channels[i - 1], channels[i], 3, 2, 1, false)?,
                norm: true,
            });
        }
        Ok(Self { blocks })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = instance_norm(&self.a.forward(x)?)?.relu()?;
        let y = instance_norm(&self.b.forward(&y)?)?;
        Ok((x + y)?)
    }
}

/// Predicts one multiplicative scale map per layer from the combined map.
#[derive(Clone, Debug)]
struct GlobalEmbedding {
    encoder: Encoder,
    out: Conv2d,
    layers: usize,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// `[B, 3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    /// `[B, 1, H, W]` logits, present iff the generator predicts masks.
    pub mask_logits: Option<Tensor>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    encoder: Encoder,
    global: Option<GlobalEmbedding>,
    fuse: Option<ConvBlock>,
    res: Vec<ResBlock>,
    up: Vec<ConvBlock>,
    image_head: Conv2d,
    mask_head: Option<Conv2d>,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("cfg", &self.cfg)
            .field("params", &self.store.param_count())
            .finish()
    }
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let d = cfg.num_downsamples;
        let enc_channels: Vec<usize> = (0..=d).map(|i| cfg.channels_at(i)).collect();
        let cf = cfg.feature_channels();
        let encoder = Encoder::new(&mut store, "enc", &enc_channels, 7)?;

        let global = if cfg.mode == GeneratorMode::Full {
            let g_channels: Vec<usize> = (0..=d).map(|i| cfg.global_channels_at(i)).collect();
            Some(GlobalEmbedding {
                encoder: Encoder::new(&mut store, "glob", &g_channels, 3)?,
                out: Conv2d::new(&mut store, "glob.out", g_channels[d], cfg.layer_count * cf, 3, 1, 1, true)?,
                layers: cfg.layer_count,
            })
        } else {
            None
        };
        let fuse = if cfg.mode == GeneratorMode::NoLayer {
            None
        } else {
            Some(ConvBlock {
                conv: Conv2d::new(&mut store, "fuse", cfg.layer_count * cf, cf, 1, 1, 0, false)?,
                norm: true,
            })
        };
        let res = (0..cfg.num_residual_blocks)
            .map(|i| {
                Ok(ResBlock {
                    a: Conv2d::new(&mut store, &format!("res{i}.a"), cf, cf, 3, 1, 1, false)?,
                    b: Conv2d::new(&mut store, &format!("res{i}.b"), cf, cf, 3, 1, 1, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up = (0..d)
            .rev()
            .map(|i| {
                Ok(ConvBlock {
                    conv: Conv2d::new(&mut store, &format!("up{i}"), enc_channels[i + 1], enc_channels[i], 3, 1, 1, false)?,
                    norm: true,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let image_head = Conv2d::new(&mut store, "head.image", enc_channels[0], 3, 7, 1, 3, true)?;
        let mask_head = if cfg.predict_mask {
            Some(Conv2d::new(&mut store, "head.mask", enc_channels[0], 1, 7, 1, 3, true)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            global,
            fuse,
            res,
            up,
            image_head,
            mask_head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Parameters of the layer encoder alone.
    pub fn encoder_param_count(&self) -> usize {
        self.store.param_count_with_prefix("enc.")
    }

    fn check_input(&self, t: &Tensor, channels: usize, what: &str) -> Result<usize> {
        let dims = t.dims();
        let [w, h] = self.cfg.resolution;
        let n = dims.len();
        if n < 3 || dims[n - 3] != channels || dims[n - 2] != h || dims[n - 1] != w {
            return Err(Error::Shape(format!(
                "{what}: expected [.., {channels}, {h}, {w}], got {dims:?}"
            )));
        }
        Ok(dims[0])
    }

    /// Shared-encoder features per layer, `[B, L, Cf, h, w]`.
    pub fn encode_layers(&self, layers: &Tensor) -> Result<Tensor> {
        let (b, l, c, h, w) = layers.dims5()?;
        if l != self.cfg.layer_count {
            return Err(Error::Shape(format!(
                "expected {} layers, got {l}",
                self.cfg.layer_count
            )));
        }
        self.check_input(layers, 3, "layer maps")?;
        let f = self.encoder.forward(&layers.reshape((b * l, c, h, w))?)?;
        let (_, cf, fh, fw) = f.dims4()?;
        Ok(f.reshape((b, l, cf, fh, fw))?)
    }

    /// Scale maps `[B, L, Cf, h, w]` in `(0, 2)`; `None` outside full mode.
    pub fn scale_maps(&self, combined: &Tensor) -> Result<Option<Tensor>> {
        let Some(g) = &self.global else {
            return Ok(None);
        };
        self.check_input(combined, 3, "combined map")?;
        let logits = g.out.forward(&g.encoder.forward(combined)?)?;
        let (b, _, h, w) = logits.dims4()?;
        let cf = self.cfg.feature_channels();
        let scale = (sigmoid(&logits)? * 2.0)?;
        Ok(Some(scale.reshape((b, g.layers, cf, h, w))?))
    }

    /// `layers: [B, L, 3, H, W]`, `combined: [B, 3, H, W]`, both in `[-1, 1]`.
    pub fn forward(&self, layers: &Tensor, combined: &Tensor) -> Result<GeneratorOutput> {
        let b = self.check_input(combined, 3, "combined map")?;
        let mut x = match self.cfg.mode {
            GeneratorMode::NoLayer => self.encoder.forward(combined)?,
            GeneratorMode::Full | GeneratorMode::LayerNoScaling => {
                let feats = self.encode_layers(layers)?;
                if feats.dim(0)? != b {
                    return Err(Error::Shape("layer and combined batch sizes differ".into()));
                }
                let feats = match self.scale_maps(combined)? {
                    Some(s) => (feats * s)?,
                    None => feats,
                };
                let (b, l, cf, h, w) = feats.dims5()?;
                let cat = feats.reshape((b, l * cf, h, w))?;
                self.fuse.as_ref().expect("layered modes fuse").forward(&cat)?
            }
        };
        for r in &self.res {
            x = r.forward(&x)?;
        }
        for u in &self.up {
            let (_, _, h, w) = x.dims4()?;
            x = u.forward(&x.upsample_nearest2d(h * 2, w * 2)?)?;
        }
        let image = self.image_head.forward(&x)?.tanh()?;
        let mask_logits = match &self.mask_head {
            Some(m) => Some(m.forward(&x)?),
            None => None,
        };
        Ok(GeneratorOutput { image, mask_logits })
    }

    /// Batch-of-one forward pass from a rendered stack.
    pub fn generate(&self, stack: &ConditioningStack) -> Result<GeneratorOutput> {
        let (dtype, dev) = (self.dtype(), self.device().clone());
        let layers = stack.layers_tensor(dtype, &dev)?.unsqueeze(0)?;
        let combined = stack.combined_tensor(dtype, &dev)?.unsqueeze(0)?;
        self.forward(&layers, &combined)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Strided stages per scale; each scale yields `n_layers + 1` feature maps.
    pub n_layers: usize,
    pub num_scales: usize,
    pub max_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_layers: 3,
            num_scales: 2,
            max_channels: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// Patch logits per scale, full resolution first.
    pub logits: Vec<Tensor>,
    /// Intermediate activations per scale, excluding the logits.
    pub features: Vec<Vec<Tensor>>,
}

impl DiscriminatorOutput {
    pub fn detach(&self) -> Self {
        Self {
            logits: self.logits.iter().map(|t| t.detach()).collect(),
            features: self
                .features
                .iter()
                .map(|f| f.iter().map(|t| t.detach()).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct PatchDiscriminator {
    blocks: Vec<(Conv2d, bool)>,
    out: Conv2d,
}

impl PatchDiscriminator {
    fn new(store: &mut ParamStore, name: &str, cfg: &DiscriminatorConfig, in_channels: usize) -> Result<Self> {
        let nf = |i: usize| (cfg.base_channels << i).min(cfg.max_channels);
        let mut blocks = vec![(
            Conv2d::new(store, &format!("{name}.b0"), in_channels, nf(0), 4, 2, 2, true)?,
            false,
        )];
        for i in 1..cfg.n_layers {
            blocks.push((Conv2d::new(store, &format!("{name}.b{i}"), nf(i - 1), nf(i), 4, 2, 2, false)?, true));
        }
        let last = cfg.n_layers;
        blocks.push((
            Conv2d::new(store, &format!("{name}.b{last}"), nf(last - 1), nf(last), 4, 1, 2, false)?,
            true,
        ));
        let out = Conv2d::new(store, &format!("{name}.out"), nf(last), 1, 4, 1, 2, true)?;
        Ok(Self { blocks, out })
    }

    fn forward(&self, x: &Tensor, frozen: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let conv = |c: &Conv2d, x: &Tensor| if frozen { c.forward_frozen(x) } else { c.forward(x) };
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut y = x.clone();
        for (c, norm) in &self.blocks {
            y = conv(c, &y)?;
            if *norm {
                y = instance_norm(&y)?;
            }
            y = leaky_relu(&y, 0.2)?;
            feats.push(y.clone());
        }
        Ok((conv(&self.out, &y)?, feats))
    }
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    in_channels: usize,
    store: ParamStore,
    scales: Vec<PatchDiscriminator>,
}

impl std::fmt::Debug for Discriminator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discriminator")
            .field("cfg", &self.cfg)
            .field("in_channels", &self.in_channels)
            .finish()
    }
}

impl Discriminator {
    /// `in_channels` is 6 for `[condition; image]`, 7 with a mask channel.
    pub fn new(
        cfg: &DiscriminatorConfig,
        in_channels: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if cfg.n_layers == 0 || cfg.num_scales == 0 || cfg.base_channels == 0 {
            return Err(Error::InvalidArgument(
                "discriminator needs positive n_layers, num_scales and base_channels".into(),
            ));
        }
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let scales = (0..cfg.num_scales)
            .map(|s| PatchDiscriminator::new(&mut store, &format!("d{s}"), cfg, in_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            store,
            scales,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Runs every scale on `input: [B, C, H, W]`; scale `s` sees the input
    /// average-pooled `s` times by 2.
    pub fn forward(&self, input: &Tensor) -> Result<DiscriminatorOutput> {
        self.run(input, false)
    }

    /// Like [`forward`](Self::forward) but gradients reach only the input.
    pub fn forward_frozen(&self, input: &Tensor) -> Result<DiscriminatorOutput> {
        self.run(input, true)
    }

    fn run(&self, input: &Tensor, frozen: bool) -> Result<DiscriminatorOutput> {
        let c = input.dim(1)?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut logits = Vec::new();
        let mut features = Vec::new();
        let mut x = input.clone();
        for (s, d) in self.scales.iter().enumerate() {
            if s > 0 {
                x = x.avg_pool2d(2)?;
            }
            let (l, f) = d.forward(&x, frozen)?;
            logits.push(l);
            features.push(f);
        }
        Ok(DiscriminatorOutput { logits, features })
    }

    /// Concatenate `[condition; image; mask?]` along channels and classify.
    pub fn discriminate(
        &self,
        image: &Tensor,
        condition: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<DiscriminatorOutput> {
        self.forward(&discriminator_input(image, condition, mask)?)
    }
}

/// Channel concatenation of condition, image and optional mask, checking
/// that all share a resolution.
pub fn discriminator_input(image: &Tensor, condition: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4()?;
    let (_, _, ch, cw) = condition.dims4()?;
    if (h, w) != (ch, cw) {
        return Err(Error::Shape(format!(
            "image {w}x{h} and condition {cw}x{ch} differ in resolution"
        )));
    }
    let mut parts = vec![condition.clone(), image.clone()];
    if let Some(m) = mask {
        let (_, _, mh, mw) = m.dims4()?;
        if (mh, mw) != (h, w) {
            return Err(Error::Shape("mask resolution differs from image".into()));
        }
        parts.push(m.clone());
    }
    Ok(Tensor::cat(&parts, 1)?)
}
