//! Rasterizes poses into layered RGB Gaussian-blob conditioning maps.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::dataset::{KeypointSchema, Pose};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Below this working height blob sizes stop shrinking with the canvas.
const MIN_BLOB_SCALE_HEIGHT: usize = 64;

/// Per-layer keypoint maps plus their clamped sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningStack {
    pub layer_maps: Vec<Image>,
    pub combined_map: Image,
}

impl ConditioningStack {
    pub fn layer_count(&self) -> usize {
        self.layer_maps.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.combined_map.dims()
    }

    /// `[L, 3, H, W]` tensor in `[-1, 1]`.
    pub fn layers_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (w, h) = self.dims();
        let mut data = Vec::with_capacity(self.layer_maps.len() * 3 * w * h);
        for m in &self.layer_maps {
            data.extend(m.to_planar_signed());
        }
        Ok(Tensor::from_vec(data, (self.layer_maps.len(), 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// `[3, H, W]` tensor in `[-1, 1]`.
    pub fn combined_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.combined_map.to_tensor(dtype, device)
    }

    /// Writes `layer_<i>.png` for each layer and `combined.png`.
    pub fn save_pngs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.layer_maps.iter().enumerate() {
            m.save_png(&dir.join(format!("layer_{i}.png")))?;
        }
        self.combined_map.save_png(&dir.join("combined.png"))
    }
}

/// Blob-size multiplier when rasterizing a reference-resolution pose at
/// working height `work_h`.
fn blob_scale(ref_h: usize, work_h: usize) -> f64 {
    let floor = MIN_BLOB_SCALE_HEIGHT.min(ref_h);
    work_h.max(floor) as f64 / ref_h as f64
}

/// Unclamped per-layer accumulation in f64, summed in keypoint-id order.
fn accumulate_layer(
    pose: &Pose,
    schema: &KeypointSchema,
    layer: usize,
    size: (usize, usize),
) -> Vec<f64> {
    let (w, h) = size;
    let mut acc = vec![0f64; w * h * 3];
    let ref_size = schema.reference_resolution;
    let scaled = pose.rescaled(ref_size, size);
    let bs = blob_scale(ref_size.1, h);

    let mut members: Vec<_> = scaled
        .active(schema)
        .filter(|(k, _)| k.layer_index == layer)
        .collect();
    members.sort_by_key(|(k, _)| k.id);

    for (kp, [cx, cy]) in members {
        let sigma = kp.sigma * bs;
        let radius = kp.radius * bs;
        let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
        let r_sq = radius * radius;
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as i64).min(w as i64 - 1);
        let y1 = ((cy + radius).ceil() as i64).min(h as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            let dy = y as f64 - cy;
            for x in x0..=x1 as usize {
                let dx = x as f64 - cx;
                let d_sq = dx * dx + dy * dy;
                if d_sq > r_sq {
                    continue;
                }
                let g = (-d_sq * inv_two_sigma_sq).exp();
                let i = (y * w + x) * 3;
                for c in 0..3 {
                    acc[i + c] += kp.color[c] as f64 * g;
                }
            }
        }
    }
    acc
}

fn clamp_to_image(acc: &[f64], size: (usize, usize)) -> Image {
    let data = acc.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Image::from_raw(size.0, size.1, data).expect("accumulator sized to canvas")
}

/// Render the keypoints of one layer as summed, clamped RGB Gaussian blobs.
///
/// `size` is the working `(width, height)`; positions are scaled from the
/// schema's reference resolution.
pub fn render_layer(
    pose: &Pose,
    schema: &KeypointSchema,
    layer: usize,
    size: (usize, usize),
) -> Result<Image> {
    if layer >= schema.layer_count {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {} layers",
            schema.layer_count
        )));
    }
    Ok(clamp_to_image(&accumulate_layer(pose, schema, layer, size), size))
}

pub fn render_stack(
    pose: &Pose,
    schema: &KeypointSchema,
    size: (usize, usize),
) -> Result<ConditioningStack> {
    let layer_maps = (0..schema.layer_count)
        .map(|l| render_layer(pose, schema, l, size))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0f64; size.0 * size.1 * 3];
    for m in &layer_maps {
        for (s, &v) in sum.iter_mut().zip(m.as_raw()) {
            *s += v as f64;
        }
    }
    Ok(ConditioningStack {
        combined_map: clamp_to_image(&sum, size),
        layer_maps,
    })
}
