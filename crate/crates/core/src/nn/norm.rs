//! Fused instance normalization (no affine parameters).

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use super::NORM_EPS;

trait Float: Copy + Default + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Float for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Float for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Mean and inverse standard deviation of one plane, accumulated in f64.
fn moments<T: Float>(plane: &[T]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = plane
        .iter()
        .map(|v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn normalize<T: Float>(x: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for (src, dst) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        let (mean, inv_std) = moments(src);
        for (o, v) in dst.iter_mut().zip(src) {
            *o = T::from_f64((v.to_f64() - mean) * inv_std);
        }
    }
    out
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per plane.
fn backward<T: Float>(x: &[T], dy: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    let n = plane as f64;
    for ((xs, gs), dst) in x.chunks(plane).zip(dy.chunks(plane)).zip(out.chunks_mut(plane)) {
        let (mean, inv_std) = moments(xs);
        let mut g_mean = 0.0;
        let mut gy_mean = 0.0;
        for (v, g) in xs.iter().zip(gs) {
            let y = (v.to_f64() - mean) * inv_std;
            g_mean += g.to_f64();
            gy_mean += g.to_f64() * y;
        }
        g_mean /= n;
        gy_mean /= n;
        for ((o, v), g) in dst.iter_mut().zip(xs).zip(gs) {
            let y = (v.to_f64() - mean) * inv_std;
            *o = T::from_f64(inv_std * (g.to_f64() - g_mean - y * gy_mean));
        }
    }
    out
}

fn plane_size(layout: &Layout) -> candle_core::Result<usize> {
    let (_, _, h, w) = layout.shape().dims4()?;
    Ok(h * w)
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("instance norm expects a contiguous input"),
    }
}

struct InstanceNorm;
struct InstanceNormGrad;

impl CustomOp1 for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(normalize(slice(v, l)?, plane)),
            CpuStorage::F64(v) => CpuStorage::F64(normalize(slice(v, l)?, plane)),
            _ => candle_core::bail!("instance norm supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dx = arg
            .detach()
            .contiguous()?
            .apply_op2_no_bwd(&grad.contiguous()?, &InstanceNormGrad)?;
        Ok(Some(dx))
    }
}

impl CustomOp2 for InstanceNormGrad {
    fn name(&self) -> &'static str {
        "instance-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let plane = plane_size(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(backward(slice(x, l1)?, slice(g, l2)?, plane))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(backward(slice(x, l1)?, slice(g, l2)?, plane))
            }
            _ => candle_core::bail!("instance norm supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Per-sample, per-channel normalization of `[N, C, H, W]`.
pub fn instance_norm(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(InstanceNorm)
}
