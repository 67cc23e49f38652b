//! 2D convolution as im2col + GEMM with an explicit backward pass.
//!
//! candle's CPU convolution computes the kernel gradient as a convolution
//! with the whole output map as kernel, which dominates training time on
//! small CPUs. Both gradients here are a single GEMM per image.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use gemm::Parallelism;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> candle_core::Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        candle_core::bail!("conv2d kernel {k} larger than padded input {padded}");
    }
    Ok((padded - k) / stride + 1)
}

trait Scalar: Copy + Default + std::ops::AddAssign + 'static {
    const ONE: Self;
}

impl Scalar for f32 {
    const ONE: Self = 1.0;
}

impl Scalar for f64 {
    const ONE: Self = 1.0;
}

/// Columns for output rows `oy0..oy1`: a `K x ((oy1 - oy0) * ow)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, oy0: usize, oy1: usize, cols: &mut [T]) {
    let p = (oy1 - oy0) * g.ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                // valid ox satisfy 0 <= ox * stride + kj - pad < w
                let lo = (g.pad.saturating_sub(kj)).div_ceil(g.stride).min(g.ow);
                let hi = if g.w + g.pad > kj {
                    ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow)
                } else {
                    0
                }
                .max(lo);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::default());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::default());
                    out_row[hi..].fill(T::default());
                    if hi == lo {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, o) in out_row[lo..hi].iter_mut().enumerate() {
                            *o = src[(ox + lo) * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Output rows per im2col tile, sized so the tile stays cache resident.
fn tile_rows(g: &Geometry) -> usize {
    const TILE_ELEMS: usize = 1 << 17;
    (TILE_ELEMS / (g.k() * g.ow).max(1)).clamp(1, g.oh)
}

/// Scatter-add the columns of output rows `oy0..oy1` back into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, oy0: usize, oy1: usize, dx: &mut [T]) {
    let p = (oy1 - oy0) * g.ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let lo = (g.pad.saturating_sub(kj)).div_ceil(g.stride).min(g.ow);
                let hi = if g.w + g.pad > kj {
                    ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow)
                } else {
                    0
                }
                .max(lo);
                if hi == lo {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[(oy - oy0) * g.ow + lo..(oy - oy0) * g.ow + hi];
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in s.iter().enumerate() {
                            dst[(i + lo) * g.stride + kj - g.pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix view: element `(i, j)` at `i * rs + j * cs`.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<'a, T> Mat<'a, T> {
    fn rows(data: &'a [T], rs: usize) -> Self {
        Self { data, rs, cs: 1 }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `dst (m x n) = [dst +] lhs (m x k) * rhs (k x n)`; `dst` rows are
/// `dst_rs` apart.
fn matmul<T: Scalar>(
    (m, n, k): (usize, usize, usize),
    dst: &mut [T],
    dst_rs: usize,
    accumulate: bool,
    lhs: Mat<T>,
    rhs: Mat<T>,
) {
    debug_assert!(m == 0 || dst.len() >= (m - 1) * dst_rs + n);
    // SAFETY: callers pass views whose strided extents lie inside the slices.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.data.as_ptr(),
            lhs.cs as isize,
            lhs.rs as isize,
            rhs.data.as_ptr(),
            rhs.cs as isize,
            rhs.rs as isize,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            Parallelism::None,
        );
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d expects contiguous inputs"),
    }
}

/// Visit output-row tiles `(oy0, oy1)` sized by [`tile_rows`].
fn for_tiles(g: &Geometry, mut f: impl FnMut(usize, usize)) {
    let rows = tile_rows(g);
    let mut oy0 = 0;
    while oy0 < g.oh {
        let oy1 = (oy0 + rows).min(g.oh);
        f(oy0, oy1);
        oy0 = oy1;
    }
}

fn col_buffer<T: Scalar>(g: &Geometry) -> Vec<T> {
    if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::default(); g.k() * tile_rows(g) * g.ow]
    }
}

fn forward<T: Scalar>(x: &[T], w: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::default(); n * g.cout * p];
    let mut cols = col_buffer(g);
    let wm = Mat::rows(w, k);
    for b in 0..n {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        if g.is_pointwise() {
            matmul((g.cout, p, k), ob, p, false, wm, Mat::rows(xb, p));
            continue;
        }
        for_tiles(g, |oy0, oy1| {
            let tp = (oy1 - oy0) * g.ow;
            im2col(xb, g, oy0, oy1, &mut cols[..k * tp]);
            matmul((g.cout, tp, k), &mut ob[oy0 * g.ow..], p, false, wm, Mat::rows(&cols[..k * tp], tp));
        });
    }
    out
}

fn grad_input<T: Scalar>(dy: &[T], w: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let plane = g.cin * g.h * g.w;
    let mut dx = vec![T::default(); n * plane];
    let mut dcols = col_buffer(g);
    let wt = Mat::rows(w, k).t();
    for b in 0..n {
        let dyb = &dy[b * g.cout * p..(b + 1) * g.cout * p];
        let dxb = &mut dx[b * plane..(b + 1) * plane];
        if g.is_pointwise() {
            matmul((k, p, g.cout), dxb, p, false, wt, Mat::rows(dyb, p));
            continue;
        }
        for_tiles(g, |oy0, oy1| {
            let tp = (oy1 - oy0) * g.ow;
            let tile = &mut dcols[..k * tp];
            matmul((k, tp, g.cout), tile, tp, false, wt, Mat::rows(&dyb[oy0 * g.ow..], p));
            col2im(tile, g, oy0, oy1, dxb);
        });
    }
    dx
}

fn grad_weight<T: Scalar>(x: &[T], dy: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut dw = vec![T::default(); g.cout * k];
    let mut cols = col_buffer(g);
    let mut first = true;
    for b in 0..n {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let dyb = &dy[b * g.cout * p..(b + 1) * g.cout * p];
        if g.is_pointwise() {
            matmul((g.cout, k, p), &mut dw, k, !first, Mat::rows(dyb, p), Mat::rows(xb, p).t());
            first = false;
            continue;
        }
        for_tiles(g, |oy0, oy1| {
            let tp = (oy1 - oy0) * g.ow;
            im2col(xb, g, oy0, oy1, &mut cols[..k * tp]);
            let dyt = Mat::rows(&dyb[oy0 * g.ow..], p);
            matmul((g.cout, k, tp), &mut dw, k, !first, dyt, Mat::rows(&cols[..k * tp], tp).t());
            first = false;
        });
    }
    dw
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

struct Conv2dGradInput {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

struct Conv2dGradWeight {
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let $a = contiguous(a, $l1)?;
                let $b = contiguous(b, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let $a = contiguous(a, $l1)?;
                let $b = contiguous(b, $l2)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        }
    };
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, cin, h, w) = l1.shape().dims4()?;
        let (cout, cin_w, kh, kw) = l2.shape().dims4()?;
        if cin != cin_w {
            candle_core::bail!("conv2d: input has {cin} channels, kernel expects {cin_w}");
        }
        let g = Geometry {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            oh: out_dim(h, kh, self.stride, self.pad)?,
            ow: out_dim(w, kw, self.stride, self.pad)?,
        };
        let storage = dispatch!(s1, l1, s2, l2, |x, k| forward(x, k, n, &g));
        Ok((storage, Shape::from((n, cout, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, w) = arg.dims4()?;
        let (_, _, kh, kw) = kernel.dims4()?;
        let dx = grad.apply_op2_no_bwd(
            &kernel.detach().contiguous()?,
            &Conv2dGradInput {
                stride: self.stride,
                pad: self.pad,
                h,
                w,
            },
        )?;
        let dw = arg.detach().contiguous()?.apply_op2_no_bwd(
            &grad,
            &Conv2dGradWeight {
                stride: self.stride,
                pad: self.pad,
                kh,
                kw,
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "gemm-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, cout, oh, ow) = l1.shape().dims4()?;
        let (_, cin, kh, kw) = l2.shape().dims4()?;
        let g = Geometry {
            cin,
            h: self.h,
            w: self.w,
            cout,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
            oh,
            ow,
        };
        let storage = dispatch!(s1, l1, s2, l2, |dy, k| grad_input(dy, k, n, &g));
        Ok((storage, Shape::from((n, cin, self.h, self.w))))
    }
}

impl CustomOp2 for Conv2dGradWeight {
    fn name(&self) -> &'static str {
        "gemm-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, cin, h, w) = l1.shape().dims4()?;
        let (_, cout, oh, ow) = l2.shape().dims4()?;
        let g = Geometry {
            cin,
            h,
            w,
            cout,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            oh,
            ow,
        };
        let storage = dispatch!(s1, l1, s2, l2, |x, dy| grad_weight(x, dy, n, &g));
        Ok((storage, Shape::from((cout, cin, self.kh, self.kw))))
    }
}

/// Zero-padded 2D convolution of `x: [N, Cin, H, W]` with `kernel: [Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d stride must be positive");
    }
    x.contiguous()?
        .apply_op2(&kernel.contiguous()?, Conv2dOp { stride, pad })
}
