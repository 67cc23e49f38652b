use nalgebra::{DMatrix, LU};
use rand::Rng;

use crate::dataset::Point;
use crate::error::{Error, Result};
use crate::raster::{Image, Mask, Rgb};

const MAX_FIT_RETRIES: usize = 8;
/// Per-axis density of the correspondences the backward spline is fitted to.
const BACKWARD_GRID: usize = 12;

/// Radial basis `U(d) = d² log d²`, written in terms of `d²`.
#[inline]
fn kernel(d_sq: f64) -> f64 {
    if d_sq <= 0.0 {
        0.0
    } else {
        d_sq * d_sq.ln()
    }
}

/// Interpolating 2D thin-plate spline.
///
/// Coordinates are normalized by `scale` before fitting so the kernel
/// stays well conditioned at any canvas size.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    ctrl: Vec<Point>,
    weights: Vec<[f64; 2]>,
    // rows: constant, x, y
    affine: [[f64; 2]; 3],
    scale: f64,
}

impl ThinPlateSpline {
    pub fn fit(src: &[Point], dst: &[Point], scale: f64) -> Result<Self> {
        let n = src.len();
        if n != dst.len() || n < 3 {
            return Err(Error::DegenerateSpline(format!(
                "need matching point sets of at least 3, got {} and {}",
                src.len(),
                dst.len()
            )));
        }
        let norm = |p: &Point| [p[0] / scale, p[1] / scale];
        let ctrl: Vec<Point> = src.iter().map(norm).collect();
        let targets: Vec<Point> = dst.iter().map(norm).collect();

        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = ctrl[i][0] - ctrl[j][0];
                let dy = ctrl[i][1] - ctrl[j][1];
                a[(i, j)] = kernel(dx * dx + dy * dy);
            }
            let p = [1.0, ctrl[i][0], ctrl[i][1]];
            for k in 0..3 {
                a[(i, n + k)] = p[k];
                a[(n + k, i)] = p[k];
            }
        }
        let mut b = DMatrix::<f64>::zeros(m, 2);
        for i in 0..n {
            b[(i, 0)] = targets[i][0];
            b[(i, 1)] = targets[i][1];
        }
        let sol = LU::new(a)
            .solve(&b)
            .ok_or_else(|| Error::DegenerateSpline("singular system (collinear control points?)".into()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateSpline("non-finite solution".into()));
        }
        let spline = Self {
            weights: (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect(),
            affine: [
                [sol[(n, 0)], sol[(n, 1)]],
                [sol[(n + 1, 0)], sol[(n + 1, 1)]],
                [sol[(n + 2, 0)], sol[(n + 2, 1)]],
            ],
            ctrl,
            scale,
        };
        // A near-singular system solves without error but stops interpolating.
        for (s, d) in src.iter().zip(dst) {
            let e = spline.eval(*s);
            if (e[0] - d[0]).abs() > 1e-6 * scale || (e[1] - d[1]).abs() > 1e-6 * scale {
                return Err(Error::DegenerateSpline("fit does not interpolate its control points".into()));
            }
        }
        Ok(spline)
    }

    pub fn eval(&self, p: Point) -> Point {
        let x = p[0] / self.scale;
        let y = p[1] / self.scale;
        let a = &self.affine;
        let mut out = [
            a[0][0] + a[1][0] * x + a[2][0] * y,
            a[0][1] + a[1][1] * x + a[2][1] * y,
        ];
        for (c, w) in self.ctrl.iter().zip(&self.weights) {
            let dx = x - c[0];
            let dy = y - c[1];
            let u = kernel(dx * dx + dy * dy);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        [out[0] * self.scale, out[1] * self.scale]
    }
}

/// Random elastic warp: an `n x n` control grid with per-point shifts.
///
/// `forward` maps original positions to warped positions (keypoints),
/// `backward` maps warped positions back (image resampling). The backward
/// spline is fitted to a dense sampling of the forward map, so the two agree
/// closely but are not exact inverses.
#[derive(Clone, Debug)]
pub struct TpsWarp {
    forward: Option<ThinPlateSpline>,
    backward: Option<ThinPlateSpline>,
}

impl TpsWarp {
    pub fn identity() -> Self {
        Self {
            forward: None,
            backward: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.forward.is_none()
    }

    /// Control grid covering the canvas corners, row-major.
    pub fn grid(dims: (usize, usize), n: usize) -> Vec<Point> {
        let (w, h) = dims;
        let mut pts = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                pts.push([
                    i as f64 * (w.saturating_sub(1)) as f64 / (n - 1) as f64,
                    j as f64 * (h.saturating_sub(1)) as f64 / (n - 1) as f64,
                ]);
            }
        }
        pts
    }

    pub fn from_grid_shifts(dims: (usize, usize), n: usize, shifts: &[Point]) -> Result<Self> {
        if n < 2 || shifts.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "expected {} shifts for a {n}x{n} grid, got {}",
                n * n,
                shifts.len()
            )));
        }
        if shifts.iter().all(|s| s[0] == 0.0 && s[1] == 0.0) {
            return Ok(Self::identity());
        }
        let src = Self::grid(dims, n);
        let dst: Vec<Point> = src
            .iter()
            .zip(shifts)
            .map(|(p, s)| [p[0] + s[0], p[1] + s[1]])
            .collect();
        let scale = dims.0.max(dims.1).max(1) as f64;
        let forward = ThinPlateSpline::fit(&src, &dst, scale)?;
        let dense = Self::grid(dims, BACKWARD_GRID.max(n));
        let warped: Vec<Point> = dense.iter().map(|&p| forward.eval(p)).collect();
        Ok(Self {
            backward: Some(ThinPlateSpline::fit(&warped, &dense, scale)?),
            forward: Some(forward),
        })
    }

    /// Shifts drawn uniformly from `[-max_shift_frac * size, +max_shift_frac * size]`
    /// per axis; degenerate draws are retried a bounded number of times.
    pub fn random<R: Rng + ?Sized>(
        dims: (usize, usize),
        n: usize,
        max_shift_frac: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mx = max_shift_frac * dims.0 as f64;
        let my = max_shift_frac * dims.1 as f64;
        let mut last_err = None;
        for _ in 0..MAX_FIT_RETRIES {
            let shifts: Vec<Point> = (0..n * n)
                .map(|_| {
                    [
                        if mx > 0.0 { rng.random_range(-mx..=mx) } else { 0.0 },
                        if my > 0.0 { rng.random_range(-my..=my) } else { 0.0 },
                    ]
                })
                .collect();
            match Self::from_grid_shifts(dims, n, &shifts) {
                Ok(w) => return Ok(w),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::DegenerateSpline("no attempts made".into())))
    }

    pub fn map_point(&self, p: Point) -> Point {
        match &self.forward {
            Some(f) => f.eval(p),
            None => p,
        }
    }

    /// Source coordinate for output pixel `(x, y)`.
    pub fn source_of(&self, p: Point) -> Point {
        match &self.backward {
            Some(b) => b.eval(p),
            None => p,
        }
    }

    pub fn warp_image(&self, img: &Image, fill: Rgb) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let (w, h) = img.dims();
        let mut out = Image::filled(w, h, fill);
        for y in 0..h {
            for x in 0..w {
                let [sx, sy] = self.source_of([x as f64, y as f64]);
                out.set(x, y, img.sample_bilinear(sx, sy, fill));
            }
        }
        out
    }

    pub fn warp_mask(&self, mask: &Mask) -> Mask {
        if self.is_identity() {
            return mask.clone();
        }
        let (w, h) = mask.dims();
        Mask::from_fn(w, h, |x, y| {
            let [sx, sy] = self.source_of([x as f64, y as f64]);
            let (rx, ry) = (sx.round(), sy.round());
            rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h && mask.get(rx as usize, ry as usize)
        })
    }
}
