//! Grid generator and bilinear sampler of the spatial transformer.
//!
//! Affine matrices act on a regular base grid in normalized coordinates
//! `[-1, 1] x [-1, 1]`. The transformed points are mapped to input pixel
//! coordinates with corner alignment: normalized `-1` is pixel `0` and `+1`
//! is pixel `len - 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Fault, InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One 2x3 affine matrix `[[t1, t2, t3], [t4, t5, t6]]`, stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub theta: [f64; 6],
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { theta: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] };

    pub fn new(theta: [f64; 6]) -> Self {
        Self { theta }
    }

    /// Zoom and translation only.
    pub fn scale_translate(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Self { theta: [sx, 0.0, tx, 0.0, sy, ty] }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// Rotation and skew terms are exactly zero.
    pub fn is_axis_aligned(&self) -> bool {
        self.theta[1] == 0.0 && self.theta[3] == 0.0
    }

    /// Matrix of `self ∘ inner` (apply `inner` first).
    pub fn compose(&self, inner: &AffineParams) -> AffineParams {
        let [a1, a2, a3, a4, a5, a6] = self.theta;
        let [b1, b2, b3, b4, b5, b6] = inner.theta;
        AffineParams {
            theta: [
                a1 * b1 + a2 * b4,
                a1 * b2 + a2 * b5,
                a1 * b3 + a2 * b6 + a3,
                a4 * b1 + a5 * b4,
                a4 * b2 + a5 * b5,
                a4 * b3 + a5 * b6 + a6,
            ],
        }
    }

    /// Applies the matrix to a normalized point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let t = &self.theta;
        (t[0] * x + t[1] * y + t[2], t[3] * x + t[4] * y + t[5])
    }
}

/// Input-pixel sampling coordinates for one region.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major `(u, v)` pairs: `u` along the input width, `v` along its height.
    pub coords: Vec<(f64, f64)>,
    pub region_index: usize,
}

impl SamplingGrid {
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        self.coords[row * self.width + col]
    }

    /// Top-left, top-right, bottom-left, bottom-right of the base grid.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (h, w) = (self.height - 1, self.width - 1);
        [self.at(0, 0), self.at(0, w), self.at(h, 0), self.at(h, w)]
    }
}

/// Region outline given by the four grid corners, in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    /// Top-left, top-right, bottom-left, bottom-right.
    pub corners: [(f64, f64); 4],
}

impl BoundingBox {
    /// Axis-aligned hull `[x0, y0, x1, y1]`.
    pub fn to_xyxy(&self) -> [f64; 4] {
        let xs = self.corners.map(|c| c.0);
        let ys = self.corners.map(|c| c.1);
        let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
        let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
        [min(xs), min(ys), max(xs), max(ys)]
    }

    /// Hull clipped to a `height x width` canvas; the sampler reads zeros
    /// outside it.
    pub fn clipped(&self, height: usize, width: usize) -> [f64; 4] {
        let [x0, y0, x1, y1] = self.to_xyxy();
        let (w, h) = (width as f64, height as f64);
        [x0.clamp(0.0, w), y0.clamp(0.0, h), x1.clamp(0.0, w), y1.clamp(0.0, h)]
    }

    /// Corners form an axis-aligned rectangle, compared exactly.
    pub fn is_axis_aligned(&self) -> bool {
        let [tl, tr, bl, br] = self.corners;
        tl.1 == tr.1 && bl.1 == br.1 && tl.0 == bl.0 && tr.0 == br.0
    }
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GridGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl GridGeometry {
    fn new(out_h: usize, out_w: usize, in_h: usize, in_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::contract(format!("grid size must be at least 1x1, got {out_h}x{out_w}")));
        }
        if in_h == 0 || in_w == 0 {
            return Err(Error::contract("input extent must be positive"));
        }
        Ok(Self { out_h, out_w, in_h, in_w })
    }

    /// Normalized base coordinate of index `i` out of `n` points.
    fn base(i: usize, n: usize) -> f64 {
        if n == 1 {
            0.0
        } else {
            (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64
        }
    }

    fn half_w(&self) -> f64 {
        (self.in_w - 1) as f64 / 2.0
    }

    fn half_h(&self) -> f64 {
        (self.in_h - 1) as f64 / 2.0
    }

    /// Lattice position of index `i` when `n` points span `extent` pixels.
    fn lattice(i: usize, n: usize, extent: usize) -> f64 {
        if n == 1 {
            (extent - 1) as f64 / 2.0
        } else {
            (i * (extent - 1)) as f64 / (n - 1) as f64
        }
    }

    /// `((θ·[x, y, 1]) + 1) * half`, split into the identity part, computed
    /// exactly, and the residual `θ - I`; identity maps land on integers.
    fn point(&self, theta: &[f64; 6], row: usize, col: usize) -> (f64, f64) {
        let x = Self::base(col, self.out_w);
        let y = Self::base(row, self.out_h);
        let du = (theta[0] - 1.0) * x + theta[1] * y + theta[2];
        let dv = theta[3] * x + (theta[4] - 1.0) * y + theta[5];
        (
            Self::lattice(col, self.out_w, self.in_w) + du * self.half_w(),
            Self::lattice(row, self.out_h, self.in_h) + dv * self.half_h(),
        )
    }
}

/// Maps the regular `out_h x out_w` base grid through `theta` into input
/// pixel coordinates of an `in_h x in_w` image.
pub fn generate_grid(
    theta: &AffineParams,
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
) -> Result<SamplingGrid> {
    if !theta.is_finite() {
        return Err(Error::contract(format!("non-finite affine parameters {:?}", theta.theta)));
    }
    let g = GridGeometry::new(out_h, out_w, in_h, in_w)?;
    let coords = (0..out_h)
        .flat_map(|r| (0..out_w).map(move |c| (r, c)))
        .map(|(r, c)| g.point(&theta.theta, r, c))
        .collect();
    Ok(SamplingGrid { height: out_h, width: out_w, coords, region_index: 0 })
}

/// Bounding boxes from the corner points of each grid.
pub fn extract_boxes(grids: &[SamplingGrid]) -> Vec<BoundingBox> {
    grids.iter().map(|g| BoundingBox { corners: g.corners() }).collect()
}

/// Lower neighbour index and fractional offset in `(0, 1]`.
///
/// Using `ceil - 1` instead of `floor` makes integer coordinates take weight 1
/// on the upper neighbour, which gives the left-continuous subgradient at
/// lattice points and keeps integer sampling exact.
#[inline]
fn split<S: Real>(u: S) -> (isize, S) {
    let base = u.ceil() - S::one();
    (base.to_isize().unwrap_or(isize::MIN / 2), u - base)
}

#[inline]
fn fetch<S: Real>(plane: &[S], h: usize, w: usize, y: isize, x: isize) -> S {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        S::zero()
    }
}

/// Core sampler: `input` is `[b, c, h, w]`, `grid` holds `(u, v)` pairs for
/// `b * regions` regions of `out_plane` points each.
fn sample_kernel<S: Real>(
    input: &[S],
    [b, c, h, w]: [usize; 4],
    grid: &[S],
    regions: usize,
    out_plane: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); b * regions * c * out_plane];
    for m in 0..b * regions {
        let img = m / regions;
        for p in 0..out_plane {
            let u = grid[(m * out_plane + p) * 2];
            let v = grid[(m * out_plane + p) * 2 + 1];
            let (x0, fx) = split(u);
            let (y0, fy) = split(v);
            let (gx, gy) = (S::one() - fx, S::one() - fy);
            for ch in 0..c {
                let plane = &input[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                let val = gx * gy * fetch(plane, h, w, y0, x0)
                    + fx * gy * fetch(plane, h, w, y0, x0 + 1)
                    + gx * fy * fetch(plane, h, w, y0 + 1, x0)
                    + fx * fy * fetch(plane, h, w, y0 + 1, x0 + 1);
                out[(m * c + ch) * out_plane + p] = val;
            }
        }
    }
    out
}

/// Samples a `C x H x W` image on one grid, returning `C x H_o x W_o`.
/// Points outside the image read zeros.
pub fn bilinear_sample<S: Real>(input: &Tensor<S>, grid: &SamplingGrid) -> Result<Tensor<S>> {
    let [c, h, w] = match *input.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(Error::dim(format!("bilinear_sample expects C x H x W, got {s:?}"))),
    };
    if grid.coords.len() != grid.height * grid.width {
        return Err(Error::dim("grid coordinate count does not match its size"));
    }
    if grid.coords.iter().any(|(u, v)| !u.is_finite() || !v.is_finite()) {
        return Err(Error::contract("non-finite sampling coordinates"));
    }
    let flat: Vec<S> = grid.coords.iter().flat_map(|&(u, v)| [S::lit(u), S::lit(v)]).collect();
    let out = sample_kernel(input.data(), [1, c, h, w], &flat, 1, grid.coords.len());
    Tensor::new(&[c, grid.height, grid.width], out)
}

impl<S: Real> Tape<S> {
    /// `[m, 6]` affine parameters to `[m, out_h, out_w, 2]` pixel coordinates.
    pub fn affine_grid(&mut self, theta: Var, out_h: usize, out_w: usize, in_h: usize, in_w: usize) -> Result<Var> {
        let m = match *self.shape(theta) {
            [m, 6] => m,
            ref s => return Err(Error::dim(format!("affine_grid expects [m, 6] parameters, got {s:?}"))),
        };
        let g = GridGeometry::new(out_h, out_w, in_h, in_w)?;
        let td = self.value(theta).data();
        let mut out = Vec::with_capacity(m * out_h * out_w * 2);
        for r in 0..m {
            let t: [f64; 6] = std::array::from_fn(|i| td[r * 6 + i].to_f64_lossy());
            for row in 0..out_h {
                for col in 0..out_w {
                    let (u, v) = g.point(&t, row, col);
                    out.push(S::lit(u));
                    out.push(S::lit(v));
                }
            }
        }
        let value = Tensor::new(&[m, out_h, out_w, 2], out)?;
        Ok(self.push(value, vec![theta], Op::AffineGrid(g)))
    }

    /// Samples `[b, c, h, w]` input at `[b * regions, h_o, w_o, 2]` grid
    /// coordinates; region `m` reads image `m / regions`. Output is
    /// `[b * regions, c, h_o, w_o]`.
    pub fn bilinear_sample(&mut self, input: Var, grid: Var, regions_per_image: usize) -> Result<Var> {
        let [b, c, h, w] = match *self.shape(input) {
            [b, c, h, w] => [b, c, h, w],
            ref s => return Err(Error::dim(format!("sampler input must be [b, c, h, w], got {s:?}"))),
        };
        let [m, oh, ow] = match *self.shape(grid) {
            [m, oh, ow, 2] => [m, oh, ow],
            ref s => return Err(Error::dim(format!("sampler grid must be [m, h_o, w_o, 2], got {s:?}"))),
        };
        if regions_per_image == 0 || m != b * regions_per_image {
            return Err(Error::dim(format!(
                "{m} grids for {b} images with {regions_per_image} regions each"
            )));
        }
        if !self.value(grid).all_finite() {
            return Err(Error::contract("non-finite sampling coordinates"));
        }
        let out = sample_kernel(self.value(input).data(), [b, c, h, w], self.value(grid).data(), regions_per_image, oh * ow);
        let value = Tensor::new(&[m, c, oh, ow], out)?;
        Ok(self.push(value, vec![input, grid], Op::BilinearSample { regions_per_image }))
    }
}

pub(crate) fn affine_grid_backward<S: Real>(g: &GridGeometry, gout: &[S]) -> InputGrads<S> {
    let plane = g.out_h * g.out_w;
    let m = gout.len() / (plane * 2);
    let (hw, hh) = (g.half_w(), g.half_h());
    let mut dtheta = vec![S::zero(); m * 6];
    for r in 0..m {
        let mut acc = [0.0f64; 6];
        for row in 0..g.out_h {
            let y = GridGeometry::base(row, g.out_h);
            for col in 0..g.out_w {
                let x = GridGeometry::base(col, g.out_w);
                let at = (r * plane + row * g.out_w + col) * 2;
                let gu = gout[at].to_f64_lossy() * hw;
                let gv = gout[at + 1].to_f64_lossy() * hh;
                acc[0] += gu * x;
                acc[1] += gu * y;
                acc[2] += gu;
                acc[3] += gv * x;
                acc[4] += gv * y;
                acc[5] += gv;
            }
        }
        for (d, a) in dtheta[r * 6..r * 6 + 6].iter_mut().zip(acc) {
            *d = S::lit(a);
        }
    }
    vec![Some(dtheta)]
}

pub(crate) fn bilinear_backward<S: Real>(
    regions: usize,
    inputs: &[&Tensor<S>],
    gout: &[S],
    need: &[bool],
    fault: Option<Fault>,
) -> InputGrads<S> {
    let [b, c, h, w] = match *inputs[0].shape() {
        [b, c, h, w] => [b, c, h, w],
        _ => unreachable!("validated in forward"),
    };
    let input = inputs[0].data();
    let grid = inputs[1].data();
    let m = b * regions;
    let out_plane = grid.len() / (2 * m);
    let mut dinput = need[0].then(|| vec![S::zero(); input.len()]);
    let mut dgrid = need[1].then(|| vec![S::zero(); grid.len()]);

    let scatter = |d: &mut Vec<S>, base: usize, y: isize, x: isize, v: S| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            d[base + y as usize * w + x as usize] += v;
        }
    };

    for r in 0..m {
        let img = r / regions;
        for p in 0..out_plane {
            let u = grid[(r * out_plane + p) * 2];
            let v = grid[(r * out_plane + p) * 2 + 1];
            let (x0, fx) = split(u);
            let (y0, fy) = split(v);
            let (gx, gy) = (S::one() - fx, S::one() - fy);
            let mut du = S::zero();
            let mut dv = S::zero();
            for ch in 0..c {
                let g = gout[(r * c + ch) * out_plane + p];
                let base = (img * c + ch) * h * w;
                if let Some(d) = dinput.as_mut() {
                    scatter(d, base, y0, x0, g * gx * gy);
                    scatter(d, base, y0, x0 + 1, g * fx * gy);
                    scatter(d, base, y0 + 1, x0, g * gx * fy);
                    scatter(d, base, y0 + 1, x0 + 1, g * fx * fy);
                }
                if dgrid.is_some() {
                    let plane = &input[base..base + h * w];
                    let i00 = fetch(plane, h, w, y0, x0);
                    let i01 = fetch(plane, h, w, y0, x0 + 1);
                    let i10 = fetch(plane, h, w, y0 + 1, x0);
                    let i11 = fetch(plane, h, w, y0 + 1, x0 + 1);
                    du += g * ((i01 - i00) * gy + (i11 - i10) * fy);
                    dv += g * ((i10 - i00) * gx + (i11 - i01) * fx);
                }
            }
            if let Some(d) = dgrid.as_mut() {
                if fault == Some(Fault::SamplerSignFlip) {
                    du = -du;
                    dv = -dv;
                }
                d[(r * out_plane + p) * 2] = du;
                d[(r * out_plane + p) * 2 + 1] = dv;
            }
        }
    }
    vec![dinput, dgrid]
}
