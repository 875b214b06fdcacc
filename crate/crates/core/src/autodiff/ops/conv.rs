//! 2-D cross-correlation by im2col + GEMM.

use crate::autodiff::tape::{InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{as_nchw, gemm, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a window op, or an error naming the op.
pub(crate) fn window_extent(len: usize, k: usize, stride: usize, pad: usize, what: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim(format!("{what}: stride must be positive")));
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::dim(format!("{what}: window {k} larger than padded extent {padded}")));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::dim(format!(
            "{what}: ({len} + 2*{pad} - {k}) / {stride} + 1 is not integral"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn im2col<S: Real>(x: &[S], g: &ConvGeometry, cols: &mut [S]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<S: Real>(cols: &[S], g: &ConvGeometry, dx: &mut [S]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<S: Real> Tape<S> {
    /// Cross-correlation of `[n, c, h, w]` (or `[c, h, w]`) input with
    /// `[f, c, k, k]` kernels and zero padding.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = as_nchw(&xs, "conv2d")?;
        let [f, kc, k, k2] = match *self.shape(kernels) {
            [f, kc, k, k2] => [f, kc, k, k2],
            ref s => return Err(Error::dim(format!("conv2d kernels must be F x C x k x k, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::dim(format!("conv2d kernels expect {kc} channels, input has {c}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::dim(format!("conv2d needs square odd kernels, got {k}x{k2}")));
        }
        let out_h = window_extent(h, k, stride, pad, "conv2d height")?;
        let out_w = window_extent(w, k, stride, pad, "conv2d width")?;
        let g = ConvGeometry { n, c, h, w, f, k, stride, pad, out_h, out_w };

        let xd = self.value(x).data();
        let wd = self.value(kernels).data();
        let plane = g.out_plane();
        let mut out = vec![S::zero(); n * f * plane];
        let mut cols = if g.direct() { Vec::new() } else { vec![S::zero(); g.patch() * plane] };
        for i in 0..n {
            let xi = &xd[i * c * h * w..(i + 1) * c * h * w];
            let cols_ref: &[S] = if g.direct() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            gemm(
                MatRef::new(wd, f, g.patch()),
                MatRef::new(cols_ref, g.patch(), plane),
                S::zero(),
                &mut out[i * f * plane..(i + 1) * f * plane],
            );
        }
        let shape: Vec<usize> = if xs.len() == 3 { vec![f, out_h, out_w] } else { vec![n, f, out_h, out_w] };
        Ok(self.push(Tensor::new(&shape, out)?, vec![x, kernels], Op::Conv2d(g)))
    }
}

pub(crate) fn backward<S: Real>(g: &ConvGeometry, inputs: &[&Tensor<S>], gout: &[S], need: &[bool]) -> InputGrads<S> {
    let xd = inputs[0].data();
    let wd = inputs[1].data();
    let plane = g.out_plane();
    let patch = g.patch();
    let in_size = g.c * g.h * g.w;
    let mut dx = need[0].then(|| vec![S::zero(); xd.len()]);
    let mut dw = need[1].then(|| vec![S::zero(); wd.len()]);
    let mut cols = if g.direct() { Vec::new() } else { vec![S::zero(); patch * plane] };
    let mut dcols = if g.direct() || dx.is_none() { Vec::new() } else { vec![S::zero(); patch * plane] };

    for i in 0..g.n {
        let go = &gout[i * g.f * plane..(i + 1) * g.f * plane];
        let xi = &xd[i * in_size..(i + 1) * in_size];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[S] = if g.direct() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            gemm(
                MatRef::new(go, g.f, plane),
                MatRef::new(cols_ref, patch, plane).t(),
                S::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_size..(i + 1) * in_size];
            if g.direct() {
                gemm(MatRef::new(wd, g.f, patch).t(), MatRef::new(go, g.f, plane), S::one(), dxi);
            } else {
                gemm(MatRef::new(wd, g.f, patch).t(), MatRef::new(go, g.f, plane), S::zero(), &mut dcols);
                col2im(&dcols, g, dxi);
            }
        }
    }
    vec![dx, dw]
}
