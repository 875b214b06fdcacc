use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{as_nchw, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Average pooling into `out_h x out_w` bins that tile the whole plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AdaptiveGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Half-open input range of bin `i` out of `bins` over `len` positions.
fn bin(i: usize, bins: usize, len: usize) -> (usize, usize) {
    (i * len / bins, ((i + 1) * len).div_ceil(bins))
}

pub(crate) struct MaxPoolSaved<S> {
    pub argmax: Vec<usize>,
    /// Smallest gap between a window's maximum and its runner-up.
    pub min_gap: S,
}

fn extent(len: usize, k: usize, stride: usize, what: &str) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::dim(format!("{what}: window and stride must be positive")));
    }
    if k > len {
        return Err(Error::dim(format!("{what}: window {k} larger than input extent {len}")));
    }
    Ok((len - k) / stride + 1)
}

impl<S: Real> Tape<S> {
    /// Square `k x k` pooling with the given stride and no padding. Trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn pool(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = as_nchw(self.shape(x), "pool")?;
        let g = PoolGeometry {
            n,
            c,
            h,
            w,
            kh: k,
            kw: k,
            sh: stride,
            sw: stride,
            out_h: extent(h, k, stride, "pool height")?,
            out_w: extent(w, k, stride, "pool width")?,
        };
        self.pool_with(x, kind, g)
    }

    /// Mean over each channel plane, keeping a `1 x 1` spatial extent.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = as_nchw(self.shape(x), "global_avg_pool")?;
        if h == 0 || w == 0 {
            return Err(Error::dim("global_avg_pool over an empty plane"));
        }
        let g = PoolGeometry { n, c, h, w, kh: h, kw: w, sh: h, sw: w, out_h: 1, out_w: 1 };
        self.pool_with(x, PoolKind::Avg, g)
    }

    /// Average pooling with `k x k` windows at stride `k` where the plane
    /// divides evenly; otherwise `ceil(extent / k)` bins per axis that
    /// together cover every input position.
    pub fn tiled_avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = as_nchw(self.shape(x), "tiled_avg_pool")?;
        if k == 0 || h == 0 || w == 0 {
            return Err(Error::dim("tiled_avg_pool needs a positive window and a non-empty plane"));
        }
        let g = AdaptiveGeometry { n, c, h, w, out_h: h.div_ceil(k), out_w: w.div_ceil(k) };
        let rank3 = self.shape(x).len() == 3;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * g.out_h * g.out_w);
        for p in 0..n * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..g.out_h {
                let (y0, y1) = bin(oy, g.out_h, h);
                for ox in 0..g.out_w {
                    let (x0, x1) = bin(ox, g.out_w, w);
                    let mut acc = S::zero();
                    for y in y0..y1 {
                        acc += plane[y * w + x0..y * w + x1].iter().copied().sum::<S>();
                    }
                    out.push(acc / S::lit(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let shape: Vec<usize> =
            if rank3 { vec![c, g.out_h, g.out_w] } else { vec![n, c, g.out_h, g.out_w] };
        Ok(self.push(Tensor::new(&shape, out)?, vec![x], Op::AdaptiveAvgPool(g)))
    }

    fn pool_with(&mut self, x: Var, kind: PoolKind, g: PoolGeometry) -> Result<Var> {
        let rank3 = self.shape(x).len() == 3;
        let xd = self.value(x).data();
        let planes = g.n * g.c;
        let out_plane = g.out_h * g.out_w;
        let mut out = vec![S::zero(); planes * out_plane];
        let mut argmax = Vec::new();
        let mut min_gap = S::infinity();
        if kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        let inv_area = S::one() / S::lit((g.kh * g.kw) as f64);
        for p in 0..planes {
            let base = p * g.h * g.w;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let o = p * out_plane + oy * g.out_w + ox;
                    match kind {
                        PoolKind::Avg => {
                            let mut acc = S::zero();
                            for ky in 0..g.kh {
                                let row = base + (oy * g.sh + ky) * g.w + ox * g.sw;
                                acc += xd[row..row + g.kw].iter().copied().sum::<S>();
                            }
                            out[o] = acc * inv_area;
                        }
                        PoolKind::Max => {
                            let mut best = S::neg_infinity();
                            let mut second = S::neg_infinity();
                            let mut best_idx = 0;
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let i = base + (oy * g.sh + ky) * g.w + ox * g.sw + kx;
                                    let v = xd[i];
                                    // first occurrence wins ties
                                    if v > best {
                                        second = best;
                                        best = v;
                                        best_idx = i;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                            out[o] = best;
                            argmax.push(best_idx);
                            if g.kh * g.kw > 1 {
                                min_gap = min_gap.min(best - second);
                            }
                        }
                    }
                }
            }
        }
        let shape: Vec<usize> =
            if rank3 { vec![g.c, g.out_h, g.out_w] } else { vec![g.n, g.c, g.out_h, g.out_w] };
        let value = Tensor::new(&shape, out)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool(MaxPoolSaved { argmax, min_gap }),
            PoolKind::Avg => Op::AvgPool(g),
        };
        Ok(self.push(value, vec![x], op))
    }
}

pub(crate) fn backward<S: Real>(op: &Op<S>, inputs: &[&Tensor<S>], gout: &[S]) -> InputGrads<S> {
    let mut dx = vec![S::zero(); inputs[0].len()];
    match op {
        Op::MaxPool(saved) => {
            for (&i, &g) in saved.argmax.iter().zip(gout) {
                dx[i] += g;
            }
        }
        Op::AvgPool(g) => {
            let out_plane = g.out_h * g.out_w;
            let inv_area = S::one() / S::lit((g.kh * g.kw) as f64);
            for p in 0..g.n * g.c {
                let base = p * g.h * g.w;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let share = gout[p * out_plane + oy * g.out_w + ox] * inv_area;
                        for ky in 0..g.kh {
                            let row = base + (oy * g.sh + ky) * g.w + ox * g.sw;
                            for v in &mut dx[row..row + g.kw] {
                                *v += share;
                            }
                        }
                    }
                }
            }
        }
        Op::AdaptiveAvgPool(g) => {
            let (h, w) = (g.h, g.w);
            let mut o = 0;
            for p in 0..g.n * g.c {
                let plane = &mut dx[p * h * w..(p + 1) * h * w];
                for oy in 0..g.out_h {
                    let (y0, y1) = bin(oy, g.out_h, h);
                    for ox in 0..g.out_w {
                        let (x0, x1) = bin(ox, g.out_w, w);
                        let share = gout[o] / S::lit(((y1 - y0) * (x1 - x0)) as f64);
                        o += 1;
                        for y in y0..y1 {
                            for v in &mut plane[y * w + x0..y * w + x1] {
                                *v += share;
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("not a pooling op"),
    }
    vec![Some(dx)]
}
