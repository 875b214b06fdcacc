//! Per-channel batch normalization.

use crate::autodiff::tape::{InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Added to the variance before taking the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Fraction of the running statistics kept on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Infer,
}

/// Running mean / variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Real> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![S::zero(); channels], var: vec![S::one(); channels] }
    }

    fn update(&mut self, batch_mean: &[S], batch_var: &[S]) {
        let keep = S::lit(BN_MOMENTUM);
        let take = S::one() - keep;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + take * b;
        }
    }
}

pub(crate) struct BatchNormSaved<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    /// Batch statistics were used, so the mean and variance depend on `x`.
    train: bool,
    channels: usize,
    spatial: usize,
}

impl<S: Real> Tape<S> {
    /// Normalizes `[n, c, ...]` input per channel `c`, then scales by `gamma`
    /// and shifts by `beta`. In [`NormMode::Train`] the running statistics are
    /// updated in place; in [`NormMode::Infer`] they are only read.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: &mut RunningStats<S>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batch_norm expects [n, c, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if n * spatial == 0 {
            return Err(Error::dim("batch_norm over an empty batch"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim(format!(
                "batch_norm gamma/beta of length {}/{} for {c} channels",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::dim("running statistics do not match channel count"));
        }
        let xd = self.value(x).data();
        let count = n * spatial;
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut acc = S::zero();
                    for i in 0..n {
                        let at = (i * c + ch) * spatial;
                        acc += xd[at..at + spatial].iter().copied().sum::<S>();
                    }
                    *m = acc / S::lit(count as f64);
                    let mut sq = S::zero();
                    for i in 0..n {
                        let at = (i * c + ch) * spatial;
                        sq += xd[at..at + spatial].iter().map(|&x| (x - *m) * (x - *m)).sum::<S>();
                    }
                    *v = sq / S::lit(count as f64);
                }
                let unbiased: Vec<S> = if count > 1 {
                    let f = S::lit(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                running.update(&mean, &unbiased);
                (mean, var)
            }
            NormMode::Infer => (running.mean.clone(), running.var.clone()),
        };
        let eps = S::lit(BN_EPSILON);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let at = (i * c + ch) * spatial;
                for j in at..at + spatial {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gd[ch] * h + bd[ch];
                }
            }
        }
        let saved = BatchNormSaved { xhat, inv_std, train: mode == NormMode::Train, channels: c, spatial };
        Ok(self.push(Tensor::new(&shape, out)?, vec![x, gamma, beta], Op::BatchNorm(saved)))
    }
}

pub(crate) fn backward<S: Real>(
    saved: &BatchNormSaved<S>,
    inputs: &[&Tensor<S>],
    gout: &[S],
    need: &[bool],
) -> InputGrads<S> {
    let c = saved.channels;
    let spatial = saved.spatial;
    let n = gout.len() / (c * spatial);
    let count = S::lit((n * spatial) as f64);
    let gamma = inputs[1].data();

    let mut sum_g = vec![S::zero(); c];
    let mut sum_gx = vec![S::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let at = (i * c + ch) * spatial;
            for (&g, &x) in gout[at..at + spatial].iter().zip(&saved.xhat[at..at + spatial]) {
                sum_g[ch] += g;
                sum_gx[ch] += g * x;
            }
        }
    }
    let dx = need[0].then(|| {
        let mut dx = vec![S::zero(); gout.len()];
        for i in 0..n {
            for ch in 0..c {
                let at = (i * c + ch) * spatial;
                let scale = gamma[ch] * saved.inv_std[ch];
                for j in at..at + spatial {
                    dx[j] = if saved.train {
                        scale * (gout[j] - sum_g[ch] / count - saved.xhat[j] * sum_gx[ch] / count)
                    } else {
                        scale * gout[j]
                    };
                }
            }
        }
        dx
    });
    vec![dx, need[1].then_some(sum_gx), need[2].then_some(sum_g)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[4, 2, 3, 3], 5.0));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, NormMode::Train, &mut stats).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        // running mean moved 10% of the way towards the batch mean
        assert!((stats.mean[0] - 0.5).abs() < 1e-6);
        assert!((stats.var[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn affine_only_on_normalized_data() {
        let mut tape = Tape::<f64>::new();
        // per channel: values {-1, 1} have mean 0, biased variance 1
        let x = tape.constant(Tensor::from_f64(&[2, 1, 1, 2], &[-1.0, 1.0, 1.0, -1.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 2.0));
        let b = tape.constant(Tensor::full(&[1], 1.0));
        let mut stats = RunningStats::new(1);
        let y = tape.batch_norm(x, g, b, NormMode::Train, &mut stats).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (&yv, &xv) in tape.value(y).data().iter().zip(&[-1.0, 1.0, 1.0, -1.0]) {
            assert!((yv - (2.0 * xv * scale + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_uses_running_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2], &[3.0, 5.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats { mean: vec![4.0], var: vec![4.0] };
        let y = tape.batch_norm(x, g, b, NormMode::Infer, &mut stats).unwrap();
        let d = (4.0 + BN_EPSILON).sqrt();
        assert!((tape.value(y).data()[0] + 1.0 / d).abs() < 1e-12);
        assert_eq!(stats.mean, vec![4.0]);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[0, 2, 3, 3]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        assert!(matches!(
            tape.batch_norm(x, g, b, NormMode::Train, &mut stats),
            Err(Error::Dimension(_))
        ));
    }
}
