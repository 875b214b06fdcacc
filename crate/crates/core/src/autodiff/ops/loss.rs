//! Classification loss and the feature-map to sequence reshaping used by
//! the recognition heads.

use crate::autodiff::tape::{InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{as_nchw, Real, Tensor};

use super::activation::log_softmax_in_place;

pub(crate) struct CrossEntropySaved<S> {
    probs: Vec<S>,
    targets: Vec<usize>,
}

impl<S: Real> Tape<S> {
    /// Mean over rows of `-log softmax(logits)[row, target[row]]` for
    /// `[m, k]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = match *self.shape(logits) {
            [m, k] => (m, k),
            ref s => return Err(Error::dim(format!("cross_entropy expects [m, k] logits, got {s:?}"))),
        };
        if targets.len() != m {
            return Err(Error::dim(format!("{} targets for {m} rows", targets.len())));
        }
        if m == 0 {
            return Err(Error::dim("cross_entropy over zero rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::SymbolOutOfRange { symbol: bad, classes: k });
        }
        let mut logp = self.value(logits).data().to_vec();
        let mut loss = S::zero();
        for (row, &t) in logp.chunks_mut(k).zip(targets) {
            log_softmax_in_place(row);
            loss -= row[t];
        }
        loss /= S::lit(m as f64);
        let probs = logp.into_iter().map(S::exp).collect();
        let saved = CrossEntropySaved { probs, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss), vec![logits], Op::CrossEntropy(saved)))
    }

    /// Averages an `[n, c, h, w]` feature map over its height and returns the
    /// width positions as rows: `[n * w, c]`, row `i * w + x` holding column
    /// `x` of sample `i`.
    pub fn column_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = as_nchw(self.shape(x), "column_mean")?;
        if h == 0 {
            return Err(Error::dim("column_mean over zero rows"));
        }
        let xd = self.value(x).data();
        let inv = S::one() / S::lit(h as f64);
        let mut out = vec![S::zero(); n * w * c];
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let row = ((i * c + ch) * h + y) * w;
                    for col in 0..w {
                        out[(i * w + col) * c + ch] += xd[row + col] * inv;
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(&[n * w, c], out)?, vec![x], Op::ColumnMean))
    }
}

pub(crate) fn backward<S: Real>(op: &Op<S>, inputs: &[&Tensor<S>], gout: &[S]) -> InputGrads<S> {
    match op {
        Op::CrossEntropy(saved) => {
            let m = saved.targets.len();
            let k = saved.probs.len() / m;
            let scale = gout[0] / S::lit(m as f64);
            let mut g: Vec<S> = saved.probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in saved.targets.iter().enumerate() {
                g[r * k + t] -= scale;
            }
            vec![Some(g)]
        }
        Op::ColumnMean => {
            let [n, c, h, w] = as_nchw(inputs[0].shape(), "column_mean").expect("validated in forward");
            let inv = S::one() / S::lit(h as f64);
            let mut dx = vec![S::zero(); inputs[0].len()];
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        let row = ((i * c + ch) * h + y) * w;
                        for col in 0..w {
                            dx[row + col] = gout[(i * w + col) * c + ch] * inv;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        _ => unreachable!("not a loss op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_log_k() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 11]));
        let l = tape.cross_entropy(x, &[0, 4, 10]).unwrap();
        assert!((tape.value(l).item() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::SymbolOutOfRange { .. })));
    }

    #[test]
    fn column_mean_layout() {
        let mut tape = Tape::<f64>::new();
        // n=1, c=2, h=2, w=2
        let x = tape.constant(Tensor::from_f64(&[1, 2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]).unwrap());
        let y = tape.column_mean(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[2.0, 20.0, 3.0, 30.0]);
    }
}
