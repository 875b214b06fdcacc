use crate::autodiff::tape::{InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<S: Real> Tape<S> {
    /// `max(0, x)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        Ok(self.push(out, vec![x], Op::Relu))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        Ok(self.push(out, vec![x], Op::Sigmoid))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(S::tanh);
        Ok(self.push(out, vec![x], Op::Tanh))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let k = *value
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax needs at least one axis"))?;
        if k == 0 {
            return Err(Error::dim("softmax over an empty axis"));
        }
        let mut data = value.data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = Tensor::new(value.shape(), data)?;
        Ok(self.push(out, vec![x], Op::Softmax))
    }
}

#[inline]
pub(crate) fn sigmoid<S: Real>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable softmax of one row (max subtraction).
pub(crate) fn softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log(softmax(row))` without forming the probabilities first.
pub(crate) fn log_softmax_in_place<S: Real>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub(crate) fn backward<S: Real>(
    op: &Op<S>,
    inputs: &[&Tensor<S>],
    out: &Tensor<S>,
    gout: &[S],
) -> InputGrads<S> {
    let x = inputs[0].data();
    let y = out.data();
    let g = match op {
        Op::Relu => gout
            .iter()
            .zip(x)
            .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
            .collect(),
        Op::Sigmoid => gout.iter().zip(y).map(|(&g, &s)| g * s * (S::one() - s)).collect(),
        Op::Tanh => gout.iter().zip(y).map(|(&g, &t)| g * (S::one() - t * t)).collect(),
        Op::Softmax => {
            let k = *out.shape().last().expect("softmax rank");
            let mut gx = vec![S::zero(); y.len()];
            for ((gr, yr), dr) in gout.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &g), &p) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = p * (g - dot);
                }
            }
            gx
        }
        _ => unreachable!("not an activation"),
    };
    vec![Some(g)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition_and_gate() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let w = tape.constant(Tensor::new(&[3], vec![5.0, 5.0, 5.0]).unwrap());
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn relu_is_identity_on_positive_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[3], vec![0.5, 1.0, 7.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 5], |i| ((i * 37 % 11) as f32) - 4.0));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
