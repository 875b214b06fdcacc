//! Linear algebra, elementwise arithmetic and layout ops.

use crate::autodiff::tape::{InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(Error::dim(format!("{what} expects a matrix, got shape {shape:?}"))),
    }
}

fn same_shape<S: Real>(tape: &Tape<S>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl<S: Real> Tape<S> {
    /// `[m, k] x [k, p] -> [m, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.shape(a), "matmul lhs")?;
        let (k2, p) = matrix_dims(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimensions {k} and {k2} disagree")));
        }
        let mut out = vec![S::zero(); m * p];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, p),
            S::zero(),
            &mut out,
        );
        Ok(self.push(Tensor::new(&[m, p], out)?, vec![a, b], Op::MatMul))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, vec![a, b], Op::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, vec![a, b], Op::Sub))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, vec![a, b], Op::Mul))
    }

    /// Adds a length-`p` bias to every row of an `[m, p]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, p) = matrix_dims(self.shape(x), "add_row_bias")?;
        if self.value(bias).len() != p {
            return Err(Error::dim(format!(
                "bias of length {} cannot broadcast over rows of width {p}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(p) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += *bv;
            }
        }
        Ok(self.push(out, vec![x, bias], Op::AddRowBias))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push(out, vec![x], Op::Scale(factor)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: &Tensor<S>) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(Error::dim(format!(
                "mul_const: shapes {:?} and {:?} differ",
                self.shape(x),
                mask.shape()
            )));
        }
        let out = zip_map(self.value(x), mask, |a, m| a * m);
        Ok(self.push(out, vec![x], Op::MulConst(mask.data().to_vec())))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), vec![x], Op::Sum))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s: S = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s / S::lit(n as f64)), vec![x], Op::Mean))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, vec![x], Op::Reshape))
    }

    /// Columns `start..start + len` of an `[m, p]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, p) = matrix_dims(self.shape(x), "slice_cols")?;
        if start + len > p {
            return Err(Error::dim(format!("slice {start}..{} out of {p} columns", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for row in src.chunks(p) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Tensor::new(&[m, len], out)?, vec![x], Op::SliceCols { start }))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one input"));
        }
        let m = matrix_dims(self.shape(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rows, w) = matrix_dims(self.shape(p), "concat_cols")?;
            if rows != m {
                return Err(Error::dim(format!("concat_cols row counts {m} and {rows} differ")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[m, total], out)?, parts.to_vec(), Op::ConcatCols))
    }

    /// Stacks `n` matrices of shape `[b, d]` into `[b * n, d]` with row
    /// `i * n + j` taken from row `i` of part `j`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("interleave_rows needs at least one input"));
        }
        let shape = self.shape(parts[0]).to_vec();
        let (b, d) = matrix_dims(&shape, "interleave_rows")?;
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("interleave_rows parts must share a shape"));
            }
        }
        let n = parts.len();
        let mut out = Vec::with_capacity(b * n * d);
        for i in 0..b {
            for &p in parts {
                out.extend_from_slice(&self.value(p).data()[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(Tensor::new(&[b * n, d], out)?, parts.to_vec(), Op::InterleaveRows))
    }
}

fn zip_map<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shape")
}

pub(crate) fn backward<S: Real>(
    op: &Op<S>,
    inputs: &[&Tensor<S>],
    out: &Tensor<S>,
    gout: &[S],
    need: &[bool],
) -> InputGrads<S> {
    match op {
        Op::MatMul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let p = inputs[1].shape()[1];
            let g = MatRef::new(gout, m, p);
            let ga = need[0].then(|| {
                let mut da = vec![S::zero(); m * k];
                gemm(g, MatRef::new(inputs[1].data(), k, p).t(), S::zero(), &mut da);
                da
            });
            let gb = need[1].then(|| {
                let mut db = vec![S::zero(); k * p];
                gemm(MatRef::new(inputs[0].data(), m, k).t(), g, S::zero(), &mut db);
                db
            });
            vec![ga, gb]
        }
        Op::Add => vec![need[0].then(|| gout.to_vec()), need[1].then(|| gout.to_vec())],
        Op::Sub => vec![
            need[0].then(|| gout.to_vec()),
            need[1].then(|| gout.iter().map(|&g| -g).collect()),
        ],
        Op::Mul => vec![
            need[0].then(|| gout.iter().zip(inputs[1].data()).map(|(&g, &b)| g * b).collect()),
            need[1].then(|| gout.iter().zip(inputs[0].data()).map(|(&g, &a)| g * a).collect()),
        ],
        Op::AddRowBias => {
            let p = inputs[1].len();
            let gb = need[1].then(|| {
                let mut db = vec![S::zero(); p];
                for row in gout.chunks(p) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += *g;
                    }
                }
                db
            });
            vec![need[0].then(|| gout.to_vec()), gb]
        }
        Op::Scale(f) => vec![Some(gout.iter().map(|&g| g * *f).collect())],
        Op::MulConst(mask) => vec![Some(gout.iter().zip(mask).map(|(&g, &m)| g * m).collect())],
        Op::Sum => vec![Some(vec![gout[0]; inputs[0].len()])],
        Op::Mean => {
            let n = inputs[0].len();
            vec![Some(vec![gout[0] / S::lit(n as f64); n])]
        }
        Op::Reshape => vec![Some(gout.to_vec())],
        Op::SliceCols { start } => {
            let (m, p) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let len = out.shape()[1];
            let mut g = vec![S::zero(); m * p];
            for r in 0..m {
                g[r * p + start..r * p + start + len].copy_from_slice(&gout[r * len..(r + 1) * len]);
            }
            vec![Some(g)]
        }
        Op::ConcatCols => {
            let m = out.shape()[0];
            let total = out.shape()[1];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (t, &needed) in inputs.iter().zip(need) {
                let w = t.shape()[1];
                grads.push(needed.then(|| {
                    let mut g = Vec::with_capacity(m * w);
                    for r in 0..m {
                        g.extend_from_slice(&gout[r * total + offset..r * total + offset + w]);
                    }
                    g
                }));
                offset += w;
            }
            grads
        }
        Op::InterleaveRows => {
            let n = inputs.len();
            let (b, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            (0..n)
                .map(|j| {
                    need[j].then(|| {
                        let mut g = Vec::with_capacity(b * d);
                        for i in 0..b {
                            let row = i * n + j;
                            g.extend_from_slice(&gout[row * d..(row + 1) * d]);
                        }
                        g
                    })
                })
                .collect()
        }
        _ => unreachable!("not a basic op"),
    }
}
