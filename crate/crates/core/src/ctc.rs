//! Connectionist temporal classification: the collapse function, best-path
//! decoding and the forward-backward loss.

use crate::autodiff::{InputGrads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelSequence, BLANK};
use crate::tensor::{Real, Tensor};

/// `T x |L_ε|` per-timestep class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSequence<S = f32> {
    pub timesteps: usize,
    pub classes: usize,
    /// Row-major `timesteps x classes`.
    pub data: Vec<S>,
    /// Rows are probabilities (post-softmax) rather than raw scores.
    pub normalized: bool,
}

impl<S: Real> LogitSequence<S> {
    pub fn new(timesteps: usize, classes: usize, data: Vec<S>, normalized: bool) -> Result<Self> {
        if data.len() != timesteps * classes {
            return Err(Error::dim(format!(
                "{} values for a {timesteps} x {classes} logit sequence",
                data.len()
            )));
        }
        Ok(Self { timesteps, classes, data, normalized })
    }

    pub fn row(&self, t: usize) -> &[S] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    /// Per-timestep log probabilities in `f64`.
    fn log_probs(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.data.iter().map(|v| v.to_f64_lossy()).collect();
        for row in out.chunks_mut(self.classes) {
            if self.normalized {
                row.iter_mut().for_each(|p| *p = p.ln());
            } else {
                crate::autodiff::ops::activation::log_softmax_in_place(row);
            }
        }
        out
    }
}

/// Merges runs of equal labels, then deletes blanks.
pub fn collapse(path: &[usize], classes: usize) -> Result<LabelSequence> {
    let mut labels = Vec::new();
    let mut prev = None;
    for &s in path {
        if s >= classes {
            return Err(Error::SymbolOutOfRange { symbol: s, classes });
        }
        if prev != Some(s) && s != BLANK {
            labels.push(s);
        }
        prev = Some(s);
    }
    Ok(LabelSequence::with_path(labels, path.to_vec()))
}

/// Index of the row maximum; the first one wins ties.
fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Most probable single path (per-timestep argmax), collapsed.
pub fn best_path_decode<S: Real>(logits: &LogitSequence<S>) -> Result<LabelSequence> {
    if !logits.data.iter().all(|v| v.is_finite()) {
        return Err(Error::contract("non-finite logits"));
    }
    let path: Vec<usize> = (0..logits.timesteps).map(|t| argmax(logits.row(t))).collect();
    collapse(&path, logits.classes)
}

/// Minimum timesteps needed to emit `target`.
pub fn min_timesteps(target: &LabelSequence) -> usize {
    target.len() + target.repeats()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood of `target` and its gradient with respect to the
/// raw scores of each timestep (`softmax - occupancy`).
///
/// `log_probs` is `timesteps x classes` in log space.
fn forward_backward(
    log_probs: &[f64],
    timesteps: usize,
    classes: usize,
    target: &LabelSequence,
) -> Result<(f64, Vec<f64>)> {
    if let Some(&bad) = target.labels.iter().find(|&&l| l >= classes || l == BLANK) {
        return Err(Error::SymbolOutOfRange { symbol: bad, classes });
    }
    let needed = min_timesteps(target);
    if timesteps < needed || timesteps == 0 {
        return Err(Error::CtcInfeasible {
            target_len: target.len(),
            repeats: target.repeats(),
            needed: needed.max(1),
            timesteps,
        });
    }
    // blank-augmented target: ε l1 ε l2 ... ε
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in &target.labels {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; timesteps * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..timesteps {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }
    let last = (timesteps - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }

    let mut beta = vec![ninf; timesteps * s_len];
    beta[last + s_len - 1] = lp(timesteps - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(timesteps - 1, ext[s_len - 2]);
    }
    for t in (0..timesteps - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }

    // d(-log p)/d score_tk = y_tk - sum_{s: ext[s] = k} occupancy_t(s)
    let mut grad: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
    for t in 0..timesteps {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let k = ext[s];
            let occupancy = (a + b - lp(t, k) - log_p).exp();
            grad[t * classes + k] -= occupancy;
        }
    }
    Ok((-log_p, grad))
}

/// `-ln Σ_{π: B(π) = target} Π_t y_{π_t}`.
pub fn ctc_loss<S: Real>(logits: &LogitSequence<S>, target: &LabelSequence) -> Result<f64> {
    let lp = logits.log_probs();
    forward_backward(&lp, logits.timesteps, logits.classes, target).map(|(loss, _)| loss)
}

pub(crate) struct CtcSaved<S> {
    /// Gradient of the batch-mean loss w.r.t. the scores, seed 1.
    grad: Vec<S>,
}

impl<S: Real> Tape<S> {
    /// Mean CTC loss over a batch. `logits` is `[batch * timesteps, classes]`
    /// with the rows of sample `i` at `i * timesteps..(i + 1) * timesteps`.
    pub fn ctc_loss(&mut self, logits: Var, timesteps: usize, targets: &[LabelSequence]) -> Result<Var> {
        let (rows, classes) = match *self.shape(logits) {
            [r, k] => (r, k),
            ref s => return Err(Error::dim(format!("ctc_loss expects [rows, classes] logits, got {s:?}"))),
        };
        let batch = targets.len();
        if batch == 0 || rows != batch * timesteps {
            return Err(Error::dim(format!(
                "{rows} logit rows for {batch} targets of {timesteps} timesteps"
            )));
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(data.len());
        let scale = 1.0 / batch as f64;
        for (i, target) in targets.iter().enumerate() {
            let chunk = &data[i * timesteps * classes..(i + 1) * timesteps * classes];
            let seq = LogitSequence::new(timesteps, classes, chunk.to_vec(), false)?;
            let (loss, g) = forward_backward(&seq.log_probs(), timesteps, classes, target)?;
            total += loss;
            grad.extend(g.into_iter().map(|v| S::lit(v * scale)));
        }
        let value = Tensor::scalar(S::lit(total * scale));
        Ok(self.push(value, vec![logits], Op::Ctc(CtcSaved { grad })))
    }
}

pub(crate) fn ctc_backward<S: Real>(saved: &CtcSaved<S>, gout: &[S]) -> InputGrads<S> {
    vec![Some(saved.grad.iter().map(|&g| g * gout[0]).collect())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Alphabet;

    fn probs(t: usize, k: usize, values: &[f64]) -> LogitSequence<f64> {
        LogitSequence::new(t, k, values.to_vec(), true).unwrap()
    }

    #[test]
    fn collapse_merges_then_deletes() {
        let a = Alphabet::new("ICV").unwrap();
        for raw in ["-IC-CC-V", "II--CCC-C--V-"] {
            let path = a.parse_path(raw).unwrap();
            let out = collapse(&path, a.classes()).unwrap();
            assert_eq!(a.decode(&out.labels), "ICCV");
        }
        let blanks = a.parse_path("----").unwrap();
        assert!(collapse(&blanks, a.classes()).unwrap().is_empty());
        assert!(matches!(collapse(&[0, 9], 4), Err(Error::SymbolOutOfRange { symbol: 9, .. })));
    }

    #[test]
    fn best_path_examples() {
        // classes: ε, a
        let l = probs(3, 2, &[0.9, 0.1, 0.2, 0.8, 0.3, 0.7]);
        assert_eq!(best_path_decode(&l).unwrap().labels, vec![1]);
        let l = probs(3, 2, &[0.1, 0.9, 0.8, 0.2, 0.3, 0.7]);
        assert_eq!(best_path_decode(&l).unwrap().labels, vec![1, 1]);
    }

    #[test]
    fn single_timestep_loss() {
        let l = probs(1, 2, &[0.4, 0.6]);
        let loss = ctc_loss(&l, &LabelSequence::new(vec![1])).unwrap();
        assert!((loss + 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_step_uniform_has_three_valid_paths() {
        let third = 1.0 / 3.0;
        let l = probs(2, 3, &[third; 6]);
        let loss = ctc_loss(&l, &LabelSequence::new(vec![1])).unwrap();
        assert!((loss + (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let l = probs(2, 2, &[0.5; 4]);
        // "aa" needs a separating blank: 3 timesteps
        let err = ctc_loss(&l, &LabelSequence::new(vec![1, 1])).unwrap_err();
        assert!(matches!(err, Error::CtcInfeasible { needed: 3, timesteps: 2, .. }));
    }

    #[test]
    fn empty_target_is_all_blank_probability() {
        let l = probs(3, 2, &[0.7, 0.3, 0.6, 0.4, 0.5, 0.5]);
        let loss = ctc_loss(&l, &LabelSequence::default()).unwrap();
        assert!((loss + (0.7f64 * 0.6 * 0.5).ln()).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_is_batch_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::zeros(&[4, 3]));
        let targets = [LabelSequence::new(vec![1]), LabelSequence::new(vec![2])];
        let loss = tape.ctc_loss(x, 2, &targets).unwrap();
        assert!((tape.value(loss).item() + (1.0f64 / 3.0).ln()).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        // each timestep's gradient row sums to zero (softmax minus a distribution)
        for row in g.get(x).unwrap().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
