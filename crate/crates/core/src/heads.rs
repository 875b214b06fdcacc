//! Recognition heads: `T` independent softmax classifiers or CTC.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::ctc::{best_path_decode, LogitSequence};
use crate::error::{Error, Result};
use crate::labels::{LabelSequence, BLANK};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One classifier per character position, targets padded with blanks.
    Ensemble,
    /// Per-column classifier trained with CTC, decoded by best path.
    Ctc,
}

/// Targets padded with blanks to `timesteps` positions, concatenated.
pub fn ensemble_targets(targets: &[LabelSequence], timesteps: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(targets.len() * timesteps);
    for t in targets {
        out.extend(t.padded(timesteps)?);
    }
    Ok(out)
}

impl<S: Real> Tape<S> {
    /// Mean over samples and positions of the per-position cross-entropy.
    /// `logits` holds `timesteps * classes` scores per sample, either as
    /// `[batch, timesteps * classes]` or `[batch * timesteps, classes]`.
    pub fn softmax_ensemble_loss(
        &mut self,
        logits: Var,
        timesteps: usize,
        classes: usize,
        targets: &[LabelSequence],
    ) -> Result<Var> {
        let total: usize = self.shape(logits).iter().product();
        let rows = targets.len() * timesteps;
        if total != rows * classes || rows == 0 {
            return Err(Error::dim(format!(
                "{total} ensemble logits for {} targets x {timesteps} positions x {classes} classes",
                targets.len()
            )));
        }
        let padded = ensemble_targets(targets, timesteps)?;
        let flat = self.reshape(logits, &[rows, classes])?;
        self.cross_entropy(flat, &padded)
    }
}

/// Per-position argmax. The raw path keeps every position; the labels drop
/// blank positions.
pub fn ensemble_decode<S: Real>(logits: &LogitSequence<S>) -> LabelSequence {
    let path: Vec<usize> = (0..logits.timesteps)
        .map(|t| {
            let row = logits.row(t);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect();
    let labels = path.iter().copied().filter(|&l| l != BLANK).collect();
    LabelSequence::with_path(labels, path)
}

/// Decodes one region's logits with the rule belonging to `kind`.
pub fn decode<S: Real>(kind: HeadKind, logits: &LogitSequence<S>) -> Result<LabelSequence> {
    match kind {
        HeadKind::Ensemble => Ok(ensemble_decode(logits)),
        HeadKind::Ctc => best_path_decode(logits),
    }
}

/// Highest softmax probability per timestep, averaged.
pub fn confidence<S: Real>(logits: &LogitSequence<S>) -> f64 {
    if logits.timesteps == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 0..logits.timesteps {
        let row: Vec<f64> = logits.row(t).iter().map(|v| v.to_f64_lossy()).collect();
        let p = if logits.normalized {
            row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 / row.iter().map(|v| (v - m).exp()).sum::<f64>()
        };
        acc += p;
    }
    acc / logits.timesteps as f64
}
