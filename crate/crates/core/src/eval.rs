//! Sequence and character accuracy, box overlap and evaluation loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, Tape};
use crate::data::{LabeledScene, TrainSample};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::labels::{LabelSequence, BLANK};
use crate::model::StnOcr;
use crate::spatial::iou;
use crate::tensor::Tensor;

/// Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Whether a region is read exactly. The ensemble head compares every
/// position including blank padding.
pub fn region_correct(head: HeadKind, pred: &LabelSequence, target: &LabelSequence, timesteps: usize) -> bool {
    match (head, &pred.path) {
        (HeadKind::Ensemble, Some(path)) => target.padded(timesteps).map(|t| &t == path).unwrap_or(false),
        _ => pred.labels == target.labels,
    }
}

/// Character accuracy of one region in `[0, 1]`.
///
/// Ensemble head: agreement over the positions where either the prediction
/// or the padded target is not blank. CTC head: `1 - min(1, d / len)` with
/// `d` the edit distance. An empty target scores 1 only for an empty
/// prediction.
pub fn region_char_accuracy(head: HeadKind, pred: &LabelSequence, target: &LabelSequence, timesteps: usize) -> f64 {
    match (head, &pred.path) {
        (HeadKind::Ensemble, Some(path)) => {
            let Ok(t) = target.padded(timesteps) else {
                return 0.0;
            };
            let (mut used, mut hit) = (0usize, 0usize);
            for (&p, &q) in path.iter().zip(&t) {
                if p != BLANK || q != BLANK {
                    used += 1;
                    hit += usize::from(p == q);
                }
            }
            if used == 0 {
                1.0
            } else {
                hit as f64 / used as f64
            }
        }
        _ => {
            if target.is_empty() {
                return if pred.is_empty() { 1.0 } else { 0.0 };
            }
            let d = edit_distance(&pred.labels, &target.labels) as f64;
            1.0 - (d / target.len() as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Fraction of images with every region read exactly.
    pub seq_acc: f64,
    /// Mean per-region character accuracy.
    pub char_acc: f64,
    /// Mean recognition loss.
    pub loss: f64,
    /// Mean IoU of predicted boxes, clipped to the canvas, and ground-truth
    /// boxes, when boxes are known.
    pub mean_iou: Option<f64>,
    /// Predicted `[x0, y0, x1, y1]` per image and region, clipped to the canvas.
    pub boxes: Vec<Vec<[f64; 4]>>,
    /// Predicted text per image and region.
    pub texts: Vec<Vec<String>>,
}

/// Stacks `[c, h, w]` images into `[b, c, h, w]`.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::contract("cannot stack zero images"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim(format!("image shapes {:?} and {shape:?} differ", img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Encodes per-region label strings, checking the region count.
pub fn encode_targets(model: &StnOcr<f32>, samples: &[&TrainSample]) -> Result<Vec<LabelSequence>> {
    let n = model.config.n_regions;
    let mut out = Vec::with_capacity(samples.len() * n);
    for s in samples {
        if s.labels.len() != n {
            return Err(Error::contract(format!("sample has {} labels for {n} regions", s.labels.len())));
        }
        for l in &s.labels {
            out.push(model.config.alphabet.encode(l)?);
        }
    }
    Ok(out)
}

/// Inference-mode evaluation. Pure: the model is not modified.
pub fn evaluate(model: &StnOcr<f32>, scenes: &[LabeledScene], batch_size: usize) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let cfg = &model.config;
    let t = cfg.timesteps;
    let (mut seq_hits, mut char_sum, mut regions, mut loss_sum) = (0usize, 0.0, 0usize, 0.0);
    let (mut iou_sum, mut iou_count, mut iou_known) = (0.0, 0usize, true);
    let mut boxes = Vec::with_capacity(scenes.len());
    let mut texts = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let samples: Vec<TrainSample> = chunk.iter().map(LabeledScene::training_sample).collect();
        let refs: Vec<&TrainSample> = samples.iter().collect();
        let targets = encode_targets(model, &refs)?;
        let images = stack_images(&refs.iter().map(|s| &s.image).collect::<Vec<_>>())?;

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let mut stats = model.stats.clone();
        let x = tape.constant(images);
        let fwd = model.forward_with(&mut tape, &bound, &mut stats, x, NormMode::Infer)?;
        let loss = model.loss(&mut tape, &fwd, &targets)?;
        loss_sum += tape.value(loss).item() as f64 * chunk.len() as f64;
        let preds = model.read_predictions(&tape, &fwd)?;

        for ((scene, regions_pred), tgt) in chunk.iter().zip(&preds).zip(targets.chunks(cfg.n_regions)) {
            let mut all = true;
            for (p, q) in regions_pred.iter().zip(tgt) {
                all &= region_correct(cfg.head, &p.labels, q, t);
                char_sum += region_char_accuracy(cfg.head, &p.labels, q, t);
                regions += 1;
            }
            seq_hits += usize::from(all);
            let [h, w] = cfg.input_size;
            let pred_boxes: Vec<[f64; 4]> = regions_pred.iter().map(|r| r.bbox.clipped(h, w)).collect();
            match &scene.boxes {
                Some(gt) => {
                    for (a, b) in pred_boxes.iter().zip(gt) {
                        iou_sum += iou(*a, *b);
                        iou_count += 1;
                    }
                }
                None => iou_known = false,
            }
            boxes.push(pred_boxes);
            texts.push(regions_pred.iter().map(|r| r.text.clone()).collect());
        }
    }
    Ok(EvalReport {
        samples: scenes.len(),
        seq_acc: seq_hits as f64 / scenes.len() as f64,
        char_acc: char_sum / regions as f64,
        loss: loss_sum / scenes.len() as f64,
        mean_iou: (iou_known && iou_count > 0).then(|| iou_sum / iou_count as f64),
        boxes,
        texts,
    })
}
