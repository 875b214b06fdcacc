//! Central finite-difference checks of every differentiable operation.
//!
//! Each instance draws random inputs, reduces the op output to a scalar with
//! a fixed random projection and compares the analytic input gradients with
//! central differences. Inputs are `f32`-representable so one instance
//! serves both precisions; the reference differences are always taken in
//! `f64`. A coordinate whose perturbation changes the tape's kink pattern
//! straddles a non-differentiable point and is skipped.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Fault, NormMode, PoolKind, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::labels::LabelSequence;
use crate::model::{ModelConfig, StnOcr};
use crate::recurrent::{LstmParams, LstmState};
use crate::tensor::{Real, Tensor};

pub const F32_TOLERANCE: f64 = 1e-3;
pub const F64_TOLERANCE: f64 = 1e-6;
const STEP: f64 = 1e-6;
/// Smallest gradient norm used as the relative-error denominator.
const NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckOp {
    Matmul,
    Conv2d,
    Pool,
    BatchNorm,
    Softmax,
    LstmStep,
    BilinearSample,
    CtcLoss,
    StnOcrForward,
}

impl CheckOp {
    pub const ALL: [CheckOp; 9] = [
        CheckOp::Matmul,
        CheckOp::Conv2d,
        CheckOp::Pool,
        CheckOp::BatchNorm,
        CheckOp::Softmax,
        CheckOp::LstmStep,
        CheckOp::BilinearSample,
        CheckOp::CtcLoss,
        CheckOp::StnOcrForward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckOp::Matmul => "matmul",
            CheckOp::Conv2d => "conv2d",
            CheckOp::Pool => "pool",
            CheckOp::BatchNorm => "batch_norm",
            CheckOp::Softmax => "softmax",
            CheckOp::LstmStep => "lstm_step",
            CheckOp::BilinearSample => "bilinear_sample",
            CheckOp::CtcLoss => "ctc_loss",
            CheckOp::StnOcrForward => "stn_ocr_forward",
        }
    }

    /// Coordinates checked per input tensor.
    fn coords_per_input(self) -> usize {
        match self {
            CheckOp::StnOcrForward => 4,
            _ => 24,
        }
    }
}

impl fmt::Display for CheckOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckOp::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| {
            let known: Vec<_> = CheckOp::ALL.iter().map(|o| o.name()).collect();
            Error::Config(format!("unknown op `{s}`; expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => F32_TOLERANCE,
            Precision::F64 => F64_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Accepted instances per op.
    pub instances: usize,
    pub ops: Vec<CheckOp>,
    pub precisions: Vec<Precision>,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            ops: CheckOp::ALL.to_vec(),
            precisions: vec![Precision::F32, Precision::F64],
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: CheckOp,
    pub precision: Precision,
    pub instances: usize,
    /// Instances discarded because most coordinates straddled a kink.
    pub rejected: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Non-differentiable data of an instance.
#[derive(Clone)]
enum Spec {
    Plain,
    Conv { stride: usize, pad: usize },
    Pool { kind: Option<PoolKind>, k: usize, stride: usize },
    Norm { mode: NormMode, mean: Vec<f64>, var: Vec<f64> },
    Lstm { input: usize, hidden: usize },
    Sampler { out: [usize; 2], regions: usize },
    Ctc { timesteps: usize, targets: Vec<LabelSequence> },
    Model { config: ModelConfig, images: Tensor<f64>, targets: Vec<LabelSequence> },
}

#[derive(Clone)]
struct Instance {
    op: CheckOp,
    inputs: Vec<Tensor<f64>>,
    spec: Spec,
    projection_seed: u64,
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| f32_exact(rng.gen_range(lo..hi)))
}

fn random_labels(max_len: usize, symbols: usize, rng: &mut ChaCha8Rng) -> LabelSequence {
    let len = rng.gen_range(0..=max_len);
    LabelSequence::new((0..len).map(|_| rng.gen_range(1..=symbols)).collect())
}

/// Small model whose pooling chain just fits.
fn model_config(head: HeadKind, n_regions: usize) -> ModelConfig {
    ModelConfig {
        n_regions,
        timesteps: 2,
        head,
        localization_filters: [2, 3, 3],
        recognition_filters: [2, 3, 4],
        blstm_hidden: 3,
        region_size: [8, 12],
        input_size: [20, 20],
        ..ModelConfig::default()
    }
}

fn draw(op: CheckOp, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let projection_seed = rng.gen();
    let (inputs, spec) = match op {
        CheckOp::Matmul => {
            let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
            (vec![random(&[m, k], -1.0, 1.0, rng), random(&[k, n], -1.0, 1.0, rng)], Spec::Plain)
        }
        CheckOp::Conv2d => {
            let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let k = if rng.gen_bool(0.7) { 3 } else { 1 };
            let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
            // sizes with an integral output extent
            let mut size = || (rng.gen_range(3..6) - 1) * stride + k - 2 * pad;
            let (h, w) = (size(), size());
            let spec = Spec::Conv { stride, pad };
            (vec![random(&[b, c, h, w], -1.0, 1.0, rng), random(&[o, c, k, k], -1.0, 1.0, rng)], spec)
        }
        CheckOp::Pool => {
            let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let spec = match rng.gen_range(0..3) {
                0 => Spec::Pool { kind: Some(PoolKind::Max), k: 2, stride: 2 },
                1 => Spec::Pool { kind: Some(PoolKind::Avg), k: 2, stride: 2 },
                _ => Spec::Pool { kind: None, k: 5, stride: 5 },
            };
            let (h, w) = (2 * rng.gen_range(2..7), 2 * rng.gen_range(2..7));
            (vec![random(&[b, c, h, w], -1.0, 1.0, rng)], spec)
        }
        CheckOp::BatchNorm => {
            let (n, c) = (rng.gen_range(2..5), rng.gen_range(1..4));
            let shape = if rng.gen_bool(0.5) { vec![n, c] } else { vec![n, c, rng.gen_range(1..4), rng.gen_range(1..4)] };
            let mode = if rng.gen_bool(0.75) { NormMode::Train } else { NormMode::Infer };
            let mean = (0..c).map(|_| f32_exact(rng.gen_range(-0.5..0.5))).collect();
            let var = (0..c).map(|_| f32_exact(rng.gen_range(0.5..2.0))).collect();
            let inputs =
                vec![random(&shape, -2.0, 2.0, rng), random(&[c], 0.5, 1.5, rng), random(&[c], -0.5, 0.5, rng)];
            (inputs, Spec::Norm { mode, mean, var })
        }
        CheckOp::Softmax => {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(2..7));
            (vec![random(&[r, c], -3.0, 3.0, rng)], Spec::Plain)
        }
        CheckOp::LstmStep => {
            let (b, i, h) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
            let inputs = vec![
                random(&[b, i], -1.0, 1.0, rng),
                random(&[b, h], -1.0, 1.0, rng),
                random(&[b, h], -1.0, 1.0, rng),
                random(&[i, 4 * h], -1.0, 1.0, rng),
                random(&[h, 4 * h], -1.0, 1.0, rng),
                random(&[4 * h], -0.5, 0.5, rng),
            ];
            (inputs, Spec::Lstm { input: i, hidden: h })
        }
        CheckOp::BilinearSample => {
            let (b, c, n) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(4..10), rng.gen_range(4..10));
            let out = [rng.gen_range(2..6), rng.gen_range(2..6)];
            let theta = Tensor::from_fn(&[b * n, 6], |i| {
                let base = [0.7, 0.0, 0.0, 0.0, 0.7, 0.0][i % 6];
                f32_exact(base + rng.gen_range(-0.3..0.3))
            });
            (vec![random(&[b, c, h, w], 0.0, 1.0, rng), theta], Spec::Sampler { out, regions: n })
        }
        CheckOp::CtcLoss => {
            let (b, t, symbols) = (rng.gen_range(1..4), rng.gen_range(2..7), rng.gen_range(1..5));
            let mut targets = Vec::with_capacity(b);
            while targets.len() < b {
                let l = random_labels(t, symbols, rng);
                if l.len() + l.repeats() <= t {
                    targets.push(l);
                }
            }
            (vec![random(&[b * t, symbols + 1], -2.0, 2.0, rng)], Spec::Ctc { timesteps: t, targets })
        }
        CheckOp::StnOcrForward => {
            let head = if rng.gen_bool(0.5) { HeadKind::Ensemble } else { HeadKind::Ctc };
            let config = model_config(head, rng.gen_range(1..3));
            let model = StnOcr::<f64>::new(config.clone(), rng.gen())?;
            let inputs = model
                .params
                .iter()
                .map(|(_, t)| {
                    let data = t.data().iter().map(|v| f32_exact(v + rng.gen_range(-0.3..0.3))).collect();
                    Tensor::new(t.shape(), data)
                })
                .collect::<Result<_>>()?;
            let batch = 2;
            let images = random(&[batch, 1, 20, 20], 0.0, 1.0, rng);
            let targets = (0..batch * config.n_regions).map(|_| random_labels(2, 10, rng)).collect();
            (inputs, Spec::Model { config, images, targets })
        }
    };
    Ok(Instance { op, inputs, spec, projection_seed })
}

/// `sum(out * R)` with a fixed random `R`; scalar outputs pass through.
fn project<S: Real>(tape: &mut Tape<S>, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return tape.reshape(out, &[1]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(tape.shape(out), |_| S::lit(f32_exact(rng.gen_range(-1.0..1.0))));
    let weighted = tape.mul_const(out, &r)?;
    tape.sum(weighted)
}

/// Records the instance on `tape` and returns `(loss, input leaves)`.
fn record<S: Real>(inst: &Instance, tape: &mut Tape<S>, values: &[Tensor<S>]) -> Result<(Var, Vec<Var>)> {
    if let Spec::Model { config, images, targets } = &inst.spec {
        let mut model = StnOcr::<S>::new(config.clone(), 0)?;
        for (id, v) in model.params.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *model.params.get_mut(id) = v.clone();
        }
        let bound = model.params.bind(tape, true);
        let x = tape.constant(images.cast());
        let mut stats = model.stats.clone();
        let fwd = model.forward_with(tape, &bound, &mut stats, x, NormMode::Train)?;
        let loss = model.loss(tape, &fwd, targets)?;
        return Ok((loss, bound.vars().to_vec()));
    }
    let vars: Vec<Var> = values.iter().map(|v| tape.variable(v.clone())).collect();
    let out = match (&inst.op, &inst.spec) {
        (CheckOp::Matmul, _) => tape.matmul(vars[0], vars[1])?,
        (CheckOp::Conv2d, Spec::Conv { stride, pad }) => tape.conv2d(vars[0], vars[1], *stride, *pad)?,
        (CheckOp::Pool, Spec::Pool { kind: Some(kind), k, stride }) => tape.pool(vars[0], *kind, *k, *stride)?,
        (CheckOp::Pool, Spec::Pool { kind: None, k, .. }) => tape.tiled_avg_pool(vars[0], *k)?,
        (CheckOp::BatchNorm, Spec::Norm { mode, mean, var }) => {
            let mut running = RunningStats {
                mean: mean.iter().map(|&v| S::lit(v)).collect(),
                var: var.iter().map(|&v| S::lit(v)).collect(),
            };
            tape.batch_norm(vars[0], vars[1], vars[2], *mode, &mut running)?
        }
        (CheckOp::Softmax, _) => tape.softmax(vars[0])?,
        (CheckOp::LstmStep, Spec::Lstm { input, hidden }) => {
            let p = LstmParams { wx: vars[3], wh: vars[4], bias: vars[5], input: *input, hidden: *hidden };
            let next = tape.lstm_step(&p, vars[0], &LstmState { h: vars[1], c: vars[2] })?;
            tape.concat_cols(&[next.h, next.c])?
        }
        (CheckOp::BilinearSample, Spec::Sampler { out, regions }) => {
            let s = tape.shape(vars[0]).to_vec();
            let grid = tape.affine_grid(vars[1], out[0], out[1], s[2], s[3])?;
            tape.bilinear_sample(vars[0], grid, *regions)?
        }
        (CheckOp::CtcLoss, Spec::Ctc { timesteps, targets }) => tape.ctc_loss(vars[0], *timesteps, targets)?,
        _ => unreachable!("spec matches its op"),
    };
    Ok((project(tape, out, inst.projection_seed)?, vars))
}

fn analytic<S: Real>(inst: &Instance, fault: Option<Fault>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<S>::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let values: Vec<Tensor<S>> = inst.inputs.iter().map(Tensor::cast).collect();
    let (loss, vars) = record(inst, &mut tape, &values)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get_or_zeros(&tape, v).data().iter().map(|g| g.to_f64_lossy()).collect()).collect())
}

fn evaluate_f64(inst: &Instance, values: &[Tensor<f64>]) -> Result<(f64, Vec<i64>)> {
    let mut tape = Tape::<f64>::new();
    let (loss, _) = record(inst, &mut tape, values)?;
    Ok((tape.value(loss).item(), tape.kink_pattern()))
}

struct Outcome {
    compared: usize,
    skipped: usize,
    /// Per precision, the norm-wise relative error over compared coordinates.
    errors: Vec<f64>,
}

fn check_instance(inst: &Instance, precisions: &[Precision], fault: Option<Fault>, rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (_, base_pattern) = evaluate_f64(inst, &inst.inputs)?;
    let grads: Vec<Vec<Vec<f64>>> = precisions
        .iter()
        .map(|p| match p {
            Precision::F32 => analytic::<f32>(inst, fault),
            Precision::F64 => analytic::<f64>(inst, fault),
        })
        .collect::<Result<_>>()?;

    let mut numeric = Vec::new();
    let mut picked: Vec<(usize, usize)> = Vec::new();
    let mut skipped = 0;
    let mut values = inst.inputs.clone();
    for (i, t) in inst.inputs.iter().enumerate() {
        let n = t.len();
        let per = inst.op.coords_per_input().min(n);
        let mut coords: Vec<usize> = if per == n { (0..n).collect() } else { (0..per).map(|_| rng.gen_range(0..n)).collect() };
        coords.sort_unstable();
        coords.dedup();
        for j in coords {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + STEP;
            let (plus, pp) = evaluate_f64(inst, &values)?;
            values[i].data_mut()[j] = orig - STEP;
            let (minus, pm) = evaluate_f64(inst, &values)?;
            values[i].data_mut()[j] = orig;
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            numeric.push((plus - minus) / (2.0 * STEP));
            picked.push((i, j));
        }
    }
    let num_norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let errors = grads
        .iter()
        .map(|g| {
            let a: Vec<f64> = picked.iter().map(|&(i, j)| g[i][j]).collect();
            let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            diff / a_norm.max(num_norm).max(NORM_FLOOR)
        })
        .collect();
    Ok(Outcome { compared: picked.len(), skipped, errors })
}

/// Runs the suite for one op.
pub fn check_op(op: CheckOp, cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(op as u64 + 1);
    let mut max_err = vec![0.0f64; cfg.precisions.len()];
    let (mut accepted, mut rejected, mut coordinates) = (0, 0, 0);
    let max_attempts = cfg.instances * 5;
    while accepted < cfg.instances && accepted + rejected < max_attempts {
        let inst = draw(op, &mut rng)?;
        let o = check_instance(&inst, &cfg.precisions, cfg.fault, &mut rng)?;
        if o.compared == 0 || o.skipped > o.compared {
            rejected += 1;
            continue;
        }
        accepted += 1;
        coordinates += o.compared;
        for (m, e) in max_err.iter_mut().zip(&o.errors) {
            *m = m.max(*e);
        }
    }
    Ok(cfg
        .precisions
        .iter()
        .zip(max_err)
        .map(|(&precision, max_rel_err)| OpReport {
            op,
            precision,
            instances: accepted,
            rejected,
            coordinates,
            max_rel_err,
            tolerance: precision.tolerance(),
            passed: accepted >= cfg.instances && max_rel_err < precision.tolerance(),
        })
        .collect())
}

/// Runs every selected op.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for &op in &cfg.ops {
        out.extend(check_op(op, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(op: CheckOp) -> GradcheckConfig {
        GradcheckConfig { instances: 3, ops: vec![op], ..GradcheckConfig::default() }
    }

    #[test]
    fn op_names_round_trip() {
        for op in CheckOp::ALL {
            assert_eq!(op.name().parse::<CheckOp>().unwrap(), op);
        }
        assert!("warp".parse::<CheckOp>().is_err());
    }

    #[test]
    fn matmul_and_ctc_pass() {
        for op in [CheckOp::Matmul, CheckOp::CtcLoss] {
            for r in run_suite(&quick(op)).unwrap() {
                assert!(r.passed, "{r:?}");
            }
        }
    }

    #[test]
    fn sampler_sign_flip_is_detected() {
        let cfg = GradcheckConfig { fault: Some(Fault::SamplerSignFlip), ..quick(CheckOp::BilinearSample) };
        assert!(run_suite(&cfg).unwrap().iter().all(|r| !r.passed));
    }
}
