//! Localization and recognition networks and the full detection plus
//! recognition forward pass.
//!
//! Stage layout shared by both networks, with every 3x3 convolution padded
//! by 1 and followed by batch normalization:
//!
//! | layer        | output (c, h, w)          |
//! |--------------|---------------------------|
//! | stem conv    | f1, h, w                  |
//! | avg pool 2/2 | f1, h/2, w/2              |
//! | res block    | f1, h/2, w/2              |
//! | res block    | f2, h/2, w/2              |
//! | max pool 2/2 | f2, h/4, w/4              |
//! | res block    | f3, h/4, w/4              |
//! | tiled pool 5 | f3, ceil(h/20), ceil(w/20) |
//!
//! The localization network feeds the flattened pooled map to the BLSTM
//! affine head. The recognition network runs on every crop; the ensemble
//! head reads the flattened pooled map, the CTC head reads the columns of
//! the last residual block's output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, PoolKind, RunningStats, Tape, Var};
use crate::ctc::LogitSequence;
use crate::error::{Error, Result};
use crate::heads::{self, HeadKind};
use crate::labels::{Alphabet, LabelSequence};
use crate::params::{he_uniform, xavier_uniform, Bound, ParamId, ParamStore};
use crate::recurrent::{affine_rows, AffineHead};
use crate::spatial::{generate_grid, AffineParams, BoundingBox};
use crate::tensor::{Real, Tensor};

/// Window of the final average pool.
pub const FINAL_POOL: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Regions `N` predicted per image.
    pub n_regions: usize,
    /// Maximum characters per region; the ensemble head has this many
    /// classifiers.
    pub timesteps: usize,
    pub alphabet: Alphabet,
    pub head: HeadKind,
    pub localization_filters: [usize; 3],
    pub recognition_filters: [usize; 3],
    pub blstm_hidden: usize,
    /// Crop size `[height, width]`.
    pub region_size: [usize; 2],
    /// Input image size `[height, width]`.
    pub input_size: [usize; 2],
    pub channels: usize,
    /// Forces the rotation and skew entries of every transform to zero.
    pub rotation_skew_off: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_regions: 1,
            timesteps: 3,
            alphabet: Alphabet::digits(),
            head: HeadKind::Ensemble,
            localization_filters: [32, 48, 48],
            recognition_filters: [32, 64, 128],
            blstm_hidden: 256,
            region_size: [32, 32],
            input_size: [64, 64],
            channels: 1,
            rotation_skew_off: true,
        }
    }
}

/// Output shape `(c, h, w)` of each layer of one network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub layers: Vec<(String, [usize; 3])>,
}

impl ShapeTrace {
    pub fn output(&self) -> [usize; 3] {
        self.layers.last().map(|l| l.1).unwrap_or([0; 3])
    }

    pub fn get(&self, layer: &str) -> Option<[usize; 3]> {
        self.layers.iter().find(|l| l.0 == layer).map(|l| l.1)
    }
}

fn trunk_trace(prefix: &str, input: [usize; 3], filters: [usize; 3]) -> Result<ShapeTrace> {
    let mut layers = Vec::new();
    let [_, h, w] = input;
    let mut push = |name: &str, s: [usize; 3]| layers.push((format!("{prefix}.{name}"), s));
    push("stem", [filters[0], h, w]);
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("{prefix}.pool1: {h}x{w} input is too small for 2x2 pooling")));
    }
    let (h, w) = (h / 2, w / 2);
    push("pool1", [filters[0], h, w]);
    push("res1", [filters[0], h, w]);
    push("res2", [filters[1], h, w]);
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("{prefix}.pool2: {h}x{w} map is too small for 2x2 pooling")));
    }
    let (h, w) = (h / 2, w / 2);
    push("pool2", [filters[1], h, w]);
    push("res3", [filters[2], h, w]);
    push("pool3", [filters[2], h.div_ceil(FINAL_POOL), w.div_ceil(FINAL_POOL)]);
    Ok(ShapeTrace { layers })
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_regions", self.n_regions),
            ("timesteps", self.timesteps),
            ("blstm_hidden", self.blstm_hidden),
            ("channels", self.channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, f) in [("localization_filters", self.localization_filters), ("recognition_filters", self.recognition_filters)] {
            if f.contains(&0) {
                return Err(Error::Config(format!("{name} must all be at least 1")));
            }
        }
        if self.region_size.contains(&0) || self.input_size.contains(&0) {
            return Err(Error::Config("image and region sizes must be positive".into()));
        }
        self.localization_trace()?;
        self.recognition_trace()?;
        if self.head == HeadKind::Ctc {
            let steps = self.ctc_timesteps();
            // worst case: every adjacent pair repeats
            if steps < 2 * self.timesteps - 1 {
                return Err(Error::Config(format!(
                    "ctc head emits {steps} timesteps, too few for labels of up to {} characters",
                    self.timesteps
                )));
            }
        }
        Ok(())
    }

    pub fn localization_trace(&self) -> Result<ShapeTrace> {
        trunk_trace("loc", [self.channels, self.input_size[0], self.input_size[1]], self.localization_filters)
    }

    pub fn recognition_trace(&self) -> Result<ShapeTrace> {
        trunk_trace("rec", [self.channels, self.region_size[0], self.region_size[1]], self.recognition_filters)
    }

    /// `|L| + 1`.
    pub fn classes(&self) -> usize {
        self.alphabet.classes()
    }

    /// Timesteps emitted by the CTC head: the width after the trunk.
    pub fn ctc_timesteps(&self) -> usize {
        self.region_size[1] / 4
    }

    /// Timesteps of each region's logit sequence for the configured head.
    pub fn head_timesteps(&self) -> usize {
        match self.head {
            HeadKind::Ensemble => self.timesteps,
            HeadKind::Ctc => self.ctc_timesteps(),
        }
    }

    fn flat(shape: [usize; 3]) -> usize {
        shape.iter().product()
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> Result<usize> {
        let conv_bn = |c: usize, f: usize, k: usize| f * c * k * k + 2 * f;
        let block = |c: usize, f: usize| conv_bn(c, f, 3) + conv_bn(f, f, 3) + if c == f { 0 } else { conv_bn(c, f, 1) };
        let trunk = |c: usize, f: [usize; 3]| conv_bn(c, f[0], 3) + block(f[0], f[0]) + block(f[0], f[1]) + block(f[1], f[2]);
        let loc_feat = Self::flat(self.localization_trace()?.output());
        let k = self.classes();
        let rec_head = match self.head {
            HeadKind::Ensemble => {
                let feat = Self::flat(self.recognition_trace()?.output());
                (feat + 1) * self.timesteps * k
            }
            HeadKind::Ctc => (self.recognition_filters[2] + 1) * k,
        };
        Ok(trunk(self.channels, self.localization_filters)
            + AffineHead::param_count(loc_feat, self.blstm_hidden)
            + trunk(self.channels, self.recognition_filters)
            + rec_head)
    }
}

/// 3x3 (or 1x1) convolution without bias followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
    pad: usize,
}

/// Running statistics of every normalization layer, by layer name.
pub type NamedStats<S> = Vec<(String, RunningStats<S>)>;

struct Builder<'a, S: Real> {
    params: &'a mut ParamStore<S>,
    stats: &'a mut NamedStats<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Real> Builder<'_, S> {
    fn conv_bn(&mut self, name: &str, c: usize, f: usize, k: usize) -> ConvBn {
        let w = self.params.add(format!("{name}.w"), he_uniform(&[f, c, k, k], c * k * k, self.rng));
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::full(&[f], S::one()));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(&[f]));
        self.stats.push((format!("{name}.bn"), RunningStats::new(f)));
        ConvBn { w, gamma, beta, stats: self.stats.len() - 1, pad: k / 2 }
    }

    fn block(&mut self, name: &str, c: usize, f: usize) -> ResidualBlock {
        ResidualBlock {
            a: self.conv_bn(&format!("{name}.conv1"), c, f, 3),
            b: self.conv_bn(&format!("{name}.conv2"), f, f, 3),
            proj: (c != f).then(|| self.conv_bn(&format!("{name}.proj"), c, f, 1)),
        }
    }

    fn trunk(&mut self, name: &str, c: usize, f: [usize; 3]) -> Trunk {
        Trunk {
            stem: self.conv_bn(&format!("{name}.stem"), c, f[0], 3),
            res1: self.block(&format!("{name}.res1"), f[0], f[0]),
            res2: self.block(&format!("{name}.res2"), f[0], f[1]),
            res3: self.block(&format!("{name}.res3"), f[1], f[2]),
        }
    }
}

/// Borrowed state for one forward pass.
struct Ctx<'a, S: Real> {
    bound: &'a Bound,
    stats: &'a mut NamedStats<S>,
    mode: NormMode,
}

impl ConvBn {
    fn forward<S: Real>(&self, tape: &mut Tape<S>, ctx: &mut Ctx<'_, S>, x: Var, relu: bool) -> Result<Var> {
        let y = tape.conv2d(x, ctx.bound.var(self.w), 1, self.pad)?;
        let y = tape.batch_norm(
            y,
            ctx.bound.var(self.gamma),
            ctx.bound.var(self.beta),
            ctx.mode,
            &mut ctx.stats[self.stats].1,
        )?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock {
    a: ConvBn,
    b: ConvBn,
    proj: Option<ConvBn>,
}

impl ResidualBlock {
    fn forward<S: Real>(&self, tape: &mut Tape<S>, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let y = self.a.forward(tape, ctx, x, true)?;
        let y = self.b.forward(tape, ctx, y, false)?;
        let shortcut = match &self.proj {
            Some(p) => p.forward(tape, ctx, x, false)?,
            None => x,
        };
        let sum = tape.add(y, shortcut)?;
        tape.relu(sum)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Trunk {
    stem: ConvBn,
    res1: ResidualBlock,
    res2: ResidualBlock,
    res3: ResidualBlock,
}

impl Trunk {
    /// Output of the last residual block.
    fn forward<S: Real>(&self, tape: &mut Tape<S>, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let y = self.stem.forward(tape, ctx, x, true)?;
        let y = tape.pool(y, PoolKind::Avg, 2, 2)?;
        let y = self.res1.forward(tape, ctx, y)?;
        let y = self.res2.forward(tape, ctx, y)?;
        let y = tape.pool(y, PoolKind::Max, 2, 2)?;
        self.res3.forward(tape, ctx, y)
    }
}

fn flatten<S: Real>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let rest: usize = shape[1..].iter().product();
    tape.reshape(x, &[shape[0], rest])
}

#[derive(Clone, Debug, PartialEq)]
struct Architecture {
    loc: Trunk,
    loc_head: AffineHead,
    rec: Trunk,
    rec_w: ParamId,
    rec_b: ParamId,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[batch * n, 6]`, rows grouped by image.
    pub theta: Var,
    /// `[batch * n, channels, h_o, w_o]`.
    pub crops: Var,
    /// `[batch * n * head_timesteps, classes]`.
    pub logits: Var,
}

/// One detected and read region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPrediction {
    pub theta: AffineParams,
    pub bbox: BoundingBox,
    pub labels: LabelSequence,
    pub text: String,
    pub confidence: f64,
}

/// The full network: parameters, normalization statistics and layout.
#[derive(Clone, Debug, PartialEq)]
pub struct StnOcr<S: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub stats: NamedStats<S>,
    arch: Architecture,
}

/// Name prefix of recognition-network parameters and statistics.
pub const RECOGNITION_PREFIX: &str = "rec.";

impl<S: Real> StnOcr<S> {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut b = Builder { params: &mut params, stats: &mut stats, rng: &mut rng };
        let loc = b.trunk("loc", config.channels, config.localization_filters);
        let loc_feat = ModelConfig::flat(config.localization_trace()?.output());
        let loc_head = AffineHead::new(b.params, "loc.head", loc_feat, config.blstm_hidden, config.rotation_skew_off, b.rng);
        let rec = b.trunk("rec", config.channels, config.recognition_filters);
        let k = config.classes();
        let (fan_in, fan_out) = match config.head {
            HeadKind::Ensemble => (ModelConfig::flat(config.recognition_trace()?.output()), config.timesteps * k),
            HeadKind::Ctc => (config.recognition_filters[2], k),
        };
        let rec_w = b.params.add("rec.head.w", xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, b.rng));
        let rec_b = b.params.add("rec.head.b", Tensor::zeros(&[fan_out]));
        let arch = Architecture { loc, loc_head, rec, rec_w, rec_b };
        Ok(Self { config, params, stats, arch })
    }

    /// Replaces recognition weights and statistics with a fresh draw from
    /// `seed`, keeping the localization network.
    pub fn reinit_recognition(&mut self, seed: u64) -> Result<()> {
        let fresh = Self::new(self.config.clone(), seed)?;
        for id in self.params.ids().collect::<Vec<_>>() {
            if self.params.name(id).starts_with(RECOGNITION_PREFIX) {
                *self.params.get_mut(id) = fresh.params.get(id).clone();
            }
        }
        for (mine, theirs) in self.stats.iter_mut().zip(fresh.stats) {
            if mine.0.starts_with(RECOGNITION_PREFIX) {
                mine.1 = theirs.1;
            }
        }
        Ok(())
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        match *shape {
            [b, ch, h, w] if ch == c.channels && [h, w] == c.input_size && b > 0 => Ok(b),
            _ => Err(Error::dim(format!(
                "images {shape:?} do not match [batch, {}, {}, {}]",
                c.channels, c.input_size[0], c.input_size[1]
            ))),
        }
    }

    /// Records the forward pass of `[batch, channels, h, w]` images on
    /// `tape`. In [`NormMode::Train`] the running statistics in `stats` are
    /// updated.
    pub fn forward_with(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        stats: &mut NamedStats<S>,
        images: Var,
        mode: NormMode,
    ) -> Result<ForwardVars> {
        let batch = self.check_images(tape.shape(images))?;
        let cfg = &self.config;
        let a = &self.arch;
        let mut ctx = Ctx { bound, stats, mode };

        let loc_map = a.loc.forward(tape, &mut ctx, images)?;
        let loc_feat = tape.tiled_avg_pool(loc_map, FINAL_POOL)?;
        let loc_feat = flatten(tape, loc_feat)?;
        let theta = a.loc_head.forward(tape, bound, loc_feat, cfg.n_regions)?;

        let [ho, wo] = cfg.region_size;
        let [h, w] = cfg.input_size;
        let grid = tape.affine_grid(theta, ho, wo, h, w)?;
        let crops = tape.bilinear_sample(images, grid, cfg.n_regions)?;

        let rec_map = a.rec.forward(tape, &mut ctx, crops)?;
        let k = cfg.classes();
        let logits = match cfg.head {
            HeadKind::Ensemble => {
                let f = tape.tiled_avg_pool(rec_map, FINAL_POOL)?;
                let f = flatten(tape, f)?;
                let l = tape.matmul(f, bound.var(a.rec_w))?;
                let l = tape.add_row_bias(l, bound.var(a.rec_b))?;
                tape.reshape(l, &[batch * cfg.n_regions * cfg.timesteps, k])?
            }
            HeadKind::Ctc => {
                let cols = tape.column_mean(rec_map)?;
                let l = tape.matmul(cols, bound.var(a.rec_w))?;
                tape.add_row_bias(l, bound.var(a.rec_b))?
            }
        };
        Ok(ForwardVars { theta, crops, logits })
    }

    /// Recognition loss of a forward pass. `targets` holds one label per
    /// region, grouped by image in region order.
    pub fn loss(&self, tape: &mut Tape<S>, fwd: &ForwardVars, targets: &[LabelSequence]) -> Result<Var> {
        let cfg = &self.config;
        match cfg.head {
            HeadKind::Ensemble => tape.softmax_ensemble_loss(fwd.logits, cfg.timesteps, cfg.classes(), targets),
            HeadKind::Ctc => tape.ctc_loss(fwd.logits, cfg.ctc_timesteps(), targets),
        }
    }

    /// Per-region logit sequences of a forward pass, grouped by image.
    pub fn logit_sequences(&self, logits: &Tensor<S>) -> Result<Vec<LogitSequence<S>>> {
        let t = self.config.head_timesteps();
        let k = self.config.classes();
        logits
            .data()
            .chunks(t * k)
            .map(|c| LogitSequence::new(t, k, c.to_vec(), false))
            .collect()
    }

    /// Inference on `[batch, channels, h, w]` images: one list of region
    /// predictions per image. Uses running statistics; never mutates.
    pub fn predict(&self, images: &Tensor<S>) -> Result<Vec<Vec<RegionPrediction>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut stats = self.stats.clone();
        let x = tape.constant(images.clone());
        let fwd = self.forward_with(&mut tape, &bound, &mut stats, x, NormMode::Infer)?;
        self.read_predictions(&tape, &fwd)
    }

    /// Decodes boxes and labels from a recorded forward pass.
    pub fn read_predictions(&self, tape: &Tape<S>, fwd: &ForwardVars) -> Result<Vec<Vec<RegionPrediction>>> {
        let cfg = &self.config;
        let thetas = affine_rows(tape.value(fwd.theta));
        let seqs = self.logit_sequences(tape.value(fwd.logits))?;
        let [ho, wo] = cfg.region_size;
        let [h, w] = cfg.input_size;
        let mut regions = Vec::with_capacity(thetas.len());
        for (theta, seq) in thetas.into_iter().zip(&seqs) {
            let grid = generate_grid(&theta, ho, wo, h, w)?;
            let labels = heads::decode(cfg.head, seq)?;
            regions.push(RegionPrediction {
                theta,
                bbox: BoundingBox { corners: grid.corners() },
                text: cfg.alphabet.decode(&labels.labels),
                labels,
                confidence: heads::confidence(seq),
            });
        }
        Ok(regions.chunks(cfg.n_regions).map(<[_]>::to_vec).collect())
    }
}
