//! Model-inversion attacks: gradient-based input optimisation and learned decoders.

use std::collections::HashSet;
use std::path::Path;

use log::{debug, info};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sf_nn::{rng, Adam, AdamConfig, BatchNorm2d, Conv2d, ConvTranspose2d, Module, Param, ReduceLrOnPlateau, Tape, Tensor, Var};

use crate::datahub::ImageDataset;
use crate::error::{invalid, Error, Result};
use crate::splitmodels::{build_backbone, join, split_at, tap, Block, FeatureMap, MirrorStage, SplitModel, Stack, TapPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    WhiteBox,
    BlackBox,
    GrayBox,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::WhiteBox => "white_box",
            Scenario::BlackBox => "black_box",
            Scenario::GrayBox => "gray_box",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Gaussian,
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MleOptimizer {
    Gd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64 },
}

/// Settings for one gradient-inversion run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackJob {
    pub scenario: Scenario,
    pub tap_point: TapPoint,
    pub steps: usize,
    pub step_size: f64,
    pub tv_weight: f64,
    pub init: Init,
    pub seed: u64,
    pub optimizer: MleOptimizer,
    /// Project iterates onto [0, 1] after every step.
    pub box_constraint: bool,
}

impl Default for AttackJob {
    fn default() -> Self {
        Self {
            scenario: Scenario::WhiteBox,
            tap_point: TapPoint::EdgeOutput,
            steps: 2000,
            step_size: 0.1,
            tv_weight: 0.0,
            init: Init::Gaussian,
            seed: 0,
            optimizer: MleOptimizer::Gd,
            box_constraint: true,
        }
    }
}

impl AttackJob {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return invalid("attack needs at least one step");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return invalid(format!("step size must be positive, got {}", self.step_size));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return invalid(format!("tv weight must be non-negative, got {}", self.tv_weight));
        }
        match self.optimizer {
            MleOptimizer::Gd => {}
            MleOptimizer::Momentum { beta } if (0.0..1.0).contains(&beta) => {}
            MleOptimizer::Adam { beta1, beta2 } if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) => {}
            o => return invalid(format!("optimizer coefficients out of [0, 1): {o:?}")),
        }
        Ok(())
    }
}

/// Anisotropic total variation of an image batch, averaged over the batch.
pub fn total_variation(x: &Tensor) -> Result<f64> {
    if x.ndim() != 4 || x.shape()[2] < 2 || x.shape()[3] < 2 {
        return invalid(format!("total variation needs (n, c, h≥2, w≥2), got {:?}", x.shape()));
    }
    let tape = Tape::no_grad();
    Ok(tape.constant(x.clone()).total_variation().item() / x.shape()[0] as f64)
}

/// A differentiable edge function for white-box inversion.
pub trait EdgeFn {
    fn input_shape(&self) -> (usize, usize, usize);
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t>;
}

/// A split model's edge seen up to a tap point, in inference mode.
pub struct WhiteBoxEdge<'a> {
    pub model: &'a SplitModel,
    pub tap: TapPoint,
}

impl EdgeFn for WhiteBoxEdge<'_> {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.model.input_shape()
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let z = self.model.forward_edge(tape, x, false);
        match self.tap {
            TapPoint::EdgeOutput => z,
            TapPoint::PostCompensation => self.model.cloud.blocks[0].block.forward(tape, z, false),
        }
    }
}

/// A bare convolution as an edge, with a declared input shape.
pub struct ConvEdge {
    pub conv: Conv2d,
    pub input: (usize, usize, usize),
}

impl EdgeFn for ConvEdge {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        self.conv.forward(tape, x)
    }
}

#[derive(Clone, Debug)]
pub struct MleResult {
    /// The lowest-loss iterate, in [0, 1].
    pub images: Tensor,
    /// Objective at every step, before the update.
    pub loss_trace: Vec<f64>,
    /// Running minimum of `loss_trace`.
    pub best_trace: Vec<f64>,
    pub best_step: usize,
}

fn init_images(shape: [usize; 4], init: Init, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::Gaussian => {
            let mut r = rng(seed);
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    0.5 + 0.1 * e
                })
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        }
    }
}

/// Reconstructs inputs by descending `‖edge(x) − z‖² + λ·TV(x)` from a seeded start.
pub fn mle_invert(edge: &dyn EdgeFn, z_target: &FeatureMap, job: &AttackJob) -> Result<MleResult> {
    let (c, h, w) = edge.input_shape();
    let start = init_images([z_target.batch(), c, h, w], job.init, job.seed);
    mle_invert_from(edge, z_target, job, start)
}

/// Like [`mle_invert`] but starting from a caller-supplied batch.
///
/// Samples are independent, so the objective is the per-sample sum and each
/// sample takes steps of size η on its own term; the recorded loss is the batch mean.
pub fn mle_invert_from(edge: &dyn EdgeFn, z_target: &FeatureMap, job: &AttackJob, start: Tensor) -> Result<MleResult> {
    job.validate()?;
    if job.scenario != Scenario::WhiteBox {
        return invalid(format!("gradient inversion needs white-box access, job is {}", job.scenario.name()));
    }
    let (c, h, w) = edge.input_shape();
    let n = z_target.batch();
    if start.shape() != [n, c, h, w] {
        return invalid(format!("start batch {:?} does not match ({n}, {c}, {h}, {w})", start.shape()));
    }
    let mut x = if job.box_constraint { start.map(|v| v.clamp(0.0, 1.0)) } else { start };
    let target = z_target.values().clone();
    let mut best = x.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut loss_trace = Vec::with_capacity(job.steps);
    let mut best_trace = Vec::with_capacity(job.steps);
    let mut m1 = Tensor::zeros(x.shape().to_vec());
    let mut m2 = Tensor::zeros(x.shape().to_vec());
    for step in 0..job.steps {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let z = edge.forward(&tape, xv);
        if z.shape() != target.shape() {
            return invalid(format!("edge output {:?} does not match target {:?}", z.shape(), target.shape()));
        }
        let fit = z.sub(tape.constant(target.clone())).square().sum();
        let obj = if job.tv_weight > 0.0 { fit.add(xv.total_variation().mul(tape.constant(Tensor::scalar(job.tv_weight)))) } else { fit };
        let loss = obj.item() / n as f64;
        if !loss.is_finite() {
            let tail: Vec<String> = loss_trace.iter().rev().take(5).map(|l| format!("{l:.4e}")).collect();
            return Err(Error::NonFinite {
                step,
                diagnostic: format!("inversion objective became {loss}; last losses (newest first): [{}]", tail.join(", ")),
            });
        }
        loss_trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = x.clone();
            best_step = step;
        }
        best_trace.push(best_loss);
        let grads = tape.backward(obj);
        let g = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let eta = job.step_size;
        let update = match job.optimizer {
            MleOptimizer::Gd => g.scale(eta),
            MleOptimizer::Momentum { beta } => {
                m1 = m1.zip_map(&g, |m, g| beta * m + g);
                m1.scale(eta)
            }
            MleOptimizer::Adam { beta1, beta2 } => {
                let t = (step + 1) as i32;
                m1 = m1.zip_map(&g, |m, g| beta1 * m + (1.0 - beta1) * g);
                m2 = m2.zip_map(&g, |v, g| beta2 * v + (1.0 - beta2) * g * g);
                let (b1, b2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                m1.zip_map(&m2, |m, v| eta * (m / b1) / ((v / b2).sqrt() + 1e-8))
            }
        };
        x = x.zip_map(&update, |a, u| a - u);
        if job.box_constraint {
            x = x.map(|v| v.clamp(0.0, 1.0));
        }
    }
    debug!("mle inversion: best loss {best_loss:.4e} at step {best_step}");
    Ok(MleResult { images: best.map(|v| v.clamp(0.0, 1.0)), loss_trace, best_trace, best_step })
}

/// Training recipe for a decoder attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub scenario: Scenario,
    pub tap_point: TapPoint,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Tail fraction of the auxiliary set used for model selection.
    pub holdout_frac: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::WhiteBox,
            tap_point: TapPoint::EdgeOutput,
            epochs: 100,
            batch_size: 64,
            lr: 2e-4,
            beta1: 0.5,
            plateau_factor: 0.5,
            plateau_patience: 20,
            holdout_frac: 0.1,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return invalid("decoder training needs epochs ≥ 1 and batch size ≥ 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) {
            return invalid(format!("bad optimiser settings lr={} beta1={}", self.lr, self.beta1));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return invalid("plateau factor must lie in (0, 1)");
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return invalid("holdout fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    upsample: bool,
    deconv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

/// Generator mapping intercepted features back to images.
#[derive(Clone, Debug)]
pub struct InverseDecoder {
    adapter: Option<Conv2d>,
    layers: Vec<DecoderLayer>,
    pub scenario: Scenario,
    pub tap_point: TapPoint,
    /// `(c, h, w)` of the features the decoder accepts.
    pub z_shape: (usize, usize, usize),
    pub out_shape: (usize, usize, usize),
    pub best_val_mse: f64,
    pub best_epoch: usize,
    pub history: Vec<DecoderEpoch>,
}

impl InverseDecoder {
    /// Builds an untrained decoder from a stage plan, fitting it to `z_shape`.
    pub fn from_plan(
        mut plan: Vec<MirrorStage>,
        z_shape: (usize, usize, usize),
        out_shape: (usize, usize, usize),
        force_adapter: bool,
        seed: u64,
    ) -> Result<Self> {
        let (cz, hz, wz) = z_shape;
        let (co, ho, wo) = out_shape;
        if hz == 0 || wz == 0 || ho % hz != 0 || wo % wz != 0 || ho / hz != wo / wz || !(ho / hz).is_power_of_two() {
            return invalid(format!("feature map {z_shape:?} cannot be decoded to {out_shape:?} by 2× stages"));
        }
        let need = (ho / hz).trailing_zeros() as usize;
        let mut have = plan.iter().filter(|s| s.upsample).count();
        for s in plan.iter_mut() {
            if have <= need {
                break;
            }
            if s.upsample {
                s.upsample = false;
                have -= 1;
            }
        }
        if have < need {
            return invalid(format!("decoder plan upsamples {have} times but {z_shape:?} → {out_shape:?} needs {need}"));
        }
        match plan.last() {
            Some(last) if last.cout == co => {}
            _ => return invalid(format!("decoder plan must end in {co} image channels")),
        }
        let mut r = rng(seed);
        let adapter = (force_adapter || plan[0].cin != cz).then(|| Conv2d::new(cz, plan[0].cin, 1, 1, 0, true, &mut r));
        let last = plan.len() - 1;
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, s)| DecoderLayer {
                upsample: s.upsample,
                deconv: ConvTranspose2d::new(s.cin, s.cout, s.k, 1, s.k / 2, 0, true, &mut r),
                bn: (i < last).then(|| BatchNorm2d::new(s.cout)),
            })
            .collect();
        Ok(Self {
            adapter,
            layers,
            scenario: Scenario::WhiteBox,
            tap_point: TapPoint::EdgeOutput,
            z_shape,
            out_shape,
            best_val_mse: f64::INFINITY,
            best_epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, z: Var<'t>, train: bool) -> Var<'t> {
        let mut h = match &self.adapter {
            Some(a) => a.forward(tape, z),
            None => z,
        };
        for l in &self.layers {
            if l.upsample {
                h = h.upsample_nearest(2);
            }
            h = l.deconv.forward(tape, h);
            h = match &l.bn {
                Some(bn) => bn.forward(tape, h, train).relu(),
                None => h.sigmoid(),
            };
        }
        h
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn snapshot(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p.value.clone()));
        out
    }

    fn restore(&mut self, values: Vec<Tensor>) {
        let mut it = values.into_iter();
        self.visit_mut("", &mut |_, p| p.value = it.next().expect("snapshot matches decoder"));
    }
}

impl Module for InverseDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(a) = &self.adapter {
            a.visit(&join(prefix, "adapter"), f);
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.deconv.visit(&join(prefix, &format!("layer_{i}.deconv")), f);
            if let Some(bn) = &l.bn {
                bn.visit(&join(prefix, &format!("layer_{i}.bn")), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&join(prefix, "adapter"), f);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.deconv.visit_mut(&join(prefix, &format!("layer_{i}.deconv")), f);
            if let Some(bn) = &mut l.bn {
                bn.visit_mut(&join(prefix, &format!("layer_{i}.bn")), f);
            }
        }
    }
}

/// A channel-halving upsampling plan built from the feature shape alone.
pub fn generic_plan(z_shape: (usize, usize, usize), out_shape: (usize, usize, usize)) -> Vec<MirrorStage> {
    let (cz, hz, _) = z_shape;
    let ups = if hz > 0 && out_shape.1 >= hz { (out_shape.1 / hz).max(1).ilog2() as usize } else { 0 };
    let mut c = cz.clamp(16, 256);
    let mut plan = Vec::new();
    for _ in 0..ups {
        let next = (c / 2).max(8);
        plan.push(MirrorStage { cin: c, cout: next, k: 3, upsample: true });
        c = next;
    }
    if plan.is_empty() {
        plan.push(MirrorStage { cin: c, cout: c, k: 3, upsample: false });
    }
    plan.push(MirrorStage { cin: c, cout: out_shape.0, k: 3, upsample: false });
    plan
}

fn mirror_without_funnel(edge: &Stack) -> Vec<MirrorStage> {
    edge.blocks.iter().rev().filter(|b| !matches!(b.block, Block::Funnel { .. })).flat_map(|b| b.block.mirror()).collect()
}

/// Decoder plan the adversary can build under `cfg.scenario`.
pub fn decoder_plan(target: &SplitModel, cfg: &DecoderConfig, z_shape: (usize, usize, usize)) -> Result<(Vec<MirrorStage>, bool)> {
    let out = target.input_shape();
    let plan = match cfg.scenario {
        Scenario::BlackBox => return Ok((generic_plan(z_shape, out), true)),
        Scenario::WhiteBox => match cfg.tap_point {
            TapPoint::EdgeOutput => target.edge.mirror(),
            TapPoint::PostCompensation => mirror_without_funnel(&target.edge),
        },
        Scenario::GrayBox => {
            let assumed = split_at(build_backbone(&target.config)?, &target.split_point)?;
            assumed.edge.mirror()
        }
    };
    if plan.is_empty() {
        return Ok((generic_plan(z_shape, out), false));
    }
    Ok((plan, false))
}

fn check_disjoint(aux_ids: &[usize], train_ids: &[usize]) -> Result<()> {
    let train: HashSet<usize> = train_ids.iter().copied().collect();
    let overlap = aux_ids.iter().filter(|i| train.contains(i)).count();
    if overlap > 0 {
        return invalid(format!("auxiliary data shares {overlap} images with the target's training split"));
    }
    Ok(())
}

fn decoder_mse(dec: &InverseDecoder, z: &Tensor, x: &Tensor) -> f64 {
    let n = z.shape()[0];
    let mut sq = 0.0;
    for s in (0..n).step_by(256) {
        let e = (s + 256).min(n);
        let tape = Tape::no_grad();
        let out = dec.forward(&tape, tape.constant(z.slice_batch(s, e)), false).value();
        sq += out.zip_map(&x.slice_batch(s, e), |a, b| (a - b) * (a - b)).sum();
    }
    sq / x.numel() as f64
}

/// Trains a decoder on auxiliary images `aux` with source ids `aux_ids`, which
/// must be disjoint from `train_ids`. Only the edge's tap output is queried.
pub fn train_inverse_decoder(
    target: &SplitModel,
    aux: &ImageDataset,
    aux_ids: &[usize],
    train_ids: &[usize],
    cfg: &DecoderConfig,
) -> Result<InverseDecoder> {
    let point = cfg.tap_point;
    train_inverse_decoder_observed(target, aux, aux_ids, train_ids, cfg, &|x, _| tap(target, x, point))
}

/// As [`train_inverse_decoder`], with `observe(images, offset)` standing in for
/// the edge query, e.g. to include an inference-time perturbation.
pub fn train_inverse_decoder_observed(
    target: &SplitModel,
    aux: &ImageDataset,
    aux_ids: &[usize],
    train_ids: &[usize],
    cfg: &DecoderConfig,
    observe: &dyn Fn(&Tensor, usize) -> Result<FeatureMap>,
) -> Result<InverseDecoder> {
    cfg.validate()?;
    if aux_ids.len() != aux.len() {
        return invalid(format!("{} aux ids for {} aux images", aux_ids.len(), aux.len()));
    }
    check_disjoint(aux_ids, train_ids)?;
    if cfg.tap_point == TapPoint::PostCompensation && !target.has_compensation() {
        return invalid("post_compensation tap needs a model with a compensation module");
    }
    let n = aux.len();
    let held = ((n as f64 * cfg.holdout_frac).ceil() as usize).max(1);
    if n < held + 1 {
        return invalid(format!("auxiliary set of {n} images is too small to hold out {held}"));
    }
    let x = aux.all_images();
    let mut parts = Vec::new();
    for s in (0..n).step_by(256) {
        parts.push(observe(&x.slice_batch(s, (s + 256).min(n)), s)?.into_tensor());
    }
    let z = Tensor::cat_batch(&parts)?;
    let zs = z.shape();
    let z_shape = (zs[1], zs[2], zs[3]);
    let (plan, force) = decoder_plan(target, cfg, z_shape)?;
    let mut dec = InverseDecoder::from_plan(plan, z_shape, target.input_shape(), force, cfg.seed)?;
    dec.scenario = cfg.scenario;
    dec.tap_point = cfg.tap_point;
    fit_decoder(&mut dec, &x, &z, n - held, cfg)?;
    Ok(dec)
}

/// Fits `dec` on `z → x`, using the first `n_train` pairs for updates and the
/// rest for selection. The minimum-validation parameters are kept.
pub fn fit_decoder(dec: &mut InverseDecoder, x: &Tensor, z: &Tensor, n_train: usize, cfg: &DecoderConfig) -> Result<()> {
    let n = x.shape()[0];
    let (xt, zt) = (x.slice_batch(0, n_train), z.slice_batch(0, n_train));
    let (xv, zv) = (x.slice_batch(n_train, n), z.slice_batch(n_train, n));
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: cfg.beta1, ..AdamConfig::default() });
    let mut plateau = ReduceLrOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut best = (dec.snapshot(), f64::INFINITY, 0);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut r = rng(cfg.seed ^ 0xDEC0);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let mut sq = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let out = dec.forward(&tape, tape.constant(zt.select_batch(chunk)), true);
            let loss = out.sub(tape.constant(xt.select_batch(chunk))).square().mean();
            let l = loss.item();
            if !l.is_finite() {
                return Err(Error::NonFinite { step: epoch, diagnostic: format!("decoder loss became {l}") });
            }
            sq += l * chunk.len() as f64;
            let grads = tape.backward(loss);
            opt.step(dec, &grads);
            dec.apply_buffer_updates(&tape);
        }
        let val = decoder_mse(dec, &zv, &xv);
        let lr = plateau.observe(val, opt.lr());
        opt.set_lr(lr);
        dec.history.push(DecoderEpoch { epoch, train_mse: sq / n_train as f64, val_mse: val, lr });
        if val < best.1 {
            best = (dec.snapshot(), val, epoch);
        }
        debug!("decoder epoch {epoch}: train {:.5} val {val:.5} lr {lr:.2e}", sq / n_train as f64);
    }
    dec.restore(best.0);
    dec.best_val_mse = best.1;
    dec.best_epoch = best.2;
    info!("decoder ({}) best held-out MSE {:.5} at epoch {}", dec.scenario.name(), best.1, best.2);
    Ok(())
}

/// Decodes intercepted features in one inference pass.
pub fn gen_invert(decoder: &InverseDecoder, z: &FeatureMap) -> Result<Tensor> {
    let [_, c, h, w] = z.shape();
    if (c, h, w) != decoder.z_shape {
        return invalid(format!("features ({c}, {h}, {w}) do not match decoder input {:?}", decoder.z_shape));
    }
    let tape = Tape::no_grad();
    let out = decoder.forward(&tape, tape.constant(z.values().clone()), false).value();
    Ok(out.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
}

/// Writes a two-row PNG: targets on top, reconstructions below.
pub fn write_mosaic(path: &Path, targets: &Tensor, recon: &Tensor, max_images: usize) -> Result<()> {
    if targets.shape() != recon.shape() || targets.ndim() != 4 {
        return invalid(format!("mosaic needs matching 4-D batches, got {:?} and {:?}", targets.shape(), recon.shape()));
    }
    let [n, c, h, w] = [targets.shape()[0], targets.shape()[1], targets.shape()[2], targets.shape()[3]];
    if c != 1 && c != 3 {
        return invalid(format!("mosaic supports 1 or 3 channels, got {c}"));
    }
    let k = n.min(max_images).max(1);
    let mut img = image::RgbImage::new((k * w) as u32, (2 * h) as u32);
    for (row, t) in [targets, recon].into_iter().enumerate() {
        for i in 0..k.min(n) {
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| {
                        let v = t.data()[((i * c + ch.min(c - 1)) * h + y) * w + x];
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8
                    };
                    img.put_pixel((i * w + x) as u32, (row * h + y) as u32, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::synth_dataset;
    use crate::splitmodels::{BackboneConfig, BackboneKind, Named};
    use proptest::prelude::*;

    fn identity_conv(c: usize) -> Conv2d {
        let mut r = rng(0);
        let mut conv = Conv2d::new(c, c, 3, 1, 1, false, &mut r);
        let mut w = vec![0.0; c * c * 9];
        for i in 0..c {
            w[(i * c + i) * 9 + 4] = 1.0;
        }
        conv.weight.value = Tensor::new(vec![c, c, 3, 3], w).unwrap();
        conv
    }

    fn identity_model(res: usize) -> SplitModel {
        let base = build_backbone(&BackboneConfig::new(BackboneKind::BaseCnn, 4, (res, res)).with_width(1.0 / 16.0)).unwrap();
        SplitModel { edge: Stack { blocks: vec![Named { name: "identity".into(), block: Block::Identity }] }, ..base }
    }

    #[test]
    fn tv_hand_values() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&x).unwrap(), 2.0);
        assert_eq!(total_variation(&Tensor::full(vec![2, 3, 4, 4], 0.3)).unwrap(), 0.0);
        let two = Tensor::cat_batch(&[x.clone(), x.map(|v| 2.0 * v)]).unwrap();
        assert_eq!(total_variation(&two).unwrap(), 3.0);
        assert!(total_variation(&Tensor::zeros(vec![1, 1, 1, 4])).is_err());
    }

    proptest! {
        #[test]
        fn tv_is_shift_invariant(seed in 0u64..1000, shift in -3.0f64..3.0) {
            let x = init_images([2, 2, 5, 4], Init::Gaussian, seed);
            let a = total_variation(&x).unwrap();
            let b = total_variation(&x.map(|v| v + shift)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn linear_edge_is_inverted() {
        let edge = ConvEdge { conv: identity_conv(1), input: (1, 16, 16) };
        let truth = init_images([1, 1, 16, 16], Init::Gaussian, 9).map(|v| v.clamp(0.0, 1.0));
        let tape = Tape::no_grad();
        let z = FeatureMap::new(edge.forward(&tape, tape.constant(truth.clone())).value().as_ref().clone()).unwrap();
        let job = AttackJob { steps: 2000, step_size: 0.2, ..AttackJob::default() };
        let res = mle_invert(&edge, &z, &job).unwrap();
        let mse = res.images.zip_map(&truth, |a, b| (a - b) * (a - b)).mean();
        assert!(mse < 1e-3, "mse {mse}");
        assert!(res.best_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fixed_point_start() {
        let edge = ConvEdge { conv: identity_conv(2), input: (2, 6, 6) };
        let x0 = init_images([2, 2, 6, 6], Init::Gaussian, 4).map(|v| v.clamp(0.0, 1.0));
        let tape = Tape::no_grad();
        let z = FeatureMap::new(edge.forward(&tape, tape.constant(x0.clone())).value().as_ref().clone()).unwrap();
        let res = mle_invert_from(&edge, &z, &AttackJob { steps: 5, ..AttackJob::default() }, x0.clone()).unwrap();
        assert!(res.loss_trace[0] < 1e-20);
        assert!(res.images.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn non_white_box_and_bad_jobs_rejected() {
        let edge = ConvEdge { conv: identity_conv(1), input: (1, 4, 4) };
        let z = FeatureMap::new(Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
        for scenario in [Scenario::BlackBox, Scenario::GrayBox] {
            let job = AttackJob { scenario, ..AttackJob::default() };
            assert!(matches!(mle_invert(&edge, &z, &job), Err(Error::Validation(_))));
        }
        assert!(mle_invert(&edge, &z, &AttackJob { steps: 0, ..AttackJob::default() }).is_err());
        assert!(mle_invert(&edge, &z, &AttackJob { step_size: 0.0, ..AttackJob::default() }).is_err());
        assert!(mle_invert(&edge, &z, &AttackJob { tv_weight: -1.0, ..AttackJob::default() }).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let edge = ConvEdge { conv: identity_conv(1), input: (1, 4, 4) };
        let z = FeatureMap::new(Tensor::full(vec![1, 1, 4, 4], 3.0)).unwrap();
        let job = AttackJob { step_size: 1e200, box_constraint: false, steps: 50, ..AttackJob::default() };
        assert!(matches!(mle_invert(&edge, &z, &job), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mle_is_seed_deterministic() {
        let edge = ConvEdge { conv: identity_conv(1), input: (1, 6, 6) };
        let z = FeatureMap::new(init_images([2, 1, 6, 6], Init::Gaussian, 1)).unwrap();
        let job = AttackJob { steps: 20, tv_weight: 0.01, optimizer: MleOptimizer::Momentum { beta: 0.9 }, ..AttackJob::default() };
        let a = mle_invert(&edge, &z, &job).unwrap();
        let b = mle_invert(&edge, &z, &job).unwrap();
        assert_eq!(a.images, b.images);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn decoder_learns_identity_edge() {
        let model = identity_model(16);
        let aux = synth_dataset(400, (16, 16), 4, 2).unwrap();
        let ids: Vec<usize> = (0..400).collect();
        let cfg = DecoderConfig { epochs: 10, batch_size: 16, lr: 2e-3, beta1: 0.9, ..DecoderConfig::default() };
        let dec = train_inverse_decoder(&model, &aux, &ids, &[], &cfg).unwrap();
        assert!(dec.best_val_mse < 1e-3, "held-out mse {}", dec.best_val_mse);
        let x = aux.images(&[0, 1, 2, 3]);
        let z = FeatureMap::new(x.clone()).unwrap();
        let a = gen_invert(&dec, &z).unwrap();
        assert_eq!(a, gen_invert(&dec, &z).unwrap());
        assert!(a.zip_map(&x, |p, q| (p - q) * (p - q)).mean() < 2e-3);
        let zero = gen_invert(&dec, &FeatureMap::new(Tensor::zeros(vec![1, 3, 16, 16])).unwrap()).unwrap();
        assert!(zero.all_finite());
        assert!(gen_invert(&dec, &FeatureMap::new(Tensor::zeros(vec![1, 3, 8, 8])).unwrap()).is_err());
    }

    #[test]
    fn overlapping_aux_rejected() {
        let model = identity_model(16);
        let aux = synth_dataset(20, (16, 16), 4, 2).unwrap();
        let ids: Vec<usize> = (0..20).collect();
        let err = train_inverse_decoder(&model, &aux, &ids, &[19, 40], &DecoderConfig::default());
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn mirror_plans_fit_feature_shapes() {
        let cfg = BackboneConfig::new(BackboneKind::BaseCnn, 10, (32, 32)).with_width(1.0 / 16.0);
        let base = build_backbone(&cfg).unwrap();
        let zs = base.feature_shape();
        let (plan, force) = decoder_plan(&base, &DecoderConfig::default(), zs).unwrap();
        assert!(!force);
        let dec = InverseDecoder::from_plan(plan, zs, (3, 32, 32), false, 0).unwrap();
        assert!(!dec.has_adapter());
        let tape = Tape::no_grad();
        let out = dec.forward(&tape, tape.constant(Tensor::zeros(vec![2, zs.0, zs.1, zs.2])), false);
        assert_eq!(out.shape(), vec![2, 3, 32, 32]);

        let gray = DecoderConfig { scenario: Scenario::GrayBox, ..DecoderConfig::default() };
        let wide = (2, 16, 16);
        let (plan, _) = decoder_plan(&base, &gray, wide).unwrap();
        let dec = InverseDecoder::from_plan(plan, wide, (3, 32, 32), false, 0).unwrap();
        assert!(dec.has_adapter());
        let out = dec.forward(&tape, tape.constant(Tensor::zeros(vec![1, 2, 16, 16])), false);
        assert_eq!(out.shape(), vec![1, 3, 32, 32]);

        let plan = generic_plan((5, 4, 4), (3, 32, 32));
        assert_eq!(plan.iter().filter(|s| s.upsample).count(), 3);
        assert!(InverseDecoder::from_plan(plan, (5, 4, 4), (3, 32, 32), true, 0).is_ok());
        assert!(InverseDecoder::from_plan(generic_plan((5, 3, 3), (3, 32, 32)), (5, 3, 3), (3, 32, 32), true, 0).is_err());
    }

    #[test]
    fn mosaic_has_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let t = init_images([3, 3, 8, 8], Init::Gaussian, 0);
        write_mosaic(&p, &t, &t.map(|v| 1.0 - v), 8).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (24, 16));
    }
}
