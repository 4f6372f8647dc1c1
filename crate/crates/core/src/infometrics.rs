//! Mutual-information estimation (MINE), effective information mean, the
//! Fano reconstruction-error bound and the D_mia difficulty score.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sf_nn::{rng, Adam, AdamConfig, Conv2d, Linear, Module, Param, SeededRng, Tape, Tensor, Var};

use crate::datahub::ImageDataset;
use crate::error::{invalid, Error, Result};
use crate::splitmodels::{tap, SplitModel, TapPoint};

/// Source of paired `(x, z)` batches drawn from the joint distribution.
pub trait PairSampler {
    fn sample(&mut self, batch: usize) -> (Tensor, Tensor);
}

/// `x ~ N(0, I)`, `z = ρx + sqrt(1-ρ²)ε` coordinate-wise.
pub struct GaussianPairs {
    pub dim: usize,
    pub rho: f64,
    rng: SeededRng,
}

impl GaussianPairs {
    pub fn new(dim: usize, rho: f64, seed: u64) -> Self {
        Self { dim, rho, rng: rng(seed) }
    }

    /// Closed-form `I(x; z)` in nats.
    pub fn true_mi(&self) -> f64 {
        -0.5 * self.dim as f64 * (1.0 - self.rho * self.rho).ln()
    }
}

impl PairSampler for GaussianPairs {
    fn sample(&mut self, batch: usize) -> (Tensor, Tensor) {
        let n = batch * self.dim;
        let x: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        let s = (1.0 - self.rho * self.rho).max(0.0).sqrt();
        let z: Vec<f64> = x.iter().map(|&v| self.rho * v + s * self.rng.sample::<f64, _>(StandardNormal)).collect();
        let shape = vec![batch, self.dim];
        (Tensor::new(shape.clone(), x).unwrap(), Tensor::new(shape, z).unwrap())
    }
}

/// Uniformly resampled rows of two aligned tensors.
pub struct TensorPairs {
    x: Tensor,
    z: Tensor,
    rng: SeededRng,
}

impl TensorPairs {
    pub fn new(x: Tensor, z: Tensor, seed: u64) -> Result<Self> {
        if x.shape().first() != z.shape().first() || x.numel() == 0 {
            return invalid("paired tensors must be non-empty with equal batch sizes");
        }
        Ok(Self { x, z, rng: rng(seed) })
    }
}

impl PairSampler for TensorPairs {
    fn sample(&mut self, batch: usize) -> (Tensor, Tensor) {
        let n = self.x.shape()[0];
        let idx: Vec<usize> = (0..batch).map(|_| self.rng.random_range(0..n)).collect();
        (self.x.select_batch(&idx), self.z.select_batch(&idx))
    }
}

/// Wraps a sampler and permutes `z` within each batch, destroying dependence.
pub struct Decoupled<S> {
    inner: S,
    rng: SeededRng,
}

impl<S: PairSampler> Decoupled<S> {
    pub fn new(inner: S, seed: u64) -> Self {
        Self { inner, rng: rng(seed) }
    }
}

impl<S: PairSampler> PairSampler for Decoupled<S> {
    fn sample(&mut self, batch: usize) -> (Tensor, Tensor) {
        let (x, z) = self.inner.sample(batch);
        let mut p: Vec<usize> = (0..batch).collect();
        p.shuffle(&mut self.rng);
        (x, z.select_batch(&p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_rate: f64,
    pub hidden: usize,
    /// Width of the per-input conv-encoder embeddings (image inputs only).
    pub embed: usize,
    /// Evaluation batch; the bound saturates at `ln(eval_batch)`.
    pub eval_batch: usize,
    pub eval_batches: usize,
    /// Consecutive training steps above `ln(batch_size)` before stopping.
    pub saturation_patience: usize,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            lr: 1e-3,
            ema_rate: 0.99,
            hidden: 64,
            embed: 128,
            eval_batch: 256,
            eval_batches: 20,
            saturation_patience: 100,
            seed: 0,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size < 2 || self.eval_batch < 2 || self.eval_batches == 0 {
            return invalid("MINE needs steps ≥ 1, batches of at least two and at least one evaluation batch");
        }
        if !(0.0..1.0).contains(&self.ema_rate) || !(self.lr > 0.0) {
            return invalid("MINE needs ema_rate in [0, 1) and a positive learning rate");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Flat,
    Conv { c1: Conv2d, c2: Conv2d, fc: Linear },
}

impl Encoder {
    fn for_shape(shape: &[usize], embed: usize, r: &mut SeededRng) -> (Self, usize) {
        if shape.len() == 4 {
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let down = |s: usize| (s - 1) / 2 + 1;
            let flat = 32 * down(down(h)) * down(down(w));
            let enc = Encoder::Conv {
                c1: Conv2d::new(c, 16, 3, 2, 1, true, r),
                c2: Conv2d::new(16, 32, 3, 2, 1, true, r),
                fc: Linear::new(flat, embed, true, r),
            };
            (enc, embed)
        } else {
            (Encoder::Flat, shape[1..].iter().product())
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        match self {
            Encoder::Flat => x.flatten(),
            Encoder::Conv { c1, c2, fc } => {
                let h = c2.forward(tape, c1.forward(tape, x).relu()).relu();
                fc.forward(tape, h.flatten()).relu()
            }
        }
    }
}

impl Module for Encoder {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Encoder::Conv { c1, c2, fc } = self {
            c1.visit(&format!("{p}.c1"), f);
            c2.visit(&format!("{p}.c2"), f);
            fc.visit(&format!("{p}.fc"), f);
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Encoder::Conv { c1, c2, fc } = self {
            c1.visit_mut(&format!("{p}.c1"), f);
            c2.visit_mut(&format!("{p}.c2"), f);
            fc.visit_mut(&format!("{p}.fc"), f);
        }
    }
}

/// `T(x, z)`: per-input encoders feeding a three-layer scorer whose first
/// layer is split into x and z halves so all pairs can be scored cheaply.
#[derive(Clone, Debug)]
struct StatNet {
    ex: Encoder,
    ez: Encoder,
    lx: Linear,
    lz: Linear,
    l2: Linear,
    l3: Linear,
}

impl StatNet {
    fn new(xs: &[usize], zs: &[usize], cfg: &MineConfig, r: &mut SeededRng) -> Self {
        let (ex, dx) = Encoder::for_shape(xs, cfg.embed, r);
        let (ez, dz) = Encoder::for_shape(zs, cfg.embed, r);
        let h = cfg.hidden;
        Self {
            ex,
            ez,
            lx: Linear::new(dx, h, true, r),
            lz: Linear::new(dz, h, false, r),
            l2: Linear::new(h, h, true, r),
            l3: Linear::new(h, 1, true, r),
        }
    }

    fn project<'t>(&self, tape: &'t Tape, x: &Tensor, z: &Tensor) -> (Var<'t>, Var<'t>) {
        let px = self.lx.forward(tape, self.ex.forward(tape, tape.constant(x.clone())));
        let pz = self.lz.forward(tape, self.ez.forward(tape, tape.constant(z.clone())));
        (px, pz)
    }

    fn score<'t>(&self, tape: &'t Tape, pre: Var<'t>) -> Var<'t> {
        self.l3.forward(tape, self.l2.forward(tape, pre.relu()).relu())
    }

    /// Scores of every `(x_i, z_j)` combination, `(n, n)`.
    fn all_pairs<'t>(&self, tape: &'t Tape, x: &Tensor, z: &Tensor) -> Var<'t> {
        let (px, pz) = self.project(tape, x, z);
        let (n, h) = (px.shape()[0], px.shape()[1]);
        let grid = px.reshape(&[n, 1, h]).add(pz.reshape(&[1, n, h])).reshape(&[n * n, h]);
        self.score(tape, grid).reshape(&[n, n])
    }
}

impl Module for StatNet {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ex.visit(&format!("{p}ex"), f);
        self.ez.visit(&format!("{p}ez"), f);
        self.lx.visit(&format!("{p}lx"), f);
        self.lz.visit(&format!("{p}lz"), f);
        self.l2.visit(&format!("{p}l2"), f);
        self.l3.visit(&format!("{p}l3"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ex.visit_mut(&format!("{p}ex"), f);
        self.ez.visit_mut(&format!("{p}ez"), f);
        self.lx.visit_mut(&format!("{p}lx"), f);
        self.lz.visit_mut(&format!("{p}lz"), f);
        self.l2.visit_mut(&format!("{p}l2"), f);
        self.l3.visit_mut(&format!("{p}l3"), f);
    }
}

/// Fraction of `ln(batch)` at which the bounded estimate counts as saturated.
pub const SATURATION_FRACTION: f64 = 0.9;

/// Donsker-Varadhan value with every `(x_i, z_j)` pair as the marginal
/// sample; never exceeds `ln(n)`.
fn dv_all_pairs(t: &Tensor) -> f64 {
    let n = t.shape()[0];
    let diag: f64 = (0..n).map(|i| t.data()[i * n + i]).sum::<f64>() / n as f64;
    let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lme = m + (t.data().iter().map(|v| (v - m).exp()).sum::<f64>() / (n * n) as f64).ln();
    diag - lme
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinePoint {
    pub step: usize,
    /// Bias-corrected training objective's DV value on the shuffled batch.
    pub train_dv: f64,
    /// All-pairs DV value on the same batch.
    pub bounded_dv: f64,
}

/// A trained statistics network plus its training record.
#[derive(Clone, Debug)]
pub struct MineEstimator {
    net: StatNet,
    pub config: MineConfig,
    pub curve: Vec<MinePoint>,
    pub steps_done: usize,
    /// The DV value pinned at the `ln(batch)` ceiling and training stopped early.
    pub saturated: bool,
    pub diagnostic: Option<String>,
    ema: f64,
}

/// Maximises the DV bound with moving-average gradient correction.
pub fn train_mine(sampler: &mut dyn PairSampler, config: &MineConfig) -> Result<MineEstimator> {
    config.validate()?;
    let (x0, z0) = sampler.sample(config.batch_size);
    let mut r = rng(config.seed);
    let mut net = StatNet::new(x0.shape(), z0.shape(), config, &mut r);
    let mut opt = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let cap = (config.batch_size as f64).ln();
    let mut ema: Option<f64> = None;
    let mut curve = Vec::new();
    let mut above = 0usize;
    let mut near_cap = 0usize;
    let mut saturated = false;
    let mut diagnostic = None;
    let mut steps_done = 0;
    let record_every = (config.steps / 100).max(1);
    let mut batch = Some((x0, z0));
    for step in 0..config.steps {
        let (x, z) = batch.take().unwrap_or_else(|| sampler.sample(config.batch_size));
        let n = x.shape()[0];
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let tape = Tape::new();
        let (px, pz) = net.project(&tape, &x, &z);
        let joint = net.score(&tape, px.add(pz)).mean();
        let marg = net.score(&tape, px.add(pz.select_rows(&perm)));
        let mean_exp = marg.exp().mean();
        let me = mean_exp.item();
        let train_dv = joint.item() - me.ln();
        if !train_dv.is_finite() {
            return Err(Error::NonFinite {
                step,
                diagnostic: format!("MINE objective diverged; last points: {:?}", &curve[curve.len().saturating_sub(5)..]),
            });
        }
        let e = match ema {
            None => me,
            Some(prev) => config.ema_rate * prev + (1.0 - config.ema_rate) * me,
        };
        ema = Some(e);
        let loss = joint.sub(mean_exp.scale(1.0 / e)).neg();
        let grads = tape.backward(loss);
        opt.step(&mut net, &grads);
        steps_done = step + 1;
        above = if train_dv > cap { above + 1 } else { 0 };
        if step % record_every == 0 || step + 1 == config.steps {
            let t = Tape::no_grad();
            let bounded = dv_all_pairs(&net.all_pairs(&t, &x, &z).value());
            debug_assert!(bounded <= (n as f64).ln() + 1e-9);
            curve.push(MinePoint { step, train_dv, bounded_dv: bounded });
            near_cap = if bounded >= SATURATION_FRACTION * (n as f64).ln() { near_cap + 1 } else { 0 };
        }
        if above >= config.saturation_patience || near_cap >= 3 {
            saturated = true;
            diagnostic = Some(format!(
                "DV bound pinned at the ln(batch) = {cap:.3} ceiling at step {step}; true MI exceeds what this batch size can resolve"
            ));
            log::warn!("{}", diagnostic.as_deref().unwrap_or_default());
            break;
        }
    }
    Ok(MineEstimator { net, config: config.clone(), curve, steps_done, saturated, diagnostic, ema: ema.unwrap_or(1.0) })
}

impl MineEstimator {
    pub fn ema(&self) -> f64 {
        self.ema
    }
}

/// Averages the all-pairs DV bound over `config.eval_batches` held-out
/// batches, clamped at zero.
pub fn estimate_mi(est: &MineEstimator, eval_sampler: &mut dyn PairSampler) -> Result<f64> {
    Ok(estimate_mi_flagged(est, eval_sampler)?.nats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub nats: f64,
    /// Training or evaluation hit the `ln(batch)` ceiling.
    pub saturated: bool,
}

/// As [`estimate_mi`], also reporting whether the value sits at the ceiling.
pub fn estimate_mi_flagged(est: &MineEstimator, eval_sampler: &mut dyn PairSampler) -> Result<MiEstimate> {
    if est.steps_done == 0 {
        return invalid("MINE estimator has not been trained");
    }
    let mut total = 0.0;
    for _ in 0..est.config.eval_batches {
        let (x, z) = eval_sampler.sample(est.config.eval_batch);
        let tape = Tape::no_grad();
        total += dv_all_pairs(&est.net.all_pairs(&tape, &x, &z).value());
    }
    let mean = total / est.config.eval_batches as f64;
    Ok(MiEstimate { nats: mean.max(0.0), saturated: est.saturated || mean >= SATURATION_FRACTION * (est.config.eval_batch as f64).ln() })
}

/// Trains on one seeded stream and evaluates on an independent one.
pub fn mine_between(x: &Tensor, z: &Tensor, config: &MineConfig) -> Result<MiEstimate> {
    let mut train = TensorPairs::new(x.clone(), z.clone(), config.seed)?;
    let est = train_mine(&mut train, config)?;
    let mut eval = TensorPairs::new(x.clone(), z.clone(), config.seed ^ 0xE7A1)?;
    estimate_mi_flagged(&est, &mut eval)
}

/// Mean count of strictly nonzero edge-output elements per sample.
pub fn effective_info_mean(model: &SplitModel, ds: &ImageDataset) -> Result<f64> {
    if ds.is_empty() {
        return invalid("effective information mean needs a non-empty dataset");
    }
    let mut total = 0usize;
    for idx in ds.batches(128, None) {
        let z = tap(model, &ds.images(&idx), TapPoint::EdgeOutput)?;
        total += z.nonzero_per_sample().iter().sum::<usize>();
    }
    Ok(total as f64 / ds.len() as f64)
}

/// Sum of per-pixel histogram entropies (nats) over 256 intensity levels:
/// the dataset-constant stand-in for `H(x)`.
pub fn pixel_entropy_proxy(ds: &ImageDataset) -> Result<f64> {
    if ds.is_empty() {
        return invalid("entropy proxy needs a non-empty dataset");
    }
    let (h, w) = ds.resolution();
    let d = ds.channels() * h * w;
    let mut hist = vec![[0u32; 256]; d];
    for idx in ds.batches(256, None) {
        let x = ds.images(&idx);
        for img in x.data().chunks(d) {
            for (p, &v) in img.iter().enumerate() {
                hist[p][(v * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
            }
        }
    }
    let n = ds.len() as f64;
    Ok(hist.iter().map(|bins| bins.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum::<f64>()).sum())
}

/// `ln|X|` for 8-bit images of the dataset's shape.
pub fn log_cardinality(ds: &ImageDataset) -> f64 {
    let (h, w) = ds.resolution();
    (ds.channels() * h * w) as f64 * 256f64.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoBound {
    pub value: f64,
    /// The bound is at or below zero and says nothing.
    pub vacuous: bool,
}

/// `(H(x) − H(z) − 1) / ln|X|`, unclamped.
pub fn fano_lower_bound(h_x: f64, h_z: f64, log_card_x: f64) -> Result<FanoBound> {
    if !(log_card_x > 0.0) {
        return invalid(format!("log cardinality must be positive, got {log_card_x}"));
    }
    let value = (h_x - h_z - 1.0) / log_card_x;
    Ok(FanoBound { value, vacuous: value <= 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmiaScore {
    pub value: f64,
    /// `H(z)` or `δ(z)` was not positive; the target is maximally hard.
    pub degenerate: bool,
}

/// `H(x|z) / (H(z)^k1 · δ(z)^k2)`.
pub fn dmia_score(h_x_given_z: f64, h_z: f64, delta_z: f64, k1: f64, k2: f64) -> DmiaScore {
    if !(h_z > 0.0) || !(delta_z > 0.0) {
        return DmiaScore { value: f64::INFINITY, degenerate: true };
    }
    DmiaScore { value: h_x_given_z / (h_z.powf(k1) * delta_z.powf(k2)), degenerate: false }
}

/// Information summary of one edge model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub model: String,
    pub dataset: String,
    pub mi_nats: f64,
    pub mi_saturated: bool,
    pub delta_z: f64,
    pub z_elements: usize,
    pub h_x_proxy: f64,
    pub h_x_is_proxy: bool,
    pub h_x_given_z: f64,
    pub log_card_x: f64,
    pub fano_lower_bound: f64,
    pub fano_vacuous: bool,
    /// `None` when the score is not finite (see `dmia_degenerate`).
    pub dmia_score: Option<f64>,
    pub dmia_degenerate: bool,
    pub k1: f64,
    pub k2: f64,
}

impl InfoReport {
    /// Combines the measured quantities; `H(z)` is taken as `I(x; z)`
    /// (deterministic edge) and `H(x|z) = H(x) − I(x; z)`.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        model: &str,
        dataset: &str,
        mi: MiEstimate,
        delta_z: f64,
        z_elements: usize,
        h_x: f64,
        log_card_x: f64,
        k1: f64,
        k2: f64,
    ) -> Result<Self> {
        let h_x_given_z = h_x - mi.nats;
        let fano = fano_lower_bound(h_x, mi.nats, log_card_x)?;
        let d = dmia_score(h_x_given_z, mi.nats, delta_z, k1, k2);
        Ok(Self {
            model: model.into(),
            dataset: dataset.into(),
            mi_nats: mi.nats.max(0.0),
            mi_saturated: mi.saturated,
            delta_z,
            z_elements,
            h_x_proxy: h_x,
            h_x_is_proxy: true,
            h_x_given_z,
            log_card_x,
            fano_lower_bound: fano.value,
            fano_vacuous: fano.vacuous,
            dmia_score: d.value.is_finite().then_some(d.value),
            dmia_degenerate: d.degenerate,
            k1,
            k2,
        })
    }
}
