//! Training objectives of the SiftFunnel defense and the perturbation baselines.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sf_nn::{rng, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::splitmodels::{DefenseSpec, FeatureMap};

/// Variances at or below this are treated as exactly zero.
const ZERO_VARIANCE: f64 = 1e-20;
/// Largest flattened input width fed to the distance correlation.
pub const DCOR_MAX_DIMS: usize = 4096;

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    let n = t.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return invalid("empty batch");
    }
    Ok((n, t.numel() / n))
}

fn double_center<'t>(d: Var<'t>) -> Var<'t> {
    d.sub(d.mean_axes(&[1])).sub(d.mean_axes(&[0])).add(d.mean())
}

/// Differentiable distance correlation between the rows of two `(n, ·)` batches.
pub fn distance_correlation_var<'t>(x: Var<'t>, z: Var<'t>) -> Var<'t> {
    let a = double_center(x.flatten().pairwise_distance());
    let b = double_center(z.flatten().pairwise_distance());
    let dcov = a.mul(b).mean();
    let dvar = a.square().mean().mul(b.square().mean());
    dcov.mul(dvar.safe_rsqrt(ZERO_VARIANCE))
}

/// `dCov / sqrt(dVar_x · dVar_z)` over paired rows; zero when either
/// distance variance vanishes.
pub fn distance_correlation(x: &Tensor, z: &Tensor) -> Result<f64> {
    let (n, _) = rows(x)?;
    let (m, _) = rows(z)?;
    if n != m {
        return invalid(format!("x has {n} rows but z has {m}"));
    }
    if n < 2 {
        return invalid("distance correlation needs at least two samples");
    }
    let tape = Tape::no_grad();
    Ok(distance_correlation_var(tape.constant(x.clone()), tape.constant(z.clone())).item())
}

/// Average-pools `(n, c, h, w)` images until a sample has at most
/// [`DCOR_MAX_DIMS`] values. Returns the pooled `(n, d)` batch and the factor.
pub fn downsample_for_dcor(x: &Tensor) -> (Tensor, usize) {
    let s = x.shape();
    if s.len() != 4 || x.numel() / s[0].max(1) <= DCOR_MAX_DIMS {
        let n = s.first().copied().unwrap_or(0);
        let d = x.numel().checked_div(n).unwrap_or(0);
        return (x.clone().reshape(vec![n, d]).expect("same numel"), 1);
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut f = 2;
    while c * h.div_ceil(f) * w.div_ceil(f) > DCOR_MAX_DIMS {
        f += 1;
    }
    let (oh, ow) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y1, x1) = (((oy + 1) * f).min(h), ((ox + 1) * f).min(w));
                let mut acc = 0.0;
                for y in oy * f..y1 {
                    for xx in ox * f..x1 {
                        acc += plane[y * w + xx];
                    }
                }
                out.push(acc / ((y1 - oy * f) * (x1 - ox * f)) as f64);
            }
        }
    }
    (Tensor::new(vec![n, c * oh * ow], out).expect("pooled shape"), f)
}

/// Differentiable mean squared Pearson coefficient over all channel pairs
/// (diagonal included), averaged over the batch.
pub fn pearson_channel_loss_var<'t>(z: Var<'t>) -> Var<'t> {
    let s = z.shape();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let flat = z.reshape(&[n, c, p]);
    let centred = flat.sub(flat.mean_axes(&[2]));
    let cov = centred.matmul_t(centred, false, true).scale(1.0 / p as f64);
    let inv_std = centred.square().mean_axes(&[2]).safe_rsqrt(ZERO_VARIANCE);
    let corr = cov.mul(inv_std).mul(inv_std.reshape(&[n, 1, c]));
    corr.square().mean()
}

/// Mean squared channel-pair Pearson coefficient of a feature batch; the
/// minimum over non-degenerate inputs is `1/C`.
pub fn pearson_channel_loss(z: &FeatureMap) -> Result<f64> {
    let [_, c, h, w] = z.shape();
    if c == 0 || h * w < 2 {
        return invalid("Pearson loss needs at least one channel of two or more values");
    }
    let tape = Tape::no_grad();
    Ok(pearson_channel_loss_var(tape.constant(z.values().clone())).item())
}

/// Label-smoothed target distribution; negative `alpha` sharpens (NLS).
pub fn smoothed_targets(label: usize, classes: usize, alpha: f64) -> Result<Vec<f64>> {
    if classes < 2 {
        return invalid("smoothing needs at least two classes");
    }
    if label >= classes {
        return invalid(format!("label {label} not below {classes}"));
    }
    if !(alpha < 1.0) {
        return invalid(format!("smoothing factor must be below 1, got {alpha}"));
    }
    let off = alpha / classes as f64;
    let mut t = vec![off; classes];
    t[label] = 1.0 - alpha + off;
    Ok(t)
}

fn target_matrix(labels: &[usize], classes: usize, alpha: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * classes);
    for &l in labels {
        data.extend(smoothed_targets(l, classes, alpha)?);
    }
    Ok(Tensor::new(vec![labels.len(), classes], data)?)
}

/// `-mean_n Σ_k t_nk · log softmax(logits)_nk`; targets may hold negative mass.
pub fn soft_cross_entropy<'t>(logits: Var<'t>, labels: &[usize], alpha: f64) -> Result<Var<'t>> {
    let classes = logits.shape()[1];
    let t = target_matrix(labels, classes, alpha)?;
    let tape = logits.tape();
    Ok(logits.log_softmax().mul(tape.constant(t)).sum().scale(-1.0 / labels.len() as f64))
}

/// `KL(LS(y) ‖ softmax(logits))` averaged over the batch.
pub fn kl_to_smoothed<'t>(logits: Var<'t>, labels: &[usize], alpha: f64) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&alpha) {
        return invalid(format!("KL targets need alpha in [0, 1), got {alpha}"));
    }
    let classes = logits.shape()[1];
    let t = target_matrix(labels, classes, alpha)?;
    let neg_entropy: f64 = t.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>() / labels.len() as f64;
    Ok(soft_cross_entropy(logits, labels, alpha)?.add_scalar(neg_entropy))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl_term: f64,
    pub dcor_term: f64,
    pub pearson_term: f64,
    pub l1_term: f64,
    pub total: f64,
}

pub struct CompositeLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    /// Average-pooling factor applied to `x` before the dCor term.
    pub dcor_pool: usize,
}

/// `λ1·KL + λ2·dCor(x, z) + λ3·Pearson(z) + τ·mean|z|`.
pub fn composite_loss<'t>(logits: Var<'t>, labels: &[usize], x: &Tensor, z: Var<'t>, spec: &DefenseSpec) -> Result<CompositeLoss<'t>> {
    spec.validate()?;
    let n = labels.len();
    if logits.shape()[0] != n || z.shape()[0] != n || x.shape()[0] != n {
        return invalid("logits, labels, inputs and features must share the batch size");
    }
    if n < 2 {
        return invalid("composite loss needs a batch of at least two");
    }
    let tape = logits.tape();
    let kl = kl_to_smoothed(logits, labels, spec.alpha)?;
    let (xs, pool) = downsample_for_dcor(x);
    let dcor = distance_correlation_var(tape.constant(xs), z);
    let pearson = pearson_channel_loss_var(z);
    let l1 = z.abs().mean();
    let total = kl.scale(spec.lambda1).add(dcor.scale(spec.lambda2)).add(pearson.scale(spec.lambda3)).add(l1.scale(spec.tau));
    let breakdown =
        LossBreakdown { kl_term: kl.item(), dcor_term: dcor.item(), pearson_term: pearson.item(), l1_term: l1.item(), total: total.item() };
    Ok(CompositeLoss { total, breakdown, dcor_pool: pool })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Perturbation {
    Gaussian { sigma: f64 },
    Drop { rate: f64 },
}

/// Seeded noise or exact-count dropout applied per sample.
pub fn perturb_features(z: &FeatureMap, method: Perturbation, seed: u64) -> Result<FeatureMap> {
    let mut r = rng(seed);
    let mut out = z.values().clone();
    match method {
        Perturbation::Gaussian { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return invalid(format!("noise scale must be non-negative, got {sigma}"));
            }
            if sigma > 0.0 {
                for v in out.data_mut() {
                    *v += sigma * r.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Perturbation::Drop { rate } => {
            if !(0.0..=1.0).contains(&rate) {
                return invalid(format!("drop rate must lie in [0, 1], got {rate}"));
            }
            let m = z.sample_len();
            let k = ((rate * m as f64).round() as usize).min(m);
            for sample in out.data_mut().chunks_mut(m.max(1)) {
                for i in index::sample(&mut r, m, k) {
                    sample[i] = 0.0;
                }
            }
        }
    }
    FeatureMap::new(out)
}
