//! Utility and reconstruction-fidelity metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sf_nn::{Tape, Tensor};

use crate::datahub::ImageDataset;
use crate::defenselosses::{perturb_features, Perturbation};
use crate::error::{invalid, Result};
pub use crate::splitmodels::param_count;
use crate::splitmodels::{tap, FeatureMap, SplitModel, Stack, TapPoint};

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Peak signal-to-noise ratio for unit-range images, capped at 100 dB.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Window size used for an `h×w` plane: 11, or the largest odd size that fits.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean structural similarity of one pair of planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window(ssim_window_size(h, w).max(1));
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (aa, ..) = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let (bb, ..) = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let (ab, ..) = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / (oh * ow) as f64
}

/// MSE, PSNR and SSIM (averaged over channels and batch) of `(n, c, h, w)` batches.
pub fn image_metrics(recon: &Tensor, target: &Tensor) -> Result<ImageMetrics> {
    if recon.shape() != target.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", recon.shape(), target.shape()));
    }
    if recon.ndim() != 4 || recon.numel() == 0 {
        return invalid("image metrics need a non-empty (n, c, h, w) batch");
    }
    let mse = recon.zip_map(target, |a, b| (a - b) * (a - b)).mean();
    let s = recon.shape();
    let (h, w) = (s[2], s[3]);
    let planes = s[0] * s[1];
    let ssim =
        recon.data().chunks(h * w).zip(target.data().chunks(h * w)).map(|(a, b)| ssim_plane(a, b, h, w)).sum::<f64>() / planes as f64;
    Ok(ImageMetrics { mse, psnr_db: psnr(mse), ssim })
}

/// Per-image metrics, one entry per batch element.
pub fn per_image_metrics(recon: &Tensor, target: &Tensor) -> Result<Vec<ImageMetrics>> {
    if recon.shape() != target.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", recon.shape(), target.shape()));
    }
    (0..recon.shape().first().copied().unwrap_or(0))
        .map(|i| image_metrics(&recon.slice_batch(i, i + 1), &target.slice_batch(i, i + 1)))
        .collect()
}

const EVAL_BATCH: usize = 128;

/// Top-1 accuracy of the composed model over `test`.
pub fn test_accuracy(model: &SplitModel, test: &ImageDataset) -> Result<f64> {
    accuracy_inner(model, test, None)
}

/// Accuracy when the transmitted features are perturbed before the cloud.
pub fn test_accuracy_perturbed(model: &SplitModel, test: &ImageDataset, p: Perturbation, seed: u64) -> Result<f64> {
    accuracy_inner(model, test, Some((p, seed)))
}

fn accuracy_inner(model: &SplitModel, test: &ImageDataset, perturb: Option<(Perturbation, u64)>) -> Result<f64> {
    if test.is_empty() {
        return invalid("empty test set");
    }
    let mut correct = 0usize;
    for (b, idx) in test.batches(EVAL_BATCH, None).iter().enumerate() {
        let (x, y) = test.batch(idx);
        let logits = match perturb {
            None => model.logits(&x),
            Some((p, seed)) => {
                let z = tap(model, &x, TapPoint::EdgeOutput)?;
                model.cloud_logits(&perturb_features(&z, p, seed.wrapping_add(b as u64))?)
            }
        };
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(|r| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best })).collect()
}

/// Mean count of strictly nonzero elements per sample.
pub fn mean_nonzero(z: &FeatureMap) -> f64 {
    let c = z.nonzero_per_sample();
    c.iter().sum::<usize>() as f64 / c.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Cpu,
    Accelerator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub device: Device,
    /// `None` when the device is unavailable.
    pub median_ms: Option<f64>,
    pub runs: usize,
}

/// Median single-sample eval-mode forward time of a stack.
pub fn latency_probe(part: &Stack, input_shape: (usize, usize, usize), device: Device, warmup: usize, runs: usize) -> Result<Latency> {
    if runs < 10 {
        return invalid("latency probe needs at least 10 runs");
    }
    if device == Device::Accelerator {
        return Ok(Latency { device, median_ms: None, runs: 0 });
    }
    let (c, h, w) = input_shape;
    let x = Tensor::full(vec![1, c, h, w], 0.5);
    let run = || {
        let tape = Tape::no_grad();
        let out = part.forward(&tape, tape.constant(x.clone()), false);
        std::hint::black_box(out.value());
    };
    for _ in 0..warmup {
        run();
    }
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let t = Instant::now();
            run();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len().is_multiple_of(2) { 0.5 * (times[mid - 1] + times[mid]) } else { times[mid] };
    Ok(Latency { device, median_ms: Some(median), runs })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMs {
    pub cpu_median: Option<f64>,
    pub accelerator_median: Option<f64>,
}

/// Usability and attack-fidelity summary for one (defense, attack) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test_acc: f64,
    pub attack_mse: f64,
    pub psnr_db: f64,
    /// Clamped to `[0, 1]`.
    pub ssim: f64,
    pub edge_params: usize,
    pub latency_ms: LatencyMs,
}

impl MetricsReport {
    pub fn new(test_acc: f64, m: ImageMetrics, edge_params: usize, latency_ms: LatencyMs) -> Self {
        Self { test_acc, attack_mse: m.mse, psnr_db: psnr(m.mse), ssim: m.ssim.clamp(0.0, 1.0), edge_params, latency_ms }
    }
}
