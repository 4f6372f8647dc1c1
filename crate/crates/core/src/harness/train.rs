use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sf_nn::{Adam, AdamConfig, ReduceLrOnPlateau, Tape, Tensor};

use crate::datahub::ImageDataset;
use crate::defenselosses::{composite_loss, perturb_features, soft_cross_entropy, LossBreakdown};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Manifest, MetricSnapshot};
use crate::harness::config::{DefenseConfig, ExperimentConfig, PreparedData};
use crate::quality::{test_accuracy, test_accuracy_perturbed};
use crate::splitmodels::{build_backbone, build_siftfunnel_edge, split_at, tap, FeatureMap, SplitModel, TapPoint};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    /// Composite-loss terms, for SiftFunnel training only.
    pub breakdown: Option<LossBreakdown>,
}

/// A trained model together with the defense wrapped around it.
#[derive(Clone, Debug)]
pub struct Target {
    pub model: SplitModel,
    pub manifest: Manifest,
}

impl Target {
    pub fn load(dir: &Path) -> Result<Self> {
        let (model, manifest) = load_checkpoint(dir)?;
        Ok(Self { model, manifest })
    }

    pub fn defense(&self) -> &DefenseConfig {
        &self.manifest.defense
    }

    /// What an interceptor sees at `point`: the tapped features after any
    /// inference-time perturbation, seeded by `seed`.
    pub fn observe(&self, x: &Tensor, point: TapPoint, seed: u64) -> Result<FeatureMap> {
        let z = tap(&self.model, x, point)?;
        match self.defense().perturbation() {
            Some(p) => perturb_features(&z, p, seed),
            None => Ok(z),
        }
    }

    pub fn accuracy(&self, test: &ImageDataset) -> Result<f64> {
        match self.defense().perturbation() {
            Some(p) => test_accuracy_perturbed(&self.model, test, p, self.manifest.seed ^ 0xACC),
            None => test_accuracy(&self.model, test),
        }
    }
}

pub struct TrainOutcome {
    pub target: Target,
    pub log: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Builds the untrained model for `cfg` at `seed`.
pub fn initial_model(cfg: &ExperimentConfig, classes: usize, seed: u64) -> Result<SplitModel> {
    let base = split_at(build_backbone(&cfg.backbone_config(classes, seed)?)?, &cfg.split_point()?)?;
    match cfg.defense.spec() {
        Some(spec) => build_siftfunnel_edge(base, spec),
        None => Ok(base),
    }
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    crate::quality::argmax_rows(logits).iter().zip(labels).filter(|(a, b)| a == b).count()
}

/// Trains the full split model under the configured defense and, when `out`
/// is given, writes the checkpoint and per-epoch log there.
pub fn train_target(cfg: &ExperimentConfig, data: &PreparedData, seed: u64, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = &data.splits.train;
    let mut model = initial_model(cfg, train.classes(), seed)?;
    let t = &cfg.training;
    let mut opt = Adam::new(AdamConfig { lr: t.lr, beta1: t.beta1, ..AdamConfig::default() });
    let mut plateau = ReduceLrOnPlateau::new(t.plateau_factor, t.plateau_patience);
    let mut manifest = Manifest {
        backbone: model.config.clone(),
        split_point: model.split_point.clone(),
        seed,
        defense: cfg.defense.clone(),
        dataset: data.name.clone(),
        metrics: MetricSnapshot::default(),
    };
    let mut log = Vec::with_capacity(t.epochs);
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join(TRAIN_LOG_FILE))?)
        }
        None => None,
    };
    let nls_alpha = match cfg.defense {
        DefenseConfig::Nls { alpha } => alpha,
        _ => 0.0,
    };
    let mut step = 0;
    for epoch in 0..t.epochs {
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        let mut parts = LossBreakdown::default();
        for idx in train.batches(t.batch_size, Some(seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64))) {
            if idx.len() < 2 {
                continue;
            }
            let (x, labels) = train.batch(&idx);
            let tape = Tape::new();
            let z = model.forward_edge(&tape, tape.constant(x.clone()), true);
            let logits = model.forward_cloud(&tape, z, true);
            let (loss, bd) = match cfg.defense.spec() {
                Some(spec) => {
                    let c = composite_loss(logits, &labels, &x, z, spec)?;
                    (c.total, Some(c.breakdown))
                }
                None => (soft_cross_entropy(logits, &labels, nls_alpha)?, None),
            };
            let l = loss.item();
            if !l.is_finite() {
                if let Some(dir) = out {
                    save_checkpoint(dir, &model, &manifest)?;
                }
                return Err(Error::NonFinite {
                    step,
                    diagnostic: format!("training loss became {l} in epoch {epoch}; last finite state checkpointed"),
                });
            }
            let b = idx.len();
            loss_sum += l * b as f64;
            seen += b;
            correct += count_correct(&logits.value(), &labels);
            if let Some(bd) = bd {
                parts.kl_term += bd.kl_term * b as f64;
                parts.dcor_term += bd.dcor_term * b as f64;
                parts.pearson_term += bd.pearson_term * b as f64;
                parts.l1_term += bd.l1_term * b as f64;
                parts.total += bd.total * b as f64;
            }
            let grads = tape.backward(loss);
            opt.step(&mut model, &grads);
            model.commit_buffers(&tape);
            step += 1;
        }
        let n = seen.max(1) as f64;
        let loss = loss_sum / n;
        let lr = plateau.observe(loss, opt.lr());
        opt.set_lr(lr);
        let breakdown = cfg.defense.spec().map(|_| LossBreakdown {
            kl_term: parts.kl_term / n,
            dcor_term: parts.dcor_term / n,
            pearson_term: parts.pearson_term / n,
            l1_term: parts.l1_term / n,
            total: parts.total / n,
        });
        let rec = EpochRecord { epoch, lr, loss, train_acc: correct as f64 / n, breakdown };
        info!("epoch {epoch}: loss {loss:.4} train acc {:.3} lr {lr:.2e}", rec.train_acc);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        log.push(rec);
    }
    let mut target = Target { model, manifest: manifest.clone() };
    manifest.metrics = MetricSnapshot {
        test_acc: target.accuracy(&data.splits.test)?,
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
        epochs: t.epochs,
    };
    target.manifest = manifest;
    if let Some(dir) = out {
        save_checkpoint(dir, &target.model, &target.manifest)?;
    }
    Ok(TrainOutcome { target, log, checkpoint: out.map(Path::to_path_buf) })
}
