use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use sf_nn::Tensor;

use crate::error::{invalid, Result};
use crate::harness::config::{AttackSpec, EvalConfig, PreparedData};
use crate::harness::train::Target;
use crate::infometrics::{mine_between, MineConfig};
use crate::inversion::{gen_invert, mle_invert, train_inverse_decoder_observed, write_mosaic, InverseDecoder, WhiteBoxEdge};
use crate::quality::{image_metrics, mean_nonzero, param_count, ImageMetrics};
use crate::splitmodels::{FeatureMap, TapPoint};

/// Column order of the results CSV.
pub const CSV_COLUMNS: [&str; 11] =
    ["method", "test_acc", "mle_mse", "mle_psnr", "mle_ssim", "gen_mse", "gen_psnr", "gen_ssim", "mi", "delta_z", "edge_params"];

/// One results row; the attack family that did not run leaves its cells empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub test_acc: f64,
    pub mle_mse: Option<f64>,
    pub mle_psnr: Option<f64>,
    pub mle_ssim: Option<f64>,
    pub gen_mse: Option<f64>,
    pub gen_psnr: Option<f64>,
    pub gen_ssim: Option<f64>,
    pub mi: Option<f64>,
    pub delta_z: f64,
    pub edge_params: usize,
}

impl ReportRow {
    pub fn gen(&self) -> Option<ImageMetrics> {
        Some(ImageMetrics { mse: self.gen_mse?, psnr_db: self.gen_psnr?, ssim: self.gen_ssim? })
    }

    pub fn mle(&self) -> Option<ImageMetrics> {
        Some(ImageMetrics { mse: self.mle_mse?, psnr_db: self.mle_psnr?, ssim: self.mle_ssim? })
    }
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return invalid(format!("{} has columns {header:?}, expected {CSV_COLUMNS:?}", path.display()));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Config(format!("csv: {e}"))
}

/// Feature seed for the `offset`-th queried image of a given role.
fn query_seed(target: &Target, role: u64, offset: usize) -> u64 {
    target.manifest.seed.wrapping_mul(0x9E37_79B9).wrapping_add(role << 32).wrapping_add(offset as u64)
}

/// Trains one decoder per Gen job on the attacker split; MLE jobs get `None`.
pub fn prepare_decoders(target: &Target, data: &PreparedData, jobs: &[AttackSpec]) -> Result<Vec<Option<InverseDecoder>>> {
    let s = &data.splits;
    jobs.iter()
        .map(|job| match job {
            AttackSpec::Mle(_) => Ok(None),
            AttackSpec::Gen(cfg) => {
                let observe = |x: &Tensor, off: usize| target.observe(x, cfg.tap_point, query_seed(target, 1, off));
                train_inverse_decoder_observed(&target.model, &s.attacker, &s.indices[2], &s.indices[0], cfg, &observe).map(Some)
            }
        })
        .collect()
}

/// Runs every job against the first test images and returns one row per job.
/// With `out`, mosaics go to `out/mosaics/`.
pub fn run_attack_suite(
    target: &Target,
    data: &PreparedData,
    jobs: &[AttackSpec],
    decoders: &[Option<InverseDecoder>],
    eval: &EvalConfig,
    mine: &MineConfig,
    out: Option<&Path>,
) -> Result<Vec<ReportRow>> {
    if decoders.len() != jobs.len() {
        return invalid(format!("{} decoders supplied for {} jobs", decoders.len(), jobs.len()));
    }
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let test = &data.splits.test;
    let ids: Vec<usize> = (0..eval.gen_images.min(test.len())).collect();
    let x = test.images(&ids);
    let z = target.observe(&x, TapPoint::EdgeOutput, query_seed(target, 2, 0))?;
    let test_acc = target.manifest.metrics.test_acc;
    let delta_z = mean_nonzero(&z);
    let edge_params = param_count(&target.model.edge);
    let mi = if eval.mi_images > 0 {
        let m = eval.mi_images.min(x.shape()[0]);
        Some(mine_between(&x.slice_batch(0, m), &z.values().slice_batch(0, m), mine)?.nats)
    } else {
        None
    };
    let defense = target.defense().name();
    let mut rows = Vec::with_capacity(jobs.len());
    for (i, (job, dec)) in jobs.iter().zip(decoders).enumerate() {
        let label = job.label();
        let (recon, truth) = match job {
            AttackSpec::Gen(cfg) => {
                let Some(dec) = dec else {
                    return invalid(format!("job {i} ({label}) has no trained decoder"));
                };
                let zj = match cfg.tap_point {
                    TapPoint::EdgeOutput => z.clone(),
                    p => target.observe(&x, p, query_seed(target, 2, 0))?,
                };
                (gen_invert(dec, &zj)?, x.clone())
            }
            AttackSpec::Mle(j) => {
                if j.tap_point == TapPoint::PostCompensation && !target.model.has_compensation() {
                    return invalid(format!("job {i} ({label}) taps after a compensation module the model lacks"));
                }
                let m = eval.mle_images.min(x.shape()[0]);
                let xm = x.slice_batch(0, m);
                let zm = match j.tap_point {
                    TapPoint::EdgeOutput => FeatureMap::new(z.values().slice_batch(0, m))?,
                    p => target.observe(&xm, p, query_seed(target, 2, 0))?,
                };
                let edge = WhiteBoxEdge { model: &target.model, tap: j.tap_point };
                (mle_invert(&edge, &zm, j)?.images, xm)
            }
        };
        let m = image_metrics(&recon, &truth)?;
        info!("{defense} {label}: mse {:.5} psnr {:.2} ssim {:.4}", m.mse, m.psnr_db, m.ssim);
        if let Some(dir) = out {
            let k = eval.mosaic_images.min(truth.shape()[0]);
            write_mosaic(
                &dir.join("mosaics").join(format!("{defense}-{i}-{label}.png")),
                &truth.slice_batch(0, k),
                &recon.slice_batch(0, k),
                k,
            )?;
        }
        let (mle, gen) = match job {
            AttackSpec::Mle(_) => (Some(m), None),
            AttackSpec::Gen(_) => (None, Some(m)),
        };
        rows.push(ReportRow {
            method: format!("{defense}:{label}"),
            test_acc,
            mle_mse: mle.map(|m| m.mse),
            mle_psnr: mle.map(|m| m.psnr_db),
            mle_ssim: mle.map(|m| m.ssim),
            gen_mse: gen.map(|m| m.mse),
            gen_psnr: gen.map(|m| m.psnr_db),
            gen_ssim: gen.map(|m| m.ssim),
            mi,
            delta_z,
            edge_params,
        });
    }
    Ok(rows)
}
