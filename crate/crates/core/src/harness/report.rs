use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::harness::attack::{read_csv, ReportRow};
use crate::harness::config::PreparedData;
use crate::harness::train::Target;
use crate::infometrics::{log_cardinality, mine_between, pixel_entropy_proxy, InfoReport, MineConfig};
use crate::quality::mean_nonzero;
use crate::splitmodels::TapPoint;

pub const RESULTS_FILE: &str = "results.csv";
pub const REPORT_FILE: &str = "report.md";

/// MI, effective information and the derived bounds for a target on its test split.
pub fn measure_information(target: &Target, data: &PreparedData, mine: &MineConfig, images: usize) -> Result<InfoReport> {
    let test = &data.splits.test;
    let m = images.min(test.len());
    if m < 2 {
        return invalid("information metrics need at least two test images");
    }
    let ids: Vec<usize> = (0..m).collect();
    let x = test.images(&ids);
    let z = target.observe(&x, TapPoint::EdgeOutput, target.manifest.seed ^ 0x1F0)?;
    let mi = mine_between(&x, z.values(), mine)?;
    let sub = test.subset(&ids);
    let model = format!("{}:{}", target.manifest.backbone.kind.name(), target.defense().name());
    InfoReport::assemble(
        &model,
        &data.name,
        mi,
        mean_nonzero(&z),
        z.sample_len(),
        pixel_entropy_proxy(&sub)?,
        log_cardinality(&sub),
        1.0,
        1.0,
    )
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

/// Markdown table in results-CSV column order.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s =
        String::from("| method | test acc | MLE MSE | MLE PSNR | MLE SSIM | Gen MSE | Gen PSNR | Gen SSIM | MI | δ(z) | edge params |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.2}% | {} | {} | {} | {} | {} | {} | {} | {:.1} | {} |",
            r.method,
            100.0 * r.test_acc,
            cell(r.mle_mse, 4),
            cell(r.mle_psnr, 2),
            cell(r.mle_ssim, 4),
            cell(r.gen_mse, 4),
            cell(r.gen_psnr, 2),
            cell(r.gen_ssim, 4),
            cell(r.mi, 3),
            r.delta_z,
            r.edge_params
        );
    }
    s
}

/// Collects every `results.csv` and `*.info.json` below `dir` into
/// `report.md` and returns its text.
pub fn build_report(dir: &Path) -> Result<String> {
    let mut csvs = Vec::new();
    let mut infos = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        let Ok(rd) = std::fs::read_dir(&d) else { continue };
        let mut files: Vec<_> = rd.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        files.sort();
        for f in files {
            if f.is_dir() {
                pending.push(f);
                continue;
            }
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name == RESULTS_FILE {
                csvs.push(f);
            } else if name.ends_with(".info.json") {
                infos.push(f);
            }
        }
    }
    csvs.sort();
    infos.sort();
    if csvs.is_empty() && infos.is_empty() {
        return invalid(format!("no {RESULTS_FILE} or *.info.json under {}", dir.display()));
    }
    let mut out = String::from("# Results\n\n");
    let mut rows = Vec::new();
    for c in &csvs {
        rows.extend(read_csv(c)?);
    }
    if !rows.is_empty() {
        out.push_str(&render_table(&rows));
        out.push('\n');
    }
    if !infos.is_empty() {
        out.push_str(
            "| model | dataset | MI (nats) | saturated | δ(z) | H(x) proxy | Fano bound | D_mia |\n|---|---|---|---|---|---|---|---|\n",
        );
        for p in &infos {
            let r: InfoReport = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {} | {:.1} | {:.1} | {:.4}{} | {}{} |",
                r.model,
                r.dataset,
                r.mi_nats,
                r.mi_saturated,
                r.delta_z,
                r.h_x_proxy,
                r.fano_lower_bound,
                if r.fano_vacuous { " (vacuous)" } else { "" },
                cell(r.dmia_score, 4),
                if r.dmia_degenerate { " (degenerate)" } else { "" }
            );
        }
    }
    std::fs::write(dir.join(REPORT_FILE), &out)?;
    Ok(out)
}
