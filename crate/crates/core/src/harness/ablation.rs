use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::harness::attack::{prepare_decoders, run_attack_suite, ReportRow};
use crate::harness::config::{AttackSpec, DefenseConfig, ExperimentConfig, PreparedData};
use crate::harness::train::train_target;
use crate::splitmodels::{DefenseSpec, TapPoint};

/// A SiftFunnel component that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Funnel,
    Attention,
    KlLs,
    Dcor,
    Pearson,
    L1,
}

impl Toggle {
    pub const ALL: [Toggle; 6] = [Toggle::Funnel, Toggle::Attention, Toggle::KlLs, Toggle::Dcor, Toggle::Pearson, Toggle::L1];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "funnel" => Toggle::Funnel,
            "attention" => Toggle::Attention,
            "kl_ls" => Toggle::KlLs,
            "dcor" => Toggle::Dcor,
            "pearson" => Toggle::Pearson,
            "l1" => Toggle::L1,
            other => return invalid(format!("unknown ablation toggle '{other}' (funnel, attention, kl_ls, dcor, pearson, l1)")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Funnel => "funnel",
            Toggle::Attention => "attention",
            Toggle::KlLs => "kl_ls",
            Toggle::Dcor => "dcor",
            Toggle::Pearson => "pearson",
            Toggle::L1 => "l1",
        }
    }

    /// `spec` with this component removed.
    pub fn disable(self, spec: &DefenseSpec) -> DefenseSpec {
        let mut s = spec.clone();
        match self {
            Toggle::Funnel => s.funnel = false,
            Toggle::Attention => {
                s.attention_pre = false;
                s.attention_post = false;
            }
            Toggle::KlLs => s.alpha = 0.0,
            Toggle::Dcor => s.lambda2 = 0.0,
            Toggle::Pearson => s.lambda3 = 0.0,
            Toggle::L1 => s.tau = 0.0,
        }
        s
    }
}

pub fn parse_toggles<S: AsRef<str>>(names: &[S]) -> Result<Vec<Toggle>> {
    names.iter().map(|s| Toggle::parse(s.as_ref())).collect()
}

/// One ablation variant's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `full` or `without_<toggle>`.
    pub variant: String,
    pub rows: Vec<ReportRow>,
}

/// Trains and attacks the full SiftFunnel configuration and one variant per
/// toggle with that component removed.
pub fn ablation(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    toggles: &[Toggle],
    seed: u64,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let DefenseConfig::Siftfunnel(base) = &cfg.defense else {
        return invalid("ablation needs a siftfunnel defense in the configuration");
    };
    base.validate()?;
    let mut variants = vec![("full".to_string(), base.clone())];
    for t in toggles {
        variants.push((format!("without_{}", t.name()), t.disable(base)));
    }
    let mut table = Vec::new();
    for (variant, spec) in variants {
        let vcfg = ExperimentConfig { defense: DefenseConfig::Siftfunnel(spec), ..cfg.clone() };
        let dir = out.map(|o| o.join(&variant));
        let trained = train_target(&vcfg, data, seed, dir.as_deref())?;
        let target = trained.target;
        let jobs: Vec<AttackSpec> = vcfg
            .attacks
            .iter()
            .filter(|j| {
                let tp = match j {
                    AttackSpec::Mle(m) => m.tap_point,
                    AttackSpec::Gen(g) => g.tap_point,
                };
                let ok = tp == TapPoint::EdgeOutput || target.model.has_compensation();
                if !ok {
                    warn!("{variant}: skipping {} (no compensation module)", j.label());
                }
                ok
            })
            .cloned()
            .collect();
        let decoders = prepare_decoders(&target, data, &jobs)?;
        let mut rows = run_attack_suite(&target, data, &jobs, &decoders, &vcfg.eval, &vcfg.mine, dir.as_deref())?;
        for r in &mut rows {
            r.method = format!("siftfunnel-{variant}:{}", r.method.split_once(':').map_or("", |p| p.1));
        }
        table.push(AblationRow { variant, rows });
    }
    Ok(table)
}
