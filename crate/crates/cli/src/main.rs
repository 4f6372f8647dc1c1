use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use siftfunnel::harness::transport::{serve, CloudHandler, ServerConfig};
use siftfunnel::harness::{
    ablation, build_report, measure_information, parse_toggles, prepare_data, prepare_decoders, render_table, run_attack_suite,
    train_target, transport_demo, write_csv, DefenseConfig, ExperimentConfig, Target, OUTPUT_ENV,
};
use siftfunnel::splitmodels::DefenseSpec;

#[derive(Parser)]
#[command(name = "siftfunnel", version, about = "Split-inference privacy workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    split_point: Option<String>,
    /// none | siftfunnel | noise:<sigma> | drop:<rate> | nls:<alpha>
    #[arg(long)]
    defense: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output root; the SIFTFUNNEL_OUT environment variable takes precedence.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(b) = &self.backbone {
            cfg.backbone = b.clone();
        }
        if let Some(w) = self.width {
            cfg.width = w;
        }
        if let Some(s) = &self.split_point {
            cfg.split_point = Some(s.clone());
        }
        if let Some(d) = &self.defense {
            cfg.defense = parse_defense(d)?;
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_defense(s: &str) -> Result<DefenseConfig> {
    let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
    let num = || -> Result<f64> { arg.context("defense needs a value, e.g. noise:0.8")?.parse().context("defense value") };
    Ok(match kind {
        "none" => DefenseConfig::None,
        "siftfunnel" => DefenseConfig::Siftfunnel(DefenseSpec::default()),
        "noise" => DefenseConfig::Noise { sigma: num()? },
        "drop" => DefenseConfig::Drop { rate: num()? },
        "nls" => DefenseConfig::Nls { alpha: num()? },
        other => bail!("unknown defense '{other}'"),
    })
}

#[derive(Subcommand)]
enum Command {
    /// Train target models, one checkpoint per seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the configured attacks against a checkpoint and write results.csv.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Estimate MI, effective information and the derived bounds.
    Mi {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 512)]
        images: usize,
    },
    /// Retrain with SiftFunnel components removed, one row per toggle.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "funnel,attention,kl_ls,dcor,pearson,l1")]
        toggles: Vec<String>,
    },
    /// Collect results.csv and *.info.json files into report.md.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Serve cloud inference for a checkpoint over TCP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Write every received frame here.
        #[arg(long)]
        tap_dir: Option<PathBuf>,
        #[arg(long)]
        max_connections: Option<usize>,
    },
    /// Run edge and cloud over loopback and capture the transmitted frames.
    Capture {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value_t = 64)]
        images: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        tap_dir: Option<PathBuf>,
    },
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_root().join(&cfg.name)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let data = prepare_data(&cfg.dataset)?;
            for &seed in &cfg.seeds {
                let dir = run_dir(&cfg).join(cfg.defense.name()).join(format!("seed_{seed}"));
                let out = train_target(&cfg, &data, seed, Some(&dir))?;
                println!("{}: test acc {:.4}", dir.display(), out.target.manifest.metrics.test_acc);
            }
        }
        Command::Attack { cfg, checkpoint } => {
            let cfg = cfg.resolve()?;
            let target = load_target(&checkpoint)?;
            let data = prepare_data(&cfg.dataset)?;
            let decoders = prepare_decoders(&target, &data, &cfg.attacks)?;
            let rows = run_attack_suite(&target, &data, &cfg.attacks, &decoders, &cfg.eval, &cfg.mine, Some(&checkpoint))?;
            let path = checkpoint.join("results.csv");
            write_csv(&path, &rows)?;
            print!("{}", render_table(&rows));
            info!("wrote {}", path.display());
        }
        Command::Mi { cfg, checkpoint, images } => {
            let cfg = cfg.resolve()?;
            let target = load_target(&checkpoint)?;
            let data = prepare_data(&cfg.dataset)?;
            let report = measure_information(&target, &data, &cfg.mine, images)?;
            let path = checkpoint.join(format!("{}.info.json", target.defense().name()));
            std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate { cfg, toggles } => {
            let cfg = cfg.resolve()?;
            let toggles = parse_toggles(&toggles)?;
            let data = prepare_data(&cfg.dataset)?;
            let dir = run_dir(&cfg).join("ablation");
            let table = ablation(&cfg, &data, &toggles, cfg.seeds[0], Some(&dir))?;
            let rows: Vec<_> = table.into_iter().flat_map(|r| r.rows).collect();
            write_csv(&dir.join("results.csv"), &rows)?;
            print!("{}", render_table(&rows));
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| ExperimentConfig::default().output_root());
            print!("{}", build_report(&dir)?);
        }
        Command::Serve { checkpoint, port, tap_dir, max_connections } => {
            let target = load_target(&checkpoint)?;
            let listener = TcpListener::bind(("127.0.0.1", port))?;
            info!("serving {} on {}", checkpoint.display(), listener.local_addr()?);
            let cfg = ServerConfig { tap_dir, max_connections, read_timeout: Some(Duration::from_secs(60)) };
            let stats = serve(listener, &mut CloudHandler { model: target.model }, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Capture { cfg, checkpoint, port, images, batch, tap_dir } => {
            let cfg = cfg.resolve()?;
            let target = load_target(&checkpoint)?;
            let data = prepare_data(&cfg.dataset)?;
            let ids: Vec<usize> = (0..images.min(data.splits.test.len())).collect();
            let tap_dir = tap_dir.unwrap_or_else(|| checkpoint.join("captures"));
            let log = transport_demo(&target.model, port, &data.splits.test.images(&ids), batch, Some(&tap_dir))?;
            for f in &log.frames {
                println!("frame {}: header {} B, payload {} B, rtt {:.3} ms", f.index, f.header_bytes, f.payload_bytes, f.rtt_ms);
            }
            println!("captured {} frames in {}", log.server.captured.len(), tap_dir.display());
        }
    }
    Ok(())
}

fn load_target(dir: &Path) -> Result<Target> {
    Target::load(dir).with_context(|| format!("loading checkpoint {} (set {OUTPUT_ENV} to relocate outputs)", dir.display()))
}
