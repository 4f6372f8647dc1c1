//! Desk-scale acceptance run, criteria 1 to 10.
//!
//! Prints one PASS/FAIL line per criterion straight to stderr (bypassing the
//! test harness capture) and to `acceptance.txt` in the cargo target tmpdir.
//! Only criteria that are exact or analytic fail the test; the directional
//! reproductions report their outcome and numbers.
//!
//! `ACCEPT_ONLY=1,4,9` runs a subset; `ACCEPT_CACHE=<dir>` reuses trained
//! targets between runs; `SIFTFUNNEL_CIFAR10=<dir>` swaps the synthetic
//! images for CIFAR-10 binary batches.

// the oracles below are index-for-index transcriptions of the formulas
#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use sf_nn::{rng, Conv2d, Module, SeededRng, Tape, Tensor};
use siftfunnel::defenselosses::{composite_loss, distance_correlation, pearson_channel_loss};
use siftfunnel::harness::transport::{read_captures, serve, EchoHandler, ServerConfig};
use siftfunnel::harness::{
    ablation, measure_information, prepare_data, prepare_decoders, run_attack_suite, train_target, transport_demo, AttackSpec, DataSource,
    DefenseConfig, Dtype, EdgeClient, EvalConfig, ExperimentConfig, FeatureFrame, PreparedData, ReportRow, Target, Toggle,
};
use siftfunnel::infometrics::{estimate_mi, mine_between, train_mine, GaussianPairs, MineConfig};
use siftfunnel::inversion::{
    gen_invert, mle_invert, AttackJob, ConvEdge, DecoderConfig, InverseDecoder, MleOptimizer, Scenario, WhiteBoxEdge,
};
use siftfunnel::quality::{image_metrics, mean_nonzero, per_image_metrics};
use siftfunnel::splitmodels::{
    build_backbone, build_siftfunnel_edge, param_count, split_at, tap, BackboneConfig, BackboneKind, DefenseSpec, FeatureMap, TapPoint,
};

const IMAGES: usize = 3000;
const EPOCHS: usize = 10;
const DECODER_EPOCHS: usize = 60;
const DECODER_BATCH: usize = 16;
const MINE_STEPS: usize = 500;
const MI_IMAGES: usize = 512;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Board {
    lines: BTreeMap<u8, (bool, String)>,
    hard: Vec<u8>,
}

impl Board {
    fn record(&mut self, id: u8, pass: bool, detail: String, started: Instant) {
        let line = format!("{detail} [{:.1}s]", started.elapsed().as_secs_f64());
        let _ = writeln!(std::io::stderr(), "criterion {id:>2} {} {line}", verdict(pass));
        self.lines.insert(id, (pass, line));
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn selected(id: u8) -> bool {
    match std::env::var("ACCEPT_ONLY") {
        Ok(s) if !s.trim().is_empty() => s.split(',').any(|p| p.trim().parse() == Ok(id)),
        _ => true,
    }
}

fn note(msg: impl AsRef<str>) {
    let _ = writeln!(std::io::stderr(), "  {}", msg.as_ref());
}

// ---------------------------------------------------------------- criteria 1-4

/// Returns `(pass, detail, numbers)`; numbers feed the determinism rerun.
type Outcome = (bool, String, Vec<f64>);

fn criterion_1() -> Outcome {
    let base = build_backbone(&BackboneConfig::new(BackboneKind::BaseCnn, 10, (64, 64))).unwrap();
    let res = build_backbone(&BackboneConfig::new(BackboneKind::Resnet18Small, 10, (64, 64))).unwrap();
    let (b, r) = (param_count(&base.edge), param_count(&res.edge));
    (
        b == 299_520 && r == 149_824,
        format!("base_cnn edge {b} (want 299520), resnet18_small edge {r} (want 149824)"),
        vec![b as f64, r as f64],
    )
}

fn criterion_2() -> Outcome {
    let base = build_backbone(&BackboneConfig::new(BackboneKind::BaseCnn, 10, (64, 64))).unwrap();
    let plain = param_count(&base.edge);
    let sift = param_count(&build_siftfunnel_edge(base, &DefenseSpec::default()).unwrap().edge);
    let ratio = plain as f64 / sift as f64;
    let pass = (13_420..=16_402).contains(&sift) && ratio >= 15.0;
    (pass, format!("siftfunnel edge {sift} in [13420, 16402], {ratio:.2}x smaller than {plain} (want >= 15x)"), vec![sift as f64, ratio])
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut nums = Vec::new();
    for rho in [0.0, 0.5, 0.9] {
        let mut sum = 0.0;
        let mut truth = 0.0;
        for seed in 0..3u64 {
            let cfg = MineConfig { seed, ..MineConfig::default() };
            let mut train = GaussianPairs::new(1, rho, seed);
            truth = train.true_mi();
            let est = train_mine(&mut train, &cfg).unwrap();
            let v = estimate_mi(&est, &mut GaussianPairs::new(1, rho, 1000 + seed)).unwrap();
            nums.push(v);
            sum += v;
        }
        let mean = sum / 3.0;
        worst = worst.max((mean - truth).abs());
        parts.push(format!("rho {rho}: {mean:.4} vs {truth:.4}"));
    }
    (worst <= 0.15, format!("{}; worst error {worst:.4} nats (tol 0.15)", parts.join(", ")), nums)
}

fn brute_dcor(x: &[Vec<f64>], z: &[Vec<f64>]) -> f64 {
    fn centred(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                d[i][j] = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            }
        }
        let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| d[i][j]).sum::<f64>() / n as f64).collect();
        let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| d[i][j]).sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        (0..n).map(|i| (0..n).map(|j| d[i][j] - row[i] - col[j] + all).collect()).collect()
    }
    let (a, b) = (centred(x), centred(z));
    let n = x.len();
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            cov += a[i][j] * b[i][j];
            va += a[i][j] * a[i][j];
            vb += b[i][j] * b[i][j];
        }
    }
    let nn = (n * n) as f64;
    (cov / nn) / ((va / nn) * (vb / nn)).sqrt()
}

fn brute_pearson(z: &Tensor) -> f64 {
    let s = z.shape();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let ch = |b: usize, k: usize| &z.data()[(b * c + k) * p..(b * c + k + 1) * p];
    let mut total = 0.0;
    for b in 0..n {
        for i in 0..c {
            for j in 0..c {
                let (u, v) = (ch(b, i), ch(b, j));
                let mu = u.iter().sum::<f64>() / p as f64;
                let mv = v.iter().sum::<f64>() / p as f64;
                let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
                for k in 0..p {
                    suv += (u[k] - mu) * (v[k] - mv);
                    suu += (u[k] - mu) * (u[k] - mu);
                    svv += (v[k] - mv) * (v[k] - mv);
                }
                let r = suv / (suu * svv).sqrt();
                total += r * r;
            }
        }
    }
    total / (n * c * c) as f64
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    t.data().chunks(t.numel() / n).map(<[f64]>::to_vec).collect()
}

fn random_tensor(shape: &[usize], r: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let (mut dcor_err, mut pearson_err) = (0.0f64, 0.0f64);
    let mut nums = Vec::new();
    for k in 0..20 {
        let n = r.random_range(2..40);
        let x = random_tensor(&[n, r.random_range(1..20)], &mut r);
        // half the instances are dependent: z is a nonlinear function of x plus noise
        let z = if k % 2 == 0 {
            random_tensor(&[n, r.random_range(1..12)], &mut r)
        } else {
            let noise = random_tensor(x.shape(), &mut r);
            x.zip_map(&noise, |a, e| a.powi(3) + 0.1 * e)
        };
        let got = distance_correlation(&x, &z).unwrap();
        dcor_err = dcor_err.max((got - brute_dcor(&rows_of(&x), &rows_of(&z))).abs());
        let fm = random_tensor(&[r.random_range(1..4), r.random_range(1..9), r.random_range(1..5), r.random_range(2..6)], &mut r);
        let got_p = pearson_channel_loss(&FeatureMap::new(fm.clone()).unwrap()).unwrap();
        pearson_err = pearson_err.max((got_p - brute_pearson(&fm)).abs());
        nums.extend([got, got_p]);
    }
    let grad_err = composite_gradcheck();
    nums.push(grad_err);
    let pass = dcor_err <= 1e-8 && pearson_err <= 1e-8 && grad_err <= 1e-3;
    (
        pass,
        format!("dCor max |diff| {dcor_err:.2e}, Pearson max |diff| {pearson_err:.2e} (tol 1e-8); composite gradient max rel err {grad_err:.2e} (tol 1e-3)"),
        nums,
    )
}

/// Max relative error between analytic and central-difference gradients of
/// the composite loss with respect to a 10-parameter conv edge.
fn composite_gradcheck() -> f64 {
    let mut r = rng(10);
    let mut conv = Conv2d::new(1, 2, 2, 1, 0, true, &mut r);
    assert_eq!(param_count(&conv), 10);
    let x = random_tensor(&[6, 1, 5, 5], &mut r).map(|v| 0.5 + 0.5 * v);
    let head = random_tensor(&[32, 3], &mut r);
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let spec = DefenseSpec::default();
    // loss value, plus the parameter gradient when requested
    let run = |conv: &Conv2d, grad: bool| {
        let tape = if grad { Tape::new() } else { Tape::no_grad() };
        let z = conv.forward(&tape, tape.constant(x.clone()));
        let logits = z.flatten().matmul(tape.constant(head.clone()));
        let total = composite_loss(logits, &labels, &x, z, &spec).unwrap().total;
        let value = total.item();
        let g = grad.then(|| {
            let grads = tape.backward(total);
            [&conv.weight, conv.bias.as_ref().unwrap()].iter().flat_map(|p| grads.param(p).unwrap().data().to_vec()).collect::<Vec<f64>>()
        });
        (value, g)
    };
    let analytic = run(&conv, true).1.unwrap();
    let eval = |conv: &Conv2d| run(conv, false).0;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let bump = |conv: &mut Conv2d, d: f64| {
            let p = if k < 8 { &mut conv.weight } else { conv.bias.as_mut().unwrap() };
            p.value.data_mut()[k % 8] += d;
        };
        bump(&mut conv, h);
        let up = eval(&conv);
        bump(&mut conv, -2.0 * h);
        let down = eval(&conv);
        bump(&mut conv, h);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

// ------------------------------------------------------------ shared fixtures

fn data_source() -> DataSource {
    match std::env::var("SIFTFUNNEL_CIFAR10") {
        Ok(root) if !root.is_empty() => DataSource::Cifar10 { root: root.into(), limit: Some(IMAGES) },
        _ => DataSource::Synthetic { n: IMAGES, classes: 10, seed: 0 },
    }
}

fn experiment(defense: DefenseConfig) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { name: "acceptance".into(), width: 0.125, defense, ..ExperimentConfig::default() };
    cfg.dataset.source = data_source();
    cfg.training.epochs = EPOCHS;
    cfg.mine = MineConfig { steps: MINE_STEPS, ..MineConfig::default() };
    cfg.eval = EvalConfig { gen_images: 256, mle_images: 32, mosaic_images: 8, mi_images: 0 };
    cfg
}

fn gen_job(tap_point: TapPoint) -> AttackSpec {
    AttackSpec::Gen(DecoderConfig {
        scenario: Scenario::WhiteBox,
        tap_point,
        epochs: DECODER_EPOCHS,
        batch_size: DECODER_BATCH,
        ..DecoderConfig::default()
    })
}

fn sift() -> DefenseConfig {
    DefenseConfig::Siftfunnel(DefenseSpec::default())
}

fn trained(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Target {
    let dir = std::env::var("ACCEPT_CACHE").ok().map(|d| PathBuf::from(d).join(format!("{}_{}_{seed}", data.name, cfg.defense.name())));
    if let Some(d) = &dir {
        if d.join("manifest.json").exists() {
            return Target::load(d).unwrap();
        }
    }
    let t = Instant::now();
    let out = train_target(cfg, data, seed, dir.as_deref()).unwrap();
    note(format!(
        "trained {} seed {seed} in {:.0}s, test acc {:.4}",
        cfg.defense.name(),
        t.elapsed().as_secs_f64(),
        out.target.manifest.metrics.test_acc
    ));
    out.target
}

struct SeedRun {
    seed: u64,
    plain: Target,
    plain_decoder: InverseDecoder,
    plain_row: ReportRow,
    sift_row: ReportRow,
    plain_mi: f64,
    sift_mi: f64,
}

fn attack(
    target: &Target,
    data: &PreparedData,
    cfg: &ExperimentConfig,
    jobs: &[AttackSpec],
) -> (Vec<Option<InverseDecoder>>, Vec<ReportRow>) {
    let decoders = prepare_decoders(target, data, jobs).unwrap();
    let rows = run_attack_suite(target, data, jobs, &decoders, &cfg.eval, &cfg.mine, None).unwrap();
    (decoders, rows)
}

fn seed_run(data: &PreparedData, seed: u64) -> SeedRun {
    let jobs = [gen_job(TapPoint::EdgeOutput)];
    let pcfg = experiment(DefenseConfig::None);
    let scfg = experiment(sift());
    let plain = trained(&pcfg, data, seed);
    let sifted = trained(&scfg, data, seed);
    let (mut decs, prow) = attack(&plain, data, &pcfg, &jobs);
    let (_, srow) = attack(&sifted, data, &scfg, &jobs);
    let mine = MineConfig { seed, ..pcfg.mine.clone() };
    let plain_mi = measure_information(&plain, data, &mine, MI_IMAGES).unwrap().mi_nats;
    let sift_mi = measure_information(&sifted, data, &mine, MI_IMAGES).unwrap().mi_nats;
    SeedRun {
        seed,
        plain,
        plain_decoder: decs.remove(0).unwrap(),
        plain_row: prow.into_iter().next().unwrap(),
        sift_row: srow.into_iter().next().unwrap(),
        plain_mi,
        sift_mi,
    }
}

// -------------------------------------------------------------- criteria 5-10

fn criterion_5(data: &PreparedData, runs: &[SeedRun]) -> (bool, String) {
    let test = &data.splits.test;
    let ids: Vec<usize> = (0..MI_IMAGES.min(test.len())).collect();
    let x = test.images(&ids);
    let mut ok = 0;
    let mut parts = Vec::new();
    for run in runs {
        let (mut mis, mut deltas) = (Vec::new(), Vec::new());
        for depth in 1..=4 {
            let m = split_at(run.plain.model.clone(), &format!("block_{depth}")).unwrap();
            let z = tap(&m, &x, TapPoint::EdgeOutput).unwrap();
            let mine = MineConfig { steps: MINE_STEPS, seed: run.seed, ..MineConfig::default() };
            mis.push(mine_between(&x, z.values(), &mine).unwrap().nats);
            deltas.push(mean_nonzero(&z));
        }
        let mi_ok = mis.windows(2).all(|w| w[1] <= w[0]);
        let delta_ok = deltas.windows(2).all(|w| w[1] < w[0]);
        ok += usize::from(mi_ok && delta_ok);
        parts.push(format!(
            "seed {}: MI {} ({}), delta(z) {} ({})",
            run.seed,
            fmt_list(&mis, 3),
            if mi_ok { "non-increasing" } else { "not monotone" },
            fmt_list(&deltas, 1),
            if delta_ok { "decreasing" } else { "not decreasing" }
        ));
    }
    (ok == runs.len(), format!("{ok}/{} seeds ordered; {}", runs.len(), parts.join("; ")))
}

fn fmt_list(v: &[f64], digits: usize) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(", "))
}

fn criterion_6(runs: &[SeedRun]) -> (bool, String) {
    let mut counts = [0usize; 4];
    let mut parts = Vec::new();
    for r in runs {
        let (p, s) = (r.plain_row.gen().unwrap(), r.sift_row.gen().unwrap());
        let clauses = [
            p.ssim > 0.85,
            s.mse >= 2.0 * p.mse && p.ssim - s.ssim >= 0.2,
            (r.plain_row.test_acc - r.sift_row.test_acc) * 100.0 <= 5.0,
            r.sift_mi <= 0.5 * r.plain_mi && r.sift_row.delta_z <= 0.5 * r.plain_row.delta_z,
        ];
        for (c, &hit) in counts.iter_mut().zip(&clauses) {
            *c += usize::from(hit);
        }
        parts.push(format!(
            "seed {}: ssim {:.3}/{:.3}, mse {:.5}/{:.5}, acc {:.4}/{:.4}, MI {:.3}/{:.3}, delta(z) {:.1}/{:.1}",
            r.seed,
            p.ssim,
            s.ssim,
            p.mse,
            s.mse,
            r.plain_row.test_acc,
            r.sift_row.test_acc,
            r.plain_mi,
            r.sift_mi,
            r.plain_row.delta_z,
            r.sift_row.delta_z
        ));
    }
    let need = runs.len().div_ceil(2).max(2).min(runs.len());
    let verdicts: Vec<String> =
        ["a", "b", "c", "d"].iter().zip(&counts).map(|(n, &c)| format!("({n}) {c}/{} {}", runs.len(), verdict(c >= need))).collect();
    (counts.iter().all(|&c| c >= need), format!("{} [unprotected/siftfunnel] {}", verdicts.join(" "), parts.join("; ")))
}

fn criterion_7(data: &PreparedData, plain_mse: f64) -> (bool, String) {
    let mut cfg = experiment(sift());
    cfg.attacks = vec![gen_job(TapPoint::EdgeOutput), gen_job(TapPoint::PostCompensation)];
    let table = ablation(&cfg, data, &Toggle::ALL, 0, None).unwrap();
    let edge_mse = |rows: &[ReportRow]| rows.iter().find(|r| r.method.ends_with("edge_output")).and_then(|r| r.gen_mse).unwrap();
    let full = &table[0];
    let full_edge = edge_mse(&full.rows);
    let full_post = full.rows.iter().find(|r| r.method.ends_with("post_compensation")).and_then(|r| r.gen_mse).unwrap();
    let drops: Vec<(String, f64)> = table[1..].iter().map(|v| (v.variant.clone(), full_edge - edge_mse(&v.rows))).collect();
    let (top, _) = drops.iter().cloned().fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let order_ok = top == "without_dcor";
    let post_ok = full_post < full_edge && full_post >= 2.0 * plain_mse;
    let listed: Vec<String> = drops.iter().map(|(v, d)| format!("{v} {d:+.5}")).collect();
    (
        order_ok && post_ok,
        format!(
            "largest MSE drop: {top} (want without_dcor); drops vs full {full_edge:.5}: {}; post_compensation {full_post:.5} < edge_output {full_edge:.5}: {}, >= 2x unprotected {plain_mse:.5}: {}",
            listed.join(", "),
            full_post < full_edge,
            full_post >= 2.0 * plain_mse
        ),
    )
}

/// Solves the normal equations of the conv operator by Gaussian elimination.
fn least_squares_conv(conv: &Conv2d, input: (usize, usize, usize), z: &Tensor) -> Tensor {
    let (c, h, w) = input;
    let d = c * h * w;
    let tape = Tape::no_grad();
    let basis = Tensor::new(vec![d, c, h, w], (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect()).unwrap();
    let cols = conv.forward(&tape, tape.constant(basis)).value().as_ref().clone();
    let m = cols.numel() / d;
    let a = |row: usize, col: usize| cols.data()[col * m + row];
    let n = z.shape()[0];
    let mut out = Vec::with_capacity(n * d);
    let mut ata = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            ata[i][j] = (0..m).map(|k| a(k, i) * a(k, j)).sum();
        }
    }
    for s in 0..n {
        let zs = &z.data()[s * m..(s + 1) * m];
        let mut g: Vec<Vec<f64>> = ata.clone();
        for (i, row) in g.iter_mut().enumerate() {
            row.push((0..m).map(|k| a(k, i) * zs[k]).sum());
        }
        for p in 0..d {
            let piv = (p..d).max_by(|&i, &j| g[i][p].abs().total_cmp(&g[j][p].abs())).unwrap();
            g.swap(p, piv);
            for i in p + 1..d {
                let f = g[i][p] / g[p][p];
                for k in p..=d {
                    g[i][k] -= f * g[p][k];
                }
            }
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            x[i] = (g[i][d] - (i + 1..d).map(|k| g[i][k] * x[k]).sum::<f64>()) / g[i][i];
        }
        out.extend(x);
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

fn criterion_8(data: &PreparedData, plain: &Target) -> (bool, String) {
    let mut r = rng(8);
    let input = (3, 8, 8);
    let edge = ConvEdge { conv: Conv2d::new(3, 6, 3, 1, 1, false, &mut r), input };
    let x = data.splits.test.images(&[0, 1, 2, 3]);
    let x = crop(&x, 8);
    let tape = Tape::no_grad();
    let z = edge.conv.forward(&tape, tape.constant(x.clone())).value().as_ref().clone();
    let ls = least_squares_conv(&edge.conv, input, &z);
    let ls_mse = image_metrics(&ls.map(|v| v.clamp(0.0, 1.0)), &x).unwrap().mse;
    let job = AttackJob { steps: 3000, step_size: 0.05, ..AttackJob::default() };
    let lin = mle_invert(&edge, &FeatureMap::new(z).unwrap(), &job).unwrap();
    let lin_mse = image_metrics(&lin.images, &x).unwrap().mse;

    // the attack settings were chosen on test images 0..8, so evaluate on the next 32
    let ids: Vec<usize> = (8..40).collect();
    let x = data.splits.test.images(&ids);
    let z = tap(&plain.model, &x, TapPoint::EdgeOutput).unwrap();
    let job = AttackJob {
        steps: 1500,
        step_size: 0.05,
        tv_weight: 0.5,
        optimizer: MleOptimizer::Adam { beta1: 0.9, beta2: 0.999 },
        ..AttackJob::default()
    };
    let res = mle_invert(&WhiteBoxEdge { model: &plain.model, tap: TapPoint::EdgeOutput }, &z, &job).unwrap();
    let per = per_image_metrics(&res.images, &x).unwrap();
    let good = per.iter().filter(|m| m.ssim > 0.9).count();
    let mean_ssim = per.iter().map(|m| m.ssim).sum::<f64>() / per.len() as f64;
    let pass = ls_mse < 1e-10 && lin_mse < 1e-3 && good * 10 >= 8 * per.len();
    (
        pass,
        format!(
            "linear conv edge: least-squares oracle mse {ls_mse:.2e}, mle mse {lin_mse:.2e} (tol 1e-3); 2-block edge: {good}/32 images with SSIM > 0.9 (need 26), mean SSIM {mean_ssim:.3}"
        ),
    )
}

fn crop(x: &Tensor, size: usize) -> Tensor {
    let s = x.shape();
    let mut out = Vec::new();
    for plane in x.data().chunks(s[2] * s[3]) {
        for y in 0..size {
            out.extend_from_slice(&plane[y * s[3]..y * s[3] + size]);
        }
    }
    Tensor::new(vec![s[0], s[1], size, size], out).unwrap()
}

fn criterion_9(data: &PreparedData, run: &SeedRun, scratch: &Path) -> (bool, String) {
    let (sent, exact, captured_ok) = echo_frames(1000, &scratch.join("echo"));
    let ids: Vec<usize> = (0..64).collect();
    let x = data.splits.test.images(&ids);
    let cap = scratch.join("capture");
    let log = transport_demo(&run.plain.model, 0, &x, 16, Some(&cap)).unwrap();
    let replay: Vec<Tensor> = read_captures(&cap).unwrap().iter().map(|z| gen_invert(&run.plain_decoder, z).unwrap()).collect();
    let replay = Tensor::cat_batch(&replay).unwrap();
    let local: Vec<Tensor> = (0..64)
        .step_by(16)
        .map(|s| gen_invert(&run.plain_decoder, &tap(&run.plain.model, &x.slice_batch(s, s + 16), TapPoint::EdgeOutput).unwrap()).unwrap())
        .collect();
    let local = Tensor::cat_batch(&local).unwrap();
    let replay_ok = replay == local;
    let served: Vec<Tensor> = (0..64)
        .step_by(16)
        .map(|s| run.plain.model.cloud_logits(&tap(&run.plain.model, &x.slice_batch(s, s + 16), TapPoint::EdgeOutput).unwrap()).round_f32())
        .collect();
    let logits_ok = log.logits == Tensor::cat_batch(&served).unwrap();
    (
        exact == sent && captured_ok && replay_ok && logits_ok,
        format!(
            "{exact}/{sent} frames echoed bit-exactly, captures byte-identical: {captured_ok}; {} captured frames replayed into gen_invert match in-process output: {replay_ok}; served logits match local cloud (f32): {logits_ok}",
            log.server.captured.len()
        ),
    )
}

/// Sends random frames through an echo server; returns (sent, bit-exact replies, captures identical).
fn echo_frames(count: usize, dir: &Path) -> (usize, usize, bool) {
    let listener = TcpListener::bind(("127.0.0.1", 0)).unwrap();
    let addr = listener.local_addr().unwrap();
    let cfg = ServerConfig { tap_dir: Some(dir.to_path_buf()), max_connections: Some(1), read_timeout: Some(Duration::from_secs(30)) };
    let server = std::thread::spawn(move || serve(listener, &mut EchoHandler, &cfg));
    let mut client = EdgeClient::connect(addr).unwrap();
    let mut r = rng(9);
    let mut exact = 0;
    let mut sent_bytes = Vec::new();
    for _ in 0..count {
        let shape = [r.random_range(1..4), r.random_range(1..9), r.random_range(1..9), r.random_range(1..9)];
        let n: usize = shape.iter().product();
        let dtype = if r.random_bool(0.5) { Dtype::F32 } else { Dtype::F16 };
        let vals: Vec<f64> = (0..n)
            .map(|_| match dtype {
                Dtype::F32 => f64::from(f32::from_bits(r.random::<u32>() & 0xBFFF_FFFF)),
                Dtype::F16 => f64::from(half::f16::from_bits(r.random::<u16>() & 0xBFFF).to_f32()),
            })
            .collect();
        let z = FeatureMap::new(Tensor::new(shape.to_vec(), vals.clone()).unwrap()).unwrap();
        sent_bytes.push(FeatureFrame::encode(&z, dtype).unwrap().to_bytes());
        let (back, _) = client.send(&z, dtype).unwrap();
        let same = back.shape() == shape && back.data().iter().zip(&vals).all(|(a, b)| (*a as f32).to_bits() == (*b as f32).to_bits());
        exact += usize::from(same);
    }
    client.finish_writes().unwrap();
    let stats = server.join().unwrap().unwrap();
    let captured_ok = stats.captured.len() == count && stats.captured.iter().zip(&sent_bytes).all(|(p, b)| std::fs::read(p).unwrap() == *b);
    (count, exact, captured_ok)
}

fn params_of(m: &dyn Module) -> Vec<u64> {
    let mut v = Vec::new();
    m.visit("", &mut |_, p| v.extend(p.value.data().iter().map(|x| x.to_bits())));
    v
}

fn criterion_10(first: &BTreeMap<u8, Vec<f64>>, data: &PreparedData, reference: Option<&Target>) -> (bool, String) {
    let again: BTreeMap<u8, Vec<f64>> =
        [(1, criterion_1().2), (2, criterion_2().2), (3, criterion_3().2), (4, criterion_4().2)].into_iter().collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for (id, nums) in first {
        let same = again.get(id).is_some_and(|b| b.len() == nums.len() && b.iter().zip(nums).all(|(x, y)| x.to_bits() == y.to_bits()));
        ok &= same;
        parts.push(format!("criterion {id}: {} numbers {}", nums.len(), if same { "identical" } else { "DIFFER" }));
    }
    let cfg = experiment(DefenseConfig::None);
    let a = train_target(&cfg, data, 0, None).unwrap().target;
    let b = match reference {
        Some(t) => t.clone(),
        None => train_target(&cfg, data, 0, None).unwrap().target,
    };
    let same = params_of(&a.model.edge) == params_of(&b.model.edge)
        && params_of(&a.model.cloud) == params_of(&b.model.cloud)
        && a.manifest.metrics.test_acc.to_bits() == b.manifest.metrics.test_acc.to_bits()
        && a.manifest.metrics.final_loss.to_bits() == b.manifest.metrics.final_loss.to_bits();
    ok &= same;
    parts.push(format!("seed-0 training rerun: parameters, loss and accuracy {}", if same { "identical" } else { "DIFFER" }));
    (ok, parts.join("; "))
}

#[test]
fn acceptance() {
    let mut board = Board { lines: BTreeMap::new(), hard: vec![1, 2, 3, 4, 9, 10] };
    let mut numbers = BTreeMap::new();
    for (id, f) in [(1u8, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4)] {
        if selected(id) || selected(10) {
            let t = Instant::now();
            let (pass, detail, nums) = f();
            numbers.insert(id, nums);
            if selected(id) {
                board.record(id, pass, detail, t);
            }
        }
    }

    let needs_models = [5u8, 6, 7, 8, 9, 10].iter().any(|&i| selected(i));
    let data = needs_models.then(|| prepare_data(&experiment(DefenseConfig::None).dataset).unwrap());
    let scratch = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    if let Some(data) = &data {
        let seeds: &[u64] = if selected(5) || selected(6) { &SEEDS } else { &SEEDS[..1] };
        let t = Instant::now();
        for &s in seeds {
            if [5u8, 6, 8, 9].iter().any(|&i| selected(i)) {
                runs.push(seed_run(data, s));
            }
        }
        if selected(6) {
            let (pass, detail) = criterion_6(&runs);
            board.record(6, pass, detail, t);
        }
        if selected(5) {
            let t = Instant::now();
            let (pass, detail) = criterion_5(data, &runs);
            board.record(5, pass, detail, t);
        }
        if selected(8) {
            let t = Instant::now();
            let (pass, detail) = criterion_8(data, &runs[0].plain);
            board.record(8, pass, detail, t);
        }
        if selected(9) {
            let t = Instant::now();
            let (pass, detail) = criterion_9(data, &runs[0], scratch.path());
            board.record(9, pass, detail, t);
        }
        if selected(7) {
            let t = Instant::now();
            let plain_mse = match runs.first() {
                Some(r) => r.plain_row.gen_mse.unwrap(),
                None => {
                    let cfg = experiment(DefenseConfig::None);
                    let target = trained(&cfg, data, 0);
                    attack(&target, data, &cfg, &[gen_job(TapPoint::EdgeOutput)]).1[0].gen_mse.unwrap()
                }
            };
            let (pass, detail) = criterion_7(data, plain_mse);
            board.record(7, pass, detail, t);
        }
        if selected(10) {
            let t = Instant::now();
            let cached = std::env::var("ACCEPT_CACHE").is_ok();
            let reference = runs.first().filter(|_| !cached).map(|r| &r.plain);
            let (pass, detail) = criterion_10(&numbers, data, reference);
            board.record(10, pass, detail, t);
        }
    }

    let mut summary = String::from("acceptance summary\n");
    for (id, (pass, line)) in &board.lines {
        summary.push_str(&format!("criterion {id:>2} {} {line}\n", verdict(*pass)));
    }
    let _ = write!(std::io::stderr(), "{summary}");
    let _ = std::fs::write(Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt"), &summary);
    let broken: Vec<u8> = board.hard.iter().copied().filter(|id| board.lines.get(id).is_some_and(|(p, _)| !p)).collect();
    assert!(broken.is_empty(), "exact criteria failed: {broken:?}");
}
