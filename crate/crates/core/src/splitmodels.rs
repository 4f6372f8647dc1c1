//! Backbones, edge/cloud partitioning, the SiftFunnel edge and the cloud-side
//! channel compensation module.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sf_nn::{rng, BatchNorm2d, Conv2d, Linear, Module, Param, Tape, Tensor, Var};

use crate::error::{invalid, Result};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Activation batch `(n, c, h, w)` crossing the edge→cloud boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 4 {
            return invalid(format!("feature map must be 4-D, got {:?}", values.shape()));
        }
        if !values.all_finite() {
            return invalid("feature map contains non-finite values");
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn batch(&self) -> usize {
        self.shape()[0]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        let [_, c, h, w] = self.shape();
        c * h * w
    }

    /// Count of strictly nonzero elements in each sample.
    pub fn nonzero_per_sample(&self) -> Vec<usize> {
        self.values.data().chunks(self.sample_len().max(1)).map(|s| s.iter().filter(|&&v| v != 0.0).count()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    EdgeOutput,
    PostCompensation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    BaseCnn,
    Resnet18Small,
}

impl BackboneKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "base_cnn" => Ok(Self::BaseCnn),
            "resnet18_small" => Ok(Self::Resnet18Small),
            other => invalid(format!("unknown backbone '{other}' (expected base_cnn or resnet18_small)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BaseCnn => "base_cnn",
            Self::Resnet18Small => "resnet18_small",
        }
    }

    pub fn default_split(self) -> &'static str {
        match self {
            Self::BaseCnn => "block_2",
            Self::Resnet18Small => "stage_1",
        }
    }
}

/// Everything needed to rebuild a backbone deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub classes: usize,
    pub resolution: (usize, usize),
    /// Channel multiplier; 1.0 is the published width.
    pub width: f64,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, classes: usize, resolution: (usize, usize)) -> Self {
        Self { kind, classes, resolution, width: 1.0, seed: 0 }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn ch(&self, c: usize) -> usize {
        ((c as f64 * self.width).round() as usize).max(1)
    }
}

/// Loss weights and structure of a SiftFunnel edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSpec {
    /// Channels of the 1×1, 3×3 and 5×5 funnel convolutions; empty picks
    /// `[⌈C/4⌉, ⌈C/8⌉, 2]` (final 10 when spatially reducing).
    pub funnel_channels: Vec<usize>,
    /// Stride-2 middle funnel convolution.
    pub spatial_reduction: bool,
    pub funnel: bool,
    pub attention_pre: bool,
    pub attention_post: bool,
    /// Channels restored by the compensation module; must equal the input
    /// channels of the first cloud block. `None` infers it.
    pub compensation_channels: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub alpha: f64,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            funnel_channels: Vec::new(),
            spatial_reduction: false,
            funnel: true,
            attention_pre: true,
            attention_post: true,
            compensation_channels: None,
            lambda1: 3.5,
            lambda2: 0.8,
            lambda3: 0.6,
            tau: 1e-3,
            alpha: 0.35,
        }
    }
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("tau", self.tau)] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.tau >= 1e-2 {
            return invalid(format!("tau must stay below 1e-2, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return invalid(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if !self.funnel_channels.is_empty() {
            if self.funnel_channels.len() != 3 {
                return invalid("funnel_channels must list exactly three channel counts");
            }
            if self.funnel_channels.contains(&0) {
                return invalid("funnel channels must be at least 1");
            }
            if self.funnel_channels.windows(2).any(|w| w[1] > w[0]) {
                return invalid(format!("funnel channels must be non-increasing, got {:?}", self.funnel_channels));
            }
        }
        Ok(())
    }

    /// Funnel channel plan for an input of `c` channels.
    pub fn funnel_plan(&self, c: usize) -> Result<[usize; 3]> {
        if self.funnel_channels.is_empty() {
            let last = if self.spatial_reduction { 10 } else { 2 };
            let mid = c.div_ceil(8).max(last);
            let first = c.div_ceil(4).max(mid);
            return Ok([first, mid, last]);
        }
        let p = [self.funnel_channels[0], self.funnel_channels[1], self.funnel_channels[2]];
        if p[0] > c {
            return invalid(format!("funnel plan {p:?} widens the {c}-channel edge output"));
        }
        Ok(p)
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    fc1: Linear,
    fc2: Linear,
}

fn reduced(c: usize) -> usize {
    (c / 16).max(1)
}

impl SqueezeExcite {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        let h = reduced(c);
        Self { fc1: Linear::new(c, h, true, rng), fc2: Linear::new(h, c, true, rng) }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let s = x.shape();
        let pooled = x.mean_axes(&[2, 3]).reshape(&[s[0], s[1]]);
        let gate = self.fc2.forward(tape, self.fc1.forward(tape, pooled).relu()).sigmoid();
        x.mul(gate.reshape(&[s[0], s[1], 1, 1]))
    }
}

impl Module for SqueezeExcite {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Max and mean over the channel axis, stacked as two channels.
fn zpool<'t>(x: Var<'t>) -> Var<'t> {
    Var::concat(&[x.max_axis(1), x.mean_axes(&[1])], 1)
}

/// Z-pool → 7×7 conv → BN → sigmoid spatial gate.
#[derive(Clone, Debug)]
pub struct SpatialGate {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl SpatialGate {
    pub fn new(rng: &mut impl Rng) -> Self {
        Self { conv: Conv2d::same(2, 1, 7, false, rng), bn: BatchNorm2d::new(1) }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        let g = self.bn.forward(tape, self.conv.forward(tape, zpool(x)), train).sigmoid();
        x.mul(g)
    }
}

impl Module for SpatialGate {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Triplet attention: spatial gates over the (C,W), (H,C) and (H,W) planes, averaged.
#[derive(Clone, Debug)]
pub struct TripletAttention {
    cw: SpatialGate,
    hc: SpatialGate,
    hw: SpatialGate,
}

impl TripletAttention {
    pub fn new(rng: &mut impl Rng) -> Self {
        Self { cw: SpatialGate::new(rng), hc: SpatialGate::new(rng), hw: SpatialGate::new(rng) }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        let a = self.cw.forward(tape, x.permute(&[0, 2, 1, 3]), train).permute(&[0, 2, 1, 3]);
        let b = self.hc.forward(tape, x.permute(&[0, 3, 2, 1]), train).permute(&[0, 3, 2, 1]);
        let c = self.hw.forward(tape, x, train);
        a.add(b).add(c).scale(1.0 / 3.0)
    }
}

impl Module for TripletAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.cw.visit(&join(prefix, "cw"), f);
        self.hc.visit(&join(prefix, "hc"), f);
        self.hw.visit(&join(prefix, "hw"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cw.visit_mut(&join(prefix, "cw"), f);
        self.hc.visit_mut(&join(prefix, "hc"), f);
        self.hw.visit_mut(&join(prefix, "hw"), f);
    }
}

/// Convolutional block attention: shared-MLP channel gate, then a 7×7 spatial gate.
#[derive(Clone, Debug)]
pub struct Cbam {
    fc1: Linear,
    fc2: Linear,
    spatial: SpatialGate,
}

impl Cbam {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        let h = reduced(c);
        Self { fc1: Linear::new(c, h, true, rng), fc2: Linear::new(h, c, true, rng), spatial: SpatialGate::new(rng) }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let flat = x.reshape(&[n, c, hw]);
        let avg = flat.mean_axes(&[2]).reshape(&[n, c]);
        let max = flat.max_axis(2).reshape(&[n, c]);
        let mlp = |v: Var<'t>| self.fc2.forward(tape, self.fc1.forward(tape, v).relu());
        let gate = mlp(avg).add(mlp(max)).sigmoid().reshape(&[n, c, 1, 1]);
        self.spatial.forward(tape, x.mul(gate), train)
    }
}

impl Module for Cbam {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
    }
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self { conv: Conv2d::new(cin, cout, k, stride, k / 2, bias, rng), bn: BatchNorm2d::new(cout) }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        self.bn.forward(tape, self.conv.forward(tape, x), train)
    }
}

impl Module for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// One layer of a decoder mirror: optional 2× upsampling, then a
/// transposed convolution `cin → cout` with kernel `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MirrorStage {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub upsample: bool,
}

#[derive(Clone, Debug)]
pub enum Block {
    /// conv3×3 → BN → max-pool 2×2 → ReLU.
    Conv(ConvBn),
    /// Bias-free conv3×3 → BN → ReLU.
    Stem(ConvBn),
    Basic {
        a: ConvBn,
        b: ConvBn,
        shortcut: Option<ConvBn>,
    },
    /// Flatten → FC → ReLU → FC.
    Head {
        fc1: Linear,
        fc2: Linear,
    },
    /// Global average pool → FC.
    PoolHead {
        fc: Linear,
    },
    AttentionPre {
        se: SqueezeExcite,
        triplet: TripletAttention,
    },
    Funnel {
        layers: Vec<ConvBn>,
    },
    AttentionPost {
        se: SqueezeExcite,
        cbam: Cbam,
    },
    /// 1×1 conv → ReLU → 1×1 conv → ReLU, after optional upsampling.
    Compensation {
        up: usize,
        c1: Conv2d,
        c2: Conv2d,
    },
    Identity,
}

impl Block {
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        match self {
            Block::Conv(cb) => cb.forward(tape, x, train).max_pool2d(2).relu(),
            Block::Stem(cb) => cb.forward(tape, x, train).relu(),
            Block::Basic { a, b, shortcut } => {
                let y = b.forward(tape, a.forward(tape, x, train).relu(), train);
                let s = match shortcut {
                    Some(sc) => sc.forward(tape, x, train),
                    None => x,
                };
                y.add(s).relu()
            }
            Block::Head { fc1, fc2 } => fc2.forward(tape, fc1.forward(tape, x.flatten()).relu()),
            Block::PoolHead { fc } => {
                let s = x.shape();
                fc.forward(tape, x.mean_axes(&[2, 3]).reshape(&[s[0], s[1]]))
            }
            Block::AttentionPre { se, triplet } => triplet.forward(tape, se.forward(tape, x), train),
            Block::Funnel { layers } => layers.iter().fold(x, |h, l| l.forward(tape, h, train).relu()),
            Block::AttentionPost { se, cbam } => cbam.forward(tape, se.forward(tape, x), train),
            Block::Compensation { up, c1, c2 } => {
                let x = if *up > 1 { x.upsample_nearest(*up) } else { x };
                c2.forward(tape, c1.forward(tape, x).relu()).relu()
            }
            Block::Identity => x,
        }
    }

    /// Output `(c, h, w)` for an input of `(c, h, w)`; heads report `(K, 1, 1)`.
    pub fn out_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            Block::Conv(cb) => (cb.conv.out_channels(), h / 2, w / 2),
            Block::Stem(cb) => (cb.conv.out_channels(), h, w),
            Block::Basic { a, b, .. } => {
                let s = a.conv.stride;
                (b.conv.out_channels(), (h - 1) / s + 1, (w - 1) / s + 1)
            }
            Block::Head { fc2, .. } => (fc2.weight.value.shape()[0], 1, 1),
            Block::PoolHead { fc } => (fc.weight.value.shape()[0], 1, 1),
            Block::Funnel { layers } => layers.iter().fold((c, h, w), |(_, h, w), l| {
                let s = l.conv.stride;
                (l.conv.out_channels(), (h - 1) / s + 1, (w - 1) / s + 1)
            }),
            Block::Compensation { up, c2, .. } => (c2.out_channels(), h * up, w * up),
            Block::AttentionPre { .. } | Block::AttentionPost { .. } | Block::Identity => (c, h, w),
        }
    }

    /// Decoder layers inverting this block, in decoding order.
    pub fn mirror(&self) -> Vec<MirrorStage> {
        let st = |cb: &ConvBn, upsample| MirrorStage {
            cin: cb.conv.out_channels(),
            cout: cb.conv.in_channels(),
            k: cb.conv.weight.value.shape()[2],
            upsample,
        };
        match self {
            Block::Conv(cb) => vec![st(cb, true)],
            Block::Stem(cb) => vec![st(cb, false)],
            Block::Basic { a, b, .. } => vec![st(b, false), st(a, a.conv.stride > 1)],
            Block::Funnel { layers } => layers.iter().rev().map(|l| st(l, l.conv.stride > 1)).collect(),
            _ => Vec::new(),
        }
    }

    fn is_head(&self) -> bool {
        matches!(self, Block::Head { .. } | Block::PoolHead { .. })
    }
}

impl Module for Block {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Block::Conv(cb) | Block::Stem(cb) => cb.visit(p, f),
            Block::Basic { a, b, shortcut } => {
                a.visit(&join(p, "a"), f);
                b.visit(&join(p, "b"), f);
                if let Some(s) = shortcut {
                    s.visit(&join(p, "shortcut"), f);
                }
            }
            Block::Head { fc1, fc2 } => {
                fc1.visit(&join(p, "fc1"), f);
                fc2.visit(&join(p, "fc2"), f);
            }
            Block::PoolHead { fc } => fc.visit(&join(p, "fc"), f),
            Block::AttentionPre { se, triplet } => {
                se.visit(&join(p, "se"), f);
                triplet.visit(&join(p, "triplet"), f);
            }
            Block::Funnel { layers } => {
                for (i, l) in layers.iter().enumerate() {
                    l.visit(&join(p, &format!("layer{i}")), f);
                }
            }
            Block::AttentionPost { se, cbam } => {
                se.visit(&join(p, "se"), f);
                cbam.visit(&join(p, "cbam"), f);
            }
            Block::Compensation { c1, c2, .. } => {
                c1.visit(&join(p, "c1"), f);
                c2.visit(&join(p, "c2"), f);
            }
            Block::Identity => {}
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Block::Conv(cb) | Block::Stem(cb) => cb.visit_mut(p, f),
            Block::Basic { a, b, shortcut } => {
                a.visit_mut(&join(p, "a"), f);
                b.visit_mut(&join(p, "b"), f);
                if let Some(s) = shortcut {
                    s.visit_mut(&join(p, "shortcut"), f);
                }
            }
            Block::Head { fc1, fc2 } => {
                fc1.visit_mut(&join(p, "fc1"), f);
                fc2.visit_mut(&join(p, "fc2"), f);
            }
            Block::PoolHead { fc } => fc.visit_mut(&join(p, "fc"), f),
            Block::AttentionPre { se, triplet } => {
                se.visit_mut(&join(p, "se"), f);
                triplet.visit_mut(&join(p, "triplet"), f);
            }
            Block::Funnel { layers } => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.visit_mut(&join(p, &format!("layer{i}")), f);
                }
            }
            Block::AttentionPost { se, cbam } => {
                se.visit_mut(&join(p, "se"), f);
                cbam.visit_mut(&join(p, "cbam"), f);
            }
            Block::Compensation { c1, c2, .. } => {
                c1.visit_mut(&join(p, "c1"), f);
                c2.visit_mut(&join(p, "c2"), f);
            }
            Block::Identity => {}
        }
    }
}

#[derive(Clone, Debug)]
pub struct Named {
    pub name: String,
    pub block: Block,
}

fn named(name: &str, block: Block) -> Named {
    Named { name: name.to_string(), block }
}

/// A chain of blocks.
#[derive(Clone, Debug, Default)]
pub struct Stack {
    pub blocks: Vec<Named>,
}

impl Stack {
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        self.blocks.iter().fold(x, |h, b| b.block.forward(tape, h, train))
    }

    pub fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize) {
        self.blocks.iter().fold(input, |s, b| b.block.out_shape(s))
    }

    pub fn names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    /// Decoder plan inverting the whole stack.
    pub fn mirror(&self) -> Vec<MirrorStage> {
        self.blocks.iter().rev().flat_map(|b| b.block.mirror()).collect()
    }
}

impl Module for Stack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for b in &self.blocks {
            b.block.visit(&join(prefix, &b.name), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for b in &mut self.blocks {
            b.block.visit_mut(&join(prefix, &b.name), f);
        }
    }
}

/// Edge and cloud subnetworks whose composition is the classifier.
#[derive(Clone, Debug)]
pub struct SplitModel {
    pub config: BackboneConfig,
    pub edge: Stack,
    pub cloud: Stack,
    /// Boundary in the underlying backbone.
    pub split_point: String,
    pub defense: Option<DefenseSpec>,
}

fn basic(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Block {
    Block::Basic {
        a: ConvBn::new(cin, cout, 3, stride, false, rng),
        b: ConvBn::new(cout, cout, 3, 1, false, rng),
        shortcut: (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, false, rng)),
    }
}

/// Builds a backbone split at its default point.
pub fn build_backbone(cfg: &BackboneConfig) -> Result<SplitModel> {
    let (h, w) = cfg.resolution;
    if cfg.classes < 2 {
        return invalid("a classifier needs at least two classes");
    }
    if !(cfg.width > 0.0 && cfg.width <= 4.0) {
        return invalid(format!("width multiplier {} out of range (0, 4]", cfg.width));
    }
    let mut r = rng(cfg.seed);
    let mut blocks = Vec::new();
    match cfg.kind {
        BackboneKind::BaseCnn => {
            if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
                return invalid(format!("base_cnn needs a resolution divisible by 16, got {h}×{w}"));
            }
            let plan = [3, cfg.ch(128), cfg.ch(256), cfg.ch(512), cfg.ch(512)];
            for i in 0..4 {
                blocks.push(named(&format!("block_{}", i + 1), Block::Conv(ConvBn::new(plan[i], plan[i + 1], 3, 1, true, &mut r))));
            }
            let flat = plan[4] * (h / 16) * (w / 16);
            let hidden = cfg.ch(512);
            blocks.push(named(
                "head",
                Block::Head { fc1: Linear::new(flat, hidden, true, &mut r), fc2: Linear::new(hidden, cfg.classes, true, &mut r) },
            ));
        }
        BackboneKind::Resnet18Small => {
            if h < 8 || w < 8 {
                return invalid("resnet18_small needs at least 8×8 inputs");
            }
            let c = [cfg.ch(64), cfg.ch(128), cfg.ch(256), cfg.ch(512)];
            blocks.push(named("stem", Block::Stem(ConvBn::new(3, c[0], 3, 1, false, &mut r))));
            let mut cin = c[0];
            for (s, &cout) in c.iter().enumerate() {
                let stride = if s == 0 { 1 } else { 2 };
                blocks.push(named(&format!("stage_{}a", s + 1), basic(cin, cout, stride, &mut r)));
                blocks.push(named(&format!("stage_{}b", s + 1), basic(cout, cout, 1, &mut r)));
                cin = cout;
            }
            blocks.push(named("head", Block::PoolHead { fc: Linear::new(cin, cfg.classes, true, &mut r) }));
        }
    }
    let model =
        SplitModel { config: cfg.clone(), edge: Stack::default(), cloud: Stack { blocks }, split_point: String::new(), defense: None };
    split_at(model, cfg.kind.default_split())
}

/// Re-partitions a plain backbone after the named block (or stage).
pub fn split_at(model: SplitModel, split_point: &str) -> Result<SplitModel> {
    if model.defense.is_some() {
        return invalid("a SiftFunnel model cannot be re-split");
    }
    let mut all = model.edge.blocks;
    all.extend(model.cloud.blocks);
    // stage names resolve to their last block
    let target = match (model.config.kind, split_point) {
        (BackboneKind::Resnet18Small, p) if p.starts_with("stage_") && p.len() == 7 => format!("{p}b"),
        _ => split_point.to_string(),
    };
    let Some(pos) = all.iter().position(|b| b.name == target && !b.block.is_head()) else {
        let valid: Vec<&str> = all.iter().filter(|b| !b.block.is_head()).map(|b| b.name.as_str()).collect();
        return invalid(format!("'{split_point}' is not an inter-block boundary; valid points: {}", valid.join(", ")));
    };
    let cloud = all.split_off(pos + 1);
    Ok(SplitModel {
        config: model.config,
        edge: Stack { blocks: all },
        cloud: Stack { blocks: cloud },
        split_point: split_point.to_string(),
        defense: None,
    })
}

/// Replaces the final edge block with attention + funnel + attention; the
/// replaced block moves to the cloud behind a channel-compensation module.
pub fn build_siftfunnel_edge(base: SplitModel, spec: &DefenseSpec) -> Result<SplitModel> {
    spec.validate()?;
    if base.defense.is_some() {
        return invalid("model already carries a SiftFunnel edge");
    }
    let mut edge = base.edge.blocks;
    let mut cloud = base.cloud.blocks;
    let mut r = rng(base.config.seed ^ 0x5157_F00D);
    let input = (3, base.config.resolution.0, base.config.resolution.1);
    let mut prefix = Vec::new();
    if spec.funnel {
        if edge.len() < 2 {
            return invalid("the funnel replaces the last edge block, so the edge needs at least two blocks");
        }
        let moved = edge.pop().expect("checked");
        prefix.push(moved);
    }
    let (c, h, w) = Stack { blocks: edge.clone() }.out_shape(input);
    if spec.attention_pre {
        edge.push(named(
            "attention_pre",
            Block::AttentionPre { se: SqueezeExcite::new(c, &mut r), triplet: TripletAttention::new(&mut r) },
        ));
    }
    let mut out_c = c;
    if spec.funnel {
        let plan = spec.funnel_plan(c)?;
        let mid_stride = if spec.spatial_reduction { 2 } else { 1 };
        if spec.spatial_reduction && (h % 2 != 0 || w % 2 != 0) {
            return invalid("spatial reduction needs an even feature size");
        }
        let layers = vec![
            ConvBn::new(c, plan[0], 1, 1, true, &mut r),
            ConvBn::new(plan[0], plan[1], 3, mid_stride, true, &mut r),
            ConvBn::new(plan[1], plan[2], 5, 1, true, &mut r),
        ];
        edge.push(named("funnel", Block::Funnel { layers }));
        out_c = plan[2];
    }
    if spec.attention_post {
        edge.push(named("attention_post", Block::AttentionPost { se: SqueezeExcite::new(out_c, &mut r), cbam: Cbam::new(out_c, &mut r) }));
    }
    if spec.funnel {
        let restore = spec.compensation_channels.unwrap_or(c);
        if restore != c {
            return invalid(format!("compensation must restore {c} channels, got {restore}"));
        }
        let hidden = c.div_ceil(4);
        let up = if spec.spatial_reduction { 2 } else { 1 };
        prefix.insert(
            0,
            named(
                "compensation",
                Block::Compensation {
                    up,
                    c1: Conv2d::new(out_c, hidden, 1, 1, 0, true, &mut r),
                    c2: Conv2d::new(hidden, c, 1, 1, 0, true, &mut r),
                },
            ),
        );
        prefix.append(&mut cloud);
        cloud = prefix;
    }
    Ok(SplitModel {
        config: base.config,
        edge: Stack { blocks: edge },
        cloud: Stack { blocks: cloud },
        split_point: base.split_point,
        defense: Some(spec.clone()),
    })
}

/// Count of trainable scalars.
pub fn param_count(m: &dyn Module) -> usize {
    m.param_count()
}

impl SplitModel {
    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (3, self.config.resolution.0, self.config.resolution.1)
    }

    /// Shape `(c, h, w)` of the edge output.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.edge.out_shape(self.input_shape())
    }

    pub fn has_compensation(&self) -> bool {
        matches!(self.cloud.blocks.first(), Some(Named { block: Block::Compensation { .. }, .. }))
    }

    pub fn forward_edge<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        self.edge.forward(tape, x, train)
    }

    pub fn forward_cloud<'t>(&self, tape: &'t Tape, z: Var<'t>, train: bool) -> Var<'t> {
        self.cloud.forward(tape, z, train)
    }

    /// Full classifier as one chain, without exposing the boundary.
    pub fn full_forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        self.edge.blocks.iter().chain(&self.cloud.blocks).fold(x, |h, b| b.block.forward(tape, h, train))
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        let tape = Tape::no_grad();
        let z = self.forward_edge(&tape, tape.constant(x.clone()), false);
        (*self.forward_cloud(&tape, z, false).value()).clone()
    }

    /// Eval-mode logits computed from transmitted features.
    pub fn cloud_logits(&self, z: &FeatureMap) -> Tensor {
        let tape = Tape::no_grad();
        (*self.forward_cloud(&tape, tape.constant(z.values().clone()), false).value()).clone()
    }

    /// Applies BN running-statistic updates recorded on `tape`.
    pub fn commit_buffers(&mut self, tape: &Tape) {
        self.apply_buffer_updates(tape);
    }
}

impl Module for SplitModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.edge.visit(&join(prefix, "edge"), f);
        self.cloud.visit(&join(prefix, "cloud"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.edge.visit_mut(&join(prefix, "edge"), f);
        self.cloud.visit_mut(&join(prefix, "cloud"), f);
    }
}

/// The activation an interceptor captures at `point`, at float32 wire precision.
pub fn tap(model: &SplitModel, x: &Tensor, point: TapPoint) -> Result<FeatureMap> {
    let (c, h, w) = model.input_shape();
    if x.ndim() != 4 || x.shape()[1..] != [c, h, w] {
        return invalid(format!("input {:?} does not match model input (n, {c}, {h}, {w})", x.shape()));
    }
    let tape = Tape::no_grad();
    let mut z = model.forward_edge(&tape, tape.constant(x.clone()), false);
    if point == TapPoint::PostCompensation {
        if !model.has_compensation() {
            return invalid("post_compensation tap needs a model with a compensation module");
        }
        let wire = tape.constant(z.value().round_f32());
        z = model.cloud.blocks[0].block.forward(&tape, wire, false);
    }
    FeatureMap::new(z.value().round_f32())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    fn small(kind: BackboneKind) -> SplitModel {
        build_backbone(&BackboneConfig::new(kind, 10, (32, 32)).with_width(1.0 / 16.0).with_seed(3)).unwrap()
    }

    #[test]
    fn published_edge_parameter_counts() {
        let cnn = build_backbone(&BackboneConfig::new(BackboneKind::BaseCnn, 10, (64, 64))).unwrap();
        assert_eq!(cnn.edge.param_count(), 299_520);
        let res = build_backbone(&BackboneConfig::new(BackboneKind::Resnet18Small, 10, (64, 64))).unwrap();
        assert_eq!(res.edge.param_count(), 149_824);
    }

    #[test]
    fn siftfunnel_edge_is_lightweight() {
        let cnn = build_backbone(&BackboneConfig::new(BackboneKind::BaseCnn, 10, (64, 64))).unwrap();
        let base = cnn.edge.param_count();
        let sf = build_siftfunnel_edge(cnn, &DefenseSpec::default()).unwrap();
        let n = sf.edge.param_count();
        assert!((13_420..=16_402).contains(&n), "{n}");
        assert!(base as f64 / n as f64 >= 15.0);
        assert_eq!(sf.feature_shape(), (2, 32, 32));
    }

    #[test]
    fn unknown_backbone_and_bad_split_rejected() {
        assert!(BackboneKind::parse("vgg16").is_err());
        assert!(split_at(small(BackboneKind::BaseCnn), "block_2.conv").is_err());
        assert!(split_at(small(BackboneKind::BaseCnn), "head").is_err());
    }

    #[test]
    fn split_after_last_block_leaves_head_only() {
        let m = split_at(small(BackboneKind::BaseCnn), "block_4").unwrap();
        assert_eq!(m.edge.names(), ["block_1", "block_2", "block_3", "block_4"]);
        assert_eq!(m.cloud.names(), ["head"]);
        let r = split_at(small(BackboneKind::Resnet18Small), "stage_4").unwrap();
        assert_eq!(r.cloud.names(), ["head"]);
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        for kind in [BackboneKind::BaseCnn, BackboneKind::Resnet18Small] {
            let m = small(kind);
            let l = m.logits(&Tensor::zeros(vec![1, 3, 32, 32]));
            assert_eq!(l.shape(), &[1, 10]);
            assert!(l.all_finite());
        }
    }

    #[test]
    fn tap_shapes_and_determinism() {
        let cnn = build_backbone(&BackboneConfig::new(BackboneKind::BaseCnn, 10, (64, 64)).with_width(0.0625)).unwrap();
        let x = randn(&[4, 3, 64, 64], 1).map(|v| v.abs().min(1.0));
        let z = tap(&cnn, &x, TapPoint::EdgeOutput).unwrap();
        assert_eq!(z.shape(), [4, 16, 16, 16]);
        assert!(tap(&cnn, &x, TapPoint::PostCompensation).is_err());
        let sf = build_siftfunnel_edge(cnn, &DefenseSpec::default()).unwrap();
        let a = tap(&sf, &x, TapPoint::EdgeOutput).unwrap();
        let b = tap(&sf, &x, TapPoint::EdgeOutput).unwrap();
        assert_eq!(a.values().data(), b.values().data());
        let pc = tap(&sf, &x, TapPoint::PostCompensation).unwrap();
        assert_eq!(pc.shape()[1], 8);
    }

    #[test]
    fn siftfunnel_composes_and_validates() {
        let sf = build_siftfunnel_edge(small(BackboneKind::BaseCnn), &DefenseSpec::default()).unwrap();
        let x = randn(&[3, 3, 32, 32], 2);
        let l = sf.logits(&x);
        assert_eq!(l.shape(), &[3, 10]);
        assert!(l.all_finite());
        let bad = DefenseSpec { funnel_channels: vec![4, 2, 0], ..DefenseSpec::default() };
        assert!(build_siftfunnel_edge(small(BackboneKind::BaseCnn), &bad).is_err());
        let wide = DefenseSpec { funnel_channels: vec![64, 16, 2], ..DefenseSpec::default() };
        assert!(build_siftfunnel_edge(small(BackboneKind::BaseCnn), &wide).is_err());
    }

    #[test]
    fn spatially_reducing_funnel() {
        let spec = DefenseSpec { spatial_reduction: true, ..DefenseSpec::default() };
        let sf = build_siftfunnel_edge(small(BackboneKind::BaseCnn), &spec).unwrap();
        assert_eq!(sf.feature_shape(), (10, 8, 8));
        assert!(sf.logits(&randn(&[2, 3, 32, 32], 4)).all_finite());
    }

    #[test]
    fn resnet_stage_alias() {
        let m = split_at(small(BackboneKind::Resnet18Small), "stage_2").unwrap();
        assert_eq!(m.edge.names().last(), Some(&"stage_2b"));
        let m = split_at(m, "stage_2a").unwrap();
        assert_eq!(m.cloud.names()[0], "stage_2b");
    }

    fn all_points() -> Vec<(BackboneKind, &'static str)> {
        let mut v: Vec<_> = ["block_1", "block_2", "block_3", "block_4"].iter().map(|p| (BackboneKind::BaseCnn, *p)).collect();
        v.extend(["stem", "stage_1a", "stage_1", "stage_2", "stage_3b", "stage_4"].iter().map(|p| (BackboneKind::Resnet18Small, *p)));
        v
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn composition_matches_full_forward(point in 0usize..10, seed in 0u64..100) {
            let (kind, p) = all_points()[point];
            let m = split_at(small(kind), p).unwrap();
            let x = randn(&[2, 3, 32, 32], seed);
            let tape = Tape::no_grad();
            let full = m.full_forward(&tape, tape.constant(x.clone()), false).value();
            prop_assert!(full.max_abs_diff(&m.logits(&x)) < 1e-6);
            let total = {
                let fresh = small(kind);
                fresh.edge.param_count() + fresh.cloud.param_count()
            };
            prop_assert_eq!(m.edge.param_count() + m.cloud.param_count(), total);
        }

        #[test]
        fn funnel_plan_is_non_increasing(c in 1usize..600, reduce in any::<bool>()) {
            let spec = DefenseSpec { spatial_reduction: reduce, ..DefenseSpec::default() };
            let p = spec.funnel_plan(c).unwrap();
            prop_assert!(p[0] >= p[1] && p[1] >= p[2] && p[2] >= 1);
        }
    }

    #[test]
    fn edge_and_cloud_share_no_parameters() {
        let sf = build_siftfunnel_edge(small(BackboneKind::BaseCnn), &DefenseSpec::default()).unwrap();
        let mut ids = std::collections::HashSet::new();
        sf.edge.visit("", &mut |_, p| {
            ids.insert(p.uid());
        });
        sf.cloud.visit("", &mut |_, p| assert!(!ids.contains(&p.uid())));
    }
}
