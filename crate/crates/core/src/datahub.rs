//! Image datasets: CIFAR-10 binary batches, class-per-folder PNG trees,
//! seeded stratified splitting and a synthetic blob generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sf_nn::{rng, Tensor};

use crate::error::{invalid, Error, Result};

const CIFAR_FILES: [&str; 6] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];
const CIFAR_RECORD: usize = 3073;
const CIFAR_PER_FILE: usize = 10_000;

#[derive(Clone, Debug)]
enum Pixels {
    /// Raw bytes; value = byte / 255.
    Bytes(Vec<u8>),
    Float(Vec<f32>),
}

/// Images with integer labels. Pixels are kept channel-major (`C×H×W` per
/// image) with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pixels: Pixels,
    labels: Vec<usize>,
    classes: usize,
    channels: usize,
    resolution: (usize, usize),
}

impl ImageDataset {
    /// Builds a dataset from an `(n, c, h, w)` tensor.
    pub fn from_tensor(images: &Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return invalid(format!("images must be (n, c, h, w), got {s:?}"));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("pixel values must lie in [0, 1]");
        }
        let data = images.data().iter().map(|&v| v as f32).collect();
        Self::checked(Pixels::Float(data), labels, classes, s[1], (s[2], s[3]))
    }

    fn checked(pixels: Pixels, labels: Vec<usize>, classes: usize, channels: usize, resolution: (usize, usize)) -> Result<Self> {
        let per = channels * resolution.0 * resolution.1;
        let len = match &pixels {
            Pixels::Bytes(b) => b.len(),
            Pixels::Float(f) => f.len(),
        };
        if per == 0 || len != per * labels.len() {
            return invalid(format!("{} labels but {len} pixel values of {per} per image", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return invalid(format!("label {bad} not below class count {classes}"));
        }
        Ok(Self { pixels, labels, classes, channels, resolution })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn per_image(&self) -> usize {
        self.channels * self.resolution.0 * self.resolution.1
    }

    /// Stacks the selected images into an `(n, c, h, w)` tensor.
    pub fn images(&self, idx: &[usize]) -> Tensor {
        let per = self.per_image();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let r = i * per..(i + 1) * per;
            match &self.pixels {
                Pixels::Bytes(b) => out.extend(b[r].iter().map(|&p| p as f64 / 255.0)),
                Pixels::Float(f) => out.extend(f[r].iter().map(|&p| p as f64)),
            }
        }
        let (h, w) = self.resolution;
        Tensor::new(vec![idx.len(), self.channels, h, w], out).expect("consistent shape")
    }

    pub fn all_images(&self) -> Tensor {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.images(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> ImageDataset {
        let per = self.per_image();
        let pixels = match &self.pixels {
            Pixels::Bytes(b) => Pixels::Bytes(idx.iter().flat_map(|&i| b[i * per..(i + 1) * per].iter().copied()).collect()),
            Pixels::Float(f) => Pixels::Float(idx.iter().flat_map(|&i| f[i * per..(i + 1) * per].iter().copied()).collect()),
        };
        ImageDataset {
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            channels: self.channels,
            resolution: self.resolution,
        }
    }

    /// Contiguous batches of indices, shuffled by `seed` when given.
    pub fn batches(&self, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = seed {
            idx.shuffle(&mut rng(s));
        }
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Nearest-neighbour resize of one channel-major byte image.
fn resize_nearest(src: &[u8], c: usize, (sh, sw): (usize, usize), (th, tw): (usize, usize), out: &mut Vec<u8>) {
    for ch in 0..c {
        for y in 0..th {
            let sy = y * sh / th;
            for x in 0..tw {
                let sx = x * sw / tw;
                out.push(src[(ch * sh + sy) * sw + sx]);
            }
        }
    }
}

/// Reads the six CIFAR-10 binary batches (50k train then 10k test) from `root`.
pub fn load_cifar10(root: &Path, target: (usize, usize)) -> Result<ImageDataset> {
    load_cifar10_limited(root, target, None)
}

/// As [`load_cifar10`], keeping at most `limit` records (in file order).
pub fn load_cifar10_limited(root: &Path, target: (usize, usize), limit: Option<usize>) -> Result<ImageDataset> {
    if target.0 == 0 || target.1 == 0 {
        return invalid("target resolution must be positive");
    }
    let missing: Vec<&str> = CIFAR_FILES.iter().copied().filter(|f| !root.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion { file: root.to_path_buf(), reason: format!("missing CIFAR-10 batch files: {}", missing.join(", ")) });
    }
    let limit = limit.unwrap_or(usize::MAX);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in CIFAR_FILES {
        if labels.len() >= limit {
            break;
        }
        let path = root.join(name);
        let bytes = fs::read(&path)?;
        if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
            if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
                return Err(Error::Ingestion {
                    file: path,
                    reason: format!("{} bytes is not a whole number of 3073-byte records", bytes.len()),
                });
            }
            log::warn!("{}: {} records instead of {CIFAR_PER_FILE}; proceeding", path.display(), bytes.len() / CIFAR_RECORD);
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            if labels.len() >= limit {
                break;
            }
            if rec[0] >= 10 {
                return Err(Error::Ingestion { file: path.clone(), reason: format!("label byte {} out of range", rec[0]) });
            }
            labels.push(rec[0] as usize);
            resize_nearest(&rec[1..], 3, (32, 32), target, &mut pixels);
        }
    }
    ImageDataset::checked(Pixels::Bytes(pixels), labels, 10, 3, target)
}

/// Loads `root/<class>/*.png`; classes are the sorted subdirectory names.
pub fn load_image_folder(root: &Path, target: (usize, usize)) -> Result<(ImageDataset, Vec<String>)> {
    let ingest = |file: PathBuf, reason: String| Error::Ingestion { file, reason };
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| ingest(root.to_path_buf(), e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(ingest(root.to_path_buf(), "no class subdirectories".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (k, dir) in class_dirs.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f).map_err(|e| ingest(f.clone(), e.to_string()))?.to_rgb8();
            let (w, h) = img.dimensions();
            let raw = img.into_raw();
            let (h, w) = (h as usize, w as usize);
            let mut planar = vec![0u8; raw.len()];
            for (i, px) in raw.chunks(3).enumerate() {
                for c in 0..3 {
                    planar[c * h * w + i] = px[c];
                }
            }
            resize_nearest(&planar, 3, (h, w), target, &mut pixels);
            labels.push(k);
        }
    }
    let classes = names.len();
    Ok((ImageDataset::checked(Pixels::Bytes(pixels), labels, classes, 3, target)?, names))
}

/// Fractions of the dataset assigned to each split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub test_frac: f64,
    pub attacker_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_frac, self.test_frac, self.attacker_frac];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return invalid(format!("split fractions must lie in [0, 1], got {f:?}"));
        }
        if f.iter().sum::<f64>() > 1.0 + 1e-9 {
            return invalid(format!("split fractions sum to {} > 1", f.iter().sum::<f64>()));
        }
        Ok(())
    }

    /// Split sizes for `n` samples: floors of each fraction, with the rounding
    /// remainder of the covered total going to train.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let fl = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let covered = fl(self.train_frac + self.test_frac + self.attacker_frac).min(n);
        let test = fl(self.test_frac);
        let att = fl(self.attacker_frac);
        [covered.saturating_sub(test + att), test, att]
    }
}

/// Splits of one dataset, plus the indices each was drawn from.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: ImageDataset,
    pub test: ImageDataset,
    pub attacker: ImageDataset,
    pub indices: [Vec<usize>; 3],
}

/// Rounds the class × split table of exact proportional counts so that every
/// entry is the floor or ceiling of its exact value while row sums (class
/// sizes) and column sums (split sizes) are preserved.
fn controlled_rounding(class_counts: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = class_counts.iter().sum();
    let k = class_counts.len();
    let s = sizes.len();
    let mut table = vec![vec![0usize; s]; k];
    let mut frac = vec![vec![false; s]; k];
    for (i, &c) in class_counts.iter().enumerate() {
        for (j, &sz) in sizes.iter().enumerate() {
            let num = c * sz;
            table[i][j] = num / n.max(1);
            frac[i][j] = n > 0 && num % n != 0;
        }
    }
    let mut row_need: Vec<usize> = (0..k).map(|i| class_counts[i] - table[i].iter().sum::<usize>()).collect();
    let mut col_need: Vec<usize> = (0..s).map(|j| sizes[j] - (0..k).map(|i| table[i][j]).sum::<usize>()).collect();
    // bipartite flow: each fractional cell may take one extra unit
    let mut used = vec![vec![false; s]; k];
    while let Some(src) = (0..k).find(|&i| row_need[i] > 0) {
        // BFS over alternating paths: row -(unused frac cell)-> col -(used cell)-> row
        let mut prev_col: Vec<Option<usize>> = vec![None; s];
        let mut prev_row: Vec<Option<usize>> = vec![None; k];
        let mut seen_row = vec![false; k];
        seen_row[src] = true;
        let mut queue = std::collections::VecDeque::from([src]);
        let mut sink = None;
        while let Some(r) = queue.pop_front() {
            for c in 0..s {
                if frac[r][c] && !used[r][c] && prev_col[c].is_none() {
                    prev_col[c] = Some(r);
                    if col_need[c] > 0 {
                        sink = Some(c);
                        break;
                    }
                    for r2 in 0..k {
                        if used[r2][c] && !seen_row[r2] {
                            seen_row[r2] = true;
                            prev_row[r2] = Some(c);
                            queue.push_back(r2);
                        }
                    }
                }
            }
            if sink.is_some() {
                break;
            }
        }
        let Some(mut c) = sink else { unreachable!("integral row and column sums always admit a controlled rounding") };
        col_need[c] -= 1;
        row_need[src] -= 1;
        loop {
            let r = prev_col[c].expect("path");
            used[r][c] = true;
            if r == src {
                break;
            }
            let c2 = prev_row[r].expect("path");
            used[r][c2] = false;
            c = c2;
        }
    }
    for i in 0..k {
        for j in 0..s {
            table[i][j] += used[i][j] as usize;
        }
    }
    table
}

/// Stratified, seeded three-way split.
pub fn make_splits(ds: &ImageDataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = ds.len();
    let [tr, te, at] = spec.sizes(n);
    let sizes = [tr, te, at, n - tr - te - at];
    let counts = ds.class_counts();
    let table = controlled_rounding(&counts, &sizes);
    let mut r = rng(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (k, row) in table.iter().enumerate() {
        let mut members: Vec<usize> = (0..n).filter(|&i| ds.labels[i] == k).collect();
        members.shuffle(&mut r);
        let mut at = 0;
        for (j, &take) in row.iter().take(3).enumerate() {
            parts[j].extend_from_slice(&members[at..at + take]);
            at += take;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(Splits { train: ds.subset(&parts[0]), test: ds.subset(&parts[1]), attacker: ds.subset(&parts[2]), indices: parts })
}

/// Class-conditioned Gaussian-blob images.
///
/// Each class owns a blob position on a ring around the image centre and a
/// colour; samples jitter both, vary blob width and brightness, and add a
/// smooth background, a faint distractor blob and faint gratings.
pub fn synth_dataset(n: usize, resolution: (usize, usize), classes: usize, seed: u64) -> Result<ImageDataset> {
    if classes == 0 || n < classes {
        return invalid(format!("need at least one sample per class: n={n}, K={classes}"));
    }
    let (h, w) = resolution;
    if h < 4 || w < 4 {
        return invalid("synthetic images need at least 4×4 pixels");
    }
    let mut r = rng(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut r);
    let palette: Vec<[f64; 3]> = (0..classes)
        .map(|k| {
            let hue = k as f64 / classes as f64 * std::f64::consts::TAU;
            [0, 1, 2].map(|c| 0.55 + 0.45 * (hue - c as f64 * std::f64::consts::TAU / 3.0).cos())
        })
        .collect();
    let scale = h.min(w) as f64;
    let mut pixels = Vec::with_capacity(n * 3 * h * w);
    for &k in &labels {
        let angle = k as f64 / classes as f64 * std::f64::consts::TAU;
        let cy = h as f64 / 2.0 + 0.28 * scale * angle.sin() + r.random_range(-0.06..0.06) * scale;
        let cx = w as f64 / 2.0 + 0.28 * scale * angle.cos() + r.random_range(-0.06..0.06) * scale;
        let sigma = r.random_range(0.09..0.15) * scale;
        let amp = r.random_range(0.65..0.95);
        let bg = [0, 1, 2].map(|_| r.random_range(0.05..0.25));
        let (gy, gx) = (r.random_range(-0.1..0.1), r.random_range(-0.1..0.1));
        let dy = r.random_range(0.0..h as f64);
        let dx = r.random_range(0.0..w as f64);
        let dcol = [0, 1, 2].map(|_| r.random_range(0.0..0.25));
        let dsig = 0.08 * scale;
        // faint low-frequency gratings stand in for texture
        let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
            .map(|_| {
                let theta = r.random_range(0.0..std::f64::consts::PI);
                let freq = r.random_range(0.5..2.5) * std::f64::consts::TAU / scale;
                let phase = r.random_range(0.0..std::f64::consts::TAU);
                (freq * theta.cos(), freq * theta.sin(), phase, [0, 1, 2].map(|_| r.random_range(0.0..0.04)))
            })
            .collect();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                    let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                    let e2 = (fy - dy).powi(2) + (fx - dx).powi(2);
                    let texture: f64 = gratings.iter().map(|(ky, kx, ph, a)| a[c] * (ky * fy + kx * fx + ph).sin()).sum();
                    let v = bg[c]
                        + gy * (fy / h as f64 - 0.5)
                        + gx * (fx / w as f64 - 0.5)
                        + amp * palette[k][c] * (-d2 / (2.0 * sigma * sigma)).exp()
                        + dcol[c] * (-e2 / (2.0 * dsig * dsig)).exp()
                        + texture;
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    ImageDataset::checked(Pixels::Float(pixels), labels, classes, 3, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_cifar(dir: &Path, records: usize) -> Vec<Vec<u8>> {
        let mut all = Vec::new();
        for (f, name) in CIFAR_FILES.iter().enumerate() {
            let mut bytes = Vec::new();
            for i in 0..records {
                let mut rec = vec![((i + f) % 10) as u8];
                rec.extend((0..3072).map(|p| ((p * 7 + i * 13 + f) % 256) as u8));
                bytes.extend_from_slice(&rec);
                all.push(rec);
            }
            fs::write(dir.join(name), bytes).unwrap();
        }
        all
    }

    #[test]
    fn cifar_native_resolution_is_bytes_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let recs = write_cifar(dir.path(), 3);
        let ds = load_cifar10(dir.path(), (32, 32)).unwrap();
        assert_eq!(ds.len(), 18);
        assert_eq!(ds.classes(), 10);
        let img = ds.images(&[4]);
        for (a, &b) in img.data().iter().zip(&recs[4][1..]) {
            assert_eq!(*a, b as f64 / 255.0);
        }
        assert_eq!(ds.labels()[4], recs[4][0] as usize);
    }

    #[test]
    fn cifar_upscale_repeats_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let recs = write_cifar(dir.path(), 1);
        let ds = load_cifar10(dir.path(), (64, 64)).unwrap();
        assert_eq!(ds.resolution(), (64, 64));
        let img = ds.images(&[0]);
        let src = &recs[0][1..];
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let v = img.data()[(c * 64 + y) * 64 + x];
                    assert_eq!(v, src[(c * 32 + y / 2) * 32 + x / 2] as f64 / 255.0);
                }
            }
        }
    }

    #[test]
    fn cifar_missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path(), (64, 64)).unwrap_err().to_string();
        for f in CIFAR_FILES {
            assert!(err.contains(f), "{err}");
        }
    }

    #[test]
    fn cifar_corrupt_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar(dir.path(), 1);
        fs::write(dir.path().join("data_batch_3.bin"), [1u8; 100]).unwrap();
        let err = load_cifar10(dir.path(), (32, 32)).unwrap_err().to_string();
        assert!(err.contains("data_batch_3.bin"), "{err}");
    }

    #[test]
    fn image_folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in ["cat", "dog"].iter().enumerate() {
            fs::create_dir(dir.path().join(name)).unwrap();
            let img = image::RgbImage::from_fn(4, 4, |x, y| image::Rgb([x as u8 * 10, y as u8 * 20, k as u8 * 255]));
            img.save(dir.path().join(name).join("a.png")).unwrap();
        }
        let (ds, names) = load_image_folder(dir.path(), (4, 4)).unwrap();
        assert_eq!(names, ["cat", "dog"]);
        assert_eq!(ds.labels(), &[0, 1]);
        let img = ds.images(&[1]);
        assert_eq!(img.data()[5], 10.0 / 255.0); // channel 0, y=1, x=1
        assert_eq!(img.data()[2 * 16], 1.0);
    }

    #[test]
    fn split_sizes_follow_floor_and_remainder_rule() {
        let spec = SplitSpec { train_frac: 0.666, test_frac: 0.167, attacker_frac: 0.167, seed: 7 };
        let sizes = spec.sizes(60_000);
        // independent arithmetic: 0.167·60000 = 10020 each, train takes the rest
        assert_eq!(sizes, [60_000 - 2 * 10_020, 10_020, 10_020]);
        assert_eq!(sizes.iter().sum::<usize>(), 60_000);
    }

    #[test]
    fn fractions_above_one_rejected() {
        let ds = synth_dataset(20, (8, 8), 2, 0).unwrap();
        let spec = SplitSpec { train_frac: 0.7, test_frac: 0.2, attacker_frac: 0.2, seed: 0 };
        assert!(make_splits(&ds, &spec).is_err());
    }

    #[test]
    fn all_train_split() {
        let ds = synth_dataset(30, (8, 8), 3, 1).unwrap();
        let spec = SplitSpec { train_frac: 1.0, test_frac: 0.0, attacker_frac: 0.0, seed: 0 };
        let s = make_splits(&ds, &spec).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.attacker.len()), (30, 0, 0));
    }

    #[test]
    fn synth_contract() {
        let a = synth_dataset(1000, (32, 32), 10, 0).unwrap();
        assert_eq!(a.len(), 1000);
        assert!(a.class_counts().iter().all(|&c| c == 100));
        let b = synth_dataset(1000, (32, 32), 10, 0).unwrap();
        assert_eq!(a.all_images().data(), b.all_images().data());
        assert_eq!(a.labels(), b.labels());
        assert!(synth_dataset(5, (32, 32), 10, 0).is_err());
    }

    fn labelled(labels: Vec<usize>, classes: usize) -> ImageDataset {
        let n = labels.len();
        ImageDataset::checked(Pixels::Float(vec![0.5; n]), labels, classes, 1, (1, 1)).unwrap()
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_stratified_and_deterministic(
            labels in prop::collection::vec(0usize..5, 1..300),
            a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let total = (a + b + c).max(1.0);
            let spec = SplitSpec { train_frac: a / total, test_frac: b / total, attacker_frac: c / total, seed };
            let ds = labelled(labels.clone(), 5);
            let s = make_splits(&ds, &spec).unwrap();
            let sizes = spec.sizes(ds.len());
            let mut seen = vec![false; ds.len()];
            for (j, part) in s.indices.iter().enumerate() {
                prop_assert_eq!(part.len(), sizes[j]);
                for &i in part {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            let counts = ds.class_counts();
            for (j, part) in s.indices.iter().enumerate() {
                for (k, &ck) in counts.iter().enumerate() {
                    let got = part.iter().filter(|&&i| labels[i] == k).count() as f64;
                    let exact = ck as f64 * sizes[j] as f64 / ds.len() as f64;
                    prop_assert!((got - exact).abs() < 1.0 + 1e-9, "class {} split {}: {} vs {}", k, j, got, exact);
                }
            }
            let again = make_splits(&ds, &spec).unwrap();
            prop_assert_eq!(&s.indices, &again.indices);
        }
    }
}
