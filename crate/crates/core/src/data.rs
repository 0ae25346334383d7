//! Samples, directory loading, synthetic shapes, augmentation and splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use brau_tensor::{SplitMix64, Tensor};
use log::warn;

use crate::config::{AugmentConfig, DataConfig, SplitMode};
use crate::error::{BrauError, Result};
use crate::labels::LabelMap;
use crate::pnm::{self, Image};

/// `image` is `[H,W,C]` in `[0,1]`, `mask` is `[H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: LabelMap,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.mask.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.mask.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.last_dim()
    }
}

fn image_to_tensor(img: &Image, in_ch: usize) -> std::result::Result<Tensor<f32>, String> {
    let px = img.width * img.height;
    let data: Vec<f32> = match (img.channels, in_ch) {
        (a, b) if a == b => img.data.iter().map(|&v| v as f32 / 255.0).collect(),
        (1, 3) => img
            .data
            .iter()
            .flat_map(|&v| [v as f32 / 255.0; 3])
            .collect(),
        (3, 1) => img
            .data
            .chunks(3)
            .map(|p| (p[0] as f32 + p[1] as f32 + p[2] as f32) / (3.0 * 255.0))
            .collect(),
        (a, b) => return Err(format!("{a}-channel image cannot feed {b} input channels")),
    };
    debug_assert_eq!(data.len(), px * in_ch);
    Tensor::new(&[img.height, img.width, in_ch], data).map_err(|e| e.to_string())
}

fn tensor_to_image(t: &Tensor<f32>) -> Image {
    let (h, w, c) = (t.dim(0), t.dim(1), t.dim(2));
    let data = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    match c {
        3 => Image::rgb(w, h, data),
        _ => Image::gray(w, h, data),
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| BrauError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| BrauError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "pgm" | "ppm") {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// `[H,W,in_ch]` tensor in `[0,1]` from a PGM or PPM file.
pub fn read_image(path: &Path, in_ch: usize) -> Result<Tensor<f32>> {
    let img = pnm::read(path)?;
    image_to_tensor(&img, in_ch).map_err(|msg| BrauError::data(path, msg))
}

/// A PGM whose values are class indices below `num_classes`.
pub fn read_mask(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let m = pnm::read(path)?;
    if m.channels != 1 {
        return Err(BrauError::data(path, "mask must be a PGM"));
    }
    if let Some(&bad) = m.data.iter().find(|&&v| v as usize >= num_classes) {
        return Err(BrauError::data(
            path,
            format!("class index {bad} not below {num_classes}"),
        ));
    }
    LabelMap::new(&[m.height, m.width], m.data)
}

/// Reads `root/images/*.{ppm,pgm}` paired by basename with `root/masks/*.pgm`,
/// in lexicographic order.
pub fn load_dataset(root: &Path, in_ch: usize, num_classes: usize) -> Result<Vec<SegSample>> {
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    if let Some((id, path)) = masks.iter().find(|(id, _)| !images.contains_key(*id)) {
        return Err(BrauError::data(path, format!("mask `{id}` has no image")));
    }
    let mut out = Vec::with_capacity(images.len());
    for (id, ipath) in &images {
        let mpath = masks
            .get(id)
            .ok_or_else(|| BrauError::data(ipath, format!("image `{id}` has no mask")))?;
        let image = read_image(ipath, in_ch)?;
        let mask = read_mask(mpath, num_classes)?;
        if mask.dims() != &image.shape()[..2] {
            return Err(BrauError::data(
                mpath,
                format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.dims()[1],
                    mask.dims()[0],
                    image.dim(1),
                    image.dim(0)
                ),
            ));
        }
        out.push(SegSample {
            id: id.clone(),
            image,
            mask,
        });
    }
    Ok(out)
}

/// Writes samples in the layout [`load_dataset`] reads.
pub fn save_dataset(root: &Path, samples: &[SegSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| BrauError::io(&d, e))?;
    }
    for s in samples {
        let img = tensor_to_image(&s.image);
        let ext = if img.channels == 3 { "ppm" } else { "pgm" };
        pnm::write(&root.join("images").join(format!("{}.{ext}", s.id)), &img)?;
        let m = Image::gray(s.width(), s.height(), s.mask.data().to_vec());
        pnm::write(&root.join("masks").join(format!("{}.pgm", s.id)), &m)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Rect,
    Ellipse,
}

/// Base colour of class `c`; spread so classes differ in every channel.
fn class_colour(c: usize, k: usize, ch: usize) -> f32 {
    let t = c as f32 / k.max(1) as f32;
    match ch % 3 {
        0 => 0.25 + 0.7 * t,
        1 => 0.9 - 0.6 * t,
        _ => 0.2 + 0.7 * ((t * 2.0) % 1.0),
    }
}

/// Deterministic images of one to three non-overlapping shapes on a noisy
/// background, each shape a single foreground class.
pub fn synth_dataset(
    n: usize,
    hw: usize,
    in_ch: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SegSample>> {
    if num_classes < 2 {
        return Err(BrauError::Invalid(
            "synthetic data needs at least two classes".into(),
        ));
    }
    if hw < 8 {
        return Err(BrauError::Invalid(format!("synthetic side {hw} below 8")));
    }
    Ok((0..n)
        .map(|i| synth_sample(i, hw, in_ch, num_classes, seed))
        .collect())
}

fn synth_sample(i: usize, hw: usize, in_ch: usize, k: usize, seed: u64) -> SegSample {
    let mut rng = SplitMix64::derived(seed, 0x5EED, i as u64);
    let mut mask = vec![0u8; hw * hw];
    let wanted = rng.range_inclusive(1, 3);
    let mut placed = 0;
    'shapes: for _ in 0..wanted {
        for _attempt in 0..32 {
            let kind = [Shape::Disk, Shape::Rect, Shape::Ellipse][rng.below(3) as usize];
            let class = rng.range_inclusive(1, k - 1) as u8;
            let (lo, hi) = ((hw / 10).max(2), (hw / 5).max(3));
            let ry = rng.range_inclusive(lo, hi) as f64;
            let rx = match kind {
                Shape::Disk => ry,
                _ => rng.range_inclusive(lo, hi) as f64,
            };
            let cy = rng.range_inclusive(ry as usize, hw - 1 - ry as usize) as f64;
            let cx = rng.range_inclusive(rx as usize, hw - 1 - rx as usize) as f64;
            let inside = |y: usize, x: usize| {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                match kind {
                    Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    _ => dy * dy + dx * dx <= 1.0,
                }
            };
            // one pixel of clearance keeps shapes from touching
            let clash = (0..hw).any(|y| {
                (0..hw).any(|x| {
                    mask[y * hw + x] != 0
                        && (y.saturating_sub(1)..=(y + 1).min(hw - 1)).any(|yy| {
                            (x.saturating_sub(1)..=(x + 1).min(hw - 1)).any(|xx| inside(yy, xx))
                        })
                })
            });
            if clash {
                continue;
            }
            for y in 0..hw {
                for x in 0..hw {
                    if inside(y, x) {
                        mask[y * hw + x] = class;
                    }
                }
            }
            placed += 1;
            continue 'shapes;
        }
    }
    if placed < wanted {
        warn!("synthetic sample {i}: placed {placed} of {wanted} shapes at side {hw}");
    }
    let image = Tensor::from_fn(&[hw, hw, in_ch], |j| {
        let (p, ch) = (j / in_ch, j % in_ch);
        let base = match mask[p] {
            0 => 0.1,
            c => class_colour(c as usize, k, ch),
        };
        (base + 0.08 * rng.normal() as f32).clamp(0.0, 1.0)
    });
    SegSample {
        id: format!("synth{i:04}"),
        image,
        mask: LabelMap::new(&[hw, hw], mask).expect("mask size"),
    }
}

fn remap<T: Copy>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    f: impl Fn(usize, usize) -> (usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = f(y, x);
            debug_assert!(sy < h && sx < w);
            let s = (sy * w + sx) * c;
            out.extend_from_slice(&src[s..s + c]);
        }
    }
    out
}

/// Geometric transform applied to both image and mask: output `(y,x)` reads
/// source pixel `f(y,x)`.
fn warp(
    s: &SegSample,
    oh: usize,
    ow: usize,
    f: impl Fn(usize, usize) -> (usize, usize) + Copy,
) -> SegSample {
    let (h, w, c) = (s.height(), s.width(), s.channels());
    SegSample {
        id: s.id.clone(),
        image: Tensor::new(&[oh, ow, c], remap(s.image.data(), h, w, c, f, oh, ow))
            .expect("image size"),
        mask: LabelMap::new(&[oh, ow], remap(s.mask.data(), h, w, 1, f, oh, ow))
            .expect("mask size"),
    }
}

pub fn hflip(s: &SegSample) -> SegSample {
    let w = s.width();
    warp(s, s.height(), w, |y, x| (y, w - 1 - x))
}

pub fn vflip(s: &SegSample) -> SegSample {
    let h = s.height();
    warp(s, h, s.width(), |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by `quarters`·90°.
pub fn rot90(s: &SegSample, quarters: usize) -> SegSample {
    let (h, w) = (s.height(), s.width());
    match quarters % 4 {
        0 => s.clone(),
        1 => warp(s, w, h, |y, x| (x, w - 1 - y)),
        2 => warp(s, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => warp(s, w, h, |y, x| (h - 1 - x, y)),
    }
}

/// Zeroes a `side`×`side` square of the image at `(y,x)`; the mask is kept.
pub fn cutout(s: &SegSample, y: usize, x: usize, side: usize) -> SegSample {
    let (h, w, c) = (s.height(), s.width(), s.channels());
    let mut out = s.clone();
    let d = out.image.data_mut();
    for yy in y..(y + side).min(h) {
        for xx in x..(x + side).min(w) {
            let i = (yy * w + xx) * c;
            d[i..i + c].fill(0.0);
        }
    }
    out
}

/// Each transform fires independently with its probability, in the order
/// hflip, vflip, rotation, cutout.
pub fn augment(s: &SegSample, cfg: &AugmentConfig, rng: &mut SplitMix64) -> SegSample {
    let mut out = s.clone();
    if rng.bernoulli(cfg.p_hflip) {
        out = hflip(&out);
    }
    if rng.bernoulli(cfg.p_vflip) {
        out = vflip(&out);
    }
    if rng.bernoulli(cfg.p_rot) {
        out = rot90(&out, rng.range_inclusive(1, 3));
    }
    if rng.bernoulli(cfg.p_cutout) {
        let side_of = |f: f64| ((f * out.height().min(out.width()) as f64).round() as usize).max(1);
        let side = rng.range_inclusive(
            side_of(cfg.cutout_min_frac),
            side_of(cfg.cutout_max_frac).max(side_of(cfg.cutout_min_frac)),
        );
        let y = rng.range_inclusive(0, out.height().saturating_sub(side));
        let x = rng.range_inclusive(0, out.width().saturating_sub(side));
        out = cutout(&out, y, x, side);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Split of each id, in the order given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub ids: Vec<String>,
    pub splits: Vec<Split>,
}

impl Assignment {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// One `id<TAB>split` line per sample.
    pub fn to_text(&self) -> String {
        self.ids
            .iter()
            .zip(&self.splits)
            .map(|(id, s)| format!("{id}\t{}\n", s.name()))
            .collect()
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut ids = Vec::new();
        let mut splits = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let (id, s) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected id<TAB>split", n + 1))?;
            ids.push(id.to_string());
            splits.push(
                Split::parse(s.trim())
                    .ok_or_else(|| format!("line {}: unknown split `{s}`", n + 1))?,
            );
        }
        Ok(Self { ids, splits })
    }
}

/// Largest-remainder rounding of `fractions·n`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Seeded shuffle, then either fixed fractions (train, valid, test) or
/// `folds` contiguous validation folds of which `fold` is held out.
pub fn make_splits(ids: &[String], cfg: &DataConfig) -> Result<Assignment> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::derived(cfg.seed, 0x5917, 0).shuffle(&mut order);
    let mut splits = vec![Split::Train; n];
    match cfg.split_mode {
        SplitMode::Fixed => {
            let s: f64 = cfg.split_fractions.iter().sum();
            if (s - 1.0).abs() > 1e-9 || cfg.split_fractions.iter().any(|&f| f < 0.0) {
                return Err(BrauError::config(
                    "split_fractions",
                    format!("must be non-negative and sum to 1, sum is {s}"),
                ));
            }
            let c = apportion(n, &cfg.split_fractions);
            for (rank, &i) in order.iter().enumerate() {
                splits[i] = if rank < c[0] {
                    Split::Train
                } else if rank < c[0] + c[1] {
                    Split::Valid
                } else {
                    Split::Test
                };
            }
        }
        SplitMode::Kfold => {
            let folds = fold_members(n, cfg.folds, cfg.fold)?;
            for &rank in &folds {
                splits[order[rank]] = Split::Valid;
            }
        }
    }
    Ok(Assignment {
        ids: ids.to_vec(),
        splits,
    })
}

/// Shuffled ranks belonging to fold `fold` of `folds`, sizes differing by at most one.
fn fold_members(n: usize, folds: usize, fold: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(BrauError::config("folds", "need at least 2"));
    }
    if fold >= folds {
        return Err(BrauError::config(
            "fold",
            format!("{fold} not below {folds}"),
        ));
    }
    if n < folds {
        return Err(BrauError::Invalid(format!(
            "{n} samples cannot fill {folds} folds"
        )));
    }
    let (base, extra) = (n / folds, n % folds);
    let start = fold * base + fold.min(extra);
    let len = base + usize::from(fold < extra);
    Ok((start..start + len).collect())
}

/// Validation-fold index sets for every fold, as sample indices.
pub fn kfold_indices(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::derived(seed, 0x5917, 0).shuffle(&mut order);
    (0..folds)
        .map(|f| {
            Ok(fold_members(n, folds, f)?
                .into_iter()
                .map(|r| order[r])
                .collect())
        })
        .collect()
}

/// Stacks samples into an `[N,H,W,C]` image batch and `[N,H,W]` labels.
pub fn collate(samples: &[&SegSample]) -> Result<(Tensor<f32>, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| BrauError::Invalid("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(samples.len() * h * w * c);
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(BrauError::Invalid(format!(
                "sample {} is {:?}, batch expects {:?}",
                s.id,
                s.image.shape(),
                first.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    let images = Tensor::new(&[samples.len(), h, w, c], data)?;
    let masks = LabelMap::stack(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    Ok((images, masks))
}
