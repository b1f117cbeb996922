//! Procedural Mask/Contrast/Generated triplets with known defects.
//!
//! A scene is a bright, smoothly varying background crossed by a dark vessel
//! tree: a roughly vertical trunk plus `B` side branches alternating left and
//! right, drawn with a Gaussian cross-section. The Mask shows the background
//! only. The Contrast shows the full tree, slightly warped. The Generated image
//! shows the unwarped tree with a contiguous stretch of the trunk erased, `k`
//! branches removed, `s` spurious branches added, and haze plus grain scaled by
//! the artifact amplitude `a`. Ground-truth scores are
//! closed-form functions of these defects:
//!
//! ```text
//! vmc = 100·(1 − b)
//! vbd = 100·max(0, B − k − 0.5·s) / B
//! oq  = 0.35·vmc + 0.35·vbd + 30·(1 − a)
//! ```

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::head::{level_of_score, render_instruction, Level, Metric};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid defect spec: {0}")]
    Spec(String),
    #[error("invalid dataset request: {0}")]
    Dataset(String),
    #[error("manifest {path}, row {row}: {message}")]
    Manifest {
        path: String,
        row: usize,
        message: String,
    },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Scene geometry shared by every triplet of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// True branches `B` on every trunk.
    pub branches: usize,
    /// Most spurious branches the dataset sampler will add. Rendering supports
    /// any count; the default dataset has none.
    pub max_spurious: usize,
    /// Gaussian cross-section σ of the trunk, in pixels.
    pub trunk_width: f64,
    pub branch_width: f64,
    /// Fraction of background brightness absorbed at a vessel centre line.
    pub vessel_depth: f64,
    /// Largest displacement of the Contrast warp, in pixels.
    pub warp: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            branches: 4,
            max_spurious: 0,
            trunk_width: 3.0,
            branch_width: 2.0,
            vessel_depth: 0.8,
            warp: 1.0,
        }
    }
}

/// Defects applied to the Generated image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    /// Fraction `b` of trunk arclength erased, as one contiguous stretch.
    pub break_fraction: f64,
    /// True branches `k` removed.
    pub branch_drop: usize,
    /// Spurious branches `s` added.
    pub spurious: usize,
    /// Artifact amplitude `a`.
    pub artifact: f64,
    pub seed: u64,
}

impl DefectSpec {
    pub fn clean(seed: u64) -> Self {
        DefectSpec {
            break_fraction: 0.0,
            branch_drop: 0,
            spurious: 0,
            artifact: 0.0,
            seed,
        }
    }

    pub fn validate(&self, branches: usize) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.break_fraction) {
            return Err(SynthError::Spec(format!(
                "break fraction {} outside [0, 1]",
                self.break_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.artifact) {
            return Err(SynthError::Spec(format!(
                "artifact amplitude {} outside [0, 1]",
                self.artifact
            )));
        }
        if self.branch_drop > branches {
            return Err(SynthError::Spec(format!(
                "cannot remove {} of {branches} branches",
                self.branch_drop
            )));
        }
        Ok(())
    }
}

/// Programmatic scores `[vmc, vbd, oq]` in `[0, 100]`.
pub fn ground_truth(spec: &DefectSpec, branches: usize) -> Result<[f64; 3], SynthError> {
    spec.validate(branches)?;
    if branches == 0 {
        return Err(SynthError::Spec("a tree needs at least one branch".into()));
    }
    let vmc = 100.0 * (1.0 - spec.break_fraction);
    let b = branches as f64;
    let vbd = 100.0 * (b - spec.branch_drop as f64 - 0.5 * spec.spurious as f64).max(0.0) / b;
    let oq = 0.35 * vmc + 0.35 * vbd + 30.0 * (1.0 - spec.artifact);
    Ok([vmc, vbd, oq])
}

/// 8-bit grayscale square image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn quantize(size: usize, values: &[f64]) -> Self {
        GrayImage {
            size,
            pixels: values
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>, SynthError> {
        let mut out = Vec::new();
        let side = self.size as u32;
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.pixels, side, side, image::ExtendedColorType::L8)
            .map_err(|e| SynthError::Image {
                path: "<memory>".into(),
                message: e.to_string(),
            })?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), SynthError> {
        fs::write(path, self.png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, SynthError> {
        let err = |message: String| SynthError::Image {
            path: path.display().to_string(),
            message,
        };
        let img = image::open(path)
            .map_err(|e| err(e.to_string()))?
            .to_luma8();
        if img.width() != img.height() {
            return Err(err(format!(
                "image is {}×{}, expected a square",
                img.width(),
                img.height()
            )));
        }
        Ok(GrayImage {
            size: img.width() as usize,
            pixels: img.into_raw(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub mask: GrayImage,
    pub contrast: GrayImage,
    pub generated: GrayImage,
    /// `[vmc, vbd, oq]`; absent for externally ingested triplets.
    pub gt: Option<[f64; 3]>,
    pub split: Split,
}

impl Triplet {
    pub fn image(&self, role: Role) -> &GrayImage {
        match role {
            Role::Mask => &self.mask,
            Role::Contrast => &self.contrast,
            Role::Generated => &self.generated,
        }
    }

    /// Target level per metric, from the ground-truth scores.
    pub fn levels(&self) -> Option<[Level; 3]> {
        let gt = self.gt?;
        Some(gt.map(|s| level_of_score(s).expect("ground truth lies in [0, 100]")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Mask,
    Contrast,
    Generated,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Mask, Role::Contrast, Role::Generated];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Mask => "mask",
            Role::Contrast => "contrast",
            Role::Generated => "generated",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown image role {s:?}"))
    }
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    sigma: f64,
}

impl Segment {
    fn distance2(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
    }
}

fn polyline(points: &[(f64, f64)], sigma: f64) -> Vec<Segment> {
    points
        .windows(2)
        .map(|w| Segment {
            a: w[0],
            b: w[1],
            sigma,
        })
        .collect()
}

/// Points are `(x, y)` in pixel units.
struct Tree {
    trunk: Vec<(f64, f64)>,
    branches: Vec<Vec<(f64, f64)>>,
}

const TRUNK_POINTS: usize = 128;
const BRANCH_POINTS: usize = 24;
/// Branch angle off the trunk, degrees.
const BRANCH_ANGLE: std::ops::Range<f64> = 75.0..90.0;
const BRANCH_LENGTH: std::ops::Range<f64> = 20.0..24.0;
/// Branches leave the trunk within this span of its length.
const BRANCH_SPAN: (f64, f64) = (0.25, 0.75);
const HAZE: f64 = 0.10;
const GRAIN_STD: f64 = 0.06;

fn trunk_path(size: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let amp1 = rng.random_range(2.0..4.0);
    let freq1 = rng.random_range(0.3..0.8);
    let phase1 = rng.random_range(0.0..2.0 * PI);
    let amp2 = rng.random_range(1.0..3.0);
    let freq2 = rng.random_range(1.0..2.0);
    let phase2 = rng.random_range(0.0..2.0 * PI);
    let centre = size / 2.0 + rng.random_range(-3.0..3.0);
    (0..=TRUNK_POINTS)
        .map(|i| {
            let t = i as f64 / TRUNK_POINTS as f64;
            let along = 2.0 + t * (size - 5.0);
            let across = centre
                + amp1 * (2.0 * PI * freq1 * t + phase1).sin()
                + amp2 * (2.0 * PI * freq2 * t + phase2).sin();
            (across, along)
        })
        .collect()
}

/// A side branch leaving the trunk at parameter `t`.
fn branch_path(trunk: &[(f64, f64)], t: f64, side: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let i = ((t * TRUNK_POINTS as f64).round() as usize).clamp(1, TRUNK_POINTS - 1);
    let start = trunk[i];
    let tangent = (
        trunk[i + 1].0 - trunk[i - 1].0,
        trunk[i + 1].1 - trunk[i - 1].1,
    );
    let heading = tangent.1.atan2(tangent.0);
    let mut angle = heading + side * rng.random_range(BRANCH_ANGLE).to_radians();
    let bend = rng.random_range(-0.3..0.3) / BRANCH_POINTS as f64;
    let length = rng.random_range(BRANCH_LENGTH);
    let step = length / BRANCH_POINTS as f64;
    let mut p = start;
    let mut out = vec![p];
    for _ in 0..BRANCH_POINTS {
        p = (p.0 + step * angle.cos(), p.1 + step * angle.sin());
        out.push(p);
        angle += bend;
    }
    out
}

fn sample_tree(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Tree {
    let size = config.image_size as f64;
    let trunk = trunk_path(size, rng);
    let b = config.branches;
    let first_side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let branches = (0..b)
        .map(|i| {
            let side = if i % 2 == 0 { first_side } else { -first_side };
            let t = BRANCH_SPAN.0
                + (BRANCH_SPAN.1 - BRANCH_SPAN.0) * (i as f64 + rng.random_range(0.2..0.8))
                    / b as f64;
            branch_path(&trunk, t, side, rng)
        })
        .collect();
    Tree { trunk, branches }
}

/// Keeps the trunk outside the arclength interval `[start, start + fraction)` of its total length.
fn erase_trunk(trunk: &[(f64, f64)], fraction: f64, start: f64, sigma: f64) -> Vec<Segment> {
    let segs = polyline(trunk, sigma);
    let lengths: Vec<f64> = segs
        .iter()
        .map(|s| (s.b.0 - s.a.0).hypot(s.b.1 - s.a.1))
        .collect();
    let total: f64 = lengths.iter().sum();
    let (lo, hi) = (start * total, (start + fraction) * total);
    let mut walked = 0.0;
    let mut kept = Vec::with_capacity(segs.len());
    for (seg, len) in segs.into_iter().zip(lengths) {
        let mid = walked + len / 2.0;
        walked += len;
        if fraction > 0.0 && mid >= lo && mid < hi {
            continue;
        }
        kept.push(seg);
    }
    kept
}

/// Vessel opacity in `[0, 1]` per pixel; `warp` maps a pixel centre to the scene point it shows.
fn vessel_density(
    size: usize,
    segments: &[Segment],
    warp: &dyn Fn(f64, f64) -> (f64, f64),
    slack: f64,
) -> Vec<f64> {
    let mut v = vec![0.0f64; size * size];
    for seg in segments {
        let reach = 3.5 * seg.sigma + slack;
        let x0 = (seg.a.0.min(seg.b.0) - reach).floor().max(0.0) as usize;
        let y0 = (seg.a.1.min(seg.b.1) - reach).floor().max(0.0) as usize;
        let x1 = ((seg.a.0.max(seg.b.0) + reach).ceil().max(0.0) as usize).min(size - 1);
        let y1 = ((seg.a.1.max(seg.b.1) + reach).ceil().max(0.0) as usize).min(size - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let inv = 1.0 / (2.0 * seg.sigma * seg.sigma);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = warp(x as f64, y as f64);
                let d = (-seg.distance2(p) * inv).exp();
                let cell = &mut v[y * size + x];
                if d > *cell {
                    *cell = d;
                }
            }
        }
    }
    v
}

/// Unquantized images of one scene, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: Vec<f64>,
    pub contrast: Vec<f64>,
    pub generated: Vec<f64>,
}

/// Renders the three images for `spec`. Deterministic in `spec.seed`.
pub fn render_scene(spec: &DefectSpec, config: &SynthConfig) -> Result<Scene, SynthError> {
    spec.validate(config.branches)?;
    let size = config.image_size;
    let n = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.005..0.015),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let base = 0.75;
    let background: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / n, (i / size) as f64 / n);
            base + waves
                .iter()
                .map(|&(c, fx, fy, ph)| c * (2.0 * PI * (fx * x + fy * y) + ph).cos())
                .sum::<f64>()
        })
        .collect();

    let tree = sample_tree(config, &mut rng);
    let full: Vec<Segment> = polyline(&tree.trunk, config.trunk_width)
        .into_iter()
        .chain(
            tree.branches
                .iter()
                .flat_map(|b| polyline(b, config.branch_width)),
        )
        .collect();

    let (wf, wa, wb) = (
        rng.random_range(0.5..1.5),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let amp = config.warp;
    let warp = move |x: f64, y: f64| {
        (
            x + amp * (2.0 * PI * wf * y / n + wa).sin(),
            y + amp * (2.0 * PI * wf * x / n + wb).sin(),
        )
    };
    let identity = |x: f64, y: f64| (x, y);
    let contrast_v = vessel_density(size, &full, &warp, amp);

    // defects
    let break_start = rng.random_range(0.0..=1.0 - spec.break_fraction);
    let mut order: Vec<usize> = (0..config.branches).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let dropped = &order[..spec.branch_drop];
    let mut generated_segments = erase_trunk(
        &tree.trunk,
        spec.break_fraction,
        break_start,
        config.trunk_width,
    );
    for (i, b) in tree.branches.iter().enumerate() {
        if !dropped.contains(&i) {
            generated_segments.extend(polyline(b, config.branch_width));
        }
    }
    for _ in 0..spec.spurious {
        let t = rng.random_range(BRANCH_SPAN.0..BRANCH_SPAN.1);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        generated_segments.extend(polyline(
            &branch_path(&tree.trunk, t, side, &mut rng),
            config.branch_width,
        ));
    }
    let generated_v = vessel_density(size, &generated_segments, &identity, 0.0);

    let depth = config.vessel_depth;
    let contrast: Vec<f64> = background
        .iter()
        .zip(&contrast_v)
        .map(|(bg, v)| (bg * (1.0 - depth * v)).clamp(0.0, 1.0))
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let a = spec.artifact;
    let generated: Vec<f64> = background
        .iter()
        .zip(&generated_v)
        .map(|(bg, v)| {
            let grain = GRAIN_STD * noise.sample(&mut rng);
            (bg * (1.0 - depth * v) + a * (HAZE + grain)).clamp(0.0, 1.0)
        })
        .collect();

    Ok(Scene {
        background,
        contrast,
        generated,
    })
}

/// Renders and quantizes one triplet.
pub fn generate_triplet(
    id: &str,
    spec: &DefectSpec,
    config: &SynthConfig,
) -> Result<Triplet, SynthError> {
    let gt = ground_truth(spec, config.branches)?;
    let scene = render_scene(spec, config)?;
    let size = config.image_size;
    Ok(Triplet {
        id: id.to_string(),
        mask: GrayImage::quantize(size, &scene.background),
        contrast: GrayImage::quantize(size, &scene.contrast),
        generated: GrayImage::quantize(size, &scene.generated),
        gt: Some(gt),
        split: Split::Train,
    })
}

// ---------------------------------------------------------------------------
// Dataset sampling

/// All `(k, s)` pairs whose VBD score falls in each level bin.
fn vbd_choices(config: &SynthConfig) -> [Vec<(usize, usize)>; 5] {
    let mut bins: [Vec<(usize, usize)>; 5] = Default::default();
    for k in 0..=config.branches {
        for s in 0..=config.max_spurious {
            let spec = DefectSpec {
                branch_drop: k,
                spurious: s,
                ..DefectSpec::clean(0)
            };
            let vbd = ground_truth(&spec, config.branches).expect("valid by construction")[1];
            bins[level_of_score(vbd).expect("in range").index()].push((k, s));
        }
    }
    bins
}

const MAX_DRAWS: usize = 10_000;
const SPURIOUS_WEIGHT: f64 = 0.2;

/// Draws defects so that every level is roughly equally frequent for each metric:
/// the OQ level is chosen first, then the defect parameters are redrawn (VMC
/// uniform, VBD level uniform, artifact uniform) until OQ lands in that level.
pub fn sample_defects(config: &SynthConfig, rng: &mut ChaCha8Rng) -> DefectSpec {
    let vbd_bins = vbd_choices(config);
    let filled: Vec<&Vec<(usize, usize)>> = vbd_bins.iter().filter(|b| !b.is_empty()).collect();
    let target = rng.random_range(0..5usize);
    let seed = rng.random::<u64>();
    let mut spec = DefectSpec::clean(seed);
    for _ in 0..MAX_DRAWS {
        let bin = filled[rng.random_range(0..filled.len())];
        let weights: Vec<f64> = bin
            .iter()
            .map(|&(_, s)| SPURIOUS_WEIGHT.powi(s as i32))
            .collect();
        let (k, s) = bin[rand_distr::weighted::WeightedIndex::new(&weights)
            .expect("positive weights")
            .sample(rng)];
        spec = DefectSpec {
            break_fraction: rng.random_range(0.0..=1.0),
            branch_drop: k,
            spurious: s,
            artifact: rng.random_range(0.0..=1.0),
            seed,
        };
        let oq = ground_truth(&spec, config.branches).expect("valid by construction")[2];
        if level_of_score(oq).expect("in range").index() == target {
            break;
        }
    }
    spec
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub triplets: Vec<Triplet>,
    pub config: SynthConfig,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter().filter(move |t| t.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

pub fn triplet_id(index: usize) -> String {
    format!("t{index:05}")
}

/// Samples defects and renders `n` triplets; the first `round(n·train_fraction)` form the train split.
pub fn build_dataset(
    n: usize,
    seed: u64,
    train_fraction: f64,
    config: &SynthConfig,
) -> Result<Dataset, SynthError> {
    if n < 10 {
        return Err(SynthError::Dataset(format!(
            "need at least 10 triplets, asked for {n}"
        )));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(SynthError::Dataset(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<DefectSpec> = (0..n).map(|_| sample_defects(config, &mut rng)).collect();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let triplets = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut t = generate_triplet(&triplet_id(i), spec, config)?;
            t.split = if i < n_train {
                Split::Train
            } else {
                Split::Test
            };
            Ok(t)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Dataset {
        triplets,
        config: *config,
    })
}

// ---------------------------------------------------------------------------
// Files

pub const MANIFEST_HEADER: [&str; 8] = [
    "id",
    "mask_path",
    "contrast_path",
    "generated_path",
    "gt_vmc",
    "gt_vbd",
    "gt_oq",
    "split",
];

/// One manifest row; image paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub paths: [PathBuf; 3],
    pub gt: Option<[f64; 3]>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, SynthError> {
        let display = path.display().to_string();
        let err = |row: usize, message: String| SynthError::Manifest {
            path: display.clone(),
            row,
            message,
        };
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(err(
                1,
                format!("expected header {}", MANIFEST_HEADER.join(",")),
            ));
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record?;
            let field = |j: usize| record.get(j).unwrap_or("").trim();
            let gt_fields = [field(4), field(5), field(6)];
            let gt = if gt_fields.iter().all(|f| f.is_empty()) {
                None
            } else {
                let mut out = [0.0; 3];
                for (o, f) in out.iter_mut().zip(gt_fields) {
                    let v: f64 = f
                        .parse()
                        .map_err(|_| err(row, format!("bad score {f:?}")))?;
                    if !(0.0..=100.0).contains(&v) {
                        return Err(err(row, format!("score {v} outside [0, 100]")));
                    }
                    *o = v;
                }
                Some(out)
            };
            let split = match field(7) {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(err(row, format!("unknown split {other:?}"))),
            };
            let id = field(0).to_string();
            if id.is_empty() {
                return Err(err(row, "empty id".into()));
            }
            rows.push(ManifestRow {
                id,
                paths: [field(1).into(), field(2).into(), field(3).into()],
                gt,
                split,
            });
        }
        let mut seen = std::collections::HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(err(i + 2, format!("duplicate id {}", r.id)));
            }
        }
        Ok(Manifest {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for r in &self.rows {
            let gt =
                r.gt.map_or([String::new(), String::new(), String::new()], |g| {
                    g.map(|v| v.to_string())
                });
            let p = |i: usize| r.paths[i].to_string_lossy().into_owned();
            w.write_record([
                r.id.clone(),
                p(0),
                p(1),
                p(2),
                gt[0].clone(),
                gt[1].clone(),
                gt[2].clone(),
                r.split.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow, role: Role) -> PathBuf {
        let p = &row.paths[role as usize];
        if p.is_absolute() {
            p.clone()
        } else {
            self.base.join(p)
        }
    }

    pub fn find(&self, id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Reads every referenced image.
    pub fn load(&self) -> Result<Vec<Triplet>, SynthError> {
        self.rows
            .par_iter()
            .map(|row| {
                let [mask, contrast, generated] =
                    Role::ALL.map(|role| GrayImage::load_png(&self.resolve(row, role)));
                let (mask, contrast, generated) = (mask?, contrast?, generated?);
                if mask.size != contrast.size || mask.size != generated.size {
                    return Err(SynthError::Image {
                        path: self.resolve(row, Role::Mask).display().to_string(),
                        message: format!("triplet {} mixes image sizes", row.id),
                    });
                }
                Ok(Triplet {
                    id: row.id.clone(),
                    mask,
                    contrast,
                    generated,
                    gt: row.gt,
                    split: row.split,
                })
            })
            .collect()
    }
}

pub fn image_file_name(id: &str, role: Role) -> String {
    format!("{id}_{}.png", role.as_str())
}

/// Writes `images/*.png`, `manifest.csv` and `instructions.jsonl` under `dir`.
/// Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path, seed: u64) -> Result<PathBuf, SynthError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    dataset.triplets.par_iter().try_for_each(|t| {
        Role::ALL.into_iter().try_for_each(|role| {
            t.image(role)
                .save_png(&images.join(image_file_name(&t.id, role)))
        })
    })?;
    let manifest = Manifest {
        base: dir.to_path_buf(),
        rows: dataset
            .triplets
            .iter()
            .map(|t| ManifestRow {
                id: t.id.clone(),
                paths: Role::ALL
                    .map(|role| PathBuf::from("images").join(image_file_name(&t.id, role))),
                gt: t.gt,
                split: t.split,
            })
            .collect(),
    };
    let path = dir.join("manifest.csv");
    manifest.write(&path)?;
    write_instructions(&dataset.triplets, &dir.join("instructions.jsonl"), seed)?;
    Ok(path)
}

/// One JSONL instruction record per triplet and metric, for triplets with ground truth.
pub fn write_instructions(triplets: &[Triplet], path: &Path, seed: u64) -> Result<(), SynthError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in triplets {
        let Some(levels) = t.levels() else { continue };
        for metric in Metric::ALL {
            let rec = render_instruction(metric, levels[metric.index()], &t.id, rng.random());
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}
