//! Evaluation: matching accuracy metrics, synthetic pairs and the benchmark runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature_io::load_image;
use crate::geometry::{self, dlt_homography, read_homography, Homography, PointPair};
use crate::pipeline::{match_images, PipelineConfig};
use crate::types::Image;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];
pub const MIN_SYNTHETIC_SIZE: usize = 64;
pub const REPORT_HEADER: &str = "# GCM v1 evaluation report";

#[derive(Debug, Clone, PartialEq)]
pub struct MmaResult {
    /// Fraction of correct pairs per threshold, in threshold order.
    pub accuracy: Vec<f64>,
    /// No pairs were given; every accuracy is 0.
    pub empty: bool,
}

/// Mean matching accuracy: the fraction of pairs with `|gt(a) - b| < t`.
pub fn mma(pairs: &[PointPair], gt: &Homography, thresholds: &[f64]) -> MmaResult {
    if pairs.is_empty() {
        return MmaResult {
            accuracy: vec![0.0; thresholds.len()],
            empty: true,
        };
    }
    let errors: Vec<f64> = pairs
        .iter()
        .map(|p| geometry::project(gt, p.a).map_or(f64::INFINITY, |q| (q - p.b).norm()))
        .collect();
    let accuracy = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64)
        .collect();
    MmaResult { accuracy, empty: false }
}

/// Mean distance between the image corners mapped by `est` and by `gt`.
pub fn corner_error(est: &Homography, gt: &Homography, size: (usize, usize)) -> f64 {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(w - 1.0, 0.0),
        Point2::new(0.0, h - 1.0),
        Point2::new(w - 1.0, h - 1.0),
    ];
    let mut total = 0.0;
    for c in corners {
        match (geometry::project(est, c), geometry::project(gt, c)) {
            (Ok(p), Ok(q)) => total += (p - q).norm(),
            _ => return f64::INFINITY,
        }
    }
    total / 4.0
}

/// Per threshold, whether the mean corner error is below it.
pub fn homography_accuracy(est: &Homography, gt: &Homography, size: (usize, usize), thresholds: &[f64]) -> Vec<bool> {
    let e = corner_error(est, gt, size);
    thresholds.iter().map(|&t| e < t).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticMode {
    /// Photometric change only; the ground truth is the identity.
    Illumination,
    /// Corner displacement up to 5% of the shorter side.
    SmallViewpoint,
    /// Corner displacement up to 15% of the shorter side.
    LargeViewpoint,
}

impl SyntheticMode {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticMode::Illumination => "illumination",
            SyntheticMode::SmallViewpoint => "small_vp",
            SyntheticMode::LargeViewpoint => "large_vp",
        }
    }

    fn max_displacement_fraction(self) -> f64 {
        match self {
            SyntheticMode::Illumination => 0.0,
            SyntheticMode::SmallViewpoint => 0.05,
            SyntheticMode::LargeViewpoint => 0.15,
        }
    }
}

impl FromStr for SyntheticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "illumination" => Ok(SyntheticMode::Illumination),
            "small_vp" => Ok(SyntheticMode::SmallViewpoint),
            "large_vp" => Ok(SyntheticMode::LargeViewpoint),
            _ => Err(Error::InvalidConfig(format!(
                "unknown mode {s:?} (expected illumination, small_vp or large_vp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub img_a: Image,
    pub img_b: Image,
    /// Maps A-coordinates to B-coordinates.
    pub gt: Homography,
    pub seed: u64,
}

/// Random perspective distortion of the image rectangle: each corner moves
/// by a vector drawn uniformly from a disc.
pub fn random_corner_homography(size: (usize, usize), max_fraction: f64, rng: &mut impl Rng) -> Result<Homography> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let radius = max_fraction * h.min(w);
    let corners = [
        Point2::new(0.0, 0.0),
        Point2::new(w - 1.0, 0.0),
        Point2::new(0.0, h - 1.0),
        Point2::new(w - 1.0, h - 1.0),
    ];
    let pairs: Vec<_> = corners
        .iter()
        .map(|&c| {
            let r = radius * rng.gen::<f64>().sqrt();
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            (c, Point2::new(c.x + r * theta.cos(), c.y + r * theta.sin()))
        })
        .collect();
    dlt_homography(&pairs)
}

pub fn synthetic_pair(base: &Image, mode: SyntheticMode, seed: u64) -> Result<SyntheticPair> {
    if base.height() < MIN_SYNTHETIC_SIZE || base.width() < MIN_SYNTHETIC_SIZE {
        return Err(Error::ImageTooSmall {
            height: base.height(),
            width: base.width(),
            min: MIN_SYNTHETIC_SIZE,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = (base.height(), base.width());
    match mode {
        SyntheticMode::Illumination => {
            let gamma = rng.gen_range(0.6f32..1.6);
            let gain = rng.gen_range(0.7f32..1.3);
            let img_b = base.map_values(|v| (gain * v.max(0.0).powf(gamma)).clamp(0.0, 1.0));
            Ok(SyntheticPair {
                img_a: base.clone(),
                img_b,
                gt: Homography::identity(),
                seed,
            })
        }
        _ => {
            let gt = random_corner_homography(size, mode.max_displacement_fraction(), &mut rng)?;
            let img_b = geometry::warp_image(base, &gt, size)?;
            Ok(SyntheticPair {
                img_a: base.clone(),
                img_b,
                gt,
                seed,
            })
        }
    }
}

fn value_noise_octave(h: usize, w: usize, spacing: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gh = h / spacing + 2;
    let gw = w / spacing + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        let gy = r / spacing;
        let ty = smooth((r % spacing) as f32 / spacing as f32);
        for c in 0..w {
            let gx = c / spacing;
            let tx = smooth((c % spacing) as f32 / spacing as f32);
            let v00 = grid[gy * gw + gx];
            let v01 = grid[gy * gw + gx + 1];
            let v10 = grid[(gy + 1) * gw + gx];
            let v11 = grid[(gy + 1) * gw + gx + 1];
            let top = v00 + (v01 - v00) * tx;
            let bottom = v10 + (v11 - v10) * tx;
            out[r * w + c] = top + (bottom - top) * ty;
        }
    }
    out
}

/// Grayscale texture in [0, 1]: a Brownian value-noise surface (octave
/// amplitude proportional to `spacing^1.5`) overlaid with random discs and
/// rectangles. Deterministic in `seed`.
pub fn procedural_texture(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f32; height * width];
    for spacing in [128usize, 64, 32, 16, 8, 4] {
        let amp = (spacing as f32 / 128.0).powf(1.5);
        for (a, v) in acc.iter_mut().zip(value_noise_octave(height, width, spacing, &mut rng)) {
            *a += amp * v;
        }
    }
    let (lo, hi) = acc.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    for v in &mut acc {
        *v = 0.1 + 0.8 * (*v - lo) / span;
    }

    let shapes = (height * width / 1024).max(8);
    for _ in 0..shapes {
        let cy = rng.gen_range(0.0..height as f32);
        let cx = rng.gen_range(0.0..width as f32);
        let size = rng.gen_range(2.0f32..(height.min(width) as f32 / 8.0).max(3.0));
        let level = rng.gen_range(0.0f32..1.0);
        let disc = rng.gen_bool(0.5);
        let r0 = (cy - size).floor().max(0.0) as usize;
        let r1 = ((cy + size).ceil() as usize).min(height);
        let c0 = (cx - size).floor().max(0.0) as usize;
        let c1 = ((cx + size).ceil() as usize).min(width);
        for r in r0..r1 {
            for c in c0..c1 {
                let (dy, dx) = (r as f32 - cy, c as f32 - cx);
                let inside = if disc { dy * dy + dx * dx <= size * size } else { dy.abs() <= size && dx.abs() <= size * 0.6 };
                if inside {
                    let a = &mut acc[r * width + c];
                    *a = 0.4 * *a + 0.6 * level;
                }
            }
        }
    }
    Image::new(height, width, 1, acc).expect("texture dimensions are consistent")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPair {
    pub name: String,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub homography: PathBuf,
}

impl DatasetPair {
    /// HPatches-style split of the pair, taken from its scene prefix.
    pub fn split(&self) -> Option<&'static str> {
        if self.name.starts_with("i_") {
            Some("illumination")
        } else if self.name.starts_with("v_") {
            Some("viewpoint")
        } else {
            None
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";

fn parse_manifest(dir: &Path, text: &str) -> Result<Vec<DatasetPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::MalformedDataset(format!(
                "{}:{}: expected `image_a image_b homography`",
                dir.join(MANIFEST_NAME).display(),
                n + 1
            )));
        }
        out.push(DatasetPair {
            name: format!("{}:{}", fields[0], fields[1]),
            image_a: dir.join(fields[0]),
            image_b: dir.join(fields[1]),
            homography: dir.join(fields[2]),
        });
    }
    Ok(out)
}

fn scene_pairs(scene: &Path, name: &str) -> Option<Vec<DatasetPair>> {
    let first = scene.join("1.ppm");
    if !first.is_file() {
        return None;
    }
    let pairs = (2..=6)
        .map(|i| DatasetPair {
            name: format!("{name}/1-{i}"),
            image_a: first.clone(),
            image_b: scene.join(format!("{i}.ppm")),
            homography: scene.join(format!("H_1_{i}")),
        })
        .filter(|p| p.image_b.is_file() || p.homography.is_file())
        .collect();
    Some(pairs)
}

/// Lists the image pairs of a dataset directory.
///
/// Either `manifest.txt` with `image_a image_b homography` per line (paths
/// relative to the directory), or scene subdirectories holding `1.ppm` to
/// `6.ppm` and `H_1_2` to `H_1_6`. Pairs are sorted by name.
pub fn discover_dataset(dir: impl AsRef<Path>) -> Result<Vec<DatasetPair>> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST_NAME);
    let mut pairs = if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        parse_manifest(dir, &text)?
    } else {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut scenes: Vec<(String, PathBuf)> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect();
        scenes.sort();
        scenes
            .iter()
            .filter_map(|(name, path)| scene_pairs(path, name))
            .flatten()
            .collect()
    };
    if pairs.is_empty() {
        return Err(Error::MalformedDataset(format!("no image pairs found in {}", dir.display())));
    }
    pairs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairResult {
    pub name: String,
    pub mma: Vec<f64>,
    pub homography_correct: Vec<bool>,
    pub corner_error: Option<f64>,
    pub matches: usize,
    pub pre_ratio_matches: usize,
    pub fallback: bool,
    /// Matching failure; the pair scores zero on every metric.
    pub error: Option<String>,
}

impl PairResult {
    fn failed(name: String, thresholds: &[f64], err: &Error) -> Self {
        Self {
            name,
            mma: vec![0.0; thresholds.len()],
            homography_correct: vec![false; thresholds.len()],
            corner_error: None,
            matches: 0,
            pre_ratio_matches: 0,
            fallback: false,
            error: Some(err.to_string()),
        }
    }
}

/// Matches one pair and scores it. Matching failures are scored as zero;
/// only configuration errors propagate.
pub fn evaluate_pair(
    name: &str,
    img_a: &Image,
    img_b: &Image,
    gt: &Homography,
    cfg: &PipelineConfig,
    thresholds: &[f64],
) -> Result<PairResult> {
    let out = match match_images(img_a, img_b, cfg) {
        Ok(out) => out,
        Err(e) if e.is_matching_failure() || matches!(e, Error::ImageTooSmall { .. } | Error::PyramidTooDeep { .. }) => {
            return Ok(PairResult::failed(name.to_string(), thresholds, &e))
        }
        Err(e) => return Err(e),
    };
    let m = mma(&out.pairs, gt, thresholds);
    let pts: Vec<_> = out.pairs.iter().map(|p| (p.a, p.b)).collect();
    let (corner, correct) = match geometry::ransac_homography(&pts, &cfg.ransac) {
        Ok(res) => {
            let size = (img_a.height(), img_a.width());
            (
                Some(corner_error(&res.homography, gt, size)),
                homography_accuracy(&res.homography, gt, size, thresholds),
            )
        }
        Err(_) => (None, vec![false; thresholds.len()]),
    };
    Ok(PairResult {
        name: name.to_string(),
        mma: m.accuracy,
        homography_correct: correct,
        corner_error: corner.filter(|e| e.is_finite()),
        matches: out.pairs.len(),
        pre_ratio_matches: out.diagnostics.pre_ratio_count(),
        fallback: out.diagnostics.fallback,
        error: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub name: String,
    pub pairs: usize,
    pub mma: Vec<f64>,
    pub homography_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub mma: Vec<f64>,
    pub homography_accuracy: Vec<f64>,
    pub match_count_mean: f64,
    pub pre_ratio_count_mean: f64,
    pub fallback_pairs: usize,
    pub failed_pairs: usize,
    pub splits: Vec<SplitSummary>,
    pub pairs: Vec<PairResult>,
}

fn mean_columns<'a>(rows: impl Iterator<Item = Vec<f64>> + 'a, width: usize) -> Vec<f64> {
    let mut sum = vec![0.0; width];
    let mut n = 0usize;
    for row in rows {
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
        n += 1;
    }
    if n > 0 {
        for s in &mut sum {
            *s /= n as f64;
        }
    }
    sum
}

fn bools_to_f64(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

impl EvalReport {
    pub fn from_pairs(thresholds: Vec<f64>, pairs: Vec<PairResult>, splits_of: impl Fn(&str) -> Option<&'static str>) -> Self {
        let t = thresholds.len();
        let n = pairs.len().max(1) as f64;
        let mma = mean_columns(pairs.iter().map(|p| p.mma.clone()), t);
        let homography_accuracy = mean_columns(pairs.iter().map(|p| bools_to_f64(&p.homography_correct)), t);
        let mut split_names: Vec<&'static str> = pairs.iter().filter_map(|p| splits_of(&p.name)).collect();
        split_names.sort();
        split_names.dedup();
        let splits = split_names
            .into_iter()
            .map(|s| {
                let members: Vec<&PairResult> = pairs.iter().filter(|p| splits_of(&p.name) == Some(s)).collect();
                SplitSummary {
                    name: s.to_string(),
                    pairs: members.len(),
                    mma: mean_columns(members.iter().map(|p| p.mma.clone()), t),
                    homography_accuracy: mean_columns(members.iter().map(|p| bools_to_f64(&p.homography_correct)), t),
                }
            })
            .collect();
        EvalReport {
            match_count_mean: pairs.iter().map(|p| p.matches as f64).sum::<f64>() / n,
            pre_ratio_count_mean: pairs.iter().map(|p| p.pre_ratio_matches as f64).sum::<f64>() / n,
            fallback_pairs: pairs.iter().filter(|p| p.fallback).count(),
            failed_pairs: pairs.iter().filter(|p| p.error.is_some()).count(),
            thresholds,
            mma,
            homography_accuracy,
            splits,
            pairs,
        }
    }

    /// Value of `mma` at threshold `t`, if `t` was evaluated.
    pub fn mma_at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.mma[i])
    }

    pub fn homography_accuracy_at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.homography_accuracy[i])
    }

    /// `key=value` summary lines followed by a JSON block between `---` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{REPORT_HEADER}").unwrap();
        writeln!(s, "pairs={}", self.pairs.len()).unwrap();
        for (t, v) in self.thresholds.iter().zip(&self.mma) {
            writeln!(s, "mma@{t}px={v:.6}").unwrap();
        }
        for (t, v) in self.thresholds.iter().zip(&self.homography_accuracy) {
            writeln!(s, "homography_accuracy@{t}px={v:.6}").unwrap();
        }
        for split in &self.splits {
            for (t, v) in self.thresholds.iter().zip(&split.mma) {
                writeln!(s, "mma_{}@{t}px={v:.6}", split.name).unwrap();
            }
        }
        writeln!(s, "match_count_mean={:.3}", self.match_count_mean).unwrap();
        writeln!(s, "pre_ratio_count_mean={:.3}", self.pre_ratio_count_mean).unwrap();
        writeln!(s, "fallback_pairs={}", self.fallback_pairs).unwrap();
        writeln!(s, "failed_pairs={}", self.failed_pairs).unwrap();
        writeln!(s, "---").unwrap();
        s.push_str(&serde_json::to_string_pretty(self).expect("report is serializable"));
        s.push_str("\n---\n");
        s
    }
}

/// Thresholds sorted and deduplicated, always including 1, 3 and 5 px.
pub fn normalize_thresholds(extra: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = extra.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::InvalidConfig(format!("threshold {bad} must be positive")));
    }
    let mut t: Vec<f64> = DEFAULT_THRESHOLDS.iter().chain(extra).copied().collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    /// Worker threads for pair-level parallelism; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            jobs: 0,
        }
    }
}

fn run_pair(pair: &DatasetPair, cfg: &PipelineConfig, thresholds: &[f64]) -> Result<PairResult> {
    let img_a = load_image(&pair.image_a)?;
    let img_b = load_image(&pair.image_b)?;
    let gt = read_homography(&pair.homography)?;
    evaluate_pair(&pair.name, &img_a, &img_b, &gt, cfg, thresholds)
}

/// Runs the matcher over every pair of a dataset directory and aggregates
/// the metrics. The report does not depend on `jobs`.
pub fn run_benchmark(dir: impl AsRef<Path>, cfg: &PipelineConfig, opts: &EvalOptions) -> Result<EvalReport> {
    cfg.validate()?;
    let thresholds = normalize_thresholds(&opts.thresholds)?;
    let pairs = discover_dataset(dir)?;
    let run = || -> Result<Vec<PairResult>> {
        pairs.par_iter().map(|p| run_pair(p, cfg, &thresholds)).collect()
    };
    let results = if opts.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };
    let splits: Vec<(String, Option<&'static str>)> = pairs.iter().map(|p| (p.name.clone(), p.split())).collect();
    Ok(EvalReport::from_pairs(thresholds, results, |name| {
        splits.iter().find(|(n, _)| n == name).and_then(|(_, s)| *s)
    }))
}
