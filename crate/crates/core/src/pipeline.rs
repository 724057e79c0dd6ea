//! Two-stage matching of an image pair.
//!
//! Stage 1 matches the deepest pyramid levels of A and B densely, fits a
//! homography to those coarse matches and warps B into A's frame (image C).
//! Stage 2 builds C's pyramid, refines A against C level by level, and maps
//! the full-resolution matches back into B through the homography.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use nalgebra::Point2;

use crate::descriptor::{builtin_pyramid, DescriptorConfig};
use crate::error::{Error, Result};
use crate::fhr::{self, FhrConfig, FhrTrace};
use crate::geometry::{self, Homography, PointPair, RansacConfig};
use crate::matcher;
use crate::types::{FeaturePyramid, Image, MatchSet};

pub const MATCH_FILE_HEADER: &str = "# GCM v1 matches";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSource {
    /// Built-in patch descriptor with the average-pooling pyramid.
    #[default]
    Builtin,
    /// Externally produced pyramids (GCMF files).
    PyramidFiles,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub descriptor: DescriptorConfig,
    pub fhr: FhrConfig,
    pub ransac: RansacConfig,
    pub feature_source: FeatureSource,
    /// Stage-1 RANSAC threshold in units of deepest-level cells. Coarse
    /// matches are quantized to `2^k` pixels, so the pixel threshold used for
    /// final matches is far too tight for them.
    pub coarse_threshold_cells: f64,
    /// Record the per-level refinement trace.
    pub trace: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorConfig::default(),
            fhr: FhrConfig::default(),
            ransac: RansacConfig::default(),
            feature_source: FeatureSource::Builtin,
            coarse_threshold_cells: 1.0,
            trace: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        self.fhr.validate()?;
        self.ransac.validate()?;
        if !(self.coarse_threshold_cells > 0.0) {
            return Err(Error::InvalidConfig("coarse_threshold_cells must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Dense mutual matches between the deepest levels of A and B.
    pub coarse_matches: usize,
    pub coarse_inliers: usize,
    pub inlier_ratio: f64,
    /// Stage 1 failed and the identity homography was used instead.
    pub fallback: bool,
    /// A and C were described with the built-in descriptor while A and B used
    /// ingested pyramids.
    pub mixed_features: bool,
    /// Refinement match counts per level (index = level), before the ratio test.
    pub level_counts: Vec<usize>,
    /// Level-0 matches that passed the ratio test.
    pub level0_count: usize,
    pub dropped_by_traceback: usize,
}

impl Diagnostics {
    pub fn pre_ratio_count(&self) -> usize {
        self.level_counts.first().copied().unwrap_or(0)
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let levels: Vec<String> = self.level_counts.iter().map(ToString::to_string).collect();
        write!(
            f,
            "coarse={} inliers={} inlier_ratio={:.4} fallback={} mixed_features={} levels=[{}] pre_ratio={} level0={} pairs={} dropped={}",
            self.coarse_matches,
            self.coarse_inliers,
            self.inlier_ratio,
            self.fallback,
            self.mixed_features,
            levels.join(","),
            self.pre_ratio_count(),
            self.level0_count,
            self.level0_count - self.dropped_by_traceback,
            self.dropped_by_traceback
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput {
    /// A-coordinates are integer pixels of A; B-coordinates are real points in B.
    pub pairs: Vec<PointPair>,
    /// Stage-1 homography mapping A-coordinates into B.
    pub homography: Homography,
    pub diagnostics: Diagnostics,
    pub trace: Option<FhrTrace>,
}

/// Pixel coordinates of the centre of cell `(row, col)` on level `k`.
fn cell_center(row: usize, col: usize, k: usize) -> Point2<f64> {
    let s = (1usize << k) as f64;
    Point2::new((col as f64 + 0.5) * s - 0.5, (row as f64 + 0.5) * s - 0.5)
}

struct CoarseStage {
    homography: Homography,
    coarse_matches: usize,
    coarse_inliers: usize,
    fallback: bool,
}

fn coarse_stage(pyr_a: &FeaturePyramid, pyr_b: &FeaturePyramid, cfg: &PipelineConfig) -> Result<CoarseStage> {
    let k = pyr_a.depth();
    let coarse = matcher::mutual_nns_dense(pyr_a.level(k), pyr_b.level(k), k)?;
    let pairs: Vec<_> = coarse
        .iter()
        .map(|m| (cell_center(m.a.row, m.a.col, k), cell_center(m.b.row, m.b.col, k)))
        .collect();
    let ransac = RansacConfig {
        inlier_threshold: cfg.coarse_threshold_cells * (1usize << k) as f64,
        ..cfg.ransac
    };
    match geometry::ransac_homography(&pairs, &ransac) {
        Ok(res) => Ok(CoarseStage {
            homography: res.homography,
            coarse_matches: coarse.len(),
            coarse_inliers: res.inlier_count(),
            fallback: false,
        }),
        Err(e) if e.is_matching_failure() => Ok(CoarseStage {
            homography: Homography::identity(),
            coarse_matches: coarse.len(),
            coarse_inliers: 0,
            fallback: true,
        }),
        Err(e) => Err(e),
    }
}

fn refine_stage(
    pyr_a: &FeaturePyramid,
    pyr_c: &FeaturePyramid,
    coarse: CoarseStage,
    b_size: (usize, usize),
    mixed_features: bool,
    cfg: &PipelineConfig,
) -> Result<MatchOutput> {
    let (out, trace) = if cfg.trace {
        let (out, trace) = fhr::run_fhr_traced(pyr_a, pyr_c, &cfg.fhr)?;
        (out, Some(trace))
    } else {
        (fhr::run_fhr(pyr_a, pyr_c, &cfg.fhr)?, None)
    };
    let pairs = geometry::traceback_matches(&out.matches, &coarse.homography, b_size);
    let diagnostics = Diagnostics {
        coarse_matches: coarse.coarse_matches,
        coarse_inliers: coarse.coarse_inliers,
        inlier_ratio: if coarse.coarse_matches == 0 {
            0.0
        } else {
            coarse.coarse_inliers as f64 / coarse.coarse_matches as f64
        },
        fallback: coarse.fallback,
        mixed_features,
        level_counts: out.level_counts.clone(),
        level0_count: out.matches.len(),
        dropped_by_traceback: out.matches.len() - pairs.len(),
    };
    Ok(MatchOutput {
        pairs,
        homography: coarse.homography,
        diagnostics,
        trace,
    })
}

/// Image C: B resampled into A's frame, `h` mapping A-coordinates into B.
pub fn warp_into_frame_of_a(img_b: &Image, h: &Homography, a_size: (usize, usize)) -> Result<Image> {
    geometry::warp_image(img_b, &h.inverse(), a_size)
}

/// Full two-stage matching with the built-in descriptor.
pub fn match_images(img_a: &Image, img_b: &Image, cfg: &PipelineConfig) -> Result<MatchOutput> {
    cfg.validate()?;
    let pyr_a = builtin_pyramid(img_a, &cfg.descriptor)?;
    let pyr_b = builtin_pyramid(img_b, &cfg.descriptor)?;
    let coarse = coarse_stage(&pyr_a, &pyr_b, cfg)?;
    let img_c = warp_into_frame_of_a(img_b, &coarse.homography, (img_a.height(), img_a.width()))?;
    let pyr_c = builtin_pyramid(&img_c, &cfg.descriptor)?;
    refine_stage(&pyr_a, &pyr_c, coarse, (img_b.height(), img_b.width()), false, cfg)
}

/// Describes an image in a caller's feature space.
pub type PyramidProvider<'a> = dyn Fn(&Image) -> Result<FeaturePyramid> + 'a;

/// Two-stage matching from externally produced pyramids of A and B.
///
/// When `pyramid_for_c` is given it describes the warped image C in the
/// same feature space as `pyr_a`. Otherwise stage 2 falls back to the
/// built-in descriptor for both A and C, and the diagnostics flag
/// `mixed_features`.
pub fn match_pyramids(
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    img_a: &Image,
    img_b: &Image,
    pyramid_for_c: Option<&PyramidProvider<'_>>,
    cfg: &PipelineConfig,
) -> Result<MatchOutput> {
    cfg.validate()?;
    if pyr_a.depth() != pyr_b.depth() {
        return Err(Error::DepthMismatch(pyr_a.depth() + 1, pyr_b.depth() + 1));
    }
    if pyr_a.depth() < 1 {
        return Err(Error::InvalidConfig("pyramids need at least two levels".into()));
    }
    let coarse = coarse_stage(pyr_a, pyr_b, cfg)?;
    let img_c = warp_into_frame_of_a(img_b, &coarse.homography, (img_a.height(), img_a.width()))?;
    let b_size = (img_b.height(), img_b.width());
    match pyramid_for_c {
        Some(provider) => {
            let pyr_c = provider(&img_c)?;
            if pyr_c.depth() != pyr_a.depth() {
                return Err(Error::DepthMismatch(pyr_a.depth() + 1, pyr_c.depth() + 1));
            }
            refine_stage(pyr_a, &pyr_c, coarse, b_size, false, cfg)
        }
        None => {
            let desc = DescriptorConfig {
                pyramid_depth: pyr_a.depth(),
                ..cfg.descriptor
            };
            let builtin_a = builtin_pyramid(img_a, &desc)?;
            let pyr_c = builtin_pyramid(&img_c, &desc)?;
            refine_stage(&builtin_a, &pyr_c, coarse, b_size, true, cfg)
        }
    }
}

/// Level-0 matches between A and C before trace-back; exposed for debugging.
pub fn refine_only(pyr_a: &FeaturePyramid, pyr_c: &FeaturePyramid, cfg: &FhrConfig) -> Result<MatchSet> {
    fhr::run_fhr(pyr_a, pyr_c, cfg).map(|o| o.matches)
}

/// Writes the match text format: a header line, then `xA yA xB yB distance` per pair.
pub fn write_matches(mut w: impl Write, pairs: &[PointPair]) -> io::Result<()> {
    writeln!(w, "{MATCH_FILE_HEADER}")?;
    for p in pairs {
        writeln!(w, "{} {} {:.6} {:.6} {:.6}", p.a.x, p.a.y, p.b.x, p.b.y, p.distance)?;
    }
    Ok(())
}

pub fn save_matches(path: impl AsRef<Path>, pairs: &[PointPair]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_matches(&mut buf, pairs).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_matches(r: impl BufRead) -> io::Result<Vec<PointPair>> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut lines = r.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == MATCH_FILE_HEADER => {}
        _ => return Err(bad("missing match file header".into())),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("line {}: bad number", n + 2)))?;
        if v.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", n + 2)));
        }
        out.push(PointPair {
            a: Point2::new(v[0], v[1]),
            b: Point2::new(v[2], v[3]),
            distance: v[4],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::procedural_texture;
    use crate::geometry::project;

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            descriptor: DescriptorConfig {
                patch_radius: 2,
                pyramid_depth: 3,
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn cell_centres() {
        assert_eq!(cell_center(0, 0, 0), Point2::new(0.0, 0.0));
        assert_eq!(cell_center(0, 0, 4), Point2::new(7.5, 7.5));
        assert_eq!(cell_center(1, 2, 1), Point2::new(4.5, 2.5));
    }

    #[test]
    fn self_pair_is_identity() {
        let img = procedural_texture(96, 96, 1);
        let out = match_images(&img, &img, &small_cfg()).unwrap();
        assert!(out.homography.max_entry_diff(&Homography::identity()) < 1e-6);
        assert!(!out.diagnostics.fallback);
        let exact = out.pairs.iter().filter(|p| (p.a - p.b).norm() < 1e-6).count();
        assert!(exact * 2 >= 96 * 96, "{exact}");
        let d = &out.diagnostics;
        assert_eq!(d.level0_count, out.pairs.len() + d.dropped_by_traceback);
    }

    #[test]
    fn translated_pair_traces_back_to_translation() {
        let img_a = procedural_texture(128, 128, 2);
        let shift = Homography::translation(8.0, 0.0);
        let img_b = geometry::warp_image(&img_a, &shift, (128, 128)).unwrap();
        let out = match_images(&img_a, &img_b, &small_cfg()).unwrap();
        assert!(!out.pairs.is_empty());
        let good = out
            .pairs
            .iter()
            .filter(|p| (project(&shift, p.a).unwrap() - p.b).norm() < 1.0)
            .count();
        assert!(good * 10 >= out.pairs.len() * 8, "{good}/{}", out.pairs.len());
        for p in &out.pairs {
            assert_eq!(p.a.x.fract(), 0.0);
            assert!(p.b.x >= -0.5 && p.b.x <= 127.5 && p.b.y >= -0.5 && p.b.y <= 127.5);
        }
    }

    #[test]
    fn blank_images_report_insufficient_matches() {
        let img = Image::from_fn(64, 64, |_, _| 0.5).unwrap();
        let err = match_images(&img, &img, &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::InsufficientMatches { .. }));
        assert!(err.is_matching_failure());
    }

    #[test]
    fn pyramid_path_self_pair() {
        let img = procedural_texture(64, 64, 3);
        let cfg = small_cfg();
        let pyr = builtin_pyramid(&img, &cfg.descriptor).unwrap();
        let provider = |c: &Image| builtin_pyramid(c, &cfg.descriptor);
        let out = match_pyramids(&pyr, &pyr, &img, &img, Some(&provider), &cfg).unwrap();
        assert!(!out.diagnostics.mixed_features);
        let direct = match_images(&img, &img, &cfg).unwrap();
        assert_eq!(out.pairs, direct.pairs);
        let mixed = match_pyramids(&pyr, &pyr, &img, &img, None, &cfg).unwrap();
        assert!(mixed.diagnostics.mixed_features);
    }

    #[test]
    fn pyramid_depth_mismatch() {
        let img = procedural_texture(64, 64, 3);
        let p3 = builtin_pyramid(&img, &DescriptorConfig { patch_radius: 2, pyramid_depth: 3 }).unwrap();
        let p2 = builtin_pyramid(&img, &DescriptorConfig { patch_radius: 2, pyramid_depth: 2 }).unwrap();
        assert!(matches!(
            match_pyramids(&p3, &p2, &img, &img, None, &small_cfg()),
            Err(Error::DepthMismatch(4, 3))
        ));
    }

    #[test]
    fn match_file_round_trip() {
        let pairs = vec![PointPair {
            a: Point2::new(3.0, 4.0),
            b: Point2::new(5.25, 6.5),
            distance: 0.125,
        }];
        let mut buf = Vec::new();
        write_matches(&mut buf, &pairs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "# GCM v1 matches\n3 4 5.250000 6.500000 0.125000\n");
        assert_eq!(read_matches(&buf[..]).unwrap(), pairs);
        assert!(read_matches(&b"3 4 5 6 0\n"[..]).is_err());
    }
}
