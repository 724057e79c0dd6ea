//! Homographies: normalized DLT, seeded RANSAC, warping and match trace-back.
//!
//! Points are `(x, y) = (col, row)` in pixel units with pixel centres on
//! integer coordinates.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{bilinear_sample_into, Image, MatchSet};

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

/// A 3x3 projective transform, stored with unit Frobenius norm and its
/// largest-magnitude entry positive. Both the matrix and its inverse must
/// have |det| > 1e-12 in that canonical form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
    inv: Matrix3<f64>,
}

fn canonical(m: Matrix3<f64>) -> Option<Matrix3<f64>> {
    let norm = m.norm();
    if !norm.is_finite() || norm < DET_EPS {
        return None;
    }
    let mut m = m / norm;
    let mut largest = 0.0f64;
    for v in m.iter() {
        if v.abs() > largest.abs() {
            largest = *v;
        }
    }
    if largest < 0.0 {
        m = -m;
    }
    (m.determinant().abs() > DET_EPS).then_some(m)
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let m = canonical(m).ok_or(Error::SingularHomography)?;
        let inv = m
            .try_inverse()
            .and_then(canonical)
            .ok_or(Error::SingularHomography)?;
        Ok(Self { m, inv })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is invertible")
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::from_rows([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]).expect("translation is invertible")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Homography {
        Homography {
            m: self.inv,
            inv: self.m,
        }
    }

    /// The transform applying `self` first, then `next`.
    pub fn then(&self, next: &Homography) -> Result<Homography> {
        Homography::new(next.m * self.m)
    }

    pub fn project(&self, p: Point2<f64>) -> Result<Point2<f64>> {
        project(self, p)
    }

    /// Largest absolute entry difference between two canonical matrices.
    pub fn max_entry_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).amax()
    }

    /// Rescales so the bottom-right entry is 1 when it is not vanishing.
    fn display_matrix(&self) -> Matrix3<f64> {
        let s = self.m[(2, 2)];
        if s.abs() > 1e-12 {
            self.m / s
        } else {
            self.m
        }
    }

    /// Three lines of three whitespace-separated decimals, row-major.
    pub fn to_text(&self) -> String {
        let m = self.display_matrix();
        let mut out = String::new();
        for r in 0..3 {
            let _ = writeln!(out, "{} {} {}", m[(r, 0)], m[(r, 1)], m[(r, 2)]);
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != 3 {
            return Err(format!("expected 3 rows, found {}", rows.len()));
        }
        let mut m = Matrix3::zeros();
        for (r, line) in rows.iter().enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| format!("row {}: bad number {t:?}", r + 1)))
                .collect::<std::result::Result<_, _>>()?;
            if vals.len() != 3 {
                return Err(format!("row {}: expected 3 values, found {}", r + 1, vals.len()));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(format!("row {}: non-finite value", r + 1));
            }
            for (c, v) in vals.into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        Homography::new(m).map_err(|_| "matrix is singular".to_string())
    }
}

pub fn read_homography(path: impl AsRef<Path>) -> Result<Homography> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Homography::parse(&text).map_err(|reason| Error::MalformedHomography {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_homography(path: impl AsRef<Path>, h: &Homography) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, h.to_text()).map_err(|e| Error::io(path, e))
}

/// Homogeneous projection `(x, y, 1) -> (x'/w', y'/w')`.
pub fn project(h: &Homography, p: Point2<f64>) -> Result<Point2<f64>> {
    let v = h.m * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() <= W_EPS {
        return Err(Error::PointAtInfinity);
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

/// A real-valued correspondence between image A and image B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub a: Point2<f64>,
    pub b: Point2<f64>,
    pub distance: f64,
}

/// Translates to the centroid and scales to mean distance sqrt(2).
fn hartley_normalization(points: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(t: &Matrix3<f64>, p: &Point2<f64>) -> Point2<f64> {
    let v = t * Vector3::new(p.x, p.y, 1.0);
    Point2::new(v.x / v.z, v.y / v.z)
}

fn has_collinear_triple(points: &[Point2<f64>]) -> bool {
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b, c) = (points[i], points[j], points[k]);
                let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
                if cross.abs() < 1e-9 {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalized direct linear transform from `src -> dst` correspondences.
///
/// Minimal (4-point) inputs with three collinear points on either side are
/// rejected, as is any input whose design matrix has a null space of
/// dimension above one.
pub fn dlt_homography(pairs: &[(Point2<f64>, Point2<f64>)]) -> Result<Homography> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::TooFewMatches(n));
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let ts = hartley_normalization(&src).ok_or(Error::DegenerateConfiguration)?;
    let td = hartley_normalization(&dst).ok_or(Error::DegenerateConfiguration)?;
    let src_n: Vec<_> = src.iter().map(|p| apply(&ts, p)).collect();
    let dst_n: Vec<_> = dst.iter().map(|p| apply(&td, p)).collect();
    if n == 4 && (has_collinear_triple(&src_n) || has_collinear_triple(&dst_n)) {
        return Err(Error::DegenerateConfiguration);
    }

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src_n.iter().zip(&dst_n).enumerate() {
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateConfiguration)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = svd.singular_values[order[order.len() - 1]];
    if svd.singular_values[second] <= 1e-9 * largest {
        return Err(Error::DegenerateConfiguration);
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::from_fn(|r, c| h[3 * r + c]);
    let td_inv = td.try_inverse().ok_or(Error::DegenerateConfiguration)?;
    Homography::new(td_inv * hn * ts).map_err(|_| Error::DegenerateConfiguration)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Symmetric transfer error bound, in pixels.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 3.0,
            max_iterations: 2000,
            confidence: 0.995,
            rng_seed: 7,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::InvalidConfig("inlier threshold must be > 0".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidConfig("confidence must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    /// Hypotheses drawn before termination.
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// `max(|H a - b|, |H^-1 b - a|)`; infinite when either projection fails.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, a: Point2<f64>, b: Point2<f64>) -> f64 {
    match (project(h, a), project(h_inv, b)) {
        (Ok(fa), Ok(fb)) => (fa - b).norm().max((fb - a).norm()),
        _ => f64::INFINITY,
    }
}

fn inlier_mask(h: &Homography, pairs: &[(Point2<f64>, Point2<f64>)], threshold: f64) -> Vec<bool> {
    let h_inv = h.inverse();
    pairs
        .par_iter()
        .map(|&(a, b)| symmetric_transfer_error(h, &h_inv, a, b) < threshold)
        .collect()
}

fn adaptive_bound(inlier_ratio: f64, confidence: f64) -> f64 {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 {
        return 0.0;
    }
    if p_good <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil()
}

/// Repeated DLT refits on the consensus set while the set does not shrink.
fn refine_consensus(
    pairs: &[(Point2<f64>, Point2<f64>)],
    mut h: Homography,
    mut mask: Vec<bool>,
    mut count: usize,
    threshold: f64,
) -> (Homography, Vec<bool>) {
    for _ in 0..MAX_REFITS {
        let inlier_pairs: Vec<_> = pairs
            .iter()
            .zip(&mask)
            .filter_map(|(p, &m)| m.then_some(*p))
            .collect();
        let Ok(refit) = dlt_homography(&inlier_pairs) else {
            break;
        };
        let refit_mask = inlier_mask(&refit, pairs, threshold);
        let refit_count = refit_mask.iter().filter(|&&b| b).count();
        if refit_count < count {
            break;
        }
        let converged = refit_mask == mask;
        (h, mask, count) = (refit, refit_mask, refit_count);
        if converged {
            break;
        }
    }
    (h, mask)
}

const MAX_REFITS: usize = 10;

/// Seeded RANSAC over 4-point DLT hypotheses, followed by iterated DLT refits
/// on the best consensus set. The returned mask is evaluated against the
/// returned model.
pub fn ransac_homography(pairs: &[(Point2<f64>, Point2<f64>)], cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = pairs.len();
    if n < 4 {
        return Err(Error::TooFewMatches(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut needed = cfg.max_iterations as f64;
    let mut iterations = 0;
    while (iterations as f64) < needed.min(cfg.max_iterations as f64) {
        iterations += 1;
        let sample: Vec<_> = rand::seq::index::sample(&mut rng, n, 4)
            .into_iter()
            .map(|i| pairs[i])
            .collect();
        let Ok(h) = dlt_homography(&sample) else {
            continue;
        };
        let mask = inlier_mask(&h, pairs, cfg.inlier_threshold);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            needed = adaptive_bound(count as f64 / n as f64, cfg.confidence);
            best = Some((h, mask, count));
        }
    }
    let (h, mask, count) = best.ok_or(Error::NoConsensus(0))?;
    if count < 4 {
        return Err(Error::NoConsensus(count));
    }
    let (homography, inliers) = refine_consensus(pairs, h, mask, count, cfg.inlier_threshold);
    Ok(RansacResult {
        homography,
        inliers,
        iterations,
    })
}

/// Inverse warping: `out(p) = src(h^-1 p)`, so `h` maps source coordinates to
/// output coordinates. Samples falling outside the source are zero.
pub fn warp_image(src: &Image, h: &Homography, out_size: (usize, usize)) -> Result<Image> {
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimensions("empty warp output".into()));
    }
    let inv = *h.inverse().matrix();
    let c = src.channels();
    let mut data = vec![0.0f32; out_h * out_w * c];
    data.par_chunks_mut(out_w * c)
        .enumerate()
        .for_each(|(row, out_row)| {
            for col in 0..out_w {
                let v = inv * Vector3::new(col as f64, row as f64, 1.0);
                let dst = &mut out_row[col * c..(col + 1) * c];
                if v.z.abs() > W_EPS {
                    bilinear_sample_into(src, v.x / v.z, v.y / v.z, dst);
                }
            }
        });
    Image::new(out_h, out_w, c, data)
}

/// Maps level-0 matches between A and the warped image C back into B.
///
/// C lives in A's frame and `h` maps A-frame coordinates into B, so each C
/// endpoint is projected through `h`. Pairs landing more than half a pixel
/// outside B (`b_size = (height, width)`) are dropped.
pub fn traceback_matches(matches: &MatchSet, h: &Homography, b_size: (usize, usize)) -> Vec<PointPair> {
    let (bh, bw) = (b_size.0 as f64, b_size.1 as f64);
    matches
        .iter()
        .filter_map(|m| {
            let c = Point2::new(m.b.col as f64, m.b.row as f64);
            let b = project(h, c).ok()?;
            let inside = b.x >= -0.5 && b.x <= bw - 0.5 && b.y >= -0.5 && b.y <= bh - 0.5;
            inside.then(|| PointPair {
                a: Point2::new(m.a.col as f64, m.a.row as f64),
                b,
                distance: m.distance,
            })
        })
        .collect()
}
