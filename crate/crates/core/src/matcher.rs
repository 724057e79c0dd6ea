//! Cosine feature distance, mutual nearest-neighbour search and the ratio test.
//!
//! Conventions shared by every search here:
//! - distance is `1 - cos(f, g)`, clamped to `[0, 2]`;
//! - cells whose vector norm is below [`ZERO_NORM_EPS`] take no part in the
//!   search, neither as queries nor as candidates;
//! - argmin ties resolve to the smallest linear index `row * W + col`;
//! - results are ordered by the A-side linear index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{l2_norm, FeatureMap, Match, MatchSet, PixelCoord, ZERO_NORM_EPS};

/// Where the second-nearest neighbour of the ratio test is searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatioScope {
    /// Among the candidates of the paired patch (4 cells at level 0).
    #[default]
    Patch,
    /// Among every cell of the counterpart map.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioTestConfig {
    pub threshold: f64,
    pub scope: RatioScope,
}

impl RatioTestConfig {
    /// Strict profile.
    pub const STRICT: f64 = 0.60;
    /// Permissive profile.
    pub const LOOSE: f64 = 0.95;

    pub fn new(threshold: f64) -> Result<Self> {
        let cfg = Self {
            threshold,
            scope: RatioScope::Patch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ratio threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for RatioTestConfig {
    fn default() -> Self {
        Self {
            threshold: Self::STRICT,
            scope: RatioScope::Patch,
        }
    }
}

/// `f.g / (|f| |g|)`, or 0 when either norm is below [`ZERO_NORM_EPS`].
pub fn cosine_similarity(f: &[f32], g: &[f32]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::LengthMismatch(f.len(), g.len()));
    }
    Ok(cosine_with_norms(f, g, l2_norm(f), l2_norm(g)))
}

/// `1 - cosine_similarity(f, g)`, in `[0, 2]`.
pub fn feature_distance(f: &[f32], g: &[f32]) -> Result<f64> {
    cosine_similarity(f, g).map(|c| 1.0 - c)
}

#[inline]
fn dot(f: &[f32], g: &[f32]) -> f64 {
    f.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[inline]
pub(crate) fn cosine_with_norms(f: &[f32], g: &[f32], nf: f64, ng: f64) -> f64 {
    if nf < ZERO_NORM_EPS || ng < ZERO_NORM_EPS {
        return 0.0;
    }
    (dot(f, g) / (nf * ng)).clamp(-1.0, 1.0)
}

/// Per-cell norms of a feature map.
fn cell_norms(fm: &FeatureMap) -> Vec<f64> {
    (0..fm.num_cells()).map(|i| l2_norm(fm.cell_at(i))).collect()
}

/// One side of a search: a feature map restricted to an ordered candidate list.
struct SearchSide<'a> {
    map: &'a FeatureMap,
    /// Linear indices of non-zero cells, ascending.
    cells: Vec<usize>,
    norms: Vec<f64>,
}

impl<'a> SearchSide<'a> {
    fn new(map: &'a FeatureMap, mut cells: Vec<usize>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        let norms: Vec<f64> = cells.iter().map(|&i| l2_norm(map.cell_at(i))).collect();
        let (cells, norms) = cells
            .into_iter()
            .zip(norms)
            .filter(|&(_, n)| n >= ZERO_NORM_EPS)
            .unzip();
        Self { map, cells, norms }
    }

    fn dense(map: &'a FeatureMap) -> Self {
        let norms = cell_norms(map);
        let (cells, norms) = norms
            .into_iter()
            .enumerate()
            .filter(|&(_, n)| n >= ZERO_NORM_EPS)
            .unzip();
        Self { map, cells, norms }
    }

    /// Position (into `self.cells`) of the nearest candidate to `q`, with its distance.
    fn nearest(&self, q: &[f32], nq: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (pos, (&cell, &n)) in self.cells.iter().zip(&self.norms).enumerate() {
            let d = 1.0 - cosine_with_norms(q, self.map.cell_at(cell), nq, n);
            // strict comparison keeps the earliest (smallest index) on ties
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((pos, d));
            }
        }
        best
    }
}

fn mutual_search(a: &SearchSide<'_>, b: &SearchSide<'_>, level: usize, parallel: bool) -> MatchSet {
    let query = |from: &SearchSide<'_>, to: &SearchSide<'_>, i: usize| {
        to.nearest(from.map.cell_at(from.cells[i]), from.norms[i])
    };
    let (forward, backward): (Vec<_>, Vec<_>) = if parallel {
        (
            (0..a.cells.len()).into_par_iter().map(|i| query(a, b, i)).collect(),
            (0..b.cells.len()).into_par_iter().map(|j| query(b, a, j)).collect(),
        )
    } else {
        (
            (0..a.cells.len()).map(|i| query(a, b, i)).collect(),
            (0..b.cells.len()).map(|j| query(b, a, j)).collect(),
        )
    };
    let (wa, wb) = (a.map.width(), b.map.width());
    forward
        .iter()
        .enumerate()
        .filter_map(|(i, best)| {
            let (j, d) = (*best)?;
            let (back, _) = backward[j]?;
            (back == i).then(|| Match {
                level,
                a: PixelCoord::from_linear(a.cells[i], wa),
                b: PixelCoord::from_linear(b.cells[j], wb),
                distance: d,
            })
        })
        .collect()
}

/// Dense mutual nearest neighbours between every cell of `fa` and every cell of `fb`.
///
/// `level` is recorded on the produced matches.
pub fn mutual_nns_dense(fa: &FeatureMap, fb: &FeatureMap, level: usize) -> Result<MatchSet> {
    if fa.channels() != fb.channels() {
        return Err(Error::ChannelMismatch(fa.channels(), fb.channels()));
    }
    let a = SearchSide::dense(fa);
    let b = SearchSide::dense(fb);
    let parallel = a.cells.len() * b.cells.len() > 4096;
    Ok(mutual_search(&a, &b, level, parallel))
}

fn check_region(fm: &FeatureMap, region: &[PixelCoord]) -> Result<Vec<usize>> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    region
        .iter()
        .map(|&p| {
            if fm.contains(p) {
                Ok(p.linear_index(fm.width()))
            } else {
                Err(Error::OutOfBounds {
                    row: p.row,
                    col: p.col,
                    height: fm.height(),
                    width: fm.width(),
                })
            }
        })
        .collect()
}

/// Mutual nearest neighbours restricted to `region_a x region_b`.
pub fn nns_within_regions(
    fa: &FeatureMap,
    fb: &FeatureMap,
    region_a: &[PixelCoord],
    region_b: &[PixelCoord],
    level: usize,
) -> Result<MatchSet> {
    if fa.channels() != fb.channels() {
        return Err(Error::ChannelMismatch(fa.channels(), fb.channels()));
    }
    let a = SearchSide::new(fa, check_region(fa, region_a)?);
    let b = SearchSide::new(fb, check_region(fb, region_b)?);
    Ok(mutual_search(&a, &b, level, false))
}

/// Ratio-test candidates of one match: cells competing with `a` on the A side
/// and with `b` on the B side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatioCandidates {
    pub a: Vec<PixelCoord>,
    pub b: Vec<PixelCoord>,
}

/// Smallest distance from `q` to any candidate other than `exclude`, if there is one.
fn second_nearest(q: &[f32], target: &FeatureMap, candidates: &[PixelCoord], exclude: PixelCoord) -> Option<f64> {
    let nq = l2_norm(q);
    candidates
        .iter()
        .filter(|&&p| p != exclude && target.contains(p))
        .map(|&p| {
            let c = target.cell(p.row, p.col);
            1.0 - cosine_with_norms(q, c, nq, l2_norm(c))
        })
        .reduce(f64::min)
}

fn passes(d1: f64, d2: Option<f64>, r: f64) -> bool {
    d2.is_none_or(|d2| d1 < r * d2)
}

/// Keeps a match iff `d1 < r * d2` in both directions, where `d2` is the
/// distance to the best competing candidate. A direction with no competing
/// candidate passes.
pub fn ratio_test(
    matches: &MatchSet,
    fa: &FeatureMap,
    fb: &FeatureMap,
    candidates: &[RatioCandidates],
    cfg: &RatioTestConfig,
) -> Result<MatchSet> {
    if candidates.len() != matches.len() {
        return Err(Error::LengthMismatch(matches.len(), candidates.len()));
    }
    if fa.channels() != fb.channels() {
        return Err(Error::ChannelMismatch(fa.channels(), fb.channels()));
    }
    Ok(matches
        .iter()
        .zip(candidates)
        .filter(|(m, cand)| {
            let qa = fa.cell(m.a.row, m.a.col);
            let qb = fb.cell(m.b.row, m.b.col);
            let d1 = 1.0 - cosine_with_norms(qa, qb, l2_norm(qa), l2_norm(qb));
            passes(d1, second_nearest(qa, fb, &cand.b, m.b), cfg.threshold)
                && passes(d1, second_nearest(qb, fa, &cand.a, m.a), cfg.threshold)
        })
        .map(|(m, _)| *m)
        .collect())
}

/// Ratio test with the second-nearest neighbour searched over whole maps.
pub fn ratio_test_global(matches: &MatchSet, fa: &FeatureMap, fb: &FeatureMap, cfg: &RatioTestConfig) -> Result<MatchSet> {
    if fa.channels() != fb.channels() {
        return Err(Error::ChannelMismatch(fa.channels(), fb.channels()));
    }
    let norms_a = cell_norms(fa);
    let norms_b = cell_norms(fb);
    let best_other = |q: &[f32], target: &FeatureMap, norms: &[f64], exclude: usize| {
        let nq = l2_norm(q);
        (0..target.num_cells())
            .filter(|&i| i != exclude)
            .map(|i| 1.0 - cosine_with_norms(q, target.cell_at(i), nq, norms[i]))
            .reduce(f64::min)
    };
    let keep: Vec<bool> = matches
        .as_slice()
        .par_iter()
        .map(|m| {
            let qa = fa.cell(m.a.row, m.a.col);
            let qb = fb.cell(m.b.row, m.b.col);
            let d1 = 1.0 - cosine_with_norms(qa, qb, l2_norm(qa), l2_norm(qb));
            passes(d1, best_other(qa, fb, &norms_b, m.b.linear_index(fb.width())), cfg.threshold)
                && passes(d1, best_other(qb, fa, &norms_a, m.a.linear_index(fa.width())), cfg.threshold)
        })
        .collect();
    Ok(matches
        .iter()
        .zip(keep)
        .filter_map(|(m, k)| k.then_some(*m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, cells: &[&[f32]]) -> FeatureMap {
        FeatureMap::from_cells(h, w, &cells.iter().map(|c| c.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Brute-force oracle: full distance table, scan for row/column minima.
    fn oracle(fa: &FeatureMap, fb: &FeatureMap) -> Vec<(usize, usize)> {
        let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        let na = fa.num_cells();
        let nb = fb.num_cells();
        let mut table = vec![vec![f64::NAN; nb]; na];
        for i in 0..na {
            for j in 0..nb {
                let (f, g) = (fa.cell_at(i), fb.cell_at(j));
                let (nf, ng) = (norm(f), norm(g));
                if nf >= 1e-12 && ng >= 1e-12 {
                    let mut d = 0.0f64;
                    for k in 0..f.len() {
                        d += f[k] as f64 * g[k] as f64;
                    }
                    table[i][j] = 1.0 - (d / (nf * ng)).clamp(-1.0, 1.0);
                }
            }
        }
        let argmin = |vals: Vec<f64>| {
            let mut best: Option<(usize, f64)> = None;
            for (k, v) in vals.into_iter().enumerate() {
                if !v.is_nan() && best.is_none_or(|(_, b)| v < b) {
                    best = Some((k, v));
                }
            }
            best.map(|b| b.0)
        };
        let mut out = Vec::new();
        for i in 0..na {
            if let Some(j) = argmin(table[i].clone()) {
                if argmin((0..na).map(|r| table[r][j]).collect()) == Some(i) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn distance_examples() {
        assert!(feature_distance(&[0.3, -0.2], &[0.3, -0.2]).unwrap().abs() < 1e-12);
        assert!((feature_distance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!((feature_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_maps_match_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fa = random_map(&mut rng, 4, 5, 8);
        let ms = mutual_nns_dense(&fa, &fa, 0).unwrap();
        assert_eq!(ms.len(), 20);
        assert!(ms.iter().all(|m| m.a == m.b && m.distance.abs() < 1e-12));
    }

    #[test]
    fn swapped_basis_vectors() {
        let fa = map(1, 2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let fb = map(1, 2, &[&[0.0, 1.0], &[1.0, 0.0]]);
        let ms = mutual_nns_dense(&fa, &fb, 0).unwrap();
        let pairs: Vec<_> = ms.iter().map(|m| (m.a.col, m.b.col)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(oracle(&fa, &fb), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn only_mutual_survives_shared_nearest() {
        // b0 is nearest to both a0 and a1, but closest to a0.
        let fa = map(1, 2, &[&[1.0, 0.0], &[0.8, 0.6]]);
        let fb = map(1, 2, &[&[1.0, 0.05], &[-1.0, 0.0]]);
        let ms = mutual_nns_dense(&fa, &fb, 0).unwrap();
        assert_eq!(ms.len(), 1);
        assert_eq!((ms.as_slice()[0].a.col, ms.as_slice()[0].b.col), (0, 0));
        assert_eq!(oracle(&fa, &fb), vec![(0, 0)]);
    }

    #[test]
    fn ties_break_to_smallest_index() {
        let fa = map(1, 1, &[&[1.0, 0.0]]);
        let fb = map(1, 3, &[&[0.0, 1.0], &[1.0, 0.0], &[2.0, 0.0]]);
        let ms = mutual_nns_dense(&fa, &fb, 0).unwrap();
        assert_eq!(ms.as_slice()[0].b, PixelCoord::new(0, 1));
    }

    #[test]
    fn zero_cells_never_match() {
        let fa = map(1, 2, &[&[0.0, 0.0], &[1.0, 0.0]]);
        let fb = map(1, 2, &[&[0.0, 0.0], &[0.0, 1.0]]);
        let ms = mutual_nns_dense(&fa, &fb, 0).unwrap();
        assert_eq!(ms.len(), 1);
        assert_eq!((ms.as_slice()[0].a.col, ms.as_slice()[0].b.col), (1, 1));
    }

    #[test]
    fn channel_mismatch() {
        let fa = map(1, 1, &[&[1.0, 0.0]]);
        let fb = map(1, 1, &[&[1.0, 0.0, 0.0]]);
        assert!(matches!(mutual_nns_dense(&fa, &fb, 0), Err(Error::ChannelMismatch(2, 3))));
    }

    #[test]
    fn dense_matches_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let (h, w, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=16));
            let (h2, w2) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let fa = random_map(&mut rng, h, w, c);
            let fb = random_map(&mut rng, h2, w2, c);
            let got: Vec<_> = mutual_nns_dense(&fa, &fb, 0)
                .unwrap()
                .iter()
                .map(|m| (m.a.linear_index(w), m.b.linear_index(w2)))
                .collect();
            assert_eq!(got, oracle(&fa, &fb));
        }
    }

    #[test]
    fn singleton_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fa = random_map(&mut rng, 3, 3, 4);
        let fb = random_map(&mut rng, 3, 3, 4);
        let (p, q) = (PixelCoord::new(1, 2), PixelCoord::new(0, 1));
        let ms = nns_within_regions(&fa, &fb, &[p], &[q], 0).unwrap();
        assert_eq!(ms.len(), 1);
        let m = ms.as_slice()[0];
        assert_eq!((m.a, m.b), (p, q));
        let d = feature_distance(fa.cell(1, 2), fb.cell(0, 1)).unwrap();
        assert_eq!(m.distance, d);
    }

    #[test]
    fn full_regions_equal_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let fa = random_map(&mut rng, 6, 6, 5);
            let fb = random_map(&mut rng, 6, 6, 5);
            let all: Vec<_> = (0..36).map(|i| PixelCoord::from_linear(i, 6)).collect();
            let mut shuffled = all.clone();
            shuffled.reverse();
            assert_eq!(
                nns_within_regions(&fa, &fb, &shuffled, &all, 0).unwrap(),
                mutual_nns_dense(&fa, &fb, 0).unwrap()
            );
        }
    }

    #[test]
    fn orthogonal_basis_patches_give_permutation() {
        // 4-d basis vectors laid out in different orders on each side.
        let e = |k: usize| {
            let mut v = vec![0.0f32; 4];
            v[k] = 1.0;
            v
        };
        let fa = FeatureMap::from_cells(2, 2, &[e(0), e(1), e(2), e(3)]).unwrap();
        let fb = FeatureMap::from_cells(2, 2, &[e(2), e(0), e(3), e(1)]).unwrap();
        let region: Vec<_> = (0..4).map(|i| PixelCoord::from_linear(i, 2)).collect();
        let ms = nns_within_regions(&fa, &fb, &region, &region, 0).unwrap();
        let perm: Vec<_> = ms.iter().map(|m| m.b.linear_index(2)).collect();
        assert_eq!(perm, vec![1, 3, 0, 2]);
        assert!(ms.iter().all(|m| m.distance.abs() < 1e-12));
    }

    #[test]
    fn region_errors() {
        let fa = map(1, 1, &[&[1.0]]);
        assert!(matches!(nns_within_regions(&fa, &fa, &[], &[PixelCoord::new(0, 0)], 0), Err(Error::EmptyRegion)));
        assert!(matches!(
            nns_within_regions(&fa, &fa, &[PixelCoord::new(0, 1)], &[PixelCoord::new(0, 0)], 0),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn ratio_removes_ambiguous_match() {
        // d1 = 0.1, d2 = 0.12 on the B side.
        let q = [1.0f32, 0.0];
        let at = |d: f64| {
            let c = 1.0 - d;
            [c as f32, (1.0 - c * c).sqrt() as f32]
        };
        let fa = map(1, 1, &[&q]);
        let fb = map(1, 2, &[&at(0.1), &at(0.12)]);
        let m = Match {
            level: 0,
            a: PixelCoord::new(0, 0),
            b: PixelCoord::new(0, 0),
            distance: 0.1,
        };
        let cand = RatioCandidates {
            a: vec![PixelCoord::new(0, 0)],
            b: vec![PixelCoord::new(0, 0), PixelCoord::new(0, 1)],
        };
        let ms = MatchSet::new(vec![m]);
        let strict = RatioTestConfig::new(0.6).unwrap();
        assert!(ratio_test(&ms, &fa, &fb, std::slice::from_ref(&cand), &strict).unwrap().is_empty());
        let one = RatioTestConfig::new(1.0).unwrap();
        assert_eq!(ratio_test(&ms, &fa, &fb, &[cand], &one).unwrap().len(), 1);
    }

    #[test]
    fn ratio_keeps_match_without_competitors() {
        let fa = map(1, 1, &[&[1.0, 0.0]]);
        let fb = map(1, 1, &[&[0.0, 1.0]]);
        let m = Match {
            level: 0,
            a: PixelCoord::new(0, 0),
            b: PixelCoord::new(0, 0),
            distance: 1.0,
        };
        let kept = ratio_test(
            &MatchSet::new(vec![m]),
            &fa,
            &fb,
            &[RatioCandidates::default()],
            &RatioTestConfig::new(0.1).unwrap(),
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn ratio_config_bounds() {
        assert!(RatioTestConfig::new(0.0).is_err());
        assert!(RatioTestConfig::new(1.01).is_err());
        assert!(RatioTestConfig::new(1.0).is_ok());
    }

    fn patch_instance(seed: u64) -> (FeatureMap, FeatureMap, MatchSet, Vec<RatioCandidates>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fa = random_map(&mut rng, 6, 6, 6);
        let fb = random_map(&mut rng, 6, 6, 6);
        let patches: Vec<Vec<PixelCoord>> = (0..9)
            .map(|p| {
                let (r, c) = (2 * (p / 3), 2 * (p % 3));
                vec![
                    PixelCoord::new(r, c),
                    PixelCoord::new(r, c + 1),
                    PixelCoord::new(r + 1, c),
                    PixelCoord::new(r + 1, c + 1),
                ]
            })
            .collect();
        let mut matches = Vec::new();
        let mut cands = Vec::new();
        for (pa, pb) in patches.iter().zip(patches.iter().rev()) {
            for m in nns_within_regions(&fa, &fb, pa, pb, 0).unwrap().into_vec() {
                matches.push(m);
                cands.push(RatioCandidates {
                    a: pa.clone(),
                    b: pb.clone(),
                });
            }
        }
        (fa, fb, MatchSet::new(matches), cands)
    }

    #[test]
    fn ratio_survivors_are_monotone_in_threshold() {
        for seed in 0..100 {
            let (fa, fb, ms, cands) = patch_instance(seed);
            let strict = ratio_test(&ms, &fa, &fb, &cands, &RatioTestConfig::new(0.6).unwrap()).unwrap();
            let loose = ratio_test(&ms, &fa, &fb, &cands, &RatioTestConfig::new(0.95).unwrap()).unwrap();
            assert!(strict.iter().all(|m| loose.as_slice().contains(m)));
            let all = ratio_test(&ms, &fa, &fb, &cands, &RatioTestConfig::new(1.0).unwrap()).unwrap();
            // random continuous features: second-nearest is strictly farther
            assert_eq!(all.len(), ms.len());
        }
    }

    #[test]
    fn global_ratio_is_stricter_than_patch_ratio() {
        for seed in 0..20 {
            let (fa, fb, ms, cands) = patch_instance(seed);
            let cfg = RatioTestConfig::new(0.95).unwrap();
            let patch = ratio_test(&ms, &fa, &fb, &cands, &cfg).unwrap();
            let global = ratio_test_global(&ms, &fa, &fb, &cfg).unwrap();
            assert!(global.iter().all(|m| patch.as_slice().contains(m)));
        }
    }

    proptest! {
        #[test]
        fn dense_search_is_symmetric_and_injective(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fa = random_map(&mut rng, h, w, 6);
            let fb = random_map(&mut rng, w, h, 6);
            let ab = mutual_nns_dense(&fa, &fb, 0).unwrap();
            let ba = mutual_nns_dense(&fb, &fa, 0).unwrap();
            prop_assert!(ab.is_injective());
            let mut lhs: Vec<_> = ab.iter().map(|m| (m.a, m.b)).collect();
            let mut rhs: Vec<_> = ba.swapped().iter().map(|m| (m.a, m.b)).collect();
            lhs.sort();
            rhs.sort();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn distance_in_range(f in proptest::collection::vec(-10f32..10.0, 5), g in proptest::collection::vec(-10f32..10.0, 5)) {
            let d = feature_distance(&f, &g).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            if l2_norm(&f) >= ZERO_NORM_EPS {
                prop_assert!(feature_distance(&f, &f).unwrap().abs() < 1e-12);
            }
        }
    }
}
