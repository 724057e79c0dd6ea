//! Flexible hierarchical refinement.
//!
//! Dense mutual NNS on the deepest level seeds the matches. Each match at
//! level `l` then pairs the 2x2 child patches of its endpoints on level
//! `l - 1`, and mutual NNS inside each patch pair yields the level `l - 1`
//! matches. No distance threshold or ratio test is applied on the way down;
//! the ratio test runs once, on the full-resolution descriptor level.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matcher::{self, RatioCandidates, RatioScope, RatioTestConfig};
use crate::types::{FeatureMap, FeaturePyramid, Match, MatchSet, PixelCoord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhrConfig {
    pub final_ratio: RatioTestConfig,
    /// Deepest-level matches required to continue.
    pub min_coarse_matches: usize,
}

impl Default for FhrConfig {
    fn default() -> Self {
        Self {
            final_ratio: RatioTestConfig::default(),
            min_coarse_matches: 4,
        }
    }
}

impl FhrConfig {
    pub fn validate(&self) -> Result<()> {
        self.final_ratio.validate()?;
        if self.min_coarse_matches < 4 {
            return Err(Error::InvalidConfig("min_coarse_matches must be >= 4".into()));
        }
        Ok(())
    }
}

/// The cells of `target` covered by `p` one level up: `{2r, 2r+1} x {2c, 2c+1}`
/// clipped to the map.
pub fn child_patch(p: PixelCoord, target: &FeatureMap) -> Vec<PixelCoord> {
    let mut out = Vec::with_capacity(4);
    for row in 2 * p.row..2 * p.row + 2 {
        for col in 2 * p.col..2 * p.col + 2 {
            let c = PixelCoord::new(row, col);
            if target.contains(c) {
                out.push(c);
            }
        }
    }
    out
}

/// Refines one level down, also returning the parent index of each child match.
fn refine_with_parents(matches: &MatchSet, fa: &FeatureMap, fc: &FeatureMap) -> Result<(MatchSet, Vec<usize>)> {
    let per_parent: Vec<Vec<Match>> = matches
        .as_slice()
        .par_iter()
        .map(|m| {
            let level = m.level.saturating_sub(1);
            let ra = child_patch(m.a, fa);
            let rc = child_patch(m.b, fc);
            if ra.is_empty() || rc.is_empty() {
                // parent cell lies outside the finer map (mismatched learned sizes)
                return Ok(Vec::new());
            }
            matcher::nns_within_regions(fa, fc, &ra, &rc, level).map(MatchSet::into_vec)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(per_parent.iter().map(Vec::len).sum());
    let mut parents = Vec::with_capacity(out.capacity());
    for (parent, children) in per_parent.into_iter().enumerate() {
        parents.extend(std::iter::repeat_n(parent, children.len()));
        out.extend(children);
    }
    Ok((MatchSet::new(out), parents))
}

/// Maps matches on level `l` to matches on level `l - 1` (the level of `fa`/`fc`).
pub fn refine_level(matches: &MatchSet, fa: &FeatureMap, fc: &FeatureMap) -> Result<MatchSet> {
    if fa.channels() != fc.channels() {
        return Err(Error::ChannelMismatch(fa.channels(), fc.channels()));
    }
    refine_with_parents(matches, fa, fc).map(|(m, _)| m)
}

/// Result of a refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct FhrOutput {
    /// Level-0 matches that passed the ratio test.
    pub matches: MatchSet,
    /// Match count per level before the ratio test, indexed by level.
    pub level_counts: Vec<usize>,
}

impl FhrOutput {
    pub fn pre_ratio_count(&self) -> usize {
        self.level_counts[0]
    }
}

/// Matches of one level with the index of their parent on the level above.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStage {
    pub level: usize,
    pub matches: Vec<Match>,
    /// Empty for the deepest level.
    pub parents: Vec<usize>,
}

/// Per-level record of a refinement run, deepest level first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FhrTrace {
    pub stages: Vec<TraceStage>,
    /// Indices into the level-0 stage of the matches that survived the ratio test.
    pub survivors: Vec<usize>,
}

impl FhrTrace {
    /// The chain of matches from the deepest level down to `stages.last()[index]`.
    pub fn chain(&self, index: usize) -> Vec<Match> {
        let mut chain = Vec::with_capacity(self.stages.len());
        let mut idx = index;
        for stage in self.stages.iter().rev() {
            chain.push(stage.matches[idx]);
            if let Some(&p) = stage.parents.get(idx) {
                idx = p;
            }
        }
        chain.reverse();
        chain
    }

    /// Surviving level-0 matches whose ancestry breaks
    /// `|child - 2 * parent| <= 1` on either side at any level.
    pub fn ancestry_violations(&self) -> usize {
        let near = |child: PixelCoord, parent: PixelCoord| {
            child.row.abs_diff(2 * parent.row) <= 1 && child.col.abs_diff(2 * parent.col) <= 1
        };
        self.survivors
            .iter()
            .filter(|&&i| {
                self.chain(i)
                    .windows(2)
                    .any(|w| w[1].level + 1 != w[0].level || !near(w[1].a, w[0].a) || !near(w[1].b, w[0].b))
            })
            .count()
    }

    /// One line per match: `level aRow aCol cRow cCol distance`.
    pub fn write_text(&self, mut w: impl Write) -> io::Result<()> {
        for stage in &self.stages {
            writeln!(w, "# level {} matches {}", stage.level, stage.matches.len())?;
            for m in &stage.matches {
                writeln!(
                    w,
                    "{} {} {} {} {} {:.6}",
                    m.level, m.a.row, m.a.col, m.b.row, m.b.col, m.distance
                )?;
            }
        }
        writeln!(w, "# survivors {}", self.survivors.len())
    }
}

fn check_pyramids(pyr_a: &FeaturePyramid, pyr_c: &FeaturePyramid) -> Result<usize> {
    if pyr_a.depth() != pyr_c.depth() {
        return Err(Error::DepthMismatch(pyr_a.depth() + 1, pyr_c.depth() + 1));
    }
    if pyr_a.depth() < 1 {
        return Err(Error::InvalidConfig("refinement needs at least two pyramid levels".into()));
    }
    for (l, (a, c)) in pyr_a.levels().iter().zip(pyr_c.levels()).enumerate() {
        if a.channels() != c.channels() {
            return Err(Error::ShapeMismatch(format!(
                "level {l}: {} vs {} channels",
                a.channels(),
                c.channels()
            )));
        }
    }
    Ok(pyr_a.depth())
}

fn run(pyr_a: &FeaturePyramid, pyr_c: &FeaturePyramid, cfg: &FhrConfig, mut trace: Option<&mut FhrTrace>) -> Result<FhrOutput> {
    cfg.validate()?;
    let k = check_pyramids(pyr_a, pyr_c)?;
    let mut level_counts = vec![0; k + 1];

    let mut current = matcher::mutual_nns_dense(pyr_a.level(k), pyr_c.level(k), k)?;
    level_counts[k] = current.len();
    if current.len() < cfg.min_coarse_matches {
        return Err(Error::InsufficientMatches {
            found: current.len(),
            required: cfg.min_coarse_matches,
        });
    }
    if let Some(t) = trace.as_deref_mut() {
        t.stages.clear();
        t.stages.push(TraceStage {
            level: k,
            matches: current.as_slice().to_vec(),
            parents: Vec::new(),
        });
    }

    let mut parent_set = MatchSet::default();
    let mut parents = Vec::new();
    for l in (0..k).rev() {
        let (next, next_parents) = refine_with_parents(&current, pyr_a.level(l), pyr_c.level(l))?;
        level_counts[l] = next.len();
        if let Some(t) = trace.as_deref_mut() {
            t.stages.push(TraceStage {
                level: l,
                matches: next.as_slice().to_vec(),
                parents: next_parents.clone(),
            });
        }
        parent_set = std::mem::replace(&mut current, next);
        parents = next_parents;
    }

    let (fa, fc) = (pyr_a.level(0), pyr_c.level(0));
    let ratio = &cfg.final_ratio;
    let filtered = match ratio.scope {
        RatioScope::Patch => {
            let candidates: Vec<RatioCandidates> = parents
                .iter()
                .map(|&p| {
                    let parent = parent_set.as_slice()[p];
                    RatioCandidates {
                        a: child_patch(parent.a, fa),
                        b: child_patch(parent.b, fc),
                    }
                })
                .collect();
            matcher::ratio_test(&current, fa, fc, &candidates, ratio)?
        }
        RatioScope::Global => matcher::ratio_test_global(&current, fa, fc, ratio)?,
    };

    if let Some(t) = trace {
        // ratio_test preserves order, so survivors can be recovered by a merge walk
        let mut survivors = Vec::with_capacity(filtered.len());
        let mut it = filtered.iter().peekable();
        for (i, m) in current.iter().enumerate() {
            if it.peek().is_some_and(|f| *f == m) {
                survivors.push(i);
                it.next();
            }
        }
        t.survivors = survivors;
    }

    Ok(FhrOutput {
        matches: filtered,
        level_counts,
    })
}

/// Runs the `k + 1` refinement iterations from `F_k` to `F_0` between A and C.
pub fn run_fhr(pyr_a: &FeaturePyramid, pyr_c: &FeaturePyramid, cfg: &FhrConfig) -> Result<FhrOutput> {
    run(pyr_a, pyr_c, cfg, None)
}

/// [`run_fhr`] that also records every level's matches and their parents.
pub fn run_fhr_traced(pyr_a: &FeaturePyramid, pyr_c: &FeaturePyramid, cfg: &FhrConfig) -> Result<(FhrOutput, FhrTrace)> {
    let mut trace = FhrTrace::default();
    let out = run(pyr_a, pyr_c, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{builtin_pyramid, DescriptorConfig};
    use crate::types::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn noise_image(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(size, size, |_, _| rng.gen::<f32>()).unwrap()
    }

    #[test]
    fn child_patch_examples() {
        let t4 = FeatureMap::new(4, 4, 1, vec![0.0; 16]).unwrap();
        assert_eq!(
            child_patch(PixelCoord::new(0, 0), &t4),
            vec![PixelCoord::new(0, 0), PixelCoord::new(0, 1), PixelCoord::new(1, 0), PixelCoord::new(1, 1)]
        );
        let t3 = FeatureMap::new(3, 3, 1, vec![0.0; 9]).unwrap();
        assert_eq!(child_patch(PixelCoord::new(1, 1), &t3), vec![PixelCoord::new(2, 2)]);
        assert_eq!(child_patch(PixelCoord::new(0, 1), &t3).len(), 2);
    }

    #[test]
    fn child_patches_partition_target() {
        for (h, w) in [(8, 8), (7, 5)] {
            let target = FeatureMap::new(h, w, 1, vec![0.0; h * w]).unwrap();
            let mut seen = HashSet::new();
            for r in 0..h.div_ceil(2) {
                for c in 0..w.div_ceil(2) {
                    for p in child_patch(PixelCoord::new(r, c), &target) {
                        assert!(seen.insert(p), "{p:?} covered twice");
                    }
                }
            }
            assert_eq!(seen.len(), h * w);
        }
    }

    #[test]
    fn refine_single_parent_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fa = random_map(&mut rng, 4, 4, 6);
        let mut fc = random_map(&mut rng, 4, 4, 6);
        // plant a dominant pair: fc(3,2) == fa(2,3)
        let mut data = fc.data().to_vec();
        data[(3 * 4 + 2) * 6..][..6].copy_from_slice(fa.cell(2, 3));
        fc = FeatureMap::new(4, 4, 6, data).unwrap();
        let parent = MatchSet::new(vec![Match {
            level: 1,
            a: PixelCoord::new(1, 1),
            b: PixelCoord::new(1, 1),
            distance: 0.0,
        }]);
        let out = refine_level(&parent, &fa, &fc).unwrap();
        assert!(out.iter().any(|m| m.a == PixelCoord::new(2, 3) && m.b == PixelCoord::new(3, 2)));
        // brute force over the 2x2 x 2x2 block
        let block = |r0, c0| [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
        let mut expected = Vec::new();
        for &(ar, ac) in &block(2, 2) {
            let d = |p: (usize, usize), q: (usize, usize)| {
                matcher::feature_distance(fa.cell(p.0, p.1), fc.cell(q.0, q.1)).unwrap()
            };
            let best_c = *block(2, 2).iter().min_by(|x, y| d((ar, ac), **x).total_cmp(&d((ar, ac), **y))).unwrap();
            let best_a = *block(2, 2).iter().min_by(|x, y| d(**x, best_c).total_cmp(&d(**y, best_c))).unwrap();
            if best_a == (ar, ac) {
                expected.push((PixelCoord::new(ar, ac), PixelCoord::new(best_c.0, best_c.1)));
            }
        }
        let got: Vec<_> = out.iter().map(|m| (m.a, m.b)).collect();
        assert_eq!(got, expected);
        assert!(out.iter().all(|m| m.level == 0));
    }

    #[test]
    fn refine_empty_is_empty() {
        let fm = FeatureMap::new(2, 2, 1, vec![1.0; 4]).unwrap();
        assert!(refine_level(&MatchSet::default(), &fm, &fm).unwrap().is_empty());
    }

    #[test]
    fn refine_identity_parents_on_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(&mut rng, 6, 6, 8);
        let parents: MatchSet = (0..9)
            .map(|i| {
                let p = PixelCoord::from_linear(i, 3);
                Match { level: 1, a: p, b: p, distance: 0.0 }
            })
            .collect();
        let (out, idx) = refine_with_parents(&parents, &f, &f).unwrap();
        assert_eq!(out.len(), 36);
        assert!(out.iter().all(|m| m.a == m.b));
        for p in 0..9 {
            assert!(idx.iter().filter(|&&i| i == p).count() <= 4);
        }
        assert!(out.is_injective());
    }

    #[test]
    fn self_matching_pyramid_is_near_identity() {
        let img = noise_image(3, 64);
        let pyr = builtin_pyramid(&img, &DescriptorConfig { patch_radius: 2, pyramid_depth: 3 }).unwrap();
        let (out, trace) = run_fhr_traced(&pyr, &pyr, &FhrConfig::default()).unwrap();
        assert!(out.matches.len() > 64 * 64 * 9 / 10, "{}", out.matches.len());
        assert!(out.matches.iter().all(|m| m.a == m.b && m.distance < 1e-6));
        assert_eq!(trace.ancestry_violations(), 0);
        assert_eq!(trace.survivors.len(), out.matches.len());
        assert!(out.matches.is_injective());
    }

    #[test]
    fn unrelated_noise_yields_valid_sparse_output() {
        let pa = builtin_pyramid(&noise_image(1, 64), &DescriptorConfig { patch_radius: 2, pyramid_depth: 3 }).unwrap();
        let pc = builtin_pyramid(&noise_image(2, 64), &DescriptorConfig { patch_radius: 2, pyramid_depth: 3 }).unwrap();
        let (out, trace) = run_fhr_traced(&pa, &pc, &FhrConfig::default()).unwrap();
        assert!(out.matches.is_injective());
        assert!(out.matches.len() <= out.pre_ratio_count());
        assert!(out.matches.len() < 64 * 64 / 4);
        assert_eq!(trace.ancestry_violations(), 0);
    }

    #[test]
    fn depth_mismatch_is_an_error() {
        let img = noise_image(1, 32);
        let p2 = builtin_pyramid(&img, &DescriptorConfig { patch_radius: 2, pyramid_depth: 2 }).unwrap();
        let p3 = builtin_pyramid(&img, &DescriptorConfig { patch_radius: 2, pyramid_depth: 3 }).unwrap();
        assert!(matches!(run_fhr(&p2, &p3, &FhrConfig::default()), Err(Error::DepthMismatch(3, 4))));
    }

    #[test]
    fn blank_pyramids_have_no_coarse_matches() {
        let img = Image::from_fn(32, 32, |_, _| 0.5).unwrap();
        let p = builtin_pyramid(&img, &DescriptorConfig { patch_radius: 2, pyramid_depth: 2 }).unwrap();
        assert!(matches!(
            run_fhr(&p, &p, &FhrConfig::default()),
            Err(Error::InsufficientMatches { found: 0, required: 4 })
        ));
    }

    #[test]
    fn deterministic_output() {
        let pa = builtin_pyramid(&noise_image(4, 48), &DescriptorConfig { patch_radius: 2, pyramid_depth: 2 }).unwrap();
        let pc = builtin_pyramid(&noise_image(5, 48), &DescriptorConfig { patch_radius: 2, pyramid_depth: 2 }).unwrap();
        let cfg = FhrConfig::default();
        assert_eq!(run_fhr(&pa, &pc, &cfg).unwrap(), run_fhr(&pa, &pc, &cfg).unwrap());
    }

    #[test]
    fn trace_text_lists_every_match() {
        let img = noise_image(6, 32);
        let pyr = builtin_pyramid(&img, &DescriptorConfig { patch_radius: 2, pyramid_depth: 2 }).unwrap();
        let (_, trace) = run_fhr_traced(&pyr, &pyr, &FhrConfig::default()).unwrap();
        let mut buf = Vec::new();
        trace.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let data_lines = text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(data_lines, trace.stages.iter().map(|s| s.matches.len()).sum::<usize>());
    }
}
