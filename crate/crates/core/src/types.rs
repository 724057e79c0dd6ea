//! Dense array and correspondence types shared by every stage of the matcher.
//!
//! All grids are stored row-major as `(row, col, channel)`; the binary
//! pyramid format and the image loaders use the same order.

use crate::error::{Error, Result};

/// Vectors whose L2 norm falls below this are treated as the zero vector.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// An image with values in `[0, 1]`, 1 (grayscale) or 3 (color) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidDimensions(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidDimensions(format!(
                "expected {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDimensions("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Builds a grayscale image from a per-pixel function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Luma conversion with weights (0.299, 0.587, 0.114); grayscale input is cloned.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) as f32)
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Returns a copy with every value passed through `f`.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Bilinear interpolation at real column `x` and row `y`.
///
/// Points with no neighbouring pixel inside the image (x <= -1, x >= W, and
/// likewise for y) return the zero vector. Points within one pixel of the
/// border interpolate with neighbour indices clamped to the border.
pub fn bilinear_sample(img: &Image, x: f64, y: f64) -> Vec<f32> {
    let mut out = vec![0.0; img.channels];
    bilinear_sample_into(img, x, y, &mut out);
    out
}

pub(crate) fn bilinear_sample_into(img: &Image, x: f64, y: f64, out: &mut [f32]) {
    // absorb round-off from projective mapping onto the integer grid
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
    let (x, y) = (snap(x), snap(y));
    let (w, h) = (img.width as f64, img.height as f64);
    if !(x > -1.0 && x < w && y > -1.0 && y < h) {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let clamp_col = |c: f64| c.clamp(0.0, w - 1.0) as usize;
    let clamp_row = |r: f64| r.clamp(0.0, h - 1.0) as usize;
    let (c0, c1) = (clamp_col(x0), clamp_col(x0 + 1.0));
    let (r0, r1) = (clamp_row(y0), clamp_row(y0 + 1.0));
    let p00 = img.pixel(r0, c0);
    let p01 = img.pixel(r0, c1);
    let p10 = img.pixel(r1, c0);
    let p11 = img.pixel(r1, c1);
    for ch in 0..img.channels {
        let top = p00[ch] as f64 * (1.0 - fx) + p01[ch] as f64 * fx;
        let bottom = p10[ch] as f64 * (1.0 - fx) + p11[ch] as f64 * fx;
        out[ch] = (top * (1.0 - fy) + bottom * fy) as f32;
    }
}

/// One dense feature grid `H_l x W_l x C_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidDimensions(format!(
                "feature map must be non-empty, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidDimensions(format!(
                "expected {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDimensions(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_cells(height: usize, width: usize, cells: &[Vec<f32>]) -> Result<Self> {
        let channels = cells.first().map_or(0, Vec::len);
        if cells.iter().any(|c| c.len() != channels) {
            return Err(Error::InvalidDimensions("ragged cell vectors".into()));
        }
        Self::new(height, width, channels, cells.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        self.cell_at(row * self.width + col)
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> &[f32] {
        let start = index * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Scales each cell vector to unit L2 norm; cells below [`ZERO_NORM_EPS`] become zero.
    pub fn l2_normalize_channels(&self) -> FeatureMap {
        let mut data = self.data.clone();
        for cell in data.chunks_exact_mut(self.channels) {
            let norm = l2_norm(cell);
            if norm < ZERO_NORM_EPS {
                cell.iter_mut().for_each(|v| *v = 0.0);
            } else {
                cell.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
        FeatureMap { data, ..*self }
    }

    /// 2x2 mean pooling to `(ceil(H/2), ceil(W/2))`; edge windows average only
    /// the cells inside the map.
    pub fn average_pool2x(&self) -> FeatureMap {
        let out_h = self.height.div_ceil(2);
        let out_w = self.width.div_ceil(2);
        let c = self.channels;
        let mut data = vec![0.0f32; out_h * out_w * c];
        let mut acc = vec![0.0f64; c];
        for orow in 0..out_h {
            for ocol in 0..out_w {
                acc.iter_mut().for_each(|v| *v = 0.0);
                let mut count = 0usize;
                for row in 2 * orow..(2 * orow + 2).min(self.height) {
                    for col in 2 * ocol..(2 * ocol + 2).min(self.width) {
                        for (a, &v) in acc.iter_mut().zip(self.cell(row, col)) {
                            *a += v as f64;
                        }
                        count += 1;
                    }
                }
                let dst = &mut data[(orow * out_w + ocol) * c..][..c];
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = (a / count as f64) as f32;
                }
            }
        }
        FeatureMap {
            height: out_h,
            width: out_w,
            channels: c,
            data,
        }
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Ordered feature levels `F_0` (finest) through `F_k` (coarsest).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
    source_size: (usize, usize),
}

impl FeaturePyramid {
    /// Levels must shrink strictly along both axes. `source_size` is `(H, W)`
    /// of the image the pyramid describes.
    pub fn new(levels: Vec<FeatureMap>, source_size: (usize, usize)) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InconsistentSizes("pyramid has no levels".into()));
        }
        for (l, pair) in levels.windows(2).enumerate() {
            if pair[1].height >= pair[0].height || pair[1].width >= pair[0].width {
                return Err(Error::InconsistentSizes(format!(
                    "level {} ({}x{}) does not shrink below level {} ({}x{})",
                    l + 1,
                    pair[1].height,
                    pair[1].width,
                    l,
                    pair[0].height,
                    pair[0].width
                )));
            }
        }
        Ok(Self {
            levels,
            source_size,
        })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &FeatureMap {
        &self.levels[l]
    }

    /// Number of levels above `F_0`, i.e. `k`.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn into_levels(self) -> Vec<FeatureMap> {
        self.levels
    }
}

/// Integer cell position inside one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    #[inline]
    pub fn linear_index(self, width: usize) -> usize {
        self.row * width + self.col
    }

    pub fn from_linear(index: usize, width: usize) -> Self {
        Self {
            row: index / width,
            col: index % width,
        }
    }
}

/// A correspondence between a cell of map A and a cell of the counterpart map,
/// both at pyramid level `level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub level: usize,
    pub a: PixelCoord,
    pub b: PixelCoord,
    pub distance: f64,
}

/// Ordered list of matches, one-to-one in both endpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    matches: Vec<Match>,
}

impl MatchSet {
    pub fn new(matches: Vec<Match>) -> Self {
        Self { matches }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Match> {
        self.matches.iter()
    }

    pub fn as_slice(&self) -> &[Match] {
        &self.matches
    }

    pub fn into_vec(self) -> Vec<Match> {
        self.matches
    }

    /// Endpoint-swapped copy (A becomes B).
    pub fn swapped(&self) -> MatchSet {
        MatchSet::new(
            self.matches
                .iter()
                .map(|m| Match {
                    a: m.b,
                    b: m.a,
                    ..*m
                })
                .collect(),
        )
    }

    /// No coordinate appears twice on either side.
    pub fn is_injective(&self) -> bool {
        let mut seen_a = std::collections::HashSet::with_capacity(self.len());
        let mut seen_b = std::collections::HashSet::with_capacity(self.len());
        self.matches
            .iter()
            .all(|m| seen_a.insert(m.a) && seen_b.insert(m.b))
    }
}

impl<'a> IntoIterator for &'a MatchSet {
    type Item = &'a Match;
    type IntoIter = std::slice::Iter<'a, Match>;

    fn into_iter(self) -> Self::IntoIter {
        self.matches.iter()
    }
}

impl FromIterator<Match> for MatchSet {
    fn from_iter<I: IntoIterator<Item = Match>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}
