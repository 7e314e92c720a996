//! Multi-scale max-pooled window features.
//!
//! A scale `R×C` splits the map into `R` row bands and `C` column bands. Band
//! `k` of `R` over an extent `H` covers `[floor(k·H/R), floor((k+1)·H/R))`, so
//! every pixel belongs to exactly one window per scale. Windows are numbered
//! row-major.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense `C×H×W` activation grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Input(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::dimension(
                "feature_map",
                &[channels, height, width],
                &[data.len()],
            ));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossless())).collect(),
        }
    }
}

/// Grid of `rows × cols` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scale {
    pub rows: usize,
    pub cols: usize,
}

impl Scale {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Scale { rows, cols }
    }

    pub fn windows(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_global(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("scale `{s}` is not of the form RxC")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::Config(format!("scale `{s}` needs positive integers")))
        };
        Ok(Scale::new(parse(r)?, parse(c)?))
    }
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// `[floor(k·extent/parts), floor((k+1)·extent/parts))`
pub fn band(extent: usize, parts: usize, k: usize) -> (usize, usize) {
    (k * extent / parts, (k + 1) * extent / parts)
}

/// Ordered list of scales; scale 0 is the coarsest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PyramidConfig {
    scales: Vec<Scale>,
}

impl PyramidConfig {
    pub fn new(scales: Vec<Scale>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("pyramid needs at least one scale".into()));
        }
        if scales.iter().any(|s| s.rows == 0 || s.cols == 0) {
            return Err(Error::Config("pyramid scales need positive extents".into()));
        }
        Ok(PyramidConfig { scales })
    }

    /// `1x1, 1x2, 2x1, 2x2, 1x3, 3x1, 3x3`.
    pub fn seven_scale() -> Self {
        PyramidConfig {
            scales: vec![
                Scale::new(1, 1),
                Scale::new(1, 2),
                Scale::new(2, 1),
                Scale::new(2, 2),
                Scale::new(1, 3),
                Scale::new(3, 1),
                Scale::new(3, 3),
            ],
        }
    }

    pub fn global() -> Self {
        PyramidConfig {
            scales: vec![Scale::new(1, 1)],
        }
    }

    pub fn scales(&self) -> &[Scale] {
        &self.scales
    }

    pub fn has_global_first(&self) -> bool {
        self.scales[0].is_global()
    }

    /// `Σ_l R_l·C_l`
    pub fn total_windows(&self) -> usize {
        self.scales.iter().map(Scale::windows).sum()
    }

    /// `Σ_l (R_l·C_l)²`
    pub fn node_count(&self) -> usize {
        self.scales.iter().map(|s| s.windows() * s.windows()).sum()
    }

    /// First window row of each scale in the stacked feature matrix.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.scales
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.windows();
                o
            })
            .collect()
    }

    pub fn check_map(&self, height: usize, width: usize) -> Result<()> {
        for s in &self.scales {
            if s.rows > height || s.cols > width {
                return Err(Error::dimension(
                    "extract_pyramid",
                    &[height, width],
                    &[s.rows, s.cols],
                ));
            }
        }
        Ok(())
    }

    /// Windows of every scale, stacked in scale order.
    pub fn windows(&self, height: usize, width: usize) -> Result<Vec<Window>> {
        self.check_map(height, width)?;
        let mut out = Vec::with_capacity(self.total_windows());
        for s in &self.scales {
            for r in 0..s.rows {
                for c in 0..s.cols {
                    out.push(Window {
                        rows: band(height, s.rows, r),
                        cols: band(width, s.cols, c),
                    });
                }
            }
        }
        Ok(out)
    }
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self::seven_scale()
    }
}

impl FromStr for PyramidConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let scales = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Scale>>>()?;
        PyramidConfig::new(scales)
    }
}

impl fmt::Display for PyramidConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.scales.iter().map(Scale::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl TryFrom<String> for PyramidConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PyramidConfig> for String {
    fn from(p: PyramidConfig) -> String {
        p.to_string()
    }
}

/// Window vectors of all scales stacked as a `[Σ_l R_l·C_l, C]` matrix,
/// scale-major then row-major within a scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures<T> {
    config: PyramidConfig,
    features: Tensor<T>,
}

impl<T: Scalar> PyramidFeatures<T> {
    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Vectors of scale `l` (0-based), in row-major window order.
    pub fn scale(&self, l: usize) -> Vec<&[T]> {
        let offset = self.config.offsets()[l];
        (0..self.config.scales()[l].windows())
            .map(|i| self.features.row(offset + i))
            .collect()
    }

    pub fn vector(&self, l: usize, i: usize) -> &[T] {
        self.features.row(self.config.offsets()[l] + i)
    }
}

/// Per-channel max over every window of every scale.
pub fn extract_pyramid<T: Scalar>(
    fm: &FeatureMap<T>,
    cfg: &PyramidConfig,
) -> Result<PyramidFeatures<T>> {
    let windows = cfg.windows(fm.height(), fm.width())?;
    let c = fm.channels();
    let mut out = Vec::with_capacity(windows.len() * c);
    for w in &windows {
        for ch in 0..c {
            let mut best = T::neg_infinity();
            for y in w.rows.0..w.rows.1 {
                let start = fm.index(ch, y, w.cols.0);
                for &v in &fm.data()[start..start + (w.cols.1 - w.cols.0)] {
                    if v > best {
                        best = v;
                    }
                }
            }
            out.push(best);
        }
    }
    Ok(PyramidFeatures {
        config: cfg.clone(),
        features: Tensor::from_parts(vec![windows.len(), c], out),
    })
}

/// Differentiable variant of [`extract_pyramid`]. `fm` must be a recorded
/// `[C, H, W]` tensor; the result is the `[windows, C]` feature matrix.
pub fn extract_pyramid_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    fm: Var,
    cfg: &PyramidConfig,
) -> Result<Var> {
    let shape = tape.value(fm).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dimension("extract_pyramid", &shape, &[0, 0, 0]));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let windows = cfg.windows(h, w)?;
    let mut sets = Vec::with_capacity(windows.len() * c);
    for win in &windows {
        for ch in 0..c {
            let mut idx = Vec::with_capacity((win.rows.1 - win.rows.0) * (win.cols.1 - win.cols.0));
            for y in win.rows.0..win.rows.1 {
                for x in win.cols.0..win.cols.1 {
                    idx.push((ch * h + y) * w + x);
                }
            }
            sets.push(idx);
        }
    }
    tape.window_max(fm, &sets, &[windows.len(), c])
}

/// Global max-pooled descriptor `A(x)`.
pub fn global_aggregate<T: Scalar>(fm: &FeatureMap<T>) -> Vec<T> {
    let plane = fm.height() * fm.width();
    fm.data()
        .chunks_exact(plane)
        .map(|ch| ch.iter().copied().fold(T::neg_infinity(), T::max))
        .collect()
}
