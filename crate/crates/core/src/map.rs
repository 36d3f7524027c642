//! Row-major maps over an integer pixel grid.
//!
//! All raster data in this crate shares one coordinate convention: the cell
//! in column `i`, row `j` has its center at the continuous coordinate
//! `(i + 0.5, j + 0.5)`. A continuous point `(x, y)` therefore falls into
//! cell `(floor(x), floor(y))`, and that cell's center is the nearest one.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("grid dimensions must be at least 1x1, got {width}x{height}")]
    Degenerate { width: usize, height: usize },
    #[error("grid mismatch: {0}x{1} vs {2}x{3}")]
    Mismatch(usize, usize, usize, usize),
}

/// Integer raster dimensions plus the pixel-center coordinate convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::Degenerate { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether a continuous coordinate lies inside the raster, half-open on
    /// the far edges.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    /// Cell holding a continuous coordinate, or `None` when outside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        Some((x as usize, y as usize))
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        debug_assert!(col < self.width && row < self.height);
        row * self.width + col
    }

    pub fn center(&self, col: usize, row: usize) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }
}

/// Dense row-major storage aligned with a [`PixelGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Map2<T> {
    grid: PixelGrid,
    data: Vec<T>,
}

impl<T: Clone> Map2<T> {
    pub fn filled(grid: PixelGrid, value: T) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }
}

impl<T> Map2<T> {
    pub fn from_vec(grid: PixelGrid, data: Vec<T>) -> Self {
        assert_eq!(data.len(), grid.len(), "map data does not match grid");
        Self { grid, data }
    }

    pub fn from_fn(grid: PixelGrid, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for row in 0..grid.height {
            for col in 0..grid.width {
                data.push(f(col, row));
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn at(&self, col: usize, row: usize) -> &T {
        &self.data[self.grid.index(col, row)]
    }

    pub fn at_mut(&mut self, col: usize, row: usize) -> &mut T {
        let idx = self.grid.index(col, row);
        &mut self.data[idx]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

impl Map2<f64> {
    /// Bilinear interpolation at a continuous coordinate, clamped to the
    /// raster border (samples outside extend the edge cells).
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (w, h) = (self.grid.width, self.grid.height);
        let u = x - 0.5;
        let v = y - 0.5;
        let i0 = u.floor();
        let j0 = v.floor();
        let fx = u - i0;
        let fy = v - j0;
        let clamp = |i: f64, n: usize| -> usize { (i.max(0.0) as usize).min(n - 1) };
        let (ia, ib) = (clamp(i0, w), clamp(i0 + 1.0, w));
        let (ja, jb) = (clamp(j0, h), clamp(j0 + 1.0, h));
        let v00 = *self.at(ia, ja);
        let v10 = *self.at(ib, ja);
        let v01 = *self.at(ia, jb);
        let v11 = *self.at(ib, jb);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A per-pixel unnormalized log-density over an image grid.
pub type ScoreMap = Map2<f64>;

/// A per-pixel boolean mask (validity, deltas, domains).
pub type BinaryMap = Map2<bool>;

/// Dense multi-channel map with the channel values of one pixel stored
/// contiguously (pixel-major layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    grid: PixelGrid,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelMap {
    pub fn zeros(grid: PixelGrid, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid.len() * channels],
        }
    }

    pub fn from_vec(grid: PixelGrid, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), grid.len() * channels);
        Self {
            grid,
            channels,
            data,
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[f64] {
        let base = self.grid.index(col, row) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn pixel_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let base = self.grid.index(col, row) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The four border-clamped lattice taps of a bilinear lookup at a
    /// continuous coordinate, as `(col, row, weight)`. Clamped duplicates
    /// keep their separate weights.
    pub fn bilinear_taps(&self, x: f64, y: f64) -> [(usize, usize, f64); 4] {
        let (w, h) = (self.grid.width, self.grid.height);
        let u = x - 0.5;
        let v = y - 0.5;
        let i0 = u.floor();
        let j0 = v.floor();
        let fx = u - i0;
        let fy = v - j0;
        let clamp = |i: f64, n: usize| -> usize { (i.max(0.0) as usize).min(n - 1) };
        let (ia, ib) = (clamp(i0, w), clamp(i0 + 1.0, w));
        let (ja, jb) = (clamp(j0, h), clamp(j0 + 1.0, h));
        [
            (ia, ja, (1.0 - fx) * (1.0 - fy)),
            (ib, ja, fx * (1.0 - fy)),
            (ia, jb, (1.0 - fx) * fy),
            (ib, jb, fx * fy),
        ]
    }

    /// Bilinear interpolation of the channel vector at a continuous
    /// coordinate, clamped at the border. Writes into `out`.
    pub fn sample_bilinear_into(&self, x: f64, y: f64, out: &mut [f64]) {
        assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        for (col, row, w) in self.bilinear_taps(x, y) {
            let p = self.pixel(col, row);
            for c in 0..self.channels {
                out[c] += w * p[c];
            }
        }
    }
}
