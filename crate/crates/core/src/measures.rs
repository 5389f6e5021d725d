//! Images as discrete probability measures on pixel grids, and the squared
//! Euclidean ground cost between grid points.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("degenerate measure: image has no positive intensity")]
    Degenerate,
    #[error("grid dimensions must be at least 1x1, got {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
    #[error("expected {expected} intensities for the grid, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("intensity at index {index} is negative or not finite ({value})")]
    InvalidIntensity { index: usize, value: f64 },
}

/// A probability measure supported on an `height x width` pixel grid.
///
/// Weights are stored row-major; pixel `i` sits at `(i / width, i % width)`.
/// Zero-weight pixels are kept so the measure stays aligned with the image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl GridMeasure {
    /// Normalizes a nonnegative intensity grid so its weights sum to one.
    pub fn from_intensities(
        height: usize,
        width: usize,
        raw: &[f64],
    ) -> Result<Self, MeasureError> {
        if height == 0 || width == 0 {
            return Err(MeasureError::EmptyGrid { height, width });
        }
        if raw.len() != height * width {
            return Err(MeasureError::LengthMismatch {
                expected: height * width,
                got: raw.len(),
            });
        }
        if let Some((index, &value)) = raw
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(MeasureError::InvalidIntensity { index, value });
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(MeasureError::Degenerate);
        }
        let weights = raw.iter().map(|v| v / total).collect();
        Ok(Self {
            height,
            width,
            weights,
        })
    }

    /// Byte image convenience wrapper around [`GridMeasure::from_intensities`].
    pub fn from_bytes(height: usize, width: usize, raw: &[u8]) -> Result<Self, MeasureError> {
        let raw: Vec<f64> = raw.iter().map(|&b| f64::from(b)).collect();
        Self::from_intensities(height, width, &raw)
    }

    /// Dirac mass at `(row, col)`.
    pub fn dirac(height: usize, width: usize, row: usize, col: usize) -> Self {
        let mut raw = vec![0.0; height * width];
        raw[row * width + col] = 1.0;
        Self::from_intensities(height, width, &raw).expect("dirac inside the grid")
    }

    /// Uniform measure over the listed `(row, col)` pixels.
    pub fn uniform_on(
        height: usize,
        width: usize,
        points: &[(usize, usize)],
    ) -> Result<Self, MeasureError> {
        let mut raw = vec![0.0; height * width];
        for &(r, c) in points {
            raw[r * width + c] += 1.0;
        }
        Self::from_intensities(height, width, &raw)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Integer pixel coordinates of flat index `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    /// Indices of pixels carrying positive mass, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// The same measure scaled to a density relative to the uniform measure
    /// (mean value one), the representation fed to the encoders.
    pub fn density(&self) -> Vec<f64> {
        let n = self.weights.len() as f64;
        self.weights.iter().map(|w| w * n).collect()
    }
}

/// Squared Euclidean distances between all pixel pairs of an `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundCost {
    height: usize,
    width: usize,
    entries: Vec<u32>,
}

impl GroundCost {
    pub fn new(height: usize, width: usize) -> Result<Self, MeasureError> {
        if height == 0 || width == 0 {
            return Err(MeasureError::EmptyGrid { height, width });
        }
        let n = height * width;
        let mut entries = vec![0u32; n * n];
        for i in 0..n {
            let (ri, ci) = (i / width, i % width);
            for j in 0..n {
                let (rj, cj) = (j / width, j % width);
                let dr = ri.abs_diff(rj) as u32;
                let dc = ci.abs_diff(cj) as u32;
                entries[i * n + j] = dr * dr + dc * dc;
            }
        }
        Ok(Self {
            height,
            width,
            entries,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of grid points, `H * W`.
    pub fn size(&self) -> usize {
        self.height * self.width
    }

    /// Cost between pixels `i` and `j` in pixel² units.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.entries[i * self.size() + j]
    }

    pub fn matches(&self, m: &GridMeasure) -> bool {
        m.height() == self.height && m.width() == self.width
    }
}

/// Convenience for [`GridMeasure::from_intensities`].
pub fn normalize_image(
    height: usize,
    width: usize,
    raw: &[f64],
) -> Result<GridMeasure, MeasureError> {
    GridMeasure::from_intensities(height, width, raw)
}

/// Convenience for [`GroundCost::new`].
pub fn ground_cost(height: usize, width: usize) -> Result<GroundCost, MeasureError> {
    GroundCost::new(height, width)
}
