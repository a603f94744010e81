//! Raster types shared across the pipeline: binary OoD masks, scalar score
//! fields, and labeled feature grids (the pixel analog of a segmentation
//! scene).

use std::io::Write;

use crate::error::{Error, Result};

/// H×W binary mask; 1 marks an out-of-distribution cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OodMask {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl OodMask {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("OodMask dimensions must be positive"));
        }
        if cells.len() != height * width {
            return Err(Error::shape(format!(
                "OodMask expects {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::domain("OodMask cells must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }
}

/// H×W raster of finite scores; higher = more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    height: usize,
    width: usize,
    cells: Vec<f64>,
}

impl ScoreField {
    pub fn new(height: usize, width: usize, cells: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("ScoreField dimensions must be positive"));
        }
        if cells.len() != height * width {
            return Err(Error::shape(format!(
                "ScoreField expects {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|c| !c.is_finite()) {
            return Err(Error::domain(format!(
                "ScoreField cells must be finite, got {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.width + col]
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    /// Min–max normalization to [0, 1]; a constant field maps to all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.cells.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return vec![0.0; self.cells.len()];
        }
        let span = hi - lo;
        self.cells.iter().map(|&v| (v - lo) / span).collect()
    }

    /// CSV with header `row,col,score`, row-major, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,col,score")?;
        for row in 0..self.height {
            for col in 0..self.width {
                writeln!(
                    out,
                    "{},{},{:.16e}",
                    row,
                    col,
                    self.cells[row * self.width + col]
                )?;
            }
        }
        Ok(())
    }
}

/// H×W raster of feature vectors with binary in/out labels (1 = inlier) and
/// the complementary OoD mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGrid {
    height: usize,
    width: usize,
    feat_dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    mask: OodMask,
}

impl LabeledGrid {
    /// The mask is derived as 1 − label, so complementarity holds by
    /// construction.
    pub fn new(
        height: usize,
        width: usize,
        feat_dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || feat_dim == 0 {
            return Err(Error::shape("LabeledGrid dimensions must be positive"));
        }
        let cells = height * width;
        if features.len() != cells * feat_dim {
            return Err(Error::shape(format!(
                "LabeledGrid expects {} feature values, got {}",
                cells * feat_dim,
                features.len()
            )));
        }
        if labels.len() != cells {
            return Err(Error::shape(format!(
                "LabeledGrid expects {} labels, got {}",
                cells,
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::domain("labels must be 0 or 1"));
        }
        if let Some(bad) = features.iter().find(|f| !f.is_finite()) {
            return Err(Error::domain(format!("features must be finite, got {bad}")));
        }
        let mask = OodMask::new(height, width, labels.iter().map(|&l| 1 - l).collect())?;
        Ok(Self {
            height,
            width,
            feat_dim,
            features,
            labels,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let idx = (row * self.width + col) * self.feat_dim;
        &self.features[idx..idx + self.feat_dim]
    }

    pub fn feature_flat(&self, cell: usize) -> &[f64] {
        let idx = cell * self.feat_dim;
        &self.features[idx..idx + self.feat_dim]
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn mask(&self) -> &OodMask {
        &self.mask
    }

    /// Gather the given cells into a 1×N grid (used for minibatching).
    pub fn subset(&self, cells: &[usize]) -> Result<LabeledGrid> {
        if cells.is_empty() {
            return Err(Error::shape("subset needs at least one cell"));
        }
        let mut features = Vec::with_capacity(cells.len() * self.feat_dim);
        let mut labels = Vec::with_capacity(cells.len());
        for &cell in cells {
            if cell >= self.cell_count() {
                return Err(Error::shape(format!(
                    "cell index {cell} out of range for {} cells",
                    self.cell_count()
                )));
            }
            features.extend_from_slice(self.feature_flat(cell));
            labels.push(self.labels[cell]);
        }
        LabeledGrid::new(1, cells.len(), self.feat_dim, features, labels)
    }

    /// CSV with header `row,col,label,f0..f{D-1}`, row-major, 17 significant
    /// digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "row,col,label")?;
        for d in 0..self.feat_dim {
            write!(out, ",f{d}")?;
        }
        writeln!(out)?;
        for row in 0..self.height {
            for col in 0..self.width {
                let cell = row * self.width + col;
                write!(out, "{},{},{}", row, col, self.labels[cell])?;
                for d in 0..self.feat_dim {
                    write!(out, ",{:.16e}", self.features[cell * self.feat_dim + d])?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}
