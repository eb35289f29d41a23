//! Dense 2D rasters with physical pixel spacing.
//!
//! Rows run along depth (axial, `z`), columns run laterally (`x`). Row 0 is
//! the shallowest row. `origin_x`/`origin_z` give the position in mm of the
//! top-left corner of pixel (0, 0), so pixel centers sit at
//! `origin + (index + 0.5) * spacing`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    rows: usize,
    cols: usize,
    /// Lateral spacing in mm.
    pub dx: f64,
    /// Axial spacing in mm.
    pub dz: f64,
    pub origin_x: f64,
    pub origin_z: f64,
    data: Vec<f64>,
}

impl Image2D {
    pub fn zeros(rows: usize, cols: usize, dx: f64, dz: f64) -> Self {
        Self::filled(rows, cols, dx, dz, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, dx: f64, dz: f64, value: f64) -> Self {
        Image2D {
            rows,
            cols,
            dx,
            dz,
            origin_x: 0.0,
            origin_z: 0.0,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, dx: f64, dz: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Image2D::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Image2D {
            rows,
            cols,
            dx,
            dz,
            origin_x: 0.0,
            origin_z: 0.0,
            data,
        })
    }

    pub fn with_origin(mut self, origin_x: f64, origin_z: f64) -> Self {
        self.origin_x = origin_x;
        self.origin_z = origin_z;
        self
    }

    /// Copies spacing and origin from `other`.
    pub fn with_geometry_of(mut self, other: &Image2D) -> Self {
        self.dx = other.dx;
        self.dz = other.dz;
        self.origin_x = other.origin_x;
        self.origin_z = other.origin_z;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// Physical (x, z) position in mm of a pixel center.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.dx,
            self.origin_z + (row as f64 + 0.5) * self.dz,
        )
    }

    /// Lateral and axial physical extent in mm.
    pub fn extent(&self) -> (f64, f64) {
        (self.cols as f64 * self.dx, self.rows as f64 * self.dz)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        Image2D {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Image2D) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub(crate) fn check_same_shape(&self, other: &Image2D, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ))
        }
    }

    /// Averages non-overlapping `factor` x `factor` blocks.
    pub fn avg_pool(&self, factor: usize) -> Result<Image2D> {
        if factor == 0 || !self.rows.is_multiple_of(factor) || !self.cols.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot pool {}x{} image by {factor}",
                self.rows, self.cols
            )));
        }
        let data = crate::tensorgraph::conv::avg_pool(&self.data, self.rows, self.cols, factor);
        Ok(Image2D {
            rows: self.rows / factor,
            cols: self.cols / factor,
            dx: self.dx * factor as f64,
            dz: self.dz * factor as f64,
            origin_x: self.origin_x,
            origin_z: self.origin_z,
            data,
        })
    }

    /// Nearest-neighbour upsampling: each pixel becomes a `factor` x `factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> Image2D {
        let (r, c) = (self.rows * factor, self.cols * factor);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let src = &self.data[(i / factor) * self.cols..(i / factor + 1) * self.cols];
            for j in 0..c {
                data.push(src[j / factor]);
            }
        }
        Image2D {
            rows: r,
            cols: c,
            dx: self.dx / factor as f64,
            dz: self.dz / factor as f64,
            origin_x: self.origin_x,
            origin_z: self.origin_z,
            data,
        }
    }
}
