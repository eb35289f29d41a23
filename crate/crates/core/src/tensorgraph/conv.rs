//! Plain (non-taped) convolution kernels shared by the tape ops, the
//! Richardson-Lucy baseline and the renderer.
//!
//! All convolutions are 'same'-size with replicate (edge-clamp) padding:
//! `y[i, j] = sum_{a, b} k[a, b] * x[clamp(i + ca - a), clamp(j + cb - b)]`
//! where `(ca, cb)` is the kernel center. The adjoints scatter through the
//! same clamped indices, so they are exact transposes of the forward maps.

use crate::error::{Error, Result};

/// A dense 2D kernel with odd dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Kernel2d {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.is_multiple_of(2) || cols.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel dims must be odd, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Kernel2d::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Kernel2d { rows, cols, data })
    }

    /// The 1x1 identity kernel.
    pub fn delta() -> Self {
        Kernel2d {
            rows: 1,
            cols: 1,
            data: vec![1.0],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.cols + b]
    }

    /// Kernel rotated by 180 degrees.
    pub fn flipped(&self) -> Kernel2d {
        let mut data = self.data.clone();
        data.reverse();
        Kernel2d {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub(crate) fn check_fits(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows > rows || self.cols > cols {
            return Err(Error::shape(
                "conv2d_same",
                format!("image {rows}x{cols}"),
                format!("kernel {}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }
}

/// `table[o][t]` = clamped source index for output position `o` and tap `t`.
fn clamped_taps(len: usize, taps: usize) -> Vec<usize> {
    let center = (taps / 2) as isize;
    let last = len as isize - 1;
    let mut out = Vec::with_capacity(len * taps);
    for o in 0..len as isize {
        for t in 0..taps as isize {
            out.push((o + center - t).clamp(0, last) as usize);
        }
    }
    out
}

pub fn conv2d_same(x: &[f64], rows: usize, cols: usize, k: &Kernel2d) -> Vec<f64> {
    let ri = clamped_taps(rows, k.rows);
    let ci = clamped_taps(cols, k.cols);
    let mut y = vec![0.0; rows * cols];
    for i in 0..rows {
        let rtaps = &ri[i * k.rows..(i + 1) * k.rows];
        for j in 0..cols {
            let ctaps = &ci[j * k.cols..(j + 1) * k.cols];
            let mut acc = 0.0;
            for (a, &src_r) in rtaps.iter().enumerate() {
                let krow = &k.data[a * k.cols..(a + 1) * k.cols];
                let xrow = &x[src_r * cols..(src_r + 1) * cols];
                for (kv, &src_c) in krow.iter().zip(ctaps) {
                    acc += kv * xrow[src_c];
                }
            }
            y[i * cols + j] = acc;
        }
    }
    y
}

/// Transpose of [`conv2d_same`], accumulated into `dx`.
pub fn conv2d_same_adjoint(dy: &[f64], rows: usize, cols: usize, k: &Kernel2d, dx: &mut [f64]) {
    let ri = clamped_taps(rows, k.rows);
    let ci = clamped_taps(cols, k.cols);
    for i in 0..rows {
        let rtaps = &ri[i * k.rows..(i + 1) * k.rows];
        for j in 0..cols {
            let g = dy[i * cols + j];
            if g == 0.0 {
                continue;
            }
            let ctaps = &ci[j * k.cols..(j + 1) * k.cols];
            for (a, &src_r) in rtaps.iter().enumerate() {
                let krow = &k.data[a * k.cols..(a + 1) * k.cols];
                let xrow = &mut dx[src_r * cols..(src_r + 1) * cols];
                for (kv, &src_c) in krow.iter().zip(ctaps) {
                    xrow[src_c] += kv * g;
                }
            }
        }
    }
}

fn conv_lateral(x: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let ci = clamped_taps(cols, taps.len());
    let mut y = vec![0.0; rows * cols];
    for i in 0..rows {
        let xrow = &x[i * cols..(i + 1) * cols];
        let yrow = &mut y[i * cols..(i + 1) * cols];
        for (j, out) in yrow.iter_mut().enumerate() {
            let ctaps = &ci[j * taps.len()..(j + 1) * taps.len()];
            *out = taps.iter().zip(ctaps).map(|(t, &c)| t * xrow[c]).sum();
        }
    }
    y
}

fn conv_axial(x: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let ri = clamped_taps(rows, taps.len());
    let mut y = vec![0.0; rows * cols];
    for i in 0..rows {
        let yrow = &mut y[i * cols..(i + 1) * cols];
        for (t, &src) in taps.iter().zip(&ri[i * taps.len()..(i + 1) * taps.len()]) {
            let xrow = &x[src * cols..(src + 1) * cols];
            for (o, v) in yrow.iter_mut().zip(xrow) {
                *o += t * v;
            }
        }
    }
    y
}

/// Convolution with the separable kernel `outer(axial, lateral)`.
pub fn conv_separable(x: &[f64], rows: usize, cols: usize, axial: &[f64], lateral: &[f64]) -> Vec<f64> {
    let tmp = conv_lateral(x, rows, cols, lateral);
    conv_axial(&tmp, rows, cols, axial)
}

/// Transpose of [`conv_separable`], accumulated into `dx`.
pub fn conv_separable_adjoint(
    dy: &[f64],
    rows: usize,
    cols: usize,
    axial: &[f64],
    lateral: &[f64],
    dx: &mut [f64],
) {
    let ri = clamped_taps(rows, axial.len());
    let mut dtmp = vec![0.0; rows * cols];
    for i in 0..rows {
        let g = &dy[i * cols..(i + 1) * cols];
        for (t, &src) in axial.iter().zip(&ri[i * axial.len()..(i + 1) * axial.len()]) {
            let row = &mut dtmp[src * cols..(src + 1) * cols];
            for (o, v) in row.iter_mut().zip(g) {
                *o += t * v;
            }
        }
    }
    let ci = clamped_taps(cols, lateral.len());
    for i in 0..rows {
        let g = &dtmp[i * cols..(i + 1) * cols];
        let out = &mut dx[i * cols..(i + 1) * cols];
        for (j, &gj) in g.iter().enumerate() {
            for (t, &c) in lateral.iter().zip(&ci[j * lateral.len()..(j + 1) * lateral.len()]) {
                out[c] += t * gj;
            }
        }
    }
}

pub fn avg_pool(x: &[f64], rows: usize, cols: usize, factor: usize) -> Vec<f64> {
    let (orows, ocols) = (rows / factor, cols / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut y = vec![0.0; orows * ocols];
    for i in 0..rows {
        let xrow = &x[i * cols..(i + 1) * cols];
        let yrow = &mut y[(i / factor) * ocols..(i / factor + 1) * ocols];
        for (j, v) in xrow.iter().enumerate() {
            yrow[j / factor] += v;
        }
    }
    for v in &mut y {
        *v *= scale;
    }
    y
}
