//! Image similarity and regularisation terms, shared by training and
//! evaluation.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::render::image_constant;
use crate::tensorgraph::{Axis, Shape, Tape, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// `(0.01 L)^2` and `(0.03 L)^2` for unit dynamic range `L`.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Normalised 1D Gaussian window.
pub fn gaussian_window(taps: usize, sigma: f64) -> Vec<f64> {
    let c = (taps / 2) as f64;
    let w: Vec<f64> = (0..taps)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Weights of the objective `lambda (1 - SSIM) + (1 - lambda) L2 + eps_tv TV`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub epsilon_tv: f64,
    /// Sum instead of mean in the L2 term.
    pub l2_sum: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            epsilon_tv: 1e-4,
            l2_sum: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.epsilon_tv >= 0.0) || !self.epsilon_tv.is_finite() {
            return Err(Error::invalid(format!("TV weight must be non-negative, got {}", self.epsilon_tv)));
        }
        Ok(())
    }
}

fn matrix_dims(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match tape.shape(v) {
        Shape::Matrix(r, c) => Ok((r, c)),
        s => Err(Error::shape(op, s, "an image matrix")),
    }
}

/// Mean SSIM over all window positions, Gaussian window with replicate
/// padding.
pub fn ssim_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (xs, ys) = (tape.shape(x), tape.shape(y));
    if xs != ys {
        return Err(Error::shape("ssim", xs, ys));
    }
    let (rows, cols) = matrix_dims(tape, x, "ssim")?;
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::shape("ssim", xs, format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let g: Rc<[f64]> = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).into();
    let blur = |t: &mut Tape, v: Var| t.conv_separable(v, g.clone(), g.clone());
    let mu_x = blur(tape, x)?;
    let mu_y = blur(tape, y)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = blur(tape, xx)?;
    let eyy = blur(tape, yy)?;
    let exy = blur(tape, xy)?;
    let mxx = tape.mul(mu_x, mu_x)?;
    let myy = tape.mul(mu_y, mu_y)?;
    let mxy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(exx, mxx)?;
    let var_y = tape.sub(eyy, myy)?;
    let cov = tape.sub(exy, mxy)?;

    let a1 = tape.scale(mxy, 2.0);
    let a1 = tape.offset(a1, SSIM_C1);
    let a2 = tape.scale(cov, 2.0);
    let a2 = tape.offset(a2, SSIM_C2);
    let num = tape.mul(a1, a2)?;
    let b1 = tape.add(mxx, myy)?;
    let b1 = tape.offset(b1, SSIM_C1);
    let b2 = tape.add(var_x, var_y)?;
    let b2 = tape.offset(b2, SSIM_C2);
    let den = tape.mul(b1, b2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// Mean (or summed) squared difference.
pub fn l2_tape(tape: &mut Tape, pred: Var, target: Var, sum: bool) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(if sum { tape.sum(sq) } else { tape.mean(sq) })
}

/// Anisotropic TV: absolute forward differences along both axes, averaged
/// over all difference sites.
pub fn tv_tape(tape: &mut Tape, s: Var) -> Result<Var> {
    let (rows, cols) = matrix_dims(tape, s, "tv")?;
    if rows < 2 || cols < 2 {
        return Err(Error::shape("tv", tape.shape(s), "at least 2x2"));
    }
    let sites = ((rows - 1) * cols + rows * (cols - 1)) as f64;
    let dv = tape.diff(s, Axis::Rows)?;
    let dh = tape.diff(s, Axis::Cols)?;
    let av = tape.abs(dv);
    let ah = tape.abs(dh);
    let sv = tape.sum(av);
    let sh = tape.sum(ah);
    let total = tape.add(sv, sh)?;
    Ok(tape.scale(total, 1.0 / sites))
}

/// Loss terms as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ssim: Var,
    pub l2: Var,
    pub tv: Var,
}

pub fn total_loss_tape(tape: &mut Tape, pred: Var, target: Var, s: Var, w: LossWeights) -> Result<LossVars> {
    w.validate()?;
    let ssim = ssim_tape(tape, pred, target)?;
    let l2 = l2_tape(tape, pred, target, w.l2_sum)?;
    let tv = tv_tape(tape, s)?;
    let dis = tape.scale(ssim, -w.lambda);
    let dis = tape.offset(dis, w.lambda);
    let fit = tape.scale(l2, 1.0 - w.lambda);
    let reg = tape.scale(tv, w.epsilon_tv);
    let total = tape.add(dis, fit)?;
    let total = tape.add(total, reg)?;
    Ok(LossVars { total, ssim, l2, tv })
}

fn check_pair(a: &Image2D, b: &Image2D, op: &'static str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{}x{}", a.rows(), a.cols()), format!("{}x{}", b.rows(), b.cols())))
    }
}

/// SSIM between two images; the same computation as the training term.
pub fn ssim(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let mut tape = Tape::new();
    let x = image_constant(&mut tape, a);
    let y = image_constant(&mut tape, b);
    let v = ssim_tape(&mut tape, x, y)?;
    Ok(tape.value(v).item())
}

pub fn l2(a: &Image2D, b: &Image2D, sum: bool) -> Result<f64> {
    check_pair(a, b, "l2")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(if sum { s } else { s / a.len() as f64 })
}

pub fn tv(s: &Image2D) -> Result<f64> {
    let mut tape = Tape::new();
    let v = image_constant(&mut tape, s);
    let t = tv_tape(&mut tape, v)?;
    Ok(tape.value(t).item())
}
