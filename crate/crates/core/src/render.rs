//! Forward image formation: echogenicity through the PSF to an envelope, then
//! log compression to a normalised B-mode image.
//!
//! The 0 dB reference is a fixed envelope value of 1, so `B = 1` means full
//! scale and `B = 0` sits `dynamic_range` dB below it. Plain functions and
//! their tape counterparts apply the same operations in the same order, so
//! forward values agree bit for bit.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::psf::{PsfKernel, PsfParams};
use crate::tensorgraph::{conv, Shape, Tape, Tensor, Var};

pub const DEFAULT_DYNAMIC_RANGE: f64 = 60.0;
pub const DEFAULT_LOG_EPS: f64 = 1e-8;

/// Log-compression settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Compression {
    pub dynamic_range: f64,
    pub eps: f64,
}

impl Default for Compression {
    fn default() -> Self {
        Compression {
            dynamic_range: DEFAULT_DYNAMIC_RANGE,
            eps: DEFAULT_LOG_EPS,
        }
    }
}

impl Compression {
    pub fn with_dynamic_range(dynamic_range: f64) -> Self {
        Compression {
            dynamic_range,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dynamic_range > 0.0) || !self.dynamic_range.is_finite() {
            return Err(Error::invalid(format!("dynamic range must be positive, got {}", self.dynamic_range)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid(format!("log eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    #[inline]
    fn apply(&self, e: f64) -> f64 {
        ((e + self.eps).log10() * (20.0 / self.dynamic_range) + 1.0).clamp(0.0, 1.0)
    }

    /// Envelope value whose compressed level is `b` (ignoring `eps`).
    #[inline]
    pub fn expand(&self, b: f64) -> f64 {
        10f64.powf((b - 1.0) * self.dynamic_range / 20.0)
    }
}

fn check_kernel(s: &Image2D, k: &PsfKernel) -> Result<()> {
    k.check_spacing(s)?;
    if k.rows() > s.rows() || k.cols() > s.cols() {
        return Err(Error::shape(
            "convolve_psf",
            format!("image {}x{}", s.rows(), s.cols()),
            format!("kernel {}x{}", k.rows(), k.cols()),
        ));
    }
    Ok(())
}

/// Envelope `e = k * s` with replicate padding.
pub fn convolve_psf(s: &Image2D, k: &PsfKernel) -> Result<Image2D> {
    check_kernel(s, k)?;
    let e = conv::conv_separable(s.data(), s.rows(), s.cols(), k.axial(), k.lateral());
    Ok(Image2D::from_vec(s.rows(), s.cols(), s.dx, s.dz, e)?.with_geometry_of(s))
}

pub fn log_compress(e: &Image2D, c: Compression) -> Result<Image2D> {
    c.validate()?;
    if let Some(bad) = e.data().iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::Domain {
            op: "log_compress",
            detail: format!("negative or NaN envelope value {bad}"),
        });
    }
    Ok(e.map(|v| c.apply(v)))
}

/// Inverse of [`log_compress`] inside the displayed range.
pub fn decompress(b: &Image2D, c: Compression) -> Image2D {
    b.map(|v| c.expand(v))
}

/// `max(e + N(0, sigma^2), 0)`; `sigma = 0` returns `e` unchanged.
pub fn add_noise(e: &Image2D, sigma: f64, rng: &mut impl Rng) -> Result<Image2D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(e.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|err| Error::invalid(err.to_string()))?;
    let mut out = e.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).max(0.0);
    }
    Ok(out)
}

/// Envelope, optional `factor` x `factor` average pooling, then compression.
pub fn render_bmode(s: &Image2D, k: &PsfKernel, pool: usize, c: Compression) -> Result<Image2D> {
    let e = convolve_psf(s, k)?;
    let e = if pool > 1 { e.avg_pool(pool)? } else { e };
    log_compress(&e, c)
}

/// Renders `s` with the PSF rebuilt at another center frequency.
pub fn rebeam(s: &Image2D, params: &PsfParams, center_frequency: f64, c: Compression) -> Result<Image2D> {
    if !(center_frequency > 0.0) {
        return Err(Error::invalid(format!("frequency must be positive, got {center_frequency}")));
    }
    let k = params.with_frequency(center_frequency).build_kernel(s.dx, s.dz)?;
    render_bmode(s, &k, 1, c)
}

/// Places an image on the tape as a `[rows x cols]` constant.
pub fn image_constant(tape: &mut Tape, img: &Image2D) -> Var {
    tape.constant(Tensor::matrix(img.rows(), img.cols(), img.data().to_vec()).expect("image shape"))
}

/// Tape version of [`convolve_psf`]; `s` must be `[rows x cols]` on the
/// kernel's grid.
pub fn convolve_psf_tape(tape: &mut Tape, s: Var, k: &PsfKernel) -> Result<Var> {
    match tape.shape(s) {
        Shape::Matrix(r, c) if k.rows() <= r && k.cols() <= c => {}
        other => return Err(Error::shape("convolve_psf", other, format!("kernel {}x{}", k.rows(), k.cols()))),
    }
    tape.conv_separable(s, k.axial().clone(), k.lateral().clone())
}

pub fn log_compress_tape(tape: &mut Tape, e: Var, c: Compression) -> Result<Var> {
    c.validate()?;
    let l = tape.log10_guarded(e, c.eps)?;
    let l = tape.scale(l, 20.0 / c.dynamic_range);
    let l = tape.offset(l, 1.0);
    Ok(tape.clamp(l, 0.0, 1.0))
}

/// Tape version of [`render_bmode`].
pub fn render_bmode_tape(tape: &mut Tape, s: Var, k: &PsfKernel, pool: usize, c: Compression) -> Result<Var> {
    let e = convolve_psf_tape(tape, s, k)?;
    let e = if pool > 1 { tape.avg_pool(e, pool)? } else { e };
    log_compress_tape(tape, e, c)
}
