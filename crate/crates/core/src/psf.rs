//! Separable point spread function: a sinc² lateral beam profile at the focus
//! times a Gaussian axial pulse envelope.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::io::ini::{Ini, IniWriter, SectionReader};
use crate::tensorgraph::Kernel2d;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 1.54;

/// Acoustic parameters of the imaging system.
///
/// Units: MHz for frequency, mm/µs for the speed of sound, mm for lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfParams {
    pub center_frequency: f64,
    pub speed_of_sound: f64,
    pub focal_distance: f64,
    pub f_number: f64,
    pub n_cycles: u32,
}

impl Default for PsfParams {
    fn default() -> Self {
        PsfParams {
            center_frequency: 8.0,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            focal_distance: 30.0,
            f_number: 2.0,
            n_cycles: 2,
        }
    }
}

/// Normalised sinc, `sin(pi u) / (pi u)` with `sinc(0) = 1`.
pub fn sinc(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else {
        let a = std::f64::consts::PI * u;
        a.sin() / a
    }
}

impl PsfParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("center_frequency", self.center_frequency),
            ("speed_of_sound", self.speed_of_sound),
            ("focal_distance", self.focal_distance),
            ("f_number", self.f_number),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.n_cycles < 1 {
            return Err(Error::invalid("n_cycles must be at least 1"));
        }
        Ok(())
    }

    /// Wavelength in mm.
    pub fn wavelength(&self) -> f64 {
        self.speed_of_sound / self.center_frequency
    }

    /// Aperture width in mm.
    pub fn aperture(&self) -> f64 {
        self.focal_distance / self.f_number
    }

    /// Axial Gaussian width: the envelope FWHM equals the pulse length
    /// `n_cycles * wavelength`.
    pub fn sigma_z(&self) -> f64 {
        self.n_cycles as f64 * self.wavelength() / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
    }

    /// Lateral offset of the first zero of the beam profile.
    pub fn first_lateral_zero(&self) -> f64 {
        self.focal_distance * self.wavelength() / self.aperture()
    }

    pub fn lateral_profile(&self, x: f64) -> f64 {
        let d = self.aperture();
        let s = sinc(d * x.abs() / (self.focal_distance * self.wavelength()));
        d * d * s * s
    }

    pub fn axial_profile(&self, z: f64) -> f64 {
        let s = self.sigma_z();
        (-(z * z) / (2.0 * s * s)).exp()
    }

    /// Reads a `[psf]` section. Missing keys keep their defaults; unknown
    /// keys and sections are errors.
    pub fn from_ini(text: &str) -> Result<PsfParams> {
        let ini = Ini::parse(text)?;
        ini.reject_unknown_sections(&["psf"])?;
        let d = PsfParams::default();
        let p = match ini.unique("psf")? {
            None => d,
            Some(sec) => {
                let mut r = SectionReader::new(sec);
                let p = PsfParams {
                    center_frequency: r.get_or("center_frequency", d.center_frequency)?,
                    speed_of_sound: r.get_or("speed_of_sound", d.speed_of_sound)?,
                    focal_distance: r.get_or("focal_distance", d.focal_distance)?,
                    f_number: r.get_or("f_number", d.f_number)?,
                    n_cycles: r.get_or("n_cycles", d.n_cycles)?,
                };
                r.finish()?;
                p
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_ini(&self) -> String {
        IniWriter::default()
            .section("psf")
            .kv("center_frequency", self.center_frequency)
            .kv("speed_of_sound", self.speed_of_sound)
            .kv("focal_distance", self.focal_distance)
            .kv("f_number", self.f_number)
            .kv("n_cycles", self.n_cycles)
            .finish()
    }

    /// Same parameters at a different center frequency.
    pub fn with_frequency(&self, center_frequency: f64) -> PsfParams {
        PsfParams {
            center_frequency,
            ..self.clone()
        }
    }

    /// Samples the PSF on a grid with the given spacing.
    ///
    /// The lateral profile is kept out to its second zero and the axial one
    /// out to three standard deviations. The result is L1-normalised.
    pub fn build_kernel(&self, dx: f64, dz: f64) -> Result<PsfKernel> {
        self.validate()?;
        if !(dx > 0.0) || !(dz > 0.0) {
            return Err(Error::invalid(format!("spacing must be positive, got dx={dx} dz={dz}")));
        }
        let half_wave = self.wavelength() / 2.0;
        if dx > half_wave || dz > half_wave {
            return Err(Error::Nyquist(format!(
                "pixel spacing ({dx:.4} x {dz:.4} mm) exceeds half a wavelength ({half_wave:.4} mm) \
                 at {} MHz; oversample the grid",
                self.center_frequency
            )));
        }
        Ok(self.sample_kernel(dx, dz))
    }

    /// Kernel sampling without the spacing guard.
    pub(crate) fn sample_kernel(&self, dx: f64, dz: f64) -> PsfKernel {
        let lat_half = (2.0 * self.first_lateral_zero() / dx + 1e-9).floor() as usize;
        let ax_half = (3.0 * self.sigma_z() / dz + 1e-9).floor() as usize;

        let lateral = normalized(
            (0..2 * lat_half + 1)
                .map(|j| self.lateral_profile((j as f64 - lat_half as f64) * dx))
                .collect(),
        );
        let axial = normalized(
            (0..2 * ax_half + 1)
                .map(|i| self.axial_profile((i as f64 - ax_half as f64) * dz))
                .collect(),
        );
        PsfKernel::from_factors(axial, lateral, dx, dz)
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    for x in &mut v {
        *x /= s;
    }
    v
}

/// Discretised, L1-normalised separable PSF.
#[derive(Clone, Debug)]
pub struct PsfKernel {
    axial: Rc<[f64]>,
    lateral: Rc<[f64]>,
    values: Image2D,
}

impl PsfKernel {
    /// Builds the kernel `outer(axial, lateral)`; both factors should already
    /// sum to one.
    pub fn from_factors(axial: Vec<f64>, lateral: Vec<f64>, dx: f64, dz: f64) -> PsfKernel {
        let data = axial
            .iter()
            .flat_map(|a| lateral.iter().map(move |l| a * l))
            .collect();
        let values = Image2D::from_vec(axial.len(), lateral.len(), dx, dz, data).expect("outer product size");
        PsfKernel {
            axial: axial.into(),
            lateral: lateral.into(),
            values,
        }
    }

    /// The identity kernel at the given spacing.
    pub fn delta(dx: f64, dz: f64) -> PsfKernel {
        PsfKernel::from_factors(vec![1.0], vec![1.0], dx, dz)
    }

    pub fn values(&self) -> &Image2D {
        &self.values
    }

    pub fn axial(&self) -> &Rc<[f64]> {
        &self.axial
    }

    pub fn lateral(&self) -> &Rc<[f64]> {
        &self.lateral
    }

    pub fn dx(&self) -> f64 {
        self.values.dx
    }

    pub fn dz(&self) -> f64 {
        self.values.dz
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn to_kernel2d(&self) -> Kernel2d {
        Kernel2d::new(self.rows(), self.cols(), self.values.data().to_vec()).expect("odd dims")
    }

    /// Errors unless the kernel was sampled at the spacing of `img`.
    pub fn check_spacing(&self, img: &Image2D) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        if close(self.dx(), img.dx) && close(self.dz(), img.dz) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "kernel spacing {}x{} mm does not match image spacing {}x{} mm",
                self.dx(),
                self.dz(),
                img.dx,
                img.dz
            )))
        }
    }
}
