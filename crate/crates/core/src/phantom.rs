//! Synthetic echogenicity phantoms: cylindrical inclusions and point-like
//! wire targets over Rayleigh-distributed speckle.
//!
//! Contrasts and wire amplitudes are amplitude decibels (`20 log10`) relative
//! to the background mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::io::ini::{Ini, IniWriter, SectionReader};

pub const DEFAULT_WIRE_RADIUS: f64 = 0.04;
pub const DEFAULT_WIRE_AMPLITUDE_DB: f64 = 30.0;

/// Desk phantoms sit at -40 dB so the speckle lands mid-range after a 60 dB
/// log compression, and their wires are bright enough to stand out once blurred.
pub const DESK_BACKGROUND_MEAN: f64 = 0.01;
pub const DESK_WIRE_AMPLITUDE_DB: f64 = 50.0;

/// Wire coverage is estimated on this many subsamples per pixel axis.
const COVERAGE_SUBSAMPLES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Inclusion {
    pub x: f64,
    pub z: f64,
    pub radius: f64,
    pub contrast_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wire {
    pub x: f64,
    pub z: f64,
    pub radius: f64,
    pub amplitude_db: f64,
}

impl Wire {
    pub fn at(x: f64, z: f64) -> Wire {
        Wire {
            x,
            z,
            radius: DEFAULT_WIRE_RADIUS,
            amplitude_db: DEFAULT_WIRE_AMPLITUDE_DB,
        }
    }
}

/// Geometry and statistics of a phantom. Lengths in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub width: f64,
    pub depth: f64,
    /// Lateral position of the left image edge.
    pub origin_x: f64,
    /// Depth of the top image edge.
    pub origin_z: f64,
    pub dx: f64,
    pub dz: f64,
    pub background_mean: f64,
    pub inclusions: Vec<Inclusion>,
    pub wires: Vec<Wire>,
    pub seed: u64,
}

impl PhantomSpec {
    /// Homogeneous speckle, centered laterally, starting at depth 0.
    pub fn empty(width: f64, depth: f64, dx: f64, dz: f64) -> PhantomSpec {
        PhantomSpec {
            width,
            depth,
            origin_x: -width / 2.0,
            origin_z: 0.0,
            dx,
            dz,
            background_mean: 1.0,
            inclusions: Vec::new(),
            wires: Vec::new(),
            seed: 0,
        }
    }

    fn grid_count(extent: f64, spacing: f64, what: &str) -> Result<usize> {
        let n = extent / spacing;
        let r = n.round();
        if r < 1.0 || (n - r).abs() > 1e-6 * r.max(1.0) {
            return Err(Error::invalid(format!(
                "{what} {extent} mm is not a whole number of {spacing} mm pixels"
            )));
        }
        Ok(r as usize)
    }

    pub fn cols(&self) -> Result<usize> {
        Self::grid_count(self.width, self.dx, "width")
    }

    pub fn rows(&self) -> Result<usize> {
        Self::grid_count(self.depth, self.dz, "depth")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("depth", self.depth),
            ("dx", self.dx),
            ("dz", self.dz),
            ("background_mean", self.background_mean),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !self.origin_x.is_finite() || !self.origin_z.is_finite() {
            return Err(Error::invalid("origin must be finite"));
        }
        self.rows()?;
        self.cols()?;
        let inside = |x: f64, z: f64, r: f64| {
            let tol = 1e-9;
            x - r >= self.origin_x - tol
                && x + r <= self.origin_x + self.width + tol
                && z - r >= self.origin_z - tol
                && z + r <= self.origin_z + self.depth + tol
        };
        for (k, inc) in self.inclusions.iter().enumerate() {
            if !(inc.radius > 0.0) || !inc.contrast_db.is_finite() || !inc.radius.is_finite() {
                return Err(Error::invalid(format!("inclusion {k}: radius must be positive and contrast finite")));
            }
            if !inside(inc.x, inc.z, inc.radius) {
                return Err(Error::invalid(format!("inclusion {k} extends outside the image")));
            }
            for (m, other) in self.inclusions[..k].iter().enumerate() {
                if (inc.x - other.x).hypot(inc.z - other.z) < inc.radius + other.radius {
                    return Err(Error::invalid(format!("inclusions {m} and {k} overlap")));
                }
            }
        }
        for (k, w) in self.wires.iter().enumerate() {
            if !(w.radius > 0.0) || !w.amplitude_db.is_finite() || !w.radius.is_finite() {
                return Err(Error::invalid(format!("wire {k}: radius must be positive and amplitude finite")));
            }
            if !inside(w.x, w.z, w.radius) {
                return Err(Error::invalid(format!("wire {k} extends outside the image")));
            }
        }
        Ok(())
    }

    /// Parses `[phantom]`, repeated `[inclusion]` and repeated `[wire]` sections.
    pub fn from_ini(text: &str) -> Result<PhantomSpec> {
        let ini = Ini::parse(text)?;
        ini.reject_unknown_sections(&["phantom", "inclusion", "wire"])?;
        let sec = ini
            .unique("phantom")?
            .ok_or_else(|| Error::Parse { line: 1, msg: "missing [phantom] section".into() })?;
        let mut r = SectionReader::new(sec);
        let width: f64 = r.require("width")?;
        let depth: f64 = r.require("depth")?;
        let dx: f64 = r.require("dx")?;
        let dz: f64 = r.get_or("dz", dx)?;
        let mut spec = PhantomSpec {
            width,
            depth,
            origin_x: r.get_or("origin_x", -width / 2.0)?,
            origin_z: r.get_or("origin_z", 0.0)?,
            dx,
            dz,
            background_mean: r.get_or("background_mean", 1.0)?,
            inclusions: Vec::new(),
            wires: Vec::new(),
            seed: r.get_or("seed", 0)?,
        };
        r.finish()?;
        for sec in ini.sections_named("inclusion") {
            let mut r = SectionReader::new(sec);
            spec.inclusions.push(Inclusion {
                x: r.require("x")?,
                z: r.require("z")?,
                radius: r.require("radius")?,
                contrast_db: r.require("contrast_db")?,
            });
            r.finish()?;
        }
        for sec in ini.sections_named("wire") {
            let mut r = SectionReader::new(sec);
            spec.wires.push(Wire {
                x: r.require("x")?,
                z: r.require("z")?,
                radius: r.get_or("radius", DEFAULT_WIRE_RADIUS)?,
                amplitude_db: r.get_or("amplitude_db", DEFAULT_WIRE_AMPLITUDE_DB)?,
            });
            r.finish()?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_ini(&self) -> String {
        let mut w = IniWriter::default();
        w.section("phantom")
            .kv("width", self.width)
            .kv("depth", self.depth)
            .kv("origin_x", self.origin_x)
            .kv("origin_z", self.origin_z)
            .kv("dx", self.dx)
            .kv("dz", self.dz)
            .kv("background_mean", self.background_mean)
            .kv("seed", self.seed);
        for inc in &self.inclusions {
            w.section("inclusion")
                .kv("x", inc.x)
                .kv("z", inc.z)
                .kv("radius", inc.radius)
                .kv("contrast_db", inc.contrast_db);
        }
        for wire in &self.wires {
            w.section("wire")
                .kv("x", wire.x)
                .kv("z", wire.z)
                .kv("radius", wire.radius)
                .kv("amplitude_db", wire.amplitude_db);
        }
        w.finish()
    }
}

/// Mean-to-scale relation of the Rayleigh law, `mu = sigma sqrt(pi/2)`.
pub fn sigma_from_mean(mu: f64) -> Result<f64> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::invalid(format!("Rayleigh mean must be positive, got {mu}")));
    }
    Ok(mu / std::f64::consts::FRAC_PI_2.sqrt())
}

/// Inverse CDF of the Rayleigh law for `u` in `[0, 1)`.
pub fn rayleigh_from_uniform(sigma: f64, u: f64) -> f64 {
    sigma * (-2.0 * (-u).ln_1p()).sqrt()
}

pub fn rayleigh_sample(sigma: f64, rng: &mut impl Rng) -> f64 {
    rayleigh_from_uniform(sigma, rng.random::<f64>())
}

pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

/// Rasterizes with an RNG seeded from `spec.seed`.
pub fn rasterize(spec: &PhantomSpec) -> Result<Image2D> {
    rasterize_with(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

/// Rasterizes the phantom. Every pixel consumes exactly one uniform draw in
/// raster order, so maps with equal grids and seeds share their speckle.
pub fn rasterize_with(spec: &PhantomSpec, rng: &mut impl Rng) -> Result<Image2D> {
    spec.validate()?;
    let (rows, cols) = (spec.rows()?, spec.cols()?);
    let mut img = Image2D::zeros(rows, cols, spec.dx, spec.dz).with_origin(spec.origin_x, spec.origin_z);

    // speckle scale per pixel from the region containing its center
    let bg_sigma = sigma_from_mean(spec.background_mean)?;
    let mut sigma = vec![bg_sigma; rows * cols];
    for inc in &spec.inclusions {
        let s = sigma_from_mean(spec.background_mean * db_to_amplitude(inc.contrast_db))?;
        for_each_pixel_near(&img, inc.x, inc.z, inc.radius, |i, j, cx, cz| {
            if (cx - inc.x).hypot(cz - inc.z) <= inc.radius {
                sigma[i * cols + j] = s;
            }
        });
    }
    for (v, s) in img.data_mut().iter_mut().zip(&sigma) {
        *v = rayleigh_sample(*s, rng);
    }

    // wires: deterministic amplitude blended by covered area fraction
    let mut coverage = vec![0.0; rows * cols];
    let mut wire_sum = vec![0.0; rows * cols];
    let n = COVERAGE_SUBSAMPLES;
    for w in &spec.wires {
        let amp = spec.background_mean * db_to_amplitude(w.amplitude_db);
        let reach = w.radius + spec.dx.max(spec.dz);
        for_each_pixel_near(&img, w.x, w.z, reach, |i, j, cx, cz| {
            let mut hits = 0usize;
            for a in 0..n {
                let sz = cz + ((a as f64 + 0.5) / n as f64 - 0.5) * spec.dz;
                for b in 0..n {
                    let sx = cx + ((b as f64 + 0.5) / n as f64 - 0.5) * spec.dx;
                    if (sx - w.x).hypot(sz - w.z) <= w.radius {
                        hits += 1;
                    }
                }
            }
            let f = hits as f64 / (n * n) as f64;
            coverage[i * cols + j] += f;
            wire_sum[i * cols + j] += f * amp;
        });
    }
    for ((v, &c), &ws) in img.data_mut().iter_mut().zip(&coverage).zip(&wire_sum) {
        if c > 0.0 {
            // overlapping wires share the pixel by proportion
            let c_eff = c.min(1.0);
            *v = ws * (c_eff / c) + (1.0 - c_eff) * *v;
        }
    }
    Ok(img)
}

/// Visits pixels whose centers lie within the bounding box of a circle.
fn for_each_pixel_near(img: &Image2D, x: f64, z: f64, r: f64, mut f: impl FnMut(usize, usize, f64, f64)) {
    let lo = |c: f64, o: f64, s: f64| (((c - r - o) / s).floor().max(0.0)) as usize;
    let hi = |c: f64, o: f64, s: f64, n: usize| ((((c + r - o) / s).ceil()).max(0.0) as usize).min(n);
    let (i0, i1) = (lo(z, img.origin_z, img.dz), hi(z, img.origin_z, img.dz, img.rows()));
    let (j0, j1) = (lo(x, img.origin_x, img.dx), hi(x, img.origin_x, img.dx, img.cols()));
    for i in i0..i1 {
        for j in j0..j1 {
            let (cx, cz) = img.pixel_center(i, j);
            f(i, j, cx, cz);
        }
    }
}

/// Lateral row and axial column of six wires each, with gaps of
/// 0.25, 0.5, 1, 2 and 3 mm.
fn wire_arrays(row_x0: f64, row_z: f64, col_x: f64, col_z0: f64) -> Vec<Wire> {
    let offsets = [0.0, 0.25, 0.75, 1.75, 3.75, 6.75];
    let mut wires: Vec<Wire> = offsets.iter().map(|o| Wire::at(row_x0 + o, row_z)).collect();
    wires.extend(offsets.iter().map(|o| Wire::at(col_x, col_z0 + o)));
    wires
}

/// Full-size layout modelled on a multi-purpose grayscale and resolution
/// phantom: a 40 x 20 mm field from 20 mm depth, three 8 mm inclusions at
/// +6/+3/-3 dB and twelve 80 µm wires around 30 mm depth.
pub fn default_cirs_spec() -> PhantomSpec {
    let inclusions = [(-15.0, 6.0), (-6.0, 3.0), (3.0, -3.0)]
        .iter()
        .map(|&(x, contrast_db)| Inclusion {
            x,
            z: 30.0,
            radius: 4.0,
            contrast_db,
        })
        .collect();
    PhantomSpec {
        width: 40.0,
        depth: 20.0,
        origin_x: -20.0,
        origin_z: 20.0,
        dx: 0.04,
        dz: 0.04,
        background_mean: 1.0,
        inclusions,
        wires: wire_arrays(9.0, 26.0, 18.0, 27.5),
        seed: 0,
    }
}

/// 10.24 mm square wire phantom on a 0.04 mm grid, the same twelve-wire
/// arrangement as [`default_cirs_spec`].
pub fn desk_wire_spec() -> PhantomSpec {
    let mut wires = wire_arrays(-4.2, 26.0, 4.2, 27.5);
    for w in &mut wires {
        w.amplitude_db = DESK_WIRE_AMPLITUDE_DB;
    }
    PhantomSpec {
        width: 10.24,
        depth: 10.24,
        origin_x: -5.12,
        origin_z: 25.0,
        dx: 0.04,
        dz: 0.04,
        background_mean: DESK_BACKGROUND_MEAN,
        inclusions: Vec::new(),
        wires,
        seed: 0,
    }
}

/// 10.24 mm square field with three scaled-down inclusions at +6/+3/-3 dB.
pub fn desk_inclusion_spec() -> PhantomSpec {
    let inclusions = [(-3.4, 6.0), (0.0, 3.0), (3.4, -3.0)]
        .iter()
        .map(|&(x, contrast_db)| Inclusion {
            x,
            z: 30.12,
            radius: 1.4,
            contrast_db,
        })
        .collect();
    PhantomSpec {
        inclusions,
        wires: Vec::new(),
        ..desk_wire_spec()
    }
}
