//! Image quality metrics and wire-target analysis.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::phantom::Wire;

pub use crate::optim::loss::ssim as ssim_metric;

pub const DEFAULT_THRESHOLD_FRAC: f64 = 0.20;
pub const DEFAULT_MIN_PIXELS: usize = 3;
pub const DEFAULT_MATCH_TOL: f64 = 0.2;

/// Fixed shuffle seed of the enclosing-circle algorithm.
const MEC_SEED: u64 = 0x5EED;

/// `10 log10(1 / MSE)` for images in `[0, 1]`; infinite for identical inputs.
pub fn psnr(a: &Image2D, b: &Image2D) -> Result<f64> {
    let mse = crate::optim::loss::l2(a, b, false)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub pred: String,
    pub gt: String,
    pub dynamic_range: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricsRecord {
    pub fn compute(pred_id: &str, pred: &Image2D, gt_id: &str, gt: &Image2D, dynamic_range: f64) -> Result<Self> {
        Ok(MetricsRecord {
            pred: pred_id.to_string(),
            gt: gt_id.to_string(),
            dynamic_range,
            psnr: psnr(pred, gt)?,
            ssim: ssim_metric(pred, gt)?,
        })
    }

    pub const CSV_HEADER: &'static str = "pred,gt,dynamic_range,psnr,ssim";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.pred,
            self.gt,
            self.dynamic_range,
            format_db(self.psnr),
            self.ssim
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} vs {} (DR {} dB): PSNR {} dB, SSIM {:.4}",
            self.pred,
            self.gt,
            self.dynamic_range,
            format_db(self.psnr),
            self.ssim
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Circle {
    pub x: f64,
    pub z: f64,
    pub r: f64,
}

impl Circle {
    fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.x).hypot(p[1] - self.z) <= self.r * (1.0 + 1e-12) + 1e-12
    }

    fn from_two(a: [f64; 2], b: [f64; 2]) -> Circle {
        let (x, z) = ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0);
        Circle {
            x,
            z,
            r: (a[0] - x).hypot(a[1] - z).max((b[0] - x).hypot(b[1] - z)),
        }
    }

    /// Circumcircle, or `None` for (near-)collinear points.
    fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<Circle> {
        let (bx, bz) = (b[0] - a[0], b[1] - a[1]);
        let (cx, cz) = (c[0] - a[0], c[1] - a[1]);
        let d = 2.0 * (bx * cz - bz * cx);
        let scale = (bx * bx + bz * bz).max(cx * cx + cz * cz);
        if d.abs() <= 1e-14 * scale {
            return None;
        }
        let b2 = bx * bx + bz * bz;
        let c2 = cx * cx + cz * cz;
        let ux = (cz * b2 - bz * c2) / d;
        let uz = (bx * c2 - cx * b2) / d;
        let (x, z) = (a[0] + ux, a[1] + uz);
        let r = [a, b, c].iter().map(|p| (p[0] - x).hypot(p[1] - z)).fold(0.0, f64::max);
        Some(Circle { x, z, r })
    }

    /// Smallest circle through three boundary points.
    fn from_three(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Circle {
        // an obtuse or degenerate triple is spanned by its longest side
        let pairs = [(a, b, c), (a, c, b), (b, c, a)];
        for (p, q, rest) in pairs {
            let circ = Circle::from_two(p, q);
            if circ.contains(rest) {
                return circ;
            }
        }
        Circle::circumcircle(a, b, c).unwrap_or_else(|| {
            pairs
                .iter()
                .map(|(p, q, _)| Circle::from_two(*p, *q))
                .max_by(|u, v| u.r.total_cmp(&v.r))
                .expect("three pairs")
        })
    }
}

/// Exact minimum enclosing circle (randomised incremental construction over
/// a shuffled copy of the points, expected linear time).
pub fn min_enclosing_circle(points: &[[f64; 2]]) -> Option<Circle> {
    let mut p = points.to_vec();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(MEC_SEED));
    let first = *p.first()?;
    let mut c = Circle { x: first[0], z: first[1], r: 0.0 };
    for i in 1..p.len() {
        if c.contains(p[i]) {
            continue;
        }
        c = Circle { x: p[i][0], z: p[i][1], r: 0.0 };
        for j in 0..i {
            if c.contains(p[j]) {
                continue;
            }
            c = Circle::from_two(p[i], p[j]);
            for k in 0..j {
                if !c.contains(p[k]) {
                    c = Circle::from_three(p[i], p[j], p[k]);
                }
            }
        }
    }
    Some(c)
}

/// 8-connected components of `mask` (row-major), in raster order of their
/// first pixel.
pub fn connected_components(mask: &[bool], rows: usize, cols: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(k) = stack.pop() {
            let (i, j) = (k / cols, k % cols);
            comp.push((i, j));
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                        continue;
                    }
                    let n = ni as usize * cols + nj as usize;
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireCluster {
    pub x: f64,
    pub z: f64,
    pub radius: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct WireReport {
    pub clusters: Vec<WireCluster>,
}

impl WireReport {
    pub fn detected(&self) -> usize {
        self.clusters.len()
    }

    pub fn mean_radius(&self) -> f64 {
        if self.clusters.is_empty() {
            return 0.0;
        }
        self.clusters.iter().map(|c| c.radius).sum::<f64>() / self.clusters.len() as f64
    }

    /// Population standard deviation of the radii.
    pub fn radius_std(&self) -> f64 {
        if self.clusters.is_empty() {
            return 0.0;
        }
        let m = self.mean_radius();
        (self.clusters.iter().map(|c| (c.radius - m).powi(2)).sum::<f64>() / self.clusters.len() as f64).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x_mm,z_mm,radius_mm,pixels\n");
        for c in &self.clusters {
            writeln!(s, "{:.6},{:.6},{:.6},{}", c.x, c.z, c.radius, c.pixels).expect("write to string");
        }
        s
    }
}

/// Thresholds at `threshold_frac * max`, labels 8-connected components,
/// drops those under `min_pixels` and fits each an enclosing circle in mm.
pub fn wire_clusters(img: &Image2D, threshold_frac: f64, min_pixels: usize) -> Result<WireReport> {
    if let Some(v) = img.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain {
            op: "wire_clusters",
            detail: format!("image must be non-negative, found {v}"),
        });
    }
    let max = img.max();
    if !(max > 0.0) {
        return Ok(WireReport::default());
    }
    let thr = threshold_frac * max;
    let mask: Vec<bool> = img.data().iter().map(|&v| v >= thr).collect();
    let mut clusters = Vec::new();
    for comp in connected_components(&mask, img.rows(), img.cols()) {
        if comp.len() < min_pixels {
            continue;
        }
        let pts: Vec<[f64; 2]> = comp
            .iter()
            .map(|&(i, j)| {
                let (x, z) = img.pixel_center(i, j);
                [x, z]
            })
            .collect();
        let c = min_enclosing_circle(&pts).expect("non-empty component");
        clusters.push(WireCluster {
            x: c.x,
            z: c.z,
            radius: c.r,
            pixels: comp.len(),
        });
    }
    Ok(WireReport { clusters })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMatch {
    pub matched: usize,
    pub expected: usize,
    /// Localisation error per wire, `None` when unmatched.
    pub errors: Vec<Option<f64>>,
}

impl WireMatch {
    pub fn mean_error(&self) -> f64 {
        let e: Vec<f64> = self.errors.iter().flatten().copied().collect();
        if e.is_empty() {
            0.0
        } else {
            e.iter().sum::<f64>() / e.len() as f64
        }
    }
}

/// Greedy one-to-one matching: the closest remaining (wire, cluster) pair
/// within `tol_mm` is matched first.
pub fn match_wires(report: &WireReport, wires: &[Wire], tol_mm: f64) -> WireMatch {
    let mut pairs = Vec::new();
    for (w, wire) in wires.iter().enumerate() {
        for (c, cl) in report.clusters.iter().enumerate() {
            let d = (wire.x - cl.x).hypot(wire.z - cl.z);
            if d <= tol_mm {
                pairs.push((d, w, c));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut errors = vec![None; wires.len()];
    let mut used = vec![false; report.clusters.len()];
    for (d, w, c) in pairs {
        if errors[w].is_none() && !used[c] {
            errors[w] = Some(d);
            used[c] = true;
        }
    }
    WireMatch {
        matched: errors.iter().filter(|e| e.is_some()).count(),
        expected: wires.len(),
        errors,
    }
}

/// Width in mm of the region around `(row, col)` where row `row` stays
/// within `drop` of its local peak, with linear interpolation at the edges.
pub fn lateral_width(img: &Image2D, row: usize, col: usize, drop: f64) -> f64 {
    let line = &img.data()[row * img.cols()..(row + 1) * img.cols()];
    let mut p = col;
    while p > 0 && line[p - 1] > line[p] {
        p -= 1;
    }
    while p + 1 < line.len() && line[p + 1] > line[p] {
        p += 1;
    }
    let level = line[p] - drop;
    let crossing = |step: isize| -> f64 {
        let mut j = p as isize;
        loop {
            let n = j + step;
            if n < 0 || n >= line.len() as isize {
                return j as f64;
            }
            let (a, b) = (line[j as usize], line[n as usize]);
            if b < level {
                return j as f64 + step as f64 * (a - level) / (a - b);
            }
            j = n;
        }
    };
    (crossing(1) - crossing(-1)) * img.dx
}
