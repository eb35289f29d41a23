//! `start:stop:step` range arguments (`1.0:4.0:0.5`, `1:5`, `2.0`).

use crate::error::{Error, Result};

const MAX_POINTS: usize = 10_000;

fn bad(spec: &str, why: &str) -> Error {
    Error::invalid(format!("range '{spec}': {why}"))
}

/// Inclusive float range. A missing step defaults to 1.
pub fn parse_f64_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.trim().split(':').collect();
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad(spec, "not a number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad(spec, "not finite"))
        }
    };
    let (start, stop, step) = match parts.as_slice() {
        [a] => {
            let v = num(a)?;
            (v, v, 1.0)
        }
        [a, b] => (num(a)?, num(b)?, 1.0),
        [a, b, c] => (num(a)?, num(b)?, num(c)?),
        _ => return Err(bad(spec, "expected start:stop[:step]")),
    };
    if !(step > 0.0) {
        return Err(bad(spec, "step must be positive"));
    }
    if stop < start {
        return Err(bad(spec, "empty range"));
    }
    let n = ((stop - start) / step + 1e-9).floor();
    if n >= MAX_POINTS as f64 {
        return Err(bad(spec, "too many points"));
    }
    let points: Vec<f64> = (0..=n as usize).map(|k| start + k as f64 * step).collect();
    if points.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(bad(spec, "step is below the floating-point resolution of the bounds"));
    }
    Ok(points)
}

/// Inclusive integer range `start:stop[:step]`.
pub fn parse_u32_range(spec: &str) -> Result<Vec<u32>> {
    let parts: Vec<&str> = spec.trim().split(':').collect();
    let num = |s: &str| -> Result<u32> { s.trim().parse().map_err(|_| bad(spec, "not an integer")) };
    let (start, stop, step) = match parts.as_slice() {
        [a] => {
            let v = num(a)?;
            (v, v, 1)
        }
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, c] => (num(a)?, num(b)?, num(c)?),
        _ => return Err(bad(spec, "expected start:stop[:step]")),
    };
    if step == 0 {
        return Err(bad(spec, "step must be positive"));
    }
    if stop < start {
        return Err(bad(spec, "empty range"));
    }
    if ((stop - start) / step) as usize >= MAX_POINTS {
        return Err(bad(spec, "too many points"));
    }
    Ok((start..=stop).step_by(step as usize).collect())
}
