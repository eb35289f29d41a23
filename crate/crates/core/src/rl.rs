//! Richardson-Lucy deconvolution with the same replicate-padded convolution
//! as the forward renderer.

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::psf::PsfKernel;
use crate::tensorgraph::conv::conv_separable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlConfig {
    pub iterations: usize,
    /// Lower bound on the denominator `h * f`.
    pub eps: f64,
    /// Stop early once the relative L1 change drops below this (0 = never).
    pub tolerance: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            iterations: 30,
            eps: 1e-9,
            tolerance: 0.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("RL needs at least one iteration"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("RL eps must be positive, got {}", self.eps)));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("RL tolerance must be non-negative"));
        }
        Ok(())
    }
}

fn blur(x: &[f64], img: &Image2D, axial: &[f64], lateral: &[f64]) -> Vec<f64> {
    conv_separable(x, img.rows(), img.cols(), axial, lateral)
}

fn check_inputs(d: &Image2D, k: &PsfKernel) -> Result<()> {
    if k.rows() > d.rows() || k.cols() > d.cols() {
        return Err(Error::shape(
            "rl_deconvolve",
            format!("image {}x{}", d.rows(), d.cols()),
            format!("kernel {}x{}", k.rows(), k.cols()),
        ));
    }
    if let Some((i, v)) = d.data().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Domain {
            op: "rl_deconvolve",
            detail: format!("input pixel {i} is {v}; RL needs non-negative data"),
        });
    }
    Ok(())
}

/// Runs RL from `f0 = d`, calling `observe(n, f_n)` after every update.
pub fn rl_iterate(
    d: &Image2D,
    k: &PsfKernel,
    cfg: &RlConfig,
    mut observe: impl FnMut(usize, &Image2D),
) -> Result<Image2D> {
    cfg.validate()?;
    check_inputs(d, k)?;
    let (axial, lateral) = (k.axial(), k.lateral());
    let flip_axial: Vec<f64> = axial.iter().rev().copied().collect();
    let flip_lateral: Vec<f64> = lateral.iter().rev().copied().collect();
    let mut f = d.clone();
    for n in 0..cfg.iterations {
        let hf = blur(f.data(), d, axial, lateral);
        let ratio: Vec<f64> = d.data().iter().zip(&hf).map(|(&dv, &h)| dv / h.max(cfg.eps)).collect();
        let corr = blur(&ratio, d, &flip_axial, &flip_lateral);
        let mut change = 0.0;
        let mut norm = 0.0;
        for (fv, c) in f.data_mut().iter_mut().zip(&corr) {
            let next = *fv * c;
            change += (next - *fv).abs();
            norm += fv.abs();
            *fv = next;
        }
        if let Some(i) = f.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("RL estimate pixel {i} became non-finite at iteration {n}")));
        }
        observe(n, &f);
        if cfg.tolerance > 0.0 && norm > 0.0 && change / norm < cfg.tolerance {
            break;
        }
    }
    Ok(f)
}

pub fn rl_deconvolve(d: &Image2D, k: &PsfKernel, cfg: &RlConfig) -> Result<Image2D> {
    rl_iterate(d, k, cfg, |_, _| {})
}

/// Mean absolute reblurring error `mean |d - h * f|`.
pub fn rl_residual(d: &Image2D, k: &PsfKernel, f: &Image2D) -> Result<f64> {
    if !d.same_shape(f) {
        return Err(Error::shape(
            "rl_residual",
            format!("{}x{}", d.rows(), d.cols()),
            format!("{}x{}", f.rows(), f.cols()),
        ));
    }
    let hf = blur(f.data(), f, k.axial(), k.lateral());
    Ok(d.data().iter().zip(&hf).map(|(a, b)| (a - b).abs()).sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf::PsfParams;
    use crate::render::convolve_psf;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rows: usize, cols: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image2D::from_vec(rows, cols, 0.04, 0.04, (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect())
            .unwrap()
    }

    fn kernel() -> PsfKernel {
        PsfParams::default().build_kernel(0.04, 0.04).unwrap()
    }

    #[test]
    fn delta_kernel_is_bit_exact_fixed_point() {
        let mut d = random_map(16, 16, 1);
        d.set(3, 3, 0.0);
        let k = PsfKernel::delta(0.04, 0.04);
        let mut all_equal = true;
        let out = rl_iterate(&d, &k, &RlConfig::default(), |_, f| all_equal &= f.data() == d.data()).unwrap();
        assert!(all_equal);
        assert_eq!(out.data(), d.data());
        assert_eq!(rl_residual(&d, &k, &d).unwrap(), 0.0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let d = Image2D::filled(48, 64, 0.04, 0.04, 0.6);
        let f = rl_deconvolve(&d, &kernel(), &RlConfig::default()).unwrap();
        assert!(f.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    fn peak_and_width(img: &Image2D) -> (f64, usize) {
        let peak = img.max();
        let row = img.rows() / 2;
        let width = (0..img.cols()).filter(|&j| img.get(row, j) >= 0.5 * peak).count();
        (peak, width)
    }

    #[test]
    fn blurred_impulse_is_sharpened() {
        let k = kernel();
        let mut s = Image2D::zeros(65, 81, 0.04, 0.04);
        s.set(32, 40, 1.0);
        let d = convolve_psf(&s, &k).unwrap();
        let f = rl_deconvolve(&d, &k, &RlConfig::default()).unwrap();
        let (p0, w0) = peak_and_width(&d);
        let (p1, w1) = peak_and_width(&f);
        assert!(p1 > p0, "{p1} vs {p0}");
        assert!(w1 < w0, "{w1} vs {w0}");
    }

    #[test]
    fn residual_of_exact_model_is_zero() {
        let k = kernel();
        let f = random_map(40, 48, 2);
        let d = convolve_psf(&f, &k).unwrap();
        assert!(rl_residual(&d, &k, &f).unwrap() < 1e-15);
    }

    #[test]
    fn residual_decreases_on_blurred_data() {
        let k = kernel();
        let d = convolve_psf(&random_map(48, 64, 3), &k).unwrap();
        let mut res = vec![rl_residual(&d, &k, &d).unwrap()];
        rl_iterate(&d, &k, &RlConfig::default(), |_, f| res.push(rl_residual(&d, &k, f).unwrap())).unwrap();
        assert!(res.windows(2).all(|w| w[1] <= w[0]), "{res:?}");
    }

    #[test]
    fn flux_is_nearly_conserved_on_interior_dominated_images() {
        let k = kernel();
        let mut d = Image2D::filled(128, 128, 0.04, 0.04, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 24..104 {
            for j in 24..104 {
                d.set(i, j, rng.random_range(0.0..1.0));
            }
        }
        let total = d.sum();
        let mut worst: f64 = 0.0;
        rl_iterate(&d, &k, &RlConfig::default(), |_, f| worst = worst.max((f.sum() / total - 1.0).abs())).unwrap();
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let k = kernel();
        let mut d = random_map(30, 40, 5);
        assert!(rl_deconvolve(&d, &k, &RlConfig { iterations: 0, ..Default::default() }).is_err());
        d.set(1, 1, -0.1);
        assert!(matches!(rl_deconvolve(&d, &k, &RlConfig::default()), Err(Error::Domain { .. })));
        assert!(rl_deconvolve(&random_map(10, 10, 6), &k, &RlConfig::default()).is_err());
    }

    #[test]
    fn early_stop_honours_tolerance() {
        let d = convolve_psf(&random_map(40, 48, 7), &kernel()).unwrap();
        let mut steps = 0;
        let cfg = RlConfig { iterations: 200, tolerance: 1e-2, ..Default::default() };
        rl_iterate(&d, &kernel(), &cfg, |_, _| steps += 1).unwrap();
        assert!(steps < 200);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn estimates_stay_nonnegative(seed in any::<u64>(), zeros in 0usize..200) {
            let mut d = random_map(32, 40, seed);
            for z in 0..zeros {
                let idx = (z * 7919 + seed as usize) % d.len();
                d.data_mut()[idx] = 0.0;
            }
            let mut ok = true;
            rl_iterate(&d, &kernel(), &RlConfig::default(), |_, f| ok &= f.data().iter().all(|&v| v >= 0.0)).unwrap();
            prop_assert!(ok);
        }
    }
}
