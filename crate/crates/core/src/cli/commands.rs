use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{table_size, RunConfig};
use super::*;
use crate::eval::{match_wires, wire_clusters, MetricsRecord};
use crate::inr::{checkpoint, HashGridConfig, MlpConfig};
use crate::io::range::{parse_f64_range, parse_u32_range};
use crate::optim::{self, GridSearchConfig, TrainConfig};
use crate::render::{self, Compression};
use crate::rl::{rl_deconvolve, rl_residual, RlConfig};

fn kv(section: &str, key: &str, value: impl ToString) -> (String, String, String) {
    (section.to_string(), key.to_string(), value.to_string())
}

fn compression(dr: f64) -> Result<Compression> {
    let c = Compression::with_dynamic_range(dr);
    c.validate()?;
    Ok(c)
}

fn preview_linear(path: Option<&PathBuf>, img: &Image2D, c: Compression) -> Result<()> {
    match path {
        Some(p) => pgm::write_preview(p, &render::log_compress(img, c)?),
        None => Ok(()),
    }
}

fn check_unit_range(img: &Image2D, what: &str) -> Result<()> {
    match img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::invalid(format!("{what} must lie in [0, 1], found {v}"))),
        None => Ok(()),
    }
}

pub fn phantom_gen(a: &PhantomGenArgs) -> Result<()> {
    let (mut spec, pinned) = a.source.load()?;
    spec.seed = match a.seed {
        Some(s) => s,
        None if pinned => spec.seed,
        None => resolve_seed(None),
    };
    let img = phantom::rasterize(&spec)?;
    pfm::write(&a.out, &img)?;
    let sidecar = format!("{}\n{}", meta::encode(&img, &Vec::new()), spec.to_ini());
    write_text(&meta::sidecar_path(&a.out), &sidecar)?;
    preview_linear(a.preview.as_ref(), &img, Compression::default())?;
    info!(
        "wrote {}x{} phantom ({} inclusions, {} wires, seed {}) to {}",
        img.rows(),
        img.cols(),
        spec.inclusions.len(),
        spec.wires.len(),
        spec.seed,
        a.out.display()
    );
    Ok(())
}

/// `render` and `render rebeam`; the latter only swaps the center frequency.
pub fn render(o: &RenderOpts, freq: Option<f64>) -> Result<()> {
    let echo_path = o.echo.as_deref().expect("required by clap");
    let out = o.out.as_deref().expect("required by clap");
    let echo = load_image(echo_path, &o.geometry)?;
    let mut params = load_psf(o.psf.as_deref())?;
    if let Some(f) = freq {
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::invalid(format!("--freq must be positive, got {f}")));
        }
        params = params.with_frequency(f);
    }
    let c = compression(o.dr)?;
    if o.pool < 1 {
        return Err(Error::invalid("--pool must be at least 1"));
    }
    let k = params.build_kernel(echo.dx, echo.dz)?;
    let mut extra = vec![
        kv("render", "center_frequency", params.center_frequency),
        kv("render", "f_number", params.f_number),
        kv("render", "n_cycles", params.n_cycles),
        kv("render", "dynamic_range", o.dr),
        kv("render", "pool", o.pool),
        kv("render", "noise_sigma", o.noise_sigma),
    ];
    let mut e = render::convolve_psf(&echo, &k)?;
    if o.noise_sigma != 0.0 {
        let seed = resolve_seed(o.seed);
        extra.push(kv("render", "seed", seed));
        e = render::add_noise(&e, o.noise_sigma, &mut ChaCha8Rng::seed_from_u64(seed))?;
    } else {
        // still validates the sigma
        e = render::add_noise(&e, o.noise_sigma, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    if o.pool > 1 {
        e = e.avg_pool(o.pool)?;
    }
    let b = render::log_compress(&e, c)?;
    save_image(out, &b, &extra)?;
    if let Some(p) = &o.preview {
        pgm::write_preview(p, &b)?;
    }
    info!(
        "rendered {}x{} B-mode at {} MHz to {}",
        b.rows(),
        b.cols(),
        params.center_frequency,
        out.display()
    );
    Ok(())
}

pub fn deconv_rl(a: &RlArgs) -> Result<()> {
    let b = load_image(&a.bmode, &a.geometry)?;
    check_unit_range(&b, "B-mode input")?;
    let params = load_psf(a.psf.as_deref())?;
    let c = compression(a.dr)?;
    let cfg = RlConfig {
        iterations: a.iters,
        eps: a.eps,
        tolerance: a.tol,
    };
    cfg.validate()?;
    if a.upsample < 1 {
        return Err(Error::invalid("--upsample must be at least 1"));
    }
    let k = params.build_kernel(b.dx, b.dz)?;
    let d = if a.linear { render::decompress(&b, c) } else { b.clone() };
    let f = rl_deconvolve(&d, &k, &cfg)?;
    info!("RL residual after {} iterations: {:.6}", cfg.iterations, rl_residual(&d, &k, &f)?);
    // the log-domain estimate is expanded so every estimate is linear
    let est = if a.linear { f } else { render::decompress(&f, c) };
    let est = if a.upsample > 1 { est.upsample_nearest(a.upsample) } else { est };
    let extra = vec![
        kv("rl", "iterations", cfg.iterations),
        kv("rl", "linear", a.linear),
        kv("rl", "dynamic_range", a.dr),
    ];
    save_image(&a.out, &est, &extra)?;
    preview_linear(a.preview.as_ref(), &est, c)
}

pub fn deconv_inr(a: &InrArgs) -> Result<()> {
    let b = load_image(&a.bmode, &a.geometry)?;
    check_unit_range(&b, "B-mode input")?;
    let params = load_psf(a.psf.as_deref())?;
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_ini(&read_text(p)?).map_err(|e| in_file(p, e))?,
        None => RunConfig::default(),
    };
    rc.apply_flags(a)?;
    if !rc.seed_pinned {
        rc.train.seed = resolve_seed(None);
    }
    rc.train.validate()?;
    let spec = optim::sampling_for(&b, &rc.train);
    spec.validate()?;
    rc.grid.max_resolution = rc.max_resolution.unwrap_or(spec.fine_rows().max(spec.fine_cols()));
    let k = params.build_kernel(spec.fine_dx(), spec.fine_dz())?;
    let mut model = optim::init_model(&rc.grid, &rc.mlp, rc.train.seed)?;
    info!(
        "training {} parameters for {} iterations on a {}x{} grid (seed {})",
        model.parameter_count(),
        rc.train.iterations,
        spec.fine_rows(),
        spec.fine_cols(),
        rc.train.seed
    );
    let report = optim::train(&b, &k, &mut model, &rc.train)?;
    info!("final loss {:.6} after {:.1} s", report.final_loss(), report.wall_clock_secs);
    let est = optim::estimate(&model, &b, rc.train.oversample)?;
    let extra = vec![
        kv("train", "seed", rc.train.seed),
        kv("train", "iterations", rc.train.iterations),
        kv("train", "final_loss", format!("{:e}", report.final_loss())),
    ];
    save_image(&a.out, &est, &extra)?;
    preview_linear(a.preview.as_ref(), &est, rc.train.compression)?;
    if let Some(p) = &a.checkpoint {
        checkpoint::save(p, &model)?;
    }
    if let Some(p) = &a.history {
        write_text(p, &report.to_csv())?;
    }
    Ok(())
}

pub fn grid_search(a: &GridArgs) -> Result<()> {
    let target = load_image(&a.target, &a.geometry)?;
    check_unit_range(&target, "target")?;
    let base = load_psf(a.psf.as_deref())?;
    let fnums = parse_f64_range(&a.fnum)?;
    let cycles = parse_u32_range(&a.cycles)?;
    let seed = resolve_seed(a.seed);
    let train = TrainConfig {
        iterations: a.short_iters,
        oversample: a.oversample,
        compression: compression(a.dr)?,
        seed,
        log_every: 0,
        ..TrainConfig::default()
    };
    train.validate()?;
    let fine = target.rows().max(target.cols()) * a.oversample;
    let cfg = GridSearchConfig {
        train,
        grid: HashGridConfig {
            levels: a.levels,
            table_size: table_size(a.table_log2)?,
            ..HashGridConfig::desk(fine)
        },
        mlp: MlpConfig {
            hidden_width: a.hidden,
            ..MlpConfig::default()
        },
        score_window: a.score_window,
        consistency: a.consistency,
    };
    info!(
        "grid search over {} f-numbers x {} cycle counts, {} iterations each (seed {seed})",
        fnums.len(),
        cycles.len(),
        a.short_iters
    );
    let res = optim::psf_grid_search(&target, &base, &fnums, &cycles, &cfg)?;
    write_text(&a.out, &res.best.to_ini())?;
    let table = a.table.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_text(&table, &res.to_csv())?;
    println!(
        "best: f_number {} n_cycles {} ({} candidates)",
        res.best.f_number,
        res.best.n_cycles,
        res.table.len()
    );
    Ok(())
}

pub fn eval_metrics(a: &MetricsArgs) -> Result<()> {
    let none = GeometryArgs::default();
    let pred = load_image(&a.pred, &none)?;
    let gt = load_image(&a.gt, &none)?;
    pred.check_same_shape(&gt, "eval metrics")?;
    let c = compression(a.dr)?;
    let rec = MetricsRecord::compute(
        &display(&a.pred),
        &render::log_compress(&pred, c)?,
        &display(&a.gt),
        &render::log_compress(&gt, c)?,
        a.dr,
    )?;
    println!("{}", rec.to_text());
    if let Some(p) = &a.csv {
        write_text(p, &format!("{}\n{}\n", MetricsRecord::CSV_HEADER, rec.csv_row()))?;
    }
    Ok(())
}

pub fn eval_wires(a: &WiresArgs) -> Result<()> {
    let img = load_image(&a.pred, &GeometryArgs::default())?;
    let img = if a.bmode {
        check_unit_range(&img, "B-mode input")?;
        render::decompress(&img, compression(a.dr)?)
    } else {
        img
    };
    let (spec, _) = a.source.load()?;
    let report = wire_clusters(&img, a.threshold, a.min_pixels)?;
    let m = match_wires(&report, &spec.wires, a.tol);
    println!(
        "{} clusters; matched {}/{} wires, mean error {:.4} mm; radius {:.4} +- {:.4} mm",
        report.detected(),
        m.matched,
        m.expected,
        m.mean_error(),
        report.mean_radius(),
        report.radius_std()
    );
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
