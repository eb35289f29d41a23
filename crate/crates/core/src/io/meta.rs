//! Sidecar metadata for raster files: `<image>.meta`, an INI document whose
//! `[image]` section carries the grid geometry PFM cannot store.

use std::path::{Path, PathBuf};

use super::ini::{Ini, IniWriter, SectionReader};
use crate::error::{Error, Result};
use crate::image::Image2D;

pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let mut s = image_path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Extra `(section, key, value)` triples recorded after `[image]`.
pub type Extra = Vec<(String, String, String)>;

pub fn encode(img: &Image2D, extra: &Extra) -> String {
    let mut w = IniWriter::default();
    w.section("image")
        .kv("rows", img.rows())
        .kv("cols", img.cols())
        .kv("dx", img.dx)
        .kv("dz", img.dz)
        .kv("origin_x", img.origin_x)
        .kv("origin_z", img.origin_z);
    let mut current: Option<&str> = None;
    for (sec, k, v) in extra {
        if current != Some(sec.as_str()) {
            w.section(sec);
            current = Some(sec.as_str());
        }
        w.kv(k, v);
    }
    w.finish()
}

/// Applies the `[image]` geometry in `text` to `img`.
pub fn apply(text: &str, img: Image2D) -> Result<Image2D> {
    let ini = Ini::parse(text)?;
    let sec = ini
        .unique("image")?
        .ok_or_else(|| Error::Format("metadata lacks an [image] section".into()))?;
    let mut r = SectionReader::new(sec);
    let rows: usize = r.require("rows")?;
    let cols: usize = r.require("cols")?;
    let dx: f64 = r.require("dx")?;
    let dz: f64 = r.require("dz")?;
    let ox: f64 = r.get_or("origin_x", 0.0)?;
    let oz: f64 = r.get_or("origin_z", 0.0)?;
    r.finish()?;
    if rows != img.rows() || cols != img.cols() {
        return Err(Error::Format(format!(
            "metadata says {rows}x{cols} but image is {}x{}",
            img.rows(),
            img.cols()
        )));
    }
    if !(dx > 0.0 && dz > 0.0) || !dx.is_finite() || !dz.is_finite() {
        return Err(Error::Format("metadata spacing must be positive".into()));
    }
    let mut img = img.with_origin(ox, oz);
    img.dx = dx;
    img.dz = dz;
    Ok(img)
}

/// Looks up `section.key` in a metadata document.
pub fn lookup(text: &str, section: &str, key: &str) -> Option<String> {
    let ini = Ini::parse(text).ok()?;
    let sec = ini.sections_named(section).next()?;
    sec.entries.iter().find(|e| e.key == key).map(|e| e.value.clone())
}

pub fn write(image_path: &Path, img: &Image2D, extra: &Extra) -> Result<()> {
    std::fs::write(sidecar_path(image_path), encode(img, extra))?;
    Ok(())
}

/// Reads the sidecar next to `image_path`, if present.
pub fn read_optional(image_path: &Path) -> Result<Option<String>> {
    let p = sidecar_path(image_path);
    if p.exists() {
        Ok(Some(std::fs::read_to_string(p)?))
    } else {
        Ok(None)
    }
}
