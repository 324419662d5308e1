//! Persistence for face artifacts.
//!
//! * [`MorphableModel`] ⇄ the binary tensor container (JSON header, little
//!   endian payloads).
//! * [`UVTexture`] ⇄ 16-bit RGBA PNG (alpha stores coverage) plus a JSON
//!   sidecar at `<png path>.json` recording resolution and the coverage
//!   encoding.
//! * [`VisibilityMap`] ⇄ 16-bit grayscale PNG plus the same style sidecar.

use super::{MorphableModel, UVTexture, VisibilityMap};
use crate::container::Container;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Ix1, Ix2};
use serde::{Deserialize, Serialize};
use std::path::Path;

impl MorphableModel {
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "kind": "morphable_model",
            "vertices": self.vertex_count(),
        }));
        c.push_f64("mean_shape", self.mean_shape.clone().into_dyn());
        c.push_f64("mean_texture", self.mean_texture.clone().into_dyn());
        c.push_f64("basis_id", self.basis_id.clone().into_dyn());
        c.push_f64("basis_exp", self.basis_exp.clone().into_dyn());
        c.push_f64("basis_tex", self.basis_tex.clone().into_dyn());
        c.push_u32("triangles", self.triangles.clone().into_dyn());
        c.write_to(path)
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<MorphableModel> {
        let c = Container::read_from(&path)?;
        if c.meta["kind"] != "morphable_model" {
            return Err(Error::format(format!(
                "{}: not a morphable model container",
                path.as_ref().display()
            )));
        }
        let arr1 = |name: &str| -> Result<ndarray::Array1<f64>> {
            Ok(c.get_f64(name)?
                .clone()
                .into_dimensionality::<Ix1>()
                .map_err(|e| Error::format(e.to_string()))?)
        };
        let arr2 = |name: &str| -> Result<Array2<f64>> {
            Ok(c.get_f64(name)?
                .clone()
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::format(e.to_string()))?)
        };
        let model = MorphableModel {
            mean_shape: arr1("mean_shape")?,
            mean_texture: arr1("mean_texture")?,
            basis_id: arr2("basis_id")?,
            basis_exp: arr2("basis_exp")?,
            basis_tex: arr2("basis_tex")?,
            triangles: c
                .get_u32("triangles")?
                .clone()
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::format(e.to_string()))?,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TextureSidecar {
    schema_version: u32,
    kind: String,
    resolution: usize,
    coverage: String,
    value_range: [f64; 2],
}

fn sidecar_path(png: &Path) -> std::path::PathBuf {
    let mut s = png.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

fn write_sidecar(png: &Path, sidecar: &TextureSidecar) -> Result<()> {
    let path = sidecar_path(png);
    std::fs::write(&path, serde_json::to_vec_pretty(sidecar)?)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_sidecar(png: &Path, expect_kind: &str) -> Result<TextureSidecar> {
    let path = sidecar_path(png);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let sidecar: TextureSidecar = serde_json::from_slice(&bytes)?;
    if sidecar.kind != expect_kind {
        return Err(Error::format(format!(
            "{}: sidecar kind '{}', expected '{expect_kind}'",
            path.display(),
            sidecar.kind
        )));
    }
    Ok(sidecar)
}

const U16_MAX: f64 = 65535.0;

/// 16-bit RGBA PNG with coverage in the alpha channel, plus a JSON sidecar.
pub fn save_texture_png16(texture: &UVTexture, png_path: impl AsRef<Path>) -> Result<()> {
    let png_path = png_path.as_ref();
    let res = texture.resolution();
    let mut buf = image::ImageBuffer::<image::Rgba<u16>, Vec<u16>>::new(res as u32, res as u32);
    for (row, col) in itertools_like(res) {
        let covered = texture.coverage[(row, col)];
        let px = |ch: usize| (texture.texels[(row, col, ch)] * U16_MAX).round() as u16;
        buf.put_pixel(
            col as u32,
            row as u32,
            image::Rgba([px(0), px(1), px(2), if covered { u16::MAX } else { 0 }]),
        );
    }
    image::DynamicImage::ImageRgba16(buf).save(png_path)?;
    write_sidecar(
        png_path,
        &TextureSidecar {
            schema_version: 1,
            kind: "uv_texture".into(),
            resolution: res,
            coverage: "alpha".into(),
            value_range: [0.0, 1.0],
        },
    )
}

pub fn load_texture_png16(png_path: impl AsRef<Path>) -> Result<UVTexture> {
    let png_path = png_path.as_ref();
    let sidecar = read_sidecar(png_path, "uv_texture")?;
    let img = image::open(png_path)?.into_rgba16();
    let (w, h) = img.dimensions();
    if w as usize != sidecar.resolution || h as usize != sidecar.resolution {
        return Err(Error::format(format!(
            "{}: resolution {}x{} does not match sidecar {}",
            png_path.display(),
            w,
            h,
            sidecar.resolution
        )));
    }
    let res = sidecar.resolution;
    let mut texels = Array3::<f64>::zeros((res, res, 3));
    let mut coverage = Array2::<bool>::from_elem((res, res), false);
    for (row, col) in itertools_like(res) {
        let px = img.get_pixel(col as u32, row as u32);
        for ch in 0..3 {
            texels[(row, col, ch)] = px.0[ch] as f64 / U16_MAX;
        }
        coverage[(row, col)] = px.0[3] >= u16::MAX / 2;
    }
    UVTexture::new(texels, coverage)
}

/// 16-bit grayscale PNG plus a JSON sidecar.
pub fn save_visibility_png16(vis: &VisibilityMap, png_path: impl AsRef<Path>) -> Result<()> {
    let png_path = png_path.as_ref();
    let res = vis.resolution();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(res as u32, res as u32);
    for (row, col) in itertools_like(res) {
        buf.put_pixel(
            col as u32,
            row as u32,
            image::Luma([(vis.values[(row, col)] * U16_MAX).round() as u16]),
        );
    }
    image::DynamicImage::ImageLuma16(buf).save(png_path)?;
    write_sidecar(
        png_path,
        &TextureSidecar {
            schema_version: 1,
            kind: "visibility_map".into(),
            resolution: res,
            coverage: "zero".into(),
            value_range: [0.0, 1.0],
        },
    )
}

pub fn load_visibility_png16(png_path: impl AsRef<Path>) -> Result<VisibilityMap> {
    let png_path = png_path.as_ref();
    let sidecar = read_sidecar(png_path, "visibility_map")?;
    let img = image::open(png_path)?.into_luma16();
    let res = sidecar.resolution;
    if img.dimensions() != (res as u32, res as u32) {
        return Err(Error::format(format!(
            "{}: resolution does not match sidecar",
            png_path.display()
        )));
    }
    let mut values = Array2::<f64>::zeros((res, res));
    for (row, col) in itertools_like(res) {
        values[(row, col)] = img.get_pixel(col as u32, row as u32).0[0] as f64 / U16_MAX;
    }
    Ok(VisibilityMap { values })
}

fn itertools_like(res: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..res).flat_map(move |r| (0..res).map(move |c| (r, c)))
}
