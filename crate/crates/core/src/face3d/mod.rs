//! Linear 3D face model: construction, weak-perspective projection,
//! cylindrical UV unwrapping, visibility and differentiable texture
//! rendering.
//!
//! Conventions (pinned by the committed test vectors below):
//!
//! * Shapes/textures are flat `[3Q]` vectors, vertex `i` at `[3i..3i+3]`.
//! * Rotations: `R = R_z(roll) · R_x(pitch) · R_y(yaw)`, applied to column
//!   vectors. Yaw +90° maps the +z axis onto +x.
//! * Projection drops z after rotation and scaling; image x is the column
//!   axis and image y the row axis. The viewer sits at z = +∞, so larger
//!   rotated z means closer.
//! * UV space: `u = alpha2·y + beta2` is the row axis, `v = alpha1·atan2(x,z)
//!   + beta1` the column axis. Bilateral symmetry mirrors the column (v)
//!   axis, which is what [`flip_uv`] reverses.

mod io;
mod raster;

pub use io::{
    load_texture_png16, load_visibility_png16, save_texture_png16, save_visibility_png16,
};
pub use raster::{
    rasterize, render, render_map, render_var, render_with_map, sample_bilinear,
    sample_uv_texture, visibility_map, RasterHit, RenderMap,
};

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};

/// Mean shape/texture plus PCA bases; defines the face parameter space.
#[derive(Debug, Clone)]
pub struct MorphableModel {
    /// Object-space mean shape, `[3Q]`.
    pub mean_shape: Array1<f64>,
    /// Unit-interval mean vertex colors, `[3Q]`.
    pub mean_texture: Array1<f64>,
    pub basis_id: Array2<f64>,
    pub basis_exp: Array2<f64>,
    pub basis_tex: Array2<f64>,
    /// Vertex indices, `[F, 3]`.
    pub triangles: Array2<u32>,
}

impl MorphableModel {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.vertex_count();
        if q < 4 {
            return Err(Error::contract(format!("model needs Q >= 4 vertices, got {q}")));
        }
        if self.mean_shape.len() != 3 * q || self.mean_texture.len() != 3 * q {
            return Err(Error::contract("mean shape/texture length must be 3Q"));
        }
        for (name, basis) in [
            ("basis_id", &self.basis_id),
            ("basis_exp", &self.basis_exp),
            ("basis_tex", &self.basis_tex),
        ] {
            if basis.nrows() != 3 * q {
                return Err(Error::contract(format!("{name} must have 3Q rows")));
            }
            if basis.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("{name} has non-finite entries")));
            }
        }
        if self.triangles.ncols() != 3 {
            return Err(Error::contract("triangles must be F x 3"));
        }
        if self.triangles.iter().any(|&i| i as usize >= q) {
            return Err(Error::contract("triangle index out of range"));
        }
        Ok(())
    }
}

/// Identity / expression / texture coefficients for one face.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FaceCoefficients {
    pub alpha_id: Vec<f64>,
    pub alpha_exp: Vec<f64>,
    pub alpha_tex: Vec<f64>,
}

impl FaceCoefficients {
    pub fn zeros(model: &MorphableModel) -> Self {
        FaceCoefficients {
            alpha_id: vec![0.0; model.basis_id.ncols()],
            alpha_exp: vec![0.0; model.basis_exp.ncols()],
            alpha_tex: vec![0.0; model.basis_tex.ncols()],
        }
    }
}

/// Weak-perspective camera: scale, Euler angles in degrees, 2D translation
/// in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FacePose {
    pub scale: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
    pub translation: [f64; 2],
}

impl FacePose {
    pub fn identity() -> Self {
        FacePose {
            scale: 1.0,
            pitch_deg: 0.0,
            yaw_deg: 0.0,
            roll_deg: 0.0,
            translation: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::contract(format!("pose scale must be > 0, got {}", self.scale)));
        }
        for (name, a) in [
            ("pitch", self.pitch_deg),
            ("yaw", self.yaw_deg),
            ("roll", self.roll_deg),
        ] {
            if !(a > -180.0 && a <= 180.0) {
                return Err(Error::contract(format!("{name} must lie in (-180, 180], got {a}")));
            }
        }
        Ok(())
    }
}

/// Scaling/translation constants placing the unwrapped face on the texel
/// grid, plus the grid resolution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UVUnwrapConfig {
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub resolution: usize,
}

impl UVUnwrapConfig {
    /// Constants that map the given shape's azimuth/height ranges onto the
    /// texel grid with a small margin. The azimuth range is symmetrized so
    /// that a bilaterally symmetric mesh lands symmetric about the central
    /// column, which keeps [`flip_uv`] aligned with mirrored geometry.
    pub fn bounding(shape: &Array1<f64>, resolution: usize) -> Result<Self> {
        if resolution < 4 {
            return Err(Error::contract("resolution must be >= 4"));
        }
        let q = shape.len() / 3;
        let mut az_max = 0.0f64;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for i in 0..q {
            let (x, y, z) = (shape[3 * i], shape[3 * i + 1], shape[3 * i + 2]);
            if x == 0.0 && z == 0.0 {
                return Err(Error::contract(format!(
                    "vertex {i} is degenerate for cylindrical unwrap (x = z = 0)"
                )));
            }
            az_max = az_max.max(x.atan2(z).abs());
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        if az_max <= 0.0 || y_max <= y_min {
            return Err(Error::contract("shape has no azimuth/height extent"));
        }
        // 8% slack absorbs identity/expression deformations of the mean.
        let az_max = az_max * 1.08;
        let y_mid = 0.5 * (y_min + y_max);
        let y_half = 0.5 * (y_max - y_min) * 1.08;
        let res = resolution as f64;
        let pad = 0.02 * res + 1.0;
        let half_span = (res - 1.0) / 2.0 - pad;
        let alpha1 = half_span / az_max;
        let beta1 = (res - 1.0) / 2.0;
        let alpha2 = half_span / y_half;
        let beta2 = (res - 1.0) / 2.0 - alpha2 * y_mid;
        Ok(UVUnwrapConfig {
            alpha1,
            beta1,
            alpha2,
            beta2,
            resolution,
        })
    }
}

/// Per-texel color map over the unwrapped face, with a coverage mask.
/// Texels outside coverage are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct UVTexture {
    pub texels: Array3<f64>,
    pub coverage: Array2<bool>,
}

impl UVTexture {
    /// Builds a texture, zeroing texels outside coverage and clamping the
    /// rest into the unit interval.
    pub fn new(mut texels: Array3<f64>, coverage: Array2<bool>) -> Result<Self> {
        let (h, w, c) = texels.dim();
        if c != 3 || h != w {
            return Err(Error::contract(format!(
                "texture must be res x res x 3, got {h}x{w}x{c}"
            )));
        }
        if coverage.dim() != (h, w) {
            return Err(Error::contract("coverage shape must match texels"));
        }
        for ((r, cidx, ch), v) in texels.indexed_iter_mut() {
            let _ = ch;
            if coverage[(r, cidx)] {
                *v = v.clamp(0.0, 1.0);
            } else {
                *v = 0.0;
            }
        }
        Ok(UVTexture { texels, coverage })
    }

    pub fn resolution(&self) -> usize {
        self.texels.dim().0
    }

    /// Mirror across the bilateral-symmetry (column) axis.
    pub fn flipped(&self) -> UVTexture {
        let mut texels = self.texels.clone();
        texels.invert_axis(ndarray::Axis(1));
        let mut coverage = self.coverage.clone();
        coverage.invert_axis(ndarray::Axis(1));
        UVTexture {
            texels: texels.as_standard_layout().to_owned(),
            coverage: coverage.as_standard_layout().to_owned(),
        }
    }
}

/// Per-texel visibility scores in `[0, 1]`: clamped z of the rotated surface
/// normal, zeroed where the texel's surface point is occluded or uncovered.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMap {
    pub values: Array2<f64>,
}

impl VisibilityMap {
    pub fn resolution(&self) -> usize {
        self.values.dim().0
    }

    pub fn flipped(&self) -> VisibilityMap {
        let mut values = self.values.clone();
        values.invert_axis(ndarray::Axis(1));
        VisibilityMap {
            values: values.as_standard_layout().to_owned(),
        }
    }
}

/// Linear face construction: mean plus basis-weighted offsets; the texture
/// is clamped into the unit interval.
pub fn build_face(
    model: &MorphableModel,
    coeff: &FaceCoefficients,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if coeff.alpha_id.len() != model.basis_id.ncols()
        || coeff.alpha_exp.len() != model.basis_exp.ncols()
        || coeff.alpha_tex.len() != model.basis_tex.ncols()
    {
        return Err(Error::contract(format!(
            "coefficient dims ({}, {}, {}) do not match bases ({}, {}, {})",
            coeff.alpha_id.len(),
            coeff.alpha_exp.len(),
            coeff.alpha_tex.len(),
            model.basis_id.ncols(),
            model.basis_exp.ncols(),
            model.basis_tex.ncols(),
        )));
    }
    let a_id = Array1::from_vec(coeff.alpha_id.clone());
    let a_exp = Array1::from_vec(coeff.alpha_exp.clone());
    let a_tex = Array1::from_vec(coeff.alpha_tex.clone());
    let shape = &model.mean_shape + &model.basis_id.dot(&a_id) + &model.basis_exp.dot(&a_exp);
    let texture = (&model.mean_texture + &model.basis_tex.dot(&a_tex)).mapv(|v| v.clamp(0.0, 1.0));
    Ok((shape, texture))
}

fn deg(rad: f64) -> f64 {
    rad.to_degrees()
}

fn rad(deg: f64) -> f64 {
    deg.to_radians()
}

/// `R = R_z(roll) · R_x(pitch) · R_y(yaw)`, for column vectors.
pub fn rotation_matrix(pose: &FacePose) -> [[f64; 3]; 3] {
    let (sy, cy) = rad(pose.yaw_deg).sin_cos();
    let (sp, cp) = rad(pose.pitch_deg).sin_cos();
    let (sr, cr) = rad(pose.roll_deg).sin_cos();
    [
        [
            cr * cy - sr * sp * sy,
            -sr * cp,
            cr * sy + sr * sp * cy,
        ],
        [
            sr * cy + cr * sp * sy,
            cr * cp,
            sr * sy - cr * sp * cy,
        ],
        [-cp * sy, sp, cp * cy],
    ]
}

pub(crate) fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Weak-perspective projection of a `[3Q]` shape to `[Q, 2]` image
/// coordinates `(x, y)`.
pub fn project(shape: &Array1<f64>, pose: &FacePose) -> Result<Array2<f64>> {
    pose.validate()?;
    if shape.len() % 3 != 0 {
        return Err(Error::contract("shape length must be a multiple of 3"));
    }
    let r = rotation_matrix(pose);
    let q = shape.len() / 3;
    let mut out = Array2::<f64>::zeros((q, 2));
    for i in 0..q {
        let v = rotate(&r, [shape[3 * i], shape[3 * i + 1], shape[3 * i + 2]]);
        out[(i, 0)] = pose.scale * v[0] + pose.translation[0];
        out[(i, 1)] = pose.scale * v[1] + pose.translation[1];
    }
    Ok(out)
}

/// Rotated vertex depths (larger = closer to the viewer).
pub(crate) fn rotated_depths(shape: &Array1<f64>, r: &[[f64; 3]; 3]) -> Vec<f64> {
    let q = shape.len() / 3;
    (0..q)
        .map(|i| {
            let v = rotate(r, [shape[3 * i], shape[3 * i + 1], shape[3 * i + 2]]);
            v[2]
        })
        .collect()
}

/// Recovers yaw (degrees) from a rotation matrix under the same convention
/// as [`rotation_matrix`].
pub fn yaw_from_rotation(r: &[[f64; 3]; 3]) -> Result<f64> {
    // orthonormality: RᵀR = I within 1e-6 and det(R) = +1
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            if (dot - expect).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "input is not orthonormal (RᵀR[{i}][{j}] = {dot:.8})"
                )));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 1e-6 {
        return Err(Error::contract(format!("input is not a proper rotation (det = {det:.8})")));
    }
    Ok(deg((-r[2][0]).atan2(r[2][2])))
}

/// Cylindrical unwrap of a `[3Q]` shape to `[Q, 2]` texel coordinates
/// `(u, v)` (row, column). Outputs are clamped into `[0, resolution)`;
/// a config from [`UVUnwrapConfig::bounding`] keeps the shape inside
/// without clamping.
pub fn unwrap_uv(shape: &Array1<f64>, config: &UVUnwrapConfig) -> Result<Array2<f64>> {
    let q = shape.len() / 3;
    let res = config.resolution as f64;
    let hi = res - 1e-6;
    let mut out = Array2::<f64>::zeros((q, 2));
    for i in 0..q {
        let (x, y, z) = (shape[3 * i], shape[3 * i + 1], shape[3 * i + 2]);
        if x == 0.0 && z == 0.0 {
            return Err(Error::contract(format!(
                "vertex {i} is degenerate for cylindrical unwrap (x = z = 0)"
            )));
        }
        let v = config.alpha1 * x.atan2(z) + config.beta1;
        let u = config.alpha2 * y + config.beta2;
        out[(i, 0)] = u.clamp(0.0, hi);
        out[(i, 1)] = v.clamp(0.0, hi);
    }
    Ok(out)
}

/// True for triangles fully on the front hemisphere of the canonical shape
/// (all vertex z > 0); only these participate in UV coverage.
pub fn front_triangles(shape: &Array1<f64>, triangles: &Array2<u32>) -> Vec<bool> {
    triangles
        .rows()
        .into_iter()
        .map(|t| t.iter().all(|&vi| shape[3 * vi as usize + 2] > 0.0))
        .collect()
}

/// Mirror a `[res, res, C]` UV-space tensor across the bilateral-symmetry
/// axis (reverses the column axis). An exact involution.
pub fn flip_uv(texture_like: &Array3<f64>) -> Array3<f64> {
    let mut out = texture_like.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}
