//! Shared triangle rasterization plus the three texture-space operations
//! built on it: UV texture extraction, visibility, and rendering.
//!
//! Sample points sit at integer coordinates; the edge-function rasterizer
//! uses a top-left fill rule so texels/pixels on shared edges are claimed
//! by exactly one triangle, deterministically.

use super::{rotate, rotated_depths, rotation_matrix, FacePose, UVTexture, UVUnwrapConfig,
            VisibilityMap};
use crate::autodiff::{sparse_affine, SparseLinear, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3};
use std::rc::Rc;

#[derive(Debug, Clone, Copy)]
pub struct RasterHit {
    pub tri: u32,
    pub bary: [f64; 3],
}

#[inline]
fn edge_fn(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (p.0 - a.0) * (b.1 - a.1) - (p.1 - a.1) * (b.0 - a.0)
}

#[inline]
fn accepts_zero(a: (f64, f64), b: (f64, f64)) -> bool {
    // top-left rule: include points on top edges (horizontal, pointing +x)
    // and left edges (pointing +y, with y the row axis)
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    (dy == 0.0 && dx > 0.0) || dy > 0.0
}

/// Rasterizes triangles over a `width x height` grid of integer sample
/// points. `verts` holds per-vertex `(x, y)` positions; `depth`, when
/// given, enables z-buffering with larger values closer. Without depth,
/// the first covering triangle in index order wins. `tri_filter` can
/// exclude triangles from coverage.
pub fn rasterize(
    verts: &Array2<f64>,
    tris: &Array2<u32>,
    tri_filter: Option<&[bool]>,
    width: usize,
    height: usize,
    depth: Option<&[f64]>,
) -> Vec<Option<RasterHit>> {
    let mut hits: Vec<Option<RasterHit>> = vec![None; width * height];
    let mut zbuf: Vec<f64> = vec![f64::NEG_INFINITY; width * height];
    for (t, tri) in tris.rows().into_iter().enumerate() {
        if let Some(filter) = tri_filter {
            if !filter[t] {
                continue;
            }
        }
        let idx = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let mut p = [
            (verts[(idx[0], 0)], verts[(idx[0], 1)]),
            (verts[(idx[1], 0)], verts[(idx[1], 1)]),
            (verts[(idx[2], 0)], verts[(idx[2], 1)]),
        ];
        // orient so the shared edge rule sees a consistent winding
        let mut order = [0usize, 1, 2];
        let area = edge_fn(p[0], p[1], p[2]);
        if area == 0.0 {
            continue;
        }
        if area < 0.0 {
            p.swap(1, 2);
            order.swap(1, 2);
        }
        let area = edge_fn(p[0], p[1], p[2]);

        let min_x = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let max_x = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor()
            .min((width - 1) as f64) as usize;
        let min_y = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0) as usize;
        let max_y = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor()
            .min((height - 1) as f64) as usize;
        if min_x > max_x || min_y > max_y {
            continue;
        }

        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let pt = (x as f64, y as f64);
                let w0 = edge_fn(p[1], p[2], pt);
                let w1 = edge_fn(p[2], p[0], pt);
                let w2 = edge_fn(p[0], p[1], pt);
                let inside = (w0 > 0.0 || (w0 == 0.0 && accepts_zero(p[1], p[2])))
                    && (w1 > 0.0 || (w1 == 0.0 && accepts_zero(p[2], p[0])))
                    && (w2 > 0.0 || (w2 == 0.0 && accepts_zero(p[0], p[1])));
                if !inside {
                    continue;
                }
                let mut bary = [0.0f64; 3];
                bary[order[0]] = w0 / area;
                bary[order[1]] = w1 / area;
                bary[order[2]] = w2 / area;
                let cell = y * width + x;
                match depth {
                    Some(d) => {
                        let z = bary
                            .iter()
                            .zip([tri[0], tri[1], tri[2]])
                            .map(|(b, vi)| b * d[vi as usize])
                            .sum::<f64>();
                        if hits[cell].is_none() || z > zbuf[cell] {
                            zbuf[cell] = z;
                            hits[cell] = Some(RasterHit { tri: t as u32, bary });
                        }
                    }
                    None => {
                        if hits[cell].is_none() {
                            hits[cell] = Some(RasterHit { tri: t as u32, bary });
                        }
                    }
                }
            }
        }
    }
    hits
}

/// Bilinear sample of an `[h, w, c]` array at continuous `(x, y)` with
/// border clamping; pixel centers sit at integer coordinates.
pub fn sample_bilinear(image: &Array3<f64>, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = image.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    (0..c)
        .map(|ch| {
            let top = image[(y0, x0, ch)] * (1.0 - tx) + image[(y0, x1, ch)] * tx;
            let bot = image[(y1, x0, ch)] * (1.0 - tx) + image[(y1, x1, ch)] * tx;
            top * (1.0 - ty) + bot * ty
        })
        .collect()
}

fn uv_hits(
    uv: &Array2<f64>,
    triangles: &Array2<u32>,
    tri_filter: Option<&[bool]>,
    config: &UVUnwrapConfig,
) -> Vec<Option<RasterHit>> {
    // uv columns are (u=row, v=col); the rasterizer wants (x, y)
    let q = uv.nrows();
    let mut verts = Array2::<f64>::zeros((q, 2));
    for i in 0..q {
        verts[(i, 0)] = uv[(i, 1)];
        verts[(i, 1)] = uv[(i, 0)];
    }
    rasterize(
        &verts,
        triangles,
        tri_filter,
        config.resolution,
        config.resolution,
        None,
    )
}

/// Pulls image colors into UV space: rasterizes each UV-space triangle,
/// barycentrically interpolates the projected 2D position of every covered
/// texel, and bilinearly samples the image there.
pub fn sample_uv_texture(
    image: &Array3<f64>,
    vertices_2d: &Array2<f64>,
    uv: &Array2<f64>,
    triangles: &Array2<u32>,
    config: &UVUnwrapConfig,
) -> Result<UVTexture> {
    if triangles.nrows() == 0 {
        return Err(Error::contract("sample_uv_texture: empty triangle list"));
    }
    let res = config.resolution;
    let hits = uv_hits(uv, triangles, None, config);
    let mut texels = Array3::<f64>::zeros((res, res, 3));
    let mut coverage = Array2::<bool>::from_elem((res, res), false);
    for row in 0..res {
        for col in 0..res {
            let Some(hit) = &hits[row * res + col] else {
                continue;
            };
            let tri = triangles.row(hit.tri as usize);
            let mut x = 0.0;
            let mut y = 0.0;
            for (b, &vi) in hit.bary.iter().zip(tri.iter()) {
                x += b * vertices_2d[(vi as usize, 0)];
                y += b * vertices_2d[(vi as usize, 1)];
            }
            let rgb = sample_bilinear(image, x, y);
            for ch in 0..3 {
                texels[(row, col, ch)] = rgb[ch];
            }
            coverage[(row, col)] = true;
        }
    }
    UVTexture::new(texels, coverage)
}

/// Area-weighted vertex normals of the rotated mesh, normalized.
fn vertex_normals(shape: &Array1<f64>, r: &[[f64; 3]; 3], triangles: &Array2<u32>) -> Vec<[f64; 3]> {
    let q = shape.len() / 3;
    let pos: Vec<[f64; 3]> = (0..q)
        .map(|i| rotate(r, [shape[3 * i], shape[3 * i + 1], shape[3 * i + 2]]))
        .collect();
    let mut normals = vec![[0.0f64; 3]; q];
    for tri in triangles.rows() {
        let (a, b, c) = (tri[0] as usize, tri[1] as usize, tri[2] as usize);
        let e1 = [
            pos[b][0] - pos[a][0],
            pos[b][1] - pos[a][1],
            pos[b][2] - pos[a][2],
        ];
        let e2 = [
            pos[c][0] - pos[a][0],
            pos[c][1] - pos[a][1],
            pos[c][2] - pos[a][2],
        ];
        let n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        for &vi in [a, b, c].iter() {
            for k in 0..3 {
                normals[vi][k] += n[k];
            }
        }
    }
    for n in &mut normals {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 0.0 {
            for k in n.iter_mut() {
                *k /= len;
            }
        }
    }
    normals
}

/// Per-texel visibility: clamped z of the interpolated rotated normal,
/// zeroed where the texel's surface point fails a continuous depth test
/// against the projected mesh (any other triangle strictly in front of it
/// along the viewing axis).
pub fn visibility_map(
    shape: &Array1<f64>,
    pose: &FacePose,
    triangles: &Array2<u32>,
    uv: &Array2<f64>,
    config: &UVUnwrapConfig,
) -> Result<VisibilityMap> {
    pose.validate()?;
    let res = config.resolution;
    let r = rotation_matrix(pose);
    let normals = vertex_normals(shape, &r, triangles);
    let depths = rotated_depths(shape, &r);
    let proj = super::project(shape, pose)?;
    let hits = uv_hits(uv, triangles, None, config);

    let depth_range = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - depths.iter().cloned().fold(f64::INFINITY, f64::min);
    let eps = 1e-9 + 1e-6 * depth_range.max(0.0);

    let tri_verts: Vec<[usize; 3]> = triangles
        .rows()
        .into_iter()
        .map(|t| [t[0] as usize, t[1] as usize, t[2] as usize])
        .collect();

    let mut values = Array2::<f64>::zeros((res, res));
    for row in 0..res {
        for col in 0..res {
            let Some(hit) = &hits[row * res + col] else {
                continue;
            };
            let tri = tri_verts[hit.tri as usize];
            let mut n = [0.0f64; 3];
            let mut px = 0.0;
            let mut py = 0.0;
            let mut pz = 0.0;
            for (k, &vi) in tri.iter().enumerate() {
                let b = hit.bary[k];
                for d in 0..3 {
                    n[d] += b * normals[vi][d];
                }
                px += b * proj[(vi, 0)];
                py += b * proj[(vi, 1)];
                pz += b * depths[vi];
            }
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let nz = if len > 0.0 { (n[2] / len).clamp(0.0, 1.0) } else { 0.0 };
            if nz == 0.0 {
                continue;
            }
            let occluded = tri_verts.iter().any(|t2| {
                let a = (proj[(t2[0], 0)], proj[(t2[0], 1)]);
                let b = (proj[(t2[1], 0)], proj[(t2[1], 1)]);
                let c = (proj[(t2[2], 0)], proj[(t2[2], 1)]);
                let area = edge_fn(a, b, c);
                if area.abs() < 1e-12 {
                    return false;
                }
                let pt = (px, py);
                let w0 = edge_fn(b, c, pt) / area;
                let w1 = edge_fn(c, a, pt) / area;
                let w2 = edge_fn(a, b, pt) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    return false;
                }
                let z = w0 * depths[t2[0]] + w1 * depths[t2[1]] + w2 * depths[t2[2]];
                z > pz + eps
            });
            values[(row, col)] = if occluded { 0.0 } else { nz };
        }
    }
    Ok(VisibilityMap { values })
}

/// The fixed linear structure of one rendered view: which texels feed each
/// pixel and with what bilinear weights. The render is `background` off the
/// face and `Σ w·texel` on it, so ∂pixel/∂texel is exactly the stored
/// weight table.
#[derive(Debug, Clone)]
pub struct RenderMap {
    pub sparse: Rc<SparseLinear>,
    pub coverage: Array2<bool>,
    pub height: usize,
    pub width: usize,
    pub resolution: usize,
}

/// Builds the pixel↦texel sampling structure for a posed shape by
/// z-buffer rasterization of the projected mesh.
pub fn render_map(
    shape: &Array1<f64>,
    pose: &FacePose,
    triangles: &Array2<u32>,
    uv: &Array2<f64>,
    config: &UVUnwrapConfig,
    height: usize,
    width: usize,
) -> Result<RenderMap> {
    pose.validate()?;
    let res = config.resolution;
    let proj = super::project(shape, pose)?;
    let r = rotation_matrix(pose);
    let depths = rotated_depths(shape, &r);
    let hits = rasterize(&proj, triangles, None, width, height, Some(&depths));

    let mut terms: Vec<(u32, u32, f64)> = Vec::new();
    let mut coverage = Array2::<bool>::from_elem((height, width), false);
    for row in 0..height {
        for col in 0..width {
            let Some(hit) = &hits[row * width + col] else {
                continue;
            };
            let tri = triangles.row(hit.tri as usize);
            let mut u = 0.0;
            let mut v = 0.0;
            for (b, &vi) in hit.bary.iter().zip(tri.iter()) {
                u += b * uv[(vi as usize, 0)];
                v += b * uv[(vi as usize, 1)];
            }
            let u = u.clamp(0.0, (res - 1) as f64);
            let v = v.clamp(0.0, (res - 1) as f64);
            let u0 = u.floor() as usize;
            let v0 = v.floor() as usize;
            let u1 = (u0 + 1).min(res - 1);
            let v1 = (v0 + 1).min(res - 1);
            let tu = u - u0 as f64;
            let tv = v - v0 as f64;
            let out_idx = (row * width + col) as u32;
            for (ui, vi, wgt) in [
                (u0, v0, (1.0 - tu) * (1.0 - tv)),
                (u0, v1, (1.0 - tu) * tv),
                (u1, v0, tu * (1.0 - tv)),
                (u1, v1, tu * tv),
            ] {
                if wgt != 0.0 {
                    terms.push((out_idx, (ui * res + vi) as u32, wgt));
                }
            }
            coverage[(row, col)] = true;
        }
    }
    Ok(RenderMap {
        sparse: Rc::new(SparseLinear {
            in_spatial: res * res,
            out_spatial: height * width,
            terms,
        }),
        coverage,
        height,
        width,
        resolution: res,
    })
}

fn composite_base(map: &RenderMap, background: &Array3<f64>) -> Array3<f64> {
    let mut base = background.clone();
    for ((row, col), covered) in map.coverage.indexed_iter() {
        if *covered {
            for ch in 0..3 {
                base[(row, col, ch)] = 0.0;
            }
        }
    }
    base
}

/// Applies a render map to texture values: face pixels sample the texture
/// bilinearly, everything else keeps the background.
pub fn render_with_map(
    texture: &UVTexture,
    map: &RenderMap,
    background: &Array3<f64>,
) -> Array3<f64> {
    let res = map.resolution;
    let base = composite_base(map, background);
    let tex = texture
        .texels
        .view()
        .into_shape_with_order((res * res, 3))
        .expect("texture layout");
    let mut out = base
        .into_shape_with_order((map.height * map.width, 3))
        .expect("background layout");
    for &(o, i, wgt) in &map.sparse.terms {
        for ch in 0..3 {
            out[(o as usize, ch)] += wgt * tex[(i as usize, ch)];
        }
    }
    out.into_shape_with_order((map.height, map.width, 3))
        .unwrap()
}

/// Differentiable render: the texture enters the graph through a sparse
/// affine op whose Jacobian is the exact pixel/texel weight table.
pub fn render_var(texture: &Var, map: &RenderMap, background: &Array3<f64>) -> Var {
    let base = composite_base(map, background);
    sparse_affine(texture, Rc::clone(&map.sparse), base.into_dyn())
}

/// Rasterizes the posed mesh with a z-buffer and samples the UV texture at
/// every covered pixel; uncovered pixels take the background.
pub fn render(
    shape: &Array1<f64>,
    pose: &FacePose,
    texture: &UVTexture,
    triangles: &Array2<u32>,
    uv: &Array2<f64>,
    config: &UVUnwrapConfig,
    background: &Array3<f64>,
) -> Result<Array3<f64>> {
    let (h, w, _) = background.dim();
    let map = render_map(shape, pose, triangles, uv, config, h, w)?;
    Ok(render_with_map(texture, &map, background))
}
