//! Spherical local implicit image function: query geometry, feature gathering,
//! the area-weighted vertex ensemble, rendering and feature conversion.
//!
//! A query point `p` in face `f_s` is decoded from each of the face's three
//! vertices. Vertex `v` contributes the features of its six ring faces, listed
//! clockwise from `f_s`, the polar position of `p` around `v` and the output
//! cell measured in the frame at `p` pointing away from `v`. When `p` sits on a
//! vertex, the ring starts at the vertex's lowest-id face instead, so every
//! choice of `f_s` decodes the same value.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::decoder::SliifDecoder;
use crate::error::{Error, Result};
use crate::icosphere::{IcosphereGrid, SpherePoint, Vec3};
use crate::layout::SphereTensor;
use crate::projection::{
    cell_from_jacobian, pixel_jacobian, pixel_to_sphere, tangent_frame, CellDecoding, ProjectionSpec, TangentFrame,
};
use crate::Real;

/// Below this geodesic distance a query counts as sitting on the vertex.
pub const VERTEX_EPS: f64 = 1e-12;

/// Pixels decoded per batch when rendering.
const BATCH: usize = 4096;

/// `(sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx))`.
pub fn posenc(x: f64, l_freq: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * l_freq];
    posenc_into(x, &mut out);
    out
}

fn posenc_into(x: f64, out: &mut [f64]) {
    let mut w = PI;
    for pair in out.chunks_exact_mut(2) {
        let (s, c) = (w * x).sin_cos();
        pair[0] = s;
        pair[1] = c;
        w *= 2.0;
    }
}

/// The six ring-face feature vectors of `vertex`, concatenated from `start_face`.
pub fn gather_z<F: Real>(features: &SphereTensor<F>, grid: &IcosphereGrid, vertex: u32, start_face: u32) -> Result<Vec<F>> {
    let ring = grid.vertex_ring(vertex, start_face)?;
    let c = features.channels();
    let mut out = Vec::with_capacity(6 * c);
    for f in ring {
        out.extend((0..c).map(|ch| features.face_value(ch, f)));
    }
    Ok(out)
}

/// Everything the decoder needs to know about one query point.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPoint {
    pub p: SpherePoint,
    pub face: u32,
    pub vertices: [u32; 3],
    /// Sub-triangle area fractions, one per vertex.
    pub weights: [f64; 3],
    /// `(r, θ)`: geodesic distance from the vertex and the signed angle from
    /// the vertex→face-center direction, both in radians.
    pub polar: [(f64, f64); 3],
    /// Ring faces of each vertex in gather order.
    pub rings: [[u32; 6]; 3],
    /// Per-vertex cell; absent for interpolation-only queries.
    pub cells: Option<[CellDecoding; 3]>,
}

impl QueryPoint {
    /// Query at `p` decoded from face `face`; `jacobian` is the output pixel's
    /// Jacobian in the (θ̂, φ̂) basis at `p`.
    pub fn new(grid: &IcosphereGrid, p: SpherePoint, face: u32, jacobian: &Matrix2<f64>) -> Result<Self> {
        Self::build(grid, p, face, Some(jacobian))
    }

    /// As [`new`](Self::new) without cells; enough for [`convert_features`].
    pub fn interpolation(grid: &IcosphereGrid, p: SpherePoint, face: u32) -> Result<Self> {
        Self::build(grid, p, face, None)
    }

    /// Query for output pixel `(x, y)` of `spec`.
    pub fn at_pixel(grid: &IcosphereGrid, spec: &ProjectionSpec, x: f64, y: f64) -> Result<Self> {
        let p = pixel_to_sphere(spec, x, y)?;
        let j = pixel_jacobian(spec, x, y)?;
        Self::new(grid, p, grid.face_of_point(&p), &j)
    }

    fn build(grid: &IcosphereGrid, p: SpherePoint, face: u32, jacobian: Option<&Matrix2<f64>>) -> Result<Self> {
        if face as usize >= grid.num_faces() {
            return Err(Error::invalid(format!("face {face} out of range")));
        }
        let vertices = grid.face(face).vertices;
        let weights = grid.barycentric(face, &p)?;
        let d = p.direction();
        let center = grid.face_center(face);
        let mut polar = [(0.0, 0.0); 3];
        let mut rings = [[0u32; 6]; 3];
        let mut cells = [CellDecoding { cx: 0.0, cy: 0.0 }; 3];
        for k in 0..3 {
            let vid = vertices[k];
            let v = grid.vertex(vid);
            let r = v.cross(&d).norm().atan2(v.dot(&d));
            let on_vertex = r < VERTEX_EPS;
            let start = if on_vertex { grid.incident_faces(vid)[0] } else { face };
            rings[k] = grid.vertex_ring(vid, start)?;
            if on_vertex {
                polar[k] = (0.0, 0.0);
            } else {
                polar[k] = (r, signed_angle(&v, &(center - v), &(d - v)));
            }
            if let Some(j) = jacobian {
                let frame = if on_vertex {
                    TangentFrame::toward(&p, grid.face_center(start) - v)?
                } else {
                    tangent_frame(&p, &SpherePoint::from_direction(v)?)?
                };
                cells[k] = cell_from_jacobian(j, &frame)?;
            }
        }
        Ok(QueryPoint { p, face, vertices, weights, polar, rings, cells: jacobian.map(|_| cells) })
    }

    /// The non-feature part of vertex `k`'s decoder input:
    /// `γ(r̃) ++ γ(θ̃) ++ [c_x, c_y] / e`.
    pub fn encoding(&self, k: usize, l_freq: usize, edge: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; 4 * l_freq + 2];
        self.encoding_into(k, l_freq, edge, &mut out)?;
        Ok(out)
    }

    fn encoding_into(&self, k: usize, l_freq: usize, edge: f64, out: &mut [f64]) -> Result<()> {
        let cells = self.cells.ok_or_else(|| Error::invalid("query point has no cell decoding"))?;
        let (r, theta) = self.polar[k];
        let r_scaled = (r / (2.0 * edge)).clamp(0.0, 1.0) * 2.0 - 1.0;
        posenc_into(r_scaled, &mut out[..2 * l_freq]);
        posenc_into(theta / PI, &mut out[2 * l_freq..4 * l_freq]);
        out[4 * l_freq] = cells[k].cx / edge;
        out[4 * l_freq + 1] = cells[k].cy / edge;
        Ok(())
    }
}

/// Angle from `a` to `b` projected into the tangent plane at unit `v`,
/// counter-clockwise seen from outside, in (−π, π].
fn signed_angle(v: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let a = a - v * a.dot(v);
    let b = b - v * b.dot(v);
    let t = v.dot(&a.cross(&b)).atan2(a.dot(&b));
    if t <= -PI {
        PI
    } else {
        t
    }
}

/// Decoder inputs for a batch of queries: row `3i + k` belongs to vertex `k` of
/// query `i`. `faces` holds features as `C × faces`.
pub fn decoder_inputs<F: Real>(faces: ArrayView2<F>, queries: &[&QueryPoint], l_freq: usize, edge: f64) -> Result<Array2<F>> {
    let c = faces.nrows();
    let width = 6 * c + 4 * l_freq + 2;
    let mut x = Array2::zeros((3 * queries.len(), width));
    let mut enc = vec![0.0; 4 * l_freq + 2];
    for (i, q) in queries.iter().enumerate() {
        for k in 0..3 {
            let mut row = x.row_mut(3 * i + k);
            for (slot, &f) in q.rings[k].iter().enumerate() {
                row.slice_mut(s![slot * c..(slot + 1) * c]).assign(&faces.column(f as usize));
            }
            q.encoding_into(k, l_freq, edge, &mut enc)?;
            for (dst, &e) in row.slice_mut(s![6 * c..]).iter_mut().zip(&enc) {
                *dst = F::of(e);
            }
        }
    }
    Ok(x)
}

/// Weighted sum of per-vertex decoder outputs (`3n × 3`) into `n × 3`.
pub fn ensemble<F: Real>(outputs: ArrayView2<F>, queries: &[&QueryPoint]) -> Array2<F> {
    let mut rgb = Array2::zeros((queries.len(), 3));
    for (i, q) in queries.iter().enumerate() {
        for k in 0..3 {
            let w = F::of(q.weights[k]);
            for ch in 0..3 {
                rgb[[i, ch]] += w * outputs[[3 * i + k, ch]];
            }
        }
    }
    rgb
}

/// Adjoint of [`ensemble`].
pub fn ensemble_backward<F: Real>(grad: ArrayView2<F>, queries: &[&QueryPoint]) -> Array2<F> {
    let mut out = Array2::zeros((3 * queries.len(), 3));
    for (i, q) in queries.iter().enumerate() {
        for k in 0..3 {
            let w = F::of(q.weights[k]);
            for ch in 0..3 {
                out[[3 * i + k, ch]] = w * grad[[i, ch]];
            }
        }
    }
    out
}

/// Adjoint of the feature part of [`decoder_inputs`]: accumulates input
/// gradients into a `C × faces` array.
pub fn scatter_feature_grad<F: Real>(grad_inputs: ArrayView2<F>, queries: &[&QueryPoint], channels: usize, num_faces: usize) -> Array2<F> {
    let mut out = Array2::zeros((channels, num_faces));
    for (i, q) in queries.iter().enumerate() {
        for k in 0..3 {
            let row = grad_inputs.row(3 * i + k);
            for (slot, &f) in q.rings[k].iter().enumerate() {
                let mut col = out.column_mut(f as usize);
                col += &row.slice(s![slot * channels..(slot + 1) * channels]);
            }
        }
    }
    out
}

/// Decodes a batch of queries to `n × 3` RGB.
pub fn eval_batch<F: Real>(faces: ArrayView2<F>, grid: &IcosphereGrid, queries: &[&QueryPoint], dec: &SliifDecoder<F>) -> Result<Array2<F>> {
    let x = decoder_inputs(faces, queries, dec.l_freq, grid.edge_length_scale())?;
    let y = dec.forward(x.view())?;
    Ok(ensemble(y.view(), queries))
}

/// RGB at a single query point.
pub fn eval_rgb<F: Real>(features: &SphereTensor<F>, grid: &IcosphereGrid, q: &QueryPoint, dec: &SliifDecoder<F>) -> Result<[F; 3]> {
    let rgb = eval_batch(features.face_values().view(), grid, &[q], dec)?;
    Ok([rgb[[0, 0]], rgb[[0, 1]], rgb[[0, 2]]])
}

/// Query points of every output pixel, row-major. Pixels whose geometry fails
/// (outside a fisheye circle, degenerate cells) are `None` and render as zero.
#[derive(Clone, Debug)]
pub struct PixelQueries {
    pub height: usize,
    pub width: usize,
    pub queries: Vec<Option<QueryPoint>>,
}

impl PixelQueries {
    pub fn build(grid: &IcosphereGrid, spec: &ProjectionSpec) -> Result<Self> {
        Self::build_with(grid, spec, true)
    }

    /// Without cells: for [`convert_features`] only.
    pub fn interpolation(grid: &IcosphereGrid, spec: &ProjectionSpec) -> Result<Self> {
        Self::build_with(grid, spec, false)
    }

    fn build_with(grid: &IcosphereGrid, spec: &ProjectionSpec, cells: bool) -> Result<Self> {
        spec.validate()?;
        let (h, w) = (spec.height, spec.width);
        let mut queries = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let q = if cells {
                    QueryPoint::at_pixel(grid, spec, x as f64, y as f64).ok()
                } else {
                    pixel_to_sphere(spec, x as f64, y as f64)
                        .and_then(|p| QueryPoint::interpolation(grid, p, grid.face_of_point(&p)))
                        .ok()
                };
                queries.push(q);
            }
        }
        Ok(PixelQueries { height: h, width: w, queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Renders `H × W × 3` from prepared queries and `C × faces` features.
pub fn render_prepared<F: Real>(faces: ArrayView2<F>, grid: &IcosphereGrid, pq: &PixelQueries, dec: &SliifDecoder<F>) -> Result<Array3<F>> {
    let mut img = Array3::zeros((pq.height, pq.width, 3));
    let valid: Vec<(usize, &QueryPoint)> = pq.queries.iter().enumerate().filter_map(|(i, q)| q.as_ref().map(|q| (i, q))).collect();
    for chunk in valid.chunks(BATCH) {
        let qs: Vec<&QueryPoint> = chunk.iter().map(|(_, q)| *q).collect();
        let rgb = eval_batch(faces, grid, &qs, dec)?;
        for (row, (i, _)) in chunk.iter().enumerate() {
            let (y, x) = (i / pq.width, i % pq.width);
            for ch in 0..3 {
                img[[y, x, ch]] = rgb[[row, ch]];
            }
        }
    }
    Ok(img)
}

/// Decodes the image seen through `spec`, `H × W × 3`, unclamped.
pub fn render<F: Real>(features: &SphereTensor<F>, grid: &IcosphereGrid, spec: &ProjectionSpec, dec: &SliifDecoder<F>) -> Result<Array3<F>> {
    check_grid(features, grid)?;
    let pq = PixelQueries::build(grid, spec)?;
    render_prepared(features.face_values().view(), grid, &pq, dec)
}

/// Area-weighted ring means as `C × H × W`.
pub fn convert_prepared<F: Real>(faces: ArrayView2<F>, pq: &PixelQueries) -> Array3<F> {
    let c = faces.nrows();
    let mut out = Array3::zeros((c, pq.height, pq.width));
    let sixth = F::of(1.0 / 6.0);
    for (i, q) in pq.queries.iter().enumerate() {
        let Some(q) = q else { continue };
        let (y, x) = (i / pq.width, i % pq.width);
        for k in 0..3 {
            let w = F::of(q.weights[k]) * sixth;
            for &f in &q.rings[k] {
                for ch in 0..c {
                    out[[ch, y, x]] += w * faces[[ch, f as usize]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`convert_prepared`]: `C × H × W` gradients to `C × faces`.
pub fn convert_adjoint<F: Real>(grad: ArrayView3<F>, pq: &PixelQueries, num_faces: usize) -> Array2<F> {
    let c = grad.shape()[0];
    let mut out = Array2::zeros((c, num_faces));
    let sixth = F::of(1.0 / 6.0);
    for (i, q) in pq.queries.iter().enumerate() {
        let Some(q) = q else { continue };
        let (y, x) = (i / pq.width, i % pq.width);
        for k in 0..3 {
            let w = F::of(q.weights[k]) * sixth;
            for &f in &q.rings[k] {
                for ch in 0..c {
                    out[[ch, f as usize]] += w * grad[[ch, y, x]];
                }
            }
        }
    }
    out
}

/// Resamples sphere features into the shape of `spec` without a decoder.
pub fn convert_features<F: Real>(features: &SphereTensor<F>, grid: &IcosphereGrid, spec: &ProjectionSpec) -> Result<Array3<F>> {
    check_grid(features, grid)?;
    let pq = PixelQueries::interpolation(grid, spec)?;
    Ok(convert_prepared(features.face_values().view(), &pq))
}

fn check_grid<F>(features: &SphereTensor<F>, grid: &IcosphereGrid) -> Result<()> {
    if features.layout().num_cells() != grid.num_faces() {
        return Err(Error::shape(format!(
            "features cover {} faces, grid has {}",
            features.layout().num_cells(),
            grid.num_faces()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icosphere::build_grid;
    use crate::layout::build_layout;
    use std::sync::Arc;

    #[test]
    fn posenc_examples() {
        assert_eq!(posenc(0.0, 2), vec![0.0, 1.0, 0.0, 1.0]);
        let v = posenc(0.5, 1);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        for l in 1..=10 {
            assert_eq!(posenc(0.3, l).len(), 2 * l);
        }
    }

    fn face_id_tensor(level: u32) -> (IcosphereGrid, SphereTensor<f64>) {
        let g = build_grid(level).unwrap();
        let layout = Arc::new(build_layout(&g));
        let vals = Array2::from_shape_fn((1, g.num_faces()), |(_, f)| f as f64);
        let t = SphereTensor::from_face_values(layout, vals.view()).unwrap();
        (g, t)
    }

    #[test]
    fn gather_z_follows_ring_order() {
        let (g, t) = face_id_tensor(2);
        for v in [0u32, 13, 40] {
            let start = g.incident_faces(v)[0];
            let z = gather_z(&t, &g, v, start).unwrap();
            let ring = g.vertex_ring(v, start).unwrap();
            assert_eq!(z, ring.map(|f| f as f64).to_vec());
        }
    }

    #[test]
    fn gather_z_rotates_with_start_face() {
        let (g, t) = face_id_tensor(2);
        let v = 50u32;
        let inc = g.incident_faces(v).to_vec();
        assert_eq!(inc.len(), 6);
        let z0 = gather_z(&t, &g, v, inc[0]).unwrap();
        for k in 1..6 {
            let zk = gather_z(&t, &g, v, inc[k]).unwrap();
            let mut rot = z0.clone();
            rot.rotate_left(k);
            assert_eq!(zk, rot);
        }
    }

    #[test]
    fn signed_angle_range_and_sign() {
        let v = Vec3::z();
        let a = Vec3::x();
        assert!((signed_angle(&v, &a, &Vec3::y()) - PI / 2.0).abs() < 1e-15);
        assert!((signed_angle(&v, &a, &-Vec3::y()) + PI / 2.0).abs() < 1e-15);
        assert_eq!(signed_angle(&v, &a, &-Vec3::x()), PI);
    }

    #[test]
    fn weights_are_a_partition_of_unity() {
        let g = build_grid(3).unwrap();
        let spec = ProjectionSpec::erp(8, 16);
        let pq = PixelQueries::build(&g, &spec).unwrap();
        for q in pq.queries.iter().flatten() {
            assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(q.weights.iter().all(|&w| w >= 0.0));
            for (r, t) in q.polar {
                assert!(r >= 0.0 && t > -PI && t <= PI);
            }
        }
    }
}
