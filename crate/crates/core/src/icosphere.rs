//! Subdivided-icosahedron grid where every triangular face is one spherical pixel.
//!
//! Face ids are base-face-major with quadtree order inside each base face: the
//! face with base `b` and child digits `d_1 … d_L` (most significant first) has id
//! `b·4^L + Σ d_k·4^(L-k)`. Child digits are `0,1,2` for the corner children at
//! the first, second and third parent vertex and `3` for the flipped center child.
//!
//! Each of the 20 base faces belongs to one of 5 strips (longitude sectors of
//! 72°); base face `4k + t` is the top cap (`t = 0`), upper middle (`1`), lower
//! middle (`2`) and bottom cap (`3`) of strip `k`. Within a strip every face sits
//! at an integer position of a triangular lattice, which the panel layout uses.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

pub const MAX_LEVEL: u32 = 10;

/// Containment slack for the triple-product sign tests.
const CONTAIN_EPS: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Up,
    Down,
}

impl Orientation {
    pub fn flipped(self) -> Self {
        match self {
            Orientation::Up => Orientation::Down,
            Orientation::Down => Orientation::Up,
        }
    }
}

/// Position of a face in its strip's triangular lattice.
///
/// With lattice basis `e1 = (1, 0)`, `e2 = (1/2, √3/2)`, an up face `(i, j)`
/// has corners `(i,j), (i+1,j), (i,j+1)` and a down face `(i, j)` has corners
/// `(i+1,j), (i+1,j+1), (i,j+1)`. Strips span `i ∈ [0, n)`, `j ∈ [0, 2n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LatticeCell {
    pub strip: u8,
    pub i: u32,
    pub j: u32,
    pub orientation: Orientation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Face {
    /// Counter-clockwise as seen from outside, starting at the lattice corner
    /// `(i, j)` for up faces and `(i+1, j)` for down faces.
    pub vertices: [u32; 3],
    pub orientation: Orientation,
    pub base: u32,
}

/// A unit direction together with its colatitude/longitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpherePoint {
    dir: Vec3,
    theta: f64,
    phi: f64,
}

impl SpherePoint {
    /// Accepts directions whose norm is within 1e-6 of one and renormalizes them.
    pub fn from_direction(d: Vec3) -> Result<Self> {
        let norm = d.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("direction norm {norm} is not unit")));
        }
        Ok(Self::from_unit(d / norm))
    }

    pub(crate) fn from_unit(dir: Vec3) -> Self {
        let theta = dir.x.hypot(dir.y).atan2(dir.z);
        let mut phi = dir.y.atan2(dir.x);
        if phi >= std::f64::consts::PI {
            phi -= 2.0 * std::f64::consts::PI;
        }
        SpherePoint { dir, theta, phi }
    }

    pub fn from_angles(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        let mut p = Self::from_unit(Vec3::new(st * cp, st * sp, ct));
        p.theta = theta;
        p.phi = phi;
        p
    }

    pub fn direction(&self) -> Vec3 {
        self.dir
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Unit vector of increasing colatitude (southward).
    pub fn theta_hat(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vec3::new(ct * cp, ct * sp, -st)
    }

    /// Unit vector of increasing longitude (eastward).
    pub fn phi_hat(&self) -> Vec3 {
        let (sp, cp) = self.phi.sin_cos();
        Vec3::new(-sp, cp, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct IcosphereGrid {
    level: u32,
    faces: Vec<Face>,
    vertices: Vec<Vec3>,
    face_centers: Vec<Vec3>,
    lattice: Vec<LatticeCell>,
    /// `neighbors[f][k]` shares the edge opposite `faces[f].vertices[k]`.
    neighbors: Vec<[u32; 3]>,
    /// Incident faces per vertex, clockwise seen from outside, lowest id first.
    vertex_rings: Vec<Vec<u32>>,
    edge_length_scale: f64,
    /// Base triangles in construction order, the roots of point-location descent.
    base_tris: Vec<[Vec3; 3]>,
}

#[derive(Clone, Copy)]
struct Proto {
    v: [u32; 3],
    lat: [[i64; 2]; 3],
}

fn base_icosahedron(n: i64) -> (Vec<Vec3>, Vec<Proto>) {
    let lat = 0.5f64.atan();
    let mut verts = Vec::with_capacity(12);
    verts.push(Vec3::new(0.0, 0.0, 1.0));
    for k in 0..5 {
        let lon = (72.0 * k as f64).to_radians();
        verts.push(Vec3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()));
    }
    for k in 0..5 {
        let lon = (72.0 * k as f64 + 36.0).to_radians();
        verts.push(Vec3::new(lat.cos() * lon.cos(), lat.cos() * lon.sin(), -lat.sin()));
    }
    verts.push(Vec3::new(0.0, 0.0, -1.0));

    let north = 0u32;
    let south = 11u32;
    let upper = |k: u32| 1 + k % 5;
    let lower = |k: u32| 6 + k % 5;
    let mut faces = Vec::with_capacity(20);
    for k in 0..5u32 {
        let (u0, u1, l0, l1) = (upper(k), upper(k + 1), lower(k), lower(k + 1));
        // top cap (down), upper middle (up), lower middle (down), bottom cap (up)
        faces.push(Proto { v: [u1, north, u0], lat: [[n, n], [n, 2 * n], [0, 2 * n]] });
        faces.push(Proto { v: [l0, u1, u0], lat: [[0, n], [n, n], [0, 2 * n]] });
        faces.push(Proto { v: [l1, u1, l0], lat: [[n, 0], [n, n], [0, n]] });
        faces.push(Proto { v: [south, l1, l0], lat: [[0, 0], [n, 0], [0, n]] });
    }
    (verts, faces)
}

fn midpoint(a: &Vec3, b: &Vec3) -> Vec3 {
    (a + b).normalize()
}

/// Quadtree children in digit order; `mid` = (ab, bc, ca).
fn children<T: Copy>(c: [T; 3], mid: [T; 3]) -> [[T; 3]; 4] {
    let [a, b, cc] = c;
    let [ab, bc, ca] = mid;
    [[a, ab, ca], [ab, b, bc], [ca, bc, cc], [bc, ca, ab]]
}

#[inline]
fn det(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    a.dot(&b.cross(c))
}

/// Smallest of the three edge tests; non-negative (within slack) means inside.
fn containment_margin(tri: &[Vec3; 3], p: &Vec3) -> f64 {
    det(&tri[0], &tri[1], p)
        .min(det(&tri[1], &tri[2], p))
        .min(det(&tri[2], &tri[0], p))
}

pub fn build_grid(level: u32) -> Result<IcosphereGrid> {
    if level > MAX_LEVEL {
        return Err(Error::LevelOutOfRange(level));
    }
    let n = 1i64 << level;
    let (mut vertices, mut protos) = base_icosahedron(n);
    let base_tris = protos.iter().map(|f| f.v.map(|v| vertices[v as usize])).collect();

    for _ in 0..level {
        let mut edge_mid: HashMap<(u32, u32), u32> = HashMap::with_capacity(protos.len() * 3 / 2);
        let mut next = Vec::with_capacity(protos.len() * 4);
        for p in &protos {
            let mut mid = [0u32; 3];
            let mut mid_lat = [[0i64; 2]; 3];
            for e in 0..3 {
                let (a, b) = (p.v[e], p.v[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *edge_mid.entry(key).or_insert_with(|| {
                    let m = midpoint(&vertices[a as usize], &vertices[b as usize]);
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
                let (la, lb) = (p.lat[e], p.lat[(e + 1) % 3]);
                mid_lat[e] = [(la[0] + lb[0]) / 2, (la[1] + lb[1]) / 2];
            }
            let cv = children(p.v, mid);
            let cl = children(p.lat, mid_lat);
            for c in 0..4 {
                next.push(Proto { v: cv[c], lat: cl[c] });
            }
        }
        protos = next;
    }

    let per_base = protos.len() / 20;
    let mut faces = Vec::with_capacity(protos.len());
    let mut lattice = Vec::with_capacity(protos.len());
    for (id, p) in protos.iter().enumerate() {
        let base = (id / per_base) as u32;
        let (cell, start) = classify_lattice(&p.lat, (base / 4) as u8);
        let vertices = [p.v[start], p.v[(start + 1) % 3], p.v[(start + 2) % 3]];
        faces.push(Face { vertices, orientation: cell.orientation, base });
        lattice.push(cell);
    }

    let face_centers = faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.vertices.map(|v| vertices[v as usize]);
            (a + b + c).normalize()
        })
        .collect();

    let mut edge_faces: HashMap<(u32, u32), (u32, usize)> = HashMap::with_capacity(faces.len() * 3 / 2);
    let mut neighbors = vec![[u32::MAX; 3]; faces.len()];
    let mut edge_len_sum = 0.0;
    let mut edge_count = 0usize;
    for (fid, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f.vertices[(k + 1) % 3], f.vertices[(k + 2) % 3]);
            let key = (a.min(b), a.max(b));
            if let Some((g, gk)) = edge_faces.remove(&key) {
                neighbors[fid][k] = g;
                neighbors[g as usize][gk] = fid as u32;
            } else {
                edge_faces.insert(key, (fid as u32, k));
                edge_len_sum += (vertices[a as usize] - vertices[b as usize]).norm();
                edge_count += 1;
            }
        }
    }
    debug_assert!(edge_faces.is_empty());

    let mut vertex_rings: Vec<Vec<u32>> = vec![Vec::new(); vertices.len()];
    let mut any_face = vec![u32::MAX; vertices.len()];
    for (fid, f) in faces.iter().enumerate() {
        for &v in &f.vertices {
            any_face[v as usize] = any_face[v as usize].min(fid as u32);
        }
    }
    for (v, &first) in any_face.iter().enumerate() {
        let ring = &mut vertex_rings[v];
        let mut f = first;
        loop {
            ring.push(f);
            let pos = faces[f as usize].vertices.iter().position(|&x| x == v as u32).unwrap();
            // the clockwise successor shares the edge (v, next vertex)
            f = neighbors[f as usize][(pos + 2) % 3];
            if f == first {
                break;
            }
        }
    }

    Ok(IcosphereGrid {
        level,
        faces,
        vertices,
        face_centers,
        lattice,
        neighbors,
        vertex_rings,
        edge_length_scale: edge_len_sum / edge_count as f64,
        base_tris,
    })
}

/// Identifies the lattice triangle and which corner starts the canonical order.
fn classify_lattice(lat: &[[i64; 2]; 3], strip: u8) -> (LatticeCell, usize) {
    let min_a = lat.iter().map(|c| c[0]).min().unwrap();
    let min_b = lat.iter().map(|c| c[1]).min().unwrap();
    let low_row = lat.iter().filter(|c| c[1] == min_b).count();
    let (orientation, first) = if low_row == 2 {
        (Orientation::Up, [min_a, min_b])
    } else {
        (Orientation::Down, [min_a + 1, min_b])
    };
    let start = lat.iter().position(|c| *c == first).expect("lattice triangle corner");
    let cell = LatticeCell { strip, i: min_a as u32, j: min_b as u32, orientation };
    (cell, start)
}

impl IcosphereGrid {
    pub fn level(&self) -> u32 {
        self.level
    }

    /// Subdivisions per base edge, `2^level`.
    pub fn resolution(&self) -> usize {
        1 << self.level
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.faces.len() * 3 / 2
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn face(&self, f: u32) -> &Face {
        &self.faces[f as usize]
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex(&self, v: u32) -> Vec3 {
        self.vertices[v as usize]
    }

    pub fn face_center(&self, f: u32) -> Vec3 {
        self.face_centers[f as usize]
    }

    pub fn face_centers(&self) -> &[Vec3] {
        &self.face_centers
    }

    pub fn lattice_cell(&self, f: u32) -> LatticeCell {
        self.lattice[f as usize]
    }

    /// Edge neighbors; entry `k` lies across the edge opposite vertex `k`.
    pub fn edge_neighbors(&self, f: u32) -> [u32; 3] {
        self.neighbors[f as usize]
    }

    /// Incident faces of `v`, clockwise from outside, lowest id first.
    pub fn incident_faces(&self, v: u32) -> &[u32] {
        &self.vertex_rings[v as usize]
    }

    /// Mean chordal edge length.
    pub fn edge_length_scale(&self) -> f64 {
        self.edge_length_scale
    }

    pub fn face_vertex_positions(&self, f: u32) -> [Vec3; 3] {
        self.faces[f as usize].vertices.map(|v| self.vertices[v as usize])
    }

    /// Locates the face whose spherical triangle contains `p`.
    ///
    /// Points on shared edges or vertices resolve to the lowest containing face id.
    pub fn face_of_point(&self, p: &SpherePoint) -> u32 {
        self.locate_unit(&p.direction())
    }

    /// As [`face_of_point`](Self::face_of_point) for a raw vector, rejecting
    /// inputs whose norm is off by more than 1e-6.
    pub fn locate(&self, d: &Vec3) -> Result<u32> {
        let p = SpherePoint::from_direction(*d)?;
        Ok(self.face_of_point(&p))
    }

    fn locate_unit(&self, p: &Vec3) -> u32 {
        let pick = |cands: &[[Vec3; 3]]| -> usize {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (k, tri) in cands.iter().enumerate() {
                let m = containment_margin(tri, p);
                if m >= -CONTAIN_EPS {
                    return k;
                }
                if m > best.0 {
                    best = (m, k);
                }
            }
            best.1
        };

        let base = pick(&self.base_tris);
        let mut tri = self.base_tris[base];
        let mut id = base;
        for _ in 0..self.level {
            let mid = [
                midpoint(&tri[0], &tri[1]),
                midpoint(&tri[1], &tri[2]),
                midpoint(&tri[2], &tri[0]),
            ];
            let kids = children(tri, mid);
            let d = pick(&kids);
            tri = kids[d];
            id = id * 4 + d;
        }
        id as u32
    }

    /// Planar barycentric weights of `p` inside face `f`, after central projection
    /// onto the face's chordal plane, in the order of `face(f).vertices`.
    pub fn barycentric(&self, f: u32, p: &SpherePoint) -> Result<[f64; 3]> {
        let [a, b, c] = self.face_vertex_positions(f);
        let d = p.direction();
        let raw = [det(&d, &b, &c), det(&a, &d, &c), det(&a, &b, &d)];
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid(format!("point is not in front of face {f}")));
        }
        let w = raw.map(|x| x / sum);
        if w.iter().any(|&x| x < -1e-9) {
            return Err(Error::invalid(format!("point lies outside face {f}")));
        }
        Ok(w.map(|x| x.max(0.0)))
    }

    /// The faces around vertex `v`, clockwise seen from outside, starting at
    /// `start_face`. Pentagonal vertices repeat `start_face` in the sixth slot.
    pub fn vertex_ring(&self, v: u32, start_face: u32) -> Result<[u32; 6]> {
        let ring = self
            .vertex_rings
            .get(v as usize)
            .ok_or_else(|| Error::invalid(format!("vertex {v} out of range")))?;
        let pos = ring
            .iter()
            .position(|&f| f == start_face)
            .ok_or_else(|| Error::invalid(format!("face {start_face} is not incident to vertex {v}")))?;
        let mut out = [start_face; 6];
        for (k, slot) in out.iter_mut().enumerate().take(ring.len()) {
            *slot = ring[(pos + k) % ring.len()];
        }
        Ok(out)
    }

    /// Position of `v` within the canonical vertex order of face `f`.
    pub fn vertex_slot(&self, f: u32, v: u32) -> Option<usize> {
        self.faces[f as usize].vertices.iter().position(|&x| x == v)
    }
}
