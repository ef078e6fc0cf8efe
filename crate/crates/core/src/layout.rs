//! Rectangular panel layout of the icosphere faces.
//!
//! Each of the 5 strips becomes one panel of `4n × n` cells (`n = 2^level`).
//! Lattice band `j` of a strip occupies rows `2j` (up faces) and `2j + 1` (down
//! faces); column `i` is the lattice column. Convolutions read a halo of two rows
//! above/below and one column left/right, filled from neighboring panels by
//! unfolding the icosahedron net across the shared edge.

use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayView2, ArrayView3};
use num_traits::{Float, Zero};

use crate::error::{Error, Result};
use crate::icosphere::{IcosphereGrid, LatticeCell, Orientation};

pub const PANELS: usize = 5;
/// Halo rows above and below a panel.
pub const HALO_ROWS: usize = 2;
/// Halo columns left and right of a panel.
pub const HALO_COLS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellPos {
    pub panel: usize,
    pub row: usize,
    pub col: usize,
}

type Tri = [[i64; 2]; 3];

fn lattice_tri(i: i64, j: i64, o: Orientation) -> Tri {
    match o {
        Orientation::Up => [[i, j], [i + 1, j], [i, j + 1]],
        Orientation::Down => [[i + 1, j], [i + 1, j + 1], [i, j + 1]],
    }
}

fn classify(t: &Tri) -> (i64, i64, Orientation) {
    let min_a = t.iter().map(|c| c[0]).min().unwrap();
    let min_b = t.iter().map(|c| c[1]).min().unwrap();
    let low = t.iter().filter(|c| c[1] == min_b).count();
    let o = if low == 2 { Orientation::Up } else { Orientation::Down };
    (min_a, min_b, o)
}

/// Maps a lattice triangle given relative to `strip` (possibly outside it) to the
/// strip and in-strip lattice triangle it lands on after unfolding the net.
///
/// Outside triangles are carried across the nearest strip side: left/right sides
/// first (by translation for the half adjacent to the middle faces, by a 60°
/// rotation about the pole otherwise), then bottom/top (rotation about the pole).
/// Around the 12 pentagonal vertices the plane holds one triangle more than the
/// sphere; the unfolding then yields a repeat of an adjacent face.
pub(crate) fn unfold(n: i64, strip: i64, tri: Tri) -> (usize, i64, i64, Orientation) {
    let mut k = strip;
    let mut t = tri;
    for _ in 0..16 {
        let inside = t.iter().all(|c| (0..=n).contains(&c[0]) && (0..=2 * n).contains(&c[1]));
        if inside {
            let (i, j, o) = classify(&t);
            return (k.rem_euclid(PANELS as i64) as usize, i, j, o);
        }
        let sa: i64 = t.iter().map(|c| c[0]).sum();
        let sb: i64 = t.iter().map(|c| c[1]).sum();
        let map: Box<dyn Fn([i64; 2]) -> [i64; 2]> = if sa < 0 {
            k -= 1;
            if sb < 3 * n {
                Box::new(|[a, b]| [a + b, -a])
            } else {
                Box::new(move |[a, b]| [a + n, b - n])
            }
        } else if sa > 3 * n {
            k += 1;
            if sb < 3 * n {
                Box::new(move |[a, b]| [a - n, b + n])
            } else {
                Box::new(move |[a, b]| [a + b - 2 * n, 3 * n - a])
            }
        } else if sb < 0 {
            k += 1;
            Box::new(|[a, b]| [-b, a + b])
        } else {
            k -= 1;
            Box::new(move |[a, b]| [3 * n - b, a + b - n])
        };
        t = t.map(&map);
    }
    unreachable!("lattice unfolding did not converge")
}

#[derive(Clone, Debug)]
pub struct LayoutMap {
    level: u32,
    n: usize,
    face_to_cell: Vec<u32>,
    cell_to_face: Vec<u32>,
    /// For every cell of the padded panels `5 × (H+4) × (W+2)`, the flat index
    /// of the interior cell it copies.
    pad_source: Vec<u32>,
}

pub fn build_layout(grid: &IcosphereGrid) -> LayoutMap {
    let n = grid.resolution();
    let (h, w) = (4 * n, n);
    let mut face_to_cell = vec![0u32; grid.num_faces()];
    let mut cell_to_face = vec![u32::MAX; grid.num_faces()];
    for f in 0..grid.num_faces() {
        let LatticeCell { strip, i, j, orientation } = grid.lattice_cell(f as u32);
        let row = 2 * j as usize + usize::from(orientation == Orientation::Down);
        let flat = (strip as usize * h + row) * w + i as usize;
        face_to_cell[f] = flat as u32;
        cell_to_face[flat] = f as u32;
    }
    debug_assert!(cell_to_face.iter().all(|&f| f != u32::MAX));

    let (ph, pw) = (h + 2 * HALO_ROWS, w + 2 * HALO_COLS);
    let mut pad_source = Vec::with_capacity(PANELS * ph * pw);
    for k in 0..PANELS {
        for pr in 0..ph {
            for pc in 0..pw {
                let r = pr as i64 - HALO_ROWS as i64;
                let mut c = pc as i64 - HALO_COLS as i64;
                let o = if r.rem_euclid(2) == 0 { Orientation::Up } else { Orientation::Down };
                let mut tri = lattice_tri(c, r.div_euclid(2), o);
                // two far corner cells touch the strip nowhere; no kernel reads
                // them, they copy their inner column neighbor
                let n = n as i64;
                if !tri.iter().any(|p| (0..=n).contains(&p[0]) && (0..=2 * n).contains(&p[1])) {
                    c = c.clamp(0, n - 1);
                    tri = lattice_tri(c, r.div_euclid(2), o);
                }
                let (kk, i, j, o) = unfold(n, k as i64, tri);
                let row = 2 * j as usize + usize::from(o == Orientation::Down);
                pad_source.push(((kk * h + row) * w + i as usize) as u32);
            }
        }
    }

    LayoutMap { level: grid.level(), n, face_to_cell, cell_to_face, pad_source }
}

impl LayoutMap {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn panel_height(&self) -> usize {
        4 * self.n
    }

    pub fn panel_width(&self) -> usize {
        self.n
    }

    pub fn padded_height(&self) -> usize {
        self.panel_height() + 2 * HALO_ROWS
    }

    pub fn padded_width(&self) -> usize {
        self.panel_width() + 2 * HALO_COLS
    }

    pub fn num_cells(&self) -> usize {
        self.cell_to_face.len()
    }

    pub fn flat_index(&self, pos: CellPos) -> usize {
        (pos.panel * self.panel_height() + pos.row) * self.panel_width() + pos.col
    }

    pub fn cell_pos(&self, flat: usize) -> CellPos {
        let (h, w) = (self.panel_height(), self.panel_width());
        CellPos { panel: flat / (h * w), row: (flat / w) % h, col: flat % w }
    }

    pub fn face_to_cell(&self, face: u32) -> CellPos {
        self.cell_pos(self.face_to_cell[face as usize] as usize)
    }

    pub fn face_to_flat(&self, face: u32) -> usize {
        self.face_to_cell[face as usize] as usize
    }

    pub fn cell_to_face(&self, pos: CellPos) -> u32 {
        self.cell_to_face[self.flat_index(pos)]
    }

    pub fn flat_to_face(&self, flat: usize) -> u32 {
        self.cell_to_face[flat]
    }

    /// Source face of a padded-panel position; `prow`, `pcol` count from the
    /// top-left halo corner.
    pub fn padded_source_face(&self, panel: usize, prow: usize, pcol: usize) -> u32 {
        self.cell_to_face[self.padded_source_flat(panel, prow, pcol)]
    }

    pub fn padded_source_flat(&self, panel: usize, prow: usize, pcol: usize) -> usize {
        let idx = (panel * self.padded_height() + prow) * self.padded_width() + pcol;
        self.pad_source[idx] as usize
    }

    pub(crate) fn pad_sources(&self) -> &[u32] {
        &self.pad_source
    }
}

/// Multichannel values on the icosphere stored in panel layout, `C × 5 × H × W`.
#[derive(Clone, Debug)]
pub struct SphereTensor<T = f32> {
    layout: Arc<LayoutMap>,
    data: Array4<T>,
}

impl<T: Clone + Zero> SphereTensor<T> {
    pub fn zeros(layout: Arc<LayoutMap>, channels: usize) -> Self {
        let shape = (channels, PANELS, layout.panel_height(), layout.panel_width());
        SphereTensor { data: Array4::zeros(shape), layout }
    }

    pub fn from_array(layout: Arc<LayoutMap>, data: Array4<T>) -> Result<Self> {
        let expect = [data.shape()[0], PANELS, layout.panel_height(), layout.panel_width()];
        if data.shape() != expect {
            return Err(Error::shape(format!("tensor shape {:?}, layout expects {:?}", data.shape(), expect)));
        }
        Ok(SphereTensor { layout, data })
    }

    /// Builds a tensor from per-face values shaped `C × faces`.
    pub fn from_face_values(layout: Arc<LayoutMap>, values: ArrayView2<T>) -> Result<Self> {
        if values.ncols() != layout.num_cells() {
            return Err(Error::shape(format!("{} face values for {} faces", values.ncols(), layout.num_cells())));
        }
        let mut t = Self::zeros(layout.clone(), values.nrows());
        {
            let mut flat = t.flat_mut();
            for f in 0..values.ncols() {
                let cell = layout.face_to_flat(f as u32);
                flat.column_mut(cell).assign(&values.column(f));
            }
        }
        Ok(t)
    }

    /// Per-face values `C × faces`, indexed by face id.
    pub fn face_values(&self) -> Array2<T> {
        let flat = self.flat();
        let mut out = Array2::zeros((self.channels(), self.layout.num_cells()));
        for f in 0..self.layout.num_cells() {
            out.column_mut(f).assign(&flat.column(self.layout.face_to_flat(f as u32)));
        }
        out
    }
}

impl<T> SphereTensor<T> {
    pub fn layout(&self) -> &Arc<LayoutMap> {
        &self.layout
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<T> {
        self.data
    }

    /// `C × cells` view in flat layout order.
    pub fn flat(&self) -> ArrayView2<'_, T> {
        let c = self.channels();
        self.data.view().into_shape_with_order((c, self.layout.num_cells())).expect("contiguous tensor")
    }

    pub fn flat_mut(&mut self) -> ndarray::ArrayViewMut2<'_, T> {
        let c = self.channels();
        let cells = self.layout.num_cells();
        self.data.view_mut().into_shape_with_order((c, cells)).expect("contiguous tensor")
    }
}

impl<T: Copy> SphereTensor<T> {
    pub fn face_value(&self, channel: usize, face: u32) -> T {
        self.flat()[[channel, self.layout.face_to_flat(face)]]
    }
}

/// Copies halo values from their source faces: output `C × 5 × (H+4) × (W+2)`.
pub fn pad<T: Copy + Zero>(tensor: &SphereTensor<T>) -> Array4<T> {
    let layout = tensor.layout();
    let (ph, pw) = (layout.padded_height(), layout.padded_width());
    let flat = tensor.flat();
    let src = layout.pad_sources();
    let mut out = Array4::zeros((tensor.channels(), PANELS, ph, pw));
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let row = flat.row(c);
        for (dst, &s) in plane.iter_mut().zip(src) {
            *dst = row[s as usize];
        }
    }
    out
}

/// Adjoint of [`pad`]: accumulates padded-array gradients onto their source cells.
pub fn unpad_accumulate<T: Float>(layout: &Arc<LayoutMap>, padded: &Array4<T>) -> SphereTensor<T> {
    let channels = padded.shape()[0];
    let mut out = SphereTensor::zeros(layout.clone(), channels);
    let src = layout.pad_sources();
    {
        let mut flat = out.flat_mut();
        for (c, plane) in padded.outer_iter().enumerate() {
            let mut row = flat.row_mut(c);
            for (&g, &s) in plane.iter().zip(src) {
                row[s as usize] = row[s as usize] + g;
            }
        }
    }
    out
}

/// Panel offsets `(Δrow, Δcol)` of the ten faces a convolution reads, in canonical
/// slot order: center, the six same-orientation faces of the hexagonal ring
/// (W, E, SW, SE, NW, NE), then the three edge neighbors.
///
/// For up faces the edge neighbors sit at positions B1 = (-½, √3/6),
/// B2 = (½, √3/6), B3 = (0, -√3/3) relative to the center (unit edge); for down
/// faces at C1 = (-½, -√3/6), C2 = (½, -√3/6), C3 = (0, √3/3).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub up: [(i32, i32); 10],
    pub down: [(i32, i32); 10],
}

impl Footprint {
    pub const GA_CONV: Footprint = Footprint {
        up: [(0, 0), (0, -1), (0, 1), (-2, 0), (-2, 1), (2, -1), (2, 0), (1, -1), (1, 0), (-1, 0)],
        down: [(0, 0), (0, -1), (0, 1), (-2, 0), (-2, 1), (2, -1), (2, 0), (-1, 0), (-1, 1), (1, 0)],
    };

    pub fn offsets(&self, o: Orientation) -> &[(i32, i32); 10] {
        match o {
            Orientation::Up => &self.up,
            Orientation::Down => &self.down,
        }
    }

    pub fn len(&self) -> usize {
        10
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Neighbor count, excluding the center face.
    pub fn neighbor_count(&self) -> usize {
        self.len() - 1
    }
}

/// Explicit per-face neighbor lists, the gather-then-dot representation.
#[derive(Clone, Debug)]
pub struct CallTable {
    footprint: Footprint,
    neighbors: Vec<[u32; 10]>,
}

impl CallTable {
    pub fn footprint(&self) -> &Footprint {
        &self.footprint
    }

    pub fn neighbors(&self, face: u32) -> &[u32; 10] {
        &self.neighbors[face as usize]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Resolves every face's footprint directly from its lattice position.
pub fn build_calltable(grid: &IcosphereGrid, footprint: &Footprint) -> CallTable {
    let n = grid.resolution() as i64;
    let mut lookup = std::collections::HashMap::with_capacity(grid.num_faces());
    for f in 0..grid.num_faces() as u32 {
        let c = grid.lattice_cell(f);
        lookup.insert((c.strip as usize, c.i as i64, c.j as i64, c.orientation), f);
    }
    let neighbors = (0..grid.num_faces() as u32)
        .map(|f| {
            let c = grid.lattice_cell(f);
            let row = 2 * c.j as i64 + i64::from(c.orientation == Orientation::Down);
            footprint.offsets(c.orientation).map(|(dr, dc)| {
                let r = row + dr as i64;
                let o = if r.rem_euclid(2) == 0 { Orientation::Up } else { Orientation::Down };
                let tri = lattice_tri(c.i as i64 + dc as i64, r.div_euclid(2), o);
                let key = unfold(n, c.strip as i64, tri);
                lookup[&key]
            })
        })
        .collect();
    CallTable { footprint: *footprint, neighbors }
}

/// Bilinear lookup in an `H × W × C` equirectangular image at (θ, φ), wrapping in
/// longitude and clamping at the poles.
pub fn sample_erp_bilinear(erp: ArrayView3<f32>, theta: f64, phi: f64, out: &mut [f64]) {
    let (h, w, _) = erp.dim();
    let y = theta * h as f64 / std::f64::consts::PI - 0.5;
    let x = (phi + std::f64::consts::PI) * w as f64 / (2.0 * std::f64::consts::PI) - 0.5;
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let clamp_row = |r: f64| (r.max(0.0) as usize).min(h - 1);
    let wrap_col = |c: f64| (c as i64).rem_euclid(w as i64) as usize;
    let (r0, r1) = (clamp_row(y0), clamp_row(y0 + 1.0));
    let (c0, c1) = (wrap_col(x0), wrap_col(x0 + 1.0));
    for (ch, o) in out.iter_mut().enumerate() {
        let v00 = erp[[r0, c0, ch]] as f64;
        let v01 = erp[[r0, c1, ch]] as f64;
        let v10 = erp[[r1, c0, ch]] as f64;
        let v11 = erp[[r1, c1, ch]] as f64;
        *o = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    }
}

/// Samples an equirectangular image (`H × W × C`, `W = 2H`) at every face center.
pub fn sample_erp_to_sphere(
    erp: ArrayView3<f32>,
    grid: &IcosphereGrid,
    layout: &Arc<LayoutMap>,
) -> Result<SphereTensor<f32>> {
    let (h, w, c) = erp.dim();
    if w != 2 * h || h == 0 {
        return Err(Error::invalid(format!("equirectangular input must be W = 2H, got {h}×{w}")));
    }
    let mut t = SphereTensor::zeros(layout.clone(), c);
    let mut buf = vec![0.0; c];
    {
        let mut flat = t.flat_mut();
        for f in 0..grid.num_faces() as u32 {
            let p = crate::icosphere::SpherePoint::from_unit(grid.face_center(f));
            sample_erp_bilinear(erp, p.theta(), p.phi(), &mut buf);
            let cell = layout.face_to_flat(f);
            for (ch, v) in buf.iter().enumerate() {
                flat[[ch, cell]] = *v as f32;
            }
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub level: u32,
    pub call_table_bytes: u64,
    pub layout_bytes: u64,
}

impl MemoryReport {
    pub fn ratio(&self) -> f64 {
        self.layout_bytes as f64 / self.call_table_bytes as f64
    }
}

/// Activation bytes of `layers` convolutions with `channels` 32-bit channels.
///
/// The call-table route stacks every neighbor before each convolution, holding
/// `(neighbors + 1) · C` values per face; the panel route holds `C` values per
/// padded panel cell.
pub fn activation_memory_report(level: u32, layers: u64, channels: u64) -> Result<MemoryReport> {
    if layers == 0 || channels == 0 {
        return Err(Error::invalid("layers and channels must be at least 1"));
    }
    if level > crate::icosphere::MAX_LEVEL {
        return Err(Error::LevelOutOfRange(level));
    }
    let n = 1u64 << level;
    let faces = 20 * n * n;
    let stacked = Footprint::GA_CONV.neighbor_count() as u64 + 1;
    let padded_cells = PANELS as u64 * (4 * n + 2 * HALO_ROWS as u64) * (n + 2 * HALO_COLS as u64);
    Ok(MemoryReport {
        level,
        call_table_bytes: layers * stacked * channels * 4 * faces,
        layout_bytes: layers * channels * 4 * padded_cells,
    })
}

/// Reorders a face-indexed `C × faces` view into an `H × W`-agnostic tensor along
/// the face axis; used by tests and the feature conversion.
pub fn gather_faces<T: Copy + Zero>(values: ArrayView2<T>, faces: &[u32]) -> Array2<T> {
    let mut out = Array2::zeros((values.nrows(), faces.len()));
    for (k, &f) in faces.iter().enumerate() {
        out.column_mut(k).assign(&values.column(f as usize));
    }
    out
}
