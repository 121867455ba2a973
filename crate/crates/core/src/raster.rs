//! Ground rasterization by vertical ray casting, height merging, mesh
//! extrusion and export, and top-down semantic maps.
//!
//! Pixel convention: pixel `(ix, iy)` samples the cell center
//! `(origin.x + (ix + ½)δ, origin.y + (iy + ½)δ)`; arrays are row-major with
//! `ix` fastest. Per-class arrays are stacked class-major.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::unit_cube_corners;
use crate::scene::{GroundClass, GroundPolygon, SceneLayout, ScenePrimitive, ShapeKind};

pub const GRID_SIZE: usize = 256;
pub const CELL_SIZE: f64 = 0.25;
pub const NUM_GROUND_CLASSES: usize = 5;
/// Möller–Trumbore determinant/barycentric epsilon.
pub const RAY_EPSILON: f64 = 1e-9;

/// Regular BEV grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub cell: f64,
    pub origin: [f64; 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            nx: GRID_SIZE,
            ny: GRID_SIZE,
            cell: CELL_SIZE,
            origin: [0.0, -32.0],
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell,
            self.origin[1] + (iy as f64 + 0.5) * self.cell,
        ]
    }

    /// Inclusive pixel index range whose centers fall in `[lo, hi]` along
    /// one axis, or `None` if empty.
    fn span(&self, lo: f64, hi: f64, axis: usize) -> Option<(usize, usize)> {
        let n = if axis == 0 { self.nx } else { self.ny };
        let a = ((lo - self.origin[axis]) / self.cell - 0.5).ceil().max(0.0);
        let b = ((hi - self.origin[axis]) / self.cell - 0.5).floor().min(n as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    }
}

/// Per-class heights and occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundRaster {
    pub spec: GridSpec,
    /// `[class][iy][ix]` heights in meters; 0 where unoccupied.
    pub heights: Vec<f32>,
    pub occupancy: Vec<bool>,
}

impl GroundRaster {
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.cells() * NUM_GROUND_CLASSES;
        Self {
            spec,
            heights: vec![0.0; n],
            occupancy: vec![false; n],
        }
    }

    pub fn index(&self, class: GroundClass, ix: usize, iy: usize) -> usize {
        (class.index() * self.spec.ny + iy) * self.spec.nx + ix
    }

    pub fn height(&self, class: GroundClass, ix: usize, iy: usize) -> Option<f32> {
        let i = self.index(class, ix, iy);
        self.occupancy[i].then_some(self.heights[i])
    }

    pub fn occupied_count(&self, class: GroundClass) -> usize {
        let n = self.spec.cells();
        let s = class.index() * n;
        self.occupancy[s..s + n].iter().filter(|b| **b).count()
    }
}

// ---------------------------------------------------------------------------
// Triangulation

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let on_segment = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| {
        p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
    };
    let d1 = cross2(q1, q2, p1);
    let d2 = cross2(q1, q2, p2);
    let d3 = cross2(p1, p2, q1);
    let d4 = cross2(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn point_in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    cross2(a, b, p) >= 0.0 && cross2(b, c, p) >= 0.0 && cross2(c, a, p) >= 0.0
}

/// Ear-clipping triangulation of a simple polygon's BEV projection.
/// Returns vertex index triples in counter-clockwise order (seen from
/// above). `polygon` is only used in error messages.
pub fn triangulate(vertices: &[[f64; 3]], polygon: usize) -> Result<Vec<[usize; 3]>> {
    let geom = |reason: String| Error::Geometry { polygon, reason };

    // Drop repeated consecutive vertices, including an explicit closing one.
    let mut idx: Vec<usize> = Vec::with_capacity(vertices.len());
    for i in 0..vertices.len() {
        let p = &vertices[i];
        if idx
            .last()
            .is_some_and(|&j| vertices[j][0] == p[0] && vertices[j][1] == p[1])
        {
            continue;
        }
        idx.push(i);
    }
    while idx.len() > 1 {
        let (f, l) = (vertices[idx[0]], vertices[*idx.last().unwrap()]);
        if f[0] == l[0] && f[1] == l[1] {
            idx.pop();
        } else {
            break;
        }
    }
    if idx.len() < 3 {
        return Err(geom(format!("{} distinct vertices, need at least 3", idx.len())));
    }
    let pt = |i: usize| [vertices[i][0], vertices[i][1]];

    let n = idx.len();
    for a in 0..n {
        for b in a + 1..n {
            let adjacent = b == a + 1 || (a == 0 && b == n - 1);
            if adjacent {
                continue;
            }
            let (p1, p2) = (pt(idx[a]), pt(idx[(a + 1) % n]));
            let (q1, q2) = (pt(idx[b]), pt(idx[(b + 1) % n]));
            if segments_intersect(p1, p2, q1, q2) {
                return Err(geom(format!("edges {a} and {b} intersect; polygon is not simple")));
            }
        }
    }

    let area2: f64 = (0..n)
        .map(|i| cross2([0.0, 0.0], pt(idx[i]), pt(idx[(i + 1) % n])))
        .sum();
    if area2.abs() <= f64::EPSILON {
        return Err(geom("zero area".into()));
    }
    if area2 < 0.0 {
        idx.reverse();
    }

    let mut tris = Vec::with_capacity(n - 2);
    let mut guard = 0;
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for i in 0..m {
            let (ia, ib, ic) = (idx[(i + m - 1) % m], idx[i], idx[(i + 1) % m]);
            let (a, b, c) = (pt(ia), pt(ib), pt(ic));
            let turn = cross2(a, b, c);
            if turn < 0.0 {
                continue;
            }
            if turn == 0.0 {
                // Collinear middle vertex: remove it without emitting a
                // zero-area triangle.
                idx.remove(i);
                clipped = true;
                break;
            }
            let blocked = idx
                .iter()
                .filter(|&&j| j != ia && j != ib && j != ic)
                .any(|&j| point_in_triangle(pt(j), a, b, c));
            if !blocked {
                tris.push([ia, ib, ic]);
                idx.remove(i);
                clipped = true;
                break;
            }
        }
        guard += 1;
        if !clipped || guard > 4 * n {
            return Err(geom("ear clipping failed; polygon is not simple".into()));
        }
    }
    if cross2(pt(idx[0]), pt(idx[1]), pt(idx[2])) > 0.0 {
        tris.push([idx[0], idx[1], idx[2]]);
    }
    Ok(tris)
}

// ---------------------------------------------------------------------------
// Ray casting

/// Möller–Trumbore intersection of the downward ray from `origin` with a
/// triangle. Returns the ray parameter `t` (distance below the origin).
pub fn ray_triangle_down(origin: Vector3<f64>, v0: Vector3<f64>, v1: Vector3<f64>, v2: Vector3<f64>) -> Option<f64> {
    let dir = Vector3::new(0.0, 0.0, -1.0);
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < RAY_EPSILON {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(&p) * inv;
    if !(-RAY_EPSILON..=1.0 + RAY_EPSILON).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -RAY_EPSILON || u + v > 1.0 + RAY_EPSILON {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > RAY_EPSILON).then_some(t)
}

struct Tri {
    v: [Vector3<f64>; 3],
    x: [f64; 2],
    y: [f64; 2],
}

fn class_triangles(polys: &[(usize, &GroundPolygon)]) -> Result<Vec<Tri>> {
    let mut out = Vec::new();
    for (pi, poly) in polys {
        for t in triangulate(&poly.vertices, *pi)? {
            let v = t.map(|i| Vector3::from(poly.vertices[i]));
            out.push(Tri {
                x: [v[0].x.min(v[1].x).min(v[2].x), v[0].x.max(v[1].x).max(v[2].x)],
                y: [v[0].y.min(v[1].y).min(v[2].y), v[0].y.max(v[1].y).max(v[2].y)],
                v,
            });
        }
    }
    Ok(out)
}

/// Rasterizes the layout's ground polygons on the default 256×256 grid.
pub fn rasterize_ground(layout: &SceneLayout) -> Result<GroundRaster> {
    rasterize_ground_with(layout, GridSpec::default())
}

pub fn rasterize_ground_with(layout: &SceneLayout, spec: GridSpec) -> Result<GroundRaster> {
    let mut raster = GroundRaster::empty(spec);
    let top = layout
        .ground
        .iter()
        .flat_map(|p| p.vertices.iter().map(|v| v[2]))
        .fold(0.0f64, f64::max)
        + 1.0;
    let cells = spec.cells();

    for class in GroundClass::ALL {
        let polys: Vec<(usize, &GroundPolygon)> = layout
            .ground
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class == class)
            .collect();
        if polys.is_empty() {
            continue;
        }
        let tris = class_triangles(&polys)?;
        let s = class.index() * cells;
        let heights = &mut raster.heights[s..s + cells];
        let occ = &mut raster.occupancy[s..s + cells];
        heights
            .par_chunks_mut(spec.nx)
            .zip(occ.par_chunks_mut(spec.nx))
            .enumerate()
            .for_each(|(iy, (hrow, orow))| {
                let cy = spec.center(0, iy)[1];
                let mut best = vec![f64::NEG_INFINITY; spec.nx];
                for t in tris.iter().filter(|t| t.y[0] <= cy && cy <= t.y[1]) {
                    let Some((a, b)) = spec.span(t.x[0], t.x[1], 0) else {
                        continue;
                    };
                    for (ix, slot) in best.iter_mut().enumerate().take(b + 1).skip(a) {
                        let c = spec.center(ix, iy);
                        let origin = Vector3::new(c[0], c[1], top);
                        if let Some(d) = ray_triangle_down(origin, t.v[0], t.v[1], t.v[2]) {
                            *slot = slot.max(top - d);
                        }
                    }
                }
                for ix in 0..spec.nx {
                    if best[ix].is_finite() {
                        orow[ix] = true;
                        hrow[ix] = best[ix] as f32;
                    }
                }
            });
    }
    Ok(raster)
}

// ---------------------------------------------------------------------------
// Merging

/// Unified ground surface: one height and one label per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedGround {
    pub spec: GridSpec,
    pub heights: Vec<f32>,
    /// Ground label id (1..=5), 0 where no class is present.
    pub labels: Vec<u8>,
}

impl MergedGround {
    pub fn is_occupied(&self, i: usize) -> bool {
        self.labels[i] != 0
    }
}

/// Per pixel, the highest occupied class; equal heights go to the lower
/// class id.
pub fn merge_heights(raster: &GroundRaster) -> MergedGround {
    let n = raster.spec.cells();
    let mut heights = vec![0.0f32; n];
    let mut labels = vec![0u8; n];
    for class in GroundClass::ALL {
        let s = class.index() * n;
        for i in 0..n {
            if raster.occupancy[s + i] {
                let h = raster.heights[s + i];
                if labels[i] == 0 || h > heights[i] {
                    heights[i] = h;
                    labels[i] = class.label();
                }
            }
        }
    }
    MergedGround {
        spec: raster.spec,
        heights,
        labels,
    }
}

// ---------------------------------------------------------------------------
// Meshes

/// Indexed triangle mesh with a semantic label per triangle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub labels: Vec<u8>,
}

impl TriangleMesh {
    pub fn append(&mut self, other: &TriangleMesh) {
        let off = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
        self.labels.extend_from_slice(&other.labels);
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty mesh.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                std::array::from_fn(|d| lo[d].min(v[d])),
                std::array::from_fn(|d| hi[d].max(v[d])),
            )
        }))
    }
}

/// Two triangles per fully occupied 2×2 pixel window, at cell centers and
/// merged heights.
pub fn extrude_mesh(ground: &MergedGround) -> TriangleMesh {
    let spec = ground.spec;
    let at = |ix: usize, iy: usize| iy * spec.nx + ix;
    let mut vid = vec![u32::MAX; spec.cells()];
    let mut mesh = TriangleMesh::default();
    let mut vertex = |mesh: &mut TriangleMesh, i: usize, ix: usize, iy: usize| {
        if vid[i] == u32::MAX {
            vid[i] = mesh.vertices.len() as u32;
            let c = spec.center(ix, iy);
            mesh.vertices.push([c[0], c[1], ground.heights[i] as f64]);
        }
        vid[i]
    };
    for iy in 0..spec.ny.saturating_sub(1) {
        for ix in 0..spec.nx.saturating_sub(1) {
            let (a, b, c, d) = (at(ix, iy), at(ix + 1, iy), at(ix, iy + 1), at(ix + 1, iy + 1));
            if ![a, b, c, d].iter().all(|&i| ground.is_occupied(i)) {
                continue;
            }
            let va = vertex(&mut mesh, a, ix, iy);
            let vb = vertex(&mut mesh, b, ix + 1, iy);
            let vc = vertex(&mut mesh, c, ix, iy + 1);
            let vd = vertex(&mut mesh, d, ix + 1, iy + 1);
            mesh.triangles.push([va, vb, vd]);
            mesh.triangles.push([va, vd, vc]);
            mesh.labels.push(ground.labels[a]);
            mesh.labels.push(ground.labels[a]);
        }
    }
    mesh
}

fn unit_sphere(segments: usize) -> (Vec<[f64; 3]>, Vec<[u32; 3]>) {
    let rings = (segments / 2).max(2);
    let mut verts = vec![[0.0, 0.0, 0.5]];
    for r in 1..rings {
        let phi = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let theta = std::f64::consts::TAU * s as f64 / segments as f64;
            verts.push([
                0.5 * phi.sin() * theta.cos(),
                0.5 * phi.sin() * theta.sin(),
                0.5 * phi.cos(),
            ]);
        }
    }
    verts.push([0.0, 0.0, -0.5]);
    let south = (verts.len() - 1) as u32;
    let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
    let mut tris = Vec::new();
    for s in 0..segments {
        tris.push([0, ring(1, s), ring(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b) = (ring(r, s), ring(r, s + 1));
            let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
            tris.push([a, c, d]);
            tris.push([a, d, b]);
        }
    }
    for s in 0..segments {
        tris.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    (verts, tris)
}

/// Vertex and triangle counts of the UV sphere used for ellipsoids:
/// `rings = max(segments / 2, 2)`, `V = 2 + (rings − 1)·segments`,
/// `F = 2·segments·(rings − 1)`.
pub fn sphere_counts(segments: usize) -> (usize, usize) {
    let rings = (segments / 2).max(2);
    (2 + (rings - 1) * segments, 2 * segments * (rings - 1))
}

const CUBE_FACES: [[u32; 3]; 12] = [
    [0, 2, 1],
    [1, 2, 3],
    [4, 5, 6],
    [5, 7, 6],
    [0, 1, 4],
    [1, 5, 4],
    [2, 6, 3],
    [3, 6, 7],
    [0, 4, 2],
    [2, 4, 6],
    [1, 3, 5],
    [3, 7, 5],
];

/// Mesh of a real primitive: the unit cube or a UV sphere of diameter 1,
/// mapped through the primitive's decoded transform.
pub fn primitive_mesh(p: &ScenePrimitive, segments: usize) -> Result<TriangleMesh> {
    if segments < 3 {
        return Err(Error::config(format!(
            "ellipsoid segments must be >= 3, got {segments}"
        )));
    }
    let t = p.transform()?;
    let (verts, tris) = match p.shape() {
        ShapeKind::Cuboid => (
            unit_cube_corners().iter().map(|c| [c.x, c.y, c.z]).collect::<Vec<_>>(),
            CUBE_FACES.to_vec(),
        ),
        ShapeKind::Ellipsoid => unit_sphere(segments),
    };
    let label = p.category.label();
    Ok(TriangleMesh {
        vertices: verts
            .iter()
            .map(|v| {
                let w = t.apply(&Vector3::from(*v));
                [w.x, w.y, w.z]
            })
            .collect(),
        labels: vec![label; tris.len()],
        triangles: tris,
    })
}

/// Extruded ground surface plus every real primitive.
pub fn scene_mesh(layout: &SceneLayout, segments: usize) -> Result<TriangleMesh> {
    let mut mesh = extrude_mesh(&merge_heights(&rasterize_ground(layout)?));
    for p in layout.real_primitives() {
        mesh.append(&primitive_mesh(p, segments)?);
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "ply" => Some(MeshFormat::Ply),
            _ => None,
        }
    }
}

pub fn mesh_to_obj(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(
        out,
        "# primscene mesh: {} vertices, {} triangles",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .unwrap();
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    let mut current = None;
    for (t, &label) in mesh.triangles.iter().zip(&mesh.labels) {
        if current != Some(label) {
            writeln!(out, "g {}", crate::scene::label_name(label)).unwrap();
            current = Some(label);
        }
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    out
}

/// Binary little-endian PLY with a `label` property per face.
pub fn mesh_to_ply(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\ncomment primscene mesh\n\
         element vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         element face {}\nproperty list uchar int vertex_indices\nproperty uchar label\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .unwrap();
    for v in &mesh.vertices {
        for c in v {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    for (t, &label) in mesh.triangles.iter().zip(&mesh.labels) {
        out.push(3);
        for i in t {
            out.extend_from_slice(&(*i as i32).to_le_bytes());
        }
        out.push(label);
    }
    out
}

pub fn export_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let bytes = match format {
        MeshFormat::Obj => mesh_to_obj(mesh),
        MeshFormat::Ply => mesh_to_ply(mesh),
    };
    write_file(path.as_ref(), &bytes)
}

// ---------------------------------------------------------------------------
// Semantic map

/// Top-down label image, one label id per pixel (0 = empty).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
}

impl SemanticMap {
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Binary PGM (`P5`, maxval 16); rows are written in increasing `iy`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.spec.nx, self.spec.ny, crate::scene::NUM_CLASSES).into_bytes();
        out.extend_from_slice(&self.labels);
        out
    }
}

enum Footprint {
    /// Convex polygon, counter-clockwise.
    Hull(Vec<[f64; 2]>),
    /// Center and inverse of the 2×2 shape matrix.
    Ellipse([f64; 2], Matrix2<f64>),
}

impl Footprint {
    fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Footprint::Hull(h) => (0..h.len()).all(|i| cross2(h[i], h[(i + 1) % h.len()], p) >= 0.0),
            Footprint::Ellipse(c, inv) => {
                let d = Vector2::new(p[0] - c[0], p[1] - c[1]);
                (d.transpose() * inv * d)[(0, 0)] <= 1.0
            }
        }
    }

    fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            Footprint::Hull(h) => h
                .iter()
                .fold(([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]), |(lo, hi), p| {
                    ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
                }),
            Footprint::Ellipse(c, inv) => {
                // Half-widths of the ellipse dᵀ A⁻¹ d ≤ 1 are sqrt(A_ii).
                let a = inv.try_inverse().unwrap_or_else(Matrix2::zeros);
                let (rx, ry) = (a[(0, 0)].max(0.0).sqrt(), a[(1, 1)].max(0.0).sqrt());
                ([c[0] - rx, c[1] - ry], [c[0] + rx, c[1] + ry])
            }
        }
    }
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross2(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross2(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// BEV silhouette and top height of a real primitive.
fn silhouette(p: &ScenePrimitive) -> Result<(Footprint, f64)> {
    let d = p.decode()?;
    let r = d.rotation.matrix();
    let half = d.scale.values().map(|v| v / 2.0);
    match p.shape() {
        ShapeKind::Cuboid => {
            let t = p.transform()?;
            let corners: Vec<Vector3<f64>> = unit_cube_corners().iter().map(|c| t.apply(c)).collect();
            let top = corners.iter().map(|c| c.z).fold(f64::NEG_INFINITY, f64::max);
            Ok((
                Footprint::Hull(convex_hull(corners.iter().map(|c| [c.x, c.y]).collect())),
                top,
            ))
        }
        ShapeKind::Ellipsoid => {
            let a = r * nalgebra::Matrix3::from_diagonal(&Vector3::from(half.map(|h| h * h))) * r.transpose();
            let top = p.center[2] + a[(2, 2)].sqrt();
            let a2 = Matrix2::new(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]);
            let inv = a2.try_inverse().unwrap_or_else(Matrix2::zeros);
            Ok((Footprint::Ellipse([p.center[0], p.center[1]], inv), top))
        }
    }
}

/// Ground classes from the merged surface, then real primitives painted in
/// ascending order of top height.
pub fn render_semantic_map(layout: &SceneLayout) -> Result<SemanticMap> {
    let ground = merge_heights(&rasterize_ground(layout)?);
    let spec = ground.spec;
    let mut labels = ground.labels;
    let mut shapes = Vec::new();
    for p in layout.real_primitives() {
        let (fp, top) = silhouette(p)?;
        shapes.push((top, p.category.label(), fp));
    }
    shapes.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, label, fp) in &shapes {
        let (lo, hi) = fp.bbox();
        let (Some((x0, x1)), Some((y0, y1))) = (spec.span(lo[0], hi[0], 0), spec.span(lo[1], hi[1], 1)) else {
            continue;
        };
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                if fp.contains(spec.center(ix, iy)) {
                    labels[iy * spec.nx + ix] = *label;
                }
            }
        }
    }
    Ok(SemanticMap { spec, labels })
}

// ---------------------------------------------------------------------------
// Raster file

const RASTER_MAGIC: &[u8; 8] = b"PSRASTER";
pub const RASTER_VERSION: u32 = 1;

/// Raster file: 16-byte header (magic, version, `nx`, `ny` as u16), heights
/// as f32, occupancy as LSB-first packed bits. Only the default cell size
/// and origin are representable.
pub fn raster_to_bytes(raster: &GroundRaster) -> Result<Vec<u8>> {
    let spec = raster.spec;
    if spec.cell != CELL_SIZE || spec.origin != GridSpec::default().origin || spec.nx > 65535 || spec.ny > 65535 {
        return Err(Error::config(
            "raster files store only the default cell size and origin",
        ));
    }
    let mut w = Writer::with_header(RASTER_MAGIC, RASTER_VERSION);
    w.u16(spec.nx as u16);
    w.u16(spec.ny as u16);
    for h in &raster.heights {
        w.f32(*h);
    }
    let mut bits = vec![0u8; raster.occupancy.len().div_ceil(8)];
    for (i, b) in raster.occupancy.iter().enumerate() {
        if *b {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    w.buf.extend_from_slice(&bits);
    Ok(w.buf)
}

pub fn raster_from_bytes(bytes: &[u8]) -> Result<GroundRaster> {
    let mut r = Reader::new(bytes, "raster");
    r.header(RASTER_MAGIC, RASTER_VERSION)?;
    let nx = r.u16()? as usize;
    let ny = r.u16()? as usize;
    let spec = GridSpec {
        nx,
        ny,
        ..GridSpec::default()
    };
    let n = spec.cells() * NUM_GROUND_CLASSES;
    let heights = r.f32s(n)?;
    let bits = r.take(n.div_ceil(8))?;
    r.finish()?;
    let occupancy: Vec<bool> = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(GroundRaster {
        spec,
        heights,
        occupancy,
    })
}

pub fn save_raster(raster: &GroundRaster, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &raster_to_bytes(raster)?)
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<GroundRaster> {
    raster_from_bytes(&read_file(path.as_ref())?)
}
