//! Semantic voxelization of primitive scenes, voxel IoU/mIoU and
//! per-sample memory accounting.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::raster::{merge_heights, rasterize_ground_with, GridSpec};
use crate::scene::{SceneLayout, ShapeKind, NUM_CLASSES, TOTAL_QUERIES};

/// Grid geometry: `dims` voxels of edge `voxel`, min corner at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VoxelSpec {
    pub dims: [usize; 3],
    pub voxel: f64,
    pub origin: [f64; 3],
}

impl Default for VoxelSpec {
    /// 256×256×32 at 0.25 m: the 64 m × 64 m FOV, heights −2 m to 6 m.
    fn default() -> Self {
        Self {
            dims: [256, 256, 32],
            voxel: 0.25,
            origin: [0.0, -32.0, -2.0],
        }
    }
}

impl VoxelSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config(format!("voxel dims {:?} must be positive", self.dims)));
        }
        if !(self.voxel.is_finite() && self.voxel > 0.0) {
            return Err(Error::config(format!("voxel size {} must be positive", self.voxel)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("voxel origin must be finite"));
        }
        Ok(())
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.voxel,
            self.origin[1] + (iy as f64 + 0.5) * self.voxel,
            self.origin[2] + (iz as f64 + 0.5) * self.voxel,
        ]
    }

    /// Inclusive voxel index range along `axis` whose centers lie in
    /// `[lo, hi]`.
    fn span(&self, lo: f64, hi: f64, axis: usize) -> Option<(usize, usize)> {
        let a = ((lo - self.origin[axis]) / self.voxel - 0.5).ceil().max(0.0);
        let b = ((hi - self.origin[axis]) / self.voxel - 0.5)
            .floor()
            .min(self.dims[axis] as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    }
}

/// Dense label grid, x fastest then y then z; 0 = empty.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: VoxelSpec,
    pub labels: Vec<u8>,
}

impl VoxelGrid {
    pub fn empty(spec: VoxelSpec) -> Self {
        Self {
            labels: vec![0; spec.len()],
            spec,
        }
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.spec.dims[1] + iy) * self.spec.dims[0] + ix
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.index(ix, iy, iz)]
    }

    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|l| **l != 0).count()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

struct Solid {
    label: u8,
    shape: ShapeKind,
    center: Vector3<f64>,
    /// Maps world offsets from the center into the unit shape frame.
    inverse: Matrix3<f64>,
    lo: [f64; 3],
    hi: [f64; 3],
}

impl Solid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let u = self.inverse * (Vector3::from(p) - self.center);
        match self.shape {
            ShapeKind::Cuboid => u.iter().all(|v| v.abs() <= 0.5),
            ShapeKind::Ellipsoid => u.norm_squared() <= 0.25,
        }
    }
}

/// Labels each voxel by the primitive or ground surface containing its
/// center. Objects override ground; smaller objects override larger ones.
pub fn voxelize(layout: &SceneLayout, spec: VoxelSpec) -> Result<VoxelGrid> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;

    let bev = GridSpec {
        nx,
        ny,
        cell: spec.voxel,
        origin: [spec.origin[0], spec.origin[1]],
    };
    let ground = merge_heights(&rasterize_ground_with(layout, bev)?);
    // Voxel layer containing the surface: zc − v/2 ≤ h < zc + v/2.
    let ground_layer: Vec<Option<usize>> = ground
        .heights
        .iter()
        .zip(&ground.labels)
        .map(|(&h, &l)| {
            let k = ((h as f64 - spec.origin[2]) / spec.voxel).floor();
            (l != 0 && k >= 0.0 && k < nz as f64).then_some(k as usize)
        })
        .collect();

    let mut prims: Vec<_> = layout.real_primitives().collect();
    // Larger first so that smaller primitives are painted over them.
    prims.sort_by(|a, b| b.volume().total_cmp(&a.volume()));
    let mut solids = Vec::with_capacity(prims.len());
    for p in prims {
        let d = p.decode()?;
        let r = d.rotation.matrix();
        let lam = d.scale.values();
        let half: [f64; 3] = std::array::from_fn(|i| match p.shape() {
            ShapeKind::Cuboid => (0..3).map(|j| r[(i, j)].abs() * lam[j] / 2.0).sum(),
            ShapeKind::Ellipsoid => (0..3).map(|j| (r[(i, j)] * lam[j] / 2.0).powi(2)).sum::<f64>().sqrt(),
        });
        let inv_scale = Matrix3::from_diagonal(&Vector3::new(1.0 / lam[0], 1.0 / lam[1], 1.0 / lam[2]));
        solids.push(Solid {
            label: p.category.label(),
            shape: p.shape(),
            center: Vector3::from(p.center),
            inverse: inv_scale * r.transpose(),
            lo: std::array::from_fn(|i| p.center[i] - half[i]),
            hi: std::array::from_fn(|i| p.center[i] + half[i]),
        });
    }

    let mut grid = VoxelGrid::empty(spec);
    grid.labels.par_chunks_mut(nx * ny).enumerate().for_each(|(iz, slab)| {
        for (i, layer) in ground_layer.iter().enumerate() {
            if *layer == Some(iz) {
                slab[i] = ground.labels[i];
            }
        }
        let zc = spec.center(0, 0, iz)[2];
        for s in solids.iter().filter(|s| s.lo[2] <= zc && zc <= s.hi[2]) {
            let (Some((x0, x1)), Some((y0, y1))) = (spec.span(s.lo[0], s.hi[0], 0), spec.span(s.lo[1], s.hi[1], 1))
            else {
                continue;
            };
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    if s.contains(spec.center(ix, iy, iz)) {
                        slab[iy * nx + ix] = s.label;
                    }
                }
            }
        }
    });
    Ok(grid)
}

/// Which classes enter the mIoU average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiouClasses {
    /// Classes present in the ground-truth grid.
    #[default]
    PresentInTruth,
    /// Classes present in either grid.
    PresentInEither,
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoxelIou {
    pub iou: f64,
    pub miou: f64,
    pub per_class: BTreeMap<u8, f64>,
}

/// Binary-occupancy IoU and per-class IoU of `pred` against `truth`. When
/// no class qualifies for the mIoU average, mIoU equals the binary IoU.
pub fn iou(truth: &VoxelGrid, pred: &VoxelGrid, classes: MiouClasses) -> Result<VoxelIou> {
    if truth.spec != pred.spec {
        return Err(Error::config("voxel grids have different specs"));
    }
    let k = NUM_CLASSES as usize + 1;
    let mut inter = vec![0u64; k];
    let mut in_truth = vec![0u64; k];
    let mut in_pred = vec![0u64; k];
    let (mut occ_i, mut occ_u) = (0u64, 0u64);
    for (&a, &b) in truth.labels.iter().zip(&pred.labels) {
        in_truth[a as usize] += 1;
        in_pred[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
        if a != 0 && b != 0 {
            occ_i += 1;
        }
        if a != 0 || b != 0 {
            occ_u += 1;
        }
    }
    let binary = if occ_u == 0 {
        100.0
    } else {
        100.0 * occ_i as f64 / occ_u as f64
    };
    let mut per_class = BTreeMap::new();
    for c in 1..k {
        let include = match classes {
            MiouClasses::PresentInTruth => in_truth[c] > 0,
            MiouClasses::PresentInEither => in_truth[c] > 0 || in_pred[c] > 0,
        };
        if include {
            let union = in_truth[c] + in_pred[c] - inter[c];
            per_class.insert(c as u8, 100.0 * inter[c] as f64 / union as f64);
        }
    }
    let miou = if per_class.is_empty() {
        binary
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(VoxelIou {
        iou: binary,
        miou,
        per_class,
    })
}

/// Nearest-neighbor label replication by an integer factor.
pub fn upsample_labels(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 0 {
        return Err(Error::config("upsampling factor must be >= 1"));
    }
    let spec = VoxelSpec {
        dims: grid.spec.dims.map(|d| d * factor),
        voxel: grid.spec.voxel / factor as f64,
        origin: grid.spec.origin,
    };
    let mut out = VoxelGrid::empty(spec);
    let [nx, ny, _] = spec.dims;
    out.labels.par_chunks_mut(nx * ny).enumerate().for_each(|(iz, slab)| {
        for iy in 0..ny {
            for ix in 0..nx {
                slab[iy * nx + ix] = grid.get(ix / factor, iy / factor, iz / factor);
            }
        }
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Memory accounting

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Dense voxel grid, 4 bytes per voxel.
    Voxel([usize; 3]),
    /// Ten raster channels of 4 bytes per cell plus nine 4-byte values per
    /// primitive.
    Primitives { raster: [usize; 2], primitives: usize },
}

impl Representation {
    pub fn primscene_default() -> Self {
        Representation::Primitives {
            raster: [256, 256],
            primitives: TOTAL_QUERIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub name: String,
    pub bytes: u64,
    pub mib: f64,
}

/// Rounds to `decimals` places, ties to even.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round_ties_even() / s
}

impl MemoryReport {
    /// MiB at two decimals, ties to even (0.125 → "0.12").
    pub fn mib_2dp(&self) -> String {
        format!("{:.2}", round_half_even(self.mib, 2))
    }
}

pub fn memory_footprint(kind: Representation) -> MemoryReport {
    let (name, bytes) = match kind {
        Representation::Voxel([x, y, z]) => (format!("voxel {x}x{y}x{z}"), (x * y * z * 4) as u64),
        Representation::Primitives { raster, primitives } => (
            format!("primitives {}x{} + {primitives}", raster[0], raster[1]),
            (raster[0] * raster[1] * 10 * 4 + primitives * 9 * 4) as u64,
        ),
    };
    MemoryReport {
        name,
        bytes,
        mib: bytes as f64 / (1u64 << 20) as f64,
    }
}

// ---------------------------------------------------------------------------
// Voxel file

const VOXEL_MAGIC: &[u8; 8] = b"PSVOXELS";
pub const VOXEL_VERSION: u32 = 1;

/// Header (magic, version, dims as u32, voxel size and origin as f64) then
/// one u32 label per voxel, x fastest.
pub fn voxels_to_bytes(grid: &VoxelGrid) -> Vec<u8> {
    let mut w = Writer::with_header(VOXEL_MAGIC, VOXEL_VERSION);
    for d in grid.spec.dims {
        w.u32(d as u32);
    }
    w.f64(grid.spec.voxel);
    for o in grid.spec.origin {
        w.f64(o);
    }
    w.buf.reserve(grid.labels.len() * 4);
    for &l in &grid.labels {
        w.u32(l as u32);
    }
    w.buf
}

pub fn voxels_from_bytes(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut r = Reader::new(bytes, "voxel grid");
    r.header(VOXEL_MAGIC, VOXEL_VERSION)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let voxel = r.f64()?;
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let spec = VoxelSpec { dims, voxel, origin };
    spec.validate()?;
    let raw = r.u32s(spec.len())?;
    r.finish()?;
    let labels = raw
        .into_iter()
        .map(|l| {
            u8::try_from(l)
                .ok()
                .filter(|l| *l <= NUM_CLASSES)
                .ok_or_else(|| Error::format("voxel grid", format!("invalid label {l}")))
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(VoxelGrid { spec, labels })
}

pub fn save_voxels(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &voxels_to_bytes(grid))
}

pub fn load_voxels(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    voxels_from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rotation3, Scale3};
    use crate::scene::{Category, ScenePrimitive};

    fn centered_spec() -> VoxelSpec {
        VoxelSpec {
            dims: [16, 16, 16],
            voxel: 0.25,
            origin: [-2.0, -2.0, -2.0],
        }
    }

    fn one(category: Category, scale: [f64; 3]) -> SceneLayout {
        let mut l = SceneLayout::empty(0);
        let p = ScenePrimitive::from_pose(
            1,
            category,
            [0.0; 3],
            &Rotation3::identity(),
            &Scale3::new(scale).unwrap(),
        )
        .unwrap();
        l.objects.insert(category, vec![p]);
        l
    }

    #[test]
    fn unit_cube_fills_64_voxels() {
        let g = voxelize(&one(Category::Object, [1.0; 3]), centered_spec()).unwrap();
        assert_eq!(g.occupied(), 64);
        assert_eq!(g.count(Category::Object.label()), 64);
    }

    #[test]
    fn ellipsoid_volume_within_five_percent() {
        let spec = VoxelSpec {
            dims: [32, 32, 32],
            voxel: 0.125,
            origin: [-2.0; 3],
        };
        let g = voxelize(&one(Category::VegetationEllipsoid, [2.0; 3]), spec).unwrap();
        let expected = std::f64::consts::PI / 6.0 * 8.0 / spec.voxel.powi(3);
        let n = g.occupied() as f64;
        assert!((n - expected).abs() / expected < 0.05, "{n} vs {expected}");
    }

    #[test]
    fn empty_layout_and_bad_spec() {
        let g = voxelize(&SceneLayout::empty(0), VoxelSpec::default()).unwrap();
        assert_eq!(g.occupied(), 0);
        let bad = VoxelSpec {
            dims: [0, 4, 4],
            ..VoxelSpec::default()
        };
        assert!(matches!(voxelize(&SceneLayout::empty(0), bad), Err(Error::Config(_))));
    }

    #[test]
    fn smaller_object_wins() {
        let mut l = one(Category::ConstructionBig, [3.0; 3]);
        let inner = ScenePrimitive::from_pose(
            2,
            Category::Human,
            [0.0; 3],
            &Rotation3::identity(),
            &Scale3::new([1.0; 3]).unwrap(),
        )
        .unwrap();
        l.objects.insert(Category::Human, vec![inner]);
        let g = voxelize(&l, centered_spec()).unwrap();
        assert_eq!(g.count(Category::Human.label()), 64);
        assert_eq!(g.count(Category::ConstructionBig.label()), 12 * 12 * 12 - 64);
    }

    #[test]
    fn iou_examples() {
        let spec = VoxelSpec {
            dims: [4, 1, 1],
            voxel: 1.0,
            origin: [0.0; 3],
        };
        let a = VoxelGrid {
            spec,
            labels: vec![1, 1, 0, 0],
        };
        let b = VoxelGrid {
            spec,
            labels: vec![0, 1, 1, 0],
        };
        let same = iou(&a, &a, MiouClasses::default()).unwrap();
        assert_eq!((same.iou, same.miou), (100.0, 100.0));
        let half = iou(&a, &b, MiouClasses::default()).unwrap();
        assert!((half.iou - 100.0 / 3.0).abs() < 1e-12);
        let c = VoxelGrid {
            spec,
            labels: vec![0, 0, 2, 2],
        };
        assert_eq!(iou(&a, &c, MiouClasses::default()).unwrap().iou, 0.0);
        let other = VoxelGrid {
            spec: VoxelSpec { voxel: 0.5, ..spec },
            labels: vec![0; 4],
        };
        assert!(iou(&a, &other, MiouClasses::default()).is_err());
    }

    #[test]
    fn miou_class_sets_differ() {
        let spec = VoxelSpec {
            dims: [3, 1, 1],
            voxel: 1.0,
            origin: [0.0; 3],
        };
        let t = VoxelGrid {
            spec,
            labels: vec![1, 1, 0],
        };
        let p = VoxelGrid {
            spec,
            labels: vec![1, 1, 2],
        };
        assert_eq!(iou(&t, &p, MiouClasses::PresentInTruth).unwrap().miou, 100.0);
        assert_eq!(iou(&t, &p, MiouClasses::PresentInEither).unwrap().miou, 50.0);
    }

    #[test]
    fn memory_figures() {
        let r = |dims| memory_footprint(Representation::Voxel(dims)).mib_2dp();
        assert_eq!(r([64, 64, 8]), "0.12");
        assert_eq!(r([128, 128, 16]), "1.00");
        assert_eq!(r([256, 256, 32]), "8.00");
        let p = memory_footprint(Representation::primscene_default());
        assert_eq!(p.bytes, 2_639_944);
        assert_eq!(p.mib_2dp(), "2.52");
    }

    #[test]
    fn upsample_examples() {
        let spec = VoxelSpec {
            dims: [2, 2, 2],
            voxel: 1.0,
            origin: [0.0; 3],
        };
        let g = VoxelGrid {
            spec,
            labels: (1..=8).collect(),
        };
        assert_eq!(upsample_labels(&g, 1).unwrap(), g);
        let up = upsample_labels(&g, 2).unwrap();
        assert_eq!(up.spec.dims, [4, 4, 4]);
        for l in 1..=8 {
            assert_eq!(up.count(l), 8);
        }
        assert_eq!(up.get(3, 3, 3), 8);
    }

    #[test]
    fn voxel_bytes_round_trip() {
        let g = voxelize(&one(Category::Object, [1.0; 3]), centered_spec()).unwrap();
        let bytes = voxels_to_bytes(&g);
        assert_eq!(voxels_from_bytes(&bytes).unwrap(), g);
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4] = 99;
        assert!(voxels_from_bytes(&bad).is_err());
    }
}
