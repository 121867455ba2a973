//! Scene-layout data model: categories, primitives, ground polygons, the
//! versioned JSON layout file, padding, FOV cropping, normalization,
//! vegetation-density labels, object editing and a synthetic generator.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_transform, cholesky_decode, encode_pose, CholeskyParams, DecodedPose, Rotation3, Scale3, Transform4,
};

/// Primitive shape used by a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Cuboid,
    Ellipsoid,
}

/// Loss-weight group, keyed by how many queries a category gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGroup {
    Low,
    Medium,
    High,
}

/// The eleven object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    VegetationCuboid,
    VegetationEllipsoid,
    VehicleBig,
    VehicleSmall,
    TwoWheeler,
    Human,
    ConstructionBig,
    ConstructionSmall,
    Pole,
    TrafficControl,
    Object,
}

/// Static description of a category: shape, fixed query count and loss
/// group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategorySpec {
    pub category: Category,
    pub shape: ShapeKind,
    pub count: usize,
    pub group: WeightGroup,
}

/// Total number of object queries over all categories.
pub const TOTAL_QUERIES: usize = 514;

impl Category {
    pub const ALL: [Category; 11] = [
        Category::VegetationCuboid,
        Category::VegetationEllipsoid,
        Category::VehicleBig,
        Category::VehicleSmall,
        Category::TwoWheeler,
        Category::Human,
        Category::ConstructionBig,
        Category::ConstructionSmall,
        Category::Pole,
        Category::TrafficControl,
        Category::Object,
    ];

    pub fn spec(self) -> CategorySpec {
        use Category::*;
        use ShapeKind::*;
        use WeightGroup::*;
        let (shape, count, group) = match self {
            VegetationCuboid => (Cuboid, 178, High),
            VegetationEllipsoid => (Ellipsoid, 159, High),
            VehicleBig => (Cuboid, 2, Low),
            VehicleSmall => (Cuboid, 18, Medium),
            TwoWheeler => (Cuboid, 6, Low),
            Human => (Cuboid, 5, Low),
            ConstructionBig => (Cuboid, 16, Medium),
            ConstructionSmall => (Cuboid, 77, High),
            Pole => (Cuboid, 19, Medium),
            TrafficControl => (Cuboid, 17, Medium),
            Object => (Cuboid, 17, Medium),
        };
        CategorySpec {
            category: self,
            shape,
            count,
            group,
        }
    }

    pub fn shape(self) -> ShapeKind {
        self.spec().shape
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short code (`VC`, `VE`, …).
    pub fn code(self) -> &'static str {
        use Category::*;
        match self {
            VegetationCuboid => "VC",
            VegetationEllipsoid => "VE",
            VehicleBig => "VB",
            VehicleSmall => "VS",
            TwoWheeler => "TW",
            Human => "H",
            ConstructionBig => "CB",
            ConstructionSmall => "CS",
            Pole => "P",
            TrafficControl => "TC",
            Object => "O",
        }
    }

    /// Semantic label id (6..=16) shared by voxel grids and BEV maps.
    pub fn label(self) -> u8 {
        6 + self as u8
    }

    pub fn is_vegetation(self) -> bool {
        matches!(self, Category::VegetationCuboid | Category::VegetationEllipsoid)
    }
}

/// Ground classes, in label-id order (lower id wins height ties).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundClass {
    Road,
    Sidewalk,
    Parking,
    Terrain,
    Ground,
}

impl GroundClass {
    pub const ALL: [GroundClass; 5] = [
        GroundClass::Road,
        GroundClass::Sidewalk,
        GroundClass::Parking,
        GroundClass::Terrain,
        GroundClass::Ground,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Semantic label id (1..=5).
    pub fn label(self) -> u8 {
        1 + self as u8
    }
}

/// Number of semantic classes (5 ground + 11 object); label 0 is empty.
pub const NUM_CLASSES: u8 = 16;

/// Human-readable name for a semantic label id.
pub fn label_name(label: u8) -> &'static str {
    const NAMES: [&str; 17] = [
        "empty",
        "road",
        "sidewalk",
        "parking",
        "terrain",
        "ground",
        "vegetation_cuboid",
        "vegetation_ellipsoid",
        "vehicle_big",
        "vehicle_small",
        "two_wheeler",
        "human",
        "construction_big",
        "construction_small",
        "pole",
        "traffic_control",
        "object",
    ];
    NAMES.get(label as usize).copied().unwrap_or("invalid")
}

/// Scene-level vegetation density label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityLabel {
    Low,
    Medium,
    High,
}

impl DensityLabel {
    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(i: u32) -> Option<Self> {
        match i {
            0 => Some(DensityLabel::Low),
            1 => Some(DensityLabel::Medium),
            2 => Some(DensityLabel::High),
            _ => None,
        }
    }
}

/// One object instance. Padding entries have `exists == false` and all
/// geometric fields zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub instance_id: u32,
    pub category: Category,
    /// Center in the local frame (x forward, y left, z up), meters.
    pub center: [f64; 3],
    pub cholesky: CholeskyParams,
    pub exists: bool,
    /// Predicted existence probability, when this is a prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl ScenePrimitive {
    pub fn pad(category: Category) -> Self {
        Self {
            instance_id: 0,
            category,
            center: [0.0; 3],
            cholesky: CholeskyParams::ZERO,
            exists: false,
            confidence: None,
        }
    }

    pub fn from_pose(
        instance_id: u32,
        category: Category,
        center: [f64; 3],
        rot: &Rotation3,
        scale: &Scale3,
    ) -> Result<Self> {
        Ok(Self {
            instance_id,
            category,
            center,
            cholesky: encode_pose(rot, scale)?,
            exists: true,
            confidence: None,
        })
    }

    pub fn shape(&self) -> ShapeKind {
        self.category.shape()
    }

    pub fn decode(&self) -> Result<DecodedPose> {
        cholesky_decode(&self.cholesky)
    }

    pub fn transform(&self) -> Result<Transform4> {
        let d = self.decode()?;
        Ok(build_transform(&d.rotation, &d.scale, Vector3::from(self.center)))
    }

    /// Existence probability used by losses and detection ranking: the
    /// predicted confidence if present, else the binary flag.
    pub fn probability(&self) -> f64 {
        self.confidence.unwrap_or(if self.exists { 1.0 } else { 0.0 })
    }

    /// Enclosed volume in m³: `λ1λ2λ3` for cuboids, `(π/6)λ1λ2λ3` for
    /// ellipsoids (diameters λ). Zero for padding.
    pub fn volume(&self) -> f64 {
        if !self.exists {
            return 0.0;
        }
        let prod = self.cholesky.scale_product();
        match self.shape() {
            ShapeKind::Cuboid => prod,
            ShapeKind::Ellipsoid => std::f64::consts::PI / 6.0 * prod,
        }
    }

    fn bev_distance(&self, ego: [f64; 3]) -> f64 {
        (self.center[0] - ego[0]).hypot(self.center[1] - ego[1])
    }
}

/// Ground polygon of one class, upward extruded; vertices carry heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPolygon {
    pub class: GroundClass,
    pub vertices: Vec<[f64; 3]>,
}

impl GroundPolygon {
    /// Axis-aligned rectangle at a constant height.
    pub fn rectangle(class: GroundClass, x: [f64; 2], y: [f64; 2], z: f64) -> Self {
        Self {
            class,
            vertices: vec![[x[0], y[0], z], [x[1], y[0], z], [x[1], y[1], z], [x[0], y[1], z]],
        }
    }
}

/// Field of view of a layout: `x ∈ [0, forward]`, `y ∈ [−lateral, lateral]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fov {
    pub forward: f64,
    pub lateral: f64,
}

impl Default for Fov {
    fn default() -> Self {
        Self {
            forward: 64.0,
            lateral: 32.0,
        }
    }
}

impl Fov {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0] >= 0.0 && p[0] <= self.forward && p[1] >= -self.lateral && p[1] <= self.lateral
    }
}

/// A full scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub pose_id: u64,
    #[serde(default)]
    pub fov: Fov,
    pub ground: Vec<GroundPolygon>,
    /// Per-category primitive lists.
    pub objects: BTreeMap<Category, Vec<ScenePrimitive>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<DensityLabel>,
}

impl SceneLayout {
    pub fn empty(pose_id: u64) -> Self {
        Self {
            pose_id,
            fov: Fov::default(),
            ground: Vec::new(),
            objects: BTreeMap::new(),
            density: None,
        }
    }

    pub fn primitives(&self) -> impl Iterator<Item = &ScenePrimitive> {
        self.objects.values().flatten()
    }

    pub fn real_primitives(&self) -> impl Iterator<Item = &ScenePrimitive> {
        self.primitives().filter(|p| p.exists)
    }

    pub fn category(&self, c: Category) -> &[ScenePrimitive] {
        self.objects.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn find(&self, instance_id: u32) -> Option<&ScenePrimitive> {
        self.real_primitives().find(|p| p.instance_id == instance_id)
    }

    /// Every category is present with exactly its fixed query count.
    pub fn is_padded(&self) -> bool {
        Category::ALL
            .iter()
            .all(|c| self.objects.get(c).is_some_and(|v| v.len() == c.spec().count))
    }

    /// Pads (or trims) every category to its query count around `ego`.
    pub fn padded(&self, ego: [f64; 3]) -> SceneLayout {
        let mut out = self.clone();
        out.objects = Category::ALL
            .iter()
            .map(|&c| (c, pad_category(self.category(c), &c.spec(), ego)))
            .collect();
        out
    }

    /// Structural checks applied after loading.
    pub fn validate(&self) -> Result<()> {
        for (i, poly) in self.ground.iter().enumerate() {
            if poly.vertices.len() < 3 {
                return Err(Error::Geometry {
                    polygon: i,
                    reason: format!("{} vertices, need at least 3", poly.vertices.len()),
                });
            }
            if poly.vertices.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Geometry {
                    polygon: i,
                    reason: "non-finite vertex".into(),
                });
            }
        }
        for (cat, prims) in &self.objects {
            for p in prims {
                if p.category != *cat {
                    return Err(Error::format(
                        "layout",
                        format!(
                            "primitive {} filed under {cat:?} but has category {:?}",
                            p.instance_id, p.category
                        ),
                    ));
                }
                if p.exists {
                    p.cholesky.validate()?;
                    if p.center.iter().any(|v| !v.is_finite()) {
                        return Err(Error::format(
                            "layout",
                            format!("primitive {} has non-finite center", p.instance_id),
                        ));
                    }
                } else if p.center != [0.0; 3] || p.cholesky != CholeskyParams::ZERO {
                    return Err(Error::format("layout", "padding entry with non-zero geometry"));
                }
                if let Some(c) = p.confidence {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(Error::InvalidProbability(c));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layout file

pub const LAYOUT_FORMAT: &str = "primscene.layout";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Serialize)]
struct LayoutDocRef<'a> {
    format: &'static str,
    version: u32,
    layout: &'a SceneLayout,
}

#[derive(Deserialize)]
struct LayoutHeader {
    format: String,
    version: u32,
    #[allow(dead_code)]
    layout: serde::de::IgnoredAny,
}

#[derive(Deserialize)]
struct LayoutDoc {
    #[allow(dead_code)]
    format: String,
    #[allow(dead_code)]
    version: u32,
    layout: SceneLayout,
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Serializes a layout to the versioned JSON document.
pub fn layout_to_json(layout: &SceneLayout) -> String {
    let doc = LayoutDocRef {
        format: LAYOUT_FORMAT,
        version: LAYOUT_VERSION,
        layout,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("layout is always serializable");
    s.push('\n');
    s
}

/// Parses a layout document; nothing is returned unless the whole document
/// is well formed.
pub fn layout_from_json(text: &str) -> Result<SceneLayout> {
    let header: LayoutHeader = serde_json::from_str(text).map_err(parse_error)?;
    if header.format != LAYOUT_FORMAT {
        return Err(Error::format(
            "layout",
            format!("unexpected format tag {:?}", header.format),
        ));
    }
    if header.version != LAYOUT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "layout",
            found: header.version,
            expected: LAYOUT_VERSION,
        });
    }
    let doc: LayoutDoc = serde_json::from_str(text).map_err(parse_error)?;
    doc.layout.validate()?;
    Ok(doc.layout)
}

pub fn save_layout(layout: &SceneLayout, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, layout_to_json(layout)).map_err(|e| Error::io(path, e))
}

pub fn load_layout(path: impl AsRef<Path>) -> Result<SceneLayout> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    layout_from_json(&text)
}

// ---------------------------------------------------------------------------
// Cropping and padding

/// Keeps primitives whose center is inside the FOV and polygons with at
/// least one vertex inside it.
pub fn filter_fov(layout: &SceneLayout) -> SceneLayout {
    let fov = layout.fov;
    let mut out = layout.clone();
    out.ground.retain(|p| p.vertices.iter().any(|v| fov.contains(*v)));
    for prims in out.objects.values_mut() {
        prims.retain(|p| !p.exists || fov.contains(p.center));
    }
    out
}

/// Returns exactly `spec.count` entries: real primitives first (the
/// `spec.count` nearest to `ego` in BEV when there are too many, in their
/// original order), then padding.
pub fn pad_category(primitives: &[ScenePrimitive], spec: &CategorySpec, ego: [f64; 3]) -> Vec<ScenePrimitive> {
    let reals: Vec<&ScenePrimitive> = primitives.iter().filter(|p| p.exists).collect();
    let mut keep = vec![true; reals.len()];
    if reals.len() > spec.count {
        let mut by_dist: Vec<usize> = (0..reals.len()).collect();
        by_dist.sort_by(|&a, &b| reals[a].bev_distance(ego).total_cmp(&reals[b].bev_distance(ego)));
        for &i in &by_dist[spec.count..] {
            keep[i] = false;
        }
    }
    let mut out: Vec<ScenePrimitive> = reals.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| **p).collect();
    out.resize(spec.count, ScenePrimitive::pad(spec.category));
    out
}

/// Existence threshold applied to predicted primitives at reconstruction.
pub const EXISTENCE_THRESHOLD: f64 = 0.3;

/// Drops padding and every primitive whose probability is below
/// `threshold`.
pub fn discard_low_confidence(layout: &SceneLayout, threshold: f64) -> SceneLayout {
    let mut out = layout.clone();
    for prims in out.objects.values_mut() {
        prims.retain(|p| p.exists && p.probability() >= threshold);
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization

/// Min/max of the 9 feature dimensions (center xyz, then 6 Cholesky
/// entries) for one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: [f64; 9],
    pub max: [f64; 9],
}

impl FeatureRange {
    fn validate(&self) -> Result<()> {
        for d in 0..9 {
            if !(self.min[d] < self.max[d]) {
                return Err(Error::config(format!(
                    "feature range dim {d}: min {} !< max {}",
                    self.min[d], self.max[d]
                )));
            }
        }
        Ok(())
    }

    /// Affine map to `[0, 1]`, clamping out-of-range inputs. Returns the
    /// number of clamped dimensions.
    pub fn normalize(&self, raw: &[f64; 9]) -> ([f64; 9], usize) {
        let mut out = [0.0; 9];
        let mut clamped = 0;
        for d in 0..9 {
            let v = (raw[d] - self.min[d]) / (self.max[d] - self.min[d]);
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            out[d] = v.clamp(0.0, 1.0);
        }
        (out, clamped)
    }

    pub fn denormalize(&self, f: &[f64; 9]) -> [f64; 9] {
        std::array::from_fn(|d| self.min[d] + f[d] * (self.max[d] - self.min[d]))
    }
}

/// Per-category normalization ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub categories: BTreeMap<Category, FeatureRange>,
}

pub fn raw_features(p: &ScenePrimitive) -> [f64; 9] {
    let c = p.cholesky.values();
    [
        p.center[0],
        p.center[1],
        p.center[2],
        c[0],
        c[1],
        c[2],
        c[3],
        c[4],
        c[5],
    ]
}

impl NormalizationStats {
    /// Ranges observed over the real primitives of `layouts`. Dimensions
    /// with zero spread are widened by ±0.5 so that `min < max` holds.
    pub fn from_layouts(layouts: &[SceneLayout]) -> Self {
        let mut categories: BTreeMap<Category, FeatureRange> = BTreeMap::new();
        for p in layouts.iter().flat_map(|l| l.real_primitives()) {
            let f = raw_features(p);
            let r = categories.entry(p.category).or_insert(FeatureRange {
                min: [f64::INFINITY; 9],
                max: [f64::NEG_INFINITY; 9],
            });
            for (d, v) in f.iter().enumerate() {
                r.min[d] = r.min[d].min(*v);
                r.max[d] = r.max[d].max(*v);
            }
        }
        for r in categories.values_mut() {
            for d in 0..9 {
                if r.max[d] - r.min[d] <= 0.0 {
                    r.min[d] -= 0.5;
                    r.max[d] += 0.5;
                }
            }
        }
        Self { categories }
    }

    pub fn range(&self, c: Category) -> Result<&FeatureRange> {
        self.categories.get(&c).ok_or(Error::MissingStats(c))
    }

    pub fn validate(&self) -> Result<()> {
        self.categories.values().try_for_each(FeatureRange::validate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&text).map_err(parse_error)?;
        stats.validate()?;
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPrimitive {
    pub category: Category,
    pub instance_id: u32,
    pub features: [f64; 9],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeatures {
    pub rows: Vec<NormalizedPrimitive>,
    /// Number of individual values that fell outside their range.
    pub clamped: usize,
}

/// Normalized 9-vectors for every real primitive in the layout.
pub fn normalize_features(layout: &SceneLayout, stats: &NormalizationStats) -> Result<NormalizedFeatures> {
    let mut rows = Vec::new();
    let mut clamped = 0;
    for p in layout.real_primitives() {
        let (features, n) = stats.range(p.category)?.normalize(&raw_features(p));
        clamped += n;
        rows.push(NormalizedPrimitive {
            category: p.category,
            instance_id: p.instance_id,
            features,
        });
    }
    Ok(NormalizedFeatures { rows, clamped })
}

/// Inverse of [`normalize_features`]: `(center, cholesky)` per row.
pub fn denormalize_features(
    features: &NormalizedFeatures,
    stats: &NormalizationStats,
) -> Result<Vec<([f64; 3], CholeskyParams)>> {
    features
        .rows
        .iter()
        .map(|r| {
            let raw = stats.range(r.category)?.denormalize(&r.features);
            Ok((
                [raw[0], raw[1], raw[2]],
                CholeskyParams([raw[3], raw[4], raw[5], raw[6], raw[7], raw[8]]),
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Density labels

/// Vegetation count/volume threshold pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityThreshold {
    pub count: f64,
    pub volume: f64,
}

/// Number and total volume of real vegetation primitives (cuboids and
/// ellipsoids).
pub fn vegetation_stats(layout: &SceneLayout) -> (usize, f64) {
    layout
        .real_primitives()
        .filter(|p| p.category.is_vegetation())
        .fold((0, 0.0), |(n, v), p| (n + 1, v + p.volume()))
}

pub fn compute_scene_label(layout: &SceneLayout, p25: DensityThreshold, p75: DensityThreshold) -> DensityLabel {
    let (count, volume) = vegetation_stats(layout);
    let count = count as f64;
    if count < p25.count && volume < p25.volume {
        DensityLabel::Low
    } else if count > p75.count && volume > p75.volume {
        DensityLabel::High
    } else {
        DensityLabel::Medium
    }
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 25th and 75th percentile thresholds over a corpus.
pub fn density_thresholds(layouts: &[SceneLayout]) -> (DensityThreshold, DensityThreshold) {
    let (counts, volumes): (Vec<f64>, Vec<f64>) = layouts
        .iter()
        .map(|l| {
            let (n, v) = vegetation_stats(l);
            (n as f64, v)
        })
        .unzip();
    (
        DensityThreshold {
            count: percentile(&counts, 25.0),
            volume: percentile(&volumes, 25.0),
        },
        DensityThreshold {
            count: percentile(&counts, 75.0),
            volume: percentile(&volumes, 75.0),
        },
    )
}

// ---------------------------------------------------------------------------
// Object editing

/// Instance-level edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edit {
    Translate([f64; 3]),
    /// Rotation about `axis` (world frame, through the primitive's center)
    /// by `angle` radians.
    Rotate {
        axis: [f64; 3],
        angle: f64,
    },
    /// Multiplies the principal scales, in decoded (descending) order.
    Scale([f64; 3]),
}

/// Applies an edit in decoded `(R, λ, t)` space and re-encodes.
pub fn apply_edit(layout: &SceneLayout, instance_id: u32, edit: Edit) -> Result<SceneLayout> {
    let mut out = layout.clone();
    let prim = out
        .objects
        .values_mut()
        .flatten()
        .find(|p| p.exists && p.instance_id == instance_id)
        .ok_or(Error::NotFound(instance_id))?;
    match edit {
        Edit::Translate(d) => {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidEdit(format!("translation {d:?}")));
            }
            for (c, dv) in prim.center.iter_mut().zip(d) {
                *c += dv;
            }
        }
        Edit::Rotate { axis, angle } => {
            let q = Rotation3::from_axis_angle(Vector3::from(axis), angle)
                .map_err(|e| Error::InvalidEdit(e.to_string()))?;
            let d = prim.decode()?;
            prim.cholesky = encode_pose(&d.rotation.then(&q), &d.scale)?;
        }
        Edit::Scale(f) => {
            if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidEdit(format!("scale factors {f:?} must be > 0")));
            }
            let d = prim.decode()?;
            let s = d.scale.values();
            let scale = Scale3::new([s[0] * f[0], s[1] * f[1], s[2] * f[2]])?;
            prim.cholesky = encode_pose(&d.rotation, &scale)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Configuration of the synthetic straight-road generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub counts: BTreeMap<Category, usize>,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub pose_id: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        use Category::*;
        let counts = [
            (VegetationCuboid, 20),
            (VegetationEllipsoid, 15),
            (VehicleBig, 1),
            (VehicleSmall, 8),
            (TwoWheeler, 2),
            (Human, 3),
            (ConstructionBig, 6),
            (ConstructionSmall, 12),
            (Pole, 8),
            (TrafficControl, 5),
            (Object, 3),
        ]
        .into_iter()
        .collect();
        Self {
            counts,
            road_half_width: 6.0,
            sidewalk_width: 3.0,
            pose_id: 0,
        }
    }
}

impl SynthConfig {
    /// Every category at its full query count (514 primitives).
    pub fn full() -> Self {
        Self {
            counts: Category::ALL.iter().map(|c| (*c, c.spec().count)).collect(),
            ..Self::default()
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Edge-length ranges (l, w, h) per category, meters.
fn size_ranges(c: Category) -> [[f64; 2]; 3] {
    use Category::*;
    match c {
        VegetationCuboid => [[2.0, 8.0], [2.0, 8.0], [3.0, 10.0]],
        VegetationEllipsoid => [[2.0, 6.0], [2.0, 6.0], [2.0, 8.0]],
        VehicleBig => [[8.0, 12.0], [2.4, 2.8], [3.0, 4.0]],
        VehicleSmall => [[3.8, 5.0], [1.6, 2.0], [1.4, 1.8]],
        TwoWheeler => [[1.6, 2.2], [0.6, 0.9], [1.2, 1.6]],
        Human => [[0.5, 0.8], [0.5, 0.8], [1.6, 1.9]],
        ConstructionBig => [[8.0, 25.0], [8.0, 15.0], [6.0, 20.0]],
        ConstructionSmall => [[5.0, 15.0], [0.2, 0.5], [1.0, 2.5]],
        Pole => [[0.2, 0.4], [0.2, 0.4], [4.0, 8.0]],
        TrafficControl => [[0.3, 1.0], [0.1, 0.4], [0.5, 1.2]],
        Object => [[0.5, 1.2], [0.5, 1.2], [0.6, 1.2]],
    }
}

/// Deterministic straight-road scene: road along x, sidewalks and terrain on
/// both sides, a parking lot, and randomly posed primitives inside the FOV.
pub fn synth_scene(seed: u64, config: &SynthConfig) -> Result<SceneLayout> {
    for (c, n) in &config.counts {
        if *n > c.spec().count {
            return Err(Error::config(format!(
                "{} {:?} requested, at most {} allowed",
                n,
                c,
                c.spec().count
            )));
        }
    }
    let hw = config.road_half_width;
    let sw = config.sidewalk_width;
    if !(hw > 0.0 && sw > 0.0 && hw + sw < 32.0) {
        return Err(Error::config("road template does not fit the FOV"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = SceneLayout::empty(config.pose_id);
    let fov = layout.fov;
    let edge = hw + sw;

    layout.ground = vec![
        GroundPolygon::rectangle(GroundClass::Road, [0.0, fov.forward], [-hw, hw], 0.0),
        GroundPolygon::rectangle(GroundClass::Sidewalk, [0.0, fov.forward], [hw, edge], 0.15),
        GroundPolygon::rectangle(GroundClass::Sidewalk, [0.0, fov.forward], [-edge, -hw], 0.15),
        GroundPolygon::rectangle(GroundClass::Terrain, [0.0, fov.forward], [edge, fov.lateral], 0.05),
        GroundPolygon::rectangle(GroundClass::Terrain, [0.0, fov.forward], [-fov.lateral, -edge], 0.05),
    ];
    let lot_x0 = uniform(&mut rng, 5.0, 40.0).round();
    let lot_far = (edge + 8.0).min(fov.lateral);
    layout.ground.push(GroundPolygon::rectangle(
        GroundClass::Parking,
        [lot_x0, lot_x0 + 15.0],
        [edge, lot_far],
        0.1,
    ));

    let mut next_id = 1u32;
    for (&category, &n) in &config.counts {
        let mut prims = Vec::with_capacity(n);
        for _ in 0..n {
            let r = size_ranges(category);
            let l = uniform(&mut rng, r[0][0], r[0][1]);
            let w = uniform(&mut rng, r[1][0], r[1][1]);
            let h = uniform(&mut rng, r[2][0], r[2][1]);
            let x = uniform(&mut rng, 1.0, fov.forward - 1.0);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (y, ground_z) = match category {
                Category::VehicleBig | Category::VehicleSmall => (uniform(&mut rng, -hw + 1.5, hw - 1.5), 0.0),
                Category::Human | Category::TwoWheeler => (side * uniform(&mut rng, hw + 0.5, edge - 0.5), 0.15),
                _ => (side * uniform(&mut rng, edge + 1.0, fov.lateral - 1.0), 0.05),
            };
            let lift = if category == Category::TrafficControl {
                uniform(&mut rng, 3.0, 5.0)
            } else {
                0.0
            };
            let (rot, z) = match category {
                Category::VegetationEllipsoid => (Rotation3::random(&mut rng), ground_z + lift + 0.5 * h.max(l).max(w)),
                Category::VehicleBig | Category::VehicleSmall => {
                    let heading = if side > 0.0 { 0.0 } else { std::f64::consts::PI };
                    (
                        Rotation3::from_yaw(heading + uniform(&mut rng, -0.2, 0.2)),
                        ground_z + 0.5 * h,
                    )
                }
                _ => (
                    Rotation3::from_yaw(uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI)),
                    ground_z + lift + 0.5 * h,
                ),
            };
            // Rotation columns are the primitive's (forward, left, up) axes.
            let scale = Scale3::new([l, w, h])?;
            prims.push(ScenePrimitive::from_pose(next_id, category, [x, y, z], &rot, &scale)?);
            next_id += 1;
        }
        layout.objects.insert(category, prims);
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(id: u32, x: f64, y: f64) -> ScenePrimitive {
        ScenePrimitive::from_pose(
            id,
            Category::VehicleSmall,
            [x, y, 0.8],
            &Rotation3::identity(),
            &Scale3::new([4.0, 1.8, 1.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn table_counts_sum_to_total() {
        let total: usize = Category::ALL.iter().map(|c| c.spec().count).sum();
        assert_eq!(total, TOTAL_QUERIES);
        assert_eq!(Category::VegetationEllipsoid.shape(), ShapeKind::Ellipsoid);
        assert!(Category::ALL
            .iter()
            .filter(|c| **c != Category::VegetationEllipsoid)
            .all(|c| c.shape() == ShapeKind::Cuboid));
    }

    #[test]
    fn labels_are_distinct_and_in_range() {
        let mut labels: Vec<u8> = GroundClass::ALL.iter().map(|g| g.label()).collect();
        labels.extend(Category::ALL.iter().map(|c| c.label()));
        labels.sort();
        assert_eq!(labels, (1..=NUM_CLASSES).collect::<Vec<_>>());
        assert_eq!(label_name(Category::Object.label()), "object");
    }

    #[test]
    fn empty_layout_round_trips() {
        let l = SceneLayout::empty(3);
        assert_eq!(layout_from_json(&layout_to_json(&l)).unwrap(), l);
    }

    #[test]
    fn truncated_document_is_a_parse_error() {
        let l = synth_scene(0, &SynthConfig::default()).unwrap();
        let text = layout_to_json(&l);
        let cut = &text[..text.len() / 2];
        match layout_from_json(cut) {
            Err(Error::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = layout_to_json(&SceneLayout::empty(0)).replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(
            layout_from_json(&text),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn full_layout_reserializes_identically() {
        let l = synth_scene(5, &SynthConfig::full()).unwrap();
        assert_eq!(l.real_primitives().count(), TOTAL_QUERIES);
        let a = layout_to_json(&l);
        let b = layout_to_json(&layout_from_json(&a).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn fov_examples() {
        let mut l = SceneLayout::empty(0);
        l.objects
            .insert(Category::VehicleSmall, vec![car(1, 100.0, 0.0), car(2, 63.9, -31.9)]);
        l.ground.push(GroundPolygon {
            class: GroundClass::Road,
            vertices: vec![[10.0, 0.0, 0.0], [-50.0, 0.0, 0.0], [-50.0, -50.0, 0.0]],
        });
        l.ground.push(GroundPolygon::rectangle(
            GroundClass::Road,
            [-20.0, -10.0],
            [0.0, 5.0],
            0.0,
        ));
        let f = filter_fov(&l);
        let ids: Vec<u32> = f.real_primitives().map(|p| p.instance_id).collect();
        assert_eq!(ids, vec![2]);
        assert_eq!(f.ground.len(), 1);
        assert_eq!(f.ground[0].vertices[0], [10.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_examples() {
        let spec = Category::VehicleSmall.spec();
        let out = pad_category(&[], &spec, [0.0; 3]);
        assert_eq!(out.len(), 18);
        assert!(out.iter().all(|p| !p.exists));

        let cars: Vec<_> = (0..20).map(|i| car(i + 1, 1.0 + i as f64, 0.0)).collect();
        let out = pad_category(&cars, &spec, [0.0; 3]);
        assert_eq!(out.len(), 18);
        assert!(out.iter().all(|p| p.exists));
        let ids: Vec<u32> = out.iter().map(|p| p.instance_id).collect();
        assert_eq!(ids, (1..=18).collect::<Vec<_>>());

        let out = pad_category(&cars[..18], &spec, [0.0; 3]);
        assert_eq!(out, cars[..18].to_vec());

        // idempotent
        let five = pad_category(&cars[..5], &spec, [0.0; 3]);
        assert_eq!(pad_category(&five, &spec, [0.0; 3]), five);
    }

    #[test]
    fn padded_layout_reports_padded() {
        let l = synth_scene(1, &SynthConfig::default()).unwrap();
        assert!(!l.is_padded());
        let p = l.padded([0.0; 3]);
        assert!(p.is_padded());
        assert_eq!(p.primitives().count(), TOTAL_QUERIES);
        assert_eq!(p.real_primitives().count(), l.real_primitives().count());
    }

    #[test]
    fn normalization_examples() {
        let r = FeatureRange {
            min: [0.0, -32.0, -2.0, 0.0, -1.0, 0.0, -1.0, -1.0, 0.0],
            max: [64.0, 32.0, 10.0, 5.0, 1.0, 5.0, 1.0, 1.0, 5.0],
        };
        let (f, n) = r.normalize(&r.min);
        assert_eq!(f, [0.0; 9]);
        assert_eq!(n, 0);
        let mid: [f64; 9] = std::array::from_fn(|d| (r.min[d] + r.max[d]) / 2.0);
        assert_eq!(r.normalize(&mid).0, [0.5; 9]);
        let mut over = r.max;
        over[0] = 100.0;
        let (f, n) = r.normalize(&over);
        assert_eq!((f[0], n), (1.0, 1));
    }

    #[test]
    fn normalization_round_trip_and_missing_stats() {
        let l = synth_scene(2, &SynthConfig::default()).unwrap();
        let stats = NormalizationStats::from_layouts(std::slice::from_ref(&l));
        let f = normalize_features(&l, &stats).unwrap();
        assert_eq!(f.clamped, 0);
        assert!(f
            .rows
            .iter()
            .all(|r| r.features.iter().all(|v| (0.0..=1.0).contains(v))));
        let back = denormalize_features(&f, &stats).unwrap();
        for (p, (center, chol)) in l.real_primitives().zip(back) {
            for (a, b) in p.center.iter().zip(center) {
                assert!((a - b).abs() < 1e-9);
            }
            for d in 0..6 {
                assert!((p.cholesky.0[d] - chol.0[d]).abs() < 1e-9);
            }
        }
        let mut partial = stats.clone();
        partial.categories.remove(&Category::Pole);
        assert!(matches!(
            normalize_features(&l, &partial),
            Err(Error::MissingStats(Category::Pole))
        ));
    }

    #[test]
    fn scene_label_examples() {
        let p25 = DensityThreshold {
            count: 5.0,
            volume: 100.0,
        };
        let p75 = DensityThreshold {
            count: 20.0,
            volume: 1000.0,
        };
        assert_eq!(compute_scene_label(&SceneLayout::empty(0), p25, p75), DensityLabel::Low);

        let tree = |id, size: f64| {
            ScenePrimitive::from_pose(
                id,
                Category::VegetationCuboid,
                [10.0, 10.0, 2.0],
                &Rotation3::identity(),
                &Scale3::new([size, size, size]).unwrap(),
            )
            .unwrap()
        };
        let mut l = SceneLayout::empty(0);
        l.objects
            .insert(Category::VegetationCuboid, (1..=25).map(|i| tree(i, 4.0)).collect());
        assert_eq!(compute_scene_label(&l, p25, p75), DensityLabel::High);

        // 2 primitives (below p25) but 2·1000 m³ (above p75)
        l.objects
            .insert(Category::VegetationCuboid, vec![tree(1, 10.0), tree(2, 10.0)]);
        assert_eq!(compute_scene_label(&l, p25, p75), DensityLabel::Medium);
    }

    #[test]
    fn ellipsoid_volume_uses_pi_over_six() {
        let e = ScenePrimitive::from_pose(
            1,
            Category::VegetationEllipsoid,
            [5.0, 5.0, 2.0],
            &Rotation3::identity(),
            &Scale3::new([2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert!((e.volume() - std::f64::consts::PI / 6.0 * 24.0).abs() < 1e-9);
    }

    #[test]
    fn edit_examples() {
        let l = synth_scene(4, &SynthConfig::default()).unwrap();
        let id = l.category(Category::VehicleSmall)[0].instance_id;
        let before = *l.find(id).unwrap();

        let moved = apply_edit(&l, id, Edit::Translate([1.0, 0.0, 0.0])).unwrap();
        let after = moved.find(id).unwrap();
        assert_eq!(after.cholesky, before.cholesky);
        assert_eq!(after.center[0], before.center[0] + 1.0);

        let scaled = apply_edit(&l, id, Edit::Scale([2.0; 3])).unwrap();
        let a = scaled.find(id).unwrap().decode().unwrap().scale.values();
        let b = before.decode().unwrap().scale.values();
        for j in 0..3 {
            assert!((a[j] - 2.0 * b[j]).abs() < 1e-9 * b[j]);
        }

        let spun = apply_edit(
            &l,
            id,
            Edit::Rotate {
                axis: [0.0, 0.0, 1.0],
                angle: std::f64::consts::TAU,
            },
        )
        .unwrap();
        let s0 = before.cholesky.scatter_unchecked();
        let s1 = spun.find(id).unwrap().cholesky.scatter_unchecked();
        assert!((s0 - s1).norm() < 1e-9);

        assert!(matches!(
            apply_edit(&l, 99_999, Edit::Translate([0.0; 3])),
            Err(Error::NotFound(99_999))
        ));
        assert!(matches!(
            apply_edit(&l, id, Edit::Scale([1.0, 0.0, 1.0])),
            Err(Error::InvalidEdit(_))
        ));
    }

    #[test]
    fn synth_examples() {
        let a = synth_scene(0, &SynthConfig::default()).unwrap();
        let b = synth_scene(0, &SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.category(Category::VehicleSmall).len(), 8);

        let mut cfg = SynthConfig::default();
        cfg.counts.insert(Category::VehicleSmall, 18);
        let c = synth_scene(0, &cfg).unwrap();
        assert_eq!(
            c.category(Category::VehicleSmall).iter().filter(|p| p.exists).count(),
            18
        );
        assert_eq!(filter_fov(&c), c);
        c.validate().unwrap();

        cfg.counts.insert(Category::VehicleSmall, 19);
        assert!(matches!(synth_scene(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn low_confidence_predictions_are_dropped() {
        let mut l = SceneLayout::empty(0);
        let mut a = car(1, 10.0, 0.0);
        a.confidence = Some(0.29);
        let mut b = car(2, 20.0, 0.0);
        b.confidence = Some(0.3);
        l.objects.insert(
            Category::VehicleSmall,
            vec![a, b, ScenePrimitive::pad(Category::VehicleSmall)],
        );
        let kept = discard_low_confidence(&l, EXISTENCE_THRESHOLD);
        let ids: Vec<u32> = kept.primitives().map(|p| p.instance_id).collect();
        assert_eq!(ids, vec![2]);
    }
}
