//! Oriented 3D box IoU and AP3D over primitive scenes.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::Rotation3;
use crate::scene::{Category, SceneLayout, ScenePrimitive};

/// Samples per axis of the stratified Monte Carlo estimator (47³ ≥ 10⁵).
pub const MC_STRATA: usize = 47;
pub const MC_SEED: u64 = 0x10_0303;
const AXIS_TOLERANCE: f64 = 1e-9;

/// Oriented box: center, rotation and full edge lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3 {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub extents: [f64; 3],
}

impl OrientedBox3 {
    pub fn new(center: [f64; 3], rotation: &Rotation3, extents: [f64; 3]) -> Self {
        Self {
            center: Vector3::from(center),
            rotation: *rotation.matrix(),
            extents,
        }
    }

    pub fn axis_aligned(center: [f64; 3], extents: [f64; 3]) -> Self {
        Self::new(center, &Rotation3::identity(), extents)
    }

    /// Box of a real primitive, from its decoded pose.
    pub fn from_primitive(p: &ScenePrimitive) -> Result<Self> {
        let d = p.decode()?;
        Ok(Self::new(p.center, &d.rotation, d.scale.values()))
    }

    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }

    /// World-axis half extents of the bounding AABB.
    pub fn half_aabb(&self) -> [f64; 3] {
        std::array::from_fn(|i| {
            (0..3)
                .map(|j| self.rotation[(i, j)].abs() * self.extents[j] / 2.0)
                .sum()
        })
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let u = self.rotation.transpose() * (p - self.center);
        (0..3).all(|j| u[j].abs() <= self.extents[j] / 2.0)
    }

    /// True when every box axis is a world axis up to sign.
    fn is_axis_aligned(&self) -> bool {
        (0..3).all(|j| {
            let col = self.rotation.column(j);
            let big = col.iter().filter(|v| (v.abs() - 1.0).abs() <= AXIS_TOLERANCE).count();
            let small = col.iter().filter(|v| v.abs() <= AXIS_TOLERANCE).count();
            big == 1 && small == 2
        })
    }

    fn corners(&self) -> [Vector3<f64>; 8] {
        std::array::from_fn(|k| {
            let s = [
                (k & 1) as f64 - 0.5,
                ((k >> 1) & 1) as f64 - 0.5,
                ((k >> 2) & 1) as f64 - 0.5,
            ];
            self.center
                + self.rotation * Vector3::new(s[0] * self.extents[0], s[1] * self.extents[1], s[2] * self.extents[2])
        })
    }

    fn faces(&self) -> Vec<Vec<Vector3<f64>>> {
        let c = self.corners();
        [
            [0, 2, 6, 4],
            [1, 5, 7, 3],
            [0, 4, 5, 1],
            [2, 3, 7, 6],
            [0, 1, 3, 2],
            [4, 6, 7, 5],
        ]
        .iter()
        .map(|f| f.iter().map(|&i| c[i]).collect())
        .collect()
    }

    /// Half-spaces `n·x ≤ d` bounding the box.
    fn half_spaces(&self) -> [(Vector3<f64>, f64); 6] {
        std::array::from_fn(|k| {
            let axis = k / 2;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let n = sign * self.rotation.column(axis).into_owned();
            (n, n.dot(&self.center) + self.extents[axis] / 2.0)
        })
    }
}

fn aabbs_disjoint(a: &OrientedBox3, b: &OrientedBox3) -> bool {
    let (ha, hb) = (a.half_aabb(), b.half_aabb());
    (0..3).any(|i| (a.center[i] - b.center[i]).abs() > ha[i] + hb[i])
}

/// Intersection-over-union of two oriented boxes.
///
/// Axis-aligned pairs use interval arithmetic; other pairs clip one box by
/// the six half-spaces of the other and integrate the resulting polytope.
pub fn iou3d(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    if aabbs_disjoint(a, b) {
        return 0.0;
    }
    let inter = if a.is_axis_aligned() && b.is_axis_aligned() {
        let (ha, hb) = (a.half_aabb(), b.half_aabb());
        (0..3)
            .map(|i| {
                let lo = (a.center[i] - ha[i]).max(b.center[i] - hb[i]);
                let hi = (a.center[i] + ha[i]).min(b.center[i] + hb[i]);
                (hi - lo).max(0.0)
            })
            .product()
    } else {
        intersection_volume(a, b)
    };
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn newell(poly: &[Vector3<f64>]) -> Vector3<f64> {
    let mut n = Vector3::zeros();
    for i in 0..poly.len() {
        n += poly[i].cross(&poly[(i + 1) % poly.len()]);
    }
    n
}

fn intersection_volume(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    let scale =
        a.extents.iter().chain(&b.extents).fold(0.0f64, |m, v| m.max(*v)) + a.center.amax().max(b.center.amax());
    let eps = 1e-12 * (1.0 + scale);
    let mut faces = a.faces();
    for (n, d) in b.half_spaces() {
        let mut next = Vec::with_capacity(faces.len() + 1);
        let mut cap: Vec<Vector3<f64>> = Vec::new();
        let mut face_on_plane = false;
        for face in &faces {
            let s: Vec<f64> = face.iter().map(|p| n.dot(p) - d).collect();
            if s.iter().all(|v| v.abs() <= eps) {
                face_on_plane = true;
            }
            let mut out = Vec::with_capacity(face.len() + 2);
            for i in 0..face.len() {
                let j = (i + 1) % face.len();
                let (p, q, sp, sq) = (face[i], face[j], s[i], s[j]);
                if sp <= eps {
                    out.push(p);
                    if sp.abs() <= eps {
                        cap.push(p);
                    }
                }
                if (sp < -eps && sq > eps) || (sp > eps && sq < -eps) {
                    let x = p + (q - p) * (sp / (sp - sq));
                    out.push(x);
                    cap.push(x);
                }
            }
            if out.len() >= 3 {
                next.push(out);
            }
        }
        if !face_on_plane {
            let mut pts: Vec<Vector3<f64>> = Vec::new();
            for p in cap {
                if pts.iter().all(|q| (q - p).norm() > 1e3 * eps) {
                    pts.push(p);
                }
            }
            if pts.len() >= 3 {
                let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
                let u = (pts[0] - c).normalize();
                let w = n.normalize().cross(&u);
                pts.sort_by(|p, q| {
                    let ap = (p - c).dot(&w).atan2((p - c).dot(&u));
                    let aq = (q - c).dot(&w).atan2((q - c).dot(&u));
                    ap.total_cmp(&aq)
                });
                next.push(pts);
            }
        }
        faces = next;
        if faces.is_empty() {
            return 0.0;
        }
    }
    let verts: Vec<&Vector3<f64>> = faces.iter().flatten().collect();
    let reference = verts.iter().copied().sum::<Vector3<f64>>() / verts.len() as f64;
    faces
        .iter()
        .map(|f| {
            let nn = newell(f);
            let area2 = nn.norm();
            if area2 == 0.0 {
                return 0.0;
            }
            let h = (nn / area2).dot(&(f[0] - reference)).abs();
            area2 / 2.0 * h / 3.0
        })
        .sum()
}

/// Jittered-stratified Monte Carlo IoU over the union's bounding box with a
/// fixed seed.
pub fn iou3d_monte_carlo(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    let (ha, hb) = (a.half_aabb(), b.half_aabb());
    let lo: [f64; 3] = std::array::from_fn(|i| (a.center[i] - ha[i]).min(b.center[i] - hb[i]));
    let hi: [f64; 3] = std::array::from_fn(|i| (a.center[i] + ha[i]).max(b.center[i] + hb[i]));
    let m = MC_STRATA;
    let mut rng = ChaCha8Rng::seed_from_u64(MC_SEED);
    let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
    for k in 0..m * m * m {
        let cell = [k % m, (k / m) % m, k / (m * m)];
        let p = Vector3::from_fn(|i, _| {
            let t = (cell[i] as f64 + rng.random::<f64>()) / m as f64;
            lo[i] + t * (hi[i] - lo[i])
        });
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        in_a += ia as u64;
        in_b += ib as u64;
        both += (ia && ib) as u64;
    }
    let union = in_a + in_b - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// Average precision

/// IoU thresholds 0.05, 0.10, …, 0.50.
pub fn ap_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (k + 1) as f64 / 20.0)
}

/// 101-point interpolated average precision from detections already sorted
/// by descending confidence.
pub fn interpolated_ap(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (i, &t) in is_tp.iter().enumerate() {
        tp += t as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < level - 1e-12 {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

struct CategoryPairs {
    /// Per scene: prediction scores and the IoU matrix `[pred][gt]`.
    scenes: Vec<(Vec<f64>, Vec<Vec<f64>>)>,
    num_gt: usize,
}

fn boxes(layout: &SceneLayout, c: Category) -> Result<Vec<(OrientedBox3, f64)>> {
    layout
        .category(c)
        .iter()
        .filter(|p| p.exists)
        .map(|p| Ok((OrientedBox3::from_primitive(p)?, p.probability())))
        .collect()
}

fn category_pairs(gt: &[SceneLayout], pred: &[SceneLayout], c: Category) -> Result<CategoryPairs> {
    let scenes = gt
        .par_iter()
        .zip(pred)
        .map(|(g, p)| {
            let gb = boxes(g, c)?;
            let pb = boxes(p, c)?;
            let ious = pb
                .iter()
                .map(|(b, _)| gb.iter().map(|(a, _)| iou3d(a, b)).collect())
                .collect();
            Ok((pb.iter().map(|(_, s)| *s).collect(), ious))
        })
        .collect::<Result<Vec<_>>>()?;
    let num_gt = gt
        .iter()
        .map(|g| g.category(c).iter().filter(|p| p.exists).count())
        .sum();
    Ok(CategoryPairs { scenes, num_gt })
}

fn ap_from_pairs(pairs: &CategoryPairs, tau: f64) -> f64 {
    let mut order: Vec<(usize, usize)> = pairs
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(s, (scores, _))| (0..scores.len()).map(move |i| (s, i)))
        .collect();
    // Stable: equal scores keep scene/prediction order.
    order.sort_by(|x, y| pairs.scenes[y.0].0[y.1].total_cmp(&pairs.scenes[x.0].0[x.1]));
    let mut taken: Vec<Vec<bool>> = pairs
        .scenes
        .iter()
        .map(|(_, m)| vec![false; m.first().map_or(0, Vec::len)])
        .collect();
    let mut is_tp = Vec::with_capacity(order.len());
    for (s, i) in order {
        let row = &pairs.scenes[s].1[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, &v) in row.iter().enumerate() {
            if !taken[s][j] && v >= tau && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[s][j] = true;
        }
        is_tp.push(best.is_some());
    }
    interpolated_ap(&is_tp, pairs.num_gt)
}

/// AP of one category at one threshold, pooling detections across scenes.
/// `gt[i]` pairs with `pred[i]`; prediction scores are existence
/// probabilities.
pub fn ap3d(gt: &[SceneLayout], pred: &[SceneLayout], category: Category, tau: f64) -> Result<f64> {
    check_lengths(gt, pred)?;
    Ok(ap_from_pairs(&category_pairs(gt, pred, category)?, tau))
}

fn check_lengths(gt: &[SceneLayout], pred: &[SceneLayout]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(crate::error::Error::config(format!(
            "{} ground-truth scenes but {} predicted scenes",
            gt.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// AP3D summary, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub thresholds: Vec<f64>,
    /// AP per threshold for every evaluated category.
    pub per_category: BTreeMap<Category, Vec<f64>>,
    /// Category-mean AP per threshold.
    pub per_threshold: Vec<f64>,
    pub mean: f64,
    pub ap25: f64,
    pub ap50: f64,
}

/// Mean AP3D over thresholds 0.05…0.50 and over every category except
/// ellipsoidal vegetation that has ground truth in the corpus.
pub fn ap3d_mean(gt: &[SceneLayout], pred: &[SceneLayout]) -> Result<ApResult> {
    check_lengths(gt, pred)?;
    let thresholds = ap_thresholds();
    let mut per_category = BTreeMap::new();
    for c in Category::ALL {
        if c == Category::VegetationEllipsoid {
            continue;
        }
        let pairs = category_pairs(gt, pred, c)?;
        if pairs.num_gt == 0 {
            continue;
        }
        per_category.insert(
            c,
            thresholds
                .iter()
                .map(|&t| 100.0 * ap_from_pairs(&pairs, t))
                .collect::<Vec<_>>(),
        );
    }
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|k| {
            if per_category.is_empty() {
                0.0
            } else {
                per_category.values().map(|v| v[k]).sum::<f64>() / per_category.len() as f64
            }
        })
        .collect();
    Ok(ApResult {
        mean: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap25: per_threshold[4],
        ap50: per_threshold[9],
        thresholds: thresholds.to_vec(),
        per_category,
        per_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Scale3;

    #[test]
    fn iou_examples() {
        let a = OrientedBox3::axis_aligned([0.0; 3], [1.0; 3]);
        assert_eq!(iou3d(&a, &a), 1.0);
        let far = OrientedBox3::axis_aligned([5.0, 0.0, 0.0], [1.0; 3]);
        assert_eq!(iou3d(&a, &far), 0.0);
        let half = OrientedBox3::axis_aligned([0.5, 0.0, 0.0], [1.0; 3]);
        assert!((iou3d(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou3d_monte_carlo(&a, &half) - 1.0 / 3.0).abs() < 0.005);
    }

    #[test]
    fn rotated_pair_agrees_with_monte_carlo() {
        let a = OrientedBox3::new([0.0; 3], &Rotation3::from_yaw(0.4), [2.0, 1.0, 1.5]);
        let r = Rotation3::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.7).unwrap();
        let b = OrientedBox3::new([0.4, 0.2, -0.1], &r, [1.5, 1.2, 1.0]);
        let exact = iou3d(&a, &b);
        let mc = iou3d_monte_carlo(&a, &b);
        assert!((exact - mc).abs() < 0.005, "{exact} vs {mc}");
        assert!((iou3d(&b, &a) - exact).abs() < 1e-9);
    }

    #[test]
    fn yaw_rotated_square_overlap() {
        // Unit cube vs the same cube spun 45° about z: the BEV overlap is a
        // regular octagon of area 2(√2 − 1).
        let a = OrientedBox3::axis_aligned([0.0; 3], [1.0; 3]);
        let b = OrientedBox3::new([0.0; 3], &Rotation3::from_yaw(std::f64::consts::FRAC_PI_4), [1.0; 3]);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        let want = inter / (2.0 - inter);
        assert!((iou3d(&a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_ap() {
        // FP at 0.95 then TP at 0.9 with 2 ground truths: precision 0.5 up
        // to recall 0.5, i.e. 51 of the 101 recall levels.
        assert!((interpolated_ap(&[false, true], 2) - 51.0 * 0.5 / 101.0).abs() < 1e-15);
        assert_eq!(interpolated_ap(&[], 3), 0.0);
        assert_eq!(interpolated_ap(&[true, true], 2), 1.0);
    }

    fn car(id: u32, x: f64, conf: Option<f64>) -> ScenePrimitive {
        let mut p = ScenePrimitive::from_pose(
            id,
            Category::VehicleSmall,
            [x, 0.0, 0.8],
            &Rotation3::from_yaw(0.3),
            &Scale3::new([4.0, 1.8, 1.6]).unwrap(),
        )
        .unwrap();
        p.confidence = conf;
        p
    }

    #[test]
    fn ap_examples() {
        let mut g = SceneLayout::empty(0);
        g.objects
            .insert(Category::VehicleSmall, vec![car(1, 10.0, None), car(2, 30.0, None)]);
        let mut p = g.clone();
        for c in p.objects.get_mut(&Category::VehicleSmall).unwrap() {
            c.confidence = Some(1.0);
        }
        let r = ap3d_mean(std::slice::from_ref(&g), std::slice::from_ref(&p)).unwrap();
        assert_eq!(r.mean, 100.0);
        assert_eq!(r.per_category.len(), 1);

        let empty = SceneLayout::empty(0);
        let r = ap3d_mean(std::slice::from_ref(&g), std::slice::from_ref(&empty)).unwrap();
        assert_eq!(r.mean, 0.0);

        let mut mixed = SceneLayout::empty(0);
        mixed.objects.insert(
            Category::VehicleSmall,
            vec![car(1, 10.0, Some(0.9)), car(3, 50.0, Some(0.95))],
        );
        let ap = ap3d(&[g], &[mixed], Category::VehicleSmall, 0.5).unwrap();
        assert!((ap - 51.0 * 0.5 / 101.0).abs() < 1e-12);
    }
}
