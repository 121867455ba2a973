//! Generation metrics: k-NN manifold precision/recall, Fréchet distance on
//! feature moments, reference-pose sampling, and a baseline featurizer.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::raster::SemanticMap;
use crate::scene::NUM_CLASSES;

/// `n` feature vectors of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::config(format!("{} values for {n}x{d} features", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("features must be finite"));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::config("feature rows have different lengths"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Distance from each point to its `k`-th nearest other point.
pub fn knn_radius(phi: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= phi.n {
        return Err(Error::config(format!("k = {k} needs 1 <= k < n = {}", phi.n)));
    }
    Ok((0..phi.n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..phi.n)
                .filter(|&j| j != i)
                .map(|j| dist(phi.row(i), phi.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

/// Fraction of `query` points inside at least one reference hypersphere.
fn coverage(query: &FeatureSet, reference: &FeatureSet, radii: &[f64]) -> f64 {
    let hits = (0..query.n)
        .into_par_iter()
        .filter(|&i| (0..reference.n).any(|j| dist(query.row(i), reference.row(j)) <= radii[j]))
        .count();
    hits as f64 / query.n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Precision: share of generated samples inside the real manifold; recall:
/// share of real samples inside the generated manifold.
pub fn precision_recall(real: &FeatureSet, generated: &FeatureSet, k: usize) -> Result<PrecisionRecall> {
    if real.d != generated.d {
        return Err(Error::config(format!(
            "feature dims differ: {} vs {}",
            real.d, generated.d
        )));
    }
    if real.n != generated.n {
        log::warn!("real and generated sets differ in size ({} vs {})", real.n, generated.n);
    }
    let r_real = knn_radius(real, k)?;
    let r_gen = knn_radius(generated, k)?;
    Ok(PrecisionRecall {
        precision: coverage(generated, real, &r_real),
        recall: coverage(real, generated, &r_gen),
    })
}

// ---------------------------------------------------------------------------
// Fréchet distance

/// Feature mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub const SYMMETRY_TOLERANCE: f64 = 1e-6;
pub const EIGEN_CLIP_TOLERANCE: f64 = 1e-8;

impl Moments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::InvalidMoments(format!(
                "mean has {d} entries but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance.
    pub fn from_features(phi: &FeatureSet) -> Result<Self> {
        if phi.n < 2 {
            return Err(Error::InvalidMoments("need at least two samples".into()));
        }
        let x = DMatrix::from_row_iterator(phi.n, phi.d, phi.data.iter().map(|v| *v as f64));
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(phi.n, phi.d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (phi.n - 1) as f64;
        Self::new(mean, cov)
    }

    fn check_symmetric(&self) -> Result<()> {
        let scale = 1.0 + self.cov.amax();
        let asym = (&self.cov - self.cov.transpose()).amax();
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::InvalidMoments(format!("covariance asymmetric by {asym:e}")));
        }
        Ok(())
    }
}

/// Eigenvalues of a symmetric matrix, with small negatives clipped to zero
/// and larger ones rejected.
fn clipped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let scale = 1.0 + sym.amax();
    let mut e = sym.symmetric_eigen();
    for v in e.eigenvalues.iter_mut() {
        if *v < -EIGEN_CLIP_TOLERANCE * scale {
            return Err(Error::InvalidMoments(format!("{what} has eigenvalue {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2(Σ1Σ2)^½)`, with the trace of the square
/// root taken from the eigenvalues of `Σ1^½ Σ2 Σ1^½`.
pub fn frechet_distance(a: &Moments, b: &Moments) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::InvalidMoments(format!(
            "dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    a.check_symmetric()?;
    b.check_symmetric()?;
    let e1 = clipped_eigen(&a.cov, "first covariance")?;
    let sqrt1 = &e1.eigenvectors * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt)) * e1.eigenvectors.transpose();
    clipped_eigen(&b.cov, "second covariance")?;
    let inner = &sqrt1 * &b.cov * &sqrt1;
    let tr_sqrt: f64 = clipped_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

// ---------------------------------------------------------------------------
// Reference sampling

/// Ordered BEV poses along a recorded drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrack {
    pub poses: Vec<(u64, [f64; 2])>,
}

fn pose_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Keeps a pose when it is at least `d_min` from the previously kept pose.
pub fn sample_refs_threshold(track: &PoseTrack, d_min: f64) -> Result<Vec<u64>> {
    if !(d_min > 0.0) {
        return Err(Error::config(format!("minimum distance {d_min} must be positive")));
    }
    let mut kept: Vec<(u64, [f64; 2])> = Vec::new();
    for &(id, p) in &track.poses {
        if kept.last().is_none_or(|&(_, q)| pose_dist(p, q) >= d_min) {
            kept.push((id, p));
        }
    }
    Ok(kept.into_iter().map(|(id, _)| id).collect())
}

/// Farthest-point sampling seeded with the first pose; ties go to the
/// smallest pose id.
pub fn sample_refs_fps(track: &PoseTrack, n: usize) -> Result<Vec<u64>> {
    let len = track.poses.len();
    if n > len {
        return Err(Error::config(format!("cannot pick {n} poses from {len}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut selected = vec![0usize];
    let mut min_d: Vec<f64> = track
        .poses
        .iter()
        .map(|(_, p)| pose_dist(*p, track.poses[0].1))
        .collect();
    let mut chosen = vec![false; len];
    chosen[0] = true;
    while selected.len() < n {
        let mut best: Option<usize> = None;
        for i in (0..len).filter(|&i| !chosen[i]) {
            best = match best {
                None => Some(i),
                Some(b) if min_d[i] > min_d[b] || (min_d[i] == min_d[b] && track.poses[i].0 < track.poses[b].0) => {
                    Some(i)
                }
                keep => keep,
            };
        }
        let b = best.expect("fewer chosen than poses");
        chosen[b] = true;
        selected.push(b);
        let pb = track.poses[b].1;
        for (i, m) in min_d.iter_mut().enumerate() {
            *m = m.min(pose_dist(track.poses[i].1, pb));
        }
    }
    Ok(selected.into_iter().map(|i| track.poses[i].0).collect())
}

// ---------------------------------------------------------------------------
// Featurizer

/// Blocks per side of the pooled semantic map.
pub const FEATURE_BLOCKS: usize = 8;
pub const FEATURE_DIM: usize = FEATURE_BLOCKS * FEATURE_BLOCKS * NUM_CLASSES as usize;

/// Per-block class frequencies (labels 1..=16) over an 8×8 partition of the
/// map; empty pixels count toward the block size only.
pub fn featurize_map(map: &SemanticMap) -> Vec<f32> {
    let (nx, ny) = (map.spec.nx, map.spec.ny);
    let classes = NUM_CLASSES as usize;
    let mut out = vec![0f32; FEATURE_DIM];
    let mut sizes = vec![0u32; FEATURE_BLOCKS * FEATURE_BLOCKS];
    for iy in 0..ny {
        let by = iy * FEATURE_BLOCKS / ny;
        for ix in 0..nx {
            let b = by * FEATURE_BLOCKS + ix * FEATURE_BLOCKS / nx;
            sizes[b] += 1;
            let l = map.labels[iy * nx + ix] as usize;
            if l > 0 {
                out[b * classes + l - 1] += 1.0;
            }
        }
    }
    for (b, &s) in sizes.iter().enumerate() {
        if s > 0 {
            for v in &mut out[b * classes..(b + 1) * classes] {
                *v /= s as f32;
            }
        }
    }
    out
}

const FEATURE_MAGIC: &[u8; 8] = b"PSFEATUR";
const MOMENTS_MAGIC: &[u8; 8] = b"PSMOMENT";
pub const FEATURE_VERSION: u32 = 1;

/// Header (magic, version, `n`, `d` as u64) then `n·d` f32 values.
pub fn features_to_bytes(f: &FeatureSet) -> Vec<u8> {
    let mut w = Writer::with_header(FEATURE_MAGIC, FEATURE_VERSION);
    w.u64(f.n as u64);
    w.u64(f.d as u64);
    for v in &f.data {
        w.f32(*v);
    }
    w.buf
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes, "feature file");
    r.header(FEATURE_MAGIC, FEATURE_VERSION)?;
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let len = n
        .checked_mul(d)
        .ok_or_else(|| Error::format("feature file", "size overflow"))?;
    let data = r.f32s(len)?;
    r.finish()?;
    FeatureSet::new(n, d, data)
}

/// Header (magic, version, `d` as u64) then μ and row-major Σ as f32.
pub fn moments_to_bytes(m: &Moments) -> Vec<u8> {
    let d = m.mean.len();
    let mut w = Writer::with_header(MOMENTS_MAGIC, FEATURE_VERSION);
    w.u64(d as u64);
    for v in m.mean.iter() {
        w.f32(*v as f32);
    }
    for i in 0..d {
        for j in 0..d {
            w.f32(m.cov[(i, j)] as f32);
        }
    }
    w.buf
}

pub fn moments_from_bytes(bytes: &[u8]) -> Result<Moments> {
    let mut r = Reader::new(bytes, "moments file");
    r.header(MOMENTS_MAGIC, FEATURE_VERSION)?;
    let d = r.u64()? as usize;
    let mean = r.f32s(d)?;
    let cov = r.f32s(
        d.checked_mul(d)
            .ok_or_else(|| Error::format("moments file", "size overflow"))?,
    )?;
    r.finish()?;
    Moments::new(
        DVector::from_iterator(d, mean.into_iter().map(f64::from)),
        DMatrix::from_row_iterator(d, d, cov.into_iter().map(f64::from)),
    )
}

pub fn save_features(f: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &features_to_bytes(f))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    features_from_bytes(&read_file(path.as_ref())?)
}

pub fn save_moments(m: &Moments, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &moments_to_bytes(m))
}

pub fn load_moments(path: impl AsRef<Path>) -> Result<Moments> {
    moments_from_bytes(&read_file(path.as_ref())?)
}
