//! Scatter-matrix pose encoding for object primitives.
//!
//! A primitive with orthonormal axes `V = [v1 v2 v3]` and scales
//! `λ = (λ1, λ2, λ3)` is summarised by the symmetric positive-definite
//! scatter matrix `S = V diag(λ) Vᵀ = Σ λj vj vjᵀ`. The six non-zero entries
//! of its Cholesky factor `S = L Lᵀ` form a code that does not change when
//! any axis is negated, which is what makes it usable as a regression
//! target. Decoding goes back through an eigen-decomposition of `L Lᵀ`.
//!
//! Scales are full edge lengths of the unit-cube image (a primitive with
//! `λ = (2, 1, 1)` spans 2 m along its first axis). Ellipsoids use the same
//! convention for their diameters.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen3;

/// Tolerance on column dot products and norms for a rotation to count as
/// orthonormal.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;
/// Relative eigenvalue gap below which a decoded pose is flagged as
/// near-degenerate (axes inside the shared eigenspace are arbitrary).
pub const DEGENERATE_GAP: f64 = 1e-9;

/// Orthonormal 3×3 basis; columns are the primitive's principal axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    m: Matrix3<f64>,
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Builds a basis from a matrix whose columns are the axes. Fails when
    /// the columns are not orthonormal within [`ORTHONORMAL_TOLERANCE`].
    /// Both proper (det +1) and improper (det −1) bases are accepted.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        for i in 0..3 {
            for j in i..3 {
                let dot = m.column(i).dot(&m.column(j));
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHONORMAL_TOLERANCE {
                    return Err(Error::InvalidRotation(format!(
                        "columns {i},{j} have dot product {dot}"
                    )));
                }
            }
        }
        Ok(Self { m })
    }

    pub fn from_columns(cols: [Vector3<f64>; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_columns(&cols))
    }

    /// Right-handed rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !n.is_finite() || !angle.is_finite() {
            return Err(Error::InvalidRotation(format!(
                "axis {axis:?} / angle {angle} cannot define a rotation"
            )));
        }
        let unit = nalgebra::Unit::new_normalize(axis);
        Ok(Self {
            m: *nalgebra::Rotation3::from_axis_angle(&unit, angle).matrix(),
        })
    }

    /// Rotation about +z.
    pub fn from_yaw(yaw: f64) -> Self {
        Self {
            m: *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
        }
    }

    /// Haar-uniform random proper rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // Shoemake's method: a uniformly distributed unit quaternion.
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let tau = std::f64::consts::TAU;
        let q = nalgebra::Quaternion::new(
            u1.sqrt() * (tau * u3).cos(),
            (1.0 - u1).sqrt() * (tau * u2).sin(),
            (1.0 - u1).sqrt() * (tau * u2).cos(),
            u1.sqrt() * (tau * u3).sin(),
        );
        let uq = nalgebra::UnitQuaternion::from_quaternion(q);
        Self {
            m: *uq.to_rotation_matrix().matrix(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn column(&self, j: usize) -> Vector3<f64> {
        self.m.column(j).into_owned()
    }

    pub fn determinant(&self) -> f64 {
        self.m.determinant()
    }

    /// Returns a copy with the flagged columns negated.
    pub fn with_flipped_columns(&self, flips: [bool; 3]) -> Self {
        let mut m = self.m;
        for (j, &flip) in flips.iter().enumerate() {
            if flip {
                m.set_column(j, &(-m.column(j)));
            }
        }
        Self { m }
    }

    /// `other ∘ self`: applies `self` first, then `other`.
    pub fn then(&self, other: &Rotation3) -> Rotation3 {
        Rotation3 { m: other.m * self.m }
    }
}

/// Positive principal-axis scales in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale3([f64; 3]);

impl Scale3 {
    pub fn new(values: [f64; 3]) -> Result<Self> {
        if values.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self(values))
        } else {
            Err(Error::InvalidScale(format!("{values:?} must be finite and > 0")))
        }
    }

    pub fn values(&self) -> [f64; 3] {
        self.0
    }

    pub fn product(&self) -> f64 {
        self.0[0] * self.0[1] * self.0[2]
    }
}

/// Symmetric positive-definite `V diag(λ) Vᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterMatrix(Matrix3<f64>);

impl ScatterMatrix {
    /// Wraps a matrix after checking symmetry (1e-9, relative to its norm)
    /// and positive-definiteness.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let scale = m.norm().max(1.0);
        for i in 0..3 {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidCholesky(format!(
                        "scatter matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        cholesky_factor(&m)?;
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Frobenius distance relative to `self`'s norm.
    pub fn relative_distance(&self, other: &ScatterMatrix) -> f64 {
        (self.0 - other.0).norm() / self.0.norm()
    }
}

/// Non-zero entries of the lower-triangular Cholesky factor, row-major:
/// `(l11, l21, l22, l31, l32, l33)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CholeskyParams(pub [f64; 6]);

impl CholeskyParams {
    /// All-zero code used by padding entries. Not decodable.
    pub const ZERO: CholeskyParams = CholeskyParams([0.0; 6]);

    /// Checked constructor: diagonal entries must be finite and > 0.
    pub fn new(values: [f64; 6]) -> Result<Self> {
        let c = Self(values);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCholesky("non-finite entry".into()));
        }
        for d in self.diagonal() {
            if !(d > 0.0) {
                return Err(Error::InvalidCholesky(format!("diagonal entry {d} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> [f64; 6] {
        self.0
    }

    pub fn diagonal(&self) -> [f64; 3] {
        [self.0[0], self.0[2], self.0[5]]
    }

    pub fn lower(&self) -> Matrix3<f64> {
        let c = &self.0;
        Matrix3::new(c[0], 0.0, 0.0, c[1], c[2], 0.0, c[3], c[4], c[5])
    }

    /// `L Lᵀ`, without validation.
    pub fn scatter_unchecked(&self) -> Matrix3<f64> {
        let l = self.lower();
        l * l.transpose()
    }

    /// `det(L Lᵀ) = (l11 l22 l33)²`, which equals `λ1 λ2 λ3`.
    pub fn scale_product(&self) -> f64 {
        let d = self.diagonal();
        (d[0] * d[1] * d[2]).powi(2)
    }
}

/// Result of decoding a Cholesky code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedPose {
    pub rotation: Rotation3,
    /// Eigenvalues in descending order.
    pub scale: Scale3,
    /// Two eigenvalues are within [`DEGENERATE_GAP`] of each other.
    pub near_degenerate: bool,
}

/// 4×4 homogeneous transform `[R diag(λ) | t; 0 0 0 1]` mapping the unit,
/// zero-centered cube (or sphere of diameter 1) onto the primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform4(Matrix4<f64>);

impl Transform4 {
    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = self.0 * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(h.x, h.y, h.z)
    }

    /// Linear part `R diag(λ)`.
    pub fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// Corners of the unit cube `[-0.5, 0.5]³`, x fastest.
pub fn unit_cube_corners() -> [Vector3<f64>; 8] {
    let mut out = [Vector3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        *c = Vector3::new(
            if i & 1 == 0 { -0.5 } else { 0.5 },
            if i & 2 == 0 { -0.5 } else { 0.5 },
            if i & 4 == 0 { -0.5 } else { 0.5 },
        );
    }
    out
}

/// `S = Σ λj vj vjᵀ`.
///
/// Each entry is accumulated as `(λj vj[i]) vj[k]` in a fixed order and the
/// lower triangle is mirrored from the upper one, so negating any column
/// reproduces the result bit for bit and the output is exactly symmetric.
pub fn scatter_from_pose(rot: &Rotation3, scale: &Scale3) -> Result<ScatterMatrix> {
    let m = rot.matrix();
    // Rotation3 can only be built orthonormal, but re-check since this is the
    // public entry point of the encoder.
    Rotation3::from_matrix(*m)?;
    Ok(ScatterMatrix(scatter_raw(m, &scale.values())))
}

fn scatter_raw(m: &Matrix3<f64>, lambda: &[f64; 3]) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for i in 0..3 {
        for k in i..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += (lambda[j] * m[(i, j)]) * m[(k, j)];
            }
            s[(i, k)] = acc;
            s[(k, i)] = acc;
        }
    }
    s
}

/// Scatter matrix after negating the flagged columns of `rot`.
pub fn scatter_sign_flip_check(rot: &Rotation3, scale: &Scale3, flips: [bool; 3]) -> Result<ScatterMatrix> {
    scatter_from_pose(&rot.with_flipped_columns(flips), scale)
}

#[allow(clippy::needless_range_loop)]
fn cholesky_factor(s: &Matrix3<f64>) -> Result<[f64; 6]> {
    let mut l = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut sum = s[(i, j)];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: sum });
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok([l[0][0], l[1][0], l[1][1], l[2][0], l[2][1], l[2][2]])
}

/// Cholesky factorisation `S = L Lᵀ`; returns the six lower-triangular
/// entries.
pub fn cholesky_encode(s: &ScatterMatrix) -> Result<CholeskyParams> {
    cholesky_factor(&s.0).map(CholeskyParams)
}

/// Encodes a pose directly.
pub fn encode_pose(rot: &Rotation3, scale: &Scale3) -> Result<CholeskyParams> {
    cholesky_encode(&scatter_from_pose(rot, scale)?)
}

/// Sorts eigenpairs by descending eigenvalue (stable on ties), makes each
/// column's largest-magnitude component non-negative, then negates the third
/// column if that is needed for det = +1.
pub fn canonicalize_rotation(eigvecs: [Vector3<f64>; 3], eigvals: [f64; 3]) -> (Rotation3, [f64; 3]) {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]));

    let mut cols = [Vector3::zeros(); 3];
    let mut vals = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eigvecs[src];
        let mut lead = 0;
        for i in 1..3 {
            if v[i].abs() > v[lead].abs() {
                lead = i;
            }
        }
        if v[lead] < 0.0 {
            v = -v;
        }
        cols[dst] = v;
        vals[dst] = eigvals[src];
    }
    let mut m = Matrix3::from_columns(&cols);
    if m.determinant() < 0.0 {
        m.set_column(2, &(-m.column(2)));
    }
    (Rotation3 { m }, vals)
}

/// Recovers `(R, λ)` from a Cholesky code via the eigen-decomposition of
/// `L Lᵀ`. When eigenvalues repeat, any orthonormal basis of the shared
/// eigenspace is returned; the scatter matrix (and hence the primitive's
/// point set) is reproduced either way.
pub fn cholesky_decode(c: &CholeskyParams) -> Result<DecodedPose> {
    c.validate()?;
    let s = c.scatter_unchecked();
    let eig = symmetric_eigen3(&s);
    let (rotation, values) = canonicalize_rotation(eig.vectors, eig.values);
    let scale = Scale3::new(values)?;
    let top = values[0];
    let near_degenerate =
        (values[0] - values[1]) <= DEGENERATE_GAP * top || (values[1] - values[2]) <= DEGENERATE_GAP * top;
    Ok(DecodedPose {
        rotation,
        scale,
        near_degenerate,
    })
}

/// `T = [R diag(λ) | t; 0ᵀ 1]`.
pub fn build_transform(rot: &Rotation3, scale: &Scale3, center: Vector3<f64>) -> Transform4 {
    let lin = rot.matrix() * Matrix3::from_diagonal(&Vector3::from(scale.values()));
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&lin);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&center);
    Transform4(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn diag(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(a, b, c))
    }

    #[test]
    fn scatter_examples() {
        let id = Rotation3::identity();
        let s = scatter_from_pose(&id, &Scale3::new([1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(*s.matrix(), Matrix3::identity());
        let s = scatter_from_pose(&id, &Scale3::new([2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(*s.matrix(), diag(2.0, 3.0, 4.0));

        // 90° yaw sends the first axis to +y, so λ1 = 2 lands on the yy entry.
        let yaw = Rotation3::from_yaw(FRAC_PI_2);
        let s = scatter_from_pose(&yaw, &Scale3::new([2.0, 1.0, 1.0]).unwrap()).unwrap();
        assert!((s.matrix() - diag(1.0, 2.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(Rotation3::from_matrix(m), Err(Error::InvalidRotation(_))));
    }

    #[test]
    fn sign_flips_are_bitwise_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rot = Rotation3::random(&mut rng);
        let scale = Scale3::new([3.0, 1.5, 0.25]).unwrap();
        let base = scatter_from_pose(&rot, &scale).unwrap();
        for flips in [[true, false, false], [false, true, false], [true, true, true]] {
            assert_eq!(scatter_sign_flip_check(&rot, &scale, flips).unwrap(), base);
        }
    }

    #[test]
    fn encode_examples() {
        let c = cholesky_encode(&ScatterMatrix::new(Matrix3::identity()).unwrap()).unwrap();
        assert_eq!(c.values(), [1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let c = cholesky_encode(&ScatterMatrix::new(diag(4.0, 9.0, 16.0)).unwrap()).unwrap();
        assert_eq!(c.values(), [2.0, 0.0, 3.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn encode_rejects_indefinite() {
        // Symmetric but indefinite: eigenvalues 3 and -1 in the top block.
        let m = Matrix3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            ScatterMatrix::new(m),
            Err(Error::NotPositiveDefinite { row: 1, .. })
        ));
    }

    #[test]
    fn dense_round_trip_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rot = Rotation3::random(&mut rng);
        let s = scatter_from_pose(&rot, &Scale3::new([5.0, 2.0, 1.0]).unwrap()).unwrap();
        let c = cholesky_encode(&s).unwrap();
        let l = c.lower();
        assert!(((l * l.transpose()) - s.matrix()).norm() < 1e-9);
        assert!(c.diagonal().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn decode_examples() {
        let d = cholesky_decode(&CholeskyParams([1.0, 0.0, 1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(d.scale.values(), [1.0, 1.0, 1.0]);
        assert!(d.near_degenerate);
        assert!((d.rotation.determinant() - 1.0).abs() < 1e-12);

        let d = cholesky_decode(&CholeskyParams([2.0, 0.0, 3.0, 0.0, 0.0, 4.0])).unwrap();
        assert_eq!(d.scale.values(), [16.0, 9.0, 4.0]);
        assert!(!d.near_degenerate);
        // Columns are coordinate axes: z, y, then x (sign fixed by det).
        let r = d.rotation.matrix();
        assert_eq!(r.column(0).into_owned(), Vector3::z());
        assert_eq!(r.column(1).into_owned(), Vector3::y());
        assert_eq!(r.column(2).map(f64::abs), Vector3::x());
    }

    #[test]
    fn decode_recovers_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rot = Rotation3::random(&mut rng);
            let c = encode_pose(&rot, &Scale3::new([5.0, 2.0, 1.0]).unwrap()).unwrap();
            let d = cholesky_decode(&c).unwrap();
            for (a, b) in d.scale.values().iter().zip([5.0, 2.0, 1.0]) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn canonicalize_contracts() {
        let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
        let (r, vals) = canonicalize_rotation(axes, [1.0, 2.0, 3.0]);
        assert_eq!(vals, [3.0, 2.0, 1.0]);
        assert_eq!(r.column(0), Vector3::z());
        assert_eq!(r.column(1), Vector3::y());

        let (r, _) = canonicalize_rotation([-Vector3::x(), Vector3::y(), Vector3::z()], [3.0, 2.0, 1.0]);
        assert_eq!(r.column(0), Vector3::x());

        // det = -1 input basis
        let (r, _) = canonicalize_rotation([Vector3::y(), Vector3::x(), Vector3::z()], [3.0, 2.0, 1.0]);
        assert!((r.determinant() - 1.0).abs() < 1e-15);
        assert_eq!(r.column(2), -Vector3::z());

        // ties keep the original index order
        let (r, _) = canonicalize_rotation(axes, [1.0, 1.0, 1.0]);
        assert_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn transform_examples() {
        let one = Scale3::new([1.0; 3]).unwrap();
        let t = build_transform(&Rotation3::identity(), &one, Vector3::zeros());
        assert_eq!(*t.matrix(), Matrix4::identity());

        let two = Scale3::new([2.0; 3]).unwrap();
        let t = build_transform(&Rotation3::identity(), &two, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.apply(&Vector3::new(0.5, 0.5, 0.5)), Vector3::new(2.0, 1.0, 1.0));
        assert_eq!(
            t.matrix().row(3).into_owned(),
            nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn decoded_transform_matches_direct_construction() {
        // Two paths to world corners: the original pose, and the decoded one.
        // Corner sets agree as sets, so compare sorted lists.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rot = Rotation3::random(&mut rng);
        let scale = Scale3::new([4.0, 1.8, 1.5]).unwrap();
        let center = Vector3::new(10.0, -3.0, 0.8);
        let direct = build_transform(&rot, &scale, center);
        let d = cholesky_decode(&encode_pose(&rot, &scale).unwrap()).unwrap();
        let decoded = build_transform(&d.rotation, &d.scale, center);

        let a: Vec<_> = unit_cube_corners().iter().map(|c| direct.apply(c)).collect();
        let b: Vec<_> = unit_cube_corners().iter().map(|c| decoded.apply(c)).collect();
        for p in &a {
            let nearest = b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-6, "corner {p:?} has no partner ({nearest})");
        }
    }
}
