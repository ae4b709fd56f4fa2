//! Plane and rigid-transform algebra.
//!
//! Planes use the implicit form `n·x + d = 0` with a unit normal `n`. The point
//! of the plane closest to the origin is therefore `-n d`, and mapping a plane
//! through a pose `x' = R x + t` gives `n' = R n`, `d' = d - (R n)·t`.
//!
//! Poses are perturbed on the left: `X ⊞ δ = ⟨exp(ω) R ; exp(ω) t + δt⟩` with the
//! twist stored as `[δt | ω]`, which is also the column layout of
//! [`transform_jacobian`].

use nalgebra::{IsometryMatrix3, Matrix3, Rotation3, SMatrix, Translation3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rigid transform stored as rotation matrix + translation.
pub type Pose = IsometryMatrix3<f64>;

/// 4×6 Jacobian of a transformed plane `[n; d]` with respect to a twist `[δt | ω]`.
pub type PlaneJacobian = SMatrix<f64, 4, 6>;

/// Tolerance on unit-norm and orthonormality invariants.
pub const INVARIANT_TOL: f64 = 1e-9;

/// Normals shorter than this cannot be normalized.
pub const MIN_NORMAL_NORM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate plane normal (norm {norm:e})")]
    DegenerateNormal { norm: f64 },
    #[error("non-finite plane coefficients")]
    NonFinite,
    #[error("plane is not canonical: {0}")]
    NotCanonical(&'static str),
}

/// An oriented plane `n·x + d = 0` in canonical form.
///
/// Canonical form keeps `d <= 0`; for planes through the origin the first
/// nonzero normal component is positive. `(n, d)` and `(-n, -d)` therefore
/// never both appear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Plane {
    normal: Vector3<f64>,
    dist: f64,
}

impl Plane {
    /// Normalizes and canonicalizes raw plane coefficients.
    pub fn new(raw_normal: Vector3<f64>, raw_dist: f64) -> Result<Self, GeomError> {
        canonicalize(raw_normal, raw_dist)
    }

    /// Accepts coefficients that are already unit-norm and canonical.
    ///
    /// Used at deserialization boundaries where silently re-normalizing would
    /// hide corrupted input.
    pub fn from_canonical(normal: Vector3<f64>, dist: f64) -> Result<Self, GeomError> {
        if !normal.iter().all(|c| c.is_finite()) || !dist.is_finite() {
            return Err(GeomError::NonFinite);
        }
        if (normal.norm() - 1.0).abs() > INVARIANT_TOL {
            return Err(GeomError::NotCanonical("normal is not unit length"));
        }
        if !is_canonical_sign(&normal, dist) {
            return Err(GeomError::NotCanonical("sign convention violated"));
        }
        Ok(Self { normal, dist })
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.normal
    }

    pub fn dist(&self) -> f64 {
        self.dist
    }

    /// `[n; d]` as a 4-vector, the layout used by [`transform_jacobian`].
    pub fn coefficients(&self) -> Vector4<f64> {
        Vector4::new(self.normal.x, self.normal.y, self.normal.z, self.dist)
    }

    /// Signed point-to-plane distance.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.dist
    }

    pub fn closest_point(&self) -> Vector3<f64> {
        closest_point(self)
    }

    pub fn transformed(&self, pose: &Pose) -> Plane {
        transform_plane(pose, self)
    }
}

impl<'de> Deserialize<'de> for Plane {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            normal: Vector3<f64>,
            dist: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        Plane::from_canonical(raw.normal, raw.dist).map_err(serde::de::Error::custom)
    }
}

fn is_canonical_sign(normal: &Vector3<f64>, dist: f64) -> bool {
    if dist < 0.0 {
        return true;
    }
    if dist > 0.0 {
        return false;
    }
    normal.iter().find(|c| **c != 0.0).is_some_and(|c| *c > 0.0)
}

/// Local perturbation of a pose, ordered `[δt | ω]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub d_translation: Vector3<f64>,
    pub d_rotation: Vector3<f64>,
}

impl Twist {
    pub fn new(d_translation: Vector3<f64>, d_rotation: Vector3<f64>) -> Self {
        Self {
            d_translation,
            d_rotation,
        }
    }

    pub fn from_vector(v: &SMatrix<f64, 6, 1>) -> Self {
        Self {
            d_translation: Vector3::new(v[0], v[1], v[2]),
            d_rotation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> SMatrix<f64, 6, 1> {
        let t = &self.d_translation;
        let r = &self.d_rotation;
        SMatrix::<f64, 6, 1>::from_column_slice(&[t.x, t.y, t.z, r.x, r.y, r.z])
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Plane-to-plane residual: origin-distance term and normal difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneError {
    pub e_dist: f64,
    pub e_normal: Vector3<f64>,
}

impl PlaneError {
    /// `[e_dist; e_normal]`.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.e_dist, self.e_normal.x, self.e_normal.y, self.e_normal.z)
    }
}

pub fn canonicalize(raw_normal: Vector3<f64>, raw_dist: f64) -> Result<Plane, GeomError> {
    if !raw_normal.iter().all(|c| c.is_finite()) || !raw_dist.is_finite() {
        return Err(GeomError::NonFinite);
    }
    let norm = raw_normal.norm();
    if norm <= MIN_NORMAL_NORM {
        return Err(GeomError::DegenerateNormal { norm });
    }
    let mut normal = raw_normal / norm;
    let mut dist = raw_dist / norm;
    if !is_canonical_sign(&normal, dist) {
        normal = -normal;
        dist = -dist;
    }
    // -0.0 would make the sign test order-dependent on round trips.
    if dist == 0.0 {
        dist = 0.0;
    }
    Ok(Plane { normal, dist })
}

/// Maps a plane expressed in frame A into frame B, given `pose = B_from_A`.
pub fn transform_plane(pose: &Pose, plane: &Plane) -> Plane {
    let n = pose.rotation * plane.normal;
    let d = plane.dist - n.dot(&pose.translation.vector);
    canonicalize(n, d).expect("rotation preserves the unit normal")
}

pub fn boxplus(pose: &Pose, delta: &Twist) -> Pose {
    let dr = Rotation3::from_scaled_axis(delta.d_rotation);
    let rotation = dr * pose.rotation;
    let translation = dr * pose.translation.vector + delta.d_translation;
    Pose::from_parts(Translation3::from(translation), rotation)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Jacobian of `transform_plane(boxplus(pose, δ), plane)` at `δ = 0`.
///
/// Rows are `[n'; d']`, columns `[δt | ω]`:
///
/// ```text
/// | 0₃ₓ₃      -[R n]× |
/// | -(R n)ᵀ    0₁ₓ₃   |
/// ```
///
/// The distance row carries a minus sign because of the `n·x + d = 0`
/// convention. The derivative is of the raw (non re-canonicalized) transform,
/// so it is only meaningful away from `d' = 0`.
pub fn transform_jacobian(pose: &Pose, plane: &Plane) -> PlaneJacobian {
    let rn = pose.rotation * plane.normal;
    let mut j = PlaneJacobian::zeros();
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&rn)));
    j.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-rn.transpose()));
    j
}

pub fn closest_point(plane: &Plane) -> Vector3<f64> {
    -plane.normal * plane.dist
}

/// `e_dist = n_iᵀ (p(π_i) − p(π_j))`, `e_normal = n_j − n_i`.
pub fn plane_error(pi_i: &Plane, pi_j: &Plane) -> PlaneError {
    let e_dist = pi_i.normal.dot(&(closest_point(pi_i) - closest_point(pi_j)));
    PlaneError {
        e_dist,
        e_normal: pi_j.normal - pi_i.normal,
    }
}

/// Jacobian of [`plane_error`] with respect to the coefficients `[n_i; d_i]`
/// of the first plane (rows `[e_dist; e_normal]`).
pub fn plane_error_jacobian(pi_i: &Plane, pi_j: &Plane) -> SMatrix<f64, 4, 4> {
    let n = &pi_i.normal;
    let d = pi_i.dist;
    let pj = closest_point(pi_j);
    // e_dist = -(nᵀn) d - nᵀ p_j
    let de_dn = -2.0 * d * n - pj;
    let de_dd = -n.dot(n);
    let mut j = SMatrix::<f64, 4, 4>::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&de_dn.transpose());
    j[(0, 3)] = de_dd;
    j.fixed_view_mut::<3, 3>(1, 0).copy_from(&(-Matrix3::identity()));
    j
}

/// Exact plane through three points, `None` if they are (nearly) collinear.
pub fn plane_from_points(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<Plane> {
    let n = (b - a).cross(&(c - a));
    let scale = (b - a).norm() * (c - a).norm();
    if scale == 0.0 || n.norm() <= 1e-12 * scale {
        return None;
    }
    let n = n.normalize();
    let centroid = (a + b + c) / 3.0;
    canonicalize(n, -n.dot(&centroid)).ok()
}

/// Rotation angle of a rotation matrix.
///
/// Uses `atan2(sin, cos)` from the skew and trace parts; `acos` of the trace
/// alone loses about half the digits near zero.
pub fn rotation_angle(rotation: &Rotation3<f64>) -> f64 {
    let r = rotation.matrix();
    let sin = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

/// Angle between two vectors, accurate near 0 and π.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Checks the orthonormality and determinant invariants of a pose.
pub fn is_valid_pose(pose: &Pose) -> bool {
    let r = pose.rotation.matrix();
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    r.iter().all(|v| v.is_finite())
        && pose.translation.vector.iter().all(|v| v.is_finite())
        && ortho <= INVARIANT_TOL
        && (r.determinant() - 1.0).abs() <= INVARIANT_TOL
}

/// Serde adapter writing a pose as a row-major rotation matrix plus
/// translation, validating orthonormality on the way in.
pub mod serde_pose {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Repr {
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    }

    pub fn serialize<S: Serializer>(pose: &Pose, s: S) -> Result<S::Ok, S::Error> {
        let r = pose.rotation.matrix();
        let t = &pose.translation.vector;
        Repr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.x, t.y, t.z],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let repr = Repr::deserialize(d)?;
        let m = Matrix3::from_fn(|i, j| repr.rotation[i][j]);
        let pose = Pose::from_parts(
            Translation3::from(Vector3::from(repr.translation)),
            Rotation3::from_matrix_unchecked(m),
        );
        if !is_valid_pose(&pose) {
            return Err(serde::de::Error::custom(
                "rotation is not orthonormal with determinant +1",
            ));
        }
        Ok(pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn plane(n: [f64; 3], d: f64) -> Plane {
        Plane::new(Vector3::from(n), d).unwrap()
    }

    fn pose_from(t: [f64; 3], w: [f64; 3]) -> Pose {
        Pose::from_parts(
            Translation3::new(t[0], t[1], t[2]),
            Rotation3::from_scaled_axis(Vector3::from(w)),
        )
    }

    fn planes_close(a: &Plane, b: &Plane, tol: f64) -> bool {
        (a.normal() - b.normal()).abs().max() <= tol && (a.dist() - b.dist()).abs() <= tol
    }

    #[test]
    fn canonicalize_examples() {
        let p = canonicalize(Vector3::new(0.0, 0.0, 2.0), -4.0).unwrap();
        assert_eq!(*p.normal(), Vector3::z());
        assert_eq!(p.dist(), -2.0);

        let p = canonicalize(Vector3::new(0.0, 0.0, -1.0), 2.0).unwrap();
        assert_eq!(*p.normal(), Vector3::z());
        assert_eq!(p.dist(), -2.0);

        assert!(matches!(
            canonicalize(Vector3::zeros(), 1.0),
            Err(GeomError::DegenerateNormal { .. })
        ));
    }

    #[test]
    fn canonicalize_through_origin_uses_first_component() {
        let p = canonicalize(Vector3::new(0.0, -3.0, 4.0), 0.0).unwrap();
        assert_abs_diff_eq!(*p.normal(), Vector3::new(0.0, 0.6, -0.8), epsilon = 1e-15);
        let p = canonicalize(Vector3::new(0.0, 0.0, -1.0), -0.0).unwrap();
        assert_eq!(*p.normal(), Vector3::z());
        assert!(p.dist().is_sign_positive());
    }

    #[test]
    fn from_canonical_rejects_flipped_sign() {
        assert!(Plane::from_canonical(Vector3::z(), 1.0).is_err());
        assert!(Plane::from_canonical(Vector3::new(0.0, 0.0, 2.0), -1.0).is_err());
        assert!(Plane::from_canonical(Vector3::z(), -1.0).is_ok());
    }

    #[test]
    fn transform_identity_and_rotation() {
        let pi = plane([1.0, 2.0, 3.0], -4.0);
        assert!(planes_close(&transform_plane(&Pose::identity(), &pi), &pi, 0.0));

        let r = pose_from([0.0; 3], [0.3, -0.2, 0.9]);
        let out = transform_plane(&r, &pi);
        assert_abs_diff_eq!(*out.normal(), r.rotation * pi.normal(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.dist(), pi.dist(), epsilon = 1e-15);
    }

    #[test]
    fn transform_translation_along_normal() {
        // Oracle: move three points of z = 1 by t and refit.
        let pi = plane([0.0, 0.0, 1.0], -1.0);
        let x = pose_from([0.0, 0.0, 1.0], [0.0; 3]);
        let pts = [
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 1.0),
        ]
        .map(|p| x * nalgebra::Point3::from(p))
        .map(|p| p.coords);
        let refit = plane_from_points(&pts[0], &pts[1], &pts[2]).unwrap();
        let out = transform_plane(&x, &pi);
        assert!(planes_close(&out, &refit, 1e-15));
        assert_eq!(*out.normal(), Vector3::z());
        assert_eq!(out.dist(), -2.0);
    }

    #[test]
    fn boxplus_examples() {
        let x = pose_from([1.0, -2.0, 0.5], [0.1, 0.2, 0.3]);
        assert_eq!(boxplus(&x, &Twist::default()), x);

        let y = boxplus(
            &Pose::identity(),
            &Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()),
        );
        assert_eq!(y.translation.vector, Vector3::new(1.0, 0.0, 0.0));

        let z = boxplus(
            &Pose::identity(),
            &Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, FRAC_PI_2)),
        );
        // Rodrigues for a quarter turn about z.
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(*z.rotation.matrix(), expected, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_identity_blocks() {
        let pi = plane([0.0, 0.0, 1.0], -2.0);
        let j = transform_jacobian(&Pose::identity(), &pi);
        let dist_row: Vec<f64> = j.row(3).iter().copied().collect();
        assert_eq!(dist_row, vec![0.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        let rot_block = j.fixed_view::<3, 3>(0, 3).into_owned();
        assert_eq!(rot_block, -skew(&Vector3::z()));
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::zeros());
    }

    #[test]
    fn rotation_angle_is_accurate_near_zero() {
        for angle in [0.0, 1e-12, 1e-9, 3e-8, 0.5, 3.0] {
            let r = Rotation3::from_axis_angle(&Vector3::y_axis(), angle);
            assert!((rotation_angle(&r) - angle).abs() < 1e-15 + 1e-14 * angle);
        }
    }

    #[test]
    fn closest_point_examples() {
        assert_eq!(closest_point(&plane([0.0, 0.0, 1.0], 0.0)), Vector3::zeros());
        assert_eq!(closest_point(&plane([0.0, 0.0, 1.0], -2.0)), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(closest_point(&plane([1.0, 0.0, 0.0], -5.0)), Vector3::new(5.0, 0.0, 0.0));
    }

    #[test]
    fn plane_error_examples() {
        let a = plane([0.0, 0.0, 1.0], -1.0);
        let e = plane_error(&a, &a);
        assert_eq!(e.e_dist, 0.0);
        assert_eq!(e.e_normal, Vector3::zeros());

        let b = plane([0.0, 0.0, 1.0], -2.0);
        let e = plane_error(&a, &b);
        assert_eq!(e.e_dist, -1.0);
        assert_eq!(e.e_normal, Vector3::zeros());

        let e = plane_error(&plane([1.0, 0.0, 0.0], 0.0), &plane([0.0, 1.0, 0.0], 0.0));
        assert_eq!(e.e_dist, 0.0);
        assert_eq!(e.e_normal, Vector3::new(-1.0, 1.0, 0.0));
    }

    #[test]
    fn plane_error_jacobian_matches_finite_differences() {
        let pi = plane([0.2, -0.4, 0.9], -1.7);
        let pj = plane([0.25, -0.35, 0.88], -1.5);
        let j = plane_error_jacobian(&pi, &pj);
        let h = 1e-7;
        let base = pi.coefficients();
        let eval = |c: Vector4<f64>| {
            // unnormalized evaluation of the same closed form
            let n = Vector3::new(c[0], c[1], c[2]);
            let pi_pt = -n * c[3];
            let e_dist = n.dot(&(pi_pt - closest_point(&pj)));
            let e_n = pj.normal() - n;
            Vector4::new(e_dist, e_n.x, e_n.y, e_n.z)
        };
        for k in 0..4 {
            let mut up = base;
            let mut dn = base;
            up[k] += h;
            dn[k] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            assert_abs_diff_eq!(j.column(k).into_owned(), fd, epsilon = 1e-7);
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-1.5..1.5f64))
            .prop_map(|(t, w)| pose_from(t, w))
    }

    fn arb_plane() -> impl Strategy<Value = Plane> {
        (prop::array::uniform3(-1.0..1.0f64), -6.0..-0.5f64)
            .prop_filter("non-degenerate normal", |(n, _)| Vector3::from(*n).norm() > 0.1)
            .prop_map(|(n, d)| plane(n, d))
    }

    proptest! {
        #[test]
        fn composition(x1 in arb_pose(), x2 in arb_pose(), pi in arb_plane()) {
            let lhs = transform_plane(&x2, &transform_plane(&x1, &pi));
            let rhs = transform_plane(&(x2 * x1), &pi);
            prop_assert!(planes_close(&lhs, &rhs, 1e-12));
        }

        #[test]
        fn inverse_round_trip(x in arb_pose(), pi in arb_plane()) {
            let back = transform_plane(&x.inverse(), &transform_plane(&x, &pi));
            prop_assert!(planes_close(&back, &pi, 1e-12));
        }

        #[test]
        fn point_set_consistency(x in arb_pose(), pi in arb_plane(), uv in prop::array::uniform6(-2.0..2.0f64)) {
            // Three points on pi from an in-plane basis.
            let n = *pi.normal();
            let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let e1 = n.cross(&helper).normalize();
            let e2 = n.cross(&e1);
            let origin = closest_point(&pi);
            let pts = [
                origin + e1 * uv[0] + e2 * uv[1],
                origin + e1 * (uv[2] + 3.0) + e2 * uv[3],
                origin + e1 * uv[4] + e2 * (uv[5] + 3.0),
            ];
            let moved: Vec<Vector3<f64>> = pts
                .iter()
                .map(|p| (x * nalgebra::Point3::from(*p)).coords)
                .collect();
            if let Some(refit) = plane_from_points(&moved[0], &moved[1], &moved[2]) {
                prop_assert!(planes_close(&refit, &transform_plane(&x, &pi), 1e-10));
            }
        }

        #[test]
        fn self_error_is_exactly_zero(pi in arb_plane()) {
            let e = plane_error(&pi, &pi);
            prop_assert_eq!(e.e_dist, 0.0);
            prop_assert_eq!(e.e_normal, Vector3::zeros());
        }

        #[test]
        fn canonical_invariants(n in prop::array::uniform3(-5.0..5.0f64), d in -5.0..5.0f64) {
            let raw = Vector3::from(n);
            prop_assume!(raw.norm() > 1e-6);
            let p = canonicalize(raw, d).unwrap();
            prop_assert!((p.normal().norm() - 1.0).abs() <= INVARIANT_TOL);
            prop_assert!(p.dist() <= 0.0);
            let flipped = canonicalize(-raw, -d).unwrap();
            prop_assert_eq!(p, flipped);
        }
    }
}
