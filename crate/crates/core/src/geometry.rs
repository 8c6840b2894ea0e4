//! Rigid-body pose algebra.
//!
//! Poses are stored as a translation plus a unit quaternion in scalar-first
//! `(w, x, y, z)` order. Every constructor normalizes the quaternion and moves
//! it into the canonical hemisphere (`w >= 0`, ties broken on the first
//! nonzero vector component), so two poses describing the same rigid motion
//! have the same 7-vector.
//!
//! Differences between poses are taken on hemisphere-aligned 7-vectors; see
//! [`pose_delta`].

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use thiserror::Error;

/// Tolerance on `|q| - 1` for quaternions produced by this module.
pub const UNIT_TOL: f64 = 1e-9;

/// Quaternions read from text carry only as many digits as were written.
/// Values within this distance of unit norm are kept verbatim.
pub const STORED_UNIT_TOL: f64 = 2e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("non-finite pose component")]
    NonFinite,
    #[error("quaternion norm {0} is not within tolerance of 1")]
    NotUnit(f64),
}

/// A 7-vector `(px, py, pz, qw, qx, qy, qz)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PoseVec7(pub [f64; 7]);

impl PoseVec7 {
    pub const ZERO: PoseVec7 = PoseVec7([0.0; 7]);
    pub const IDENTITY: PoseVec7 = PoseVec7([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);

    pub fn from_slice(values: &[f64]) -> PoseVec7 {
        let mut out = [0.0; 7];
        out.copy_from_slice(&values[..7]);
        PoseVec7(out)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn position(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.0[3], self.0[4], self.0[5], self.0[6]]
    }

    pub fn position_norm(&self) -> f64 {
        norm3(self.position())
    }

    pub fn quaternion_norm(&self) -> f64 {
        let q = self.quaternion();
        (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean norm with the position block multiplied by `position_scale`.
    pub fn scaled_norm(&self, position_scale: f64) -> f64 {
        let p = self.position_norm() * position_scale;
        let q = self.quaternion_norm();
        (p * p + q * q).sqrt()
    }

    pub fn scale(&self, factor: f64) -> PoseVec7 {
        let mut out = self.0;
        out.iter_mut().for_each(|v| *v *= factor);
        PoseVec7(out)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Distance of a relative pose from the identity pose, as used by the
    /// way-point prior: identity has norm zero.
    pub fn identity_distance(&self, position_scale: f64) -> f64 {
        pose_delta(self, &PoseVec7::IDENTITY).scaled_norm(position_scale)
    }
}

impl Index<usize> for PoseVec7 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for PoseVec7 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for PoseVec7 {
    type Output = PoseVec7;
    fn add(self, rhs: PoseVec7) -> PoseVec7 {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0.iter()) {
            *o += r;
        }
        PoseVec7(out)
    }
}

impl Sub for PoseVec7 {
    type Output = PoseVec7;
    fn sub(self, rhs: PoseVec7) -> PoseVec7 {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0.iter()) {
            *o -= r;
        }
        PoseVec7(out)
    }
}

impl Neg for PoseVec7 {
    type Output = PoseVec7;
    fn neg(self) -> PoseVec7 {
        self.scale(-1.0)
    }
}

/// Component-wise `a - b` after flipping `b`'s quaternion into the hemisphere
/// of `a`'s quaternion.
pub fn pose_delta(a: &PoseVec7, b: &PoseVec7) -> PoseVec7 {
    let qa = a.quaternion();
    let qb = b.quaternion();
    let dot = qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3];
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    let mut out = [0.0; 7];
    for i in 0..3 {
        out[i] = a.0[i] - b.0[i];
    }
    for i in 3..7 {
        out[i] = a.0[i] - sign * b.0[i];
    }
    PoseVec7(out)
}

/// Inverse of [`pose_delta`]: adds `delta` to `base` and renormalizes the
/// quaternion part.
pub fn apply_delta(base: &Pose, delta: &PoseVec7) -> Result<Pose, GeometryError> {
    Pose::from_vec7(&(base.to_vec7() + *delta))
}

#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    position: [f64; 3],
    orientation: [f64; 4],
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Pose(p=[{:.6}, {:.6}, {:.6}], q=[{:.6}, {:.6}, {:.6}, {:.6}])",
            self.position[0],
            self.position[1],
            self.position[2],
            self.orientation[0],
            self.orientation[1],
            self.orientation[2],
            self.orientation[3]
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub const fn identity() -> Pose {
        Pose {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn new(position: [f64; 3], quaternion: [f64; 4]) -> Result<Pose, GeometryError> {
        if !position.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let q = normalize_quat(quaternion)?;
        Ok(Pose {
            position,
            orientation: canonical(q),
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Pose {
        Pose {
            position: [x, y, z],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Rotation about the world z axis by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Pose {
        Pose::from_xyz_yaw([0.0; 3], yaw)
    }

    pub fn from_xyz_yaw(position: [f64; 3], yaw: f64) -> Pose {
        let half = 0.5 * yaw;
        Pose {
            position,
            orientation: canonical([half.cos(), 0.0, 0.0, half.sin()]),
        }
    }

    pub fn from_axis_angle(position: [f64; 3], axis: [f64; 3], angle: f64) -> Result<Pose, GeometryError> {
        let n = norm3(axis);
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::DegenerateQuaternion);
        }
        let s = (0.5 * angle).sin() / n;
        Pose::new(
            position,
            [(0.5 * angle).cos(), axis[0] * s, axis[1] * s, axis[2] * s],
        )
    }

    /// Normalizes and canonicalizes the quaternion part of `v`.
    /// Quaternions already unit within [`UNIT_TOL`] are kept verbatim so
    /// that flattening and unflattening round-trips exactly.
    pub fn from_vec7(v: &PoseVec7) -> Result<Pose, GeometryError> {
        if v.is_finite() && (v.quaternion_norm() - 1.0).abs() <= UNIT_TOL {
            return Pose::from_stored(v);
        }
        Pose::new(v.position(), v.quaternion())
    }

    /// Builds a pose from stored values without renormalizing when the
    /// quaternion is already unit within [`STORED_UNIT_TOL`]. Larger
    /// deviations are rejected rather than silently repaired.
    pub fn from_stored(v: &PoseVec7) -> Result<Pose, GeometryError> {
        if !v.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let n = v.quaternion_norm();
        if (n - 1.0).abs() > STORED_UNIT_TOL {
            return Err(GeometryError::NotUnit(n));
        }
        Ok(Pose {
            position: v.position(),
            orientation: canonical(v.quaternion()),
        })
    }

    pub fn position(&self) -> [f64; 3] {
        self.position
    }

    pub fn orientation(&self) -> [f64; 4] {
        self.orientation
    }

    pub fn to_vec7(&self) -> PoseVec7 {
        let p = self.position;
        let q = self.orientation;
        PoseVec7([p[0], p[1], p[2], q[0], q[1], q[2], q[3]])
    }

    /// `self ∘ other`: the pose of frame `other` expressed through `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let t = self.rotate(other.position);
        let q = normalize_quat(quat_mul(self.orientation, other.orientation))
            .unwrap_or([1.0, 0.0, 0.0, 0.0]);
        Pose {
            position: [
                self.position[0] + t[0],
                self.position[1] + t[1],
                self.position[2] + t[2],
            ],
            orientation: canonical(q),
        }
    }

    pub fn inverse(&self) -> Pose {
        let q = self.orientation;
        let conj = [q[0], -q[1], -q[2], -q[3]];
        let t = quat_rotate(conj, self.position);
        Pose {
            position: [-t[0], -t[1], -t[2]],
            orientation: canonical(conj),
        }
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        quat_rotate(self.orientation, v)
    }

    pub fn transform_point(&self, v: [f64; 3]) -> [f64; 3] {
        let r = self.rotate(v);
        [
            r[0] + self.position[0],
            r[1] + self.position[1],
            r[2] + self.position[2],
        ]
    }

    /// Rotation angle about the z axis, in `(-pi, pi]`.
    pub fn yaw(&self) -> f64 {
        let [w, x, y, z] = self.orientation;
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    /// Total rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let w = self.orientation[0].clamp(-1.0, 1.0);
        2.0 * w.abs().acos()
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        let a = self.position;
        let b = other.position;
        norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
    }

    /// Largest absolute 7-vector component difference after hemisphere alignment.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        pose_delta(&self.to_vec7(), &other.to_vec7())
            .0
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn approx_eq(&self, other: &Pose, tol: f64) -> bool {
        self.max_abs_diff(other) <= tol
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Pose of object `i` in the frame of object `j`, given both world poses.
pub fn relative_pose(world_i: &Pose, world_j: &Pose) -> Pose {
    world_j.inverse().compose(world_i)
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    // v' = v + 2w (u x v) + 2 u x (u x v)
    let u = [q[1], q[2], q[3]];
    let w = q[0];
    let uv = cross(u, v);
    let uuv = cross(u, uv);
    [
        v[0] + 2.0 * (w * uv[0] + uuv[0]),
        v[1] + 2.0 * (w * uv[1] + uuv[1]),
        v[2] + 2.0 * (w * uv[2] + uuv[2]),
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4], GeometryError> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !n.is_finite() || n < 1e-12 {
        return Err(GeometryError::DegenerateQuaternion);
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

fn canonical(q: [f64; 4]) -> [f64; 4] {
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else {
        q[1..].iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)
    };
    if flip {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        // also turns -0.0 into 0.0 so equal poses compare equal bitwise
        [q[0] + 0.0, q[1] + 0.0, q[2] + 0.0, q[3] + 0.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-2.0..2.0f64),
            prop::array::uniform4(-1.0..1.0f64),
        )
            .prop_filter_map("degenerate quaternion", |(p, q)| Pose::new(p, q).ok())
    }

    fn check_invariants(p: &Pose) {
        let q = p.orientation();
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!((n - 1.0).abs() <= UNIT_TOL, "norm {n}");
        assert!(q[0] >= 0.0);
        if q[0] == 0.0 {
            assert!(q[1..].iter().find(|v| **v != 0.0).unwrap() > &0.0);
        }
    }

    #[test]
    fn identity_is_neutral() {
        let x = Pose::new([0.3, -0.2, 1.0], [0.3, 0.1, -0.7, 0.2]).unwrap();
        assert!(compose(&Pose::identity(), &x).approx_eq(&x, 1e-15));
        assert!(compose(&x, &x.inverse()).approx_eq(&Pose::identity(), 1e-9));
    }

    #[test]
    fn translations_add() {
        let c = compose(
            &Pose::from_translation(1.0, 0.0, 0.0),
            &Pose::from_translation(0.0, 1.0, 0.0),
        );
        assert_eq!(c, Pose::from_translation(1.0, 1.0, 0.0));
    }

    #[test]
    fn relative_pose_examples() {
        let x = Pose::new([0.1, 0.2, 0.3], [0.9, 0.1, 0.2, 0.3]).unwrap();
        assert!(relative_pose(&x, &x).approx_eq(&Pose::identity(), 1e-12));
        let r = relative_pose(
            &Pose::from_translation(2.0, 0.0, 0.0),
            &Pose::from_translation(1.0, 0.0, 0.0),
        );
        assert_eq!(r, Pose::from_translation(1.0, 0.0, 0.0));
    }

    #[test]
    fn canonical_hemisphere() {
        let p = Pose::new([0.0; 3], [-1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.orientation(), [1.0, 0.0, 0.0, 0.0]);
        let p = Pose::new([0.0; 3], [0.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(p.orientation(), [0.0, 0.0, 1.0, 0.0]);
        assert!(Pose::new([0.0; 3], [0.0; 4]).is_err());
    }

    #[test]
    fn pose_delta_examples() {
        let a = Pose::new([0.1, 0.2, 0.3], [0.5, 0.5, -0.5, 0.5]).unwrap().to_vec7();
        assert_eq!(pose_delta(&a, &a), PoseVec7::ZERO);
        let mut flipped = a;
        for i in 3..7 {
            flipped[i] = -flipped[i];
        }
        let b = Pose::new([0.0, 0.4, 0.1], [0.6, 0.3, -0.5, 0.5]).unwrap().to_vec7();
        let mut b_neg = b;
        for i in 3..7 {
            b_neg[i] = -b_neg[i];
        }
        assert_eq!(pose_delta(&a, &b), pose_delta(&a, &b_neg));
    }

    #[test]
    fn yaw_roundtrip() {
        for yaw in [-3.0, -1.0, 0.0, 0.5, 2.9] {
            assert!((Pose::from_yaw(yaw).yaw() - yaw).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_distance_is_zero_at_identity() {
        assert_eq!(PoseVec7::IDENTITY.identity_distance(1.0), 0.0);
        let t = Pose::from_translation(0.03, 0.04, 0.0).to_vec7();
        assert!((t.identity_distance(1.0) - 0.05).abs() < 1e-15);
        assert!((t.identity_distance(2.0) - 0.1).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn relative_then_compose_recovers(x in arb_pose(), y in arb_pose()) {
            let back = compose(&y, &relative_pose(&x, &y));
            prop_assert!(back.approx_eq(&x, 1e-9));
            check_invariants(&back);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            prop_assert!(l.approx_eq(&r, 1e-9));
            check_invariants(&l);
            check_invariants(&a.inverse());
        }

        #[test]
        fn vec7_roundtrip(x in arb_pose()) {
            prop_assert_eq!(Pose::from_vec7(&x.to_vec7()).unwrap(), x);
            prop_assert_eq!(Pose::from_stored(&x.to_vec7()).unwrap(), x);
        }

        #[test]
        fn pose_delta_antisymmetric(a in arb_pose(), b in arb_pose()) {
            let (va, mut vb) = (a.to_vec7(), b.to_vec7());
            let qa = va.quaternion();
            let qb = vb.quaternion();
            if qa.iter().zip(qb.iter()).map(|(x, y)| x * y).sum::<f64>() < 0.0 {
                for i in 3..7 { vb[i] = -vb[i]; }
            }
            let d1 = pose_delta(&va, &vb);
            let d2 = pose_delta(&vb, &va);
            for i in 0..7 {
                prop_assert!((d1[i] + d2[i]).abs() < 1e-15);
            }
        }

        #[test]
        fn pose_delta_norm_matches_nearest_sign(a in arb_pose(), eps in prop::array::uniform7(-0.01..0.01f64)) {
            // brute force over both quaternion signs of the perturbed pose
            let va = a.to_vec7();
            let vb = Pose::from_vec7(&(va + PoseVec7(eps))).unwrap().to_vec7();
            let mut vb_neg = vb;
            for i in 3..7 { vb_neg[i] = -vb_neg[i]; }
            let best = (va - vb).norm().min((va - vb_neg).norm());
            prop_assert!((pose_delta(&va, &vb).norm() - best).abs() < 1e-12);
        }
    }
}
