//! Rigid-motion algebra on SE(3) and the rectified pinhole stereo camera.
//!
//! Twists are ordered `(v, w)`: translational part first, rotational part
//! second. Perturbations are applied on the left, `exp(eps) * T`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix2x3, Matrix3, Point2, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Pixel = Point2<f64>;

/// Below this rotation angle the exponential and logarithm switch to series.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Smallest admissible depth, in meters.
pub const Z_MIN: f64 = 1e-6;
/// Smallest admissible disparity, in pixels.
pub const D_MIN: f64 = 1e-3;

/// Pinhole intrinsics plus the stereo baseline of a rectified rig.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let rig = CameraRig {
            fx,
            fy,
            cx,
            cy,
            baseline,
            width,
            height,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.baseline]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.baseline <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "camera rig needs positive finite fx, fy, baseline: {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera rig has zero image size".into()));
        }
        Ok(())
    }

    /// `fx * baseline`, the constant linking depth and disparity.
    pub fn focal_baseline(&self) -> f64 {
        self.fx * self.baseline
    }

    /// Perspective projection to continuous pixel coordinates.
    pub fn project(&self, x: &Vec3) -> Result<Pixel> {
        if !(x.z > Z_MIN) {
            return Err(Error::BehindCamera { z: x.z });
        }
        Ok(Pixel::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }

    /// Derivative of [`CameraRig::project`] with respect to the 3D point.
    pub fn project_jacobian(&self, x: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        )
    }

    /// Lift a pixel with its disparity to a 3D point in the left camera frame.
    pub fn back_project(&self, p: &Pixel, d: f64) -> Result<Vec3> {
        if !(d > D_MIN) || !d.is_finite() {
            return Err(Error::InvalidDisparity(d));
        }
        let z = self.focal_baseline() / d;
        Ok(Vec3::new(
            (p.x - self.cx) * z / self.fx,
            (p.y - self.cy) * z / self.fy,
            z,
        ))
    }

    /// Disparity a point would have in this rig.
    pub fn disparity_of(&self, x: &Vec3) -> Result<f64> {
        if !(x.z > Z_MIN) {
            return Err(Error::BehindCamera { z: x.z });
        }
        Ok(self.focal_baseline() / x.z)
    }

    pub fn contains(&self, p: &Pixel) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }
}

/// Element of se(3): translational part `v` (meters) and rotation vector `w`
/// (radians).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Twist {
    pub v: Vec3,
    pub w: Vec3,
}

impl Twist {
    pub fn new(v: Vec3, w: Vec3) -> Self {
        Twist { v, w }
    }

    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn from_slice(x: &[f64; 6]) -> Self {
        Twist {
            v: Vec3::new(x[0], x[1], x[2]),
            w: Vec3::new(x[3], x[4], x[5]),
        }
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Twist {
            v: x.fixed_rows::<3>(0).into_owned(),
            w: x.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z)
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z]
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }

    /// SE(3) exponential.
    pub fn exp(&self) -> Result<RigidMotion> {
        if !self.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite twist {self:?}")));
        }
        let theta = self.w.norm();
        let t2 = theta * theta;
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
        } else {
            let s = (0.5 * theta).sin() / theta;
            (theta.sin() / theta, 2.0 * s * s)
        };
        // (θ - sin θ)/θ³ cancels catastrophically well above SMALL_ANGLE.
        let c = if theta < 1e-2 {
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362_880.0
        } else {
            (theta - theta.sin()) / (t2 * theta)
        };
        let wx = skew(&self.w);
        let wx2 = wx * wx;
        let rotation = Matrix3::identity() + wx * a + wx2 * b;
        let left_jacobian = Matrix3::identity() + wx * b + wx2 * c;
        Ok(RigidMotion {
            rotation,
            translation: left_jacobian * self.v,
        })
    }
}

impl fmt::Display for Twist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.to_array();
        write!(
            f,
            "{:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}",
            a[0], a[1], a[2], a[3], a[4], a[5]
        )
    }
}

/// Element of SE(3), acting on points as `rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidMotion {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Default for RigidMotion {
    fn default() -> Self {
        RigidMotion::identity()
    }
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Checks orthonormality and handedness to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) || !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "not a rigid motion: |R^T R - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(RigidMotion {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vec3) -> Self {
        RigidMotion {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        RigidMotion {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidMotion {
        let rt = self.rotation.transpose();
        RigidMotion {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Geodesic rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// SE(3) logarithm, the inverse of [`Twist::exp`] for angles below π.
    pub fn log(&self) -> Twist {
        let w = log_rotation(&self.rotation);
        let theta = w.norm();
        let wx = skew(&w);
        // Inverse of the left Jacobian: I - wx/2 + k wx^2.
        let k = if theta < 1e-4 {
            let t2 = theta * theta;
            1.0 / 12.0 + t2 / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - wx * 0.5 + wx * wx * k;
        Twist {
            v: v_inv * self.translation,
            w,
        }
    }

    /// Largest deviation of `rotationᵀ·rotation` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

impl Mul for RigidMotion {
    type Output = RigidMotion;

    fn mul(self, rhs: RigidMotion) -> RigidMotion {
        self.compose(&rhs)
    }
}

impl Mul<&RigidMotion> for &RigidMotion {
    type Output = RigidMotion;

    fn mul(self, rhs: &RigidMotion) -> RigidMotion {
        self.compose(rhs)
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub(crate) fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * vee.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

fn log_rotation(r: &Matrix3<f64>) -> Vec3 {
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * vee.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < 1e-4 {
        // theta / sin(theta) = 1 + theta^2/6 + ...
        return vee * 0.5 * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return vee * (0.5 * theta / s);
    }
    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part (1 - cos θ) n nᵀ = (R + Rᵀ)/2 - cos θ I.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let (mut k, mut best) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > best {
            k = i;
            best = sym[(i, i)];
        }
    }
    let mut axis: Vec3 = sym.column(k).into_owned() / best.max(f64::MIN_POSITIVE).sqrt();
    axis /= axis.norm();
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rig() -> CameraRig {
        CameraRig::new(721.0, 721.0, 609.5, 172.8, 0.54, 1242, 375).unwrap()
    }

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let m = Twist::zero().exp().unwrap();
        assert_eq!(m, RigidMotion::identity());
    }

    #[test]
    fn exp_of_pure_translation() {
        let m = Twist::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).exp().unwrap();
        assert_eq!(*m.rotation(), Matrix3::identity());
        assert_eq!(*m.translation(), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn exp_of_quarter_turn_about_z() {
        // Rodrigues at θ = π/2: R = I + [z]x + [z]x^2 maps x to y.
        let m = Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]).exp().unwrap();
        let y = m.transform_point(&Vec3::new(1.0, 0.0, 0.0));
        assert!(close(&y, &Vec3::new(0.0, 1.0, 0.0), 1e-15));
        assert!(m.translation().norm() == 0.0);
    }

    #[test]
    fn exp_rejects_non_finite() {
        let t = Twist::from_slice(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(t.exp(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn compose_cases() {
        let m = Twist::from_slice(&[0.3, -0.2, 1.0, 0.1, 0.2, -0.3]).exp().unwrap();
        let id = RigidMotion::identity();
        assert_eq!(id.compose(&m), m);
        let back = m.compose(&m.inverse());
        assert!((back.rotation() - Matrix3::identity()).amax() < 1e-15);
        assert!(back.translation().amax() < 1e-15);

        let a = RigidMotion::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let b = RigidMotion::from_translation(Vec3::new(0.0, 2.0, 0.0));
        assert_eq!(*a.compose(&b).translation(), Vec3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn transform_point_cases() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(RigidMotion::identity().transform_point(&p), p);
        let up = RigidMotion::from_translation(Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(up.transform_point(&Vec3::new(0.0, 0.0, 5.0)), Vec3::new(0.0, 0.0, 6.0));
        let rz = Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2]).exp().unwrap();
        assert!(close(&rz.transform_point(&Vec3::x()), &Vec3::y(), 1e-15));
    }

    #[test]
    fn rigid_motion_new_rejects_non_rotation() {
        let bad = Matrix3::identity() * 1.01;
        assert!(RigidMotion::new(bad, Vec3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidMotion::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn project_cases() {
        let unit = CameraRig::new(1.0, 1.0, 0.0, 0.0, 1.0, 10, 10).unwrap();
        let p = unit.project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.x, p.y), (0.0, 0.0));
        let hundred = CameraRig::new(100.0, 100.0, 0.0, 0.0, 1.0, 10, 10).unwrap();
        let p = hundred.project(&Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((p.x, p.y), (50.0, 0.0));
        assert!(matches!(
            unit.project(&Vec3::new(0.0, 0.0, 0.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn back_project_cases() {
        let x = rig().back_project(&Pixel::new(609.5, 172.8), 72.1).unwrap();
        assert!((x.z - 5.4).abs() < 1e-12);
        assert!(matches!(
            rig().back_project(&Pixel::new(1.0, 1.0), 0.0),
            Err(Error::InvalidDisparity(_))
        ));
        assert!((rig().disparity_of(&Vec3::new(0.0, 0.0, 5.4)).unwrap() - 72.1).abs() < 1e-12);
        assert!(rig().disparity_of(&Vec3::new(1.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn rig_validation() {
        assert!(CameraRig::new(0.0, 1.0, 0.0, 0.0, 1.0, 1, 1).is_err());
        assert!(CameraRig::new(1.0, 1.0, 0.0, 0.0, -1.0, 1, 1).is_err());
        assert!(CameraRig::new(1.0, 1.0, 0.0, 0.0, 1.0, 0, 1).is_err());
    }

    #[test]
    fn log_near_pi() {
        let axis = Vec3::new(1.0, 2.0, -0.5).normalize();
        for theta in [PI - 1e-2, PI - 1e-4, PI - 1e-7] {
            let t = Twist::new(Vec3::new(0.5, -1.0, 2.0), axis * theta);
            let back = t.exp().unwrap().log();
            assert!((back.to_vector() - t.to_vector()).amax() < 1e-7, "{theta}: {back:?}");
        }
    }

    #[test]
    fn compose_keeps_rotation_orthonormal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut acc = RigidMotion::identity();
        for _ in 0..1000 {
            let t = Twist::from_slice(&std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            acc = acc.compose(&t.exp().unwrap());
        }
        assert!(acc.orthonormality_error() < 1e-8);
        assert!((acc.rotation().determinant() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn first_order_action() {
        let x = Vec3::new(0.3, -1.2, 4.0);
        let dir = Twist::from_slice(&[0.2, -0.1, 0.4, 0.3, -0.5, 0.1]);
        for eps in [1e-3, 1e-5] {
            let t = Twist::new(dir.v * eps, dir.w * eps);
            let exact = t.exp().unwrap().transform_point(&x);
            let linear = x + t.v + t.w.cross(&x);
            // Second order remainder.
            assert!((exact - linear).norm() < 10.0 * eps * eps);
        }
    }

    fn twist_strategy(max_angle: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-5.0..5.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            0.0..max_angle,
        )
            .prop_map(|(v, w, angle)| {
                let w = Vec3::from(w);
                let w = if w.norm() < 1e-6 { Vec3::x() } else { w.normalize() };
                Twist::new(Vec3::from(v), w * angle)
            })
    }

    proptest! {
        #[test]
        fn log_inverts_exp(t in twist_strategy(PI - 1e-3)) {
            let back = t.exp().unwrap().log();
            prop_assert!((back.to_vector() - t.to_vector()).amax() < 1e-9);
        }

        #[test]
        fn log_inverts_exp_small_angles(t in twist_strategy(1e-6)) {
            let back = t.exp().unwrap().log();
            prop_assert!((back.to_vector() - t.to_vector()).amax() < 1e-12);
        }

        #[test]
        fn project_inverts_back_project(
            u in 0.0..1242.0f64,
            v in 0.0..375.0f64,
            d in (2.0 * D_MIN)..300.0f64,
        ) {
            let p = Pixel::new(u, v);
            let x = rig().back_project(&p, d).unwrap();
            let q = rig().project(&x).unwrap();
            prop_assert!((q - p).amax() < 1e-9);
            prop_assert!((rig().disparity_of(&x).unwrap() - d).abs() < 1e-9 * d.max(1.0));
        }

        #[test]
        fn compose_is_associative(a in twist_strategy(3.0), b in twist_strategy(3.0), c in twist_strategy(3.0)) {
            let (a, b, c) = (a.exp().unwrap(), b.exp().unwrap(), c.exp().unwrap());
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation() - r.rotation()).amax() < 1e-12);
            prop_assert!((l.translation() - r.translation()).amax() < 1e-12);
        }
    }
}
