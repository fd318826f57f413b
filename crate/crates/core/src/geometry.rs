//! Vectors, rays, pinhole cameras and the common-perpendicular triangulation
//! of two skew rays.
//!
//! Camera convention: the camera looks down `+z` in its own frame, pixel `u`
//! grows rightward (`+x`) and `v` grows downward (`+y`). Poses are
//! camera-to-world rigid transforms. The centre of pixel `(i, j)` sits at the
//! continuous coordinate `(i + 0.5, j + 0.5)`.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction. Zero vectors come back unchanged.
    #[inline]
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    #[inline]
    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    #[inline]
    pub fn abs(self) -> Vec3 {
        Vec3::new(self.x.abs(), self.y.abs(), self.z.abs())
    }

    #[inline]
    pub fn max_elem(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    #[inline]
    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    #[inline]
    pub fn component_mul(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Half-line `origin + t * direction`, `t >= 0`, with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalising the direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalized(),
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// 3x3 rotation block plus translation of a camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Vec3::ZERO,
        }
    }

    /// Row-major 4x4 camera-to-world matrix. The bottom row must be `0 0 0 1`.
    pub fn from_matrix(m: &[f64; 16]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("pose contains non-finite entries".into()));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom.iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(Error::Domain(format!("pose bottom row must be 0 0 0 1, got {bottom:?}")));
        }
        let rotation = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]];
        let pose = Self {
            rotation,
            translation: Vec3::new(m[3], m[7], m[11]),
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, //
            r[1][0], r[1][1], r[1][2], t.y, //
            r[2][0], r[2][1], r[2][2], t.z, //
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Camera at `eye` looking at `target` with world `up` mapped to image-up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(Error::Domain("look_at: view direction parallel to up".into()));
        }
        let right = right.normalized();
        let down = forward.cross(right);
        // columns are the camera axes expressed in world coordinates
        let rotation = [
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ];
        Ok(Self {
            rotation,
            translation: eye,
        })
    }

    fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::Domain("pose rotation block is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("pose rotation determinant {det} != +1")));
        }
        Ok(())
    }

    #[inline]
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    #[inline]
    pub fn rotate_inverse(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[1][0] * v.y + r[2][0] * v.z,
            r[0][1] * v.x + r[1][1] * v.y + r[2][1] * v.z,
            r[0][2] * v.x + r[1][2] * v.y + r[2][2] * v.z,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

/// Outcome of projecting a world point into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Pixel coordinates and camera-frame depth. The pixel may lie outside the image.
    Visible { u: f64, v: f64, depth: f64 },
    BehindCamera,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, pose: Pose) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Domain(format!("invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Domain("camera image size must be positive".into()));
        }
        pose.validate()?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    pub fn center(&self) -> Vec3 {
        self.pose.translation
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Ray from the camera centre through continuous pixel coordinate `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Result<Ray> {
        if !self.contains(u, v) {
            return Err(Error::Domain(format!(
                "pixel ({u}, {v}) outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.pixel_to_ray_unchecked(u, v))
    }

    #[inline]
    pub fn pixel_to_ray_unchecked(&self, u: f64, v: f64) -> Ray {
        let d_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray::new(self.center(), self.pose.rotate(d_cam))
    }

    /// Ray through the centre of integer pixel `(i, j)`.
    pub fn pixel_center_ray(&self, i: usize, j: usize) -> Ray {
        self.pixel_to_ray_unchecked(i as f64 + 0.5, j as f64 + 0.5)
    }

    pub fn project_point(&self, x: Vec3) -> Projection {
        let p = self.pose.rotate_inverse(x - self.center());
        if p.z <= 0.0 {
            return Projection::BehindCamera;
        }
        Projection::Visible {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
            depth: p.z,
        }
    }
}

/// Closest approach of two rays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPairIntersection {
    pub midpoint: Vec3,
    pub t1: f64,
    pub t2: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayPair {
    Intersection(RayPairIntersection),
    /// The closest approach lies at `t <= 0` on at least one ray.
    BehindCamera(RayPairIntersection),
    Parallel,
}

impl RayPair {
    pub fn valid(&self) -> Option<&RayPairIntersection> {
        match self {
            RayPair::Intersection(i) => Some(i),
            _ => None,
        }
    }
}

pub const PARALLEL_EPS: f64 = 1e-12;

/// Common perpendicular of the two supporting lines; the midpoint is the
/// approximate intersection and `t1`, `t2` its projections on each ray.
pub fn closest_points_between_rays(r1: &Ray, r2: &Ray) -> RayPair {
    let w0 = r1.origin - r2.origin;
    let a = r1.direction.dot(r1.direction);
    let b = r1.direction.dot(r2.direction);
    let c = r2.direction.dot(r2.direction);
    let d = r1.direction.dot(w0);
    let e = r2.direction.dot(w0);
    let cos2 = b * b;
    if (1.0 - cos2).abs() < PARALLEL_EPS {
        return RayPair::Parallel;
    }
    let denom = a * c - cos2;
    let t1 = (b * e - c * d) / denom;
    let t2 = (a * e - b * d) / denom;
    let p1 = r1.at(t1);
    let p2 = r2.at(t2);
    let hit = RayPairIntersection {
        midpoint: (p1 + p2) * 0.5,
        t1,
        t2,
        gap: (p1 - p2).norm(),
    };
    if t1 <= 0.0 || t2 <= 0.0 {
        RayPair::BehindCamera(hit)
    } else {
        RayPair::Intersection(hit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100, Pose::identity()).unwrap()
    }

    pub(crate) fn random_pose(rng: &mut impl Rng) -> Pose {
        let eye = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let target = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Pose::look_at(eye, target + Vec3::new(0.0, 0.0, 0.01), Vec3::new(0.3, 0.1, 1.0)).unwrap()
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let ray = identity_cam().pixel_to_ray(50.0, 50.0).unwrap();
        assert_eq!(ray.direction, Vec3::Z);
        assert_eq!(ray.origin, Vec3::ZERO);
    }

    #[test]
    fn one_focal_length_off_axis_is_45_degrees() {
        let ray = identity_cam().pixel_to_ray(150.0 - 1e-9, 50.0);
        assert!(ray.is_err(), "u=150 is outside a 100px image");
        let cam = CameraModel::new(100.0, 100.0, 50.0, 50.0, 200, 100, Pose::identity()).unwrap();
        let ray = cam.pixel_to_ray(150.0, 50.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((ray.direction - Vec3::new(s, 0.0, s)).norm() < 1e-15);
    }

    #[test]
    fn pixel_outside_image_is_rejected() {
        let cam = identity_cam();
        assert!(cam.pixel_to_ray(-0.1, 3.0).is_err());
        assert!(cam.pixel_to_ray(3.0, 100.0).is_err());
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        match identity_cam().project_point(Vec3::new(0.0, 0.0, 2.0)) {
            Projection::Visible { u, v, depth } => {
                assert_eq!((u, v, depth), (50.0, 50.0, 2.0));
            }
            Projection::BehindCamera => panic!("point is in front"),
        }
        assert_eq!(identity_cam().project_point(Vec3::new(0.0, 0.0, -1.0)), Projection::BehindCamera);
    }

    #[test]
    fn pixel_ray_round_trip_on_random_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let pose = random_pose(&mut rng);
            let cam = CameraModel::new(
                rng.random_range(20.0..200.0),
                rng.random_range(20.0..200.0),
                rng.random_range(10.0..60.0),
                rng.random_range(10.0..60.0),
                64,
                64,
                pose,
            )
            .unwrap();
            let (u, v) = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            let ray = cam.pixel_to_ray(u, v).unwrap();
            assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
            match cam.project_point(ray.at(2.0)) {
                Projection::Visible { u: pu, v: pv, .. } => {
                    assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6, "{u},{v} -> {pu},{pv}");
                }
                Projection::BehindCamera => panic!("t=2 point must be in front"),
            }
        }
    }

    #[test]
    fn pose_matrix_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng);
        assert_eq!(Pose::from_matrix(&pose.to_matrix()).unwrap(), pose);
        let mut m = pose.to_matrix();
        m[0] *= 2.0;
        assert!(Pose::from_matrix(&m).is_err());
        // reflection: orthonormal but det = -1
        let refl = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert!(Pose::from_matrix(&refl).is_err());
    }

    #[test]
    fn intersecting_rays_meet_exactly() {
        let r1 = Ray::new(Vec3::ZERO, Vec3::X);
        let r2 = Ray::new(Vec3::new(1.0, -1.0, 0.0), Vec3::Y);
        let hit = *closest_points_between_rays(&r1, &r2).valid().unwrap();
        assert_eq!(hit.midpoint, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!((hit.t1, hit.t2, hit.gap), (1.0, 1.0, 0.0));
    }

    #[test]
    fn closest_approach_at_origins_is_flagged() {
        let r1 = Ray::new(Vec3::ZERO, Vec3::X);
        let r2 = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::Y);
        match closest_points_between_rays(&r1, &r2) {
            RayPair::BehindCamera(hit) => {
                assert_eq!(hit.midpoint, Vec3::new(0.0, 0.0, 0.5));
                assert_eq!((hit.t1, hit.t2, hit.gap), (0.0, 0.0, 1.0));
            }
            other => panic!("expected behind-camera flag, got {other:?}"),
        }
    }

    #[test]
    fn parallel_rays_are_flagged() {
        let r1 = Ray::new(Vec3::ZERO, Vec3::X);
        let r2 = Ray::new(Vec3::new(0.0, 1.0, 0.0), Vec3::X);
        assert_eq!(closest_points_between_rays(&r1, &r2), RayPair::Parallel);
        let r3 = Ray::new(Vec3::new(0.0, 1.0, 0.0), -Vec3::X);
        assert_eq!(closest_points_between_rays(&r1, &r3), RayPair::Parallel);
    }

    #[test]
    fn swapping_rays_swaps_depths_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let r1 = Ray::new(v(), v());
            let r2 = Ray::new(v(), v());
            let unpack = |p: RayPair| match p {
                RayPair::Intersection(h) | RayPair::BehindCamera(h) => Some(h),
                RayPair::Parallel => None,
            };
            let (Some(a), Some(b)) = (
                unpack(closest_points_between_rays(&r1, &r2)),
                unpack(closest_points_between_rays(&r2, &r1)),
            ) else {
                continue;
            };
            assert_eq!(a.t1, b.t2);
            assert_eq!(a.t2, b.t1);
            assert_eq!(a.midpoint, b.midpoint);
            assert_eq!(a.gap, b.gap);
        }
    }
}
