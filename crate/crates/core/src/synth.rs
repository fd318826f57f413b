//! Analytic indoor scenes: signed distance, sphere-traced views, surface
//! samples and exact correspondences.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose, Projection, Ray, Vec3};
use crate::image::RgbImage;
use crate::sparse_depth::Correspondence;

pub const TRACE_EPS: f64 = 1e-5;
pub const TRACE_STEPS: usize = 256;
const RING_PHASE: f64 = 0.37;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    Flat([f64; 3]),
    /// 3-D checker of cell size `period`.
    Checker { a: [f64; 3], b: [f64; 3], period: f64 },
}

impl Pattern {
    pub fn at(&self, p: Vec3) -> [f64; 3] {
        match *self {
            Pattern::Flat(c) => c,
            Pattern::Checker { a, b, period } => {
                // small offset keeps faces lying exactly on a cell boundary on one parity
                let q = |v: f64| ((v + 1e-3) / period).floor() as i64;
                if (q(p.x) + q(p.y) + q(p.z)).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Albedo {
    Uniform(Pattern),
    /// Box faces in the order `-x, +x, -y, +y, -z, +z`.
    PerFace([Pattern; 6]),
}

impl Albedo {
    fn pattern(&self, shape: &Shape, p: Vec3) -> Pattern {
        match (self, shape) {
            (Albedo::Uniform(pat), _) => *pat,
            (Albedo::PerFace(faces), Shape::Box { min, max }) => {
                let mut best = (0, f64::INFINITY);
                for a in 0..3 {
                    for (side, bound) in [(0, min[a]), (1, max[a])] {
                        let d = (p[a] - bound).abs();
                        if d < best.1 {
                            best = (2 * a + side, d);
                        }
                    }
                }
                faces[best.0]
            }
            (Albedo::PerFace(faces), Shape::Sphere { .. }) => faces[0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Shape {
    /// Signed distance, negative inside the shape.
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Box { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let q = (p - c).abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max_elem().min(0.0)
            }
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Box { min, max } => {
                let d = max - min;
                2.0 * (d.x * d.y + d.y * d.z + d.x * d.z)
            }
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    /// Area-uniform point on the boundary.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        match *self {
            Shape::Box { min, max } => {
                let d = max - min;
                let faces = [d.y * d.z, d.y * d.z, d.x * d.z, d.x * d.z, d.x * d.y, d.x * d.y];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut f = 5;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        f = i;
                        break;
                    }
                    pick -= a;
                }
                let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
                let lerp = |lo: f64, hi: f64, t: f64| lo + (hi - lo) * t;
                let axis = f / 2;
                let fixed = if f % 2 == 0 { min[axis] } else { max[axis] };
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut out = [0.0; 3];
                out[axis] = fixed;
                out[u] = lerp(min[u], max[u], a);
                out[v] = lerp(min[v], max[v], b);
                Vec3::from_array(out)
            }
            Shape::Sphere { center, radius } => {
                let n = Normal::new(0.0, 1.0).unwrap();
                let d = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
                let len = d.norm().max(1e-300);
                center + d * (radius / len)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// The room shell is hollow: free space is its interior.
    pub hollow: bool,
    pub albedo: Albedo,
}

impl Primitive {
    pub fn albedo_at(&self, p: Vec3) -> [f64; 3] {
        self.albedo.pattern(&self.shape, p).at(p)
    }

    pub fn is_flat_at(&self, p: Vec3) -> bool {
        matches!(self.albedo.pattern(&self.shape, p), Pattern::Flat(_))
    }

    /// Contribution to the free-space distance (positive in free space).
    pub fn free_space_sdf(&self, p: Vec3) -> f64 {
        let s = self.shape.sdf(p);
        if self.hollow {
            -s
        } else {
            s
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Unit direction towards the light.
    pub light: Vec3,
    pub ambient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtHit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub primitive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtView {
    pub image: RgbImage,
    pub depth: Vec<Option<f64>>,
    pub normal: Vec<Option<Vec3>>,
    /// Index of the primitive hit at each pixel.
    pub primitive: Vec<Option<usize>>,
    pub camera: CameraModel,
}

impl SceneSpec {
    /// Room `[-1, 1]^3` with a table and a sphere resting on it.
    pub fn default_room() -> Self {
        let room = Primitive {
            shape: Shape::Box {
                min: Vec3::new(-1.0, -1.0, -1.0),
                max: Vec3::new(1.0, 1.0, 1.0),
            },
            hollow: true,
            albedo: Albedo::PerFace([
                Pattern::Flat([0.8, 0.55, 0.45]),
                Pattern::Flat([0.45, 0.7, 0.55]),
                Pattern::Flat([0.5, 0.6, 0.85]),
                Pattern::Flat([0.85, 0.8, 0.45]),
                Pattern::Checker {
                    a: [0.85, 0.82, 0.75],
                    b: [0.25, 0.22, 0.2],
                    period: 0.2,
                },
                Pattern::Flat([0.9, 0.9, 0.9]),
            ]),
        };
        let table = Primitive {
            shape: Shape::Box {
                min: Vec3::new(-0.35, -0.25, -1.05),
                max: Vec3::new(0.35, 0.25, -0.5),
            },
            hollow: false,
            albedo: Albedo::PerFace([
                Pattern::Checker {
                    a: [0.55, 0.35, 0.2],
                    b: [0.9, 0.8, 0.6],
                    period: 0.1,
                },
                Pattern::Checker {
                    a: [0.55, 0.35, 0.2],
                    b: [0.9, 0.8, 0.6],
                    period: 0.1,
                },
                Pattern::Checker {
                    a: [0.55, 0.35, 0.2],
                    b: [0.9, 0.8, 0.6],
                    period: 0.1,
                },
                Pattern::Checker {
                    a: [0.55, 0.35, 0.2],
                    b: [0.9, 0.8, 0.6],
                    period: 0.1,
                },
                Pattern::Flat([0.6, 0.4, 0.25]),
                Pattern::Flat([0.6, 0.4, 0.25]),
            ]),
        };
        let sphere = Primitive {
            shape: Shape::Sphere {
                center: Vec3::new(0.05, 0.0, -0.35),
                radius: 0.18,
            },
            hollow: false,
            albedo: Albedo::Uniform(Pattern::Checker {
                a: [0.2, 0.4, 0.8],
                b: [0.9, 0.9, 0.95],
                period: 0.09,
            }),
        };
        Self {
            primitives: vec![room, table, sphere],
            light: Vec3::new(0.3, 0.5, 0.8).normalized(),
            ambient: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hollow = self.primitives.iter().filter(|p| p.hollow).count();
        if hollow != 1 {
            return Err(Error::Domain(format!("scene needs exactly one hollow room, found {hollow}")));
        }
        Ok(())
    }

    pub fn room(&self) -> &Primitive {
        self.primitives.iter().find(|p| p.hollow).expect("validated scene")
    }

    /// Free-space signed distance: positive in air, negative inside matter.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|q| q.free_space_sdf(p)).fold(f64::INFINITY, f64::min)
    }

    fn closest_primitive(&self, p: Vec3) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, q) in self.primitives.iter().enumerate() {
            let d = q.free_space_sdf(p).abs();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Inward normal of the room face containing `p`, if any.
    pub fn room_face_normal(&self, p: Vec3) -> Option<Vec3> {
        if let Shape::Box { min, max } = self.room().shape {
            for a in 0..3 {
                let mut n = [0.0; 3];
                if (p[a] - min[a]).abs() < 1e-4 {
                    n[a] = 1.0;
                    return Some(Vec3::from_array(n));
                }
                if (p[a] - max[a]).abs() < 1e-4 {
                    n[a] = -1.0;
                    return Some(Vec3::from_array(n));
                }
            }
        }
        None
    }

    pub fn gradient(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        Vec3::new(
            self.sdf(p + Vec3::X * h) - self.sdf(p - Vec3::X * h),
            self.sdf(p + Vec3::Y * h) - self.sdf(p - Vec3::Y * h),
            self.sdf(p + Vec3::Z * h) - self.sdf(p - Vec3::Z * h),
        ) / (2.0 * h)
    }

    pub fn sphere_trace(&self, ray: &Ray, max_steps: usize, eps: f64) -> Option<GtHit> {
        let mut t = 0.0;
        for _ in 0..max_steps {
            let p = ray.at(t);
            let s = self.sdf(p);
            if s.abs() < eps {
                return Some(self.hit_at(t, p));
            }
            t += s;
            if !t.is_finite() || t > 1e3 {
                return None;
            }
        }
        None
    }

    fn hit_at(&self, t: f64, p: Vec3) -> GtHit {
        GtHit {
            t,
            point: p,
            normal: self.gradient(p).normalized(),
            primitive: self.closest_primitive(p),
        }
    }

    /// Closed-form first boundary crossing for a ray starting in free space:
    /// the earliest entry into a solid or the exit from the room.
    pub fn intersect(&self, ray: &Ray) -> Option<GtHit> {
        let mut best = f64::INFINITY;
        for prim in &self.primitives {
            let (t0, t1) = match prim.shape {
                Shape::Box { min, max } => {
                    let mut t0 = f64::NEG_INFINITY;
                    let mut t1 = f64::INFINITY;
                    for a in 0..3 {
                        let d = ray.direction[a];
                        let o = ray.origin[a];
                        if d.abs() < 1e-300 {
                            if o < min[a] || o > max[a] {
                                t0 = f64::INFINITY;
                            }
                            continue;
                        }
                        let (lo, hi) = ((min[a] - o) / d, (max[a] - o) / d);
                        t0 = t0.max(lo.min(hi));
                        t1 = t1.min(lo.max(hi));
                    }
                    (t0, t1)
                }
                Shape::Sphere { center, radius } => {
                    let oc = ray.origin - center;
                    let b = oc.dot(ray.direction);
                    let disc = b * b - (oc.dot(oc) - radius * radius);
                    if disc < 0.0 {
                        continue;
                    }
                    let r = disc.sqrt();
                    (-b - r, -b + r)
                }
            };
            if t0 > t1 {
                continue;
            }
            let t = if prim.hollow { t1 } else { t0 };
            if t > 0.0 && t < best {
                best = t;
            }
        }
        best.is_finite().then(|| self.hit_at(best, ray.at(best)))
    }

    /// Sphere tracing with the default budget; rays that exhaust it (grazing
    /// a face edge-on or heading into an acute crease) are resolved in closed form.
    pub fn trace(&self, ray: &Ray) -> Option<GtHit> {
        self.sphere_trace(ray, TRACE_STEPS, TRACE_EPS).or_else(|| self.intersect(ray))
    }

    /// Lambertian shading plus ambient.
    pub fn shade(&self, hit: &GtHit) -> [f64; 3] {
        let a = self.primitives[hit.primitive].albedo_at(hit.point);
        let lit = hit.normal.dot(self.light).max(0.0) + self.ambient;
        a.map(|c| (c * lit).min(1.0))
    }

    /// Area-uniform point on the scene boundary (`|sdf| < 1e-4`).
    pub fn sample_surface_point(&self, rng: &mut impl Rng) -> Vec3 {
        let areas: Vec<f64> = self.primitives.iter().map(|p| p.shape.area()).collect();
        let total: f64 = areas.iter().sum();
        loop {
            let mut pick = rng.random::<f64>() * total;
            let mut k = areas.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    k = i;
                    break;
                }
                pick -= a;
            }
            let p = self.primitives[k].shape.sample_surface(rng);
            if self.sdf(p).abs() < 1e-4 {
                return p;
            }
        }
    }

    /// Whether `p` is the first surface seen from `cam` along its pixel ray.
    pub fn visible_from(&self, cam: &CameraModel, p: Vec3) -> Option<(f64, f64)> {
        let (u, v) = match cam.project_point(p) {
            Projection::Visible { u, v, .. } if cam.contains(u, v) => (u, v),
            _ => return None,
        };
        let to = p - cam.center();
        let dist = to.norm();
        let hit = self.trace(&Ray::new(cam.center(), to))?;
        ((hit.t - dist).abs() < 0.01 * dist).then_some((u, v))
    }
}

/// Free-space SDF at `x`.
pub fn analytic_sdf(scene: &SceneSpec, x: Vec3) -> f64 {
    scene.sdf(x)
}

/// Cameras on a horizontal ring looking inward and slightly down.
pub fn ring_cameras(n: usize, radius: f64, width: usize, height: usize, focal: f64) -> Result<Vec<CameraModel>> {
    (0..n)
        .map(|i| {
            // phase offset keeps pixel rays from grazing the table faces edge-on
            let th = 2.0 * PI * (i as f64 + RING_PHASE) / n as f64;
            let (s, c) = th.sin_cos();
            let z = if i % 2 == 0 { 0.0 } else { 0.25 };
            let eye = Vec3::new(radius * c, radius * s, z);
            let target = Vec3::new(-0.3 * c, -0.3 * s, -0.45);
            let pose = Pose::look_at(eye, target, Vec3::Z)?;
            CameraModel::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height, pose)
        })
        .collect()
}

/// Default desk setup: 20 views at 64x64.
pub fn default_cameras() -> Vec<CameraModel> {
    ring_cameras(20, 0.6, 64, 64, 34.0).expect("valid default ring")
}

pub fn render_gt_view(scene: &SceneSpec, cam: &CameraModel) -> GtView {
    let (w, h) = (cam.width, cam.height);
    let hits: Vec<Option<GtHit>> = (0..w * h).into_par_iter().map(|k| scene.trace(&cam.pixel_center_ray(k % w, k / w))).collect();
    GtView {
        image: RgbImage {
            width: w,
            height: h,
            data: hits.iter().map(|hit| hit.as_ref().map_or([0.0; 3], |h| scene.shade(h))).collect(),
        },
        depth: hits.iter().map(|hit| hit.map(|h| h.t)).collect(),
        normal: hits.iter().map(|hit| hit.map(|h| h.normal)).collect(),
        primitive: hits.iter().map(|hit| hit.map(|h| h.primitive)).collect(),
        camera: *cam,
    }
}

pub fn render_gt_views(scene: &SceneSpec, cams: &[CameraModel]) -> Vec<GtView> {
    cams.iter().map(|c| render_gt_view(scene, c)).collect()
}

/// Exact (optionally noisy) correspondences of visible surface points.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMatches {
    pub matches: Vec<Correspondence>,
    /// True ray distances from each camera to the 3-D point.
    pub depths: Vec<(f64, f64)>,
    pub points: Vec<Vec3>,
}

/// Surface points seen from a random view's random pixel, projected into every
/// other view within `max_view_gap` indices where they are unoccluded.
pub fn make_correspondences(
    scene: &SceneSpec,
    cams: &[CameraModel],
    n_points: usize,
    pixel_noise_sigma: f64,
    max_view_gap: usize,
    rng: &mut impl Rng,
) -> SyntheticMatches {
    let noise = Normal::new(0.0, pixel_noise_sigma.max(0.0)).unwrap();
    let mut out = SyntheticMatches {
        matches: Vec::new(),
        depths: Vec::new(),
        points: Vec::new(),
    };
    if cams.is_empty() {
        return out;
    }
    let mut sampled = 0;
    let mut attempts = 0;
    while sampled < n_points && attempts < 100 * n_points {
        attempts += 1;
        let v = rng.random_range(0..cams.len());
        let cam = &cams[v];
        let ray = cam.pixel_to_ray_unchecked(rng.random::<f64>() * cam.width as f64, rng.random::<f64>() * cam.height as f64);
        let Some(hit) = scene.trace(&ray) else { continue };
        sampled += 1;
        let seen: Vec<(usize, f64, f64)> = cams
            .iter()
            .enumerate()
            .filter_map(|(i, c)| scene.visible_from(c, hit.point).map(|(u, v)| (i, u, v)))
            .collect();
        for (x, &(a, ua, va)) in seen.iter().enumerate() {
            for &(b, ub, vb) in &seen[x + 1..] {
                if b - a > max_view_gap {
                    continue;
                }
                let mut jitter = |c: f64| if pixel_noise_sigma > 0.0 { c + noise.sample(rng) } else { c };
                let m = Correspondence {
                    view_a: a,
                    view_b: b,
                    ua: jitter(ua),
                    va: jitter(va),
                    ub: jitter(ub),
                    vb: jitter(vb),
                    score: None,
                };
                if !cams[a].contains(m.ua, m.va) || !cams[b].contains(m.ub, m.vb) {
                    continue;
                }
                out.matches.push(m);
                out.depths.push(((hit.point - cams[a].center()).norm(), (hit.point - cams[b].center()).norm()));
                out.points.push(hit.point);
            }
        }
    }
    out
}

/// Area-uniform surface samples seen by at least one camera.
pub fn gt_point_cloud(scene: &SceneSpec, cams: &[CameraModel], n_points: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let mut pts = Vec::with_capacity(n_points);
    let mut attempts = 0;
    while pts.len() < n_points && attempts < 1000 * n_points.max(1) {
        attempts += 1;
        let p = scene.sample_surface_point(rng);
        if cams.is_empty() || cams.iter().any(|c| scene.visible_from(c, p).is_some()) {
            pts.push(p);
        }
    }
    pts
}

/// Default synthetic dataset with ground-truth depth and points.
pub fn build_dataset(
    scene: &SceneSpec,
    cams: &[CameraModel],
    gt_points: usize,
    matches: Option<&SyntheticMatches>,
    rng: &mut impl Rng,
) -> Result<(Dataset, Vec<GtView>)> {
    scene.validate()?;
    let views = render_gt_views(scene, cams);
    let mut ds = Dataset::new(cams.to_vec(), views.iter().map(|v| v.image.clone()).collect())?;
    ds.depths = Some(views.iter().map(|v| v.depth.clone()).collect());
    ds.gt_points = Some(gt_point_cloud(scene, cams, gt_points, rng));
    ds.matches = matches.map(|m| m.matches.clone());
    Ok((ds, views))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_room() -> SceneSpec {
        let mut s = SceneSpec::default_room();
        s.primitives.truncate(1);
        s
    }

    #[test]
    fn empty_room_distances() {
        let s = empty_room();
        assert_eq!(analytic_sdf(&s, Vec3::ZERO), 1.0);
        assert_eq!(analytic_sdf(&s, Vec3::new(1.0, 0.2, -0.3)), 0.0);
        assert!((analytic_sdf(&s, Vec3::new(0.5, 0.9, 0.0)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sdf_is_a_lower_bound_on_surface_distance() {
        let s = SceneSpec::default_room();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let surf: Vec<Vec3> = (0..20000).map(|_| s.sample_surface_point(&mut rng)).collect();
        for _ in 0..200 {
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let d = surf.iter().map(|p| (*p - x).norm()).fold(f64::INFINITY, f64::min);
            assert!(analytic_sdf(&s, x).abs() <= d + 1e-9);
        }
    }

    #[test]
    fn trace_to_ceiling_and_table_top() {
        let s = SceneSpec::default_room();
        let hit = s.trace(&Ray::new(Vec3::ZERO, Vec3::Z)).unwrap();
        assert!((hit.t - 1.0).abs() < TRACE_EPS);
        // from above the table, off the sphere
        let o = Vec3::new(-0.25, 0.15, 0.3);
        let d = Vec3::new(0.05, -0.02, -1.0).normalized();
        let hit = s.trace(&Ray::new(o, d)).unwrap();
        let t_plane = (-0.5 - o.z) / d.z;
        assert!((hit.t - t_plane).abs() < 2.0 * TRACE_EPS, "{} vs {t_plane}", hit.t);
        assert!((hit.normal - Vec3::Z).norm() < 1e-6);
    }

    #[test]
    fn closed_room_has_no_misses_and_consistent_gt() {
        let s = SceneSpec::default_room();
        let cams = default_cameras();
        for cam in cams.iter().take(4) {
            let v = render_gt_view(&s, cam);
            assert!(v.depth.iter().all(|d| d.is_some()), "a pixel missed");
            for k in 0..v.depth.len() {
                let ray = cam.pixel_center_ray(k % cam.width, k / cam.width);
                let p = ray.at(v.depth[k].unwrap());
                assert!(analytic_sdf(&s, p).abs() < TRACE_EPS);
                let n = v.normal[k].unwrap();
                assert!((n.norm() - 1.0).abs() < 1e-9);
                let g = s.gradient(p).normalized();
                assert!(n.dot(g).clamp(-1.0, 1.0).acos().to_degrees() < 1.0);
                assert_eq!(v.depth[k], s.trace(&ray).map(|h| h.t));
            }
        }
    }

    #[test]
    fn closed_form_intersection_agrees_with_sphere_tracing() {
        let s = SceneSpec::default_room();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut compared = 0;
        for _ in 0..2000 {
            let o = Vec3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.3..0.9));
            if s.sdf(o) <= 0.01 {
                continue;
            }
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let ray = Ray::new(o, d);
            let exact = s.intersect(&ray).unwrap();
            assert!(s.sdf(exact.point).abs() < 1e-9);
            if let Some(h) = s.sphere_trace(&ray, 100_000, TRACE_EPS) {
                // the stopping rule bounds distance to the surface, i.e. the offset along the normal
                let along_normal = (h.t - exact.t).abs() * exact.normal.dot(ray.direction).abs();
                assert!(along_normal < 2.0 * TRACE_EPS, "{} vs {}", h.t, exact.t);
                compared += 1;
            }
        }
        assert!(compared > 1000);
    }

    #[test]
    fn flat_wall_view_is_constant_colour() {
        let s = empty_room();
        let pose = Pose::look_at(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), Vec3::Z).unwrap();
        let cam = CameraModel::new(40.0, 40.0, 16.0, 16.0, 32, 32, pose).unwrap();
        let v = render_gt_view(&s, &cam);
        assert!(v.image.data.iter().all(|c| *c == v.image.data[0]));
    }

    #[test]
    fn noiseless_correspondences_triangulate_exactly() {
        let s = SceneSpec::default_room();
        let cams = default_cameras();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = make_correspondences(&s, &cams, 100, 0.0, 2, &mut rng);
        assert!(m.matches.len() > 50);
        let map = crate::sparse_depth::triangulate_matches(&m.matches, &cams, 1e-6).unwrap();
        assert_eq!(map.stats.accepted, m.matches.len());
        let mut per_view = vec![0usize; cams.len()];
        for (c, (da, db)) in m.matches.iter().zip(&m.depths) {
            let a = map.views[c.view_a][per_view[c.view_a]];
            per_view[c.view_a] += 1;
            let b = map.views[c.view_b][per_view[c.view_b]];
            per_view[c.view_b] += 1;
            assert!((a.d_app - da).abs() < 1e-6 && (b.d_app - db).abs() < 1e-6);
        }
        for (c, p) in m.matches.iter().zip(&m.points) {
            assert!(s.visible_from(&cams[c.view_a], *p).is_some());
            assert!(s.visible_from(&cams[c.view_b], *p).is_some());
        }
        let again = make_correspondences(&s, &cams, 100, 0.0, 2, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(again, m);
    }

    #[test]
    fn gt_points_lie_on_surface() {
        let s = SceneSpec::default_room();
        let cams = default_cameras();
        let pts = gt_point_cloud(&s, &cams, 500, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(pts.len(), 500);
        assert!(pts.iter().all(|p| analytic_sdf(&s, *p).abs() < 1e-4));
        assert_eq!(pts, gt_point_cloud(&s, &cams, 500, &mut ChaCha8Rng::seed_from_u64(2)));
    }

    #[test]
    fn default_scene_feeds_both_constraints() {
        let s = SceneSpec::default_room();
        let views = render_gt_views(&s, &default_cameras());
        let mut flat = 0usize;
        let mut total = 0usize;
        let mut corners = 0usize;
        for v in &views {
            for (k, prim) in v.primitive.iter().enumerate() {
                let ray = v.camera.pixel_center_ray(k % v.camera.width, k / v.camera.width);
                let p = ray.at(v.depth[k].unwrap());
                let prim = &s.primitives[prim.unwrap()];
                // large planes: room faces and the table top
                if matches!(prim.shape, Shape::Box { .. }) && prim.is_flat_at(p) {
                    flat += 1;
                }
                total += 1;
            }
            corners += crate::sparse_depth::detect_corners(&v.image.to_gray(), 1000, 2).len();
        }
        let frac = flat as f64 / total as f64;
        assert!(frac >= 0.3, "flat fraction {frac}");
        assert!(corners >= 500, "{corners} corners");
    }

    #[test]
    fn box_area_and_samples() {
        let b = Shape::Box { min: Vec3::new(0.0, 0.0, 0.0), max: Vec3::new(1.0, 2.0, 3.0) };
        assert_eq!(b.area(), 22.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(b.sdf(b.sample_surface(&mut rng)).abs() < 1e-12);
        }
    }
}
