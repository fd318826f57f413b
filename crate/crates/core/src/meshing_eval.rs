//! Iso-surface extraction by marching cubes, surface sampling, and
//! point-cloud reconstruction metrics.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Projection, Vec3};
use crate::mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};

/// Triangles below this area are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl GridBounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let ok = min.is_finite() && max.is_finite() && (0..3).all(|k| max[k] > min[k]);
        if !ok {
            return Err(Error::Domain(format!("empty or invalid bounds {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Result<Self> {
        Self::new(Vec3::new(-half, -half, -half), Vec3::new(half, half, half))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub normals: Option<Vec<Vec3>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Volume enclosed by a closed mesh, positive when faces wind outward.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    /// Drops zero-area and repeated-index triangles, then unreferenced vertices.
    pub fn remove_degenerate(&mut self) {
        let keep: Vec<[u32; 3]> = (0..self.triangles.len())
            .filter(|&t| {
                let [a, b, c] = self.triangles[t];
                a != b && b != c && a != c && self.triangle_area(t) >= DEGENERATE_AREA
            })
            .map(|t| self.triangles[t])
            .collect();
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        let mut norms = Vec::new();
        let mut tris = Vec::with_capacity(keep.len());
        for tri in keep {
            let mut out = [0u32; 3];
            for (k, &i) in tri.iter().enumerate() {
                let i = i as usize;
                if remap[i] == u32::MAX {
                    remap[i] = verts.len() as u32;
                    verts.push(self.vertices[i]);
                    if let Some(n) = &self.normals {
                        norms.push(n[i]);
                    }
                }
                out[k] = remap[i];
            }
            tris.push(out);
        }
        self.vertices = verts;
        self.triangles = tris;
        if self.normals.is_some() {
            self.normals = Some(norms);
        }
    }

    /// Area-weighted vertex normals from the face winding.
    pub fn compute_normals(&mut self) {
        let mut acc = vec![Vec3::ZERO; self.vertices.len()];
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(t);
            let n = (b - a).cross(c - a);
            for &i in &self.triangles[t] {
                acc[i as usize] += n;
            }
        }
        self.normals = Some(
            acc.into_iter()
                .map(|n| if n.norm() > 0.0 { n.normalized() } else { n })
                .collect(),
        );
    }

    /// Each undirected edge's number of incident faces.
    pub fn edge_valence(&self) -> HashMap<(u32, u32), usize> {
        let mut m = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().position(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Domain(format!("triangle {t} indexes past {n} vertices")));
        }
        if let Some(nm) = &self.normals {
            if nm.len() != self.vertices.len() {
                return Err(Error::Domain(format!("{} normals for {} vertices", nm.len(), n)));
            }
        }
        Ok(())
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extracts the zero level set of `sdf` sampled on a `res³` lattice spanning `bounds`.
///
/// `sdf` receives batches of points (one z-slice at a time, slices in parallel).
/// Vertices on shared lattice edges are merged, so closed level sets that stay
/// inside the bounds give watertight meshes with faces wound toward positive values.
pub fn marching_cubes<F>(sdf: F, bounds: GridBounds, res: usize) -> Result<TriangleMesh>
where
    F: Fn(&[Vec3]) -> Result<Vec<f64>> + Sync,
{
    if res < 2 {
        return Err(Error::Domain(format!("marching cubes needs resolution >= 2, got {res}")));
    }
    let step = (bounds.max - bounds.min) / (res - 1) as f64;
    let point = |i: usize, j: usize, k: usize| {
        bounds.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    };
    let slices: Vec<Vec<f64>> = (0..res)
        .into_par_iter()
        .map(|k| {
            let pts: Vec<Vec3> = (0..res)
                .flat_map(|j| (0..res).map(move |i| (i, j)))
                .map(|(i, j)| point(i, j, k))
                .collect();
            let v = sdf(&pts)?;
            if v.len() != pts.len() {
                return Err(Error::Domain(format!("sdf returned {} values for {} points", v.len(), pts.len())));
            }
            if let Some(p) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite sdf at {:?}", pts[p])));
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let value = |i: usize, j: usize, k: usize| slices[k][j * res + i];

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..res - 1 {
        for j in 0..res - 1 {
            for i in 0..res - 1 {
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    vals[c] = value(i + off[0], j + off[1], k + off[2]);
                    if vals[c] < 0.0 {
                        case |= 1 << c;
                    }
                }
                let crossed = EDGE_TABLE[case];
                if crossed == 0 {
                    continue;
                }
                let mut ids = [0u32; 12];
                for (e, [c0, c1]) in EDGES.iter().enumerate() {
                    if crossed & (1 << e) == 0 {
                        continue;
                    }
                    let (o0, o1) = (CORNERS[*c0], CORNERS[*c1]);
                    let g0 = [i + o0[0], j + o0[1], k + o0[2]];
                    let g1 = [i + o1[0], j + o1[1], k + o1[2]];
                    let axis = (0..3).find(|&a| g0[a] != g1[a]).unwrap();
                    let lo = if g0[axis] < g1[axis] { g0 } else { g1 };
                    let key = ((lo[2] * res + lo[1]) * res + lo[0], axis);
                    ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (v0, v1) = (vals[*c0], vals[*c1]);
                        let t = if v0 == v1 { 0.5 } else { v0 / (v0 - v1) };
                        let p0 = point(g0[0], g0[1], g0[2]);
                        let p1 = point(g1[0], g1[1], g1[2]);
                        mesh.vertices.push(p0 + (p1 - p0) * t.clamp(0.0, 1.0));
                        (mesh.vertices.len() - 1) as u32
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                    // Table winding faces the negative side; swap to face outward.
                    mesh.triangles
                        .push([ids[tri[0] as usize], ids[tri[2] as usize], ids[tri[1] as usize]]);
                }
            }
        }
    }
    mesh.remove_degenerate();
    Ok(mesh)
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_mesh_surface<R: Rng + ?Sized>(mesh: &TriangleMesh, n_points: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    mesh.validate()?;
    if n_points == 0 {
        return Err(Error::Domain("asked for zero surface samples".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        let a = mesh.triangle_area(t);
        total += if a >= DEGENERATE_AREA { a } else { 0.0 };
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::Domain("cannot sample an empty mesh".into()));
    }
    Ok((0..n_points)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let t = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2)
        })
        .collect())
}

/// Exact nearest-neighbour distances over a uniform bucket grid.
pub struct PointGrid {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl PointGrid {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("nearest-neighbour grid over an empty cloud".into()));
        }
        if let Some(p) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::Domain(format!("point {p} is not finite")));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        let ext = hi - lo;
        let diag = ext.norm().max(1e-9);
        // About two points per occupied cell for surface-like clouds.
        let cell = (diag / (points.len() as f64 / 2.0).sqrt()).max(diag * 1e-4);
        let dims = [0, 1, 2].map(|k| ((ext[k] / cell).floor() as usize + 1).min(1 << 10));
        let cell = (0..3).map(|k| ext[k] / dims[k] as f64).fold(cell, f64::max);
        let mut grid = Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|&p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0usize; ncell + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for c in 1..=ncell {
            counts[c] += counts[c - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        Ok(grid)
    }

    fn cell_of(&self, p: Vec3) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.origin[k]) / self.cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[k] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Distance from `q` to the closest stored point.
    pub fn nearest_distance(&self, q: Vec3) -> f64 {
        let c = self.cell_of(q).map(|v| v as isize);
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let cc = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|k| cc[k] < 0 || cc[k] >= self.dims[k] as isize) {
                            continue;
                        }
                        let f = self.flat(cc.map(|v| v as usize));
                        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
                            best = best.min(q.distance(self.points[i]));
                        }
                    }
                }
            }
            // Unvisited cells are at least r cells away along some axis.
            if best <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Nearest-neighbour distance from every query, in query order.
pub fn nearest_distances(queries: &[Vec3], targets: &[Vec3]) -> Result<Vec<f64>> {
    let grid = PointGrid::new(targets)?;
    Ok(queries.par_iter().map(|&q| grid.nearest_distance(q)).collect())
}

/// Keeps points that some view observes: inside its image, in front of the
/// camera, and no farther along the pixel ray than the reference depth plus
/// `margin`. `depths` are per-view ray distances, `None` where nothing was hit.
pub fn cull_to_observed(points: &[Vec3], cams: &[CameraModel], depths: &[Vec<Option<f64>>], margin: f64) -> Result<Vec<Vec3>> {
    if cams.len() != depths.len() {
        return Err(Error::Domain(format!("{} depth maps for {} cameras", depths.len(), cams.len())));
    }
    for (i, (c, d)) in cams.iter().zip(depths).enumerate() {
        if d.len() != c.width * c.height {
            return Err(Error::Domain(format!("depth map {i} has {} pixels, expected {}", d.len(), c.width * c.height)));
        }
    }
    let seen = |p: Vec3| {
        cams.iter().zip(depths).any(|(cam, d)| match cam.project_point(p) {
            Projection::Visible { u, v, .. } if cam.contains(u, v) => {
                d[v as usize * cam.width + u as usize].is_some_and(|ref_d| (p - cam.center()).norm() <= ref_d + margin)
            }
            _ => false,
        })
    };
    Ok(points.par_iter().copied().filter(|&p| seen(p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub completeness: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub tau: f64,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "accuracy,completeness,precision,recall,f_score,tau,n_pred,n_gt";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.accuracy, self.completeness, self.precision, self.recall, self.f_score, self.tau, self.n_pred, self.n_gt
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy      {:.5}", self.accuracy)?;
        writeln!(f, "completeness  {:.5}", self.completeness)?;
        writeln!(f, "precision     {:.4}", self.precision)?;
        writeln!(f, "recall        {:.4}", self.recall)?;
        writeln!(f, "f-score       {:.4}", self.f_score)?;
        write!(f, "tau {} | {} predicted, {} reference points", self.tau, self.n_pred, self.n_gt)
    }
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn eval_metrics(pred: &[Vec3], gt: &[Vec3], tau: f64) -> Result<MetricsReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Domain(format!(
            "metrics need two nonempty clouds ({} predicted, {} reference)",
            pred.len(),
            gt.len()
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("threshold must be positive, got {tau}")));
    }
    let d_pred = nearest_distances(pred, gt)?;
    let d_gt = nearest_distances(gt, pred)?;
    Ok(report_from_distances(&d_pred, &d_gt, tau))
}

/// Metrics from precomputed pred→gt and gt→pred distances.
pub fn report_from_distances(d_pred: &[f64], d_gt: &[f64], tau: f64) -> MetricsReport {
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let below = |d: &[f64]| d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64;
    let (precision, recall) = (below(d_pred), below(d_gt));
    MetricsReport {
        accuracy: mean(d_pred),
        completeness: mean(d_gt),
        precision,
        recall,
        f_score: f_score(precision, recall),
        tau,
        n_pred: d_pred.len(),
        n_gt: d_gt.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(r: f64) -> impl Fn(&[Vec3]) -> Result<Vec<f64>> + Sync {
        move |p: &[Vec3]| Ok(p.iter().map(|x| x.norm() - r).collect())
    }

    #[test]
    fn sphere_vertices_lie_near_radius() {
        let res = 64;
        let h = 2.0 / (res - 1) as f64;
        let mesh = marching_cubes(sphere(0.5), GridBounds::cube(1.0).unwrap(), res).unwrap();
        assert!(mesh.triangles.len() > 1000);
        for v in &mesh.vertices {
            let r = v.norm();
            assert!((r - 0.5).abs() <= 2.0 * h, "vertex radius {r}");
        }
        // Closed, outward-wound.
        assert!(mesh.edge_valence().values().all(|&n| n == 2));
        let vol = mesh.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((vol - exact).abs() < 0.02 * exact, "{vol} vs {exact}");
    }

    #[test]
    fn constant_fields_give_empty_meshes() {
        let b = GridBounds::cube(1.0).unwrap();
        let pos = marching_cubes(|p: &[Vec3]| Ok(vec![1.0; p.len()]), b, 8).unwrap();
        let neg = marching_cubes(|p: &[Vec3]| Ok(vec![-1.0; p.len()]), b, 8).unwrap();
        assert!(pos.is_empty() && neg.is_empty());
        assert!(marching_cubes(sphere(0.5), b, 1).is_err());
    }

    #[test]
    fn box_area_close_to_analytic() {
        let half = Vec3::new(0.5, 0.3, 0.4);
        let sdf = move |p: &[Vec3]| {
            Ok(p.iter()
                .map(|x| {
                    let q = x.abs() - half;
                    let out = q.map(|v| v.max(0.0)).norm();
                    out + q.x.max(q.y).max(q.z).min(0.0)
                })
                .collect())
        };
        let mesh = marching_cubes(sdf, GridBounds::cube(1.0).unwrap(), 128).unwrap();
        let exact = 8.0 * (half.x * half.y + half.y * half.z + half.x * half.z);
        let area = mesh.surface_area();
        assert!((area - exact).abs() < 0.05 * exact, "{area} vs {exact}");
    }

    fn tri_mesh(tris: &[[Vec3; 3]]) -> TriangleMesh {
        TriangleMesh {
            vertices: tris.iter().flatten().copied().collect(),
            triangles: (0..tris.len() as u32).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect(),
            normals: None,
        }
    }

    #[test]
    fn samples_stay_inside_a_single_triangle() {
        let (a, b, c) = (Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0));
        let mesh = tri_mesh(&[[a, b, c]]);
        let pts = sample_mesh_surface(&mesh, 2000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in pts {
            let (l1, l2) = (p.x, p.y / 2.0);
            assert!(l1 >= 0.0 && l2 >= 0.0 && l1 + l2 <= 1.0 + 1e-12 && p.z == 0.0);
        }
    }

    #[test]
    fn samples_follow_area_ratio() {
        let o = Vec3::ZERO;
        let big = [o, Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)];
        let small = [Vec3::new(0.0, 0.0, 5.0), Vec3::new(1.0, 0.0, 5.0), Vec3::new(0.0, 1.0, 5.0)];
        let mesh = tri_mesh(&[big, small]);
        let n = 10_000;
        let pts = sample_mesh_surface(&mesh, n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let on_big = pts.iter().filter(|p| p.z < 1.0).count() as f64;
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((on_big - 0.75 * n as f64).abs() < 3.0 * sd, "{on_big}");
        let again = sample_mesh_surface(&mesh, n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(pts, again);
        assert!(sample_mesh_surface(&TriangleMesh::default(), 10, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn degenerate_triangles_are_dropped() {
        let o = Vec3::ZERO;
        let mut mesh = tri_mesh(&[
            [o, Vec3::X, Vec3::Y],
            [o, Vec3::X, Vec3::X * 2.0],
        ]);
        mesh.remove_degenerate();
        assert_eq!(mesh.triangles.len(), 1);
        assert_eq!(mesh.vertices.len(), 3);
        mesh.validate().unwrap();
    }

    #[test]
    fn identical_and_shifted_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let m = eval_metrics(&pts, &pts, 0.05).unwrap();
        assert_eq!((m.accuracy, m.completeness), (0.0, 0.0));
        assert_eq!((m.precision, m.recall, m.f_score), (1.0, 1.0, 1.0));

        let line: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let shift: Vec<Vec3> = line.iter().map(|&p| p + Vec3::Z * 0.5).collect();
        let m = eval_metrics(&shift, &line, 0.05).unwrap();
        assert!((m.accuracy - 0.5).abs() < 1e-12 && (m.completeness - 0.5).abs() < 1e-12);
        assert_eq!((m.precision, m.recall, m.f_score), (0.0, 0.0, 0.0));
        assert!(eval_metrics(&[], &line, 0.05).is_err());
        assert!(eval_metrics(&line, &line, 0.0).is_err());
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud: Vec<Vec3> = (0..3000)
            .map(|_| {
                let d = Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                d.normalized() * 0.7
            })
            .collect();
        let grid = PointGrid::new(&cloud).unwrap();
        for _ in 0..1000 {
            let q = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let brute = cloud.iter().map(|&p| q.distance(p)).fold(f64::INFINITY, f64::min);
            assert_eq!(grid.nearest_distance(q), brute);
        }
    }
}
