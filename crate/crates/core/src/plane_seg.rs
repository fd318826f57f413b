//! Large-plane supervision: graph-based segmentation, size filtering, the
//! floor-aligned normal loss and its joint form with the plane probability.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::image::{convolve_separable, gaussian_kernel, RgbImage};
use crate::nn::{Tape, Var};

pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    pub sigma: f64,
    /// Threshold scale on the 0-255 colour range.
    pub k: f64,
    pub min_size: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 500.0,
            min_size: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    /// Segment id per pixel, ids numbered by first appearance in row-major order.
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

impl SegmentLabelMap {
    pub fn num_segments(&self) -> usize {
        self.sizes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    /// Whether each segment was kept.
    pub kept: Vec<bool>,
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins two roots; the larger (or, on ties, the lower index) survives.
    fn join(&mut self, a: usize, b: usize, w: f64) -> usize {
        let (keep, gone) = if self.size[a] > self.size[b] || (self.size[a] == self.size[b] && a < b) {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[gone] = keep;
        self.size[keep] += self.size[gone];
        self.internal[keep] = w;
        keep
    }
}

fn relabel(width: usize, height: usize, mut root_of: impl FnMut(usize) -> usize) -> SegmentLabelMap {
    let n = width * height;
    let mut id_of = std::collections::HashMap::new();
    let mut labels = Vec::with_capacity(n);
    let mut sizes = Vec::new();
    for i in 0..n {
        let next = id_of.len() as u32;
        let id = *id_of.entry(root_of(i)).or_insert(next);
        if id as usize == sizes.len() {
            sizes.push(0);
        }
        sizes[id as usize] += 1;
        labels.push(id);
    }
    SegmentLabelMap { width, height, labels, sizes }
}

pub fn felzenszwalb_segment(img: &RgbImage, params: &SegmentParams) -> Result<SegmentLabelMap> {
    if img.is_empty() {
        return Err(Error::Domain("cannot segment an empty image".into()));
    }
    if !(params.k > 0.0) {
        return Err(Error::Domain("segmentation threshold k must be positive".into()));
    }
    let (w, h) = (img.width, img.height);
    let kernel = gaussian_kernel(params.sigma);
    let channels: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let ch: Vec<f64> = img.data.iter().map(|p| p[c] * 255.0).collect();
            if params.sigma > 0.0 {
                convolve_separable(&ch, w, h, &kernel)
            } else {
                ch
            }
        })
        .collect();
    let diff = |a: usize, b: usize| -> f64 { (0..3).map(|c| (channels[c][a] - channels[c][b]).powi(2)).sum::<f64>().sqrt() };

    let mut edges = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                edges.push((i, i + 1));
            }
            if y + 1 < h {
                edges.push((i, i + w));
            }
            if x + 1 < w && y + 1 < h {
                edges.push((i, i + w + 1));
            }
            if x + 1 < w && y > 0 {
                edges.push((i, i - w + 1));
            }
        }
    }
    let mut weighted: Vec<(f64, usize, usize)> = edges.into_iter().map(|(a, b)| (diff(a, b), a, b)).collect();
    // stable: equal weights keep construction order
    weighted.sort_by(|p, q| p.0.total_cmp(&q.0));

    let mut ds = DisjointSet::new(w * h);
    let threshold = |ds: &DisjointSet, r: usize| ds.internal[r] + params.k / ds.size[r] as f64;
    for &(wt, a, b) in &weighted {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && wt <= threshold(&ds, ra).min(threshold(&ds, rb)) {
            ds.join(ra, rb, wt);
        }
    }
    for &(wt, a, b) in &weighted {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < params.min_size || ds.size[rb] < params.min_size) {
            let keep_int = ds.internal[ra].max(ds.internal[rb]).max(wt);
            let r = ds.join(ra, rb, wt);
            ds.internal[r] = keep_int;
        }
    }
    let coarse = relabel(w, h, |i| ds.find(i));
    Ok(enforce_four_connectivity(coarse, &channels, params.min_size))
}

/// Splits segments that are only diagonally connected into 4-connected
/// pieces, then folds pieces below `min_size` into the 4-adjacent piece with
/// the closest mean colour.
fn enforce_four_connectivity(map: SegmentLabelMap, channels: &[Vec<f64>], min_size: usize) -> SegmentLabelMap {
    let (w, h) = (map.width, map.height);
    let n = w * h;
    let mut ds = DisjointSet::new(n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if map.labels[i] == map.labels[j] {
                    let (a, b) = (ds.find(i), ds.find(j));
                    if a != b {
                        ds.join(a, b, 0.0);
                    }
                }
            }
        }
    }
    let mut mean = vec![[0.0f64; 3]; n];
    for i in 0..n {
        let r = ds.find(i);
        for c in 0..3 {
            mean[r][c] += channels[c][i];
        }
    }
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                    let (a, b) = (ds.find(i), ds.find(j));
                    if a == b || (ds.size[a] >= min_size && ds.size[b] >= min_size) {
                        continue;
                    }
                    let (sa, sb) = (ds.size[a] as f64, ds.size[b] as f64);
                    let d: f64 = (0..3).map(|c| (mean[a][c] / sa - mean[b][c] / sb).powi(2)).sum();
                    // smallest piece first, then closest colour
                    let small = ds.size[a].min(ds.size[b]) as f64;
                    let key = small * 1e12 + d;
                    if best.is_none_or(|(_, _, k)| key < k) {
                        best = Some((a, b, key));
                    }
                }
            }
        }
        let Some((a, b, _)) = best else { break };
        let total = [mean[a][0] + mean[b][0], mean[a][1] + mean[b][1], mean[a][2] + mean[b][2]];
        let r = ds.join(a, b, 0.0);
        mean[r] = total;
    }
    relabel(w, h, |i| ds.find(i))
}

pub fn filter_large_planes(labels: &SegmentLabelMap, min_fraction: f64) -> Result<PlaneMask> {
    if !(min_fraction > 0.0 && min_fraction < 1.0) {
        return Err(Error::Domain(format!("min_fraction {min_fraction} outside (0, 1)")));
    }
    let total = labels.labels.len() as f64;
    let kept: Vec<bool> = labels.sizes.iter().map(|&s| s as f64 >= min_fraction * total).collect();
    Ok(PlaneMask {
        width: labels.width,
        height: labels.height,
        mask: labels.labels.iter().map(|&l| kept[l as usize]).collect(),
        kept,
    })
}

fn nearest_lattice(d: f64) -> f64 {
    [-1.0, 0.0, 1.0]
        .into_iter()
        .min_by(|a: &f64, b: &f64| (a - d).abs().total_cmp(&(b - d).abs()))
        .unwrap()
}

/// `min_{i ∈ {-1, 0, 1}} |i − n·n_f|` for plain vectors.
pub fn plane_loss_value(n: Vec3, floor: Vec3) -> f64 {
    let d = n.dot(floor);
    (d - nearest_lattice(d)).abs()
}

/// Recorded plane loss; the gradient flows through the nearest lattice branch.
pub fn plane_loss(tape: &mut Tape, n: [Var; 3], floor: Vec3) -> Var {
    let terms = [tape.scale(n[0], floor.x), tape.scale(n[1], floor.y), tape.scale(n[2], floor.z)];
    let d = tape.sum(&terms);
    let i = nearest_lattice(tape.value(d));
    let shifted = tape.add_const(d, -i);
    tape.abs(shifted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbabilityTerm {
    /// `−Σ P log P̂` only.
    #[default]
    PositiveOnly,
    /// Adds `−Σ (1 − P) log(1 − P̂)`.
    FullCrossEntropy,
}

/// `Σ_{P(r)=1} P̂·L_pla − Σ P log P̂`, with `P̂` clamped to `[ε, 1 − ε]`.
pub fn joint_loss(tape: &mut Tape, p_hat: &[Var], l_pla: &[Var], mask: &[bool], term: ProbabilityTerm) -> Result<Var> {
    if p_hat.len() != l_pla.len() || p_hat.len() != mask.len() {
        return Err(Error::Domain("joint loss inputs differ in length".into()));
    }
    let mut terms = Vec::with_capacity(2 * p_hat.len());
    for ((&p, &l), &m) in p_hat.iter().zip(l_pla).zip(mask) {
        let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        if m {
            terms.push(tape.mul(pc, l));
            let lp = tape.ln(pc);
            terms.push(tape.neg(lp));
        } else if term == ProbabilityTerm::FullCrossEntropy {
            let q = tape.scale(pc, -1.0);
            let q = tape.add_const(q, 1.0);
            let lq = tape.ln(q);
            terms.push(tape.neg(lq));
        }
    }
    Ok(tape.sum(&terms))
}
