//! On-disk formats: PPM/PGM images, pose/intrinsics/match text files, sparse
//! depth dumps, segment listings, OBJ meshes, XYZ clouds, config files,
//! checkpoints and dataset directories.
//!
//! Reals are written in Rust's shortest round-trip form, so every text format
//! reads back to the exact in-memory value.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose, Vec3};
use crate::image::RgbImage;
use crate::meshing_eval::TriangleMesh;
use crate::nn::AdamState;
use crate::plane_seg::{PlaneMask, SegmentLabelMap};
use crate::sparse_depth::{Correspondence, DepthSample, SparseDepthMap, TriangulationStats};
use crate::training::{Checkpoint, LogRow, TrainConfig, TrainObserver, TrainState};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Non-empty, comment-stripped lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_reals(path: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::data(path, format!("line {line_no}: unparsable number in '{line}'")))?;
    if vals.len() != expect {
        return Err(Error::data(path, format!("line {line_no}: expected {expect} numbers, got {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(path, format!("line {line_no}: non-finite value")));
    }
    Ok(vals)
}

// ---- images ----

#[derive(Debug)]
struct Pnm {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data: Vec<u8>,
}

fn parse_pnm(path: &Path, bytes: &[u8], expect_magic: &[u8; 2]) -> Result<Pnm> {
    if bytes.len() < 2 || &bytes[..2] != expect_magic {
        return Err(Error::data(
            path,
            format!("bad magic number, expected {}", String::from_utf8_lossy(expect_magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(path, "truncated or malformed header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::data(path, "header number out of range"))?;
        fields.push(v);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data(path, "missing whitespace after header"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::data(path, format!("invalid header {width}x{height} maxval {maxval}")));
    }
    Ok(Pnm {
        magic: *expect_magic,
        width,
        height,
        maxval,
        data: bytes[pos..].to_vec(),
    })
}

fn samples(path: &Path, pnm: &Pnm, channels: usize) -> Result<Vec<u16>> {
    let n = pnm.width * pnm.height * channels;
    let wide = pnm.maxval > 255;
    let need = if wide { 2 * n } else { n };
    if pnm.data.len() < need {
        return Err(Error::data(
            path,
            format!("{} pixel data truncated: {} of {need} bytes", String::from_utf8_lossy(&pnm.magic), pnm.data.len()),
        ));
    }
    Ok(if wide {
        pnm.data[..need].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        pnm.data[..n].iter().map(|&b| b as u16).collect()
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().flat_map(|c| c.map(quantize)));
    write_bytes(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pnm = parse_pnm(path, &bytes, b"P6")?;
    let s = samples(path, &pnm, 3)?;
    let m = pnm.maxval as f64;
    let data = s.chunks(3).map(|c| [c[0] as f64 / m, c[1] as f64 / m, c[2] as f64 / m]).collect();
    RgbImage::from_data(pnm.width, pnm.height, data)
}

/// 16-bit depth image in millimetres; 0 marks "no surface".
pub fn write_depth_pgm(path: &Path, width: usize, height: usize, depth: &[Option<f64>]) -> Result<()> {
    if depth.len() != width * height {
        return Err(Error::Domain(format!("{} depths for a {width}x{height} image", depth.len())));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for d in depth {
        let mm = d.map_or(0.0, |d| (d * 1000.0).round().clamp(1.0, 65535.0)) as u16;
        out.extend(mm.to_be_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_depth_pgm(path: &Path) -> Result<(usize, usize, Vec<Option<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pnm = parse_pnm(path, &bytes, b"P5")?;
    let s = samples(path, &pnm, 1)?;
    let d = s.iter().map(|&v| (v > 0).then(|| v as f64 / 1000.0)).collect();
    Ok((pnm.width, pnm.height, d))
}

/// Segment ids modulo 256 as an 8-bit PGM.
pub fn write_label_pgm(path: &Path, labels: &SegmentLabelMap) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend(labels.labels.iter().map(|&l| (l % 256) as u8));
    write_bytes(path, &out)
}

/// Binary plane mask as an 8-bit PGM (255 = large plane).
pub fn write_mask_pgm(path: &Path, mask: &PlaneMask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    write_bytes(path, &out)
}

pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pnm = parse_pnm(path, &bytes, b"P5")?;
    let s = samples(path, &pnm, 1)?;
    Ok((pnm.width, pnm.height, s.iter().map(|&v| v > 0).collect()))
}

/// `id size kept` per segment.
pub fn segments_text(labels: &SegmentLabelMap, mask: &PlaneMask) -> String {
    labels
        .sizes
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i} {s} {}\n", u8::from(mask.kept[i])))
        .collect()
}

// ---- cameras ----

pub fn poses_text(poses: &[Pose]) -> String {
    poses
        .iter()
        .map(|p| p.to_matrix().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<Pose>> {
    content_lines(text)
        .map(|(n, l)| {
            let v = parse_reals(path, n, l, 16)?;
            let m: [f64; 16] = v.try_into().unwrap();
            Pose::from_matrix(&m).map_err(|e| Error::data(path, format!("line {n}: {e}")))
        })
        .collect()
}

pub fn intrinsics_line(c: &CameraModel) -> String {
    format!("{} {} {} {} {} {}\n", c.fx, c.fy, c.cx, c.cy, c.width, c.height)
}

/// One line when every camera shares intrinsics, else one line per camera.
pub fn intrinsics_text(cams: &[CameraModel]) -> String {
    let lines: Vec<String> = cams.iter().map(intrinsics_line).collect();
    if lines.windows(2).all(|w| w[0] == w[1]) {
        lines.into_iter().take(1).collect()
    } else {
        lines.concat()
    }
}

/// `(fx, fy, cx, cy, width, height)` per line.
pub fn parse_intrinsics(path: &Path, text: &str) -> Result<Vec<(f64, f64, f64, f64, usize, usize)>> {
    content_lines(text)
        .map(|(n, l)| {
            let v = parse_reals(path, n, l, 6)?;
            let dim = |x: f64| {
                if x >= 1.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(Error::data(path, format!("line {n}: image size must be a positive integer, got {x}")))
                }
            };
            Ok((v[0], v[1], v[2], v[3], dim(v[4])?, dim(v[5])?))
        })
        .collect()
}

pub fn matches_text(matches: &[Correspondence]) -> String {
    matches
        .iter()
        .map(|m| {
            let mut l = format!("{} {} {} {} {} {}", m.view_a, m.view_b, m.ua, m.va, m.ub, m.vb);
            if let Some(s) = m.score {
                let _ = write!(l, " {s}");
            }
            l + "\n"
        })
        .collect()
}

pub fn parse_matches(path: &Path, text: &str) -> Result<Vec<Correspondence>> {
    content_lines(text)
        .map(|(n, l)| {
            let cols = if l.split_whitespace().count() == 7 { 7 } else { 6 };
            let v = parse_reals(path, n, l, cols)?;
            let view = |x: f64| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(Error::data(path, format!("line {n}: view index must be a non-negative integer, got {x}")))
                }
            };
            Ok(Correspondence {
                view_a: view(v[0])?,
                view_b: view(v[1])?,
                ua: v[2],
                va: v[3],
                ub: v[4],
                vb: v[5],
                score: v.get(6).copied(),
            })
        })
        .collect()
}

pub fn sparse_depth_text(samples: &[DepthSample]) -> String {
    samples.iter().map(|s| format!("{} {} {} {}\n", s.u, s.v, s.d_app, s.gap)).collect()
}

pub fn parse_sparse_depth(path: &Path, text: &str) -> Result<Vec<DepthSample>> {
    content_lines(text)
        .map(|(n, l)| {
            let v = parse_reals(path, n, l, 4)?;
            if v[2] <= 0.0 {
                return Err(Error::data(path, format!("line {n}: depth must be positive")));
            }
            Ok(DepthSample { u: v[0], v: v[1], d_app: v[2], gap: v[3] })
        })
        .collect()
}

/// Writes `sparse_<view>.txt` per view into `dir`.
pub fn write_sparse_depth(dir: &Path, map: &SparseDepthMap) -> Result<()> {
    for (i, v) in map.views.iter().enumerate() {
        write_text(&dir.join(format!("sparse_{i}.txt")), &sparse_depth_text(v))?;
    }
    Ok(())
}

pub fn read_sparse_depth(dir: &Path, views: usize) -> Result<SparseDepthMap> {
    let mut out = SparseDepthMap {
        views: Vec::with_capacity(views),
        stats: TriangulationStats::default(),
    };
    for i in 0..views {
        let p = dir.join(format!("sparse_{i}.txt"));
        let list = parse_sparse_depth(&p, &read_text(&p)?)?;
        out.stats.accepted += list.len();
        out.views.push(list);
    }
    Ok(out)
}

// ---- geometry files ----

pub fn obj_text(mesh: &TriangleMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 40 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    if let Some(n) = &mesh.normals {
        for v in n {
            let _ = writeln!(s, "vn {} {} {}", v.x, v.y, v.z);
        }
    }
    let with_n = mesh.normals.is_some();
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| i + 1);
        if with_n {
            let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    s
}

/// Reads `v`, `vn` and triangular `f` records; other records are ignored.
pub fn parse_obj(path: &Path, text: &str) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let mut normals = Vec::new();
    for (n, line) in content_lines(text) {
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let rest: Vec<&str> = parts.collect();
        match tag {
            "v" | "vn" => {
                let v = parse_reals(path, n, &rest[..rest.len().min(3)].join(" "), 3)?;
                let p = Vec3::new(v[0], v[1], v[2]);
                if tag == "v" {
                    mesh.vertices.push(p);
                } else {
                    normals.push(p);
                }
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(Error::data(path, format!("line {n}: only triangles are supported")));
                }
                let mut tri = [0u32; 3];
                for (k, r) in rest.iter().enumerate() {
                    let idx: i64 = r
                        .split('/')
                        .next()
                        .unwrap()
                        .parse()
                        .map_err(|_| Error::data(path, format!("line {n}: bad face index '{r}'")))?;
                    if idx < 1 {
                        return Err(Error::data(path, format!("line {n}: face indices are 1-based")));
                    }
                    tri[k] = (idx - 1) as u32;
                }
                mesh.triangles.push(tri);
            }
            _ => {}
        }
    }
    if !normals.is_empty() {
        mesh.normals = Some(normals);
    }
    mesh.validate().map_err(|e| Error::data(path, e.to_string()))?;
    Ok(mesh)
}

pub fn xyz_text(points: &[Vec3]) -> String {
    points.iter().map(|p| format!("{} {} {}\n", p.x, p.y, p.z)).collect()
}

pub fn parse_xyz(path: &Path, text: &str) -> Result<Vec<Vec3>> {
    content_lines(text)
        .map(|(n, l)| {
            let v = parse_reals(path, n, l, 3)?;
            Ok(Vec3::new(v[0], v[1], v[2]))
        })
        .collect()
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vec3>> {
    parse_xyz(path, &read_text(path)?)
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    parse_obj(path, &read_text(path)?)
}

// ---- config and checkpoints ----

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::parse(&read_text(path)?).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

const CHECKPOINT_MAGIC: &str = "sdfrecon-checkpoint 1";

pub fn checkpoint_text(ck: &Checkpoint) -> String {
    let a = &ck.adam;
    let mut s = String::with_capacity(ck.params.len() * 64);
    let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(s, "spec_hash {}", ck.spec_hash);
    let _ = writeln!(s, "step {}", ck.step);
    let _ = writeln!(s, "log_beta {}", ck.log_beta);
    let _ = writeln!(s, "adam {} {} {} {}", a.step, a.beta1, a.beta2, a.eps);
    let _ = writeln!(s, "params {}", ck.params.len());
    for i in 0..ck.params.len() {
        let _ = writeln!(s, "{} {} {}", ck.params[i], a.m[i], a.v[i]);
    }
    s
}

pub fn parse_checkpoint(path: &Path, text: &str) -> Result<Checkpoint> {
    let bad = |n: usize, m: &str| Error::data(path, format!("line {n}: {m}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::data(path, format!("truncated before {what}")));
    let (n, magic) = next("header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(n, "not a checkpoint file"));
    }
    let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
        let (n, l) = next(key)?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(n, &format!("expected '{key}'")));
        }
        Ok((n, parts.map(str::to_string).collect()))
    };
    let num = |n: usize, s: &str| s.parse::<f64>().map_err(|_| bad(n, &format!("bad number '{s}'")));
    let int = |n: usize, s: &str| s.parse::<u64>().map_err(|_| bad(n, &format!("bad integer '{s}'")));
    let (_, h) = field("spec_hash")?;
    let spec_hash = h.first().cloned().unwrap_or_default();
    let (n, s) = field("step")?;
    let step = int(n, s.first().map_or("", String::as_str))? as usize;
    let (n, lb) = field("log_beta")?;
    let log_beta = num(n, lb.first().map_or("", String::as_str))?;
    let (n, ad) = field("adam")?;
    if ad.len() != 4 {
        return Err(bad(n, "expected 'adam step beta1 beta2 eps'"));
    }
    let (n, pc) = field("params")?;
    let count = int(n, pc.first().map_or("", String::as_str))? as usize;
    let mut adam = AdamState::new(count);
    adam.step = int(n, &ad[0])?;
    adam.beta1 = num(n, &ad[1])?;
    adam.beta2 = num(n, &ad[2])?;
    adam.eps = num(n, &ad[3])?;
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let (n, l) = next("parameter rows")?;
        let v: Vec<&str> = l.split_whitespace().collect();
        if v.len() != 3 {
            return Err(bad(n, "expected 'value m v'"));
        }
        params.push(num(n, v[0])?);
        adam.m[i] = num(n, v[1])?;
        adam.v[i] = num(n, v[2])?;
    }
    Ok(Checkpoint {
        spec_hash,
        step,
        log_beta,
        params,
        adam,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(path, &read_text(path)?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_text(path, &checkpoint_text(ck))
}

// ---- dataset directories ----

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for (i, img) in ds.images.iter().enumerate() {
        write_ppm(&dir.join("images").join(format!("{i}.ppm")), img)?;
    }
    if let Some(depths) = &ds.depths {
        for (i, (d, c)) in depths.iter().zip(&ds.cameras).enumerate() {
            write_depth_pgm(&dir.join("depth").join(format!("{i}.pgm")), c.width, c.height, d)?;
        }
    }
    let poses: Vec<Pose> = ds.cameras.iter().map(|c| c.pose).collect();
    write_text(&dir.join("poses.txt"), &poses_text(&poses))?;
    write_text(&dir.join("intrinsics.txt"), &intrinsics_text(&ds.cameras))?;
    if let Some(g) = &ds.gt_points {
        write_text(&dir.join("gt_points.xyz"), &xyz_text(g))?;
    }
    if let Some(m) = &ds.matches {
        write_text(&dir.join("matches.txt"), &matches_text(m))?;
    }
    Ok(())
}

/// Loads a dataset directory eagerly. Every problem found is reported in one
/// error rather than stopping at the first.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut errors: Vec<String> = Vec::new();
    let mut note = |e: Error| errors.push(e.to_string());
    if !dir.is_dir() {
        return Err(Error::data(dir, "dataset directory does not exist"));
    }

    let poses_path = dir.join("poses.txt");
    let poses = read_text(&poses_path).and_then(|t| parse_poses(&poses_path, &t)).unwrap_or_else(|e| {
        note(e);
        Vec::new()
    });
    let intr_path = dir.join("intrinsics.txt");
    let intr = read_text(&intr_path).and_then(|t| parse_intrinsics(&intr_path, &t)).unwrap_or_else(|e| {
        note(e);
        Vec::new()
    });
    if !intr.is_empty() && intr.len() != 1 && intr.len() != poses.len() {
        note(Error::data(&intr_path, format!("{} lines for {} poses (expected 1 or one per pose)", intr.len(), poses.len())));
    }

    let image_dir = dir.join("images");
    let mut image_paths: Vec<(usize, PathBuf)> = Vec::new();
    match fs::read_dir(&image_dir) {
        Ok(rd) => {
            for entry in rd.flatten() {
                let p = entry.path();
                if p.extension().is_some_and(|e| e == "ppm") {
                    match p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) {
                        Some(i) => image_paths.push((i, p)),
                        None => note(Error::data(&p, "image names must be <index>.ppm")),
                    }
                }
            }
        }
        Err(e) => note(Error::io(&image_dir, e)),
    }
    image_paths.sort();
    for (k, (i, p)) in image_paths.iter().enumerate() {
        if *i != k {
            note(Error::data(p, format!("image indices are not contiguous from 0 (expected {k}.ppm)")));
            break;
        }
    }
    let images: Vec<Option<RgbImage>> = image_paths
        .iter()
        .map(|(_, p)| read_ppm(p).map_err(&mut note).ok())
        .collect();
    if !poses.is_empty() && images.len() != poses.len() {
        note(Error::data(dir, format!("{} images but {} poses", images.len(), poses.len())));
    }

    let mut cameras = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let Some(&(fx, fy, cx, cy, w, h)) = intr.get(i).or(intr.first()) else { break };
        match CameraModel::new(fx, fy, cx, cy, w, h, *pose) {
            Ok(c) => cameras.push(c),
            Err(e) => note(Error::data(&intr_path, format!("camera {i}: {e}"))),
        }
    }
    for (i, (img, cam)) in images.iter().zip(&cameras).enumerate() {
        if let Some(img) = img {
            if img.width != cam.width || img.height != cam.height {
                note(Error::data(
                    &image_paths[i].1,
                    format!("image is {}x{} but intrinsics say {}x{}", img.width, img.height, cam.width, cam.height),
                ));
            }
        }
    }

    let depth_dir = dir.join("depth");
    let depths = if depth_dir.is_dir() {
        let mut out = Vec::new();
        for (i, cam) in cameras.iter().enumerate() {
            let p = depth_dir.join(format!("{i}.pgm"));
            match read_depth_pgm(&p) {
                Ok((w, h, d)) if w == cam.width && h == cam.height => out.push(d),
                Ok((w, h, _)) => note(Error::data(&p, format!("depth is {w}x{h}, expected {}x{}", cam.width, cam.height))),
                Err(e) => note(e),
            }
        }
        Some(out)
    } else {
        None
    };

    let gt_path = dir.join("gt_points.xyz");
    let gt_points = gt_path.exists().then(|| read_xyz(&gt_path).map_err(&mut note).ok()).flatten();
    let m_path = dir.join("matches.txt");
    let matches = m_path
        .exists()
        .then(|| read_text(&m_path).and_then(|t| parse_matches(&m_path, &t)).map_err(&mut note).ok())
        .flatten();

    let images: Vec<RgbImage> = images.into_iter().flatten().collect();
    if errors.is_empty() {
        let ds = Dataset {
            cameras,
            images,
            depths,
            gt_points,
            matches,
        };
        for v in ds.violations() {
            errors.push(v);
        }
        if errors.is_empty() {
            return Ok(ds);
        }
    }
    Err(Error::data(dir, format!("{} problem(s):\n  {}", errors.len(), errors.join("\n  "))))
}

// ---- run directories ----

/// Writes the log CSV and numbered checkpoints into a run directory.
pub struct RunWriter {
    dir: PathBuf,
    log: fs::File,
    every: usize,
    total: usize,
}

impl RunWriter {
    pub fn create(dir: &Path, config: &TrainConfig, append: bool) -> Result<Self> {
        use std::io::Write;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.txt"), &config.to_text())?;
        let path = dir.join("log.csv");
        let fresh = !append || !path.exists();
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(log, "{}", LogRow::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
            every: (config.iterations / 20).max(1),
            total: config.iterations,
        })
    }
}

impl TrainObserver for RunWriter {
    fn on_log(&mut self, row: &LogRow) -> Result<()> {
        use std::io::Write;
        writeln!(self.log, "{}", row.csv_line()).map_err(|e| Error::io(self.dir.join("log.csv"), e))?;
        if row.iter.is_multiple_of(self.every) || row.iter + 1 == self.total {
            log::info!(
                "iter {:>6}  L_c {:.4}  L_geo {:.4}  L_j {:.4}  L_eik {:.4}  beta {:.5}",
                row.iter, row.l_c, row.l_geo, row.l_j, row.l_eik, row.beta
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        write_checkpoint(&self.dir.join(checkpoint_name(ck.step)), ck)
    }
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:08}.txt")
}

pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let rd = fs::read_dir(run).map_err(|e| Error::io(run, e))?;
    rd.flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".txt"))
        })
        .max()
        .ok_or_else(|| Error::data(run, "run directory holds no checkpoints"))
}

pub fn load_run(run: &Path, checkpoint: Option<&Path>) -> Result<(TrainConfig, TrainState)> {
    let config = read_config(&run.join("config.txt"))?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(run)?,
    };
    let ck = read_checkpoint(&path)?;
    let state = TrainState::from_checkpoint(&config, &ck).map_err(|e| Error::data(&path, e.to_string()))?;
    log::info!("loaded {} (step {})", path.display(), ck.step);
    Ok((config, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_header_with_comment() {
        let p = Path::new("x.ppm");
        let bytes = b"P6\n# made by hand\n2 1\n255\n\x00\x80\xff\x10\x20\x30".to_vec();
        let pnm = parse_pnm(p, &bytes, b"P6").unwrap();
        assert_eq!((pnm.width, pnm.height, pnm.maxval), (2, 1, 255));
        assert!(parse_pnm(p, b"P3\n1 1\n255\n", b"P6").unwrap_err().to_string().contains("x.ppm"));
    }

    #[test]
    fn obj_with_normals_round_trips() {
        let mesh = TriangleMesh {
            vertices: vec![Vec3::ZERO, Vec3::X, Vec3::new(0.1, 0.7, 1.0 / 3.0)],
            triangles: vec![[0, 1, 2]],
            normals: Some(vec![Vec3::Z; 3]),
        };
        assert_eq!(parse_obj(Path::new("m.obj"), &obj_text(&mesh)).unwrap(), mesh);
    }
}
