//! Depth from rectified stereo, and fusion of depth maps into one colored cloud.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector2};

use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::image::{quantize, GrayImage, RgbImage};
use crate::knn::mean_knn_distances;

/// Depths beyond this are treated as disparity noise.
pub const Z_MAX: f64 = 8.0;
pub const DEFAULT_VOXEL: f64 = 0.02;
pub const DEFAULT_OUTLIER_K: usize = 20;
pub const DEFAULT_OUTLIER_RATIO: f64 = 2.0;

const EGDP_MAGIC: &[u8; 4] = b"EGDP";

/// Per-pixel metric depth, 0 where invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub camera: String,
    pub frame: u32,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(camera: impl Into<String>, frame: u32, width: usize, height: usize) -> Self {
        Self {
            camera: camera.into(),
            frame,
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&z| z > 0.0).count()
    }

    /// EGDP: magic, u32 width, u32 height, f32 reserved, then f32 depths row-major.
    pub fn write_egdp(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        buf.extend_from_slice(EGDP_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&0f32.to_le_bytes());
        for &z in &self.values {
            buf.extend_from_slice(&(z as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io("<egdp>", e))
    }

    pub fn read_egdp(r: &mut impl Read, camera: impl Into<String>, frame: u32) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<egdp>", e))?;
        if bytes.len() < 16 || &bytes[..4] != EGDP_MAGIC {
            return Err(Error::format("EGDP", "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (width, height) = (u32_at(4) as usize, u32_at(8) as usize);
        let expected = 16 + 4 * width * height;
        if bytes.len() != expected {
            return Err(Error::format(
                "EGDP",
                format!("expected {expected} bytes, got {}", bytes.len()),
            ));
        }
        let values: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(z) = values.iter().find(|z| !z.is_finite() || **z < 0.0) {
            return Err(Error::format("EGDP", format!("invalid depth value {z}")));
        }
        Ok(Self {
            camera: camera.into(),
            frame,
            width,
            height,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_egdp(&mut BufWriter::new(f))
    }

    pub fn load(path: &Path, camera: impl Into<String>, frame: u32) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_egdp(&mut BufReader::new(f), camera, frame)
    }
}

/// Integer disparities, `None` where matching failed.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Option<u32>>,
}

impl DisparityMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<u32> {
        self.values[y * self.width + x]
    }
}

/// Box sums over a (2·half+1)² neighborhood, infinite where the window leaves the image.
fn box_sum(data: &[f64], width: usize, height: usize, half: usize) -> Vec<f64> {
    let mut integral = vec![0.0; (width + 1) * (height + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += data[y * width + x];
            integral[(y + 1) * (width + 1) + x + 1] = integral[y * (width + 1) + x + 1] + row;
        }
    }
    let mut out = vec![f64::INFINITY; width * height];
    for y in half..height.saturating_sub(half) {
        for x in half..width.saturating_sub(half) {
            let (x0, y0, x1, y1) = (x - half, y - half, x + half + 1, y + half + 1);
            out[y * width + x] = integral[y1 * (width + 1) + x1]
                - integral[y0 * (width + 1) + x1]
                - integral[y1 * (width + 1) + x0]
                + integral[y0 * (width + 1) + x0];
        }
    }
    out
}

/// Winner-take-all disparity of `base` against `other`. `sign` is -1 when
/// matching left to right (x - d) and +1 for right to left (x + d).
fn wta(
    base: &GrayImage,
    other: &GrayImage,
    max_disparity: usize,
    half: usize,
    sign: i64,
) -> Vec<Option<u32>> {
    let (w, h) = (base.width, base.height);
    let mut best = vec![(f64::INFINITY, None); w * h];
    let mut diff = vec![0.0; w * h];
    for d in 0..=max_disparity {
        for y in 0..h {
            for x in 0..w {
                let xo = x as i64 + sign * d as i64;
                diff[y * w + x] = if xo < 0 || xo >= w as i64 {
                    // large cost keeps windows that leave the image from winning
                    1e6
                } else {
                    (base.get(x, y) - other.get(xo as usize, y)).abs()
                };
            }
        }
        let sad = box_sum(&diff, w, h, half);
        for (i, &s) in sad.iter().enumerate() {
            if s < 1e5 && s < best[i].0 {
                best[i] = (s, Some(d as u32));
            }
        }
    }
    best.into_iter().map(|(_, d)| d).collect()
}

/// SAD block matching on a rectified pair with a left-right consistency
/// check (1 px). Textureless windows are reported invalid.
pub fn block_match(
    left: &GrayImage,
    right: &GrayImage,
    max_disparity: usize,
    window: usize,
) -> Result<DisparityMap> {
    if left.width != right.width || left.height != right.height {
        return Err(Error::ShapeMismatch(format!(
            "stereo pair {}x{} vs {}x{}",
            left.width, left.height, right.width, right.height
        )));
    }
    if max_disparity >= left.width {
        return Err(Error::InvalidParameter(format!(
            "max disparity {max_disparity} must be below the image width {}",
            left.width
        )));
    }
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "window {window} must be odd"
        )));
    }
    let (w, h) = (left.width, left.height);
    let half = window / 2;
    let lr = wta(left, right, max_disparity, half, -1);
    let rl = wta(right, left, max_disparity, half, 1);

    // texture: window range of the left image
    let mut values = vec![None; w * h];
    for y in half..h.saturating_sub(half) {
        for x in half..w.saturating_sub(half) {
            let Some(d) = lr[y * w + x] else { continue };
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for yy in y - half..=y + half {
                for xx in x - half..=x + half {
                    let v = left.get(xx, yy);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if hi - lo < 1e-6 {
                continue;
            }
            let xr = x - d as usize;
            if let Some(dr) = rl[y * w + xr] {
                if (dr as i64 - d as i64).abs() <= 1 {
                    values[y * w + x] = Some(d);
                }
            }
        }
    }
    Ok(DisparityMap {
        width: w,
        height: h,
        values,
    })
}

/// z = fx·baseline/d for d > 0; anything beyond `Z_MAX` is invalid.
pub fn disparity_to_depth(
    disp: &DisparityMap,
    fx: f64,
    baseline: f64,
    camera: impl Into<String>,
    frame: u32,
) -> Result<DepthMap> {
    if baseline <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "baseline {baseline} must be positive"
        )));
    }
    let values = disp
        .values
        .iter()
        .map(|d| match d {
            Some(d) if *d > 0 => {
                let z = fx * baseline / *d as f64;
                if z <= Z_MAX {
                    z
                } else {
                    0.0
                }
            }
            _ => 0.0,
        })
        .collect();
    Ok(DepthMap {
        camera: camera.into(),
        frame,
        width: disp.width,
        height: disp.height,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointSource {
    /// Index into `FusedPointCloud::cameras`.
    pub camera: u32,
    pub x: u32,
    pub y: u32,
}

/// Colored world-frame points with per-point provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedPointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub sources: Vec<PointSource>,
    pub cameras: Vec<String>,
}

impl FusedPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.is_empty() {
            return None;
        }
        let mut s = [0.0; 3];
        for p in &self.positions {
            for a in 0..3 {
                s[a] += p[a];
            }
        }
        let n = self.len() as f64;
        Some(Point3::new(s[0] / n, s[1] / n, s[2] / n))
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        if self.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            colors: idx.iter().map(|&i| self.colors[i]).collect(),
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
            cameras: self.cameras.clone(),
        }
    }
}

/// Unprojects every valid depth pixel into the world with its color.
pub fn fuse(views: &[(&DepthMap, &RgbImage)], rig: &CameraRig) -> Result<FusedPointCloud> {
    let mut cloud = FusedPointCloud::default();
    for (depth, color) in views {
        let cam = rig.get(&depth.camera).ok_or_else(|| {
            Error::Configuration(format!(
                "depth map camera {} missing from rig",
                depth.camera
            ))
        })?;
        if depth.width != color.width || depth.height != color.height {
            return Err(Error::ShapeMismatch(format!(
                "depth {}x{} vs color {}x{} for camera {}",
                depth.width, depth.height, color.width, color.height, depth.camera
            )));
        }
        if depth.width != cam.width() || depth.height != cam.height() {
            return Err(Error::ShapeMismatch(format!(
                "depth map {}x{} does not match camera {} intrinsics",
                depth.width, depth.height, cam.id
            )));
        }
        let ci = match cloud.cameras.iter().position(|c| c == &depth.camera) {
            Some(i) => i,
            None => {
                cloud.cameras.push(depth.camera.clone());
                cloud.cameras.len() - 1
            }
        } as u32;
        for y in 0..depth.height {
            for x in 0..depth.width {
                let z = depth.get(x, y);
                if z <= 0.0 {
                    continue;
                }
                let p = cam.unproject(&Vector2::new(x as f64, y as f64), z)?;
                cloud.positions.push([p.x, p.y, p.z]);
                cloud.colors.push(color.get(x, y));
                cloud.sources.push(PointSource {
                    camera: ci,
                    x: x as u32,
                    y: y as u32,
                });
            }
        }
    }
    Ok(cloud)
}

/// One point per occupied voxel at the member centroid with averaged color.
/// The provenance of the first member is kept.
pub fn voxel_downsample(cloud: &FusedPointCloud, voxel: f64) -> Result<FusedPointCloud> {
    if voxel <= 0.0 || !voxel.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "voxel size {voxel} must be positive"
        )));
    }
    let mut cells: BTreeMap<[i64; 3], (usize, [f64; 3], [f64; 3], usize)> = BTreeMap::new();
    for (i, (p, c)) in cloud.positions.iter().zip(&cloud.colors).enumerate() {
        let key = p.map(|v| (v / voxel).floor() as i64);
        let e = cells.entry(key).or_insert((i, [0.0; 3], [0.0; 3], 0));
        for a in 0..3 {
            e.1[a] += p[a];
            e.2[a] += c[a];
        }
        e.3 += 1;
    }
    let mut cells: Vec<_> = cells.into_values().collect();
    // keep input order of first members so the output is stable
    cells.sort_by_key(|c| c.0);
    let mut out = FusedPointCloud {
        cameras: cloud.cameras.clone(),
        ..Default::default()
    };
    for (first, ps, cs, n) in cells {
        let n = n as f64;
        out.positions.push(ps.map(|v| v / n));
        out.colors.push(cs.map(|v| (v / n).clamp(0.0, 1.0)));
        out.sources.push(cloud.sources[first]);
    }
    Ok(out)
}

/// Drops points whose mean distance to their `k` nearest neighbours exceeds
/// the global mean plus `std_ratio` standard deviations.
pub fn remove_outliers(
    cloud: &FusedPointCloud,
    k: usize,
    std_ratio: f64,
) -> Result<FusedPointCloud> {
    if k == 0 {
        return Err(Error::InvalidParameter(
            "outlier k must be at least 1".into(),
        ));
    }
    if cloud.len() <= k {
        log::warn!(
            "outlier removal skipped: {} points, need more than k={k}",
            cloud.len()
        );
        return Ok(cloud.clone());
    }
    let dists: Vec<f64> = mean_knn_distances(&cloud.positions, k)
        .into_iter()
        .map(|d| d.unwrap_or(0.0))
        .collect();
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    // relative slack absorbs rounding when all distances are equal
    let limit = mean + std_ratio * var.sqrt() + 1e-12 * mean;
    Ok(cloud.select(|i| dists[i] <= limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

const PLY_PROPS: [&str; 9] = ["x", "y", "z", "red", "green", "blue", "camera", "u", "v"];

/// PLY with x,y,z (float), red,green,blue (uchar) and provenance camera,u,v (int).
/// Camera ids go in `comment camera <index> <id>` lines.
pub fn write_ply(cloud: &FusedPointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {fmt} 1.0\n");
    for (i, id) in cloud.cameras.iter().enumerate() {
        header.push_str(&format!("comment camera {i} {id}\n"));
    }
    header.push_str(&format!(
        "element vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property int camera\nproperty int u\nproperty int v\nend_header\n",
        cloud.len()
    ));
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i].map(quantize);
        let s = cloud.sources[i];
        match format {
            PlyFormat::Ascii => writeln!(
                w,
                "{} {} {} {} {} {} {} {} {}",
                p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2], s.camera, s.x, s.y
            )
            .map_err(io)?,
            PlyFormat::BinaryLittleEndian => {
                let mut rec = Vec::with_capacity(27);
                for v in p {
                    rec.extend_from_slice(&(v as f32).to_le_bytes());
                }
                rec.extend_from_slice(&c);
                for v in [s.camera, s.x, s.y] {
                    rec.extend_from_slice(&(v as i32).to_le_bytes());
                }
                w.write_all(&rec).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_ply(path: &Path) -> Result<FusedPointCloud> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |d: &str| Error::format("PLY", d.to_string());
    let mut line = String::new();
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut cameras: BTreeMap<usize, String> = BTreeMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("missing end_header"));
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["ply"] => {}
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(bad(&format!("unsupported format {other}"))),
            ["comment", "camera", i, id] => {
                let i = i.parse().map_err(|_| bad("bad camera comment"))?;
                cameras.insert(i, id.to_string());
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?)
            }
            ["element", ..] => return Err(bad("only a vertex element is supported")),
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(bad(&format!("unexpected header line {:?}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| bad("missing format"))?;
    let count = count.ok_or_else(|| bad("missing vertex element"))?;
    if props != PLY_PROPS {
        return Err(bad(&format!(
            "expected properties {PLY_PROPS:?}, got {props:?}"
        )));
    }
    let mut cloud = FusedPointCloud {
        cameras: cameras.into_values().collect(),
        ..Default::default()
    };
    let mut push = |p: [f64; 3], c: [u8; 3], s: [i64; 3]| -> Result<()> {
        if s.iter().any(|&v| v < 0) || s[0] as usize >= cloud.cameras.len().max(1) {
            return Err(Error::format("PLY", "invalid provenance"));
        }
        cloud.positions.push(p);
        cloud.colors.push(c.map(|v| v as f64 / 255.0));
        cloud.sources.push(PointSource {
            camera: s[0] as u32,
            x: s[1] as u32,
            y: s[2] as u32,
        });
        Ok(())
    };
    match format {
        PlyFormat::Ascii => {
            for _ in 0..count {
                line.clear();
                r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
                let t: Vec<&str> = line.split_whitespace().collect();
                if t.len() != 9 {
                    return Err(bad("truncated vertex record"));
                }
                let f = |i: usize| t[i].parse::<f64>().map_err(|_| bad("bad number"));
                let u = |i: usize| t[i].parse::<u8>().map_err(|_| bad("bad color"));
                let n = |i: usize| t[i].parse::<i64>().map_err(|_| bad("bad integer"));
                push(
                    [f(0)?, f(1)?, f(2)?],
                    [u(3)?, u(4)?, u(5)?],
                    [n(6)?, n(7)?, n(8)?],
                )?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut rec = [0u8; 27];
            for _ in 0..count {
                r.read_exact(&mut rec)
                    .map_err(|_| bad("truncated vertex data"))?;
                let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
                let n = |o: usize| i32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as i64;
                push(
                    [f(0), f(4), f(8)],
                    [rec[12], rec[13], rec[14]],
                    [n(15), n(19), n(23)],
                )?;
            }
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn egdp_round_trip() {
        let mut d = DepthMap::new("c", 0, 3, 2);
        d.values = vec![0.0, 1.5, 2.25, 8.0, 0.0, 3.0];
        let mut buf = Vec::new();
        d.write_egdp(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 24);
        assert_eq!(&buf[..4], b"EGDP");
        let back = DepthMap::read_egdp(&mut buf.as_slice(), "c", 0).unwrap();
        assert_eq!(back, d);
        assert!(DepthMap::read_egdp(&mut &buf[..20], "c", 0).is_err());
    }

    #[test]
    fn disparity_formula() {
        let disp = DisparityMap {
            width: 2,
            height: 1,
            values: vec![Some(60), Some(0)],
        };
        let d = disparity_to_depth(&disp, 600.0, 0.12, "c", 0).unwrap();
        assert!((d.values[0] - 1.2).abs() < 1e-12);
        assert_eq!(d.values[1], 0.0);
        assert!(disparity_to_depth(&disp, 600.0, 0.0, "c", 0).is_err());
    }
}
