//! Equirectangular geometry: pixel-to-ray mapping, inverse projection to
//! point clouds, an analytic box-room renderer for exact synthetic RGB-D
//! data, and receptive-field footprint enumeration.
//!
//! Conventions: y up, z forward, azimuth theta = 0 at +z increasing toward
//! +x; pixels sample half-pixel centers so neither the poles nor the seam
//! land exactly on a pixel.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::loss::ValidMask;
use crate::tensor::{Shape, Tensor};

/// Unit viewing direction of pixel (u, v) on a W x H equirectangular grid.
pub fn pixel_to_direction(u: usize, v: usize, width: usize, height: usize) -> Result<[f64; 3]> {
    if u >= width || v >= height {
        return Err(Error::invalid(format!(
            "pixel ({u}, {v}) outside {width}x{height} grid"
        )));
    }
    let theta = 2.0 * PI * (u as f64 + 0.5) / width as f64 - PI;
    let phi = PI / 2.0 - PI * (v as f64 + 0.5) / height as f64;
    Ok([phi.cos() * theta.sin(), phi.sin(), phi.cos() * theta.cos()])
}

/// Precomputed per-pixel unit directions.
pub struct RayGrid {
    pub width: usize,
    pub height: usize,
    dirs: Vec<[f64; 3]>,
}

impl RayGrid {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("RayGrid needs positive dimensions"));
        }
        let mut dirs = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                dirs.push(pixel_to_direction(u, v, width, height)?);
            }
        }
        Ok(RayGrid { width, height, dirs })
    }

    #[inline]
    pub fn dir(&self, u: usize, v: usize) -> [f64; 3] {
        self.dirs[v * self.width + u]
    }
}

/// Paired equirectangular color image (B=1, 3, H, W, values in [0, 1]),
/// metric depth map, and validity mask.
#[derive(Clone, Debug)]
pub struct PanoFrame {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub mask: ValidMask,
}

/// Axis-aligned box occluder inside a room.
#[derive(Clone, Debug)]
pub struct Occluder {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    /// Face albedos ordered -x, +x, -y, +y, -z, +z.
    pub albedo: [[f64; 3]; 6],
}

/// Analytic rectangular room seen from an interior camera. Ground truth is
/// exact: depth is the ray parameter of the slab intersection.
#[derive(Clone, Debug)]
pub struct BoxRoom {
    /// Room half extents, meters; the room spans [-a, +a] per axis.
    pub half_extents: [f64; 3],
    /// Camera position, strictly inside.
    pub camera: [f64; 3],
    /// Face albedos ordered -x, +x, -y, +y, -z, +z.
    pub albedo: [[f64; 3]; 6],
    pub occluder: Option<Occluder>,
}

impl BoxRoom {
    /// Cube of the given side length with the camera at the center.
    pub fn cube(side: f64) -> Self {
        let h = side / 2.0;
        BoxRoom {
            half_extents: [h, h, h],
            camera: [0.0, 0.0, 0.0],
            albedo: [
                [0.9, 0.3, 0.3],
                [0.3, 0.9, 0.3],
                [0.3, 0.3, 0.9],
                [0.9, 0.9, 0.3],
                [0.3, 0.9, 0.9],
                [0.9, 0.3, 0.9],
            ],
            occluder: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if self.half_extents[k] <= 0.0 {
                return Err(Error::invalid("room extents must be positive"));
            }
            if self.camera[k].abs() >= self.half_extents[k] {
                return Err(Error::invalid("camera must be strictly inside the room"));
            }
        }
        if let Some(occ) = &self.occluder {
            for k in 0..3 {
                if occ.half_extents[k] <= 0.0 {
                    return Err(Error::invalid("occluder extents must be positive"));
                }
                if occ.center[k].abs() + occ.half_extents[k] >= self.half_extents[k] {
                    return Err(Error::invalid("occluder must fit inside the room"));
                }
                if (self.camera[k] - occ.center[k]).abs() <= occ.half_extents[k] {
                    // a camera inside the occluder on every axis would see nothing
                    continue;
                }
            }
            let inside = (0..3)
                .all(|k| (self.camera[k] - occ.center[k]).abs() < occ.half_extents[k]);
            if inside {
                return Err(Error::invalid("camera must be outside the occluder"));
            }
        }
        Ok(())
    }

    /// Longest possible view distance inside the room.
    pub fn max_depth(&self) -> f64 {
        let mut d2 = 0.0f64;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let dx = sx * self.half_extents[0] - self.camera[0];
                    let dy = sy * self.half_extents[1] - self.camera[1];
                    let dz = sz * self.half_extents[2] - self.camera[2];
                    d2 = d2.max(dx * dx + dy * dy + dz * dz);
                }
            }
        }
        d2.sqrt()
    }

    /// Distance and shaded color along a unit direction from the camera.
    pub fn trace(&self, dir: [f64; 3]) -> (f64, [f64; 3]) {
        // exit point of the room: nearest positive face crossing
        let mut t_exit = f64::INFINITY;
        let mut face = 0usize;
        for k in 0..3 {
            if dir[k] == 0.0 {
                continue;
            }
            let bound = if dir[k] > 0.0 { self.half_extents[k] } else { -self.half_extents[k] };
            let t = (bound - self.camera[k]) / dir[k];
            if t > 0.0 && t < t_exit {
                t_exit = t;
                face = 2 * k + usize::from(dir[k] > 0.0);
            }
        }
        let mut depth = t_exit;
        let mut color_face = face;
        let mut albedo = &self.albedo;

        if let Some(occ) = &self.occluder {
            // slab entry of the inner box
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_face = 0usize;
            let mut hit = true;
            for k in 0..3 {
                let lo = occ.center[k] - occ.half_extents[k];
                let hi = occ.center[k] + occ.half_extents[k];
                if dir[k] == 0.0 {
                    if self.camera[k] < lo || self.camera[k] > hi {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let mut t0 = (lo - self.camera[k]) / dir[k];
                let mut t1 = (hi - self.camera[k]) / dir[k];
                let mut entry_face = 2 * k; // crossing the low plane first
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                    entry_face = 2 * k + 1;
                }
                if t0 > t_near {
                    t_near = t0;
                    near_face = entry_face;
                }
                t_far = t_far.min(t1);
            }
            if hit && t_near > 0.0 && t_near <= t_far && t_near < depth {
                depth = t_near;
                color_face = near_face;
                albedo = &occ.albedo;
            }
        }

        let axis = color_face / 2;
        let shade = dir[axis].abs();
        let a = albedo[color_face];
        (depth, [a[0] * shade, a[1] * shade, a[2] * shade])
    }

    /// Render the panorama seen from the camera; the mask is all-true.
    pub fn render(&self, width: usize, height: usize) -> Result<PanoFrame> {
        self.validate()?;
        let grid = RayGrid::new(width, height)?;
        let rgb_shape = Shape::new(1, 3, height, width);
        let d_shape = Shape::new(1, 1, height, width);
        let mut rgb = vec![0.0; rgb_shape.numel()];
        let mut depth = vec![0.0; d_shape.numel()];
        for v in 0..height {
            for u in 0..width {
                let (t, color) = self.trace(grid.dir(u, v));
                depth[d_shape.index(0, 0, v, u)] = t;
                for (c, &val) in color.iter().enumerate() {
                    rgb[rgb_shape.index(0, c, v, u)] = val;
                }
            }
        }
        Ok(PanoFrame {
            rgb: Tensor::from_vec(rgb_shape, rgb)?,
            depth: Tensor::from_vec(d_shape, depth)?,
            mask: ValidMask::all_valid(1, height, width),
        })
    }
}

/// One colored 3-D point, meters and 8-bit color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyVertex {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub points: Vec<PlyVertex>,
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Lift every valid pixel along its viewing ray: point = depth * direction.
/// Negative-depth pixels are skipped; the second return value counts them.
pub fn depth_to_pointcloud(
    depth: &Tensor,
    rgb: &Tensor,
    mask: &ValidMask,
) -> Result<(PointCloud, usize)> {
    let dsh = depth.shape();
    let rsh = rgb.shape();
    if dsh.batch != 1 || dsh.channels != 1 {
        return Err(Error::shape("depth_to_pointcloud", "(1, 1, H, W) depth", format!("{dsh}")));
    }
    if rsh.batch != 1 || rsh.channels != 3 || rsh.spatial() != dsh.spatial() {
        return Err(Error::shape(
            "depth_to_pointcloud",
            format!("(1, 3, {}, {}) rgb", dsh.height, dsh.width),
            format!("{rsh}"),
        ));
    }
    if mask.shape() != dsh {
        return Err(Error::shape("depth_to_pointcloud", format!("{dsh}"), format!("{}", mask.shape())));
    }
    let grid = RayGrid::new(dsh.width, dsh.height)?;
    let mut cloud = PointCloud::default();
    let mut skipped = 0usize;
    for v in 0..dsh.height {
        for u in 0..dsh.width {
            if !mask.get(0, v, u) {
                continue;
            }
            let d = depth.at(0, 0, v, u);
            if d < 0.0 {
                skipped += 1;
                continue;
            }
            let dir = grid.dir(u, v);
            cloud.points.push(PlyVertex {
                x: d * dir[0],
                y: d * dir[1],
                z: d * dir[2],
                r: to_u8(rgb.at(0, 0, v, u)),
                g: to_u8(rgb.at(0, 1, v, u)),
                b: to_u8(rgb.at(0, 2, v, u)),
            });
        }
    }
    Ok((cloud, skipped))
}

/// Tap offsets reached by a set of dilated 3x3 kernels.
#[derive(Clone, Debug)]
pub struct Footprint {
    /// Branch count per offset (row, col); keys are the offset union.
    pub multiplicity: BTreeMap<(i64, i64), usize>,
}

impl Footprint {
    pub fn offsets(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        self.multiplicity.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.multiplicity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multiplicity.is_empty()
    }

    /// Bounding box (rows, cols) of the offset union.
    pub fn bounding_box(&self) -> (usize, usize) {
        let mut rows = (i64::MAX, i64::MIN);
        let mut cols = (i64::MAX, i64::MIN);
        for &(r, c) in self.multiplicity.keys() {
            rows = (rows.0.min(r), rows.1.max(r));
            cols = (cols.0.min(c), cols.1.max(c));
        }
        if self.multiplicity.is_empty() {
            return (0, 0);
        }
        ((rows.1 - rows.0 + 1) as usize, (cols.1 - cols.0 + 1) as usize)
    }
}

/// Union (with multiplicity) of {-1, 0, 1}*dy x {-1, 0, 1}*dx over branches.
pub fn receptive_field_footprint(dilations: &[(usize, usize)]) -> Footprint {
    let mut multiplicity = BTreeMap::new();
    for &(dy, dx) in dilations {
        for ky in -1i64..=1 {
            for kx in -1i64..=1 {
                *multiplicity.entry((ky * dy as i64, kx * dx as i64)).or_insert(0) += 1;
            }
        }
    }
    Footprint { multiplicity }
}

/// Plain-text PLY export/import of colored point clouds.
pub mod ply {
    use super::*;

    /// ASCII PLY with double-precision coordinates (9+ significant digits)
    /// and 8-bit colors.
    pub fn write<W: Write>(out: &mut W, cloud: &PointCloud) -> Result<()> {
        write_with_comments(out, cloud, &[])
    }

    /// Like [`write`], with header comment lines (one `comment ...` each).
    pub fn write_with_comments<W: Write>(
        out: &mut W,
        cloud: &PointCloud,
        comments: &[String],
    ) -> Result<()> {
        writeln!(out, "ply")?;
        writeln!(out, "format ascii 1.0")?;
        for line in comments {
            writeln!(out, "comment {line}")?;
        }
        writeln!(out, "element vertex {}", cloud.points.len())?;
        writeln!(out, "property float x")?;
        writeln!(out, "property float y")?;
        writeln!(out, "property float z")?;
        writeln!(out, "property uchar red")?;
        writeln!(out, "property uchar green")?;
        writeln!(out, "property uchar blue")?;
        writeln!(out, "end_header")?;
        for p in &cloud.points {
            writeln!(out, "{:.9e} {:.9e} {:.9e} {} {} {}", p.x, p.y, p.z, p.r, p.g, p.b)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<PointCloud> {
        let mut lines = input.lines();
        let mut vertex_count: Option<usize> = None;
        for line in lines.by_ref() {
            let line = line?;
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("element vertex ") {
                vertex_count = Some(
                    rest.trim().parse().map_err(|_| Error::invalid(format!("bad vertex count: {rest}")))?,
                );
            }
            if line == "end_header" {
                break;
            }
        }
        let count = vertex_count.ok_or_else(|| Error::invalid("PLY header missing vertex count"))?;
        let mut cloud = PointCloud::default();
        for line in lines {
            let line = line?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(Error::invalid(format!("bad PLY vertex line: {line}")));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad float: {s}")));
            let u = |s: &str| s.parse::<u8>().map_err(|_| Error::invalid(format!("bad color: {s}")));
            cloud.points.push(PlyVertex {
                x: f(parts[0])?,
                y: f(parts[1])?,
                z: f(parts[2])?,
                r: u(parts[3])?,
                g: u(parts[4])?,
                b: u(parts[5])?,
            });
        }
        if cloud.points.len() != count {
            return Err(Error::invalid(format!(
                "PLY header promises {count} vertices, body has {}",
                cloud.points.len()
            )));
        }
        Ok(cloud)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: [f64; 3]) -> f64 {
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }

    #[test]
    fn directions_are_unit() {
        for (w, h) in [(8, 4), (16, 8), (128, 64)] {
            for v in 0..h {
                for u in 0..w {
                    let d = pixel_to_direction(u, v, w, h).unwrap();
                    assert!((norm(d) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn top_row_approaches_north_pole() {
        let h = 512;
        let d = pixel_to_direction(0, 0, 2 * h, h).unwrap();
        let bound = (PI / h as f64).powi(2);
        assert!((d[1] - 1.0).abs() < bound, "{} vs {bound}", (d[1] - 1.0).abs());
    }

    #[test]
    fn matches_trig_oracle() {
        // (u, v) = (4, 2) on an 8x4 grid
        let d = pixel_to_direction(4, 2, 8, 4).unwrap();
        let theta = 2.0 * PI * 4.5 / 8.0 - PI; // = pi/8
        let phi = PI / 2.0 - PI * 2.5 / 4.0; // = -pi/8
        assert!((theta - PI / 8.0).abs() < 1e-15);
        let want = [phi.cos() * theta.sin(), phi.sin(), phi.cos() * theta.cos()];
        for (a, b) in d.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_pixel_rejected() {
        assert!(pixel_to_direction(8, 0, 8, 4).is_err());
        assert!(pixel_to_direction(0, 4, 8, 4).is_err());
    }

    #[test]
    fn grid_roll_rotates_about_y() {
        let (w, h) = (16, 8);
        let grid = RayGrid::new(w, h).unwrap();
        let s = 5usize;
        let alpha = 2.0 * PI * s as f64 / w as f64;
        for v in 0..h {
            for u in 0..w {
                let d = grid.dir(u, v);
                let rotated = [
                    d[0] * alpha.cos() + d[2] * alpha.sin(),
                    d[1],
                    d[2] * alpha.cos() - d[0] * alpha.sin(),
                ];
                let moved = grid.dir((u + s) % w, v);
                for (a, b) in moved.iter().zip(&rotated) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cube_center_faces() {
        let room = BoxRoom::cube(4.0);
        let (d, _) = room.trace([0.0, 0.0, 1.0]);
        assert_eq!(d, 2.0);
        let (d, _) = room.trace([0.0, 1.0, 0.0]);
        assert_eq!(d, 2.0);
        let k = 1.0 / 3.0f64.sqrt();
        let (d, _) = room.trace([k, k, k]);
        assert!((d - 2.0 * 3.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pole_pixel_depth_bound() {
        let room = BoxRoom::cube(4.0);
        for h in [64usize, 128, 256] {
            let frame = room.render(2 * h, h).unwrap();
            let mut nearest = f64::INFINITY;
            // the pixel nearest +y is in the top row; all top-row pixels
            // share the same latitude, any column works
            for u in 0..2 * h {
                nearest = nearest.min(frame.depth.at(0, 0, 0, u));
            }
            let bound = 2.0 * (PI / h as f64).powi(2);
            assert!((nearest - 2.0).abs() < bound, "h={h}: {nearest}");
        }
    }

    #[test]
    fn rendered_depth_positive_and_bounded() {
        let room = BoxRoom {
            half_extents: [2.5, 1.5, 2.0],
            camera: [0.5, -0.25, 0.75],
            ..BoxRoom::cube(1.0)
        };
        let frame = room.render(64, 32).unwrap();
        let diag = room.max_depth();
        for &d in frame.depth.data() {
            assert!(d > 0.0 && d <= diag + 1e-12);
        }
    }

    #[test]
    fn seam_is_continuous() {
        let room = BoxRoom {
            half_extents: [2.5, 1.5, 2.0],
            camera: [0.8, 0.3, -0.6],
            ..BoxRoom::cube(1.0)
        };
        let frame = room.render(128, 64).unwrap();
        let d = &frame.depth;
        let mut seam_max = 0.0f64;
        let mut interior_max = 0.0f64;
        for y in 0..64 {
            seam_max = seam_max.max((d.at(0, 0, y, 0) - d.at(0, 0, y, 127)).abs());
            for x in 0..127 {
                interior_max = interior_max.max((d.at(0, 0, y, x + 1) - d.at(0, 0, y, x)).abs());
            }
        }
        assert!(
            seam_max <= 2.0 * interior_max + 1e-9,
            "seam {seam_max} vs interior {interior_max}"
        );
    }

    #[test]
    fn occluder_shortens_depth() {
        let mut room = BoxRoom::cube(4.0);
        room.occluder = Some(Occluder {
            center: [0.0, 0.0, 1.0],
            half_extents: [0.4, 0.4, 0.4],
            albedo: room.albedo,
        });
        room.validate().unwrap();
        let (d, _) = room.trace([0.0, 0.0, 1.0]);
        assert!((d - 0.6).abs() < 1e-12);
        let (d, _) = room.trace([0.0, 0.0, -1.0]);
        assert_eq!(d, 2.0);
    }

    #[test]
    fn camera_inside_occluder_rejected() {
        let mut room = BoxRoom::cube(4.0);
        room.occluder = Some(Occluder {
            center: [0.0, 0.0, 0.0],
            half_extents: [0.5, 0.5, 0.5],
            albedo: room.albedo,
        });
        assert!(room.validate().is_err());
    }

    #[test]
    fn constant_depth_lies_on_sphere() {
        let r = 3.25;
        let depth = Tensor::full(Shape::new(1, 1, 16, 32), r);
        let rgb = Tensor::full(Shape::new(1, 3, 16, 32), 0.5);
        let mask = ValidMask::all_valid(1, 16, 32);
        let (cloud, skipped) = depth_to_pointcloud(&depth, &rgb, &mask).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(cloud.points.len(), 16 * 32);
        for p in &cloud.points {
            let n = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
            assert!((n - r).abs() < 1e-12);
        }
    }

    #[test]
    fn equator_pixel_lands_near_forward_axis() {
        let (w, h) = (128usize, 64usize);
        let room = BoxRoom::cube(4.0);
        let frame = room.render(w, h).unwrap();
        let (cloud, _) = depth_to_pointcloud(&frame.depth, &frame.rgb, &frame.mask).unwrap();
        // pixel nearest direction +z
        let grid = RayGrid::new(w, h).unwrap();
        let mut best = (0usize, 0usize);
        let mut best_dot = f64::NEG_INFINITY;
        for v in 0..h {
            for u in 0..w {
                let d = grid.dir(u, v);
                if d[2] > best_dot {
                    best_dot = d[2];
                    best = (u, v);
                }
            }
        }
        let p = cloud.points[best.1 * w + best.0];
        assert!((p.z - 2.0).abs() < 0.01);
        assert!(p.x.abs() < 0.1 && p.y.abs() < 0.1);
    }

    #[test]
    fn render_pointcloud_roundtrip_is_exact() {
        let room = BoxRoom {
            half_extents: [2.0, 1.4, 2.3],
            camera: [-0.4, 0.2, 0.5],
            ..BoxRoom::cube(1.0)
        };
        let frame = room.render(64, 32).unwrap();
        let (cloud, _) = depth_to_pointcloud(&frame.depth, &frame.rgb, &frame.mask).unwrap();
        for (i, p) in cloud.points.iter().enumerate() {
            let (v, u) = (i / 64, i % 64);
            let rebuilt = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
            assert!((rebuilt - frame.depth.at(0, 0, v, u)).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_depth_pixels_are_skipped() {
        let mut depth = Tensor::full(Shape::new(1, 1, 2, 4), 1.0);
        depth.data_mut()[3] = -0.5;
        let rgb = Tensor::full(Shape::new(1, 3, 2, 4), 0.5);
        let mask = ValidMask::all_valid(1, 2, 4);
        let (cloud, skipped) = depth_to_pointcloud(&depth, &rgb, &mask).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(cloud.points.len(), 7);
    }

    #[test]
    fn plain_kernel_footprint() {
        let f = receptive_field_footprint(&[(1, 1)]);
        assert_eq!(f.len(), 9);
        assert_eq!(f.bounding_box(), (3, 3));
    }

    #[test]
    fn default_branches_footprint() {
        let f = receptive_field_footprint(&[(1, 1), (1, 2), (1, 4), (2, 1)]);
        assert_eq!(f.len(), 27);
        assert_eq!(f.bounding_box(), (5, 9));
        // the center tap belongs to every branch
        assert_eq!(f.multiplicity[&(0, 0)], 4);
        // (0, +-1) is shared by the 1x1 and 2x1 branches
        assert_eq!(f.multiplicity[&(0, 1)], 2);
    }

    #[test]
    fn five_branch_footprint_widens() {
        let f = receptive_field_footprint(&[(1, 1), (1, 2), (1, 4), (2, 1), (1, 8)]);
        assert_eq!(f.bounding_box(), (5, 17));
    }

    #[test]
    fn ply_roundtrip() {
        let cloud = PointCloud {
            points: vec![
                PlyVertex { x: 1.234567891, y: -2.0, z: 9.87654321, r: 10, g: 200, b: 255 },
                PlyVertex { x: 0.0, y: 0.5, z: -0.25, r: 0, g: 0, b: 0 },
            ],
        };
        let mut buf = Vec::new();
        ply::write(&mut buf, &cloud).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 2\n"));
        let body_lines = text.lines().skip_while(|l| *l != "end_header").skip(1).count();
        assert_eq!(body_lines, 2);
        let back = ply::read(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.points.len(), 2);
        for (a, b) in back.points.iter().zip(&cloud.points) {
            assert!((a.x - b.x).abs() < 1e-8 * b.x.abs().max(1.0));
            assert!((a.y - b.y).abs() < 1e-8 * b.y.abs().max(1.0));
            assert!((a.z - b.z).abs() < 1e-8 * b.z.abs().max(1.0));
            assert_eq!((a.r, a.g, a.b), (b.r, b.g, b.b));
        }
    }

    #[test]
    fn ply_read_rejects_count_mismatch() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nend_header\n0 0 0 1 2 3\n";
        assert!(ply::read(std::io::BufReader::new(text.as_bytes())).is_err());
    }
}
