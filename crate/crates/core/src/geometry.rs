//! Pinhole cameras, depth maps, and depth-based warps between two views.
//!
//! A warp `W` from view A to view B assigns each valid-depth pixel of A the
//! pixel coordinate it lands on in B after backprojection and reprojection.
//! Its domain `dom(W)` is the set of A-pixels where the mapping is
//! geometrically trustworthy: the projection lands inside B, B has valid
//! depth there, and the reprojected depth agrees with B's depth map to
//! within 2% (occlusion check).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::ioutil::{self, FormatError};
use crate::map::{BinaryMap, Map2, PixelGrid, ScoreMap};
use crate::matcher::KeypointSet;

/// Relative depth-consistency tolerance used for the warp occlusion check.
pub const OCCLUSION_REL_TOL: f64 = 0.02;

const MIN_CAMERA_DEPTH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant 1")]
    BadRotation,
    #[error("intrinsics must be upper-triangular with [2][2] = 1")]
    BadIntrinsics,
    #[error("depth must be positive and finite wherever valid")]
    BadDepth,
}

/// Calibrated pinhole camera, world-to-camera convention `x_cam = R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let lower_ok = intrinsics[(1, 0)].abs() < 1e-12
            && intrinsics[(2, 0)].abs() < 1e-12
            && intrinsics[(2, 1)].abs() < 1e-12;
        if !lower_ok || (intrinsics[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(GeometryError::BadIntrinsics);
        }
        let rt_r = rotation.transpose() * rotation;
        let ortho_err = (rt_r - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::BadRotation);
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Simple camera with focal `f`, principal point `(cx, cy)`, no skew.
    pub fn simple(
        f: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit-less ray direction `K^-1 (x, y, 1)`; its z component is 1, so a
    /// point at camera depth `d` sits at `d * ray` in camera coordinates.
    pub fn pixel_ray(&self, x: f64, y: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        // Back-substitution through the upper-triangular intrinsics.
        let zc = 1.0;
        let yc = (y - k[(1, 2)] * zc) / k[(1, 1)];
        let xc = (x - k[(0, 1)] * yc - k[(0, 2)] * zc) / k[(0, 0)];
        Vector3::new(xc, yc, zc)
    }
}

/// Result of projecting a world point into a camera.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Pixel coordinate; finite only when `in_front` is true.
    pub pixel: (f64, f64),
    /// Depth along the camera z axis in meters.
    pub depth: f64,
    /// False when the point is at or behind the camera plane.
    pub in_front: bool,
}

/// Projects a world point through a camera. The flag is false when the
/// camera-space depth is at or below 1e-9.
pub fn project(point: &Vector3<f64>, camera: &Camera) -> Projection {
    let x_cam = camera.rotation * point + camera.translation;
    let z = x_cam.z;
    if z <= MIN_CAMERA_DEPTH {
        return Projection {
            pixel: (f64::NAN, f64::NAN),
            depth: z,
            in_front: false,
        };
    }
    let h = camera.intrinsics * x_cam;
    Projection {
        pixel: (h.x / h.z, h.y / h.z),
        depth: z,
        in_front: true,
    }
}

/// Inverse of [`project`] at a known camera depth.
pub fn backproject(camera: &Camera, x: f64, y: f64, depth: f64) -> Vector3<f64> {
    let x_cam = camera.pixel_ray(x, y) * depth;
    camera.rotation.transpose() * (x_cam - camera.translation)
}

/// Per-pixel depth in meters with an MVS-style validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    depth: Map2<f64>,
    valid: BinaryMap,
}

impl DepthMap {
    pub fn new(depth: Map2<f64>, valid: BinaryMap) -> Result<Self, GeometryError> {
        assert_eq!(depth.grid(), valid.grid(), "depth/valid grid mismatch");
        for (d, v) in depth.as_slice().iter().zip(valid.as_slice()) {
            if *v && !(d.is_finite() && *d > 0.0) {
                return Err(GeometryError::BadDepth);
            }
        }
        Ok(Self { depth, valid })
    }

    pub fn grid(&self) -> PixelGrid {
        self.depth.grid()
    }

    pub fn depth_at(&self, col: usize, row: usize) -> f64 {
        *self.depth.at(col, row)
    }

    pub fn valid_at(&self, col: usize, row: usize) -> bool {
        *self.valid.at(col, row)
    }

    pub fn depth(&self) -> &Map2<f64> {
        &self.depth
    }

    pub fn valid(&self) -> &BinaryMap {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|v| **v).count()
    }
}

/// Dense pixel mapping from a source view into another view.
#[derive(Debug, Clone, PartialEq)]
pub struct Warp {
    grid: PixelGrid,
    target: Vec<(f64, f64)>,
    domain: Vec<bool>,
}

impl Warp {
    pub fn new(grid: PixelGrid, target: Vec<(f64, f64)>, domain: Vec<bool>) -> Self {
        assert_eq!(target.len(), grid.len());
        assert_eq!(domain.len(), grid.len());
        Self {
            grid,
            target,
            domain,
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn target_at(&self, col: usize, row: usize) -> (f64, f64) {
        self.target[self.grid.index(col, row)]
    }

    pub fn domain_at(&self, col: usize, row: usize) -> bool {
        self.domain[self.grid.index(col, row)]
    }

    /// Domain membership for a continuous point: inside the grid and the
    /// cell holding it is in the domain.
    pub fn domain_contains(&self, x: f64, y: f64) -> bool {
        match self.grid.cell_of(x, y) {
            Some((c, r)) => self.domain_at(c, r),
            None => false,
        }
    }

    pub fn domain_count(&self) -> usize {
        self.domain.iter().filter(|d| **d).count()
    }

    /// True when every lattice neighbor used to interpolate at `(x, y)`
    /// is in the domain, i.e. [`sample_target`](Self::sample_target) runs
    /// the exact bilinear path there.
    pub fn fully_supported(&self, x: f64, y: f64) -> bool {
        if !self.grid.contains(x, y) {
            return false;
        }
        let anchor = |p: f64, n: usize| -> (usize, usize) {
            if n == 1 {
                return (0, 0);
            }
            let i0 = ((p - 0.5).floor() as isize).clamp(0, n as isize - 2) as usize;
            (i0, i0 + 1)
        };
        let (ia, ib) = anchor(x, self.grid.width);
        let (ja, jb) = anchor(y, self.grid.height);
        [ia, ib]
            .iter()
            .all(|&c| [ja, jb].iter().all(|&r| self.domain_at(c, r)))
    }

    /// Bilinear interpolation of the target field at a continuous point.
    /// Returns `None` outside the domain.
    ///
    /// When all four lattice neighbors are in the domain the interpolation
    /// is exact bilinear, linearly extrapolating in the outer half-pixel
    /// band so smooth warp fields stay accurate up to the image border.
    /// When some neighbors are missing, the in-domain ones are averaged
    /// with renormalized non-negative weights.
    pub fn sample_target(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if !self.domain_contains(x, y) {
            return None;
        }
        let (w, h) = (self.grid.width, self.grid.height);
        let u = x - 0.5;
        let v = y - 0.5;
        let anchor = |p: f64, n: usize| -> (usize, usize, f64) {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (p.floor() as isize).clamp(0, n as isize - 2) as usize;
            (i0, i0 + 1, p - i0 as f64)
        };
        let (ia, ib, fx) = anchor(u, w);
        let (ja, jb, fy) = anchor(v, h);
        let cols = [ia, ib];
        let rows = [ja, jb];
        let all_in_domain = cols
            .iter()
            .all(|&c| rows.iter().all(|&r| self.domain_at(c, r)));
        let (wx, wy) = if all_in_domain {
            ([1.0 - fx, fx], [1.0 - fy, fy])
        } else {
            let cx = fx.clamp(0.0, 1.0);
            let cy = fy.clamp(0.0, 1.0);
            ([1.0 - cx, cx], [1.0 - cy, cy])
        };
        let mut acc = (0.0, 0.0);
        let mut wsum = 0.0;
        for (j, &row) in rows.iter().enumerate() {
            for (i, &col) in cols.iter().enumerate() {
                if !self.domain_at(col, row) {
                    continue;
                }
                let wgt = wx[i] * wy[j];
                let t = self.target_at(col, row);
                acc.0 += wgt * t.0;
                acc.1 += wgt * t.1;
                wsum += wgt;
            }
        }
        if !all_in_domain && wsum <= 1e-12 {
            // The point's own cell is in the domain; fall back to it.
            let (c, r) = self.grid.cell_of(x, y)?;
            return Some(self.target_at(c, r));
        }
        Some((acc.0 / wsum, acc.1 / wsum))
    }
}

/// Builds the dense warp from view A into view B.
///
/// For every valid-depth A-pixel the cell center is backprojected with A's
/// depth and projected into B. The pixel enters the domain only when the
/// projection lands inside B's grid, B's depth is valid at the landing
/// cell, and the reprojected depth matches B's depth to within
/// [`OCCLUSION_REL_TOL`].
pub fn build_warp(
    depth_a: &DepthMap,
    cam_a: &Camera,
    cam_b: &Camera,
    depth_b: &DepthMap,
) -> Warp {
    let grid = depth_a.grid();
    let grid_b = depth_b.grid();
    let mut target = vec![(-1.0, -1.0); grid.len()];
    let mut domain = vec![false; grid.len()];
    for row in 0..grid.height {
        for col in 0..grid.width {
            if !depth_a.valid_at(col, row) {
                continue;
            }
            let (x, y) = grid.center(col, row);
            let world = backproject(cam_a, x, y, depth_a.depth_at(col, row));
            let proj = project(&world, cam_b);
            if !proj.in_front {
                continue;
            }
            let idx = grid.index(col, row);
            target[idx] = proj.pixel;
            let Some((bc, br)) = grid_b.cell_of(proj.pixel.0, proj.pixel.1) else {
                continue;
            };
            if !depth_b.valid_at(bc, br) {
                continue;
            }
            let d_b = depth_b.depth_at(bc, br);
            if ((proj.depth - d_b) / d_b).abs() < OCCLUSION_REL_TOL {
                domain[idx] = true;
            }
        }
    }
    Warp::new(grid, target, domain)
}

/// Maps keypoints through a warp. Points outside the warp domain are
/// dropped; the second return value lists the indices of the surviving
/// input points.
pub fn warp_points(points: &KeypointSet, warp: &Warp) -> (KeypointSet, Vec<usize>) {
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    let mut kept = Vec::new();
    for i in 0..points.len() {
        let (x, y) = points.coord(i);
        if let Some(t) = warp.sample_target(x, y) {
            coords.push(t);
            scores.push(points.score(i));
            kept.push(i);
        }
    }
    (KeypointSet::presorted(coords, scores), kept)
}

/// Pulls a log-space map defined over view B back onto view A's grid.
///
/// In-domain pixels receive the bilinear sample of `log_map` at their
/// warped location; out-of-domain pixels receive 0, the log-space uniform
/// baseline, so non-covisible regions neither boost nor suppress the
/// combined prior.
pub fn warp_log_map(log_map: &ScoreMap, warp: &Warp) -> ScoreMap {
    let grid = warp.grid();
    Map2::from_fn(grid, |col, row| {
        if warp.domain_at(col, row) {
            let (tx, ty) = warp.target_at(col, row);
            log_map.sample_bilinear(tx, ty)
        } else {
            0.0
        }
    })
}

// --- file formats ---

const DEPTH_MAGIC: &str = "DDDM";

/// Writes a depth map: magic "DDDM", u32 height, u32 width, f32 depths
/// row-major, u8 validity bytes.
pub fn write_depth_map(path: &Path, map: &DepthMap) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    ioutil::write_magic(&mut w, DEPTH_MAGIC)?;
    let grid = map.grid();
    ioutil::write_u32(&mut w, grid.height as u32)?;
    ioutil::write_u32(&mut w, grid.width as u32)?;
    let depths: Vec<f32> = map.depth().as_slice().iter().map(|d| *d as f32).collect();
    ioutil::write_f32_slice(&mut w, &depths)?;
    let valid: Vec<u8> = map
        .valid()
        .as_slice()
        .iter()
        .map(|v| if *v { 1 } else { 0 })
        .collect();
    w.write_all(&valid)?;
    w.flush()?;
    Ok(())
}

pub fn read_depth_map(path: &Path) -> Result<DepthMap, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    ioutil::read_magic(&mut r, DEPTH_MAGIC)?;
    let height = ioutil::read_u32(&mut r)?;
    let width = ioutil::read_u32(&mut r)?;
    let (h, w) = ioutil::checked_dims(height, width)?;
    let grid = PixelGrid::new(w, h)
        .map_err(|e| FormatError::malformed("depth map", e.to_string()))?;
    let depths = ioutil::read_f32_vec(&mut r, grid.len())?;
    let mut valid_bytes = vec![0u8; grid.len()];
    r.read_exact(&mut valid_bytes)?;
    let depth = Map2::from_vec(grid, depths.iter().map(|d| *d as f64).collect());
    let valid = Map2::from_vec(grid, valid_bytes.iter().map(|b| *b != 0).collect());
    DepthMap::new(depth, valid).map_err(|e| FormatError::malformed("depth map", e.to_string()))
}

/// Writes a camera as text: three intrinsics rows, three rotation rows,
/// one translation row, whitespace-separated decimals.
pub fn write_camera(path: &Path, camera: &Camera) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in [camera.intrinsics(), camera.rotation()] {
        for r in 0..3 {
            writeln!(w, "{} {} {}", m[(r, 0)], m[(r, 1)], m[(r, 2)])?;
        }
    }
    let t = camera.translation();
    writeln!(w, "{} {} {}", t.x, t.y, t.z)?;
    w.flush()?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<Camera, FormatError> {
    let r = BufReader::new(File::open(path)?);
    let mut values = Vec::with_capacity(21);
    for line in r.lines() {
        for tok in line?.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| FormatError::malformed("camera", format!("bad number {tok:?}")))?;
            values.push(v);
        }
    }
    if values.len() != 21 {
        return Err(FormatError::malformed(
            "camera",
            format!("expected 21 numbers, got {}", values.len()),
        ));
    }
    let k = Matrix3::from_row_slice(&values[0..9]);
    let r_mat = Matrix3::from_row_slice(&values[9..18]);
    let t = Vector3::new(values[18], values[19], values[20]);
    Camera::new(k, r_mat, t).map_err(|e| FormatError::malformed("camera", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3x4, Rotation3, Vector4};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn identity_camera(f: f64, cx: f64, cy: f64) -> Camera {
        Camera::simple(f, cx, cy, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    fn random_camera(rng: &mut ChaCha12Rng) -> Camera {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(-0.5..0.5);
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let t = Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.2..0.2),
        );
        Camera::simple(
            rng.gen_range(80.0..120.0),
            rng.gen_range(28.0..36.0),
            rng.gen_range(28.0..36.0),
            *rot.matrix(),
            t,
        )
        .unwrap()
    }

    /// Plane z = d seen by `cam`: camera depth of the surface point hit by
    /// each pixel ray, derived independently from the ray equation.
    fn plane_depth_map(grid: PixelGrid, cam: &Camera, plane_z: f64) -> DepthMap {
        let depth = Map2::from_fn(grid, |c, r| {
            let (x, y) = grid.center(c, r);
            let dir = cam.rotation().transpose() * cam.pixel_ray(x, y);
            let origin = cam.center();
            (plane_z - origin.z) / dir.z
        });
        let valid = Map2::filled(grid, true);
        DepthMap::new(depth, valid).unwrap()
    }

    #[test]
    fn project_principal_point() {
        let cam = identity_camera(100.0, 50.0, 50.0);
        let p = project(&Vector3::new(0.0, 0.0, 2.0), &cam);
        assert!(p.in_front);
        assert!((p.pixel.0 - 50.0).abs() < 1e-12);
        assert!((p.pixel.1 - 50.0).abs() < 1e-12);
        assert!((p.depth - 2.0).abs() < 1e-12);
    }

    #[test]
    fn project_behind_camera_flagged() {
        let cam = identity_camera(100.0, 50.0, 50.0);
        let p = project(&Vector3::new(0.3, -0.1, -1.0), &cam);
        assert!(!p.in_front);
    }

    #[test]
    fn project_matches_homogeneous_oracle() {
        // Oracle: x ~ K [R | t] X_h, dehomogenized, all in one matrix product.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let cam = random_camera(&mut rng);
            let point = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(2.0..8.0),
            );
            let mut p_mat = Matrix3x4::zeros();
            p_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(cam.rotation());
            p_mat.fixed_view_mut::<3, 1>(0, 3).copy_from(cam.translation());
            let full = cam.intrinsics() * p_mat;
            let h = full * Vector4::new(point.x, point.y, point.z, 1.0);
            let expected = (h.x / h.z, h.y / h.z);

            let got = project(&point, &cam);
            assert!(got.in_front);
            assert!((got.pixel.0 - expected.0).abs() < 1e-9);
            assert!((got.pixel.1 - expected.1).abs() < 1e-9);
        }
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let x = rng.gen_range(0.0..64.0);
            let y = rng.gen_range(0.0..64.0);
            let depth = rng.gen_range(0.5..100.0);
            let world = backproject(&cam, x, y, depth);
            let p = project(&world, &cam);
            assert!(p.in_front);
            assert!((p.pixel.0 - x).abs() < 1e-7, "x err {}", (p.pixel.0 - x).abs());
            assert!((p.pixel.1 - y).abs() < 1e-7);
            assert!((p.depth - depth).abs() / depth < 1e-9);
        }
    }

    #[test]
    fn identity_pair_gives_identity_warp() {
        let grid = PixelGrid::new(12, 10).unwrap();
        let cam = identity_camera(40.0, 6.0, 5.0);
        let depth = DepthMap::new(Map2::filled(grid, 2.0), Map2::filled(grid, true)).unwrap();
        let warp = build_warp(&depth, &cam, &cam, &depth);
        for r in 0..grid.height {
            for c in 0..grid.width {
                assert!(warp.domain_at(c, r));
                let (x, y) = grid.center(c, r);
                let t = warp.target_at(c, r);
                assert!((t.0 - x).abs() < 1e-6 && (t.1 - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fronto_parallel_translation_gives_constant_offset() {
        let grid = PixelGrid::new(32, 32).unwrap();
        let f = 50.0;
        let depth_z = 4.0;
        let baseline = 0.4;
        let cam_a = identity_camera(f, 16.0, 16.0);
        // Camera B at world (baseline, 0, 0): t = -R c = -(baseline, 0, 0).
        let cam_b = Camera::simple(
            f,
            16.0,
            16.0,
            Matrix3::identity(),
            Vector3::new(-baseline, 0.0, 0.0),
        )
        .unwrap();
        let depth = DepthMap::new(Map2::filled(grid, depth_z), Map2::filled(grid, true)).unwrap();
        let warp = build_warp(&depth, &cam_a, &cam_b, &depth);
        let expected_offset = -f * baseline / depth_z;
        let mut checked = 0;
        for r in 0..grid.height {
            for c in 0..grid.width {
                let (x, y) = grid.center(c, r);
                let t = warp.target_at(c, r);
                if warp.domain_at(c, r) {
                    assert!((t.0 - (x + expected_offset)).abs() < 1e-9);
                    assert!((t.1 - y).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn occluder_in_b_leaves_domain() {
        let grid = PixelGrid::new(16, 16).unwrap();
        let cam = identity_camera(30.0, 8.0, 8.0);
        let depth_a = DepthMap::new(Map2::filled(grid, 2.0), Map2::filled(grid, true)).unwrap();
        // B sees an occluder at half depth over a block of pixels.
        let depth_b_map = Map2::from_fn(grid, |c, r| {
            if (4..8).contains(&c) && (4..8).contains(&r) {
                1.0
            } else {
                2.0
            }
        });
        let depth_b = DepthMap::new(depth_b_map, Map2::filled(grid, true)).unwrap();
        let warp = build_warp(&depth_a, &cam, &cam, &depth_b);
        for r in 0..grid.height {
            for c in 0..grid.width {
                let occluded = (4..8).contains(&c) && (4..8).contains(&r);
                assert_eq!(warp.domain_at(c, r), !occluded, "cell ({c},{r})");
            }
        }
    }

    #[test]
    fn warp_points_identity_and_drop() {
        let grid = PixelGrid::new(4, 4).unwrap();
        let target: Vec<(f64, f64)> = (0..grid.len())
            .map(|i| {
                let (c, r) = (i % 4, i / 4);
                grid.center(c, r)
            })
            .collect();
        let mut domain = vec![true; grid.len()];
        domain[grid.index(2, 2)] = false;
        let warp = Warp::new(grid, target, domain);
        let kps = KeypointSet::presorted(
            vec![(1.5, 1.5), (2.5, 2.5), (0.5, 3.5)],
            vec![3.0, 2.0, 1.0],
        );
        let (warped, kept) = warp_points(&kps, &warp);
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(warped.coord(0), (1.5, 1.5));
        assert_eq!(warped.coord(1), (0.5, 3.5));
    }

    #[test]
    fn warp_points_bilinear_hand_case() {
        // Four cells with known warp values; query point at the shared
        // corner (1, 1) blends them with equal weights 1/4.
        let grid = PixelGrid::new(2, 2).unwrap();
        let target = vec![(1.0, 1.0), (3.0, 1.0), (1.0, 3.0), (3.0, 5.0)];
        let warp = Warp::new(grid, target, vec![true; 4]);
        let kps = KeypointSet::presorted(vec![(1.0, 1.0)], vec![1.0]);
        let (warped, kept) = warp_points(&kps, &warp);
        assert_eq!(kept, vec![0]);
        let (x, y) = warped.coord(0);
        assert!((x - 2.0).abs() < 1e-12);
        assert!((y - 2.5).abs() < 1e-12);
    }

    #[test]
    fn warp_log_map_identity_and_constant() {
        let grid = PixelGrid::new(5, 4).unwrap();
        let target: Vec<(f64, f64)> = (0..grid.len())
            .map(|i| grid.center(i % 5, i / 5))
            .collect();
        let mut domain = vec![true; grid.len()];
        domain[3] = false;
        let warp = Warp::new(grid, target.clone(), domain.clone());

        let log_map = Map2::from_fn(grid, |c, r| (c * 7 + r) as f64 * 0.25);
        let pulled = warp_log_map(&log_map, &warp);
        for r in 0..grid.height {
            for c in 0..grid.width {
                if *Map2::from_vec(grid, domain.clone()).at(c, r) {
                    assert!((pulled.at(c, r) - log_map.at(c, r)).abs() < 1e-6);
                } else {
                    assert_eq!(*pulled.at(c, r), 0.0);
                }
            }
        }

        let constant = Map2::filled(grid, 3.25);
        let pulled_const = warp_log_map(&constant, &warp);
        for (i, v) in pulled_const.as_slice().iter().enumerate() {
            if domain[i] {
                assert_eq!(*v, 3.25);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn warp_log_map_integer_shift_moves_hot_cell() {
        let grid = PixelGrid::new(3, 3).unwrap();
        // Shift by +1 column: A pixel (c, r) reads B pixel (c + 1, r).
        let mut target = Vec::new();
        let mut domain = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                let (x, y) = grid.center(c, r);
                target.push((x + 1.0, y));
                domain.push(c + 1 < 3);
            }
        }
        let warp = Warp::new(grid, target, domain);
        let mut log_map = Map2::filled(grid, 0.0);
        *log_map.at_mut(2, 1) = 7.0;
        let pulled = warp_log_map(&log_map, &warp);
        for r in 0..3 {
            for c in 0..3 {
                let expected = if c == 1 && r == 1 { 7.0 } else { 0.0 };
                assert_eq!(*pulled.at(c, r), expected, "cell ({c},{r})");
            }
        }
    }

    #[test]
    fn warp_round_trip_on_plane_scene() {
        let grid = PixelGrid::new(24, 24).unwrap();
        let plane_z = 3.0;
        let cam_a = identity_camera(30.0, 12.0, 12.0);
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.06);
        let center_b = Vector3::new(0.25, 0.05, 0.0);
        let t_b = -(rot.matrix() * center_b);
        let cam_b = Camera::simple(30.0, 12.0, 12.0, *rot.matrix(), t_b).unwrap();
        let depth_a = plane_depth_map(grid, &cam_a, plane_z);
        let depth_b = plane_depth_map(grid, &cam_b, plane_z);
        let warp_ab = build_warp(&depth_a, &cam_a, &cam_b, &depth_b);
        let warp_ba = build_warp(&depth_b, &cam_b, &cam_a, &depth_a);

        let mut checked = 0;
        for r in 0..grid.height {
            for c in 0..grid.width {
                if !warp_ab.domain_at(c, r) {
                    continue;
                }
                let (x, y) = grid.center(c, r);
                let fwd = warp_ab.target_at(c, r);
                if !warp_ba.fully_supported(fwd.0, fwd.1) {
                    continue;
                }
                let Some(back) = warp_ba.sample_target(fwd.0, fwd.1) else {
                    continue;
                };
                let err = ((back.0 - x).powi(2) + (back.1 - y).powi(2)).sqrt();
                assert!(err < 0.05, "round trip error {err} at ({c},{r})");
                checked += 1;
            }
        }
        assert!(checked > 200, "too few round-trip samples: {checked}");
    }

    #[test]
    fn depth_map_file_round_trip() {
        let grid = PixelGrid::new(6, 5).unwrap();
        let depth = Map2::from_fn(grid, |c, r| 1.0 + 0.5 * (c as f64) + 0.25 * (r as f64));
        let valid = Map2::from_fn(grid, |c, r| (c + r) % 3 != 0);
        let dm = DepthMap::new(depth, valid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dddm");
        write_depth_map(&path, &dm).unwrap();
        let back = read_depth_map(&path).unwrap();
        assert_eq!(back.grid(), grid);
        for r in 0..5 {
            for c in 0..6 {
                assert_eq!(back.valid_at(c, r), dm.valid_at(c, r));
                assert!((back.depth_at(c, r) - dm.depth_at(c, r)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn camera_file_round_trip_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let cam = random_camera(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cam.txt");
        write_camera(&path, &cam).unwrap();
        let back = read_camera(&path).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn bad_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.5;
        assert!(Camera::simple(10.0, 1.0, 1.0, r, Vector3::zeros()).is_err());
    }
}
