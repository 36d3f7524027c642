//! Deterministic synthetic two-view scenes with ground-truth geometry and
//! a simulated base detector.
//!
//! A scene is a textured surface (plane or smooth heightfield) observed by
//! two calibrated cameras. Texture is multi-octave value noise attached to
//! world coordinates, so both views are photometrically consistent. Tracks
//! are surface points sampled through view A's pixels; the base detector
//! is simulated by independent per-view Bernoulli detection flags. The top
//! of the scene is a "sky" band with invalid depth.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::geometry::{
    backproject, build_warp, project, read_camera, read_depth_map, write_camera, write_depth_map,
    Camera, DepthMap, Warp,
};
use crate::ioutil::FormatError;
use crate::map::{Map2, PixelGrid};
use crate::matcher::KeypointSet;

/// Camera depth of the flat reference surface, meters.
const BASE_DEPTH: f64 = 4.0;
/// Heightfield elevation amplitude, meters.
const HEIGHT_AMP: f64 = 0.2;
/// Intensity of sky pixels.
const SKY_INTENSITY: f64 = 0.85;
/// Texture wavelength of the coarsest octave, in view-A pixels.
const TEXTURE_BASE_WAVELENGTH_PX: f64 = 7.0;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene grid must be at least 16x16, got {0}x{1}")]
    GridTooSmall(usize, usize),
    #[error("detection probability must be in (0, 1], got {0}")]
    BadDetectionProbability(f64),
    #[error("track count must be at least 1")]
    NoTracks,
    #[error("baseline range [{0}, {1}] is invalid")]
    BadBaseline(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Plane,
    Heightfield,
}

impl SurfaceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SurfaceKind::Plane => "plane",
            SurfaceKind::Heightfield => "heightfield",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plane" => Some(SurfaceKind::Plane),
            "heightfield" => Some(SurfaceKind::Heightfield),
            _ => None,
        }
    }
}

/// Generation parameters for one scene family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Camera baseline range in meters.
    pub baseline_min: f64,
    pub baseline_max: f64,
    pub surface: SurfaceKind,
    pub track_count: usize,
    /// Per-view probability that the simulated base detector fires.
    pub detect_prob: f64,
    pub texture_octaves: usize,
    /// Fraction of view A's height covered by the invalid sky band.
    pub sky_fraction: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            baseline_min: 0.15,
            baseline_max: 0.35,
            surface: SurfaceKind::Plane,
            track_count: 40,
            detect_prob: 0.7,
            texture_octaves: 4,
            sky_fraction: 0.15,
        }
    }
}

/// Simulated 3D tracks with per-view detection flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub points: Vec<Vector3<f64>>,
    pub detected_a: Vec<bool>,
    pub detected_b: Vec<bool>,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    A,
    B,
}

impl View {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "a" | "A" => Some(View::A),
            "b" | "B" => Some(View::B),
            _ => None,
        }
    }
}

/// Two registered views of one synthetic surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_a: Map2<f64>,
    pub image_b: Map2<f64>,
    pub depth_a: DepthMap,
    pub depth_b: DepthMap,
    pub cam_a: Camera,
    pub cam_b: Camera,
    pub tracks: TrackSet,
    pub seed: u64,
}

impl Scene {
    pub fn grid(&self) -> PixelGrid {
        self.image_a.grid()
    }

    pub fn camera(&self, view: View) -> &Camera {
        match view {
            View::A => &self.cam_a,
            View::B => &self.cam_b,
        }
    }

    pub fn depth(&self, view: View) -> &DepthMap {
        match view {
            View::A => &self.depth_a,
            View::B => &self.depth_b,
        }
    }

    pub fn image(&self, view: View) -> &Map2<f64> {
        match view {
            View::A => &self.image_a,
            View::B => &self.image_b,
        }
    }

    /// Warp from `view` into the other view.
    pub fn warp_from(&self, view: View) -> Warp {
        match view {
            View::A => build_warp(&self.depth_a, &self.cam_a, &self.cam_b, &self.depth_b),
            View::B => build_warp(&self.depth_b, &self.cam_b, &self.cam_a, &self.depth_a),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let mut h = splitmix64(seed ^ 0x6A09_E667_F3BC_C909);
    h = splitmix64(h ^ octave);
    h = splitmix64(h ^ (ix as u64));
    h = splitmix64(h ^ (iy as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn quintic_fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Value noise in [0, 1) on a unit lattice.
fn value_noise(seed: u64, octave: u64, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (ix, iy) = (x0 as i64, y0 as i64);
    let fx = quintic_fade(x - x0);
    let fy = quintic_fade(y - y0);
    let v00 = lattice_value(seed, octave, ix, iy);
    let v10 = lattice_value(seed, octave, ix + 1, iy);
    let v01 = lattice_value(seed, octave, ix, iy + 1);
    let v11 = lattice_value(seed, octave, ix + 1, iy + 1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

/// Multi-octave value noise normalized to [0, 1).
fn fbm(seed: u64, x: f64, y: f64, octaves: usize) -> f64 {
    let octaves = octaves.max(1);
    let mut acc = 0.0;
    let mut amp = 1.0;
    let mut norm = 0.0;
    let mut freq = 1.0;
    for o in 0..octaves {
        acc += amp * value_noise(seed, o as u64, x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    acc / norm
}

/// World geometry shared by both views of a scene.
struct Surface {
    kind: SurfaceKind,
    elevation_seed: u64,
    /// World Y below which rays hit sky instead of surface.
    sky_y_cut: f64,
    /// World meters per coarse texture cell.
    texture_scale: f64,
    texture_seed: u64,
    texture_octaves: usize,
}

impl Surface {
    fn elevation(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            SurfaceKind::Plane => BASE_DEPTH,
            SurfaceKind::Heightfield => {
                let s = 1.2; // meters per elevation lattice cell
                BASE_DEPTH + HEIGHT_AMP * (2.0 * fbm(self.elevation_seed, x / s, y / s, 2) - 1.0)
            }
        }
    }

    fn albedo(&self, x: f64, y: f64) -> f64 {
        0.1 + 0.8
            * fbm(
                self.texture_seed,
                x / self.texture_scale,
                y / self.texture_scale,
                self.texture_octaves,
            )
    }

    /// Camera depth of the surface along the pixel ray, or `None` when the
    /// ray misses or the hit falls in the sky region.
    fn hit_depth(&self, cam: &Camera, x: f64, y: f64) -> Option<f64> {
        let origin = cam.center();
        let dir = cam.rotation().transpose() * cam.pixel_ray(x, y);
        let depth = match self.kind {
            SurfaceKind::Plane => (BASE_DEPTH - origin.z) / dir.z,
            SurfaceKind::Heightfield => {
                let f = |lambda: f64| {
                    let p = origin + dir * lambda;
                    p.z - self.elevation(p.x, p.y)
                };
                let lo0 = 0.25 * BASE_DEPTH;
                let hi0 = 3.0 * BASE_DEPTH;
                let steps = 48;
                let mut bracket = None;
                let mut prev = lo0;
                let mut prev_f = f(prev);
                for s in 1..=steps {
                    let cur = lo0 + (hi0 - lo0) * s as f64 / steps as f64;
                    let cur_f = f(cur);
                    if prev_f <= 0.0 && cur_f > 0.0 {
                        bracket = Some((prev, cur));
                        break;
                    }
                    prev = cur;
                    prev_f = cur_f;
                }
                let (mut lo, mut hi) = bracket?;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) <= 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        };
        if !(depth.is_finite() && depth > 0.0) {
            return None;
        }
        let p = origin + dir * depth;
        if p.y < self.sky_y_cut {
            return None;
        }
        Some(depth)
    }
}

fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let world_down = Vector3::new(0.0, 1.0, 0.0);
    let x = world_down.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn render_view(surface: &Surface, cam: &Camera, grid: PixelGrid) -> (Map2<f64>, DepthMap) {
    let mut image = Map2::filled(grid, SKY_INTENSITY);
    let mut depth = Map2::filled(grid, 0.0);
    let mut valid = Map2::filled(grid, false);
    let origin = cam.center();
    for r in 0..grid.height {
        for c in 0..grid.width {
            let (x, y) = grid.center(c, r);
            if let Some(d) = surface.hit_depth(cam, x, y) {
                let dir = cam.rotation().transpose() * cam.pixel_ray(x, y);
                let p = origin + dir * d;
                *image.at_mut(c, r) = surface.albedo(p.x, p.y);
                *depth.at_mut(c, r) = d;
                *valid.at_mut(c, r) = true;
            }
        }
    }
    (image, DepthMap::new(depth, valid).expect("positive depths"))
}

/// Builds a deterministic synthetic scene. Identical `(params, seed)`
/// pairs produce identical scenes.
pub fn make_scene(params: &SceneParams, seed: u64) -> Result<Scene, SceneError> {
    if params.width < 16 || params.height < 16 {
        return Err(SceneError::GridTooSmall(params.width, params.height));
    }
    if !(params.detect_prob > 0.0 && params.detect_prob <= 1.0) {
        return Err(SceneError::BadDetectionProbability(params.detect_prob));
    }
    if params.track_count == 0 {
        return Err(SceneError::NoTracks);
    }
    if !(params.baseline_min > 0.0 && params.baseline_min <= params.baseline_max) {
        return Err(SceneError::BadBaseline(
            params.baseline_min,
            params.baseline_max,
        ));
    }
    let grid = PixelGrid::new(params.width, params.height).expect("validated above");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let f = 0.9 * params.width.min(params.height) as f64;
    let (cx, cy) = (params.width as f64 / 2.0, params.height as f64 / 2.0);
    let cam_a = Camera::simple(f, cx, cy, Matrix3::identity(), Vector3::zeros())
        .expect("identity pose is valid");

    let baseline = rng.gen_range(params.baseline_min..=params.baseline_max);
    let dir = Vector3::new(1.0, rng.gen_range(-0.25..0.25), rng.gen_range(-0.1..0.1)).normalize();
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let center_b = dir * baseline * sign;
    let rot_b = look_at(center_b, Vector3::new(0.0, 0.0, BASE_DEPTH));
    let cam_b =
        Camera::simple(f, cx, cy, rot_b, -(rot_b * center_b)).expect("look-at pose is valid");

    // Sky: everything above the world Y where view A's sky band boundary
    // meets the reference plane.
    let sky_y_cut = if params.sky_fraction > 0.0 {
        (params.sky_fraction * params.height as f64 - cy) / f * BASE_DEPTH
    } else {
        f64::NEG_INFINITY
    };
    let surface = Surface {
        kind: params.surface,
        elevation_seed: splitmix64(seed ^ 0x01),
        sky_y_cut,
        texture_scale: TEXTURE_BASE_WAVELENGTH_PX * BASE_DEPTH / f,
        texture_seed: splitmix64(seed ^ 0x02),
        texture_octaves: params.texture_octaves,
    };

    let (image_a, depth_a) = render_view(&surface, &cam_a, grid);
    let (image_b, depth_b) = render_view(&surface, &cam_b, grid);

    let mut points = Vec::with_capacity(params.track_count);
    let mut detected_a = Vec::with_capacity(params.track_count);
    let mut detected_b = Vec::with_capacity(params.track_count);
    let mut guard = 0;
    while points.len() < params.track_count {
        guard += 1;
        assert!(guard < 100_000, "track sampling failed to converge");
        let x = rng.gen_range(0.5..params.width as f64 - 0.5);
        let y = rng.gen_range(0.5..params.height as f64 - 0.5);
        let Some(d) = surface.hit_depth(&cam_a, x, y) else {
            continue;
        };
        points.push(backproject(&cam_a, x, y, d));
        let (da, db) = loop {
            let da = rng.gen_bool(params.detect_prob);
            let db = rng.gen_bool(params.detect_prob);
            if da || db {
                break (da, db);
            }
        };
        detected_a.push(da);
        detected_b.push(db);
    }

    Ok(Scene {
        image_a,
        image_b,
        depth_a,
        depth_b,
        cam_a,
        cam_b,
        tracks: TrackSet {
            points,
            detected_a,
            detected_b,
        },
        seed,
    })
}

/// Projects the scene's tracks into one view and keeps the union of
/// detections: tracks detected in this view, plus tracks detected in the
/// other view that are covisible according to the warp domain.
pub fn track_keypoints(scene: &Scene, view: View) -> KeypointSet {
    let warp = scene.warp_from(view);
    track_keypoints_with_warp(scene, view, &warp)
}

/// [`track_keypoints`] with a precomputed warp from `view` into the other
/// view.
pub fn track_keypoints_with_warp(scene: &Scene, view: View, warp: &Warp) -> KeypointSet {
    let cam = scene.camera(view);
    let grid = scene.grid();
    let (det_this, det_other): (&[bool], &[bool]) = match view {
        View::A => (&scene.tracks.detected_a, &scene.tracks.detected_b),
        View::B => (&scene.tracks.detected_b, &scene.tracks.detected_a),
    };
    let mut coords = Vec::new();
    for (i, point) in scene.tracks.points.iter().enumerate() {
        let proj = project(point, cam);
        if !proj.in_front || !grid.contains(proj.pixel.0, proj.pixel.1) {
            continue;
        }
        let covisible = warp.domain_contains(proj.pixel.0, proj.pixel.1);
        if det_this[i] || (det_other[i] && covisible) {
            coords.push(proj.pixel);
        }
    }
    let n = coords.len();
    KeypointSet::presorted(coords, vec![1.0; n])
}

// --- scene directory format ---

/// Writes a 16-bit binary PGM (maxval 65535, big-endian samples).
pub fn write_pgm16(path: &Path, image: &Map2<f64>) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", image.width(), image.height())?;
    for v in image.as_slice() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<Map2<f64>, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut byte = [0u8; 1];
    let mut fields: Vec<String> = Vec::new();
    let mut cur = String::new();
    // Magic plus three whitespace-separated header fields; a single
    // whitespace byte terminates the maxval.
    while fields.len() < 4 {
        r.read_exact(&mut byte)?;
        let ch = byte[0] as char;
        if ch.is_ascii_whitespace() {
            if !cur.is_empty() {
                fields.push(std::mem::take(&mut cur));
            }
            if fields.len() == 4 {
                break;
            }
        } else {
            cur.push(ch);
        }
    }
    if fields[0] != "P5" {
        return Err(FormatError::malformed("pgm", "not a binary PGM"));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| FormatError::malformed("pgm", "bad width"))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| FormatError::malformed("pgm", "bad height"))?;
    if fields[3] != "65535" {
        return Err(FormatError::malformed("pgm", "expected maxval 65535"));
    }
    let grid = PixelGrid::new(w, h).map_err(|e| FormatError::malformed("pgm", e.to_string()))?;
    let mut bytes = vec![0u8; grid.len() * 2];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Ok(Map2::from_vec(grid, data))
}

/// Writes a scene directory: `imageA.pgm`, `imageB.pgm`, `depthA.dddm`,
/// `depthB.dddm`, `camA.txt`, `camB.txt`, `tracks.txt`, `meta.txt`.
pub fn save_scene(dir: &Path, scene: &Scene, params: &SceneParams) -> Result<(), FormatError> {
    fs::create_dir_all(dir)?;
    write_pgm16(&dir.join("imageA.pgm"), &scene.image_a)?;
    write_pgm16(&dir.join("imageB.pgm"), &scene.image_b)?;
    write_depth_map(&dir.join("depthA.dddm"), &scene.depth_a)?;
    write_depth_map(&dir.join("depthB.dddm"), &scene.depth_b)?;
    write_camera(&dir.join("camA.txt"), &scene.cam_a)?;
    write_camera(&dir.join("camB.txt"), &scene.cam_b)?;

    let mut w = BufWriter::new(File::create(dir.join("tracks.txt"))?);
    let t = &scene.tracks;
    for i in 0..t.len() {
        let p = t.points[i];
        writeln!(
            w,
            "{} {} {} {} {}",
            p.x, p.y, p.z, t.detected_a[i] as u8, t.detected_b[i] as u8
        )?;
    }
    w.flush()?;

    let mut m = BufWriter::new(File::create(dir.join("meta.txt"))?);
    writeln!(m, "seed={}", scene.seed)?;
    writeln!(m, "width={}", params.width)?;
    writeln!(m, "height={}", params.height)?;
    writeln!(m, "baseline_min={}", params.baseline_min)?;
    writeln!(m, "baseline_max={}", params.baseline_max)?;
    writeln!(m, "surface={}", params.surface.as_str())?;
    writeln!(m, "track_count={}", params.track_count)?;
    writeln!(m, "detect_prob={}", params.detect_prob)?;
    writeln!(m, "texture_octaves={}", params.texture_octaves)?;
    writeln!(m, "sky_fraction={}", params.sky_fraction)?;
    m.flush()?;
    Ok(())
}

/// Reads a scene directory written by [`save_scene`].
pub fn load_scene(dir: &Path) -> Result<Scene, FormatError> {
    let image_a = read_pgm16(&dir.join("imageA.pgm"))?;
    let image_b = read_pgm16(&dir.join("imageB.pgm"))?;
    let depth_a = read_depth_map(&dir.join("depthA.dddm"))?;
    let depth_b = read_depth_map(&dir.join("depthB.dddm"))?;
    let cam_a = read_camera(&dir.join("camA.txt"))?;
    let cam_b = read_camera(&dir.join("camB.txt"))?;

    let r = BufReader::new(File::open(dir.join("tracks.txt"))?);
    let mut points = Vec::new();
    let mut detected_a = Vec::new();
    let mut detected_b = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(FormatError::malformed(
                "tracks",
                format!("bad line {line:?}"),
            ));
        }
        let mut xyz = [0.0f64; 3];
        for (v, t) in xyz.iter_mut().zip(&toks[..3]) {
            *v = t
                .parse()
                .map_err(|_| FormatError::malformed("tracks", format!("bad number {t:?}")))?;
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(FormatError::malformed("tracks", format!("bad flag {s:?}"))),
        };
        points.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
        detected_a.push(flag(toks[3])?);
        detected_b.push(flag(toks[4])?);
    }

    let mut seed = 0u64;
    let meta = BufReader::new(File::open(dir.join("meta.txt"))?);
    for line in meta.lines() {
        let line = line?;
        if let Some(v) = line.strip_prefix("seed=") {
            seed = v
                .parse()
                .map_err(|_| FormatError::malformed("meta", "bad seed"))?;
        }
    }

    Ok(Scene {
        image_a,
        image_b,
        depth_a,
        depth_b,
        cam_a,
        cam_b,
        tracks: TrackSet {
            points,
            detected_a,
            detected_b,
        },
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn small_params() -> SceneParams {
        SceneParams {
            width: 32,
            height: 32,
            track_count: 20,
            ..SceneParams::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_scenes() {
        for surface in [SurfaceKind::Plane, SurfaceKind::Heightfield] {
            let params = SceneParams {
                surface,
                ..small_params()
            };
            let a = make_scene(&params, 99).unwrap();
            let b = make_scene(&params, 99).unwrap();
            assert_eq!(a, b);
            let c = make_scene(&params, 100).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn full_detection_probability_marks_every_track() {
        let params = SceneParams {
            detect_prob: 1.0,
            ..small_params()
        };
        let scene = make_scene(&params, 5).unwrap();
        assert!(scene.tracks.detected_a.iter().all(|d| *d));
        assert!(scene.tracks.detected_b.iter().all(|d| *d));
    }

    #[test]
    fn every_track_has_a_detection() {
        let params = SceneParams {
            detect_prob: 0.3,
            ..small_params()
        };
        let scene = make_scene(&params, 8).unwrap();
        for i in 0..scene.tracks.len() {
            assert!(scene.tracks.detected_a[i] || scene.tracks.detected_b[i]);
        }
    }

    #[test]
    fn tiny_grid_rejected() {
        let params = SceneParams {
            width: 8,
            height: 8,
            ..SceneParams::default()
        };
        assert_eq!(make_scene(&params, 1), Err(SceneError::GridTooSmall(8, 8)));
    }

    #[test]
    fn planar_tracks_agree_with_direct_projection_through_warp() {
        let params = SceneParams {
            detect_prob: 1.0,
            ..small_params()
        };
        let scene = make_scene(&params, 21).unwrap();
        let warp = scene.warp_from(View::A);
        let mut checked = 0;
        for point in &scene.tracks.points {
            let pa = project(point, &scene.cam_a);
            let pb = project(point, &scene.cam_b);
            assert!(pa.in_front);
            if !pb.in_front || !warp.fully_supported(pa.pixel.0, pa.pixel.1) {
                continue;
            }
            let Some(w) = warp.sample_target(pa.pixel.0, pa.pixel.1) else {
                continue;
            };
            let err = ((w.0 - pb.pixel.0).powi(2) + (w.1 - pb.pixel.1).powi(2)).sqrt();
            assert!(err < 0.05, "warp vs projection error {err}");
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} tracks checked");
    }

    #[test]
    fn union_includes_covisible_other_view_detections() {
        let mut scene = make_scene(
            &SceneParams {
                detect_prob: 1.0,
                track_count: 12,
                ..small_params()
            },
            3,
        )
        .unwrap();
        // Track 0: detected only in B. It stays in A's set iff covisible.
        scene.tracks.detected_a[0] = false;
        let warp = scene.warp_from(View::A);
        let p0 = project(&scene.tracks.points[0], &scene.cam_a);
        let covisible = warp.domain_contains(p0.pixel.0, p0.pixel.1);
        let kps = track_keypoints_with_warp(&scene, View::A, &warp);
        let present = kps
            .coords()
            .iter()
            .any(|c| (c.0 - p0.pixel.0).abs() < 1e-9 && (c.1 - p0.pixel.1).abs() < 1e-9);
        assert_eq!(present, covisible);
        assert!(covisible, "expected the sampled track to be covisible");
    }

    #[test]
    fn occluded_other_view_detection_is_dropped() {
        let mut scene = make_scene(
            &SceneParams {
                detect_prob: 1.0,
                track_count: 12,
                ..small_params()
            },
            3,
        )
        .unwrap();
        scene.tracks.detected_a[0] = false;
        let p0 = project(&scene.tracks.points[0], &scene.cam_a);
        // Invalidate B's depth everywhere: nothing is covisible anymore.
        let grid = scene.grid();
        scene.depth_b =
            DepthMap::new(scene.depth_b.depth().clone(), Map2::filled(grid, false)).unwrap();
        let warp = scene.warp_from(View::A);
        let kps = track_keypoints_with_warp(&scene, View::A, &warp);
        let present = kps
            .coords()
            .iter()
            .any(|c| (c.0 - p0.pixel.0).abs() < 1e-9 && (c.1 - p0.pixel.1).abs() < 1e-9);
        assert!(!present);
    }

    #[test]
    fn full_detection_sets_correspond_under_warp() {
        let params = SceneParams {
            detect_prob: 1.0,
            ..small_params()
        };
        let scene = make_scene(&params, 13).unwrap();
        let warp_ab = scene.warp_from(View::A);
        let warp_ba = scene.warp_from(View::B);
        let kps_a = track_keypoints_with_warp(&scene, View::A, &warp_ab);
        let kps_b = track_keypoints_with_warp(&scene, View::B, &warp_ba);
        assert_eq!(kps_a.len(), kps_b.len());
        let mut checked = 0;
        for i in 0..kps_a.len() {
            let (x, y) = kps_a.coord(i);
            if !warp_ab.fully_supported(x, y) {
                continue;
            }
            let Some(w) = warp_ab.sample_target(x, y) else {
                continue;
            };
            let best = kps_b
                .coords()
                .iter()
                .map(|c| ((c.0 - w.0).powi(2) + (c.1 - w.1).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.05, "correspondence error {best}");
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn warped_track_keypoints_are_subset_of_other_view() {
        for seed in [1u64, 7, 19] {
            let params = SceneParams {
                detect_prob: 0.5,
                surface: SurfaceKind::Heightfield,
                ..small_params()
            };
            let scene = make_scene(&params, seed).unwrap();
            let warp_ab = scene.warp_from(View::A);
            let warp_ba = scene.warp_from(View::B);
            let kps_a = track_keypoints_with_warp(&scene, View::A, &warp_ab);
            let kps_b = track_keypoints_with_warp(&scene, View::B, &warp_ba);
            for i in 0..kps_a.len() {
                let (x, y) = kps_a.coord(i);
                if !warp_ab.fully_supported(x, y) {
                    continue;
                }
                let Some(w) = warp_ab.sample_target(x, y) else {
                    continue;
                };
                // Mutual covisibility: the landing point must be in the
                // reverse domain too.
                if !warp_ba.domain_contains(w.0, w.1) {
                    continue;
                }
                let best = kps_b
                    .coords()
                    .iter()
                    .map(|c| ((c.0 - w.0).powi(2) + (c.1 - w.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 0.1, "seed {seed}: unmatched warped keypoint ({best})");
            }
        }
    }

    #[test]
    fn higher_detection_probability_yields_more_keypoints() {
        let base = SceneParams {
            track_count: 30,
            ..small_params()
        };
        let mut totals = Vec::new();
        for q in [0.3, 0.7] {
            let params = SceneParams {
                detect_prob: q,
                ..base
            };
            let mut total = 0usize;
            for seed in 0..100u64 {
                let scene = make_scene(&params, seed).unwrap();
                let warp = scene.warp_from(View::A);
                total += track_keypoints_with_warp(&scene, View::A, &warp).len();
            }
            totals.push(total);
        }
        assert!(
            totals[1] > totals[0],
            "expected more keypoints at higher q: {totals:?}"
        );
    }

    #[test]
    fn sky_band_is_invalid_and_flat() {
        let scene = make_scene(&SceneParams::default(), 77).unwrap();
        let grid = scene.grid();
        let mut sky_cells = 0;
        for r in 0..grid.height / 10 {
            for c in 0..grid.width {
                if !scene.depth_a.valid_at(c, r) {
                    sky_cells += 1;
                    assert_eq!(*scene.image_a.at(c, r), SKY_INTENSITY);
                }
            }
        }
        assert!(sky_cells > 0, "expected some sky in the top rows");
        assert!(scene.depth_a.valid_count() > grid.len() / 2);
    }

    #[test]
    fn scene_directory_round_trip() {
        let params = SceneParams {
            surface: SurfaceKind::Heightfield,
            ..small_params()
        };
        let scene = make_scene(&params, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &scene, &params).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back.seed, scene.seed);
        assert_eq!(back.cam_a, scene.cam_a);
        assert_eq!(back.cam_b, scene.cam_b);
        assert_eq!(back.tracks, scene.tracks);
        for (a, b) in back.image_a.as_slice().iter().zip(scene.image_a.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        for r in 0..scene.grid().height {
            for c in 0..scene.grid().width {
                assert_eq!(back.depth_a.valid_at(c, r), scene.depth_a.valid_at(c, r));
                if scene.depth_a.valid_at(c, r) {
                    let rel = (back.depth_a.depth_at(c, r) - scene.depth_a.depth_at(c, r)).abs()
                        / scene.depth_a.depth_at(c, r);
                    assert!(rel < 1e-6);
                }
            }
        }
    }

    #[test]
    fn save_is_idempotent() {
        let params = small_params();
        let scene = make_scene(&params, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &scene, &params).unwrap();
        let first = fs::read(dir.path().join("imageA.pgm")).unwrap();
        save_scene(dir.path(), &scene, &params).unwrap();
        let second = fs::read(dir.path().join("imageA.pgm")).unwrap();
        assert_eq!(first, second);
    }
}
