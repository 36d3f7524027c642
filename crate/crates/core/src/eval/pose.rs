//! Relative pose from pixel correspondences: normalized 8-point essential
//! matrix estimation inside RANSAC with Sampson-error scoring, followed by
//! an inlier refit, decomposition, and a cheirality vote.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::geometry::Camera;

#[derive(Debug, Error, PartialEq)]
pub enum PoseSolveError {
    #[error("need at least 8 matches, got {0}")]
    TooFewMatches(usize),
    #[error("degenerate configuration: no consistent model found")]
    Degenerate,
}

/// Estimated relative pose mapping camera-A coordinates into camera B:
/// `x_b = R x_a + t`, with `t` normalized to unit length.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub inliers: Vec<bool>,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|v| **v).count()
    }
}

/// Hartley normalization: translate the centroid to the origin and scale
/// the mean distance to sqrt(2).
fn normalize_points(points: &[Vector3<f64>]) -> (Vec<Vector3<f64>>, Matrix3<f64>) {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let scale = if mean_dist > 1e-12 {
        2f64.sqrt() / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(scale, 0.0, -scale * cx, 0.0, scale, -scale * cy, 0.0, 0.0, 1.0);
    let mapped = points.iter().map(|p| t * p).collect();
    (mapped, t)
}

/// Normalized 8-point algorithm on homogeneous image points satisfying
/// `x_b^T E x_a = 0`.
fn eight_point(xa: &[Vector3<f64>], xb: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let n = xa.len();
    if n < 8 {
        return None;
    }
    let (na, ta) = normalize_points(xa);
    let (nb, tb) = normalize_points(xb);
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for i in 0..n {
        let (p, q) = (&na[i], &nb[i]);
        a[(i, 0)] = q.x * p.x;
        a[(i, 1)] = q.x * p.y;
        a[(i, 2)] = q.x * p.z;
        a[(i, 3)] = q.y * p.x;
        a[(i, 4)] = q.y * p.y;
        a[(i, 5)] = q.y * p.z;
        a[(i, 6)] = q.z * p.x;
        a[(i, 7)] = q.z * p.y;
        a[(i, 8)] = q.z * p.z;
    }
    let svd = (a.transpose() * &a).try_symmetric_eigen(1e-13, 300)?;
    let min_idx = svd
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?
        .0;
    let f_vec = svd.eigenvectors.column(min_idx);
    let e_norm = Matrix3::new(
        f_vec[0], f_vec[1], f_vec[2], f_vec[3], f_vec[4], f_vec[5], f_vec[6], f_vec[7], f_vec[8],
    );
    Some(tb.transpose() * e_norm * ta)
}

/// Projects onto the essential manifold: singular values (s, s, 0).
fn enforce_essential(e: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    let d = Matrix3::from_diagonal(&Vector3::new(s, s, 0.0));
    Some(u * d * v_t)
}

/// Squared Sampson distance of a pixel correspondence under a fundamental
/// matrix, in squared pixels.
fn sampson_sq(f: &Matrix3<f64>, pa: &Vector3<f64>, pb: &Vector3<f64>) -> f64 {
    let fx = f * pa;
    let ftx = f.transpose() * pb;
    let num = pb.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// Linear two-view triangulation in camera-A coordinates with
/// `P_a = [I | 0]`, `P_b = [R | t]`.
fn triangulate(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    xa: &Vector3<f64>,
    xb: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let mut a = Matrix4::<f64>::zeros();
    // P_a rows: (1,0,0,0), (0,1,0,0), (0,0,1,0).
    let row = |pr: [f64; 4], scale: f64, zr: [f64; 4]| {
        [
            scale * zr[0] - pr[0],
            scale * zr[1] - pr[1],
            scale * zr[2] - pr[2],
            scale * zr[3] - pr[3],
        ]
    };
    let pa_rows = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ];
    let pb_rows = [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
    ];
    let rows = [
        row(pa_rows[0], xa.x, pa_rows[2]),
        row(pa_rows[1], xa.y, pa_rows[2]),
        row(pb_rows[0], xb.x, pb_rows[2]),
        row(pb_rows[1], xb.y, pb_rows[2]),
    ];
    for (i, r4) in rows.iter().enumerate() {
        for (j, v) in r4.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = (a.transpose() * a).try_symmetric_eigen(1e-13, 300)?;
    let min_idx = svd
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?
        .0;
    let h = svd.eigenvectors.column(min_idx);
    let hv = Vector4::new(h[0], h[1], h[2], h[3]);
    if hv.w.abs() < 1e-12 {
        return None;
    }
    Some(Vector3::new(hv.x / hv.w, hv.y / hv.w, hv.z / hv.w))
}

/// Counts triangulated correspondences landing in front of both cameras.
fn cheirality_votes(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    xa: &[Vector3<f64>],
    xb: &[Vector3<f64>],
) -> usize {
    xa.iter()
        .zip(xb)
        .filter(|(a, b)| {
            triangulate(r, t, a, b)
                .map(|p| p.z > 0.0 && (r * p + t).z > 0.0)
                .unwrap_or(false)
        })
        .count()
}

/// The four decompositions of an essential matrix.
fn decompose(e: &Matrix3<f64>) -> Option<[(Matrix3<f64>, Vector3<f64>); 4]> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut v_t = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = Vector3::new(u[(0, 2)], u[(1, 2)], u[(2, 2)]);
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Robust relative pose from pixel correspondences.
///
/// Runs `iterations` of 8-point RANSAC on intrinsics-normalized points
/// with pixel-space Sampson scoring, refits on the best inlier set,
/// decomposes the essential matrix, and selects the candidate with the
/// most points in front of both cameras. The returned translation has
/// unit norm.
pub fn estimate_relative_pose(
    pixels_a: &[(f64, f64)],
    pixels_b: &[(f64, f64)],
    cam_a: &Camera,
    cam_b: &Camera,
    iterations: usize,
    inlier_threshold_px: f64,
    seed: u64,
) -> Result<PoseEstimate, PoseSolveError> {
    assert_eq!(pixels_a.len(), pixels_b.len(), "match lists differ");
    let n = pixels_a.len();
    if n < 8 {
        return Err(PoseSolveError::TooFewMatches(n));
    }
    let xa: Vec<Vector3<f64>> = pixels_a
        .iter()
        .map(|(x, y)| cam_a.pixel_ray(*x, *y))
        .collect();
    let xb: Vec<Vector3<f64>> = pixels_b
        .iter()
        .map(|(x, y)| cam_b.pixel_ray(*x, *y))
        .collect();
    let pa_h: Vec<Vector3<f64>> = pixels_a.iter().map(|(x, y)| Vector3::new(*x, *y, 1.0)).collect();
    let pb_h: Vec<Vector3<f64>> = pixels_b.iter().map(|(x, y)| Vector3::new(*x, *y, 1.0)).collect();
    let ka_inv_t = {
        let k = cam_a.intrinsics();
        k.try_inverse().expect("intrinsics invertible")
    };
    let kb_inv = cam_b
        .intrinsics()
        .try_inverse()
        .expect("intrinsics invertible");
    let pixel_f = |e: &Matrix3<f64>| -> Matrix3<f64> { kb_inv.transpose() * e * ka_inv_t };
    let thr_sq = inlier_threshold_px * inlier_threshold_px;

    let inliers_of = |e: &Matrix3<f64>| -> Vec<bool> {
        let f = pixel_f(e);
        (0..n)
            .map(|i| sampson_sq(&f, &pa_h[i], &pb_h[i]) < thr_sq)
            .collect()
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best_inliers: Option<Vec<bool>> = None;
    let mut best_count = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..iterations.max(1) {
        // Partial Fisher-Yates for 8 distinct indices.
        for k in 0..8.min(n) {
            let j = rng.gen_range(k..n);
            indices.swap(k, j);
        }
        let sa: Vec<Vector3<f64>> = indices[..8].iter().map(|&i| xa[i]).collect();
        let sb: Vec<Vector3<f64>> = indices[..8].iter().map(|&i| xb[i]).collect();
        let Some(e_raw) = eight_point(&sa, &sb) else {
            continue;
        };
        let Some(e) = enforce_essential(&e_raw) else {
            continue;
        };
        let inliers = inliers_of(&e);
        let count = inliers.iter().filter(|v| **v).count();
        if count > best_count {
            best_count = count;
            best_inliers = Some(inliers);
        }
    }
    let best_inliers = best_inliers.ok_or(PoseSolveError::Degenerate)?;
    if best_count < 8 {
        return Err(PoseSolveError::Degenerate);
    }

    // Refit on the consensus set.
    let ia: Vec<Vector3<f64>> = (0..n).filter(|i| best_inliers[*i]).map(|i| xa[i]).collect();
    let ib: Vec<Vector3<f64>> = (0..n).filter(|i| best_inliers[*i]).map(|i| xb[i]).collect();
    let e_refit = eight_point(&ia, &ib)
        .and_then(|e| enforce_essential(&e))
        .ok_or(PoseSolveError::Degenerate)?;
    let final_inliers = inliers_of(&e_refit);

    let candidates = decompose(&e_refit).ok_or(PoseSolveError::Degenerate)?;
    let (mut best_rt, mut best_votes) = (None, 0usize);
    for (r, t) in candidates {
        let votes = cheirality_votes(&r, &t, &ia, &ib);
        if votes > best_votes {
            best_votes = votes;
            best_rt = Some((r, t));
        }
    }
    let (rotation, translation) = best_rt.ok_or(PoseSolveError::Degenerate)?;
    let norm = translation.norm();
    if norm < 1e-12 {
        return Err(PoseSolveError::Degenerate);
    }
    Ok(PoseEstimate {
        rotation,
        translation: translation / norm,
        inliers: final_inliers,
    })
}
