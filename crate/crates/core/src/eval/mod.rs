//! Geometric evaluation: keypoint repeatability, relative-pose errors,
//! AUC of the pose precision curve, and mean average accuracy.

mod pose;

pub use pose::{estimate_relative_pose, PoseEstimate, PoseSolveError};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Warp;
use crate::matcher::KeypointSet;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty error list")]
    Empty,
    #[error("non-finite pose error")]
    NonFinite,
}

/// Rotation and translation errors of one estimated pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    /// Geodesic rotation error in degrees, in [0, 180].
    pub rot_deg: f64,
    /// Angle between translation directions in degrees; `None` when either
    /// translation has zero norm (pure-rotation pairs are flagged, not
    /// guessed).
    pub trans_angle_deg: Option<f64>,
    /// Metric translation error in meters.
    pub trans_metric: f64,
}

impl PoseError {
    /// Max of rotation and angular translation error, the quantity
    /// thresholded by the pose precision curve. Flagged angular errors
    /// count as failures (180 degrees).
    pub fn max_angular(&self) -> f64 {
        self.rot_deg.max(self.trans_angle_deg.unwrap_or(180.0))
    }
}

/// Errors between an estimated and a ground-truth relative pose.
pub fn pose_errors(
    est_r: &Matrix3<f64>,
    est_t: &Vector3<f64>,
    gt_r: &Matrix3<f64>,
    gt_t: &Vector3<f64>,
) -> PoseError {
    let cos_rot = ((est_r.transpose() * gt_r).trace() - 1.0) / 2.0;
    let rot_deg = cos_rot.clamp(-1.0, 1.0).acos().to_degrees();
    let (ne, ng) = (est_t.norm(), gt_t.norm());
    let trans_angle_deg = if ne > 1e-12 && ng > 1e-12 {
        let cos_t = est_t.dot(gt_t) / (ne * ng);
        Some(cos_t.clamp(-1.0, 1.0).acos().to_degrees())
    } else {
        None
    };
    PoseError {
        rot_deg,
        trans_angle_deg,
        trans_metric: (gt_t - est_t).norm(),
    }
}

/// Result of a repeatability measurement. `evaluated` counts the keypoints
/// that fell inside the warp domain; when it is zero the fractions are
/// defined as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Repeatability {
    pub fractions: Vec<f64>,
    pub evaluated: usize,
}

/// Fraction of A keypoints inside the warp domain whose warped location
/// has a B keypoint closer than each threshold. Thresholds are fractions
/// of the image diagonal.
pub fn repeatability(
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    warp_ab: &Warp,
    thresholds: &[f64],
) -> Repeatability {
    let diag = warp_ab.grid().diagonal();
    let mut distances = Vec::new();
    for i in 0..kps_a.len() {
        let (x, y) = kps_a.coord(i);
        let Some((wx, wy)) = warp_ab.sample_target(x, y) else {
            continue;
        };
        let nearest = kps_b
            .coords()
            .iter()
            .map(|(bx, by)| ((bx - wx).powi(2) + (by - wy).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        distances.push(nearest);
    }
    let evaluated = distances.len();
    let fractions = thresholds
        .iter()
        .map(|t| {
            if evaluated == 0 {
                0.0
            } else {
                distances.iter().filter(|d| **d < t * diag).count() as f64 / evaluated as f64
            }
        })
        .collect();
    Repeatability {
        fractions,
        evaluated,
    }
}

/// Area under the pose precision curve up to each threshold, trapezoid
/// rule on a 1-degree grid, normalized by the threshold. The curve is
/// inclusive at grid nodes (`error <= t`), so an all-zero error list
/// reaches exactly 1. Failed estimates must be encoded as 180 degrees by
/// the caller.
pub fn auc(errors_deg: &[f64], thresholds_deg: &[u32]) -> Result<Vec<f64>, EvalError> {
    if errors_deg.is_empty() {
        return Err(EvalError::Empty);
    }
    if errors_deg.iter().any(|e| !e.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n = errors_deg.len() as f64;
    let precision =
        |t: f64| -> f64 { errors_deg.iter().filter(|e| **e <= t).count() as f64 / n };
    Ok(thresholds_deg
        .iter()
        .map(|&t| {
            let mut area = 0.0;
            for step in 0..t {
                area += 0.5 * (precision(step as f64) + precision(step as f64 + 1.0));
            }
            area / t as f64
        })
        .collect())
}

/// The fixed 10x10 threshold grid of the mean-average-accuracy metric:
/// rotation thresholds 1..10 degrees, translation thresholds geometrically
/// spaced from 0.2 to 5 meters, paired elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdGrid {
    pub rot_deg: Vec<f64>,
    pub trans_m: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        let rot_deg = (1..=10).map(|t| t as f64).collect();
        let trans_m = (0..10)
            .map(|i| 0.2 * 25f64.powf(i as f64 / 9.0))
            .collect();
        Self { rot_deg, trans_m }
    }
}

/// Mean average accuracy: for each paired (rotation, metric translation)
/// threshold, the fraction of poses meeting both, averaged over the grid.
pub fn maa(errors: &[PoseError], grid: &ThresholdGrid) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = errors.len() as f64;
    let mut acc = 0.0;
    for (tr, tt) in grid.rot_deg.iter().zip(&grid.trans_m) {
        let good = errors
            .iter()
            .filter(|e| e.rot_deg < *tr && e.trans_metric < *tt)
            .count() as f64;
        acc += good / n;
    }
    Ok(acc / grid.rot_deg.len() as f64)
}

/// Per-scene mean average accuracy: the metric is computed separately for
/// each scene label and then averaged over scenes.
pub fn maa_per_scene(
    labeled: &[(usize, PoseError)],
    grid: &ThresholdGrid,
) -> Result<f64, EvalError> {
    if labeled.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut labels: Vec<usize> = labeled.iter().map(|(l, _)| *l).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut acc = 0.0;
    for label in &labels {
        let scene: Vec<PoseError> = labeled
            .iter()
            .filter(|(l, _)| l == label)
            .map(|(_, e)| *e)
            .collect();
        acc += maa(&scene, grid)?;
    }
    Ok(acc / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::PixelGrid;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn identity_warp(grid: PixelGrid) -> Warp {
        let target = (0..grid.len())
            .map(|i| grid.center(i % grid.width, i / grid.width))
            .collect();
        Warp::new(grid, target, vec![true; grid.len()])
    }

    fn kps(coords: Vec<(f64, f64)>) -> KeypointSet {
        let n = coords.len();
        KeypointSet::presorted(coords, vec![1.0; n])
    }

    #[test]
    fn identical_sets_are_fully_repeatable() {
        let grid = PixelGrid::new(64, 64).unwrap();
        let warp = identity_warp(grid);
        let set = kps(vec![(3.5, 4.5), (30.5, 20.5), (60.5, 60.5)]);
        let rep = repeatability(&set, &set, &warp, &[0.001, 0.002, 0.005]);
        assert_eq!(rep.evaluated, 3);
        assert!(rep.fractions.iter().all(|f| *f == 1.0));
    }

    #[test]
    fn displaced_sets_have_zero_repeatability() {
        let grid = PixelGrid::new(64, 64).unwrap();
        let warp = identity_warp(grid);
        let a = kps(vec![(3.5, 4.5), (10.5, 20.5)]);
        // Far beyond 10x the largest threshold (0.005 * diag ~ 0.45 px).
        let b = kps(vec![(33.5, 44.5), (50.5, 60.5)]);
        let rep = repeatability(&a, &b, &warp, &[0.001, 0.002, 0.005]);
        assert!(rep.fractions.iter().all(|f| *f == 0.0));
    }

    #[test]
    fn three_keypoint_hand_case() {
        let grid = PixelGrid::new(100, 100).unwrap();
        let diag = grid.diagonal();
        let warp = identity_warp(grid);
        let a = kps(vec![(10.5, 10.5), (30.5, 30.5), (50.5, 50.5)]);
        // Distances: 0.0004 diag, 0.0015 diag, 0.02 diag.
        let b = kps(vec![
            (10.5 + 0.0004 * diag, 10.5),
            (30.5 + 0.0015 * diag, 30.5),
            (50.5 + 0.02 * diag, 50.5),
        ]);
        let rep = repeatability(&a, &b, &warp, &[0.001, 0.002, 0.005]);
        let third = 1.0 / 3.0;
        assert!((rep.fractions[0] - third).abs() < 1e-12);
        assert!((rep.fractions[1] - 2.0 * third).abs() < 1e-12);
        assert!((rep.fractions[2] - 2.0 * third).abs() < 1e-12);
    }

    #[test]
    fn empty_restricted_set_is_flagged_zero() {
        let grid = PixelGrid::new(16, 16).unwrap();
        let target = (0..grid.len())
            .map(|i| grid.center(i % 16, i / 16))
            .collect();
        let warp = Warp::new(grid, target, vec![false; grid.len()]);
        let set = kps(vec![(3.5, 3.5)]);
        let rep = repeatability(&set, &set, &warp, &[0.005]);
        assert_eq!(rep.evaluated, 0);
        assert_eq!(rep.fractions, vec![0.0]);
    }

    #[test]
    fn repeatability_symmetric_on_exact_correspondences() {
        let grid = PixelGrid::new(64, 64).unwrap();
        let warp = identity_warp(grid);
        let a = kps(vec![(5.5, 6.5), (20.5, 40.5), (55.5, 12.5)]);
        let b = kps(vec![(5.6, 6.5), (20.5, 40.4), (55.5, 12.6)]);
        let t = [0.001, 0.005];
        let fwd = repeatability(&a, &b, &warp, &t);
        let bwd = repeatability(&b, &a, &warp, &t);
        for (x, y) in fwd.fractions.iter().zip(&bwd.fractions) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_pose_has_zero_errors() {
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.3);
        let t = Vector3::new(0.5, -0.2, 0.1);
        let e = pose_errors(r.matrix(), &t, r.matrix(), &t);
        assert!(e.rot_deg.abs() < 1e-9);
        // acos conditioning near 1 leaves ~sqrt(eps) of angle noise.
        assert!(e.trans_angle_deg.unwrap().abs() < 1e-5);
        assert!(e.trans_metric.abs() < 1e-12);
    }

    #[test]
    fn perpendicular_translations_are_ninety_degrees() {
        let r = Matrix3::identity();
        let e = pose_errors(
            &r,
            &Vector3::new(1.0, 0.0, 0.0),
            &r,
            &Vector3::new(0.0, 2.0, 0.0),
        );
        assert!((e.trans_angle_deg.unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_offset_recovers_axis_angle() {
        let gt = Rotation3::from_axis_angle(&Vector3::x_axis(), 0.4);
        let offset = Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians());
        let est = offset * gt;
        let t = Vector3::new(1.0, 0.0, 0.0);
        let e = pose_errors(est.matrix(), &t, gt.matrix(), &t);
        assert!((e.rot_deg - 10.0).abs() < 1e-9, "{}", e.rot_deg);
    }

    #[test]
    fn zero_translation_is_flagged() {
        let r = Matrix3::identity();
        let e = pose_errors(&r, &Vector3::zeros(), &r, &Vector3::new(1.0, 0.0, 0.0));
        assert!(e.trans_angle_deg.is_none());
    }

    #[test]
    fn pose_error_angles_invariant_to_translation_scale() {
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.2);
        let est_t = Vector3::new(0.3, 0.1, -0.2);
        let gt_t = Vector3::new(0.25, 0.15, -0.18);
        let base = pose_errors(r.matrix(), &est_t, r.matrix(), &gt_t);
        for c in [0.1, 3.0, 250.0] {
            let scaled = pose_errors(r.matrix(), &(est_t * c), r.matrix(), &(gt_t * c));
            assert!(
                (scaled.trans_angle_deg.unwrap() - base.trans_angle_deg.unwrap()).abs() < 1e-9
            );
            assert!((scaled.rot_deg - base.rot_deg).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_extremes() {
        let thresholds = [5, 10, 20];
        let perfect = auc(&[0.0, 0.0, 0.0], &thresholds).unwrap();
        assert!(perfect.iter().all(|v| (*v - 1.0).abs() < 1e-12));
        let failed = auc(&[25.0, 180.0, 90.0], &thresholds).unwrap();
        assert!(failed.iter().all(|v| *v == 0.0));
        assert_eq!(auc(&[], &thresholds), Err(EvalError::Empty));
    }

    #[test]
    fn auc_hand_integration() {
        // Errors {2, 8} at threshold 10, inclusive precision on the grid:
        // P = [0, 0, .5, .5, .5, .5, .5, .5, 1, 1, 1]; trapezoid segments
        // 0 + 0.25 + 0.5*5 + 0.75 + 1 + 1 = 5.5, divided by 10.
        let v = auc(&[2.0, 8.0], &[10]).unwrap();
        assert!((v[0] - 0.55).abs() < 1e-12, "{}", v[0]);
    }

    #[test]
    fn maa_extremes_and_hand_case() {
        let grid = ThresholdGrid::default();
        let zero = PoseError {
            rot_deg: 0.0,
            trans_angle_deg: Some(0.0),
            trans_metric: 0.0,
        };
        assert_eq!(maa(&[zero; 4], &grid).unwrap(), 1.0);

        let bad_rot = PoseError {
            rot_deg: 20.0,
            trans_angle_deg: Some(0.0),
            trans_metric: 0.0,
        };
        assert_eq!(maa(&[bad_rot; 3], &grid).unwrap(), 0.0);

        // rot 5.5 deg passes thresholds 6..10 (5 of 10); 1.0 m passes the
        // geometric thresholds >= 1.196 m, also indices 5..9.
        let hand = PoseError {
            rot_deg: 5.5,
            trans_angle_deg: Some(0.0),
            trans_metric: 1.0,
        };
        assert_eq!(maa(&[hand], &grid).unwrap(), 0.5);
    }

    #[test]
    fn maa_per_scene_averages_scene_means() {
        let grid = ThresholdGrid::default();
        let good = PoseError {
            rot_deg: 0.0,
            trans_angle_deg: Some(0.0),
            trans_metric: 0.0,
        };
        let bad = PoseError {
            rot_deg: 90.0,
            trans_angle_deg: Some(0.0),
            trans_metric: 50.0,
        };
        // Scene 0: all good; scene 1: all bad (more pairs). A pooled mean
        // would be 0.25; the per-scene mean is 0.5.
        let labeled = vec![(0, good), (1, bad), (1, bad), (1, bad)];
        assert_eq!(maa_per_scene(&labeled, &grid).unwrap(), 0.5);
    }

    #[test]
    fn threshold_grid_matches_reference_spacing() {
        let grid = ThresholdGrid::default();
        assert_eq!(grid.rot_deg, (1..=10).map(|t| t as f64).collect::<Vec<_>>());
        assert!((grid.trans_m[0] - 0.2).abs() < 1e-15);
        assert!((grid.trans_m[9] - 5.0).abs() < 1e-12);
        // Constant ratio between consecutive thresholds.
        let ratio = grid.trans_m[1] / grid.trans_m[0];
        for w in grid.trans_m.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_is_permutation_invariant_and_monotone(seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..40usize);
            let mut errors: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..30.0)).collect();
            let thresholds = [5u32, 10, 20];
            let base = auc(&errors, &thresholds).unwrap();
            // Shuffle.
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                errors.swap(i, j);
            }
            let shuffled = auc(&errors, &thresholds).unwrap();
            prop_assert_eq!(base.clone(), shuffled);
            prop_assert!(base[0] <= base[1] + 1e-12 && base[1] <= base[2] + 1e-12);
        }

        #[test]
        fn maa_does_not_increase_when_errors_grow(seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let grid = ThresholdGrid::default();
            let n = rng.gen_range(1..20usize);
            let mut errors: Vec<PoseError> = (0..n)
                .map(|_| PoseError {
                    rot_deg: rng.gen_range(0.0..15.0),
                    trans_angle_deg: Some(0.0),
                    trans_metric: rng.gen_range(0.0..6.0),
                })
                .collect();
            let base = maa(&errors, &grid).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let idx = rng.gen_range(0..n);
            errors[idx].rot_deg += rng.gen_range(0.0..10.0);
            errors[idx].trans_metric += rng.gen_range(0.0..3.0);
            let grown = maa(&errors, &grid).unwrap();
            prop_assert!(grown <= base + 1e-12);
        }
    }
}
