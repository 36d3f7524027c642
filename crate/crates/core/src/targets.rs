//! Two-view detection prior, posterior conditioning, top-k target
//! construction, and the detection + coverage losses.
//!
//! All distributions are handled in log space. The uniform baseline is the
//! log value 0 and an isolated keypoint delta smoothed by the prior kernel
//! peaks at exactly `vartheta`, so the prior's peak-to-uniform density
//! ratio is `exp(vartheta)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{warp_log_map, Warp};
use crate::ioutil::{self, FormatError};
use crate::map::{BinaryMap, Map2, PixelGrid, ScoreMap};
use crate::matcher::KeypointSet;

#[derive(Debug, Error, PartialEq)]
pub enum TargetError {
    #[error("keypoint ({0}, {1}) outside grid")]
    KeypointOutsideGrid(f64, f64),
    #[error("score map grids do not match")]
    GridMismatch,
    #[error("k_total {k} out of range (1..={total})")]
    BadK { k: usize, total: usize },
    #[error("MVS validity mask has no valid cell")]
    AllInvalid,
}

/// Hyperparameters of the prior and loss construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorParams {
    /// Gaussian smoothing of keypoint deltas, in pixels.
    pub sigma_prior: f64,
    /// Log-space peak of an isolated smoothed delta.
    pub vartheta: f64,
    /// Gaussian blur of the coverage loss, in pixels.
    pub sigma_coverage: f64,
    /// Detections selected per image when building top-k targets.
    pub k_per_image: usize,
    /// Scale of the coverage term inside the combined detector loss.
    pub coverage_weight: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            sigma_prior: 0.5,
            vartheta: 50.0,
            sigma_coverage: 12.5,
            k_per_image: 1024,
            coverage_weight: 1.0,
        }
    }
}

/// Uniform distribution over an explicit support of grid cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetDistribution {
    grid: PixelGrid,
    support: Vec<usize>,
}

impl TargetDistribution {
    pub fn new(grid: PixelGrid, mut support: Vec<usize>) -> Self {
        assert!(!support.is_empty(), "target support must be non-empty");
        support.sort_unstable();
        support.windows(2).for_each(|w| {
            assert!(w[0] != w[1], "duplicate support cell");
        });
        assert!(*support.last().unwrap() < grid.len());
        Self { grid, support }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.support.len() as f64
    }
}

/// Marks the nearest grid cell of every keypoint. Multiple keypoints in a
/// cell still produce a single mark.
pub fn rasterize_deltas(kps: &KeypointSet, grid: PixelGrid) -> Result<BinaryMap, TargetError> {
    let mut map = Map2::filled(grid, false);
    for i in 0..kps.len() {
        let (x, y) = kps.coord(i);
        let (c, r) = grid
            .cell_of(x, y)
            .ok_or(TargetError::KeypointOutsideGrid(x, y))?;
        *map.at_mut(c, r) = true;
    }
    Ok(map)
}

/// Unnormalized Gaussian taps `exp(-d^2 / 2 sigma^2)` for offsets
/// `-radius..=radius`; the center tap is exactly 1.
fn gaussian_ratio_taps(sigma: f64, radius: usize) -> Vec<f64> {
    (-(radius as isize)..=radius as isize)
        .map(|d| {
            let d = d as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Separable truncated correlation with zero padding, no renormalization.
fn correlate_zero_pad(map: &Map2<f64>, taps: &[f64]) -> Map2<f64> {
    let grid = map.grid();
    let radius = taps.len() / 2;
    let mut rows = Map2::filled(grid, 0.0);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let off = t as isize - radius as isize;
                let cc = c as isize + off;
                if cc >= 0 && (cc as usize) < grid.width {
                    acc += w * map.at(cc as usize, r);
                }
            }
            *rows.at_mut(c, r) = acc;
        }
    }
    let mut out = Map2::filled(grid, 0.0);
    for r in 0..grid.height {
        for c in 0..grid.width {
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let off = t as isize - radius as isize;
                let rr = r as isize + off;
                if rr >= 0 && (rr as usize) < grid.height {
                    acc += w * rows.at(c, rr as usize);
                }
            }
            *out.at_mut(c, r) = acc;
        }
    }
    out
}

/// Smooths a delta map into the log-prior: Gaussian smoothing scaled so an
/// isolated delta peaks at exactly `vartheta` over a 0 baseline. The
/// kernel is truncated at radius `ceil(4 sigma)`.
pub fn smooth_log_prior(deltas: &BinaryMap, params: &PriorParams) -> ScoreMap {
    let radius = (4.0 * params.sigma_prior).ceil() as usize;
    let taps = gaussian_ratio_taps(params.sigma_prior, radius);
    let as_f64 = Map2::from_vec(
        deltas.grid(),
        deltas
            .as_slice()
            .iter()
            .map(|b| if *b { 1.0 } else { 0.0 })
            .collect(),
    );
    let mut smoothed = correlate_zero_pad(&as_f64, &taps);
    for v in smoothed.as_mut_slice() {
        *v *= params.vartheta;
    }
    smoothed
}

/// Combines the per-view log-priors into the two-view prior pair:
/// each view adds the other view's log-prior pulled through the warp.
pub fn two_view_log_prior(
    h_a: &ScoreMap,
    h_b: &ScoreMap,
    warp_ab: &Warp,
    warp_ba: &Warp,
) -> (ScoreMap, ScoreMap) {
    assert_eq!(h_a.grid(), warp_ab.grid());
    assert_eq!(h_b.grid(), warp_ba.grid());
    let pulled_b = warp_log_map(h_b, warp_ab);
    let pulled_a = warp_log_map(h_a, warp_ba);
    let add = |base: &ScoreMap, extra: &ScoreMap| {
        Map2::from_vec(
            base.grid(),
            base.as_slice()
                .iter()
                .zip(extra.as_slice())
                .map(|(x, y)| x + y)
                .collect(),
        )
    };
    (add(h_a, &pulled_b), add(h_b, &pulled_a))
}

/// Conditions the prior on the model's current predictions by adding the
/// score map. Scores are treated as constants here: target construction
/// carries no gradient.
pub fn log_posterior(log_prior: &ScoreMap, scores: &ScoreMap) -> Result<ScoreMap, TargetError> {
    if log_prior.grid() != scores.grid() {
        return Err(TargetError::GridMismatch);
    }
    Ok(Map2::from_vec(
        log_prior.grid(),
        log_prior
            .as_slice()
            .iter()
            .zip(scores.as_slice())
            .map(|(p, s)| p + s)
            .collect(),
    ))
}

/// Selects exactly `k_total` cells across a batch of posteriors, ordered
/// by (value desc, image asc, row asc, col asc), and returns one uniform
/// target per image over its selected cells. Images receiving no cells
/// yield `None` (skip).
pub fn topk_target(
    posteriors: &[ScoreMap],
    k_total: usize,
) -> Result<Vec<Option<TargetDistribution>>, TargetError> {
    let total: usize = posteriors.iter().map(|p| p.grid().len()).sum();
    if k_total == 0 || k_total > total {
        return Err(TargetError::BadK { k: k_total, total });
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (img, post) in posteriors.iter().enumerate() {
        for (idx, v) in post.as_slice().iter().enumerate() {
            entries.push((*v, img, idx));
        }
    }
    // Row-major flat index already orders (row, col); images tie-break next.
    entries.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut supports: Vec<Vec<usize>> = vec![Vec::new(); posteriors.len()];
    for &(_, img, idx) in entries.iter().take(k_total) {
        supports[img].push(idx);
    }
    Ok(supports
        .into_iter()
        .enumerate()
        .map(|(img, s)| {
            if s.is_empty() {
                None
            } else {
                Some(TargetDistribution::new(posteriors[img].grid(), s))
            }
        })
        .collect())
}

fn log_softmax_stats(scores: &ScoreMap) -> (f64, f64) {
    let max = scores.max_value();
    let sum_exp: f64 = scores.as_slice().iter().map(|v| (v - max).exp()).sum();
    (max, max + sum_exp.ln())
}

/// Softmax cross entropy of a score map against a uniform support target.
/// Returns the loss and its gradient w.r.t. the scores (`softmax - target`).
/// A skipped target (`None`) contributes zero loss and gradient.
pub fn cross_entropy(scores: &ScoreMap, target: Option<&TargetDistribution>) -> (f64, ScoreMap) {
    let Some(target) = target else {
        return (0.0, Map2::filled(scores.grid(), 0.0));
    };
    assert_eq!(scores.grid(), target.grid(), "score/target grid mismatch");
    let (_, lse) = log_softmax_stats(scores);
    let w = target.weight();
    let mut loss = 0.0;
    let mut grad = Map2::from_vec(
        scores.grid(),
        scores.as_slice().iter().map(|v| (v - lse).exp()).collect(),
    );
    for &idx in target.support() {
        loss -= w * (scores.as_slice()[idx] - lse);
        grad.as_mut_slice()[idx] -= w;
    }
    (loss, grad)
}

/// Per-axis Gaussian taps with the per-position in-bounds renormalization
/// used by the coverage blur, so a uniform map blurs to itself exactly.
struct NormalizedBlur {
    taps: Vec<f64>,
    sums_x: Vec<f64>,
    sums_y: Vec<f64>,
}

impl NormalizedBlur {
    fn new(grid: PixelGrid, sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil() as usize;
        let taps = gaussian_ratio_taps(sigma, radius);
        let sums = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    taps.iter()
                        .enumerate()
                        .filter(|(t, _)| {
                            let off = *t as isize - radius as isize;
                            let p = i as isize + off;
                            p >= 0 && (p as usize) < n
                        })
                        .map(|(_, w)| w)
                        .sum()
                })
                .collect()
        };
        Self {
            sums_x: sums(grid.width),
            sums_y: sums(grid.height),
            taps,
        }
    }

    fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    fn pass_x(&self, map: &Map2<f64>, normalize: bool) -> Map2<f64> {
        let grid = map.grid();
        let radius = self.radius();
        Map2::from_fn(grid, |c, r| {
            let mut acc = 0.0;
            for (t, w) in self.taps.iter().enumerate() {
                let off = t as isize - radius as isize;
                let cc = c as isize + off;
                if cc >= 0 && (cc as usize) < grid.width {
                    acc += w * map.at(cc as usize, r);
                }
            }
            if normalize {
                acc / self.sums_x[c]
            } else {
                acc
            }
        })
    }

    fn pass_y(&self, map: &Map2<f64>, normalize: bool) -> Map2<f64> {
        let grid = map.grid();
        let radius = self.radius();
        Map2::from_fn(grid, |c, r| {
            let mut acc = 0.0;
            for (t, w) in self.taps.iter().enumerate() {
                let off = t as isize - radius as isize;
                let rr = r as isize + off;
                if rr >= 0 && (rr as usize) < grid.height {
                    acc += w * map.at(c, rr as usize);
                }
            }
            if normalize {
                acc / self.sums_y[r]
            } else {
                acc
            }
        })
    }

    fn apply(&self, map: &Map2<f64>) -> Map2<f64> {
        self.pass_y(&self.pass_x(map, true), true)
    }

    /// Adjoint of [`apply`]: divide by the per-position sums, then plain
    /// correlation (the taps are symmetric).
    fn apply_adjoint(&self, map: &Map2<f64>) -> Map2<f64> {
        let grid = map.grid();
        let divided_y = Map2::from_fn(grid, |c, r| map.at(c, r) / self.sums_y[r]);
        let after_y = self.pass_y(&divided_y, false);
        let divided_x = Map2::from_fn(grid, |c, r| after_y.at(c, r) / self.sums_x[c]);
        self.pass_x(&divided_x, false)
    }
}

/// Coverage regularization: cross entropy between the blurred softmax of
/// the scores and the blurred normalized validity mask. Returns the loss
/// and its gradient w.r.t. the scores.
pub fn coverage_loss(
    scores: &ScoreMap,
    mvs_valid: &BinaryMap,
    params: &PriorParams,
) -> Result<(f64, ScoreMap), TargetError> {
    assert_eq!(scores.grid(), mvs_valid.grid(), "score/mask grid mismatch");
    let grid = scores.grid();
    let valid_count = mvs_valid.as_slice().iter().filter(|v| **v).count();
    if valid_count == 0 {
        return Err(TargetError::AllInvalid);
    }
    let (_, lse) = log_softmax_stats(scores);
    let p = Map2::from_vec(
        grid,
        scores.as_slice().iter().map(|v| (v - lse).exp()).collect(),
    );
    let q = Map2::from_vec(
        grid,
        mvs_valid
            .as_slice()
            .iter()
            .map(|v| if *v { 1.0 / valid_count as f64 } else { 0.0 })
            .collect(),
    );
    let blur = NormalizedBlur::new(grid, params.sigma_coverage);
    let p_blur = blur.apply(&p);
    let q_blur = blur.apply(&q);

    let mut loss = 0.0;
    let mut d_pblur = Map2::filled(grid, 0.0);
    for i in 0..grid.len() {
        let (pb, qb) = (p_blur.as_slice()[i], q_blur.as_slice()[i]);
        if qb > 0.0 {
            loss -= qb * pb.ln();
        }
        d_pblur.as_mut_slice()[i] = if qb > 0.0 { -qb / pb } else { 0.0 };
    }
    let d_p = blur.apply_adjoint(&d_pblur);
    // Softmax backward: grad_i = p_i (g_i - <p, g>).
    let inner: f64 = p
        .as_slice()
        .iter()
        .zip(d_p.as_slice())
        .map(|(pi, gi)| pi * gi)
        .sum();
    let grad = Map2::from_vec(
        grid,
        p.as_slice()
            .iter()
            .zip(d_p.as_slice())
            .map(|(pi, gi)| pi * (gi - inner))
            .collect(),
    );
    Ok((loss, grad))
}

/// Combined detector loss: detection cross entropy plus the weighted
/// coverage term, with the summed gradient.
pub fn detector_loss(
    scores: &ScoreMap,
    target: Option<&TargetDistribution>,
    mvs_valid: &BinaryMap,
    params: &PriorParams,
) -> Result<(f64, ScoreMap), TargetError> {
    let (ce_loss, mut grad) = cross_entropy(scores, target);
    if params.coverage_weight == 0.0 {
        return Ok((ce_loss, grad));
    }
    let (cov_loss, cov_grad) = coverage_loss(scores, mvs_valid, params)?;
    for (g, c) in grad.as_mut_slice().iter_mut().zip(cov_grad.as_slice()) {
        *g += params.coverage_weight * c;
    }
    Ok((ce_loss + params.coverage_weight * cov_loss, grad))
}

// --- file formats ---

const SCORE_MAGIC: &str = "DDSM";

/// Writes a score map: magic "DDSM", u32 height, u32 width, f32 row-major.
pub fn write_score_map(path: &Path, map: &ScoreMap) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    ioutil::write_magic(&mut w, SCORE_MAGIC)?;
    ioutil::write_u32(&mut w, map.grid().height as u32)?;
    ioutil::write_u32(&mut w, map.grid().width as u32)?;
    let data: Vec<f32> = map.as_slice().iter().map(|v| *v as f32).collect();
    ioutil::write_f32_slice(&mut w, &data)?;
    w.flush()?;
    Ok(())
}

pub fn read_score_map(path: &Path) -> Result<ScoreMap, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    ioutil::read_magic(&mut r, SCORE_MAGIC)?;
    let height = ioutil::read_u32(&mut r)?;
    let width = ioutil::read_u32(&mut r)?;
    let (h, w) = ioutil::checked_dims(height, width)?;
    let grid = PixelGrid::new(w, h)
        .map_err(|e| FormatError::malformed("score map", e.to_string()))?;
    let data = ioutil::read_f32_vec(&mut r, grid.len())?;
    Ok(Map2::from_vec(grid, data.iter().map(|v| *v as f64).collect()))
}

/// Writes batch targets as text, one `image_idx row col` line per support
/// cell; skipped images contribute no lines.
pub fn write_targets(
    path: &Path,
    targets: &[Option<TargetDistribution>],
) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (img, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let width = t.grid().width;
            for &idx in t.support() {
                writeln!(w, "{} {} {}", img, idx / width, idx % width)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
