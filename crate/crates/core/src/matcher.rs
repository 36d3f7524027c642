//! Inference-time keypoint sampling and matching.
//!
//! Keypoints are the top-K score cells taken at cell centers with no
//! non-max suppression. Matching is either dual-softmax mutual-argmax over
//! descriptor similarities, or nearest-neighbor assignment after pushing
//! keypoints through a ground-truth warp.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::descobj::{conditional_distributions, similarity_logits, DescriptorSet, MatchParams};
use crate::geometry::{warp_points, Warp};
use crate::ioutil::FormatError;
use crate::map::{ChannelMap, PixelGrid, ScoreMap};

/// Subpixel keypoint coordinates with aligned scores, ordered by
/// descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    coords: Vec<(f64, f64)>,
    scores: Vec<f64>,
}

impl KeypointSet {
    /// Builds a set from data already in descending-score order.
    pub fn presorted(coords: Vec<(f64, f64)>, scores: Vec<f64>) -> Self {
        assert_eq!(coords.len(), scores.len());
        debug_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        Self { coords, scores }
    }

    /// Builds a set from unordered data, sorting by descending score
    /// (stable, so equal scores keep their input order).
    pub fn from_unsorted(coords: Vec<(f64, f64)>, scores: Vec<f64>) -> Self {
        assert_eq!(coords.len(), scores.len());
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Self {
            coords: order.iter().map(|&i| coords[i]).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            coords: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, i: usize) -> (f64, f64) {
        self.coords[i]
    }

    pub fn score(&self, i: usize) -> f64 {
        self.scores[i]
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// One-to-one index matches with confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pairs: Vec<(usize, usize, f64)>,
}

impl MatchSet {
    pub fn new(pairs: Vec<(usize, usize, f64)>) -> Self {
        debug_assert!(Self::is_one_to_one(&pairs), "match set is not one-to-one");
        Self { pairs }
    }

    fn is_one_to_one(pairs: &[(usize, usize, f64)]) -> bool {
        let mut seen_a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut seen_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        seen_a.sort_unstable();
        seen_b.sort_unstable();
        seen_a.windows(2).all(|w| w[0] != w[1]) && seen_b.windows(2).all(|w| w[0] != w[1])
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize, f64)] {
        &self.pairs
    }
}

/// Selects the K highest-score cells as keypoints at their cell centers.
/// Ties break in raster order; K is clipped to the grid size. No non-max
/// suppression is applied.
pub fn sample_keypoints(scores: &ScoreMap, k: usize) -> KeypointSet {
    let grid = scores.grid();
    let values = scores.as_slice();
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_unstable_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k.min(grid.len()));
    let coords = order
        .iter()
        .map(|&idx| grid.center(idx % grid.width, idx / grid.width))
        .collect();
    let kept_scores = order.iter().map(|&idx| values[idx]).collect();
    KeypointSet::presorted(coords, kept_scores)
}

/// Bilinearly samples a dense descriptor grid at each keypoint and
/// re-normalizes every sampled vector to unit length.
pub fn sample_descriptors(grid: &ChannelMap, kps: &KeypointSet) -> DescriptorSet {
    let dim = grid.channels();
    let mut vectors = vec![0.0; kps.len() * dim];
    for i in 0..kps.len() {
        let (x, y) = kps.coord(i);
        let out = &mut vectors[i * dim..(i + 1) * dim];
        grid.sample_bilinear_into(x, y, out);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in out.iter_mut() {
            *v /= norm;
        }
    }
    DescriptorSet::new(dim, vectors, kps.clone())
}

/// Dual-softmax mutual-argmax matching.
///
/// The confidence of a pair is the product of both conditional matching
/// probabilities; a pair is kept when it is the argmax of its row and of
/// its column and its confidence reaches the threshold.
pub fn dual_softmax_match(
    desc_a: &DescriptorSet,
    desc_b: &DescriptorSet,
    params: &MatchParams,
) -> MatchSet {
    let (ka, kb) = (desc_a.len(), desc_b.len());
    if ka == 0 || kb == 0 {
        return MatchSet::new(Vec::new());
    }
    let logits = similarity_logits(desc_a, desc_b, params).expect("descriptor dims must match");
    let conds = conditional_distributions(&logits, ka, kb);
    let conf = |i: usize, j: usize| conds.a_given_b(i, j) * conds.b_given_a(i, j);

    // First strictly-greater entry wins, so ties resolve to the lowest index.
    let mut row_best = vec![0usize; ka];
    for i in 0..ka {
        let mut best = 0;
        for j in 1..kb {
            if conf(i, j) > conf(i, best) {
                best = j;
            }
        }
        row_best[i] = best;
    }
    let mut col_best = vec![0usize; kb];
    for j in 0..kb {
        let mut best = 0;
        for i in 1..ka {
            if conf(i, j) > conf(best, j) {
                best = i;
            }
        }
        col_best[j] = best;
    }

    let mut pairs = Vec::new();
    for i in 0..ka {
        let j = row_best[i];
        let c = conf(i, j);
        if col_best[j] == i && c >= params.confidence_threshold {
            pairs.push((i, j, c));
        }
    }
    MatchSet::new(pairs)
}

/// Matches keypoints by warping A's points and assigning each to its
/// nearest B keypoint within `radius` pixels. Contended B keypoints keep
/// only the closest warped A point; confidences are 1.
pub fn warp_quantized_match(
    warp: &Warp,
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    radius: f64,
) -> MatchSet {
    if kps_b.is_empty() {
        return MatchSet::new(Vec::new());
    }
    let (warped, kept) = warp_points(kps_a, warp);
    // best candidate per B keypoint: (distance, a index)
    let mut best: Vec<Option<(f64, usize)>> = vec![None; kps_b.len()];
    for (wi, &ai) in kept.iter().enumerate() {
        let (wx, wy) = warped.coord(wi);
        let mut nearest = 0usize;
        let mut nearest_d = f64::INFINITY;
        for bi in 0..kps_b.len() {
            let (bx, by) = kps_b.coord(bi);
            let d = ((bx - wx).powi(2) + (by - wy).powi(2)).sqrt();
            if d < nearest_d {
                nearest_d = d;
                nearest = bi;
            }
        }
        if nearest_d <= radius {
            match best[nearest] {
                Some((d, _)) if d <= nearest_d => {}
                _ => best[nearest] = Some((nearest_d, ai)),
            }
        }
    }
    let mut pairs: Vec<(usize, usize, f64)> = best
        .iter()
        .enumerate()
        .filter_map(|(bi, slot)| slot.map(|(_, ai)| (ai, bi, 1.0)))
        .collect();
    pairs.sort_unstable_by_key(|p| p.0);
    MatchSet::new(pairs)
}

// --- file formats ---

/// Writes keypoints as text: header `DDK1 <width> <height>`, then one
/// `x y score` line per keypoint.
pub fn write_keypoints(path: &Path, kps: &KeypointSet, grid: PixelGrid) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "DDK1 {} {}", grid.width, grid.height)?;
    for i in 0..kps.len() {
        let (x, y) = kps.coord(i);
        writeln!(w, "{} {} {}", x, y, kps.score(i))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_keypoints(path: &Path) -> Result<(KeypointSet, PixelGrid), FormatError> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| FormatError::malformed("keypoints", "empty file"))??;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 || head[0] != "DDK1" {
        return Err(FormatError::malformed("keypoints", "bad header"));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| FormatError::malformed("keypoints", format!("bad dimension {s:?}")))
    };
    let grid = PixelGrid::new(parse_dim(head[1])?, parse_dim(head[2])?)
        .map_err(|e| FormatError::malformed("keypoints", e.to_string()))?;
    let mut coords = Vec::new();
    let mut scores = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(FormatError::malformed("keypoints", format!("bad line {line:?}")));
        }
        let mut vals = [0.0f64; 3];
        for (v, t) in vals.iter_mut().zip(&toks) {
            *v = t
                .parse()
                .map_err(|_| FormatError::malformed("keypoints", format!("bad number {t:?}")))?;
        }
        coords.push((vals[0], vals[1]));
        scores.push(vals[2]);
    }
    Ok((KeypointSet::from_unsorted(coords, scores), grid))
}

/// Writes matches as text `ia ib conf` lines.
pub fn write_matches(path: &Path, matches: &MatchSet) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (a, b, c) in matches.pairs() {
        writeln!(w, "{} {} {}", a, b, c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matches(path: &Path) -> Result<MatchSet, FormatError> {
    let r = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(FormatError::malformed("matches", format!("bad line {line:?}")));
        }
        let a: usize = toks[0]
            .parse()
            .map_err(|_| FormatError::malformed("matches", "bad index"))?;
        let b: usize = toks[1]
            .parse()
            .map_err(|_| FormatError::malformed("matches", "bad index"))?;
        let c: f64 = toks[2]
            .parse()
            .map_err(|_| FormatError::malformed("matches", "bad confidence"))?;
        pairs.push((a, b, c));
    }
    Ok(MatchSet::new(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::Map2;
    use proptest::prelude::*;

    fn one_hot_set(k: usize, dim: usize) -> DescriptorSet {
        let mut vectors = vec![0.0; k * dim];
        let mut coords = Vec::new();
        for i in 0..k {
            vectors[i * dim + i] = 1.0;
            coords.push((i as f64 + 0.5, 0.5));
        }
        DescriptorSet::new(dim, vectors, KeypointSet::presorted(coords, vec![1.0; k]))
    }

    /// Quadratic reference: mutual argmax with first-index tie-breaking
    /// plus the confidence threshold, checked entry by entry.
    fn brute_force_dual_softmax(
        desc_a: &DescriptorSet,
        desc_b: &DescriptorSet,
        params: &MatchParams,
    ) -> Vec<(usize, usize)> {
        let (ka, kb) = (desc_a.len(), desc_b.len());
        let logits = similarity_logits(desc_a, desc_b, params).unwrap();
        let conds = conditional_distributions(&logits, ka, kb);
        let conf: Vec<Vec<f64>> = (0..ka)
            .map(|i| (0..kb).map(|j| conds.a_given_b(i, j) * conds.b_given_a(i, j)).collect())
            .collect();
        let mut out = Vec::new();
        for i in 0..ka {
            for j in 0..kb {
                let row_max = (0..kb).all(|j2| conf[i][j2] <= conf[i][j]);
                let row_first = (0..j).all(|j2| conf[i][j2] < conf[i][j]);
                let col_max = (0..ka).all(|i2| conf[i2][j] <= conf[i][j]);
                let col_first = (0..i).all(|i2| conf[i2][j] < conf[i][j]);
                if row_max && row_first && col_max && col_first && conf[i][j] >= params.confidence_threshold
                {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn top_k_sampling_with_ties_and_clipping() {
        let grid = PixelGrid::new(3, 2).unwrap();
        let scores = Map2::from_vec(grid, vec![0.5, 2.0, 0.5, 0.5, 1.0, 0.5]);
        let kps = sample_keypoints(&scores, 3);
        assert_eq!(kps.len(), 3);
        assert_eq!(kps.coord(0), (1.5, 0.5));
        assert_eq!(kps.coord(1), (1.5, 1.5));
        // Tied 0.5s resolve in raster order: cell (0, 0) first.
        assert_eq!(kps.coord(2), (0.5, 0.5));

        let constant = Map2::filled(grid, 1.0);
        let two = sample_keypoints(&constant, 2);
        assert_eq!(two.coord(0), (0.5, 0.5));
        assert_eq!(two.coord(1), (1.5, 0.5));

        let all = sample_keypoints(&scores, 100);
        assert_eq!(all.len(), grid.len());
    }

    #[test]
    fn descriptor_sampling_at_center_and_midpoint() {
        let grid = PixelGrid::new(2, 1).unwrap();
        // Two orthogonal unit vectors in neighboring cells.
        let data = vec![1.0, 0.0, 0.0, 1.0];
        let dense = ChannelMap::from_vec(grid, 2, data);
        let kps = KeypointSet::presorted(vec![(0.5, 0.5), (1.0, 0.5)], vec![2.0, 1.0]);
        let set = sample_descriptors(&dense, &kps);
        assert_eq!(set.vector(0), &[1.0, 0.0]);
        // Midpoint: average (0.5, 0.5) normalized to unit length.
        let v = set.vector(1);
        let s = 0.5f64.sqrt();
        assert!((v[0] - s).abs() < 1e-12 && (v[1] - s).abs() < 1e-12);
        for i in 0..set.len() {
            let n: f64 = set.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_one_hot_sets_match_identically() {
        let params = MatchParams::default();
        for k in [2usize, 5, 10] {
            let set = one_hot_set(k, k);
            let m = dual_softmax_match(&set, &set, &params);
            assert_eq!(m.len(), k);
            for (idx, (a, b, c)) in m.pairs().iter().enumerate() {
                assert_eq!(a, b);
                assert_eq!(*a, idx);
                assert!(*c > 0.99, "confidence {c} too low for K={k}");
            }
        }
    }

    #[test]
    fn ambiguous_descriptors_cap_confidence_at_one_quarter() {
        // Every A vector is equidistant from both B vectors, so each
        // conditional is 1/2 and no confidence can exceed 1/4.
        let dim = 3;
        let a = DescriptorSet::new(
            dim,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            KeypointSet::presorted(vec![(0.5, 0.5), (1.5, 0.5)], vec![1.0, 1.0]),
        );
        let b = DescriptorSet::new(
            dim,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0],
            KeypointSet::presorted(vec![(0.5, 0.5), (1.5, 0.5)], vec![1.0, 1.0]),
        );
        let params = MatchParams::default();
        let logits = similarity_logits(&a, &b, &params).unwrap();
        let conds = conditional_distributions(&logits, 2, 2);
        for i in 0..2 {
            for j in 0..2 {
                let conf = conds.b_given_a(i, j) * conds.a_given_b(i, j);
                assert!(conf <= 0.25 + 1e-12);
            }
        }
        let m = dual_softmax_match(&a, &b, &params);
        let brute = brute_force_dual_softmax(&a, &b, &params);
        let got: Vec<(usize, usize)> = m.pairs().iter().map(|p| (p.0, p.1)).collect();
        assert_eq!(got, brute);
    }

    #[test]
    fn threshold_one_empties_matches() {
        let set = one_hot_set(4, 4);
        let params = MatchParams {
            confidence_threshold: 1.0,
            ..MatchParams::default()
        };
        assert!(dual_softmax_match(&set, &set, &params).is_empty());
    }

    #[test]
    fn warp_quantized_identity_and_radius() {
        let grid = PixelGrid::new(8, 8).unwrap();
        let target: Vec<(f64, f64)> = (0..grid.len())
            .map(|i| grid.center(i % 8, i / 8))
            .collect();
        let warp = Warp::new(grid, target, vec![true; grid.len()]);
        let kps = KeypointSet::presorted(
            vec![(1.5, 1.5), (4.5, 2.5), (6.5, 6.5)],
            vec![3.0, 2.0, 1.0],
        );
        let m = warp_quantized_match(&warp, &kps, &kps, 1.0);
        assert_eq!(m.len(), 3);
        for (i, (a, b, c)) in m.pairs().iter().enumerate() {
            assert_eq!((*a, *b), (i, i));
            assert_eq!(*c, 1.0);
        }

        // Nearest B beyond the radius: no match.
        let far = KeypointSet::presorted(vec![(7.5, 7.5)], vec![1.0]);
        let near = KeypointSet::presorted(vec![(0.5, 0.5)], vec![1.0]);
        assert!(warp_quantized_match(&warp, &near, &far, 2.0).is_empty());
    }

    #[test]
    fn contended_keypoint_goes_to_closest() {
        let grid = PixelGrid::new(8, 8).unwrap();
        let target: Vec<(f64, f64)> = (0..grid.len())
            .map(|i| grid.center(i % 8, i / 8))
            .collect();
        let warp = Warp::new(grid, target, vec![true; grid.len()]);
        // Both A points warp near the single B point; (3.5, 3.5) is closer.
        let kps_a = KeypointSet::presorted(vec![(3.0, 3.5), (3.5, 3.5)], vec![2.0, 1.0]);
        let kps_b = KeypointSet::presorted(vec![(3.6, 3.5)], vec![1.0]);
        let m = warp_quantized_match(&warp, &kps_a, &kps_b, 2.0);
        assert_eq!(m.pairs(), &[(1, 0, 1.0)]);
    }

    #[test]
    fn keypoint_file_round_trip() {
        let grid = PixelGrid::new(17, 9).unwrap();
        let kps = KeypointSet::presorted(
            vec![(3.25, 4.5), (0.5, 8.5), (16.0, 0.125)],
            vec![2.5, 1.0, -0.75],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        write_keypoints(&path, &kps, grid).unwrap();
        let (back, back_grid) = read_keypoints(&path).unwrap();
        assert_eq!(back, kps);
        assert_eq!(back_grid, grid);
    }

    proptest! {
        #[test]
        fn dual_softmax_equals_brute_force(seed in 0u64..400) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let ka = rng.gen_range(1..12usize);
            let kb = rng.gen_range(1..12usize);
            let dim = 4;
            let make = |rng: &mut rand_chacha::ChaCha12Rng, k: usize| {
                let mut vectors = vec![0.0; k * dim];
                for v in vectors.iter_mut() {
                    // Quantized coordinates force frequent confidence ties.
                    *v = (rng.gen_range(-2i32..3) as f64) * 0.5;
                }
                for i in 0..k {
                    let row = &mut vectors[i * dim..(i + 1) * dim];
                    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n < 1e-9 {
                        row[0] = 1.0;
                    } else {
                        for x in row.iter_mut() { *x /= n; }
                    }
                }
                let coords = (0..k).map(|i| (i as f64 + 0.5, 0.5)).collect();
                DescriptorSet::new(dim, vectors, KeypointSet::presorted(coords, vec![0.0; k]))
            };
            let a = make(&mut rng, ka);
            let b = make(&mut rng, kb);
            let params = MatchParams { confidence_threshold: 0.05, ..MatchParams::default() };
            let got: Vec<(usize, usize)> = dual_softmax_match(&a, &b, &params)
                .pairs().iter().map(|p| (p.0, p.1)).collect();
            let brute = brute_force_dual_softmax(&a, &b, &params);
            prop_assert_eq!(got, brute);
        }

        #[test]
        fn match_sets_are_one_to_one(seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let grid = PixelGrid::new(16, 16).unwrap();
            let target: Vec<(f64, f64)> = (0..grid.len())
                .map(|i| grid.center(i % 16, i / 16))
                .collect();
            let warp = Warp::new(grid, target, vec![true; grid.len()]);
            let k = rng.gen_range(1..30usize);
            let rand_kps = |rng: &mut rand_chacha::ChaCha12Rng| {
                let coords: Vec<(f64, f64)> = (0..k)
                    .map(|_| (rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0)))
                    .collect();
                KeypointSet::from_unsorted(coords, vec![0.0; k])
            };
            let a = rand_kps(&mut rng);
            let b = rand_kps(&mut rng);
            // Constructor debug-asserts one-to-one; reaching here is the check.
            let m = warp_quantized_match(&warp, &a, &b, 3.0);
            prop_assert!(m.len() <= k);
        }
    }
}
