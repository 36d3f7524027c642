//! Conditional matching distributions over descriptor sets and the
//! mutual log-likelihood descriptor objective.
//!
//! Given unit-norm description vectors for the keypoints of two views, the
//! scaled inner products define a pair of conditional distributions (one
//! per normalization axis). The training loss is the mean negative
//! log-likelihood `-(log p(a|b) + log p(b|a))` over ground-truth
//! corresponding pairs, normalized over the full sampled sets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{warp_points, Warp};
use crate::ioutil::{self, FormatError};
use crate::matcher::KeypointSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DescriptorError {
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

/// Matching hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Scale applied to descriptor inner products (temperature inverse).
    pub inverse_temperature: f64,
    /// Ground-truth pairing distance cap as a fraction of the image diagonal.
    pub mutual_dist_frac: f64,
    /// Minimum dual-softmax confidence for a match to be kept.
    pub confidence_threshold: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            inverse_temperature: 20.0,
            mutual_dist_frac: 0.005,
            confidence_threshold: 0.01,
        }
    }
}

/// Unit-norm description vectors aligned with a keypoint set.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    vectors: Vec<f64>,
    keypoints: KeypointSet,
}

impl DescriptorSet {
    pub fn new(dim: usize, vectors: Vec<f64>, keypoints: KeypointSet) -> Self {
        assert_eq!(vectors.len(), dim * keypoints.len());
        Self {
            dim,
            vectors,
            keypoints,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn keypoints(&self) -> &KeypointSet {
        &self.keypoints
    }

    pub fn max_norm_error(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let n: f64 = self.vector(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Scaled similarity matrix, entry `(i, j) = inverse_temperature * <a_i, b_j>`,
/// row-major `K_A x K_B`.
pub fn similarity_logits(
    desc_a: &DescriptorSet,
    desc_b: &DescriptorSet,
    params: &MatchParams,
) -> Result<Vec<f64>, DescriptorError> {
    if desc_a.dim() != desc_b.dim() {
        return Err(DescriptorError::DimMismatch(desc_a.dim(), desc_b.dim()));
    }
    let (ka, kb) = (desc_a.len(), desc_b.len());
    let mut logits = vec![0.0; ka * kb];
    for i in 0..ka {
        let a = desc_a.vector(i);
        for j in 0..kb {
            let b = desc_b.vector(j);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            logits[i * kb + j] = params.inverse_temperature * dot;
        }
    }
    Ok(logits)
}

/// The two conditional matching distributions induced by a logit matrix:
/// `a_given_b` normalizes each column over A, `b_given_a` each row over B.
#[derive(Debug, Clone)]
pub struct Conditionals {
    ka: usize,
    kb: usize,
    a_given_b: Vec<f64>,
    b_given_a: Vec<f64>,
}

impl Conditionals {
    pub fn a_given_b(&self, i: usize, j: usize) -> f64 {
        self.a_given_b[i * self.kb + j]
    }

    pub fn b_given_a(&self, i: usize, j: usize) -> f64 {
        self.b_given_a[i * self.kb + j]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.ka, self.kb)
    }
}

/// Row and column softmax of a `ka x kb` logit matrix, computed with
/// max-subtraction for stability.
pub fn conditional_distributions(logits: &[f64], ka: usize, kb: usize) -> Conditionals {
    assert_eq!(logits.len(), ka * kb);
    let mut b_given_a = vec![0.0; ka * kb];
    for i in 0..ka {
        let row = &logits[i * kb..(i + 1) * kb];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..kb {
            let e = (row[j] - m).exp();
            b_given_a[i * kb + j] = e;
            sum += e;
        }
        for j in 0..kb {
            b_given_a[i * kb + j] /= sum;
        }
    }
    let mut a_given_b = vec![0.0; ka * kb];
    for j in 0..kb {
        let mut m = f64::NEG_INFINITY;
        for i in 0..ka {
            m = m.max(logits[i * kb + j]);
        }
        let mut sum = 0.0;
        for i in 0..ka {
            let e = (logits[i * kb + j] - m).exp();
            a_given_b[i * kb + j] = e;
            sum += e;
        }
        for i in 0..ka {
            a_given_b[i * kb + j] /= sum;
        }
    }
    Conditionals {
        ka,
        kb,
        a_given_b,
        b_given_a,
    }
}

/// Ground-truth index pairs between two keypoint sets; every index appears
/// at most once on each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceSet {
    pairs: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        #[cfg(debug_assertions)]
        {
            let mut a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let mut b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            a.sort_unstable();
            b.sort_unstable();
            debug_assert!(a.windows(2).all(|w| w[0] != w[1]));
            debug_assert!(b.windows(2).all(|w| w[0] != w[1]));
        }
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Assigns ground-truth correspondences by warping A's keypoints into B's
/// frame and keeping mutual nearest neighbors whose distance stays below
/// `mutual_dist_frac` of the source-grid diagonal. A keypoints outside the
/// warp domain cannot pair.
pub fn gt_correspondences(
    kps_a: &KeypointSet,
    kps_b: &KeypointSet,
    warp_ab: &Warp,
    params: &MatchParams,
) -> CorrespondenceSet {
    let (warped, kept) = warp_points(kps_a, warp_ab);
    if warped.is_empty() || kps_b.is_empty() {
        return CorrespondenceSet::new(Vec::new());
    }
    let max_dist = params.mutual_dist_frac * warp_ab.grid().diagonal();
    let dist = |wi: usize, bi: usize| -> f64 {
        let (wx, wy) = warped.coord(wi);
        let (bx, by) = kps_b.coord(bi);
        ((wx - bx).powi(2) + (wy - by).powi(2)).sqrt()
    };
    let nearest_b: Vec<usize> = (0..warped.len())
        .map(|wi| {
            (0..kps_b.len())
                .fold((0usize, f64::INFINITY), |acc, bi| {
                    let d = dist(wi, bi);
                    if d < acc.1 {
                        (bi, d)
                    } else {
                        acc
                    }
                })
                .0
        })
        .collect();
    let nearest_a: Vec<usize> = (0..kps_b.len())
        .map(|bi| {
            (0..warped.len())
                .fold((0usize, f64::INFINITY), |acc, wi| {
                    let d = dist(wi, bi);
                    if d < acc.1 {
                        (wi, d)
                    } else {
                        acc
                    }
                })
                .0
        })
        .collect();
    let mut pairs = Vec::new();
    for wi in 0..warped.len() {
        let bi = nearest_b[wi];
        if nearest_a[bi] == wi && dist(wi, bi) < max_dist {
            pairs.push((kept[wi], bi));
        }
    }
    CorrespondenceSet::new(pairs)
}

/// Loss value and gradients of the descriptor objective.
#[derive(Debug, Clone)]
pub struct DescriptorLoss {
    pub loss: f64,
    /// Gradient w.r.t. every A vector entry, `K_A x D` row-major.
    pub grad_a: Vec<f64>,
    /// Gradient w.r.t. every B vector entry, `K_B x D` row-major.
    pub grad_b: Vec<f64>,
    /// True when there were no ground-truth pairs: loss and gradients are
    /// defined as zero.
    pub empty_gt: bool,
}

/// Mean negative log-likelihood of both conditionals over ground-truth
/// pairs, with exact gradients w.r.t. both descriptor matrices. The
/// normalizers run over the full sets.
pub fn descriptor_loss(
    desc_a: &DescriptorSet,
    desc_b: &DescriptorSet,
    gt: &CorrespondenceSet,
    params: &MatchParams,
) -> Result<DescriptorLoss, DescriptorError> {
    let (ka, kb) = (desc_a.len(), desc_b.len());
    let dim = desc_a.dim();
    if dim != desc_b.dim() {
        return Err(DescriptorError::DimMismatch(dim, desc_b.dim()));
    }
    if gt.is_empty() {
        return Ok(DescriptorLoss {
            loss: 0.0,
            grad_a: vec![0.0; ka * dim],
            grad_b: vec![0.0; kb * dim],
            empty_gt: true,
        });
    }
    let logits = similarity_logits(desc_a, desc_b, params)?;
    let conds = conditional_distributions(&logits, ka, kb);
    let m = gt.len() as f64;

    let mut loss = 0.0;
    // dL/d(logit) accumulated over both conditional terms of every pair.
    let mut d_logits = vec![0.0; ka * kb];
    for &(i, j) in gt.pairs() {
        loss -= (conds.a_given_b(i, j).ln() + conds.b_given_a(i, j).ln()) / m;
        for k in 0..ka {
            d_logits[k * kb + j] += conds.a_given_b(k, j) / m;
        }
        for l in 0..kb {
            d_logits[i * kb + l] += conds.b_given_a(i, l) / m;
        }
        d_logits[i * kb + j] -= 2.0 / m;
    }

    let tau = params.inverse_temperature;
    let mut grad_a = vec![0.0; ka * dim];
    let mut grad_b = vec![0.0; kb * dim];
    for i in 0..ka {
        for j in 0..kb {
            let g = d_logits[i * kb + j] * tau;
            if g == 0.0 {
                continue;
            }
            let (av, bv) = (desc_a.vector(i), desc_b.vector(j));
            for d in 0..dim {
                grad_a[i * dim + d] += g * bv[d];
                grad_b[j * dim + d] += g * av[d];
            }
        }
    }
    Ok(DescriptorLoss {
        loss,
        grad_a,
        grad_b,
        empty_gt: false,
    })
}

// --- file formats ---

const DESC_MAGIC: &str = "DDDE";

/// Writes descriptors: magic "DDDE", u32 K, u32 D, K*D f32 row-major.
pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    ioutil::write_magic(&mut w, DESC_MAGIC)?;
    ioutil::write_u32(&mut w, set.len() as u32)?;
    ioutil::write_u32(&mut w, set.dim() as u32)?;
    let data: Vec<f32> = set.vectors().iter().map(|v| *v as f32).collect();
    ioutil::write_f32_slice(&mut w, &data)?;
    w.flush()?;
    Ok(())
}

/// Reads a descriptor file; keypoints are not stored in this format, so
/// the caller supplies the aligned set.
pub fn read_descriptors(path: &Path, keypoints: KeypointSet) -> Result<DescriptorSet, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    ioutil::read_magic(&mut r, DESC_MAGIC)?;
    let k = ioutil::read_u32(&mut r)? as usize;
    let d = ioutil::read_u32(&mut r)? as usize;
    if k != keypoints.len() {
        return Err(FormatError::malformed(
            "descriptors",
            format!("{k} vectors but {} keypoints", keypoints.len()),
        ));
    }
    if d == 0 || k.saturating_mul(d) > (1 << 28) {
        return Err(FormatError::malformed("descriptors", "unreasonable dims"));
    }
    let data = ioutil::read_f32_vec(&mut r, k * d)?;
    Ok(DescriptorSet::new(
        d,
        data.iter().map(|v| *v as f64).collect(),
        keypoints,
    ))
}

/// Writes correspondences as text `ia ib` lines.
pub fn write_correspondences(path: &Path, set: &CorrespondenceSet) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (a, b) in set.pairs() {
        writeln!(w, "{} {}", a, b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_correspondences(path: &Path) -> Result<CorrespondenceSet, FormatError> {
    let r = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(FormatError::malformed(
                "correspondences",
                format!("bad line {line:?}"),
            ));
        }
        let a = toks[0]
            .parse()
            .map_err(|_| FormatError::malformed("correspondences", "bad index"))?;
        let b = toks[1]
            .parse()
            .map_err(|_| FormatError::malformed("correspondences", "bad index"))?;
        pairs.push((a, b));
    }
    Ok(CorrespondenceSet::new(pairs))
}
