//! Training loops for the detector and descriptor networks.
//!
//! Plain gradient descent with two learning-rate groups (encoder and
//! decoder) under cosine decay. Every run is a pure function of the
//! scenes, the initial network state, and the configs: reruns are
//! bit-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::descobj::{descriptor_loss, gt_correspondences, CorrespondenceSet, MatchParams};
use crate::geometry::Warp;
use crate::ioutil::FormatError;
use crate::map::{BinaryMap, ChannelMap, ScoreMap};
use crate::matcher::{sample_descriptors, sample_keypoints, KeypointSet};
use crate::scenegen::{track_keypoints_with_warp, Scene, View};
use crate::targets::{
    detector_loss, log_posterior, rasterize_deltas, smooth_log_prior, topk_target,
    two_view_log_prior, PriorParams, TargetError,
};
use crate::tinynet::{
    descriptor_backward, descriptor_forward, detector_backward, detector_forward, Gradients,
    NetError, NetKind, NetState, ParamGroup,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 1,
            lr_encoder: 2e-5,
            lr_decoder: 1e-4,
            seed: 0,
        }
    }
}

/// Extra knobs of descriptor training: the ground-truth assignment
/// parameters and how many keypoints are sampled from the frozen detector
/// per view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescTrainParams {
    pub match_params: MatchParams,
    pub sample_k: usize,
}

impl Default for DescTrainParams {
    fn default() -> Self {
        Self {
            match_params: MatchParams::default(),
            sample_k: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    /// Decoder-group learning rate after cosine decay.
    pub lr: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no scenes provided")]
    NoScenes,
    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged { step: usize, trace: Vec<TraceEntry> },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

fn cosine_factor(step: usize, total: usize) -> f64 {
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

fn apply_update(net: &mut NetState, grads: &Gradients, lr_encoder: f64, lr_decoder: f64) {
    for (p, g) in net.params_mut().iter_mut().zip(&grads.0) {
        let lr = match p.group {
            ParamGroup::Encoder => lr_encoder,
            ParamGroup::Decoder => lr_decoder,
        };
        for (x, dv) in p.data.iter_mut().zip(g) {
            *x -= lr * dv;
        }
    }
}

/// Writes a loss trace as `step loss lr` lines.
pub fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in trace {
        writeln!(w, "{} {} {}", e.step, e.loss, e.lr)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-scene supervision that does not depend on the network: two-view
/// priors built from the simulated tracks, and the validity masks.
pub struct SceneSupervision {
    pub prior_a: ScoreMap,
    pub prior_b: ScoreMap,
    pub valid_a: BinaryMap,
    pub valid_b: BinaryMap,
}

/// Builds the two-view log-prior pair of one scene from its track
/// keypoints.
pub fn scene_supervision(scene: &Scene, params: &PriorParams) -> SceneSupervision {
    let warp_ab = scene.warp_from(View::A);
    let warp_ba = scene.warp_from(View::B);
    let kps_a = track_keypoints_with_warp(scene, View::A, &warp_ab);
    let kps_b = track_keypoints_with_warp(scene, View::B, &warp_ba);
    let grid = scene.grid();
    let deltas_a = rasterize_deltas(&kps_a, grid).expect("track keypoints are in-grid");
    let deltas_b = rasterize_deltas(&kps_b, grid).expect("track keypoints are in-grid");
    let h_a = smooth_log_prior(&deltas_a, params);
    let h_b = smooth_log_prior(&deltas_b, params);
    let (prior_a, prior_b) = two_view_log_prior(&h_a, &h_b, &warp_ab, &warp_ba);
    SceneSupervision {
        prior_a,
        prior_b,
        valid_a: scene.depth_a.valid().clone(),
        valid_b: scene.depth_b.valid().clone(),
    }
}

/// Trains the detector on synthetic scenes.
///
/// Each step samples `batch_size` scenes, runs the detector on both views,
/// conditions the fixed two-view prior on the (detached) predictions,
/// binarizes by batch top-k, and descends the combined detection plus
/// coverage loss.
pub fn train_detector(
    scenes: &[Scene],
    net: NetState,
    prior_params: &PriorParams,
    config: &TrainConfig,
) -> Result<(NetState, Vec<TraceEntry>), TrainError> {
    assert_eq!(net.kind(), NetKind::Detector, "detector state required");
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let supervision: Vec<SceneSupervision> = scenes
        .iter()
        .map(|s| scene_supervision(s, prior_params))
        .collect();

    let mut net = net;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let factor = cosine_factor(step, config.steps);
        let mut forwards = Vec::new(); // (scores, cache, scene idx, view)
        for _ in 0..config.batch_size.max(1) {
            let si = rng.gen_range(0..scenes.len());
            for view in [View::A, View::B] {
                let image = scenes[si].image(view);
                let (scores, cache) = detector_forward(&net, image)?;
                forwards.push((scores, cache, si, view));
            }
        }
        let n_images = forwards.len();
        let posteriors: Vec<ScoreMap> = forwards
            .iter()
            .map(|(scores, _, si, view)| {
                let sup = &supervision[*si];
                let prior = match view {
                    View::A => &sup.prior_a,
                    View::B => &sup.prior_b,
                };
                log_posterior(prior, scores).expect("matching grids")
            })
            .collect();
        let targets = topk_target(&posteriors, prior_params.k_per_image * n_images)?;

        let mut total_loss = 0.0;
        let mut grads = Gradients::zeros_like(&net);
        for ((scores, cache, si, view), target) in forwards.iter().zip(&targets) {
            let sup = &supervision[*si];
            let valid = match view {
                View::A => &sup.valid_a,
                View::B => &sup.valid_b,
            };
            let (loss, mut d_scores) =
                detector_loss(scores, target.as_ref(), valid, prior_params)?;
            total_loss += loss / n_images as f64;
            for g in d_scores.as_mut_slice() {
                *g /= n_images as f64;
            }
            grads.add_assign(&detector_backward(&net, cache, &d_scores));
        }
        if !total_loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged { step, trace });
        }
        let lr_dec = config.lr_decoder * factor;
        apply_update(&mut net, &grads, config.lr_encoder * factor, lr_dec);
        trace.push(TraceEntry {
            step,
            loss: total_loss,
            lr: lr_dec,
        });
    }
    Ok((net, trace))
}

/// Keypoints and ground-truth pairs sampled once from the frozen detector.
pub struct DescriptorSupervision {
    pub kps_a: KeypointSet,
    pub kps_b: KeypointSet,
    pub gt: CorrespondenceSet,
    pub warp_ab: Warp,
}

/// Samples keypoints from the frozen detector on both views and assigns
/// ground-truth correspondences through the scene warp.
pub fn descriptor_supervision(
    scene: &Scene,
    detector: &NetState,
    params: &DescTrainParams,
) -> Result<DescriptorSupervision, TrainError> {
    let (scores_a, _) = detector_forward(detector, &scene.image_a)?;
    let (scores_b, _) = detector_forward(detector, &scene.image_b)?;
    let kps_a = sample_keypoints(&scores_a, params.sample_k);
    let kps_b = sample_keypoints(&scores_b, params.sample_k);
    let warp_ab = scene.warp_from(View::A);
    let gt = gt_correspondences(&kps_a, &kps_b, &warp_ab, &params.match_params);
    Ok(DescriptorSupervision {
        kps_a,
        kps_b,
        gt,
        warp_ab,
    })
}

/// Gradient w.r.t. the dense normalized descriptor grid from gradients on
/// the unit-normalized sampled vectors: chains through the per-sample
/// renormalization and scatters through the bilinear taps.
fn scatter_sample_gradient(grid: &ChannelMap, kps: &KeypointSet, d_units: &[f64]) -> ChannelMap {
    let dim = grid.channels();
    assert_eq!(d_units.len(), kps.len() * dim);
    let mut out = ChannelMap::zeros(grid.grid(), dim);
    let mut raw = vec![0.0; dim];
    for i in 0..kps.len() {
        let (x, y) = kps.coord(i);
        grid.sample_bilinear_into(x, y, &mut raw);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let du = &d_units[i * dim..(i + 1) * dim];
        let dot: f64 = raw.iter().zip(du).map(|(v, g)| (v / norm) * g).sum();
        for (col, row, w) in grid.bilinear_taps(x, y) {
            let cell = out.pixel_mut(col, row);
            for c in 0..dim {
                let d_raw = (du[c] - (raw[c] / norm) * dot) / norm;
                cell[c] += w * d_raw;
            }
        }
    }
    out
}

/// Trains the descriptor over keypoints sampled from a frozen detector.
///
/// Each step forwards the descriptor on both views of sampled scenes,
/// samples descriptions at the precomputed keypoints, and descends the
/// mutual log-likelihood objective on warp-derived ground-truth pairs.
pub fn train_descriptor(
    scenes: &[Scene],
    net: NetState,
    detector: &NetState,
    desc_params: &DescTrainParams,
    config: &TrainConfig,
) -> Result<(NetState, Vec<TraceEntry>), TrainError> {
    assert_eq!(net.kind(), NetKind::Descriptor, "descriptor state required");
    assert_eq!(detector.kind(), NetKind::Detector, "frozen detector required");
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let supervision: Vec<DescriptorSupervision> = scenes
        .iter()
        .map(|s| descriptor_supervision(s, detector, desc_params))
        .collect::<Result<_, _>>()?;

    let mut net = net;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let factor = cosine_factor(step, config.steps);
        let batch = config.batch_size.max(1);
        let mut total_loss = 0.0;
        let mut grads = Gradients::zeros_like(&net);
        for _ in 0..batch {
            let si = rng.gen_range(0..scenes.len());
            let sup = &supervision[si];
            if sup.gt.is_empty() {
                continue;
            }
            let (grid_a, cache_a) = descriptor_forward(&net, &scenes[si].image_a)?;
            let (grid_b, cache_b) = descriptor_forward(&net, &scenes[si].image_b)?;
            let desc_a = sample_descriptors(&grid_a, &sup.kps_a);
            let desc_b = sample_descriptors(&grid_b, &sup.kps_b);
            let out = descriptor_loss(&desc_a, &desc_b, &sup.gt, &desc_params.match_params)
                .expect("dims match by construction");
            total_loss += out.loss / batch as f64;
            let scale = 1.0 / batch as f64;
            let d_a: Vec<f64> = out.grad_a.iter().map(|g| g * scale).collect();
            let d_b: Vec<f64> = out.grad_b.iter().map(|g| g * scale).collect();
            let d_grid_a = scatter_sample_gradient(&grid_a, &sup.kps_a, &d_a);
            let d_grid_b = scatter_sample_gradient(&grid_b, &sup.kps_b, &d_b);
            grads.add_assign(&descriptor_backward(&net, &cache_a, &d_grid_a));
            grads.add_assign(&descriptor_backward(&net, &cache_b, &d_grid_b));
        }
        if !total_loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged { step, trace });
        }
        let lr_dec = config.lr_decoder * factor;
        apply_update(&mut net, &grads, config.lr_encoder * factor, lr_dec);
        trace.push(TraceEntry {
            step,
            loss: total_loss,
            lr: lr_dec,
        });
    }
    Ok((net, trace))
}
