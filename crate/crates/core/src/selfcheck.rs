//! Built-in verification suites: gradient checks against central finite
//! differences and oracle-equivalence checks for the matcher and target
//! construction. The CLI `selftest` command runs these and fails loudly,
//! so a broken build cannot silently produce numbers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::descobj::{
    conditional_distributions, descriptor_loss, similarity_logits, CorrespondenceSet,
    DescriptorSet, MatchParams,
};
use crate::map::{Map2, PixelGrid, ScoreMap};
use crate::matcher::{dual_softmax_match, sample_descriptors, KeypointSet};
use crate::scenegen::{make_scene, SceneParams};
use crate::targets::{
    coverage_loss, cross_entropy, detector_loss, rasterize_deltas, smooth_log_prior, topk_target,
    PriorParams, TargetDistribution,
};
use crate::tinynet::{
    descriptor_backward, descriptor_forward, detector_backward, detector_forward, Gradients,
    NetConfig, NetKind, NetState,
};

/// Result of one verification suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    /// Worst observed deviation, in the units of the check.
    pub worst: f64,
    /// Acceptance bound for `worst`.
    pub bound: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &'static str, worst: f64, bound: f64) -> Self {
        Self {
            name,
            worst,
            bound,
            passed: worst <= bound,
        }
    }
}

fn check_config() -> NetConfig {
    NetConfig {
        encoder_channels: vec![4, 8, 12],
        detector_blocks: 1,
        descriptor_blocks: 1,
        descriptor_dim: 6,
        context_channels: vec![2, 4],
    }
}

fn param_slots(net: &NetState, count: usize, rng: &mut ChaCha12Rng) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| {
            let pi = rng.gen_range(0..net.params().len());
            let di = rng.gen_range(0..net.params()[pi].data.len());
            (pi, di)
        })
        .collect()
}

fn max_rel_gradient_error(
    net: &NetState,
    slots: &[(usize, usize)],
    grads: &Gradients,
    mut loss_of: impl FnMut(&NetState) -> f64,
) -> f64 {
    let eps = 1e-5;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for &(pi, di) in slots {
        let orig = probe.params()[pi].data[di];
        probe.params_mut()[pi].data[di] = orig + eps;
        let plus = loss_of(&probe);
        probe.params_mut()[pi].data[di] = orig - eps;
        let minus = loss_of(&probe);
        probe.params_mut()[pi].data[di] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let g = grads.0[pi][di];
        worst = worst.max((fd - g).abs() / g.abs().max(1e-6));
    }
    worst
}

fn probe_scene(seed: u64) -> crate::scenegen::Scene {
    make_scene(
        &SceneParams {
            width: 16,
            height: 16,
            track_count: 12,
            detect_prob: 1.0,
            ..SceneParams::default()
        },
        seed,
    )
    .expect("valid probe scene params")
}

/// Gradient of the detection cross entropy through the detector network.
pub fn check_detection_gradient(seed: u64, slots: usize) -> CheckReport {
    let scene = probe_scene(seed);
    let image = &scene.image_a;
    let net = NetState::new(NetKind::Detector, check_config(), seed).expect("valid config");
    let target = TargetDistribution::new(image.grid(), vec![5, 40, 77, 130, 200]);
    let (scores, cache) = detector_forward(&net, image).expect("divisible dims");
    let (_, d_scores) = cross_entropy(&scores, Some(&target));
    let grads = detector_backward(&net, &cache, &d_scores);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xC0);
    let slots = param_slots(&net, slots, &mut rng);
    let worst = max_rel_gradient_error(&net, &slots, &grads, |n| {
        let (s, _) = detector_forward(n, image).expect("divisible dims");
        cross_entropy(&s, Some(&target)).0
    });
    CheckReport::new("detection-ce-gradient", worst, 1e-4)
}

/// Gradient of the coverage loss through the detector network.
pub fn check_coverage_gradient(seed: u64, slots: usize) -> CheckReport {
    let scene = probe_scene(seed.wrapping_add(1));
    let image = &scene.image_a;
    let valid = scene.depth_a.valid().clone();
    let params = PriorParams {
        sigma_coverage: 2.5,
        ..PriorParams::default()
    };
    let net = NetState::new(NetKind::Detector, check_config(), seed ^ 0x11).expect("valid config");
    let (scores, cache) = detector_forward(&net, image).expect("divisible dims");
    let (_, d_scores) = coverage_loss(&scores, &valid, &params).expect("valid mask");
    let grads = detector_backward(&net, &cache, &d_scores);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xC1);
    let slots = param_slots(&net, slots, &mut rng);
    let worst = max_rel_gradient_error(&net, &slots, &grads, |n| {
        let (s, _) = detector_forward(n, image).expect("divisible dims");
        coverage_loss(&s, &valid, &params).expect("valid mask").0
    });
    CheckReport::new("coverage-gradient", worst, 1e-4)
}

/// Gradient of the combined detector loss through the network.
pub fn check_combined_gradient(seed: u64, slots: usize) -> CheckReport {
    let scene = probe_scene(seed.wrapping_add(2));
    let image = &scene.image_a;
    let valid = scene.depth_a.valid().clone();
    let params = PriorParams {
        sigma_coverage: 2.5,
        ..PriorParams::default()
    };
    let target = TargetDistribution::new(image.grid(), vec![3, 64, 129, 255]);
    let net = NetState::new(NetKind::Detector, check_config(), seed ^ 0x22).expect("valid config");
    let (scores, cache) = detector_forward(&net, image).expect("divisible dims");
    let (_, d_scores) = detector_loss(&scores, Some(&target), &valid, &params).expect("valid");
    let grads = detector_backward(&net, &cache, &d_scores);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xC2);
    let slots = param_slots(&net, slots, &mut rng);
    let worst = max_rel_gradient_error(&net, &slots, &grads, |n| {
        let (s, _) = detector_forward(n, image).expect("divisible dims");
        detector_loss(&s, Some(&target), &valid, &params).expect("valid").0
    });
    CheckReport::new("combined-loss-gradient", worst, 1e-4)
}

/// Gradient of the descriptor objective through the descriptor network,
/// including descriptor sampling and renormalization.
pub fn check_descriptor_gradient(seed: u64, slots: usize) -> CheckReport {
    let scene = probe_scene(seed.wrapping_add(3));
    let net = NetState::new(NetKind::Descriptor, check_config(), seed ^ 0x33).expect("valid");
    // Fixed keypoint lattice spread across the image.
    let mut coords = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            coords.push((2.0 + 4.0 * c as f64 - 0.3, 2.0 + 3.0 * r as f64 + 0.4));
        }
    }
    let n = coords.len();
    let kps = KeypointSet::presorted(coords, vec![1.0; n]);
    let gt = CorrespondenceSet::new((0..n).map(|i| (i, i)).collect());
    let params = MatchParams::default();

    let loss_of = |state: &NetState| -> f64 {
        let (ga, _) = descriptor_forward(state, &scene.image_a).expect("divisible");
        let (gb, _) = descriptor_forward(state, &scene.image_b).expect("divisible");
        let da = sample_descriptors(&ga, &kps);
        let db = sample_descriptors(&gb, &kps);
        descriptor_loss(&da, &db, &gt, &params).expect("same dims").loss
    };
    let (grid_a, cache_a) = descriptor_forward(&net, &scene.image_a).expect("divisible");
    let (grid_b, cache_b) = descriptor_forward(&net, &scene.image_b).expect("divisible");
    let desc_a = sample_descriptors(&grid_a, &kps);
    let desc_b = sample_descriptors(&grid_b, &kps);
    let out = descriptor_loss(&desc_a, &desc_b, &gt, &params).expect("same dims");

    let dim = grid_a.channels();
    let scatter = |grid: &crate::map::ChannelMap, d_units: &[f64]| {
        let mut acc = crate::map::ChannelMap::zeros(grid.grid(), dim);
        let mut raw = vec![0.0; dim];
        for i in 0..kps.len() {
            let (x, y) = kps.coord(i);
            grid.sample_bilinear_into(x, y, &mut raw);
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let du = &d_units[i * dim..(i + 1) * dim];
            let dot: f64 = raw.iter().zip(du).map(|(v, g)| (v / norm) * g).sum();
            for (col, row, w) in grid.bilinear_taps(x, y) {
                let cell = acc.pixel_mut(col, row);
                for c in 0..dim {
                    cell[c] += w * (du[c] - (raw[c] / norm) * dot) / norm;
                }
            }
        }
        acc
    };
    let mut grads = descriptor_backward(&net, &cache_a, &scatter(&grid_a, &out.grad_a));
    grads.add_assign(&descriptor_backward(&net, &cache_b, &scatter(&grid_b, &out.grad_b)));

    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xC3);
    let slots = param_slots(&net, slots, &mut rng);
    let worst = max_rel_gradient_error(&net, &slots, &grads, loss_of);
    CheckReport::new("descriptor-loss-gradient", worst, 1e-4)
}

/// Dual-softmax matcher against an exhaustive mutual-argmax reference on
/// random (tie-heavy) instances. The deviation counts mismatched pair
/// sets.
pub fn check_matcher_oracle(seed: u64, instances: usize) -> CheckReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let ka = rng.gen_range(1..=16usize);
        let kb = rng.gen_range(1..=16usize);
        let dim = 4;
        let mut make = |k: usize| {
            let mut vectors = vec![0.0; k * dim];
            for v in vectors.iter_mut() {
                *v = (rng.gen_range(-2i32..3) as f64) * 0.5;
            }
            for i in 0..k {
                let row = &mut vectors[i * dim..(i + 1) * dim];
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n < 1e-9 {
                    row[0] = 1.0;
                } else {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
            let coords = (0..k).map(|i| (i as f64 + 0.5, 0.5)).collect();
            DescriptorSet::new(dim, vectors, KeypointSet::presorted(coords, vec![0.0; k]))
        };
        let a = make(ka);
        let b = make(kb);
        let params = MatchParams {
            confidence_threshold: 0.05,
            ..MatchParams::default()
        };
        let got: Vec<(usize, usize)> = dual_softmax_match(&a, &b, &params)
            .pairs()
            .iter()
            .map(|p| (p.0, p.1))
            .collect();

        let logits = similarity_logits(&a, &b, &params).expect("same dims");
        let conds = conditional_distributions(&logits, ka, kb);
        let conf = |i: usize, j: usize| conds.a_given_b(i, j) * conds.b_given_a(i, j);
        let mut expected = Vec::new();
        for i in 0..ka {
            for j in 0..kb {
                let row_max = (0..kb).all(|j2| conf(i, j2) <= conf(i, j));
                let row_first = (0..j).all(|j2| conf(i, j2) < conf(i, j));
                let col_max = (0..ka).all(|i2| conf(i2, j) <= conf(i, j));
                let col_first = (0..i).all(|i2| conf(i2, j) < conf(i, j));
                if row_max
                    && row_first
                    && col_max
                    && col_first
                    && conf(i, j) >= params.confidence_threshold
                {
                    expected.push((i, j));
                }
            }
        }
        if got != expected {
            mismatches += 1;
        }
    }
    CheckReport::new("dual-softmax-oracle", mismatches as f64, 0.0)
}

/// Prior construction: isolated delta peaks at exactly vartheta over a 0
/// baseline.
pub fn check_prior_peak() -> CheckReport {
    let grid = PixelGrid::new(24, 24).expect("valid grid");
    let params = PriorParams::default();
    let kps = KeypointSet::presorted(vec![(11.3, 12.8)], vec![1.0]);
    let deltas = rasterize_deltas(&kps, grid).expect("in-grid keypoint");
    let prior = smooth_log_prior(&deltas, &params);
    let peak_err = (*prior.at(11, 12) - params.vartheta).abs();
    let baseline_err = prior.at(0, 0).abs().max(prior.at(23, 23).abs());
    CheckReport::new("prior-peak-ratio", peak_err.max(baseline_err), 1e-9)
}

/// Top-k support bookkeeping on random, tie-heavy posterior batches.
pub fn check_topk_support(seed: u64, batches: usize) -> CheckReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0usize;
    for _ in 0..batches {
        let n_imgs = rng.gen_range(1..4usize);
        let grid = PixelGrid::new(6, 6).expect("valid grid");
        let posteriors: Vec<ScoreMap> = (0..n_imgs)
            .map(|_| {
                Map2::from_vec(
                    grid,
                    (0..36).map(|_| (rng.gen_range(0..4) as f64) * 0.5).collect(),
                )
            })
            .collect();
        let k = rng.gen_range(1..=n_imgs * 36);
        let targets = topk_target(&posteriors, k).expect("k in range");
        let total: usize = targets
            .iter()
            .map(|t| t.as_ref().map_or(0, |t| t.support().len()))
            .sum();
        worst = worst.max(total.abs_diff(k));
    }
    CheckReport::new("topk-support-count", worst as f64, 0.0)
}

/// Runs every suite with deterministic seeds.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    vec![
        check_prior_peak(),
        check_detection_gradient(seed, 30),
        check_coverage_gradient(seed, 30),
        check_combined_gradient(seed, 30),
        check_descriptor_gradient(seed, 30),
        check_matcher_oracle(seed, 200),
        check_topk_support(seed, 50),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_selfchecks_pass() {
        for report in run_all(7) {
            assert!(
                report.passed,
                "{} failed: {} > {}",
                report.name, report.worst, report.bound
            );
        }
    }
}
