//! Monte Carlo checks of the sampler, joint dropout and the diffusion
//! forward and reverse processes.

mod common;

use hypolift_core::conditioning::dropout_mask;
use hypolift_core::diffusion::{forward_sample, reverse_step_with, NoiseSchedule, DEFAULT_MAX_BETA};
use hypolift_core::pose::Pose2D;
use hypolift_core::sampler::sample_heatmaps;
use hypolift_core::synth::{render_heatmaps, CorruptionSpec, HeatmapSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn normals(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn uniform_map_passes_chi_square() {
    let size = 64;
    let h = HeatmapSet::from_dense(size, &[vec![1.0; size * size]]).unwrap();
    let n = 65536;
    let s = sample_heatmaps(&h, n, &mut ChaCha8Rng::seed_from_u64(11), false).unwrap();
    let mut counts = vec![0u64; size * size];
    for c in &s.joints[0].coords {
        let col = ((c[0] + 1.0) * size as f64 / 2.0) as usize;
        let row = ((c[1] + 1.0) * size as f64 / 2.0) as usize;
        counts[row * size + col] += 1;
    }
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}");
}

#[test]
fn bimodal_split_matches_mass() {
    let size = 16;
    let mut grid = vec![0.0; size * size];
    grid[3 * size + 3] = 0.7;
    grid[12 * size + 12] = 0.3;
    let h = HeatmapSet::from_dense(size, &[grid]).unwrap();
    let s = sample_heatmaps(&h, 10_000, &mut ChaCha8Rng::seed_from_u64(12), false).unwrap();
    let upper = s.joints[0].coords.iter().filter(|c| c[1] < 0.0).count() as f64 / 10_000.0;
    assert!((upper - 0.7).abs() <= 0.02, "{upper}");
}

#[test]
fn dropout_rate() {
    let mask = dropout_mask(100_000, 0.01, &mut ChaCha8Rng::seed_from_u64(13), true);
    let rate = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    assert!((rate - 0.01).abs() <= 0.001, "{rate}");
}

#[test]
fn closed_form_forward_matches_composed_steps() {
    for t in [1, 12, 25] {
        common::forward_process_check(t, 25, 10_000, 14 + t as u64).unwrap();
    }
}

#[test]
fn stochastic_reverse_step_variance() {
    let sched = NoiseSchedule::cosine(25, DEFAULT_MAX_BETA).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x_t = vec![0.3, -0.2, 1.1, 0.0];
    let eps_hat = vec![0.5, 0.1, -0.7, 0.2];
    for t in [2, 12, 25] {
        let draws: Vec<Vec<f64>> = (0..10_000)
            .map(|_| reverse_step_with(&x_t, t, &eps_hat, &sched, Some(&normals(4, &mut rng))).unwrap())
            .collect();
        let mean = reverse_step_with(&x_t, t, &eps_hat, &sched, None).unwrap();
        let target = sched.posterior_variance(t);
        for i in 0..4 {
            let m = draws.iter().map(|x| x[i]).sum::<f64>() / 1e4;
            let v = draws.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / (1e4 - 1.0);
            assert!((v / target - 1.0).abs() < 0.05, "t={t} coord {i}: {v} vs {target}");
            assert!((m - mean[i]).abs() < 4.0 * (target / 1e4).sqrt());
        }
    }
}

#[test]
fn oracle_noise_recovers_x0_in_one_step() {
    let sched = NoiseSchedule::cosine(25, DEFAULT_MAX_BETA).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..100 {
        let x0 = normals(48, &mut rng);
        let eps = normals(48, &mut rng);
        let x1 = forward_sample(&x0, 1, &eps, &sched).unwrap();
        let back = reverse_step_with(&x1, 1, &eps, &sched, None).unwrap();
        let err = x0.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err:e}");
    }
}

fn small_maps(joints: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0f64..1.0, 64), joints)
        .prop_map(|mut g| {
            for m in &mut g {
                m[0] += 0.01;
            }
            g
        })
}

proptest! {
    #[test]
    fn a_joint_depends_only_on_its_own_map(grids in small_maps(3), seed in any::<u64>(), perm_seed in any::<u64>()) {
        let h = HeatmapSet::from_dense(8, &grids).unwrap();
        let mut shuffled = grids.clone();
        let mut r = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..64).rev() {
            shuffled[1].swap(i, r.random_range(0..=i));
        }
        let h2 = HeatmapSet::from_dense(8, &shuffled).unwrap();
        let a = sample_heatmaps(&h, 16, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
        let b = sample_heatmaps(&h2, 16, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
        prop_assert_eq!(&a.joints[0], &b.joints[0]);
        prop_assert_eq!(&a.joints[2], &b.joints[2]);
    }

    #[test]
    fn argmax_slot_has_top_likelihood(grids in small_maps(2), seed in any::<u64>(), n in 1usize..40) {
        let h = HeatmapSet::from_dense(8, &grids).unwrap();
        let s = sample_heatmaps(&h, n, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
        for j in &s.joints {
            prop_assert_eq!(j.len(), n);
            let slot = j.argmax_slot.unwrap();
            prop_assert!(j.likelihoods.iter().all(|&l| l <= j.likelihoods[slot]));
        }
    }

    #[test]
    fn clean_render_argmax_is_the_joint_cell(row in 3usize..61, col in 3usize..61, seed in any::<u64>()) {
        let size = 64;
        let p = [(2 * col + 1) as f64 / size as f64 - 1.0, (2 * row + 1) as f64 / size as f64 - 1.0];
        let pose = Pose2D { joints: vec![p] };
        let r = render_heatmaps(&pose, &[CorruptionSpec::default()], size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(r.heatmaps.map(0).argmax().unwrap().0, row * size + col);
    }
}
