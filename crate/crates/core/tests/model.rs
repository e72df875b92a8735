//! Model-level behavior: sampling protocol, the training objective at known
//! points and a short training run on generated data.

use hypolift_core::conditioning::ConditionerConfig;
use hypolift_core::dataset::Dataset;
use hypolift_core::diffusion::{DEFAULT_MAX_BETA, DenoiserConfig, Example, Model, ModelConfig, TrainConfig, Trainer};
use hypolift_core::pose::Skeleton;
use hypolift_core::synth::{Generator, GeneratorConfig};
use hypolift_core::tensor::Tensor;
use hypolift_core::autodiff::Tape;
use hypolift_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(joints: usize) -> ModelConfig {
    ModelConfig {
        joints,
        timesteps: 25,
        max_beta: DEFAULT_MAX_BETA,
        samples: 8,
        include_argmax: true,
        conditioner: ConditionerConfig {
            bins: 8,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            ..ConditionerConfig::default()
        },
        denoiser: DenoiserConfig { hidden: 64, blocks: 2 },
    }
}

fn records(n: u64) -> Dataset {
    let skel = Skeleton::default16();
    let generator = Generator::new(skel.clone(), GeneratorConfig::default()).unwrap();
    Dataset {
        skeleton: skel,
        seed: 1,
        heatmap_size: 64,
        records: generator.records(1, 0..n).unwrap(),
    }
}

#[test]
fn conditioner_runs_once_per_generate() {
    let data = records(1);
    let model = Model::new(small_config(16), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = model.conditioner.calls();
    model.generate(&data.records[0].heatmaps, 50, 3, false).unwrap();
    assert_eq!(model.conditioner.calls(), before + 1);
}

#[test]
fn deterministic_generation_repeats() {
    let data = records(1);
    let model = Model::new(small_config(16), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let h = &data.records[0].heatmaps;
    let a = model.generate(h, 3, 9, true).unwrap();
    assert!(a.poses.iter().all(|p| *p == a.poses[0]));
    assert_eq!(a, model.generate(h, 3, 9, true).unwrap());
    let s = model.generate(h, 4, 9, false).unwrap();
    assert_eq!(s, model.generate(h, 4, 9, false).unwrap());
    assert_ne!(s.poses[0], s.poses[1]);
}

#[test]
fn ten_thousand_hypotheses_are_finite() {
    let data = records(1);
    let model = Model::new(small_config(16), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let set = model.generate(&data.records[0].heatmaps, 10_000, 4, false).unwrap();
    assert_eq!(set.poses.len(), 10_000);
    assert!(set.poses.iter().all(|p| p.0.iter().all(|v| v.is_finite())));
}

#[test]
fn zero_prediction_loss_is_the_state_width() {
    let data = records(64);
    let mut model = Model::new(small_config(16), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    for name in ["denoiser/head/weight", "denoiser/head/bias"] {
        let shape = model.store.value(model.store.id(name).unwrap()).shape().to_vec();
        model.store.set_by_name(name, Tensor::zeros(shape)).unwrap();
    }
    let batch: Vec<Example<'_>> =
        data.records.iter().map(|r| Example { pose: &r.pose, heatmaps: &r.heatmaps }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rounds = 100;
    let mut total = 0.0;
    for _ in 0..rounds {
        let tape = Tape::new();
        let p = model.store.bind(&tape, false);
        total += model.training_loss(&tape, &p, &batch, 0.0, &mut rng).unwrap().value().data()[0];
    }
    let mean = total / rounds as f64;
    // Each record's loss is chi-square with 48 degrees of freedom.
    let se = (2.0 * 48.0 / (rounds * batch.len()) as f64).sqrt();
    assert!((mean - 48.0).abs() < 3.0 * se, "{mean}");
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = records(4);
    let mut model = Model::new(small_config(16), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let id = model.store.id("denoiser/head/bias").unwrap();
    let mut bias = model.store.value(id).clone();
    bias.data_mut()[0] = f64::NAN;
    model.store.set_value(id, bias).unwrap();
    let examples: Vec<Example<'_>> =
        data.records.iter().map(|r| Example { pose: &r.pose, heatmaps: &r.heatmaps }).collect();
    let config = TrainConfig { iterations: 1, batch_size: 4, learning_rate: 3e-4, dropout: 0.0 };
    let mut trainer = Trainer::new(model, config, 7).unwrap();
    match trainer.step(&examples) {
        Err(e @ Error::Diverged { step: 1, lr, .. }) => {
            assert_eq!(lr, 3e-4);
            let msg = e.to_string();
            assert!(msg.contains("step 1") && msg.contains("batch"), "{msg}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn smoothed_loss_decreases_early_in_training() {
    let data = records(500);
    let model = Model::new(small_config(16), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let examples: Vec<Example<'_>> =
        data.records.iter().map(|r| Example { pose: &r.pose, heatmaps: &r.heatmaps }).collect();
    let config = TrainConfig { iterations: 1000, batch_size: 64, learning_rate: 1e-4, dropout: 0.01 };
    let mut trainer = Trainer::new(model, config, 9).unwrap();
    let losses: Vec<f64> = (0..1000).map(|_| trainer.step(&examples).unwrap()).collect();
    let windows: Vec<f64> = losses.chunks(100).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "{windows:?}");
    }
}
