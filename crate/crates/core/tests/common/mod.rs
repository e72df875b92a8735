//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use hypolift_core::metrics::CPS_RANGE_MM;
use hypolift_core::pose::Pose3D;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn centered(p: &Pose3D) -> (Vec<Vector3<f64>>, Vector3<f64>) {
    let n = p.joints.len() as f64;
    let c = p.joints.iter().fold(Vector3::zeros(), |a, q| a + Vector3::from(*q)) / n;
    (p.joints.iter().map(|q| Vector3::from(*q) - c).collect(), c)
}

/// `sum |s R x - y|^2` with the best nonnegative scale for this rotation.
/// A negative scale would turn the rotation into a reflection.
fn residual(r: &Matrix3<f64>, x: &[Vector3<f64>], y: &[Vector3<f64>], scale: bool) -> (f64, f64) {
    let rx: Vec<Vector3<f64>> = x.iter().map(|p| r * p).collect();
    let s = if scale {
        (rx.iter().zip(y).map(|(a, b)| a.dot(b)).sum::<f64>() / x.iter().map(|p| p.norm_squared()).sum::<f64>()).max(0.0)
    } else {
        1.0
    };
    (rx.iter().zip(y).map(|(a, b)| (s * a - b).norm_squared()).sum(), s)
}

/// Procrustes error found by search over rotations rather than by SVD:
/// random restarts, a shrinking-step local search, then Newton steps on
/// the stationarity condition to reach full precision. Millimeters.
pub fn pa_mpjpe_search(pred: &Pose3D, gt: &Pose3D, scale: bool, seed: u64) -> f64 {
    let (x, _) = centered(pred);
    let (y, _) = centered(gt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_rotation = |rng: &mut ChaCha8Rng| {
        let q = nalgebra::Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    };
    let mut best = Matrix3::identity();
    let mut best_f = residual(&best, &x, &y, scale).0;
    for _ in 0..2000 {
        let r = random_rotation(&mut rng);
        let f = residual(&r, &x, &y, scale).0;
        if f < best_f {
            (best, best_f) = (r, f);
        }
    }
    let mut step = 0.2;
    while step > 1e-7 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut w = Vector3::zeros();
                w[axis] = sign * step;
                let r = best * Rotation3::new(w).into_inner();
                let f = residual(&r, &x, &y, scale).0;
                if f < best_f {
                    (best, best_f, improved) = (r, f, true);
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    // With the scale fixed at its optimum the rotation maximizes
    // tr(R^T A); at the maximum R^T A is symmetric.
    let a = x.iter().zip(&y).fold(Matrix3::zeros(), |acc, (xi, yi)| acc + yi * xi.transpose());
    for _ in 0..4 {
        let w = best.transpose() * a;
        let skew = Vector3::new(w[(2, 1)] - w[(1, 2)], w[(0, 2)] - w[(2, 0)], w[(1, 0)] - w[(0, 1)]);
        let hess = Matrix3::identity() * w.trace() - (w + w.transpose()) * 0.5;
        if let Some(d) = hess.lu().solve(&skew) {
            best *= Rotation3::new(d).into_inner();
        }
    }
    let (_, s) = residual(&best, &x, &y, scale);
    let n = x.len() as f64;
    x.iter().zip(&y).map(|(p, q)| (s * (best * p) - q).norm()).sum::<f64>() / n * 100.0
}

/// Fraction-of-correct-poses area by explicit threshold and pose loops.
pub fn cps_naive(max_errors: &[f64]) -> f64 {
    let mut area = 0.0;
    for theta in 0..CPS_RANGE_MM {
        let mut hit = 0usize;
        for &e in max_errors {
            if e <= theta as f64 {
                hit += 1;
            }
        }
        area += hit as f64 / max_errors.len() as f64;
    }
    area
}

/// Worst relative error over a campaign of gradient checks.
pub struct GradSummary {
    pub instances: usize,
    pub redrawn: usize,
    pub worst: f64,
    pub worst_name: String,
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> hypolift_core::tensor::Tensor {
    hypolift_core::tensor::Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

fn project<'t>(
    t: &'t hypolift_core::autodiff::Tape,
    v: hypolift_core::autodiff::Var<'t>,
    seed: u64,
) -> hypolift_core::Result<hypolift_core::autodiff::Var<'t>> {
    let w = random_tensor(&v.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    v.mul(t.constant(w))?.sum_all()
}

fn tiny_model(seed: u64) -> hypolift_core::diffusion::Model {
    use hypolift_core::conditioning::ConditionerConfig;
    use hypolift_core::diffusion::{DEFAULT_MAX_BETA, DenoiserConfig, Model, ModelConfig};
    let config = ModelConfig {
        joints: 3,
        timesteps: 6,
        max_beta: DEFAULT_MAX_BETA,
        samples: 4,
        include_argmax: true,
        conditioner: ConditionerConfig { bins: 8, embed_dim: 4, layers: 2, heads: 2, ff_dim: 6, ..ConditionerConfig::default() },
        denoiser: DenoiserConfig { hidden: 6, blocks: 2 },
    };
    Model::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Runs `instances` accepted gradient checks cycling through every op, the
/// layers and the full training loss. Instances whose activations sit within
/// `kink` of the LeakyReLU kink are redrawn and not counted.
pub fn gradcheck_campaign(instances: usize, kink: f64, seed: u64) -> GradSummary {
    use hypolift_core::autodiff::Var;
    use hypolift_core::diffusion::Example;
    use hypolift_core::gradcheck::{check_inputs, check_params, Report};
    use hypolift_core::nn::{EncoderLayer, LayerNorm, Linear, MultiHeadAttention};
    use hypolift_core::optim::ParamStore;
    use hypolift_core::synth::HeatmapSet;

    const KINDS: usize = 22;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradSummary { instances: 0, redrawn: 0, worst: 0.0, worst_name: String::new() };
    let mut k = 0usize;
    while summary.instances < instances {
        let kind = k % KINDS;
        let inst = k as u64;
        k += 1;
        let (m, kk, n) = (rng.random_range(1..5), rng.random_range(2..5), rng.random_range(1..5));
        let a = random_tensor(&[m, kk], &mut rng);
        let c = random_tensor(&[m, kk], &mut rng);
        let b = random_tensor(&[kk, n], &mut rng);
        let row = random_tensor(&[kk], &mut rng);
        let (name, report): (&str, Report) = match kind {
            0 => ("matmul", check_inputs(&[a, b], |t, v| project(t, v[0].matmul(v[1])?, inst)).unwrap()),
            1 => {
                let g1 = random_tensor(&[2, m, kk], &mut rng);
                let g2 = random_tensor(&[2, n, kk], &mut rng);
                ("bmm", check_inputs(&[g1, g2], |t, v| project(t, v[0].bmm(v[1], true)?, inst)).unwrap())
            }
            2 => ("add", check_inputs(&[a, row], |t, v| project(t, v[0].add(v[1])?, inst)).unwrap()),
            3 => ("sub", check_inputs(&[a, c], |t, v| project(t, v[0].sub(v[1])?, inst)).unwrap()),
            4 => ("mul", check_inputs(&[a, c], |t, v| project(t, v[0].mul(v[1])?, inst)).unwrap()),
            5 => ("scale", check_inputs(&[a], |t, v| project(t, v[0].scale(-1.7), inst)).unwrap()),
            6 => ("leaky_relu", check_inputs(&[a], |t, v| project(t, v[0].leaky_relu(), inst)).unwrap()),
            7 => ("softmax", check_inputs(&[a], |t, v| project(t, v[0].softmax(), inst)).unwrap()),
            8 => {
                let (g, be) = (random_tensor(&[kk], &mut rng), random_tensor(&[kk], &mut rng));
                ("layer_norm", check_inputs(&[a, g, be], |t, v| project(t, v[0].layer_norm(v[1], v[2])?, inst)).unwrap())
            }
            9 => ("concat", check_inputs(&[a, c], |t, v| project(t, Var::concat(&[v[0], v[1]])?, inst)).unwrap()),
            10 => ("sum_axis", check_inputs(&[a], |t, v| project(t, v[0].sum_axis(0)?, inst)).unwrap()),
            11 => ("mse", check_inputs(&[a, c], |_, v| v[0].mse(v[1])).unwrap()),
            12 => ("reshape", check_inputs(&[a], |t, v| project(t, v[0].reshape([m * kk])?, inst)).unwrap()),
            13 => {
                let x = random_tensor(&[m, kk, n], &mut rng);
                ("permute", check_inputs(&[x], |t, v| project(t, v[0].permute(&[2, 0, 1])?, inst)).unwrap())
            }
            14 => ("composed", check_inputs(&[a, b], |t, v| {
                let h = v[0].matmul(v[1])?.leaky_relu();
                let s = h.softmax().mul(h)?;
                project(t, s.mul(s)?, inst)
            }).unwrap()),
            15 | 16 | 17 | 18 => {
                let mut store = ParamStore::new();
                let x = random_tensor(&[2, 3, 8], &mut rng);
                let r = &mut rng;
                let report = match kind {
                    15 => {
                        let l = Linear::new(&mut store, "lin", 8, 3, r).unwrap();
                        check_params(&mut store, 8, r, |t, p| project(t, l.forward(p, t.constant(x.clone()))?, inst))
                    }
                    16 => {
                        let l = LayerNorm::new(&mut store, "ln", 8).unwrap();
                        check_params(&mut store, 8, r, |t, p| project(t, l.forward(p, t.constant(x.clone()))?, inst))
                    }
                    17 => {
                        let l = MultiHeadAttention::new(&mut store, "mha", 8, 2, r).unwrap();
                        check_params(&mut store, 8, r, |t, p| project(t, l.forward(p, t.constant(x.clone()))?, inst))
                    }
                    _ => {
                        let l = EncoderLayer::new(&mut store, "enc", 8, 2, 12, inst % 2 == 0, r).unwrap();
                        check_params(&mut store, 8, r, |t, p| project(t, l.forward(p, t.constant(x.clone()))?, inst))
                    }
                };
                (["linear", "layer norm", "attention", "encoder layer"][kind - 15], report.unwrap())
            }
            _ => {
                let mut model = tiny_model(inst);
                let data: Vec<(Pose3D, HeatmapSet)> = (0..3)
                    .map(|_| {
                        let pose = Pose3D::new((0..3).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect());
                        let grids: Vec<Vec<f64>> = (0..3).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
                        (pose, HeatmapSet::from_dense(8, &grids).unwrap())
                    })
                    .collect();
                let batch: Vec<Example<'_>> = data.iter().map(|(p, h)| Example { pose: p, heatmaps: h }).collect();
                let mut store = std::mem::take(&mut model.store);
                let report = check_params(&mut store, 6, &mut rng, |t, p| {
                    model.training_loss(t, p, &batch, 0.3, &mut ChaCha8Rng::seed_from_u64(inst))
                })
                .unwrap();
                ("training loss", report)
            }
        };
        if report.kink_margin <= kink {
            summary.redrawn += 1;
            continue;
        }
        summary.instances += 1;
        for (input, e) in &report.errors {
            if *e >= summary.worst {
                summary.worst = *e;
                summary.worst_name = format!("{name} ({input})");
            }
        }
    }
    summary
}

/// Mean and covariance of `draws` against an isotropic Gaussian, within 3
/// standard errors per entry.
pub fn gaussian_within_3se(draws: &[Vec<f64>], mean: &[f64], var: f64) -> Result<(), String> {
    let n = draws.len() as f64;
    let d = mean.len();
    let emp: Vec<f64> = (0..d).map(|i| draws.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    for i in 0..d {
        if (emp[i] - mean[i]).abs() >= 3.0 * (var / n).sqrt() {
            return Err(format!("mean[{i}] {} vs {}", emp[i], mean[i]));
        }
    }
    for i in 0..d {
        for k in 0..d {
            let c = draws.iter().map(|x| (x[i] - emp[i]) * (x[k] - emp[k])).sum::<f64>() / (n - 1.0);
            let (target, se) = if i == k { (var, var * (2.0 / n).sqrt()) } else { (0.0, var / n.sqrt()) };
            if (c - target).abs() >= 3.0 * se {
                return Err(format!("cov[{i}][{k}] {c} vs {target}"));
            }
        }
    }
    Ok(())
}

/// Closed-form draws and explicit single-step chains at step `t`, checked
/// against the Gaussian the closed form implies.
pub fn forward_process_check(t: usize, steps: usize, draws: usize, seed: u64) -> Result<(), String> {
    use hypolift_core::diffusion::{forward_sample, NoiseSchedule, DEFAULT_MAX_BETA};
    use rand_distr::StandardNormal;
    let sched = NoiseSchedule::cosine(steps, DEFAULT_MAX_BETA).map_err(|e| e.to_string())?;
    let x0 = vec![0.8, -1.3, 0.4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let closed: Vec<Vec<f64>> = (0..draws)
        .map(|_| {
            let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            forward_sample(&x0, t, &eps, &sched).unwrap()
        })
        .collect();
    let chained: Vec<Vec<f64>> = (0..draws)
        .map(|_| {
            let mut x = x0.clone();
            for s in 1..=t {
                let b = sched.beta(s);
                for v in &mut x {
                    *v = (1.0 - b).sqrt() * *v + b.sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
            x
        })
        .collect();
    let a = sched.alpha_bar(t);
    let mean: Vec<f64> = x0.iter().map(|v| a.sqrt() * v).collect();
    gaussian_within_3se(&closed, &mean, 1.0 - a).map_err(|e| format!("closed form t={t}: {e}"))?;
    gaussian_within_3se(&chained, &mean, 1.0 - a).map_err(|e| format!("chain t={t}: {e}"))
}

/// Scans the channel embedding on `grid` evenly spaced points of [-1, 1].
/// Checks the peak at bin centers, zero outside the support, the interior
/// bin sum of 2 and orthogonality of inputs more than `h` apart.
pub fn embedding_grid_check(bins: usize, grid: usize) -> Result<(), String> {
    use hypolift_core::conditioning::{channel_embed, ChannelEmbeddingConfig};
    let cfg = ChannelEmbeddingConfig::new(bins).map_err(|e| e.to_string())?;
    let h = cfg.bandwidth();
    for s in 0..bins {
        let v = channel_embed(cfg.center(s), &cfg)[s];
        if (v - 1.0).abs() > 1e-12 {
            return Err(format!("b(center {s}) = {v}"));
        }
    }
    let xs: Vec<f64> = (0..grid).map(|i| -1.0 + 2.0 * i as f64 / (grid - 1) as f64).collect();
    let embeds: Vec<Vec<f64>> = xs.iter().map(|&x| channel_embed(x, &cfg)).collect();
    for (x, e) in xs.iter().zip(&embeds) {
        for (s, v) in e.iter().enumerate() {
            if (x - cfg.center(s)).abs() >= h / 2.0 && *v != 0.0 {
                return Err(format!("x {x}: bin {s} is {v} outside its support"));
            }
        }
        if x.abs() <= 1.0 - 3.0 / bins as f64 {
            let sum: f64 = e.iter().sum();
            if (sum - 2.0).abs() > 1e-9 {
                return Err(format!("x {x}: bin sum {sum}"));
            }
        }
    }
    // Every pair more than h apart, compared through the index range of
    // its nonzero bins.
    let ranges: Vec<(usize, usize)> = embeds
        .iter()
        .map(|e| {
            let nz: Vec<usize> = (0..bins).filter(|&s| e[s] != 0.0).collect();
            (nz[0], *nz.last().unwrap())
        })
        .collect();
    for i in 0..grid {
        let start = xs.partition_point(|&x| x <= xs[i] + h);
        for k in start..grid {
            let (lo, hi) = (ranges[k].0.max(ranges[i].0), ranges[k].1.min(ranges[i].1));
            if lo <= hi {
                let dot: f64 = (lo..=hi).map(|s| embeds[i][s] * embeds[k][s]).sum();
                if dot != 0.0 {
                    return Err(format!("inputs {} and {} overlap: {dot}", xs[i], xs[k]));
                }
            }
        }
    }
    Ok(())
}
