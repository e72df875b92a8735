//! Conditional DDPM over mean-centered pose vectors: noise schedules, the
//! closed-form forward process, the residual-MLP noise predictor, the
//! training objective and ancestral sampling.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{dropout_mask, Aggregated, Conditioner, ConditionerConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{AdamConfig, AdamState, Bound, ParamStore};
use crate::pose::{Pose3D, PoseVector};
use crate::rng;
use crate::sampler::sample_heatmaps;
use crate::synth::HeatmapSet;
use crate::tensor::{gemm, Tensor};

const COSINE_OFFSET: f64 = 0.008;
/// Largest beta any schedule may use.
const BETA_LIMIT: f64 = 0.999;
/// Default cosine clip. At 25 steps the unclipped last step has
/// `alpha_T` near zero and the reverse step divides by `sqrt(alpha_T)`,
/// which multiplies noise-prediction errors by about 30.
pub const DEFAULT_MAX_BETA: f64 = 0.5;

/// Per-step tables for `t = 1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_bar(t) = f(t) / f(0)` with `f(t) = cos^2(((t/T + s) / (1 + s)) pi/2)`,
    /// `s = 0.008`; betas are clipped at `max_beta` and `alpha_bar` is then
    /// recomputed as the product of `1 - beta`.
    pub fn cosine(steps: usize, max_beta: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(max_beta > 0.0 && max_beta <= BETA_LIMIT) {
            return Err(Error::Config(format!("beta clip {max_beta} outside (0, {BETA_LIMIT}]")));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let betas = (1..=steps)
            .map(|t| (1.0 - (f(t) / f0) / (f(t - 1) / f0)).min(max_beta))
            .collect();
        Self::from_betas(betas)
    }

    /// Linear schedule `beta_t = beta_T * t / T` whose final `alpha_bar`
    /// equals `target`, found by bisection on `beta_T`.
    pub fn linear_matched(steps: usize, target: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < target && target < 1.0) {
            return Err(Error::Config(format!("linear schedule: steps {steps}, target {target}")));
        }
        let final_bar = |b: f64| (1..=steps).map(|t| 1.0 - b * t as f64 / steps as f64).product::<f64>();
        let (mut lo, mut hi) = (0.0, BETA_LIMIT);
        if final_bar(hi) > target {
            return Err(Error::Config(format!("no linear schedule reaches alpha_bar {target}")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if final_bar(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b = 0.5 * (lo + hi);
        Self::from_betas((1..=steps).map(|t| b * t as f64 / steps as f64).collect())
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        if let Some((t, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta at step {} is {b}, must lie in (0, 1)", t + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of the reverse step from `t`: `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_sample",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse step given the predicted noise. `noise` is the standard
/// normal draw for the stochastic case; it is ignored at `t = 1` and when
/// `None` (the mean is returned).
pub fn reverse_step_with(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x_t.len() != eps_hat.len() || noise.is_some_and(|z| z.len() != x_t.len()) {
        return Err(Error::ShapeMismatch {
            op: "reverse_step",
            lhs: vec![x_t.len()],
            rhs: vec![eps_hat.len()],
        });
    }
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mut out: Vec<f64> = x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if let (Some(z), true) = (noise, t > 1) {
        let sigma = sched.posterior_variance(t).sqrt();
        for (o, zi) in out.iter_mut().zip(z) {
            *o += sigma * zi;
        }
    }
    Ok(out)
}

/// Mean over the batch of the squared noise-prediction error per record.
pub fn epsilon_loss(eps: &[Vec<f64>], eps_hat: &[Vec<f64>]) -> Result<f64> {
    if eps.is_empty() || eps.len() != eps_hat.len() {
        return Err(Error::Config(format!(
            "epsilon loss needs matching nonempty batches, got {} and {}",
            eps.len(),
            eps_hat.len()
        )));
    }
    let total: f64 = eps
        .iter()
        .zip(eps_hat)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum();
    Ok(total / eps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub blocks: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            blocks: 2,
        }
    }
}

/// `[c, x_t, t] -> Linear -> LeakyReLU`, then residual blocks
/// `h + act(L2(act(L1(h))))`, then a linear head to the state width.
pub struct Denoiser {
    pub input: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub head: Linear,
    cond_dim: usize,
    state_dim: usize,
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        config: &DenoiserConfig,
        cond_dim: usize,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::Config("denoiser hidden width must be positive".into()));
        }
        let h = config.hidden;
        let input = Linear::new(store, "denoiser/input", cond_dim + state_dim + 1, h, rng)?;
        let blocks = (0..config.blocks)
            .map(|i| {
                Ok((
                    Linear::new(store, &format!("denoiser/block{i}/fc1"), h, h, rng)?,
                    Linear::new(store, &format!("denoiser/block{i}/fc2"), h, h, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, "denoiser/head", h, state_dim, rng)?;
        Ok(Self {
            input,
            blocks,
            head,
            cond_dim,
            state_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.cond_dim + self.state_dim + 1
    }

    /// `c: [B, C]`, `x_t: [B, S]`, `t: [B, 1]` (raw step index) -> `[B, S]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, c: Var<'t>, x_t: Var<'t>, t: Var<'t>) -> Result<Var<'t>> {
        let input = Var::concat(&[c, x_t, t])?;
        let mut h = self.input.forward(p, input)?.leaky_relu();
        for (l1, l2) in &self.blocks {
            let inner = l1.forward(p, h)?.leaky_relu();
            h = h.add(l2.forward(p, inner)?.leaky_relu())?;
        }
        self.head.forward(p, h)
    }

    /// Plain-array evaluator for sampling. The condition's share of the
    /// input layer is computed once here and reused for every step.
    pub fn cached(&self, store: &ParamStore, c: &[f64]) -> Result<CachedDenoiser> {
        if c.len() != self.cond_dim {
            return Err(Error::ShapeMismatch {
                op: "denoiser condition",
                lhs: vec![c.len()],
                rhs: vec![self.cond_dim],
            });
        }
        let w = store.value(self.input.weight).data();
        let h = self.input.out_dim;
        let mut base = store.value(self.input.bias).data().to_vec();
        gemm(1, self.cond_dim, h, c, false, &w[..self.cond_dim * h], false, &mut base, true);
        let dense = |l: &Linear| {
            (
                store.value(l.weight).data().to_vec(),
                store.value(l.bias).data().to_vec(),
                l.in_dim,
                l.out_dim,
            )
        };
        Ok(CachedDenoiser {
            base,
            state_weight: w[self.cond_dim * h..(self.cond_dim + self.state_dim) * h].to_vec(),
            time_weight: w[(self.cond_dim + self.state_dim) * h..].to_vec(),
            blocks: self.blocks.iter().map(|(a, b)| (dense(a), dense(b))).collect(),
            head: dense(&self.head),
            hidden: h,
            state_dim: self.state_dim,
        })
    }
}

type DenseLayer = (Vec<f64>, Vec<f64>, usize, usize);

pub struct CachedDenoiser {
    base: Vec<f64>,
    state_weight: Vec<f64>,
    time_weight: Vec<f64>,
    blocks: Vec<(DenseLayer, DenseLayer)>,
    head: DenseLayer,
    hidden: usize,
    state_dim: usize,
}

fn leaky(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x *= crate::autodiff::LEAKY_RELU_SLOPE;
        }
    }
}

fn dense_forward(rows: usize, x: &[f64], layer: &DenseLayer) -> Vec<f64> {
    let (w, b, i, o) = layer;
    let mut out: Vec<f64> = (0..rows).flat_map(|_| b.iter().copied()).collect();
    gemm(rows, *i, *o, x, false, w, false, &mut out, true);
    out
}

impl CachedDenoiser {
    /// Predicted noise for `rows` states stacked in `x` at step `t`.
    pub fn predict(&self, x: &[f64], rows: usize, t: f64) -> Vec<f64> {
        let h = self.hidden;
        let mut hid = Vec::with_capacity(rows * h);
        for _ in 0..rows {
            hid.extend(self.base.iter().zip(&self.time_weight).map(|(b, w)| b + t * w));
        }
        gemm(rows, self.state_dim, h, x, false, &self.state_weight, false, &mut hid, true);
        leaky(&mut hid);
        for (l1, l2) in &self.blocks {
            let mut inner = dense_forward(rows, &hid, l1);
            leaky(&mut inner);
            let mut outer = dense_forward(rows, &inner, l2);
            leaky(&mut outer);
            for (a, b) in hid.iter_mut().zip(&outer) {
                *a += b;
            }
        }
        dense_forward(rows, &hid, &self.head)
    }
}

/// Everything that defines a model's shape and its sampling protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub joints: usize,
    pub timesteps: usize,
    /// Clip applied to the cosine schedule's betas.
    pub max_beta: f64,
    /// Heatmap samples per joint.
    pub samples: usize,
    pub include_argmax: bool,
    pub conditioner: ConditionerConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 16,
            timesteps: 25,
            max_beta: DEFAULT_MAX_BETA,
            samples: 32,
            include_argmax: true,
            conditioner: ConditionerConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(Error::Config("model needs at least one joint".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples per joint must be at least 1".into()));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        self.conditioner.validate()
    }

    pub fn state_dim(&self) -> usize {
        3 * self.joints
    }
}

/// `M` sampled poses for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub poses: Vec<PoseVector>,
    pub seed: u64,
    pub timesteps: usize,
    pub deterministic: bool,
}

impl HypothesisSet {
    pub fn to_poses(&self) -> Result<Vec<Pose3D>> {
        self.poses.iter().map(PoseVector::to_pose).collect()
    }
}

/// One training example: target pose and the heatmaps it is conditioned on.
pub struct Example<'a> {
    pub pose: &'a Pose3D,
    pub heatmaps: &'a HeatmapSet,
}

pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let conditioner = Conditioner::new(&mut store, &config.conditioner, config.joints, rng)?;
        let denoiser = Denoiser::new(
            &mut store,
            &config.denoiser,
            conditioner.output_dim(),
            config.state_dim(),
            rng,
        )?;
        let schedule = NoiseSchedule::cosine(config.timesteps, config.max_beta)?;
        Ok(Self {
            config,
            store,
            conditioner,
            denoiser,
            schedule,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn metadata(&self) -> String {
        toml::to_string(&self.config).expect("model config serializes")
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        let mut ck = Checkpoint::from_store(self.metadata(), &self.store, adam);
        let t = self.schedule.steps();
        ck.entries.push((
            "schedule/betas".into(),
            Tensor::new([t], self.schedule.betas.clone()).expect("length matches"),
        ));
        ck.entries.push((
            "schedule/alpha_bars".into(),
            Tensor::new([t], self.schedule.alpha_bars.clone()).expect("length matches"),
        ));
        ck
    }

    /// Rebuilds the model from a checkpoint. The stored schedule is used as
    /// is rather than recomputed.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = toml::from_str(&ck.metadata)
            .map_err(|e| Error::format("checkpoint", format!("model configuration: {e}")))?;
        let mut model = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        ck.load_into(&mut model.store)?;
        let betas = ck
            .get("schedule/betas")
            .ok_or_else(|| Error::format("checkpoint", "missing `schedule/betas`"))?;
        let alpha_bars = ck
            .get("schedule/alpha_bars")
            .ok_or_else(|| Error::format("checkpoint", "missing `schedule/alpha_bars`"))?;
        let mut schedule = NoiseSchedule::from_betas(betas.data().to_vec())?;
        if alpha_bars.len() != schedule.steps() {
            return Err(Error::format("checkpoint", "schedule tables differ in length"));
        }
        schedule.alpha_bars = alpha_bars.data().to_vec();
        model.schedule = schedule;
        Ok(model)
    }

    /// Samples the heatmaps and aggregates the channel embeddings.
    pub fn prepare(&self, h: &HeatmapSet, rng: &mut impl RngCore) -> Result<Aggregated> {
        if h.joint_count() != self.config.joints {
            return Err(Error::JointCount {
                expected: self.config.joints,
                actual: h.joint_count(),
            });
        }
        let samples = sample_heatmaps(h, self.config.samples, rng, self.config.include_argmax)?;
        self.conditioner.aggregate(&samples)
    }

    /// Noise-prediction objective on one batch. Per example, in order: the
    /// heatmap samples, `t ~ U{1..T}` and `eps ~ N(0, I)` are drawn; then
    /// one dropout flag per (example, joint).
    pub fn training_loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &[Example<'_>],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        if batch.is_empty() {
            return Err(Error::Config("training batch is empty".into()));
        }
        let s = self.config.state_dim();
        let b = batch.len();
        let mut aggs = Vec::with_capacity(b);
        let mut xs = Vec::with_capacity(b * s);
        let mut ts = Vec::with_capacity(b);
        let mut eps = Vec::with_capacity(b * s);
        for ex in batch {
            if ex.pose.joint_count() != self.config.joints {
                return Err(Error::JointCount {
                    expected: self.config.joints,
                    actual: ex.pose.joint_count(),
                });
            }
            aggs.push(self.prepare(ex.heatmaps, rng)?);
            let t = rng.random_range(1..=self.schedule.steps());
            let e: Vec<f64> = (0..s).map(|_| rng.sample(StandardNormal)).collect();
            xs.extend(forward_sample(&ex.pose.to_vector().0, t, &e, &self.schedule)?);
            ts.push(t as f64);
            eps.extend(e);
        }
        let mask = dropout_mask(b * self.config.joints, dropout, rng, true);
        let refs: Vec<&Aggregated> = aggs.iter().collect();
        let c = self.conditioner.forward(tape, p, &refs, Some(&mask))?;
        let x_t = tape.constant(Tensor::new([b, s], xs)?);
        let t = tape.constant(Tensor::new([b, 1], ts)?);
        let eps_hat = self.denoiser.forward(p, c, x_t, t)?;
        let target = tape.constant(Tensor::new([b, s], eps)?);
        // mse averages over all b * s entries; scale back to a per-record sum.
        Ok(eps_hat.mse(target)?.scale(s as f64))
    }

    /// Condition vector for one input, without dropout.
    pub fn condition(&self, agg: &Aggregated) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let c = self.conditioner.forward(&tape, &p, &[agg], None)?;
        let v = c.value();
        Ok(v.data().to_vec())
    }

    /// Predicted noise through the training graph, for one state.
    pub fn denoise_eps(&self, x_t: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let c = tape.constant(Tensor::new([1, c.len()], c.to_vec())?);
        let x = tape.constant(Tensor::new([1, x_t.len()], x_t.to_vec())?);
        let t = tape.constant(Tensor::new([1, 1], vec![t])?);
        Ok(self.denoiser.forward(&p, c, x, t)?.value().data().to_vec())
    }

    /// One reverse step for a single state, predicting the noise first.
    pub fn reverse_step(
        &self,
        x_t: &[f64],
        t: usize,
        c: &[f64],
        rng: &mut impl Rng,
        deterministic: bool,
    ) -> Result<Vec<f64>> {
        self.schedule.check(t)?;
        let eps_hat = self.denoise_eps(x_t, t as f64, c)?;
        if deterministic {
            return reverse_step_with(x_t, t, &eps_hat, &self.schedule, None);
        }
        let z: Vec<f64> = (0..x_t.len()).map(|_| rng.sample(StandardNormal)).collect();
        reverse_step_with(x_t, t, &eps_hat, &self.schedule, Some(&z))
    }

    /// Draws `m` poses for one heatmap set. The heatmaps are sampled and
    /// the condition computed once; all hypotheses then run the reverse
    /// chain together. In deterministic mode the chain starts at zero and
    /// follows the predicted mean, so every hypothesis is the same pose.
    pub fn generate(&self, h: &HeatmapSet, m: usize, seed: u64, deterministic: bool) -> Result<HypothesisSet> {
        if m == 0 {
            return Err(Error::Config("hypothesis count must be at least 1".into()));
        }
        let mut rng = rng::Rng::seed_from_u64(seed);
        let agg = self.prepare(h, &mut rng)?;
        let c = self.condition(&agg)?;
        let cached = self.denoiser.cached(&self.store, &c)?;
        let s = self.config.state_dim();
        let mut x: Vec<f64> = if deterministic {
            vec![0.0; m * s]
        } else {
            (0..m * s).map(|_| rng.sample(StandardNormal)).collect()
        };
        for t in (1..=self.schedule.steps()).rev() {
            let eps_hat = cached.predict(&x, m, t as f64);
            let z: Option<Vec<f64>> = (!deterministic && t > 1)
                .then(|| (0..m * s).map(|_| rng.sample(StandardNormal)).collect());
            x = reverse_step_with(&x, t, &eps_hat, &self.schedule, z.as_deref())?;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("sampling produced a non-finite pose".into()));
        }
        Ok(HypothesisSet {
            poses: x.chunks_exact(s).map(|c| PoseVector(c.to_vec())).collect(),
            seed,
            timesteps: self.schedule.steps(),
            deterministic,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 64,
            learning_rate: 1e-4,
            dropout: 0.01,
        }
    }
}

/// Single-writer training loop state.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub step: u64,
    rng: rng::Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let adam = AdamState::new(
            &model.store,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
            rng: rng::Rng::seed_from_u64(seed),
        })
    }

    /// One optimizer update on a batch drawn uniformly with replacement
    /// from `poses`/`heatmaps`. Returns the batch loss.
    pub fn step(&mut self, examples: &[Example<'_>]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let picks: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..examples.len()))
            .collect();
        let batch: Vec<Example<'_>> = picks
            .iter()
            .map(|&i| Example {
                pose: examples[i].pose,
                heatmaps: examples[i].heatmaps,
            })
            .collect();
        let tape = Tape::new();
        let p = self.model.store.bind(&tape, true);
        let loss = self
            .model
            .training_loss(&tape, &p, &batch, self.config.dropout, &mut self.rng)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step + 1,
                lr: self.config.learning_rate,
                batch_hash: batch_hash(self.step + 1, &picks),
                loss: value,
            });
        }
        let mut grads = tape.backward(loss)?;
        self.model.store.accumulate_grads(&p, &mut grads);
        drop(p);
        self.adam.step(&mut self.model.store)?;
        self.step += 1;
        Ok(value)
    }
}

/// FNV-1a over the step and the picked example indices.
pub fn batch_hash(step: u64, picks: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in std::iter::once(step).chain(picks.iter().map(|&i| i as u64)) {
        for b in v.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
