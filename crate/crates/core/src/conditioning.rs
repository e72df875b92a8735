//! Heatmap-sample conditioner: channel embeddings of the sampled 2D
//! positions, likelihood-weighted per-joint aggregation, a transformer over
//! the joint tokens and a final projection to the condition vector.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, EncoderLayer, LayerNorm, Linear};
use crate::optim::{Bound, ParamId, ParamStore};
use crate::sampler::{JointSampleSet, JointSamples};
use crate::tensor::Tensor;

/// `K` cos² bins with centers `-1 + (2s + 1) / K` and bandwidth `8 / K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelEmbeddingConfig {
    bins: usize,
}

impl ChannelEmbeddingConfig {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 8 || bins % 2 != 0 {
            return Err(Error::Config(format!("bin count must be even and at least 8, got {bins}")));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bandwidth(&self) -> f64 {
        8.0 / self.bins as f64
    }

    pub fn center(&self, s: usize) -> f64 {
        -1.0 + (2 * s + 1) as f64 / self.bins as f64
    }

    /// Adds `weight * b(x - center_s)` to `out[s]` for every bin in the
    /// support of `x`. Inputs outside `[-1, 1]` are clamped.
    pub fn accumulate(&self, x: f64, weight: f64, out: &mut [f64]) {
        let x = x.clamp(-1.0, 1.0);
        let k = self.bins as f64;
        let h = self.bandwidth();
        let nearest = ((x + 1.0) * k / 2.0 - 0.5).round() as isize;
        for s in (nearest - 2).max(0)..=(nearest + 2).min(self.bins as isize - 1) {
            let u = x - self.center(s as usize);
            if u.abs() < h / 2.0 {
                let c = (std::f64::consts::PI * u / h).cos();
                out[s as usize] += weight * c * c;
            }
        }
    }
}

pub fn channel_embed(x: f64, cfg: &ChannelEmbeddingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.bins];
    cfg.accumulate(x, 1.0, &mut out);
    out
}

/// `sum_n l_n [phi(x_n); phi(y_n)]` for one joint: the likelihood-weighted
/// channel embeddings before the per-sample linear layer.
pub fn aggregate_joint(samples: &JointSamples, cfg: &ChannelEmbeddingConfig) -> Vec<f64> {
    let k = cfg.bins;
    let mut out = vec![0.0; 2 * k];
    for (c, &l) in samples.coords.iter().zip(&samples.likelihoods) {
        let (xs, ys) = out.split_at_mut(k);
        cfg.accumulate(c[0], l, xs);
        cfg.accumulate(c[1], l, ys);
    }
    out
}

/// Joint embedding computed sample by sample:
/// `sum_n (W^T (l_n [phi(x_n); phi(y_n)]) + b)`, with `weight` of shape
/// `[2K, D]` and `bias` of shape `[D]`.
pub fn embed_joint(
    samples: &JointSamples,
    cfg: &ChannelEmbeddingConfig,
    weight: &Tensor,
    bias: &Tensor,
) -> Vec<f64> {
    let (rows, d) = (weight.shape()[0], weight.shape()[1]);
    let mut e = vec![0.0; d];
    for (c, &l) in samples.coords.iter().zip(&samples.likelihoods) {
        let mut phi = channel_embed(c[0], cfg);
        phi.extend(channel_embed(c[1], cfg));
        for (o, b) in e.iter_mut().zip(bias.data()) {
            *o += b;
        }
        for (r, &v) in phi.iter().enumerate().take(rows) {
            let scaled = l * v;
            if scaled != 0.0 {
                for (o, w) in e.iter_mut().zip(&weight.data()[r * d..(r + 1) * d]) {
                    *o += scaled * w;
                }
            }
        }
    }
    e
}

/// One flag per joint, `true` meaning the joint is dropped. Outside
/// training nothing is dropped and `rng` is left untouched.
pub fn dropout_mask(joints: usize, p: f64, rng: &mut impl Rng, training: bool) -> Vec<bool> {
    if !training {
        return vec![false; joints];
    }
    let p = p.clamp(0.0, 1.0);
    (0..joints).map(|_| rng.random_bool(p)).collect()
}

/// Zeroes each row (joint embedding) of `embeddings` with probability `p`.
pub fn apply_joint_dropout(embeddings: &mut [Vec<f64>], p: f64, rng: &mut impl Rng, training: bool) {
    let mask = dropout_mask(embeddings.len(), p, rng, training);
    for (e, drop) in embeddings.iter_mut().zip(mask) {
        if drop {
            e.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionerConfig {
    /// Channel-embedding bins per axis.
    pub bins: usize,
    /// Joint embedding and transformer width.
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub pre_norm: bool,
    /// Standard deviation of the initial positional encodings.
    pub positional_std: f64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            embed_dim: 128,
            layers: 4,
            heads: 4,
            ff_dim: 512,
            pre_norm: true,
            positional_std: 0.02,
        }
    }
}

impl ConditionerConfig {
    pub fn validate(&self) -> Result<()> {
        ChannelEmbeddingConfig::new(self.bins)?;
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} must be a positive multiple of the head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }
}

/// Aggregated samples of one input, `J x 2K` row-major, plus the number of
/// samples per joint (the multiplicity of the per-sample bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated {
    pub values: Vec<f64>,
    pub samples: usize,
}

pub struct Conditioner {
    config: ConditionerConfig,
    embedding: ChannelEmbeddingConfig,
    joints: usize,
    pub sample_linear: Linear,
    pub positional: ParamId,
    pub layers: Vec<EncoderLayer>,
    /// Closing norm of a pre-norm stack. The summed joint embeddings grow
    /// with the sample count and the residual stream carries that scale
    /// through to the projection without it.
    pub final_norm: Option<LayerNorm>,
    pub projection: Linear,
    calls: AtomicU64,
}

impl Conditioner {
    pub fn new(
        store: &mut ParamStore,
        config: &ConditionerConfig,
        joints: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let sample_linear = Linear::new(store, "conditioner/sample", 2 * config.bins, d, rng)?;
        let positional = store.insert(
            "conditioner/positional",
            normal_tensor(&[joints, d], config.positional_std, rng),
        )?;
        let layers = (0..config.layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("conditioner/layer{i}"),
                    d,
                    config.heads,
                    config.ff_dim,
                    config.pre_norm,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if config.pre_norm && config.layers > 0 {
            Some(LayerNorm::new(store, "conditioner/final_norm", d)?)
        } else {
            None
        };
        let projection = Linear::new(store, "conditioner/projection", joints * d, joints * d, rng)?;
        Ok(Self {
            config: config.clone(),
            embedding: ChannelEmbeddingConfig::new(config.bins)?,
            joints,
            sample_linear,
            positional,
            layers,
            final_norm,
            projection,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ConditionerConfig {
        &self.config
    }

    pub fn embedding(&self) -> &ChannelEmbeddingConfig {
        &self.embedding
    }

    pub fn output_dim(&self) -> usize {
        self.joints * self.config.embed_dim
    }

    /// Number of forward passes run so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn aggregate(&self, samples: &JointSampleSet) -> Result<Aggregated> {
        if samples.joints.len() != self.joints {
            return Err(Error::JointCount {
                expected: self.joints,
                actual: samples.joints.len(),
            });
        }
        let n = samples.joints[0].len();
        if samples.joints.iter().any(|j| j.len() != n) {
            return Err(Error::Config("joints carry different sample counts".into()));
        }
        let values = samples
            .joints
            .iter()
            .flat_map(|j| aggregate_joint(j, &self.embedding))
            .collect();
        Ok(Aggregated { values, samples: n })
    }

    /// Joint embeddings `[B, J, D]` of a batch of aggregated inputs.
    pub fn embed<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &[&Aggregated]) -> Result<Var<'t>> {
        let n = batch.first().map(|a| a.samples).ok_or_else(|| Error::Config("empty batch".into()))?;
        if batch.iter().any(|a| a.samples != n) {
            return Err(Error::Config("inputs in a batch must share the sample count".into()));
        }
        let width = 2 * self.embedding.bins();
        let mut data = Vec::with_capacity(batch.len() * self.joints * width);
        for a in batch {
            if a.values.len() != self.joints * width {
                return Err(Error::DataLength {
                    shape: vec![self.joints, width],
                    expected: self.joints * width,
                    actual: a.values.len(),
                });
            }
            data.extend_from_slice(&a.values);
        }
        let x = tape.constant(Tensor::new([batch.len(), self.joints, width], data)?);
        // The per-sample layer is linear, so summing its outputs over the
        // samples equals applying it to the summed inputs plus n biases.
        x.matmul(p[self.sample_linear.weight])?
            .add(p[self.sample_linear.bias].scale(n as f64))
    }

    /// Condition vectors `[B, J * D]` from joint embeddings `[B, J, D]`.
    pub fn fuse<'t>(&self, p: &Bound<'t>, embeddings: Var<'t>) -> Result<Var<'t>> {
        let b = embeddings.shape()[0];
        let mut h = embeddings.add(p[self.positional])?;
        for layer in &self.layers {
            h = layer.forward(p, h)?;
        }
        if let Some(norm) = &self.final_norm {
            h = norm.forward(p, h)?;
        }
        let flat = h.reshape([b, self.output_dim()])?;
        self.projection.forward(p, flat)
    }

    /// Full conditioner. `dropped` holds one flag per (input, joint); a
    /// dropped joint's embedding is zeroed before fusion.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &[&Aggregated],
        dropped: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut e = self.embed(tape, p, batch)?;
        if let Some(mask) = dropped {
            if mask.len() != batch.len() * self.joints {
                return Err(Error::Config(format!(
                    "dropout mask has {} flags, expected {}",
                    mask.len(),
                    batch.len() * self.joints
                )));
            }
            if mask.iter().any(|&m| m) {
                let d = self.config.embed_dim;
                let keep = Tensor::from_fn([batch.len(), self.joints, d], |i| {
                    if mask[i / d] {
                        0.0
                    } else {
                        1.0
                    }
                });
                e = e.mul(tape.constant(keep))?;
            }
        }
        self.fuse(p, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ChannelEmbeddingConfig {
        ChannelEmbeddingConfig::new(64).unwrap()
    }

    #[test]
    fn bin_count_validated() {
        assert!(ChannelEmbeddingConfig::new(6).is_err());
        assert!(ChannelEmbeddingConfig::new(17).is_err());
        assert_eq!(ChannelEmbeddingConfig::new(16).unwrap().bandwidth(), 0.5);
    }

    #[test]
    fn center_hits_one_and_support_is_bounded() {
        let c = cfg();
        for s in [0, 10, 31, 63] {
            let e = channel_embed(c.center(s), &c);
            assert!((e[s] - 1.0).abs() < 1e-15);
            assert!(e.iter().filter(|v| **v != 0.0).count() <= 4);
        }
        let e = channel_embed(c.center(20) + c.bandwidth() / 2.0, &c);
        assert_eq!(e[20], 0.0);
    }

    #[test]
    fn out_of_range_is_clamped() {
        let c = cfg();
        assert_eq!(channel_embed(1.7, &c), channel_embed(1.0, &c));
        assert_eq!(channel_embed(-3.0, &c), channel_embed(-1.0, &c));
    }

    #[test]
    fn accumulate_matches_direct_definition() {
        let c = ChannelEmbeddingConfig::new(16).unwrap();
        for i in 0..=400 {
            let x = -1.0 + i as f64 / 200.0;
            let e = channel_embed(x, &c);
            for (s, v) in e.iter().enumerate() {
                let u = x - c.center(s);
                let want = if u.abs() < c.bandwidth() / 2.0 {
                    (std::f64::consts::PI * u / c.bandwidth()).cos().powi(2)
                } else {
                    0.0
                };
                assert_eq!(*v, want);
            }
        }
    }

    fn joint(coords: Vec<[f64; 2]>, likelihoods: Vec<f64>) -> JointSamples {
        JointSamples {
            coords,
            likelihoods,
            argmax_slot: None,
        }
    }

    #[test]
    fn embed_joint_linearity_and_permutation() {
        let c = ChannelEmbeddingConfig::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = normal_tensor(&[16, 5], 1.0, &mut rng);
        let b = Tensor::zeros([5]);
        let one = joint(vec![[0.2, -0.4]], vec![0.7]);
        let two = joint(vec![[0.2, -0.4]; 2], vec![0.7; 2]);
        let e1 = embed_joint(&one, &c, &w, &b);
        let e2 = embed_joint(&two, &c, &w, &b);
        for (x, y) in e1.iter().zip(&e2) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        // The aggregated form doubles bit for bit.
        let a1 = aggregate_joint(&one, &c);
        let a2 = aggregate_joint(&two, &c);
        for (x, y) in a1.iter().zip(&a2) {
            assert_eq!(2.0 * x, *y);
        }
        let zero = joint(vec![[0.1, 0.3], [0.5, 0.5]], vec![0.0, 0.0]);
        assert!(embed_joint(&zero, &c, &w, &b).iter().all(|v| *v == 0.0));
        let a = joint(vec![[0.1, 0.3], [0.5, -0.9], [-0.2, 0.0]], vec![0.5, 1.0, 0.25]);
        let p = joint(vec![[-0.2, 0.0], [0.1, 0.3], [0.5, -0.9]], vec![0.25, 0.5, 1.0]);
        let (ea, ep) = (embed_joint(&a, &c, &w, &b), embed_joint(&p, &c, &w, &b));
        for (x, y) in ea.iter().zip(&ep) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut e = vec![vec![1.0, 2.0]; 5];
        apply_joint_dropout(&mut e, 0.0, &mut rng, true);
        assert!(e.iter().all(|r| r == &[1.0, 2.0]));
        apply_joint_dropout(&mut e, 1.0, &mut rng, false);
        assert!(e.iter().all(|r| r == &[1.0, 2.0]));
        apply_joint_dropout(&mut e, 1.0, &mut rng, true);
        assert!(e.iter().all(|r| r == &[0.0, 0.0]));
    }

    #[test]
    fn tape_embedding_matches_per_sample_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ConditionerConfig {
            bins: 8,
            embed_dim: 4,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            ..ConditionerConfig::default()
        };
        let cond = Conditioner::new(&mut store, &cfg, 2, &mut rng).unwrap();
        store
            .set_value(cond.sample_linear.bias, Tensor::new([4], vec![0.1, -0.2, 0.3, 0.05]).unwrap())
            .unwrap();
        let set = JointSampleSet {
            joints: vec![
                joint(vec![[0.1, 0.2], [0.9, -0.7], [0.0, 0.0]], vec![0.3, 0.8, 0.1]),
                joint(vec![[-0.5, 0.5], [0.25, 0.25], [1.0, -1.0]], vec![1.0, 0.0, 0.6]),
            ],
        };
        let agg = cond.aggregate(&set).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let e = cond.embed(&tape, &p, &[&agg]).unwrap().value();
        for (j, js) in set.joints.iter().enumerate() {
            let want = embed_joint(
                js,
                cond.embedding(),
                store.value(cond.sample_linear.weight),
                store.value(cond.sample_linear.bias),
            );
            for (k, w) in want.iter().enumerate() {
                assert!((e.data()[j * 4 + k] - w).abs() < 1e-12);
            }
        }
    }
}
