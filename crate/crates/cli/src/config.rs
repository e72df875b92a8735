//! Run configuration: one flat TOML table whose keys double as command
//! line flags (`key_name` is `--key-name`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use hypolift_core::conditioning::ConditionerConfig;
use hypolift_core::diffusion::{DenoiserConfig, ModelConfig, TrainConfig, DEFAULT_MAX_BETA};
use hypolift_core::metrics::Protocol;
use hypolift_core::pose::Skeleton;
use hypolift_core::synth::{AmbiguitySpec, CorruptionMode, CorruptionSpec, GeneratorConfig};

use crate::UsageError;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "HYPOLIFT_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Skeleton preset; `default16` is the only one.
    pub skeleton: String,

    pub train_records: u64,
    pub test_records: u64,
    pub noise_scale: f64,
    pub focal: f64,
    pub depth: f64,
    pub jitter: f64,
    pub heatmap_size: usize,
    pub margin: f64,
    pub wide_probability: f64,
    pub bimodal_probability: f64,
    /// Joints eligible for the bimodal corruption; empty means all.
    pub bimodal_joints: Vec<usize>,
    pub occluded_probability: f64,
    pub ambiguity_joint: usize,
    /// Probability of the depth-ambiguous arm construction; 0 disables it.
    pub ambiguity_probability: f64,
    pub ambiguity_angle: Vec<f64>,

    pub timesteps: usize,
    /// Clip on the cosine schedule's betas.
    pub max_beta: f64,
    pub samples: usize,
    pub include_argmax: bool,
    pub bins: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub pre_norm: bool,
    pub hidden: usize,
    pub blocks: usize,

    pub iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Steps between evaluation snapshots during training; 0 disables them.
    pub eval_every: u64,
    pub eval_records: usize,
    pub eval_hypotheses: usize,

    pub hypotheses: usize,
    pub deterministic: bool,

    pub procrustes_scale: bool,
    pub pck_threshold_mm: f64,
    pub m_sweep: Vec<usize>,
    /// Extra hypotheses files added to the sweep table, e.g. runs trained
    /// with other `samples` or `timesteps`.
    pub sweep_inputs: Vec<String>,

    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub snapshots: PathBuf,
    pub hypotheses_file: PathBuf,
    pub report: PathBuf,
    pub record_table: PathBuf,
    pub sweep_table: PathBuf,
    pub plot_input: PathBuf,
    pub plot_output: PathBuf,
    pub plot_x: String,
    pub plot_y: Vec<String>,
    /// Column whose values split rows into separate series; ignored when
    /// the CSV has no such column.
    pub plot_group: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            skeleton: "default16".into(),

            train_records: 5000,
            test_records: 200,
            noise_scale: 0.5,
            focal: 140.0,
            depth: 50.0,
            jitter: 1.0,
            heatmap_size: 64,
            margin: 3.0,
            wide_probability: 0.05,
            bimodal_probability: 0.3,
            bimodal_joints: vec![15],
            occluded_probability: 0.0,
            ambiguity_joint: 15,
            ambiguity_probability: 0.5,
            ambiguity_angle: vec![35.0, 65.0],

            timesteps: 25,
            max_beta: DEFAULT_MAX_BETA,
            samples: 32,
            include_argmax: true,
            bins: 16,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            pre_norm: true,
            hidden: 256,
            blocks: 2,

            iterations: 20_000,
            batch: 64,
            lr: 1e-4,
            dropout: 0.01,
            eval_every: 5000,
            eval_records: 32,
            eval_hypotheses: 20,

            hypotheses: 200,
            deterministic: false,

            procrustes_scale: true,
            pck_threshold_mm: 150.0,
            m_sweep: vec![1, 5, 20, 50, 200],
            sweep_inputs: Vec::new(),

            train_data: "data/train.hlds".into(),
            test_data: "data/test.hlds".into(),
            checkpoint: "run/model.hlck".into(),
            loss_curve: "run/loss.csv".into(),
            snapshots: "run/snapshots.csv".into(),
            hypotheses_file: "run/hypotheses.hlhy".into(),
            report: "run/report.json".into(),
            record_table: "run/records.csv".into(),
            sweep_table: "run/sweep.csv".into(),
            plot_input: "run/sweep.csv".into(),
            plot_output: "run/sweep.svg".into(),
            plot_x: "hypotheses".into(),
            plot_y: vec!["mpjpe_mm".into()],
            plot_group: "input".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// All config keys, sorted.
    pub fn keys() -> Vec<String> {
        table(&Self::default()).keys().cloned().collect()
    }

    /// Sets one key from its command-line text. Lists are comma separated.
    pub fn set(&mut self, key: &str, raw: &str) -> anyhow::Result<()> {
        let mut t = table(self);
        let Some(current) = t.get(key) else {
            return Err(UsageError(format!("unknown config key `{key}`")).into());
        };
        let value = parse_like(current, raw)
            .ok_or_else(|| UsageError(format!("invalid value `{raw}` for `{key}`")))?;
        t.insert(key.to_string(), value);
        *self = toml::Value::Table(t)
            .try_into()
            .map_err(|e| UsageError(format!("invalid value `{raw}` for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn skeleton(&self) -> anyhow::Result<Skeleton> {
        match self.skeleton.as_str() {
            "default16" => Ok(Skeleton::default16()),
            other => bail!(hypolift_core::Error::Config(format!("unknown skeleton preset `{other}`"))),
        }
    }

    pub fn generator(&self) -> anyhow::Result<GeneratorConfig> {
        let mut corruptions = vec![];
        if self.bimodal_probability > 0.0 {
            corruptions.push(CorruptionSpec {
                joints: self.bimodal_joints.clone(),
                ..CorruptionSpec::new(CorruptionMode::Bimodal, self.bimodal_probability)
            });
        }
        if self.wide_probability > 0.0 {
            corruptions.push(CorruptionSpec::new(CorruptionMode::Wide, self.wide_probability));
        }
        if self.occluded_probability > 0.0 {
            corruptions.push(CorruptionSpec::new(CorruptionMode::Occluded, self.occluded_probability));
        }
        let ambiguity = if self.ambiguity_probability > 0.0 {
            let [lo, hi] = <[f64; 2]>::try_from(self.ambiguity_angle.as_slice()).map_err(|_| {
                hypolift_core::Error::Config("ambiguity_angle needs exactly two values".into())
            })?;
            Some(AmbiguitySpec {
                joint: self.ambiguity_joint,
                probability: self.ambiguity_probability,
                depth_angle: [lo, hi],
            })
        } else {
            None
        };
        Ok(GeneratorConfig {
            focal: self.focal,
            depth: self.depth,
            jitter: self.jitter,
            noise_scale: self.noise_scale,
            heatmap_size: self.heatmap_size,
            margin: self.margin,
            corruptions,
            ambiguity,
        })
    }

    pub fn model(&self, joints: usize) -> ModelConfig {
        ModelConfig {
            joints,
            timesteps: self.timesteps,
            max_beta: self.max_beta,
            samples: self.samples,
            include_argmax: self.include_argmax,
            conditioner: ConditionerConfig {
                bins: self.bins,
                embed_dim: self.embed_dim,
                layers: self.layers,
                heads: self.heads,
                ff_dim: self.ff_dim,
                pre_norm: self.pre_norm,
                ..ConditionerConfig::default()
            },
            denoiser: DenoiserConfig {
                hidden: self.hidden,
                blocks: self.blocks,
            },
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch,
            learning_rate: self.lr,
            dropout: self.dropout,
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            procrustes_scale: self.procrustes_scale,
            pck_threshold_mm: self.pck_threshold_mm,
        }
    }
}

fn table(cfg: &RunConfig) -> toml::Table {
    match toml::Value::try_from(cfg).expect("run config serializes") {
        toml::Value::Table(t) => t,
        _ => unreachable!("struct serializes to a table"),
    }
}

fn parse_like(current: &toml::Value, raw: &str) -> Option<toml::Value> {
    use toml::Value as V;
    Some(match current {
        V::Integer(_) => V::Integer(raw.trim().parse().ok()?),
        V::Float(_) => V::Float(raw.trim().parse().ok()?),
        V::Boolean(_) => V::Boolean(raw.trim().parse().ok()?),
        V::String(_) => V::String(raw.to_string()),
        V::Array(items) => {
            if raw.trim().is_empty() {
                return Some(V::Array(vec![]));
            }
            let proto = items.first().cloned().unwrap_or(V::String(String::new()));
            V::Array(
                raw.split(',')
                    .map(|part| parse_like(&proto, part.trim()))
                    .collect::<Option<Vec<_>>>()?,
            )
        }
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn set_parses_by_key_type() {
        let mut cfg = RunConfig::default();
        cfg.set("iterations", "17").unwrap();
        cfg.set("lr", "0.003").unwrap();
        cfg.set("deterministic", "true").unwrap();
        cfg.set("m_sweep", "1, 2,3").unwrap();
        cfg.set("sweep_inputs", "a.hlhy,b.hlhy").unwrap();
        cfg.set("bimodal_joints", "").unwrap();
        cfg.set("checkpoint", "x/y.hlck").unwrap();
        assert_eq!(cfg.iterations, 17);
        assert_eq!(cfg.lr, 0.003);
        assert!(cfg.deterministic);
        assert_eq!(cfg.m_sweep, vec![1, 2, 3]);
        assert_eq!(cfg.sweep_inputs, vec!["a.hlhy", "b.hlhy"]);
        assert!(cfg.bimodal_joints.is_empty());
        assert_eq!(cfg.checkpoint, PathBuf::from("x/y.hlck"));
    }

    #[test]
    fn set_rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("iteratons", "1").is_err());
        assert!(cfg.set("iterations", "-1").is_err());
        assert!(cfg.set("lr", "fast").is_err());
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert_eq!(RunConfig::from_toml("seed = 3\n").unwrap().seed, 3);
    }

    #[test]
    fn every_key_is_settable_from_its_own_text() {
        let cfg = RunConfig::default();
        let t = table(&cfg);
        for key in RunConfig::keys() {
            let text = match &t[&key] {
                toml::Value::String(s) => s.clone(),
                toml::Value::Array(a) => a
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            let mut c = cfg.clone();
            c.set(&key, &text).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }
}
