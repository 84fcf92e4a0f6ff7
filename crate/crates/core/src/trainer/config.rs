use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fusion::{AttFcConfig, TfmConfig, TpConfig};
use crate::nn::AttentionOrder;
use crate::optim::{OptimConfig, Schedule, OPTIMIZERS};
use crate::registry::{Flavor, HeadSpec};
use crate::vision::BackboneConfig;

/// Every knob of a proxy-training run. Flat so that each key maps to one
/// command-line flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(alias = "model_flavor")]
    pub flavor: Flavor,
    pub lambda: f64,
    pub steps: u64,
    /// Images per step; each brings its masked triplets along.
    pub batch_size: usize,
    /// Triplets drawn per image and step; zero keeps all of them.
    pub triplets_per_image: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: String,
    pub schedule: Schedule,
    /// Step count the schedule decays over; zero means `steps`.
    pub lr_horizon: u64,
    pub warmup_steps: u64,
    /// Apply the frozen-backbone warm-up to the transformer head too.
    pub warmup_tfm: bool,
    pub augment: bool,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,

    pub image_size: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub heads: usize,
    pub d_z: usize,
    /// Hidden width of the single `fc` hidden layer; zero removes it.
    pub fc_hidden: usize,
    pub fc_layers: usize,
    pub tfm_layers: usize,
    pub tfm_head_dim: usize,
    pub tfm_positional: bool,
    pub attention_order: AttentionOrder,
    pub dropout: f64,
    pub tp_trunk_layers: usize,
    pub tp_trunk_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        TrainConfig {
            flavor: Flavor::IcmlmAttfc,
            lambda: 1.0,
            steps: 20_000,
            batch_size: 64,
            triplets_per_image: 0,
            learning_rate: 0.02,
            weight_decay: 1e-4,
            momentum: 0.9,
            optimizer: "sgd_momentum".into(),
            schedule: Schedule::Cosine,
            lr_horizon: 0,
            warmup_steps: 1_000,
            warmup_tfm: true,
            augment: false,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
            image_size: bb.image_size,
            widths: bb.widths,
            strides: bb.strides,
            heads: 12,
            d_z: 64,
            fc_hidden: 256,
            fc_layers: 1,
            tfm_layers: 1,
            tfm_head_dim: 0,
            tfm_positional: true,
            attention_order: AttentionOrder::Conventional,
            dropout: 0.1,
            tp_trunk_layers: 2,
            tp_trunk_width: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps ({}) must be below steps ({})", self.warmup_steps, self.steps));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.weight_decay < 0.0 || self.lambda < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return bad("weight_decay and lambda must be non-negative, dropout in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)".into());
        }
        if !OPTIMIZERS.contains(&self.optimizer.as_str()) {
            return bad(format!("unknown optimizer `{}` (available: {})", self.optimizer, OPTIMIZERS.join(", ")));
        }
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(self.heads >= 1 && self.d_z >= 1, "heads and d_z must be positive");
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig { widths: self.widths.clone(), strides: self.strides.clone(), image_size: self.image_size }
    }

    pub fn horizon(&self) -> u64 {
        if self.lr_horizon > 0 { self.lr_horizon } else { self.steps }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig { weight_decay: self.weight_decay, momentum: self.momentum, ..Default::default() }
    }

    pub fn head_spec(&self, d_w: usize, k: usize) -> HeadSpec {
        let bb = self.backbone();
        let grid = bb.grid();
        HeadSpec {
            d_x: bb.d_x(),
            d_w,
            grid_h: grid,
            grid_w: grid,
            k,
            tp: TpConfig { trunk_layers: self.tp_trunk_layers, trunk_width: self.tp_trunk_width },
            att: AttFcConfig {
                heads: self.heads,
                d_z: self.d_z,
                fc_hidden: if self.fc_hidden == 0 { Vec::new() } else { vec![self.fc_hidden; self.fc_layers] },
            },
            tfm: TfmConfig {
                layers: self.tfm_layers,
                heads: self.heads,
                head_dim: self.tfm_head_dim,
                positional: self.tfm_positional,
                attention_order: self.attention_order,
                dropout: self.dropout,
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Names of every key, in declaration order.
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(TrainConfig::default()).expect("config serializes") {
            toml::Value::Table(t) => t.keys().cloned().collect(),
            _ => unreachable!(),
        }
    }

    /// Sets one key from its textual form; lists are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = match toml::Value::try_from(&*self).expect("config serializes") {
            toml::Value::Table(t) => t,
            _ => unreachable!(),
        };
        let current = table.get(key).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let parsed = parse_like(current, value).ok_or_else(|| Error::Config(format!("invalid value `{value}` for `{key}`")))?;
        table.insert(key.to_string(), parsed);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid value `{value}` for `{key}`: {}", e.message().trim())))?;
        Ok(())
    }
}

fn parse_like(current: &toml::Value, text: &str) -> Option<toml::Value> {
    use toml::Value;
    Some(match current {
        Value::Integer(_) => Value::Integer(text.parse().ok()?),
        Value::Float(_) => Value::Float(text.parse().ok()?),
        Value::Boolean(_) => Value::Boolean(text.parse().ok()?),
        Value::Array(_) => Value::Array(
            text.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<i64>().ok().map(Value::Integer))
                .collect::<Option<Vec<_>>>()?,
        ),
        _ => Value::String(text.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_overrides() {
        let mut c = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.set("lambda", "0.1").unwrap();
        c.set("flavor", "icmlm_tfm").unwrap();
        c.set("widths", "8,16,32,32").unwrap();
        c.set("tfm_positional", "false").unwrap();
        c.set("schedule", "step").unwrap();
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.flavor, Flavor::IcmlmTfm);
        assert_eq!(c.widths, [8, 16, 32, 32]);
        assert!(!c.tfm_positional);
        assert_eq!(c.schedule, Schedule::Step);
        assert!(c.set("flavor", "bogus").is_err());
        assert!(c.set("steps", "many").is_err());
        assert!(c.set("nope", "1").is_err());
        assert!(TrainConfig::keys().contains(&"warmup_steps".to_string()));
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = TrainConfig::from_toml_str("steps = 10\nwarmup_steps = 2\n").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);
        assert!(TrainConfig::from_toml_str("stepz = 1").is_err());
    }

    #[test]
    fn validation() {
        let c = TrainConfig { steps: 10, warmup_steps: 10, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
