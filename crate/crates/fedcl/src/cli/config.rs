//! Experiment configuration: flat dotted key-value files plus overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::LossConfig;
use crate::data::{AugmentConfig, DataConfig};
use crate::error::{Error, Result};
use crate::protocol::{ProtocolConfig, Variant};

/// Full description of one experiment. Every field has a default, so an
/// empty config file is valid and yields the standard desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: "runs/out".into(),
            data: DataConfig::default(),
            protocol: ProtocolConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output_dir.is_empty() {
            return Err(Error::InvalidConfig {
                key: "output_dir".into(),
                message: "must not be empty".into(),
            });
        }
        self.data.validate()?;
        self.protocol.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Command-line values that take precedence over file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<String>,
    pub clients: Option<usize>,
    pub local_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub participation: Option<f64>,
    pub parallel: Option<bool>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.variant {
            cfg.protocol.variant = v;
        }
        if let Some(r) = self.rounds {
            cfg.protocol.rounds = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(ref dir) = self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(c) = self.clients {
            cfg.data.n_clients = c;
        }
        if let Some(e) = self.local_epochs {
            cfg.protocol.local_epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            cfg.protocol.learning_rate = Some(lr);
        }
        if let Some(p) = self.participation {
            cfg.protocol.participation = p;
        }
        if let Some(p) = self.parallel {
            cfg.protocol.parallel_clients = p;
        }
    }
}

/// Parse a config from text. Unknown keys and invalid values are
/// rejected with the offending key path in the message.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig {
        key: "config".into(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file, or the defaults when no path is given.
pub fn parse_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::InvalidConfig {
                key: "config".into(),
                message: format!("cannot read {}: {e}", p.display()),
            })?;
            parse_config_str(&text)
        }
    }
}

fn toml_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Render a config as flat dotted key-value text; `parse(render(cfg))`
/// reproduces the config exactly.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    line("seed", cfg.seed.to_string());
    line("output_dir", toml_str(&cfg.output_dir));

    line("data.n_clients", cfg.data.n_clients.to_string());
    line("data.volumes_per_client", cfg.data.volumes_per_client.to_string());
    line("data.depth", cfg.data.depth.to_string());
    line("data.height", cfg.data.height.to_string());
    line("data.width", cfg.data.width.to_string());
    line("data.partitions", cfg.data.partitions.to_string());
    line("data.seed", cfg.data.seed.to_string());

    line("protocol.variant", toml_str(cfg.protocol.variant.name()));
    line("protocol.rounds", cfg.protocol.rounds.to_string());
    line("protocol.local_epochs", cfg.protocol.local_epochs.to_string());
    line("protocol.batch_size", cfg.protocol.batch_size.to_string());
    line("protocol.steps_per_epoch", cfg.protocol.steps_per_epoch.to_string());
    line("protocol.pairs_per_partition", cfg.protocol.pairs_per_partition.to_string());
    if let Some(lr) = cfg.protocol.learning_rate {
        line("protocol.learning_rate", toml_f64(lr));
    }
    line("protocol.ema_momentum", toml_f64(cfg.protocol.ema_momentum));
    line("protocol.distance_momentum", toml_f64(cfg.protocol.distance_momentum));
    line("protocol.calibration_period", cfg.protocol.calibration_period.to_string());
    line("protocol.participation", toml_f64(cfg.protocol.participation));
    line("protocol.parallel_clients", cfg.protocol.parallel_clients.to_string());
    line("protocol.hidden_dim", cfg.protocol.hidden_dim.to_string());
    line("protocol.feature_dim", cfg.protocol.feature_dim.to_string());

    line("loss.temperature", toml_f64(cfg.loss.temperature));
    line("loss.bank_size", cfg.loss.bank_size.to_string());

    line("augment.crop_min_scale", toml_f64(cfg.augment.crop_min_scale));
    line("augment.crop_max_scale", toml_f64(cfg.augment.crop_max_scale));
    line("augment.flip_prob", toml_f64(cfg.augment.flip_prob));
    line("augment.noise_sigma", toml_f64(cfg.augment.noise_sigma));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_applies_all_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.protocol.ema_momentum, 0.99);
        assert_eq!(cfg.protocol.distance_momentum, 0.995);
        assert_eq!(cfg.loss.temperature, 0.1);
        assert_eq!(cfg.data.partitions, 4);
        assert_eq!(cfg.protocol.calibration_period, 10);
        assert_eq!(cfg.protocol.local_epochs, 1);
        assert_eq!(cfg.data.n_clients, 10);
    }

    #[test]
    fn out_of_range_momentum_is_rejected_with_key_path() {
        let err = parse_config_str("protocol.distance_momentum = 1.2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("distance_momentum"), "missing key path: {msg}");
        assert!(msg.contains("(0,1)"), "missing range: {msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config_str("protocol.warp_speed = 9\n").unwrap_err();
        assert!(err.to_string().contains("warp_speed"), "got: {err}");
    }

    #[test]
    fn render_parse_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 123;
        cfg.protocol.variant = Variant::FclOptPtnuDp;
        cfg.protocol.learning_rate = Some(0.25);
        cfg.protocol.parallel_clients = true;
        cfg.data.depth = 12;
        cfg.augment.noise_sigma = 0.0;
        let text = render_config(&cfg);
        let back = parse_config_str(&text).unwrap();
        assert_eq!(back, cfg);
        // Also with the optional rate unset.
        cfg.protocol.learning_rate = None;
        let back = parse_config_str(&render_config(&cfg)).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = parse_config_str("protocol.rounds = 50\n").unwrap();
        let overrides = Overrides {
            variant: Some(Variant::FedByol),
            rounds: Some(5),
            seed: Some(99),
            ..Overrides::default()
        };
        overrides.apply(&mut cfg);
        assert_eq!(cfg.protocol.rounds, 5);
        assert_eq!(cfg.protocol.variant, Variant::FedByol);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn partial_sections_fill_from_defaults() {
        let cfg = parse_config_str("data.n_clients = 3\nloss.bank_size = 16\n").unwrap();
        assert_eq!(cfg.data.n_clients, 3);
        assert_eq!(cfg.data.depth, DataConfig::default().depth);
        assert_eq!(cfg.loss.bank_size, 16);
        assert_eq!(cfg.loss.temperature, 0.1);
    }
}
