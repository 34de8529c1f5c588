//! Federated protocol state machines and the experiment driver.

mod driver;
mod ledger;
mod probe;
mod rounds;
mod sync;

pub use driver::{run_federation, FederationOutcome};
pub use ledger::{
    feature_exchange_round_bytes, CommLedger, Component, Direction, LedgerEntry, SCALAR_WIRE_BYTES,
};
pub use probe::{extract_probe_dataset, linear_probe, train_probe, ProbeDataset};
pub use rounds::{fcl_round, fclopt_client_train, fclopt_round, RoundContext};
pub use sync::{
    aggregate_params, calibrate_alpha, client_distance, mean, predict_distance, ptnu,
    ptnu_expected_iterations, PtnuOutcome,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::MemoryBank;
use crate::data::{DataConfig, Volume};
use crate::encoder::{MlpSpec, OnlineNetwork, ParamVector, TargetNetwork};
use crate::error::{Error, Result};

/// Protocol variant selecting what is trained and what is synchronized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "fedmoco")]
    FedMoCo,
    #[serde(rename = "fedbyol")]
    FedByol,
    #[serde(rename = "fcl")]
    Fcl,
    #[serde(rename = "fclopt")]
    FclOpt,
    #[serde(rename = "fclopt-ptnu")]
    FclOptPtnu,
    #[serde(rename = "fclopt-ptnu-dp")]
    FclOptPtnuDp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FedMoCo,
        Variant::FedByol,
        Variant::Fcl,
        Variant::FclOpt,
        Variant::FclOptPtnu,
        Variant::FclOptPtnuDp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FedMoCo => "fedmoco",
            Variant::FedByol => "fedbyol",
            Variant::Fcl => "fcl",
            Variant::FclOpt => "fclopt",
            Variant::FclOptPtnu => "fclopt-ptnu",
            Variant::FclOptPtnuDp => "fclopt-ptnu-dp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::InvalidConfig {
            key: "protocol.variant".into(),
            message: format!(
                "unknown variant `{s}`; expected one of {}",
                Variant::ALL.map(|v| v.name()).join(", ")
            ),
        })
    }

    /// Momentum-contrast family: memory banks, no predictor.
    pub fn uses_banks(self) -> bool {
        matches!(self, Variant::FedMoCo | Variant::Fcl)
    }

    /// Only the full feature-exchange variant ships bank contents.
    pub fn exchanges_features(self) -> bool {
        self == Variant::Fcl
    }

    pub fn default_learning_rate(self) -> f64 {
        if self.uses_banks() {
            0.05
        } else {
            0.5
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Training-loop and synchronization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub variant: Variant,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Slices per step for the negative-free family.
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    /// Partition pairs drawn per step for the bank family.
    pub pairs_per_partition: usize,
    /// Unset means the variant's default (0.05 bank family, 0.5 otherwise),
    /// decayed over rounds on a half-cosine.
    pub learning_rate: Option<f64>,
    /// Momentum of the per-step target/momentum-encoder update.
    pub ema_momentum: f64,
    /// Momentum of the iterative target prediction.
    pub distance_momentum: f64,
    /// Rounds between target uploads under distance prediction.
    pub calibration_period: usize,
    /// Fraction of clients participating each round.
    pub participation: f64,
    /// Run client training across threads; results are identical either way.
    pub parallel_clients: bool,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Fcl,
            rounds: 30,
            local_epochs: 1,
            batch_size: 8,
            steps_per_epoch: 4,
            pairs_per_partition: 1,
            learning_rate: None,
            ema_momentum: 0.99,
            distance_momentum: 0.995,
            calibration_period: 10,
            participation: 1.0,
            parallel_clients: false,
            hidden_dim: 64,
            feature_dim: 32,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, message: String| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig { key: format!("protocol.{key}"), message })
            }
        };
        check(self.rounds >= 1, "rounds", "must be at least 1".into())?;
        check(self.local_epochs >= 1, "local_epochs", "must be at least 1".into())?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1".into())?;
        check(self.steps_per_epoch >= 1, "steps_per_epoch", "must be at least 1".into())?;
        check(self.pairs_per_partition >= 1, "pairs_per_partition", "must be at least 1".into())?;
        if let Some(lr) = self.learning_rate {
            check(lr > 0.0 && lr.is_finite(), "learning_rate", format!("must be positive, got {lr}"))?;
        }
        check(
            self.ema_momentum > 0.0 && self.ema_momentum < 1.0,
            "ema_momentum",
            format!("must be in (0,1), got {}", self.ema_momentum),
        )?;
        check(
            self.distance_momentum > 0.0 && self.distance_momentum < 1.0,
            "distance_momentum",
            format!("must be in (0,1), got {}", self.distance_momentum),
        )?;
        check(self.calibration_period >= 1, "calibration_period", "must be at least 1".into())?;
        check(
            self.participation > 0.0 && self.participation <= 1.0,
            "participation",
            format!("must be in (0,1], got {}", self.participation),
        )?;
        check(self.hidden_dim >= 1, "hidden_dim", "must be at least 1".into())?;
        check(self.feature_dim >= 1, "feature_dim", "must be at least 1".into())?;
        Ok(())
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.variant.default_learning_rate())
    }

    /// Half-cosine decay from the base rate toward zero across the run.
    pub fn learning_rate_at(&self, round: usize) -> f64 {
        let base = self.effective_learning_rate();
        let progress = (round - 1) as f64 / self.rounds as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Network shapes shared by every model in a federation.
#[derive(Debug, Clone)]
pub struct ModelArch {
    pub encoder: MlpSpec,
    pub predictor: MlpSpec,
}

impl ModelArch {
    pub fn new(input_dim: usize, hidden_dim: usize, feature_dim: usize) -> Self {
        Self {
            encoder: MlpSpec::encoder(input_dim, hidden_dim, feature_dim),
            predictor: MlpSpec::predictor(feature_dim),
        }
    }

    pub fn from_configs(data: &DataConfig, protocol: &ProtocolConfig) -> Self {
        Self::new(data.height * data.width, protocol.hidden_dim, protocol.feature_dim)
    }
}

/// One participant: its models, bank, data shard, and private RNG stream.
#[derive(Debug)]
pub struct ClientState {
    pub id: usize,
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    /// Slowly-evolving encoder used by the bank family.
    pub momentum_encoder: ParamVector,
    pub local_bank: MemoryBank,
    pub volumes: Vec<Volume>,
    /// Sample count weighting this client in aggregation.
    pub sample_count: usize,
    pub rng: ChaCha8Rng,
}

/// Coordinator state across rounds.
#[derive(Debug)]
pub struct ServerState {
    pub global_online: OnlineNetwork,
    pub global_target: Option<TargetNetwork>,
    /// Calibration factor applied to predicted distances.
    pub alpha: f64,
    pub round: usize,
    /// Exact online/target distance from the latest aggregation.
    pub exact_distance: Option<f64>,
    /// Exact distance measured at the last calibration upload, consumed by
    /// the next round's prediction step.
    pub pending_calibration: Option<f64>,
}

impl ServerState {
    pub fn new(global_online: OnlineNetwork, global_target: Option<TargetNetwork>) -> Self {
        Self {
            global_online,
            global_target,
            alpha: 1.0,
            round: 0,
            exact_distance: None,
            pending_calibration: None,
        }
    }
}

/// Per-round record written to the results CSV.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: usize,
    pub mean_loss: f64,
    pub bytes_this_round: u64,
    pub d_exact: Option<f64>,
    pub d_pred: Option<f64>,
    pub alpha: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("fedavg").is_err());
    }

    #[test]
    fn default_config_is_valid_and_matches_training_details() {
        let cfg = ProtocolConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.ema_momentum, 0.99);
        assert_eq!(cfg.distance_momentum, 0.995);
        assert_eq!(cfg.calibration_period, 10);
        assert_eq!(cfg.local_epochs, 1);
        assert_eq!(cfg.participation, 1.0);
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let mut cfg = ProtocolConfig::default();
        cfg.distance_momentum = 1.2;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("distance_momentum") && msg.contains("(0,1)"), "got: {msg}");
        cfg = ProtocolConfig { ema_momentum: 0.0, ..ProtocolConfig::default() };
        assert!(cfg.validate().is_err());
        cfg = ProtocolConfig { participation: 0.0, ..ProtocolConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn learning_rate_defaults_by_family() {
        let mut cfg = ProtocolConfig { variant: Variant::Fcl, ..ProtocolConfig::default() };
        assert_eq!(cfg.effective_learning_rate(), 0.05);
        cfg.variant = Variant::FclOptPtnu;
        assert_eq!(cfg.effective_learning_rate(), 0.5);
        cfg.learning_rate = Some(0.2);
        assert_eq!(cfg.effective_learning_rate(), 0.2);
    }

    #[test]
    fn cosine_schedule_decays() {
        let cfg = ProtocolConfig { rounds: 10, learning_rate: Some(1.0), ..ProtocolConfig::default() };
        assert_eq!(cfg.learning_rate_at(1), 1.0);
        let mid = cfg.learning_rate_at(6);
        assert!(mid < 1.0 && mid > 0.0);
        assert!(cfg.learning_rate_at(10) < mid);
    }
}
