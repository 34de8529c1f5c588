//! End-to-end federation driver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{LossConfig, MemoryBank};
use crate::data::{derive_seed, generate_cohort, AugmentConfig, DataConfig};
use crate::encoder::{OnlineNetwork, ParamVector, TargetNetwork};
use crate::error::{Error, Result};
use crate::protocol::ledger::CommLedger;
use crate::protocol::rounds::{fcl_round, fclopt_round, warm_bank, RoundContext};
use crate::protocol::{
    ClientState, ModelArch, ProtocolConfig, RoundResult, ServerState, Variant,
};

/// Everything a finished run produces.
#[derive(Debug)]
pub struct FederationOutcome {
    pub rounds: Vec<RoundResult>,
    pub ledger: CommLedger,
    pub final_online: OnlineNetwork,
    pub final_target: Option<TargetNetwork>,
    /// Snapshot of the encoder before any training; the paired baseline
    /// for probe comparisons.
    pub initial_encoder: ParamVector,
    pub arch: ModelArch,
}

/// Run one federation to completion. The outcome is a pure function of
/// the configs and seed, whether or not clients train in parallel.
pub fn run_federation(
    protocol: &ProtocolConfig,
    data: &DataConfig,
    loss: &LossConfig,
    augment_cfg: &AugmentConfig,
    seed: u64,
) -> Result<FederationOutcome> {
    protocol.validate()?;
    data.validate()?;
    loss.validate()?;
    augment_cfg.validate()?;
    if protocol.variant.uses_banks() && data.volumes_per_client < 2 {
        return Err(Error::InvalidConfig {
            key: "data.volumes_per_client".into(),
            message: "bank variants draw partition pairs and need at least 2 volumes per client".into(),
        });
    }

    let cohort = generate_cohort(data)?;
    let arch = ModelArch::from_configs(data, protocol);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
    let enc0 = arch.encoder.init_params(&mut init_rng);
    let pred0 = arch.predictor.init_params(&mut init_rng);
    let online0 = OnlineNetwork { encoder: enc0.clone(), predictor: pred0 };
    let target0 = TargetNetwork { encoder: enc0.clone() };

    // The target starts as a copy of the online encoder everywhere, so
    // the first-round online/target distance is exactly zero.
    let global_target =
        if protocol.variant == Variant::FedByol { None } else { Some(target0.clone()) };
    let mut server = ServerState::new(online0.clone(), global_target);
    let mut clients: Vec<ClientState> = cohort
        .into_iter()
        .enumerate()
        .map(|(id, volumes)| ClientState {
            id,
            online: online0.clone(),
            target: target0.clone(),
            momentum_encoder: enc0.clone(),
            local_bank: MemoryBank::new(loss.bank_size),
            volumes,
            sample_count: data.samples_per_client(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "client", id as u64)),
        })
        .collect();

    if protocol.variant.uses_banks() {
        for client in &mut clients {
            warm_bank(client, &arch, augment_cfg, data.partitions)?;
        }
    }

    let mut server_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "server", 0));
    let mut ledger = CommLedger::new();
    let mut rounds_out = Vec::with_capacity(protocol.rounds);
    for round in 1..=protocol.rounds {
        let participants = pick_participants(clients.len(), protocol.participation, &mut server_rng);
        let ctx = RoundContext {
            arch: &arch,
            protocol,
            loss,
            augment: augment_cfg,
            partitions: data.partitions,
            round,
            learning_rate: protocol.learning_rate_at(round),
            participants: &participants,
        };
        let before = ledger.total();
        let mut result = if protocol.variant.uses_banks() {
            fcl_round(&mut clients, &mut server, &ctx, &mut ledger)?
        } else {
            fclopt_round(&mut clients, &mut server, &ctx, &mut ledger)?
        };
        result.bytes_this_round = ledger.total() - before;
        server.round = round;
        rounds_out.push(result);
    }

    Ok(FederationOutcome {
        rounds: rounds_out,
        ledger,
        final_online: server.global_online,
        final_target: server.global_target,
        initial_encoder: enc0,
        arch,
    })
}

fn pick_participants(n_clients: usize, participation: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if participation >= 1.0 {
        return (0..n_clients).collect();
    }
    let k = ((participation * n_clients as f64).ceil() as usize).clamp(1, n_clients);
    let mut ids: Vec<usize> = rand::seq::index::sample(rng, n_clients, k).into_iter().collect();
    ids.sort_unstable();
    ids
}
