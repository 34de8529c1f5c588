//! One-round orchestration for both protocol families.

use rayon::prelude::*;

use crate::contrastive::{
    byol_term, contrastive_term, decode_bank, encode_bank, gsm_term, sample_negatives, LossConfig,
};
use crate::data::{augment, sample_partition_pair, sample_slice, AugmentConfig, SliceSample};
use crate::encoder::{
    ema_update, flatten_input, forward_embed, param_l1_distance, FeatureVector, OnlineNetwork,
    ParamVector, TargetNetwork,
};
use crate::error::Result;
use crate::numerics::{GradTape, Tensor};
use crate::protocol::ledger::{CommLedger, Component, Direction, SCALAR_WIRE_BYTES};
use crate::protocol::sync::{calibrate_alpha, client_distance, mean, predict_distance, ptnu};
use crate::protocol::{ClientState, ModelArch, ProtocolConfig, RoundResult, ServerState, Variant};

/// SGD momentum used for all local training.
pub const SGD_MOMENTUM: f64 = 0.9;
/// Weight decay used for all local training.
pub const WEIGHT_DECAY: f64 = 1e-4;

/// Heavy-ball SGD with weight decay; velocity lives for one round.
struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    fn new(len: usize) -> Self {
        Self { velocity: vec![0.0; len] }
    }

    fn step(&mut self, params: &mut ParamVector, grad: &[f64], lr: f64) -> Result<()> {
        for (v, (&g, &p)) in self.velocity.iter_mut().zip(grad.iter().zip(params.values())) {
            *v = SGD_MOMENTUM * *v + g + WEIGHT_DECAY * p;
        }
        params.step(&self.velocity, lr)
    }
}

/// Everything a round needs besides the mutable client/server state.
#[derive(Debug)]
pub struct RoundContext<'a> {
    pub arch: &'a ModelArch,
    pub protocol: &'a ProtocolConfig,
    pub loss: &'a LossConfig,
    pub augment: &'a AugmentConfig,
    pub partitions: usize,
    pub round: usize,
    pub learning_rate: f64,
    /// Participating client ids, sorted ascending.
    pub participants: &'a [usize],
}

/// Run `f` over the participating clients, in parallel when configured.
/// Outputs always come back in client-id order, so downstream float
/// reductions are identical under either execution mode.
fn run_clients<T, F>(
    clients: &mut [ClientState],
    participants: &[usize],
    parallel: bool,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ClientState) -> Result<T> + Sync,
{
    if parallel {
        let results: Vec<Option<Result<T>>> = clients
            .par_iter_mut()
            .map(|c| {
                if participants.binary_search(&c.id).is_ok() {
                    Some(f(c))
                } else {
                    None
                }
            })
            .collect();
        results.into_iter().flatten().collect()
    } else {
        let mut out = Vec::with_capacity(participants.len());
        for c in clients.iter_mut() {
            if participants.binary_search(&c.id).is_ok() {
                out.push(f(c)?);
            }
        }
        Ok(out)
    }
}

/// Fresh momentum-encoder features for both halves of a partition pair.
struct PairFeatures {
    queries: Vec<QueryItem>,
    keys: Vec<FeatureVector>,
}

/// One training query: the main-encoder view plus its positives.
struct QueryItem {
    view: Tensor,
    partition: usize,
    positives: Vec<FeatureVector>,
}

fn build_pair_features(
    client: &mut ClientState,
    ctx: &RoundContext,
    s: usize,
) -> Result<PairFeatures> {
    let (a, b) = sample_partition_pair(&client.volumes, s, ctx.partitions, &mut client.rng)?;
    let mut queries = Vec::with_capacity(2);
    let mut keys = Vec::with_capacity(2);
    let encode = |sample: &SliceSample, client: &mut ClientState| -> Result<(Tensor, FeatureVector)> {
        let (main_view, momentum_view) = augment(&sample.image, ctx.augment, &mut client.rng)?;
        let key = forward_embed(
            &ctx.arch.encoder,
            &client.momentum_encoder,
            &momentum_view,
            client.id,
            sample.volume_id,
            sample.partition,
        )?;
        Ok((main_view, key))
    };
    let (view_a, key_a) = encode(&a, client)?;
    let (view_b, key_b) = encode(&b, client)?;
    let positives = vec![key_a.clone(), key_b.clone()];
    queries.push(QueryItem { view: view_a, partition: a.partition, positives: positives.clone() });
    queries.push(QueryItem { view: view_b, partition: b.partition, positives });
    keys.push(key_a);
    keys.push(key_b);
    Ok(PairFeatures { queries, keys })
}

/// One local-training pass for the bank family; returns the mean batch loss.
fn bank_client_train(
    client: &mut ClientState,
    pool: &[FeatureVector],
    ctx: &RoundContext,
) -> Result<f64> {
    let cfg = ctx.protocol;
    let enc = &ctx.arch.encoder;
    let param_count = client.online.encoder.len();
    let mut optimizer = SgdState::new(param_count);
    let mut loss_acc = 0.0;
    let mut batches = 0usize;
    for _epoch in 0..cfg.local_epochs {
        for _step in 0..cfg.steps_per_epoch {
            let mut queries = Vec::new();
            let mut fresh_keys = Vec::new();
            for s in 0..ctx.partitions {
                for _ in 0..cfg.pairs_per_partition {
                    let pair = build_pair_features(client, ctx, s)?;
                    queries.extend(pair.queries);
                    fresh_keys.extend(pair.keys);
                }
            }
            let weight = 1.0 / queries.len() as f64;
            let mut grad = vec![0.0; param_count];
            let mut batch_loss = 0.0;
            for item in &queries {
                let k_eff = ctx.loss.bank_size.min(pool.len());
                let negatives = sample_negatives(pool, k_eff, &mut client.rng)?;
                let mut tape = GradTape::new();
                let staged = enc.stage_params(&mut tape, &client.online.encoder)?;
                let x = tape.leaf(flatten_input(&item.view, enc.input_dim())?);
                let q = enc.forward_staged(&mut tape, &staged, x)?;
                let term = match cfg.variant {
                    Variant::FedMoCo => {
                        contrastive_term(&mut tape, q, &item.positives, &negatives, ctx.loss.temperature)?
                    }
                    _ => {
                        let remote: Vec<FeatureVector> = negatives
                            .iter()
                            .filter(|p| p.partition == item.partition)
                            .cloned()
                            .collect();
                        gsm_term(&mut tape, q, &item.positives, &remote, &negatives, ctx.loss.temperature)?
                    }
                };
                batch_loss += tape.value(term).scalar_value() * weight;
                let grads = tape.backward(term)?;
                for (acc, g) in grad.iter_mut().zip(staged.flat_grad(&grads)) {
                    *acc += g * weight;
                }
            }
            optimizer.step(&mut client.online.encoder, &grad, ctx.learning_rate)?;
            client.momentum_encoder =
                ema_update(&client.momentum_encoder, &client.online.encoder, cfg.ema_momentum)?;
            // Fresh keys join the bank only after the step that produced
            // them, so a feature never serves as its own negative.
            for key in fresh_keys {
                client.local_bank.push(key);
            }
            loss_acc += batch_loss;
            batches += 1;
        }
    }
    Ok(loss_acc / batches as f64)
}

/// Bank-family round: optional feature exchange, local contrast training,
/// then two-network aggregation.
pub fn fcl_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    ctx: &RoundContext,
    ledger: &mut CommLedger,
) -> Result<RoundResult> {
    let cfg = ctx.protocol;
    let round = ctx.round;
    let feature_dim = ctx.arch.encoder.output_dim();

    // Phase 1: snapshot banks; under feature exchange every participant
    // uploads its bank and downloads everyone else's.
    let mut pools: Vec<Option<Vec<FeatureVector>>> = (0..clients.len()).map(|_| None).collect();
    if cfg.variant.exchanges_features() {
        let mut encoded = Vec::with_capacity(ctx.participants.len());
        for &id in ctx.participants {
            let bytes = encode_bank(id, feature_dim, &clients[id].local_bank.to_vec())?;
            ledger.record(round, id, Direction::Up, Component::Features, bytes.len() as u64);
            encoded.push((id, bytes));
        }
        for &id in ctx.participants {
            let mut pool = clients[id].local_bank.to_vec();
            let mut down_bytes = 0u64;
            for (sender, bytes) in &encoded {
                if *sender == id {
                    continue;
                }
                down_bytes += bytes.len() as u64;
                let (_, entries) = decode_bank(bytes)?;
                pool.extend(entries);
            }
            ledger.record(round, id, Direction::Down, Component::Features, down_bytes);
            pools[id] = Some(pool);
        }
    } else {
        for &id in ctx.participants {
            pools[id] = Some(clients[id].local_bank.to_vec());
        }
    }

    // Phase 2: local training.
    let losses = run_clients(clients, ctx.participants, cfg.parallel_clients, |client| {
        let pool = pools[client.id].as_ref().expect("participant pool");
        bank_client_train(client, pool, ctx)
    })?;

    // Phase 3: upload both encoders, aggregate, download.
    let enc_bytes = server.global_online.encoder.wire_bytes();
    let mut mains = Vec::with_capacity(ctx.participants.len());
    let mut momenta = Vec::with_capacity(ctx.participants.len());
    for &id in ctx.participants {
        ledger.record(round, id, Direction::Up, Component::OnlineNet, enc_bytes);
        ledger.record(round, id, Direction::Up, Component::TargetNet, enc_bytes);
        mains.push((clients[id].online.encoder.clone(), clients[id].sample_count));
        momenta.push((clients[id].momentum_encoder.clone(), clients[id].sample_count));
    }
    let new_main = crate::protocol::sync::aggregate_params(&mains)?;
    let new_momentum = crate::protocol::sync::aggregate_params(&momenta)?;
    server.global_online.encoder = new_main.clone();
    server.global_target = Some(TargetNetwork { encoder: new_momentum.clone() });
    for &id in ctx.participants {
        ledger.record(round, id, Direction::Down, Component::OnlineNet, enc_bytes);
        ledger.record(round, id, Direction::Down, Component::TargetNet, enc_bytes);
        clients[id].online.encoder = new_main.clone();
        clients[id].momentum_encoder = new_momentum.clone();
    }

    Ok(RoundResult {
        round,
        mean_loss: mean(&losses),
        bytes_this_round: 0,
        d_exact: None,
        d_pred: None,
        alpha: None,
    })
}

/// Local training for the negative-free family: adopt the downloaded
/// online network, initialize the target, then per batch take a gradient
/// step on the regression loss and move the target by EMA.
pub fn fclopt_client_train(
    client: &mut ClientState,
    downloaded: &OnlineNetwork,
    target_init: TargetNetwork,
    ctx: &RoundContext,
) -> Result<f64> {
    let cfg = ctx.protocol;
    client.online = downloaded.clone();
    client.target = target_init;
    let enc = &ctx.arch.encoder;
    let pred = &ctx.arch.predictor;
    let enc_count = client.online.encoder.len();
    let pred_count = client.online.predictor.len();
    let mut enc_optimizer = SgdState::new(enc_count);
    let mut pred_optimizer = SgdState::new(pred_count);

    let mut loss_acc = 0.0;
    let mut batches = 0usize;
    for _epoch in 0..cfg.local_epochs {
        for _step in 0..cfg.steps_per_epoch {
            let weight = 1.0 / cfg.batch_size as f64;
            let mut grad_enc = vec![0.0; enc_count];
            let mut grad_pred = vec![0.0; pred_count];
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let sample = sample_slice(&client.volumes, ctx.partitions, &mut client.rng)?;
                let (online_view, target_view) = augment(&sample.image, ctx.augment, &mut client.rng)?;
                let z_prime = enc.forward(&client.target.encoder, &target_view)?;
                let mut tape = GradTape::new();
                let staged_enc = enc.stage_params(&mut tape, &client.online.encoder)?;
                let staged_pred = pred.stage_params(&mut tape, &client.online.predictor)?;
                let x = tape.leaf(flatten_input(&online_view, enc.input_dim())?);
                let h = enc.forward_staged(&mut tape, &staged_enc, x)?;
                let z = pred.forward_staged(&mut tape, &staged_pred, h)?;
                let term = byol_term(&mut tape, z, &z_prime)?;
                batch_loss += tape.value(term).scalar_value() * weight;
                let grads = tape.backward(term)?;
                for (acc, g) in grad_enc.iter_mut().zip(staged_enc.flat_grad(&grads)) {
                    *acc += g * weight;
                }
                for (acc, g) in grad_pred.iter_mut().zip(staged_pred.flat_grad(&grads)) {
                    *acc += g * weight;
                }
            }
            enc_optimizer.step(&mut client.online.encoder, &grad_enc, ctx.learning_rate)?;
            pred_optimizer.step(&mut client.online.predictor, &grad_pred, ctx.learning_rate)?;
            client.target.encoder =
                ema_update(&client.target.encoder, &client.online.encoder, cfg.ema_momentum)?;
            loss_acc += batch_loss;
            batches += 1;
        }
    }
    Ok(loss_acc / batches as f64)
}

/// Negative-free family round: online download, variant-specific target
/// synchronization, local training, then upload and aggregation.
pub fn fclopt_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    ctx: &RoundContext,
    ledger: &mut CommLedger,
) -> Result<RoundResult> {
    let cfg = ctx.protocol;
    let round = ctx.round;
    let enc_bytes = server.global_online.encoder.wire_bytes();
    let pred_bytes = server.global_online.predictor.wire_bytes();

    for &id in ctx.participants {
        ledger.record(round, id, Direction::Down, Component::OnlineNet, enc_bytes);
        ledger.record(round, id, Direction::Down, Component::Predictor, pred_bytes);
    }

    // Variant-specific target phase, resolved before training.
    let mut d_exact_row = None;
    let mut d_pred_row = None;
    let mut alpha_row = None;
    let mut ptnu_goal: Option<f64> = None;
    match cfg.variant {
        Variant::FedByol => {}
        Variant::FclOpt => {
            let target_bytes =
                server.global_target.as_ref().expect("fclopt keeps a global target").encoder.wire_bytes();
            for &id in ctx.participants {
                ledger.record(round, id, Direction::Down, Component::TargetNet, target_bytes);
            }
        }
        Variant::FclOptPtnu => {
            let d = server.exact_distance.unwrap_or(0.0);
            for &id in ctx.participants {
                ledger.record(round, id, Direction::Down, Component::Scalar, SCALAR_WIRE_BYTES);
            }
            ptnu_goal = Some(d);
        }
        Variant::FclOptPtnuDp => {
            let mut reports = Vec::with_capacity(ctx.participants.len());
            for &id in ctx.participants {
                let dp = client_distance(&server.global_online.encoder, &clients[id].target.encoder)?;
                ledger.record(round, id, Direction::Up, Component::Scalar, SCALAR_WIRE_BYTES);
                reports.push(dp);
            }
            let dp_mean = mean(&reports);
            if let Some(exact) = server.pending_calibration.take() {
                server.alpha = calibrate_alpha(exact, dp_mean, server.alpha)?;
                d_exact_row = Some(exact);
            }
            let predicted = if dp_mean == 0.0 { 0.0 } else { predict_distance(&reports, server.alpha)? };
            for &id in ctx.participants {
                ledger.record(round, id, Direction::Down, Component::Scalar, SCALAR_WIRE_BYTES);
            }
            d_pred_row = Some(predicted);
            alpha_row = Some(server.alpha);
            ptnu_goal = Some(predicted);
        }
        Variant::FedMoCo | Variant::Fcl => unreachable!("bank variants use fcl_round"),
    }

    // Training phase. Target initialization happens per client: kept
    // locally (FedBYOL), downloaded (FCLOpt), or predicted (PTNU/DP).
    let global_online = server.global_online.clone();
    let global_target = server.global_target.clone();
    let losses = run_clients(clients, ctx.participants, cfg.parallel_clients, |client| {
        let target_init = match cfg.variant {
            Variant::FedByol => client.target.clone(),
            Variant::FclOpt => global_target.clone().expect("fclopt keeps a global target"),
            Variant::FclOptPtnu | Variant::FclOptPtnuDp => {
                let goal = ptnu_goal.expect("ptnu goal set above");
                let out = ptnu(
                    &global_online.encoder,
                    &client.target.encoder,
                    goal,
                    cfg.distance_momentum,
                )?;
                TargetNetwork { encoder: out.target }
            }
            Variant::FedMoCo | Variant::Fcl => unreachable!("bank variants use fcl_round"),
        };
        fclopt_client_train(client, &global_online, target_init, ctx)
    })?;

    // Upload and aggregation phase.
    let upload_targets = match cfg.variant {
        Variant::FclOpt | Variant::FclOptPtnu => true,
        Variant::FclOptPtnuDp => round % cfg.calibration_period == 0,
        _ => false,
    };
    let mut onlines = Vec::with_capacity(ctx.participants.len());
    let mut predictors = Vec::with_capacity(ctx.participants.len());
    let mut targets = Vec::with_capacity(ctx.participants.len());
    for &id in ctx.participants {
        ledger.record(round, id, Direction::Up, Component::OnlineNet, enc_bytes);
        ledger.record(round, id, Direction::Up, Component::Predictor, pred_bytes);
        if upload_targets {
            ledger.record(round, id, Direction::Up, Component::TargetNet, enc_bytes);
            targets.push((clients[id].target.encoder.clone(), clients[id].sample_count));
        }
        onlines.push((clients[id].online.encoder.clone(), clients[id].sample_count));
        predictors.push((clients[id].online.predictor.clone(), clients[id].sample_count));
    }
    server.global_online = OnlineNetwork {
        encoder: crate::protocol::sync::aggregate_params(&onlines)?,
        predictor: crate::protocol::sync::aggregate_params(&predictors)?,
    };
    if upload_targets {
        let aggregated = crate::protocol::sync::aggregate_params(&targets)?;
        let exact = param_l1_distance(&server.global_online.encoder, &aggregated)?;
        server.global_target = Some(TargetNetwork { encoder: aggregated });
        match cfg.variant {
            Variant::FclOptPtnuDp => server.pending_calibration = Some(exact),
            _ => {
                server.exact_distance = Some(exact);
                d_exact_row = Some(exact);
            }
        }
    }

    Ok(RoundResult {
        round,
        mean_loss: mean(&losses),
        bytes_this_round: 0,
        d_exact: d_exact_row,
        d_pred: d_pred_row,
        alpha: alpha_row,
    })
}

/// Fill a client's bank with momentum features of its own augmented
/// slices before the first exchange, so negatives exist from round one.
pub(crate) fn warm_bank(
    client: &mut ClientState,
    arch: &ModelArch,
    augment_cfg: &AugmentConfig,
    partitions: usize,
) -> Result<()> {
    let capacity = client.local_bank.capacity();
    while client.local_bank.len() < capacity {
        let sample = sample_slice(&client.volumes, partitions, &mut client.rng)?;
        let (view, _) = augment(&sample.image, augment_cfg, &mut client.rng)?;
        let key = forward_embed(
            &arch.encoder,
            &client.momentum_encoder,
            &view,
            client.id,
            sample.volume_id,
            sample.partition,
        )?;
        client.local_bank.push(key);
    }
    Ok(())
}
