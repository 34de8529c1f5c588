//! Memory banks, feature exchange, and the contrastive losses.
//!
//! Loss terms are built on the gradient tape from dot products of the
//! query against constant positives/negatives, so gradients flow to the
//! query (and through it to the encoder) but never into bank features.

use std::collections::VecDeque;

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, ValueId, NORM_EPSILON};

/// Temperature and bank/sample size for the contrastive losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Memory bank capacity; also the negative sample size.
    pub bank_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1, bank_size: 64 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig {
                key: "loss.temperature".into(),
                message: format!("must be positive, got {}", self.temperature),
            });
        }
        if self.bank_size == 0 {
            return Err(Error::InvalidConfig {
                key: "loss.bank_size".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of features. Once full, a push evicts exactly the
/// oldest entry.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<FeatureVector>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn from_entries(capacity: usize, entries: Vec<FeatureVector>) -> Self {
        let mut bank = Self::new(capacity);
        for e in entries {
            bank.push(e);
        }
        bank
    }

    pub fn push(&mut self, feat: FeatureVector) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(feat);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries in insertion order, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &FeatureVector> {
        self.entries.iter()
    }

    pub fn to_vec(&self) -> Vec<FeatureVector> {
        self.entries.iter().cloned().collect()
    }
}

/// Concatenate the local bank with all remote banks into one pool.
pub fn aggregate_banks(local: &MemoryBank, remote: &[MemoryBank]) -> Vec<FeatureVector> {
    let mut pool = local.to_vec();
    for bank in remote {
        pool.extend(bank.entries().cloned());
    }
    pool
}

/// Draw `k` distinct entries uniformly without replacement.
pub fn sample_negatives(pool: &[FeatureVector], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<FeatureVector>> {
    if pool.len() < k {
        return Err(Error::PoolTooSmall { pool: pool.len(), requested: k });
    }
    let picked = index_sample(rng, pool.len(), k);
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Entries of the sampled pool sharing the query's partition tag.
pub fn remote_positives(q: &FeatureVector, sampled: &[FeatureVector]) -> Vec<FeatureVector> {
    sampled.iter().filter(|p| p.partition == q.partition).cloned().collect()
}

/// Softmax-contrast term on the tape:
/// `-(1/|P|) sum_p log( exp(q.p/t) / (exp(q.p/t) + sum_n exp(q.n/t)) )`.
///
/// Positives and negatives enter as constants; gradients reach only `q`.
/// An empty negative set makes the term exactly zero.
pub fn contrastive_term(
    tape: &mut GradTape,
    q: ValueId,
    positives: &[FeatureVector],
    negatives: &[FeatureVector],
    temperature: f64,
) -> Result<ValueId> {
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig {
            key: "loss.temperature".into(),
            message: format!("must be positive, got {temperature}"),
        });
    }
    let inv_t = 1.0 / temperature;

    let logit = |tape: &mut GradTape, feat: &FeatureVector| -> Result<ValueId> {
        let leaf = tape.leaf(Tensor::from_vec(feat.embedding().to_vec())?);
        let d = tape.dot(q, leaf)?;
        tape.scale(d, inv_t)
    };
    let pos_logits: Vec<ValueId> =
        positives.iter().map(|p| logit(tape, p)).collect::<Result<_>>()?;
    let neg_logits: Vec<ValueId> =
        negatives.iter().map(|n| logit(tape, n)).collect::<Result<_>>()?;

    // Constant shift for a stable log-sum-exp; the value is unchanged and
    // the shift is not differentiated.
    let shift = pos_logits
        .iter()
        .chain(&neg_logits)
        .map(|&id| tape.value(id).scalar_value())
        .fold(f64::NEG_INFINITY, f64::max);

    let mut neg_sum: Option<ValueId> = None;
    for &l in &neg_logits {
        let shifted = tape.add_const(l, -shift)?;
        let e = tape.exp(shifted)?;
        neg_sum = Some(match neg_sum {
            None => e,
            Some(acc) => tape.add(acc, e)?,
        });
    }

    let mut total: Option<ValueId> = None;
    for &l in &pos_logits {
        let shifted = tape.add_const(l, -shift)?;
        let e = tape.exp(shifted)?;
        let denom = match neg_sum {
            Some(ns) => tape.add(e, ns)?,
            None => e,
        };
        let ln_denom = tape.ln(denom)?;
        let with_shift = tape.add_const(ln_denom, shift)?;
        let term = tape.sub(with_shift, l)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    tape.scale(total.expect("at least one positive"), 1.0 / positives.len() as f64)
}

/// Matching term plus local term over the same sampled negatives:
/// remote positives are attracted exactly like local ones. An empty
/// remote set drops the remote term.
pub fn gsm_term(
    tape: &mut GradTape,
    q: ValueId,
    positives: &[FeatureVector],
    remote: &[FeatureVector],
    negatives: &[FeatureVector],
    temperature: f64,
) -> Result<ValueId> {
    let local = contrastive_term(tape, q, positives, negatives, temperature)?;
    if remote.is_empty() {
        return Ok(local);
    }
    let remote_term = contrastive_term(tape, q, remote, negatives, temperature)?;
    tape.add(remote_term, local)
}

/// Negative-free regression term on the tape:
/// `2 - 2 * <z, z'> / (|z| |z'|)`, with `z'` a constant target.
pub fn byol_term(tape: &mut GradTape, z: ValueId, z_prime: &Tensor) -> Result<ValueId> {
    let zp_norm = z_prime.l2_norm();
    if zp_norm <= NORM_EPSILON {
        return Err(Error::DegenerateVector { norm: zp_norm });
    }
    let z_norm = tape.value(z).l2_norm();
    if z_norm <= NORM_EPSILON {
        return Err(Error::DegenerateVector { norm: z_norm });
    }
    let zp = tape.leaf(z_prime.clone());
    let d = tape.dot(z, zp)?;
    let sq = tape.mul(z, z)?;
    let sumsq = tape.sum(sq)?;
    let norm = tape.sqrt(sumsq)?;
    let inv_norm = tape.recip(norm)?;
    let cos_scaled = tape.mul(d, inv_norm)?;
    let twice = tape.scale(cos_scaled, 2.0 / zp_norm)?;
    let neg = tape.neg(twice)?;
    tape.add_const(neg, 2.0)
}

fn grad_of_leaf(tape: &GradTape, loss: ValueId, leaf: ValueId) -> Result<(f64, Vec<f64>)> {
    let value = tape.value(loss).scalar_value();
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt(leaf).data().to_vec()))
}

/// Loss and gradient with respect to the query embedding.
pub fn local_contrastive_loss(
    q: &FeatureVector,
    positives: &[FeatureVector],
    negatives: &[FeatureVector],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = GradTape::new();
    let q_id = tape.leaf(Tensor::from_vec(q.embedding().to_vec())?);
    let loss = contrastive_term(&mut tape, q_id, positives, negatives, cfg.temperature)?;
    grad_of_leaf(&tape, loss, q_id)
}

/// Combined matching + local loss and gradient with respect to the query.
pub fn gsm_loss(
    q: &FeatureVector,
    positives: &[FeatureVector],
    remote: &[FeatureVector],
    negatives: &[FeatureVector],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = GradTape::new();
    let q_id = tape.leaf(Tensor::from_vec(q.embedding().to_vec())?);
    let loss = gsm_term(&mut tape, q_id, positives, remote, negatives, cfg.temperature)?;
    grad_of_leaf(&tape, loss, q_id)
}

/// Regression loss value and gradient with respect to `z` only; `z_prime`
/// is the stop-gradient target.
pub fn byol_loss(z: &Tensor, z_prime: &Tensor) -> Result<(f64, Vec<f64>)> {
    if z.shape() != z_prime.shape() {
        return Err(Error::ShapeMismatch {
            context: "byol_loss",
            expected: z.shape().to_vec(),
            found: z_prime.shape().to_vec(),
        });
    }
    let mut tape = GradTape::new();
    let z_id = tape.leaf(z.clone());
    let loss = byol_term(&mut tape, z_id, z_prime)?;
    grad_of_leaf(&tape, loss, z_id)
}

// ---------------------------------------------------------------------------
// Feature-exchange wire format
// ---------------------------------------------------------------------------

/// Bytes of one encoded bank: 12-byte header plus
/// `(8 + 4 * feature_dim)` per entry.
pub fn bank_wire_bytes(entries: usize, feature_dim: usize) -> u64 {
    12 + entries as u64 * (8 + 4 * feature_dim as u64)
}

/// Encode a bank: header (client_id, count, feature_dim), then per entry
/// (volume_id, partition, feature values as f32 little-endian).
pub fn encode_bank(client_id: usize, feature_dim: usize, entries: &[FeatureVector]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(bank_wire_bytes(entries.len(), feature_dim) as usize);
    out.extend_from_slice(&(client_id as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(feature_dim as u32).to_le_bytes());
    for e in entries {
        if e.dim() != feature_dim {
            return Err(Error::ShapeMismatch {
                context: "bank encoding",
                expected: vec![feature_dim],
                found: vec![e.dim()],
            });
        }
        out.extend_from_slice(&(e.volume_id as u32).to_le_bytes());
        out.extend_from_slice(&(e.partition as u32).to_le_bytes());
        for &v in e.embedding() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decode an encoded bank. Embeddings are re-normalized after the f32
/// quantization so the unit-norm invariant holds exactly.
pub fn decode_bank(bytes: &[u8]) -> Result<(usize, Vec<FeatureVector>)> {
    let header = |msg: &str| Error::Malformed { what: "feature bank", message: msg.into() };
    if bytes.len() < 12 {
        return Err(header("truncated header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let client_id = u32_at(0);
    let count = u32_at(4);
    let feature_dim = u32_at(8);
    let entry_len = 8 + 4 * feature_dim;
    if bytes.len() != 12 + count * entry_len {
        return Err(header("length does not match header"));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let base = 12 + i * entry_len;
        let volume_id = u32_at(base);
        let partition = u32_at(base + 4);
        let mut raw = Vec::with_capacity(feature_dim);
        for j in 0..feature_dim {
            let off = base + 8 + 4 * j;
            raw.push(f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64);
        }
        entries.push(FeatureVector::from_raw(&raw, client_id, volume_id, partition)?);
    }
    Ok((client_id, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};

    fn unit_feature(raw: &[f64], client: usize, volume: usize, partition: usize) -> FeatureVector {
        FeatureVector::from_raw(raw, client, volume, partition).unwrap()
    }

    fn random_feature(rng: &mut ChaCha8Rng, dim: usize, partition: usize) -> FeatureVector {
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        unit_feature(&raw, 0, 0, partition)
    }

    #[test]
    fn bank_push_basics() {
        let mut bank = MemoryBank::new(2);
        let f = |v: usize| unit_feature(&[1.0, 0.0], 0, v, 0);
        bank.push(f(0));
        assert_eq!(bank.len(), 1);
        bank.push(f(1));
        bank.push(f(2));
        assert_eq!(bank.len(), 2);
        let ids: Vec<usize> = bank.entries().map(|e| e.volume_id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn bank_matches_replay_oracle_after_overflow() {
        let k = 8;
        let mut bank = MemoryBank::new(k);
        let mut replay = Vec::new();
        for v in 0..k + 3 {
            let f = unit_feature(&[0.6, 0.8], 0, v, v % 4);
            bank.push(f.clone());
            replay.push(f);
        }
        let expected: Vec<usize> = replay[replay.len() - k..].iter().map(|e| e.volume_id).collect();
        let got: Vec<usize> = bank.entries().map(|e| e.volume_id).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn aggregation_concatenates_and_keeps_tags() {
        let local = MemoryBank::from_entries(4, vec![unit_feature(&[1.0, 0.0], 0, 7, 2)]);
        let remote: Vec<MemoryBank> = (1..10)
            .map(|c| {
                MemoryBank::from_entries(
                    4,
                    vec![unit_feature(&[0.0, 1.0], c, c + 10, 1), unit_feature(&[0.6, 0.8], c, c + 20, 3)],
                )
            })
            .collect();
        let pool = aggregate_banks(&local, &remote);
        assert_eq!(pool.len(), 1 + 9 * 2);
        assert_eq!(pool[0].client_id, 0);
        assert_eq!(pool[0].volume_id, 7);
        assert!(pool[1..].iter().all(|f| f.client_id >= 1));
        assert!(pool.iter().any(|f| f.partition == 3));
    }

    #[test]
    fn sampling_whole_pool_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool: Vec<FeatureVector> = (0..6).map(|v| unit_feature(&[1.0, 0.0], 0, v, 0)).collect();
        let got = sample_negatives(&pool, 6, &mut rng).unwrap();
        let mut ids: Vec<usize> = got.iter().map(|f| f.volume_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn sampling_rejects_oversized_requests() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<FeatureVector> = (0..3).map(|v| unit_feature(&[1.0, 0.0], 0, v, 0)).collect();
        assert!(matches!(
            sample_negatives(&pool, 4, &mut rng).unwrap_err(),
            Error::PoolTooSmall { pool: 3, requested: 4 }
        ));
    }

    #[test]
    fn sampling_inclusion_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool: Vec<FeatureVector> = (0..8).map(|v| unit_feature(&[1.0, 0.0], 0, v, 0)).collect();
        let mut counts = vec![0usize; 8];
        let draws = 10_000;
        for _ in 0..draws {
            for f in sample_negatives(&pool, 4, &mut rng).unwrap() {
                counts[f.volume_id] += 1;
            }
        }
        for (v, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() <= 0.02, "element {v} inclusion {freq:.3} outside 0.5 +- 0.02");
        }
    }

    #[test]
    fn equal_similarities_collapse_to_log1p_k() {
        // All dot products equal: loss must be ln(1 + |negatives|).
        let q = unit_feature(&[1.0, 0.0, 0.0], 0, 0, 0);
        let other = unit_feature(&[0.5, (0.75f64).sqrt(), 0.0], 0, 1, 0);
        let positives = vec![other.clone()];
        let negatives = vec![other.clone(), other.clone(), other.clone()];
        let cfg = LossConfig::default();
        let (loss, _) = local_contrastive_loss(&q, &positives, &negatives, &cfg).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12, "loss {loss} vs ln(4)");
    }

    #[test]
    fn separated_similarities_drive_loss_to_zero() {
        let q = unit_feature(&[1.0, 0.0, 0.0], 0, 0, 0);
        let positives = vec![unit_feature(&[1.0, 0.0, 0.0], 0, 1, 0)];
        let negatives = vec![
            unit_feature(&[-1.0, 0.0, 0.0], 0, 2, 1),
            unit_feature(&[-1.0, 0.0, 0.0], 0, 3, 1),
        ];
        let cfg = LossConfig { temperature: 0.02, ..LossConfig::default() };
        let (loss, _) = local_contrastive_loss(&q, &positives, &negatives, &cfg).unwrap();
        assert!(loss < 1e-12, "loss {loss} should vanish");
    }

    #[test]
    fn empty_positives_is_an_error() {
        let q = unit_feature(&[1.0, 0.0], 0, 0, 0);
        let cfg = LossConfig::default();
        assert!(matches!(
            local_contrastive_loss(&q, &[], &[q.clone()], &cfg).unwrap_err(),
            Error::EmptyPositives
        ));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_feature(&mut rng, 8, 0);
        let positives: Vec<FeatureVector> = (0..3).map(|_| random_feature(&mut rng, 8, 0)).collect();
        let negatives: Vec<FeatureVector> = (0..5).map(|_| random_feature(&mut rng, 8, 1)).collect();
        let cfg = LossConfig::default();
        let (a, _) = local_contrastive_loss(&q, &positives, &negatives, &cfg).unwrap();
        let mut pos2 = positives.clone();
        pos2.reverse();
        let mut neg2 = negatives.clone();
        neg2.rotate_left(2);
        let (b, _) = local_contrastive_loss(&q, &pos2, &neg2, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_is_monotone_in_similarities() {
        let cfg = LossConfig::default();
        let q = unit_feature(&[1.0, 0.0, 0.0], 0, 0, 0);
        let pos = |c: f64| unit_feature(&[c, (1.0 - c * c).sqrt(), 0.0], 0, 1, 0);
        let neg = |c: f64| unit_feature(&[c, 0.0, (1.0 - c * c).sqrt()], 0, 2, 1);
        let base_neg = vec![neg(0.1), neg(0.2)];
        let (lo, _) = local_contrastive_loss(&q, &[pos(0.9)], &base_neg, &cfg).unwrap();
        let (hi, _) = local_contrastive_loss(&q, &[pos(0.3)], &base_neg, &cfg).unwrap();
        assert!(lo < hi, "raising a positive similarity must lower the loss");
        let (worse, _) = local_contrastive_loss(&q, &[pos(0.9)], &[neg(0.6), neg(0.2)], &cfg).unwrap();
        assert!(worse > lo, "raising a negative similarity must raise the loss");
    }

    #[test]
    fn remote_positive_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_feature(&mut rng, 4, 2);
        let sampled: Vec<FeatureVector> = (0..8).map(|i| random_feature(&mut rng, 4, i % 4)).collect();
        let matches = remote_positives(&q, &sampled);
        assert_eq!(matches.len(), 2);
        assert!(matches.iter().all(|p| p.partition == 2));
        let none = remote_positives(&q, &sampled[0..1]);
        assert!(none.is_empty());
        let all: Vec<FeatureVector> = (0..3).map(|_| random_feature(&mut rng, 4, 2)).collect();
        assert_eq!(remote_positives(&q, &all).len(), 3);
    }

    #[test]
    fn matching_term_doubles_when_sets_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_feature(&mut rng, 8, 1);
        let positives: Vec<FeatureVector> = (0..2).map(|_| random_feature(&mut rng, 8, 1)).collect();
        let negatives: Vec<FeatureVector> = (0..6).map(|_| random_feature(&mut rng, 8, 0)).collect();
        let cfg = LossConfig::default();
        let (local, _) = local_contrastive_loss(&q, &positives, &negatives, &cfg).unwrap();
        let (combined, _) = gsm_loss(&q, &positives, &positives, &negatives, &cfg).unwrap();
        assert!((combined - 2.0 * local).abs() < 1e-12);
        let (no_remote, _) = gsm_loss(&q, &positives, &[], &negatives, &cfg).unwrap();
        assert!((no_remote - local).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LossConfig::default();
        for _ in 0..10 {
            let dim = 8;
            let positives: Vec<FeatureVector> = (0..2).map(|_| random_feature(&mut rng, dim, 0)).collect();
            let remote: Vec<FeatureVector> = (0..3).map(|_| random_feature(&mut rng, dim, 0)).collect();
            let negatives: Vec<FeatureVector> = (0..6).map(|_| random_feature(&mut rng, dim, 1)).collect();
            let point = Tensor::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

            let (p1, n1, t) = (positives.clone(), negatives.clone(), cfg.temperature);
            let err = grad_check(
                move |tape: &mut GradTape, q: ValueId| contrastive_term(tape, q, &p1, &n1, t),
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "local term gradient error {err}");

            let (p2, r2, n2) = (positives.clone(), remote.clone(), negatives.clone());
            let err = grad_check(
                move |tape: &mut GradTape, q: ValueId| gsm_term(tape, q, &p2, &r2, &n2, t),
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "matching term gradient error {err}");
        }
    }

    #[test]
    fn byol_loss_extremes() {
        let z = Tensor::from_vec(vec![0.3, -0.4, 0.5]).unwrap();
        let (same, _) = byol_loss(&z, &z).unwrap();
        assert!(same.abs() < 1e-12);
        let opposite = Tensor::from_vec(vec![-0.3, 0.4, -0.5]).unwrap();
        let (anti, _) = byol_loss(&z, &opposite).unwrap();
        assert!((anti - 4.0).abs() < 1e-12);
        let ortho = Tensor::from_vec(vec![0.4, 0.3, 0.0]).unwrap();
        let (right_angle, _) = byol_loss(&Tensor::from_vec(vec![-0.3, 0.4, 0.0]).unwrap(), &ortho).unwrap();
        assert!((right_angle - 2.0).abs() < 1e-12);
    }

    #[test]
    fn byol_loss_is_symmetric_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let a = Tensor::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = Tensor::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let (ab, _) = byol_loss(&a, &b).unwrap();
            let (ba, _) = byol_loss(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            let scale_a = Tensor::from_vec(a.data().iter().map(|v| v * 3.5).collect()).unwrap();
            let scale_b = Tensor::from_vec(b.data().iter().map(|v| v * 0.25).collect()).unwrap();
            let (scaled, _) = byol_loss(&scale_a, &scale_b).unwrap();
            assert!((ab - scaled).abs() < 1e-10);
            assert!((0.0..=4.0 + 1e-12).contains(&ab));
        }
    }

    #[test]
    fn byol_rejects_zero_norm() {
        let z = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        let other = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        assert!(matches!(byol_loss(&z, &other).unwrap_err(), Error::DegenerateVector { .. }));
        assert!(matches!(byol_loss(&other, &z).unwrap_err(), Error::DegenerateVector { .. }));
    }

    #[test]
    fn byol_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let target = Tensor::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let point = Tensor::from_vec((0..6).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
            let t = target.clone();
            let err = grad_check(
                move |tape: &mut GradTape, z: ValueId| byol_term(tape, z, &t),
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "byol gradient error {err}");
        }
    }

    #[test]
    fn wire_roundtrip_preserves_tags_and_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dim = 16;
        let entries: Vec<FeatureVector> = (0..5)
            .map(|i| {
                let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                FeatureVector::from_raw(&raw, 3, 40 + i, i % 4).unwrap()
            })
            .collect();
        let bytes = encode_bank(3, dim, &entries).unwrap();
        assert_eq!(bytes.len() as u64, bank_wire_bytes(entries.len(), dim));
        let (client, decoded) = decode_bank(&bytes).unwrap();
        assert_eq!(client, 3);
        assert_eq!(decoded.len(), entries.len());
        for (a, b) in entries.iter().zip(&decoded) {
            assert_eq!((a.volume_id, a.partition), (b.volume_id, b.partition));
            let norm: f64 = b.embedding().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
            for (&x, &y) in a.embedding().iter().zip(b.embedding()) {
                assert!((x - y).abs() < 1e-6, "f32 quantization drifted too far");
            }
        }
        let empty = encode_bank(1, dim, &[]).unwrap();
        assert_eq!(empty.len(), 12);
        let (_, none) = decode_bank(&empty).unwrap();
        assert!(none.is_empty());
    }
}
