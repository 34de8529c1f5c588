//! Frozen-encoder linear probe over partition labels.
//!
//! A softmax classifier trained on embeddings of raw slices, scored on
//! held-out volumes. Serves as the desk-scale quality measure for a
//! pretrained encoder against its random initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, partition_of_slice, Volume};
use crate::encoder::{MlpSpec, ParamVector};
use crate::error::{Error, Result};

/// Embeddings plus labels, split into train and held-out volumes.
#[derive(Debug)]
pub struct ProbeDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// True where the sample belongs to the held-out volume of its client.
    pub eval_mask: Vec<bool>,
    pub classes: usize,
}

/// Embed every slice of the cohort with a frozen encoder. One volume per
/// client, chosen by the seed, is held out for evaluation.
pub fn extract_probe_dataset(
    spec: &MlpSpec,
    encoder: &ParamVector,
    cohort: &[Vec<Volume>],
    partitions: usize,
    seed: u64,
) -> Result<ProbeDataset> {
    if cohort.is_empty() {
        return Err(Error::EmptyInput { context: "probe cohort" });
    }
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe-split", 0));
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut eval_mask = Vec::new();
    for volumes in cohort {
        let held_out = split_rng.gen_range(0..volumes.len());
        for (v_idx, vol) in volumes.iter().enumerate() {
            for d in 0..vol.depth {
                let out = spec.forward(encoder, &vol.slice(d))?;
                features.push(out.data().to_vec());
                labels.push(partition_of_slice(d, vol.depth, partitions));
                eval_mask.push(v_idx == held_out);
            }
        }
    }
    Ok(ProbeDataset { features, labels, eval_mask, classes: partitions })
}

/// Train a softmax classifier by full-batch gradient descent and return
/// held-out accuracy. Zero initialization makes this deterministic.
pub fn train_probe(dataset: &ProbeDataset, epochs: usize, lr: f64) -> Result<f64> {
    let dim = dataset.features.first().map(|f| f.len()).ok_or(Error::EmptyInput {
        context: "probe features",
    })?;
    let classes = dataset.classes;
    let train_idx: Vec<usize> =
        (0..dataset.features.len()).filter(|&i| !dataset.eval_mask[i]).collect();
    let eval_idx: Vec<usize> =
        (0..dataset.features.len()).filter(|&i| dataset.eval_mask[i]).collect();
    if train_idx.is_empty() || eval_idx.is_empty() {
        return Err(Error::EmptyInput { context: "probe split" });
    }

    let mut weights = vec![0.0; classes * dim];
    let mut biases = vec![0.0; classes];
    let inv_n = 1.0 / train_idx.len() as f64;
    for _ in 0..epochs {
        let mut grad_w = vec![0.0; classes * dim];
        let mut grad_b = vec![0.0; classes];
        for &i in &train_idx {
            let x = &dataset.features[i];
            let probs = softmax(&logits(&weights, &biases, x, classes));
            for k in 0..classes {
                let delta = probs[k] - if k == dataset.labels[i] { 1.0 } else { 0.0 };
                grad_b[k] += delta * inv_n;
                let row = &mut grad_w[k * dim..(k + 1) * dim];
                for (g, &xv) in row.iter_mut().zip(x) {
                    *g += delta * xv * inv_n;
                }
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= lr * g;
        }
        for (b, g) in biases.iter_mut().zip(&grad_b) {
            *b -= lr * g;
        }
    }

    let mut correct = 0usize;
    for &i in &eval_idx {
        let scores = logits(&weights, &biases, &dataset.features[i], classes);
        let predicted = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
            .map(|(k, _)| k)
            .expect("at least one class");
        if predicted == dataset.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_idx.len() as f64)
}

fn logits(weights: &[f64], biases: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let dim = x.len();
    (0..classes)
        .map(|k| {
            biases[k] + weights[k * dim..(k + 1) * dim].iter().zip(x).map(|(w, xv)| w * xv).sum::<f64>()
        })
        .collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub const PROBE_EPOCHS: usize = 300;
pub const PROBE_LEARNING_RATE: f64 = 0.5;

/// Held-out partition accuracy of a frozen encoder.
pub fn linear_probe(
    spec: &MlpSpec,
    encoder: &ParamVector,
    cohort: &[Vec<Volume>],
    partitions: usize,
    seed: u64,
) -> Result<f64> {
    let dataset = extract_probe_dataset(spec, encoder, cohort, partitions, seed)?;
    train_probe(&dataset, PROBE_EPOCHS, PROBE_LEARNING_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, DataConfig};

    fn setup() -> (MlpSpec, ParamVector, Vec<Vec<Volume>>, DataConfig) {
        let data = DataConfig {
            n_clients: 4,
            volumes_per_client: 3,
            depth: 8,
            height: 8,
            width: 8,
            partitions: 4,
            seed: 21,
        };
        let cohort = generate_cohort(&data).unwrap();
        let spec = MlpSpec::encoder(64, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = spec.init_params(&mut rng);
        (spec, params, cohort, data)
    }

    #[test]
    fn probe_is_deterministic_given_seed() {
        let (spec, params, cohort, data) = setup();
        let a = linear_probe(&spec, &params, &cohort, data.partitions, 3).unwrap();
        let b = linear_probe(&spec, &params, &cohort, data.partitions, 3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        let (spec, params, cohort, data) = setup();
        let mut dataset = extract_probe_dataset(&spec, &params, &cohort, data.partitions, 3).unwrap();
        // Destroy the feature-label association.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for i in (1..dataset.labels.len()).rev() {
            let j = rng.gen_range(0..=i);
            dataset.labels.swap(i, j);
        }
        let accuracy = train_probe(&dataset, PROBE_EPOCHS, PROBE_LEARNING_RATE).unwrap();
        let chance = 1.0 / data.partitions as f64;
        assert!(
            (accuracy - chance).abs() <= 0.1,
            "shuffled-label accuracy {accuracy:.3} not near chance {chance:.3}"
        );
    }

    #[test]
    fn probe_beats_chance_on_structured_embeddings() {
        let (spec, params, cohort, data) = setup();
        let accuracy = linear_probe(&spec, &params, &cohort, data.partitions, 3).unwrap();
        assert!(accuracy > 1.0 / data.partitions as f64, "accuracy {accuracy}");
    }
}
