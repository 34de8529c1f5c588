//! Experiment runner: artifacts on disk, variant comparison, ledger
//! summaries, and the gradient verification suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cli::config::ExperimentConfig;
use crate::contrastive::{byol_term, contrastive_term, gsm_term};
use crate::data::generate_cohort;
use crate::encoder::{FeatureVector, MlpSpec, ParamVector, StagedParams};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, GradTape, Tensor, ValueId};
use crate::protocol::{
    feature_exchange_round_bytes, linear_probe, run_federation, CommLedger, Component,
    FederationOutcome, RoundResult, Variant,
};

/// Everything a `run` leaves behind, plus the in-memory outcome.
#[derive(Debug)]
pub struct RunArtifacts {
    pub outcome: FederationOutcome,
    pub probe_accuracy: f64,
    pub probe_accuracy_random_init: f64,
    pub output_dir: PathBuf,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Round-results CSV: one row per round.
pub fn round_results_csv(variant: Variant, rounds: &[RoundResult]) -> String {
    let mut out = String::from("round,variant,loss_mean,d_exact,d_pred,alpha,total_bytes\n");
    for r in rounds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round,
            variant.name(),
            r.mean_loss,
            fmt_opt(r.d_exact),
            fmt_opt(r.d_pred),
            fmt_opt(r.alpha),
            r.bytes_this_round
        );
    }
    out
}

/// Baseline total for normalization: the feature-exchange variant's
/// closed-form bytes under this run's sizes (full banks).
pub fn feature_exchange_baseline(cfg: &ExperimentConfig) -> u64 {
    let arch = crate::protocol::ModelArch::from_configs(&cfg.data, &cfg.protocol);
    let enc_params = arch.encoder.layout().param_count();
    cfg.protocol.rounds as u64
        * feature_exchange_round_bytes(
            cfg.data.n_clients,
            enc_params,
            cfg.protocol.feature_dim,
            cfg.loss.bank_size,
        )
}

/// Run one experiment and write round results, ledger, checkpoints, and a
/// summary into the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;

    let outcome = run_federation(&cfg.protocol, &cfg.data, &cfg.loss, &cfg.augment, cfg.seed)?;

    std::fs::write(
        out_dir.join("round_results.csv"),
        round_results_csv(cfg.protocol.variant, &outcome.rounds),
    )?;
    outcome.ledger.write_csv(out_dir.join("ledger.csv"))?;

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    outcome.final_online.encoder.save(ckpt_dir.join("encoder.bin"))?;
    outcome.final_online.predictor.save(ckpt_dir.join("predictor.bin"))?;
    if let Some(target) = &outcome.final_target {
        target.encoder.save(ckpt_dir.join("target.bin"))?;
    }
    outcome.initial_encoder.save(ckpt_dir.join("initial_encoder.bin"))?;

    let cohort = generate_cohort(&cfg.data)?;
    let probe_accuracy = linear_probe(
        &outcome.arch.encoder,
        &outcome.final_online.encoder,
        &cohort,
        cfg.data.partitions,
        cfg.seed,
    )?;
    let probe_accuracy_random_init = linear_probe(
        &outcome.arch.encoder,
        &outcome.initial_encoder,
        &cohort,
        cfg.data.partitions,
        cfg.seed,
    )?;

    let summary = run_summary_text(cfg, &outcome, probe_accuracy, probe_accuracy_random_init);
    std::fs::write(out_dir.join("summary.txt"), summary)?;

    Ok(RunArtifacts { outcome, probe_accuracy, probe_accuracy_random_init, output_dir: out_dir })
}

fn run_summary_text(
    cfg: &ExperimentConfig,
    outcome: &FederationOutcome,
    probe: f64,
    probe_init: f64,
) -> String {
    let mut s = String::new();
    let total = outcome.ledger.total();
    let baseline = feature_exchange_baseline(cfg);
    let _ = writeln!(s, "variant: {}", cfg.protocol.variant);
    let _ = writeln!(s, "rounds: {}", cfg.protocol.rounds);
    let _ = writeln!(s, "clients: {}", cfg.data.n_clients);
    let _ = writeln!(s, "total_bytes: {total}");
    let _ = writeln!(s, "bytes_vs_feature_exchange: {:.3}", total as f64 / baseline as f64);
    for component in Component::ALL {
        let _ = writeln!(
            s,
            "bytes[{}]: {}",
            component,
            outcome.ledger.total_where(Some(component), None)
        );
    }
    if let Some(first) = outcome.rounds.first() {
        let last = outcome.rounds.last().expect("nonempty rounds");
        let _ = writeln!(s, "loss_round_first: {}", first.mean_loss);
        let _ = writeln!(s, "loss_round_last: {}", last.mean_loss);
    }
    let _ = writeln!(s, "probe_accuracy: {probe}");
    let _ = writeln!(s, "probe_accuracy_random_init: {probe_init}");
    s
}

/// One row of a variant comparison.
#[derive(Debug, Clone)]
pub struct VariantComparison {
    pub variant: Variant,
    pub total_bytes: u64,
    pub normalized: f64,
    pub probe_accuracy: f64,
    pub probe_accuracy_random_init: f64,
}

/// Run several variants under identical data and seed, normalizing byte
/// totals to the feature-exchange variant when present (else the first).
pub fn compare(base: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<VariantComparison>> {
    if variants.is_empty() {
        return Err(Error::EmptyInput { context: "compare variants" });
    }
    let base_dir = PathBuf::from(&base.output_dir);
    std::fs::create_dir_all(&base_dir)?;
    let mut runs = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.protocol.variant = variant;
        cfg.output_dir = base_dir.join(variant.name()).to_string_lossy().into_owned();
        let artifacts = run_experiment(&cfg)?;
        runs.push((variant, artifacts));
    }
    let baseline_total = runs
        .iter()
        .find(|(v, _)| *v == Variant::Fcl)
        .or_else(|| runs.first())
        .map(|(_, a)| a.outcome.ledger.total())
        .expect("at least one run");
    let rows: Vec<VariantComparison> = runs
        .iter()
        .map(|(variant, a)| VariantComparison {
            variant: *variant,
            total_bytes: a.outcome.ledger.total(),
            normalized: a.outcome.ledger.total() as f64 / baseline_total as f64,
            probe_accuracy: a.probe_accuracy,
            probe_accuracy_random_init: a.probe_accuracy_random_init,
        })
        .collect();
    std::fs::write(base_dir.join("comparison.csv"), comparison_csv(&rows))?;
    Ok(rows)
}

pub fn comparison_csv(rows: &[VariantComparison]) -> String {
    let mut out =
        String::from("variant,total_bytes,normalized,probe_accuracy,probe_accuracy_random_init\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{},{}",
            r.variant, r.total_bytes, r.normalized, r.probe_accuracy, r.probe_accuracy_random_init
        );
    }
    out
}

pub fn comparison_table(rows: &[VariantComparison]) -> String {
    let mut out = format!(
        "{:<16} {:>14} {:>11} {:>11} {:>13}\n",
        "variant", "total_bytes", "normalized", "probe_acc", "probe_random"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>14} {:>11.3} {:>11.4} {:>13.4}",
            r.variant.name(),
            r.total_bytes,
            r.normalized,
            r.probe_accuracy,
            r.probe_accuracy_random_init
        );
    }
    out
}

/// One summarized ledger.
#[derive(Debug, Clone)]
pub struct LedgerSummaryRow {
    pub label: String,
    pub components: BTreeMap<Component, u64>,
    pub total: u64,
    pub ratio: f64,
}

fn ledger_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "ledger" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

/// Distinct nonzero per-message sizes for one model component.
fn message_sizes(ledger: &CommLedger, component: Component) -> Vec<u64> {
    let mut sizes: Vec<u64> = ledger
        .entries()
        .iter()
        .filter(|e| e.component == component && e.bytes > 0)
        .map(|e| e.bytes)
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
}

/// Summarize one or more ledger CSVs: per-component totals and the ratio
/// against the feature-exchange ledger when present (else the first).
/// Ledgers recorded under different model sizes are rejected.
pub fn summarize(paths: &[PathBuf]) -> Result<Vec<LedgerSummaryRow>> {
    if paths.is_empty() {
        return Err(Error::EmptyInput { context: "summarize ledgers" });
    }
    let mut loaded = Vec::with_capacity(paths.len());
    for path in paths {
        let ledger = CommLedger::read_csv(path)?;
        loaded.push((ledger_label(path), ledger));
    }
    for component in [Component::OnlineNet, Component::Predictor, Component::TargetNet] {
        let mut reference: Option<(&str, Vec<u64>)> = None;
        for (label, ledger) in &loaded {
            let sizes = message_sizes(ledger, component);
            if sizes.is_empty() {
                continue;
            }
            match &reference {
                None => reference = Some((label, sizes)),
                Some((ref_label, ref_sizes)) => {
                    if *ref_sizes != sizes {
                        return Err(Error::Malformed {
                            what: "ledger set",
                            message: format!(
                                "model sizes disagree for {component}: {ref_label} has {ref_sizes:?}, {label} has {sizes:?}"
                            ),
                        });
                    }
                }
            }
        }
    }
    let baseline_total = loaded
        .iter()
        .find(|(label, _)| label == "fcl")
        .or_else(|| loaded.first())
        .map(|(_, ledger)| ledger.total())
        .expect("at least one ledger");
    Ok(loaded
        .into_iter()
        .map(|(label, ledger)| {
            let mut components = BTreeMap::new();
            for c in Component::ALL {
                components.insert(c, ledger.total_where(Some(c), None));
            }
            let total = ledger.total();
            LedgerSummaryRow {
                label,
                components,
                total,
                ratio: total as f64 / baseline_total as f64,
            }
        })
        .collect())
}

pub fn summary_csv(rows: &[LedgerSummaryRow]) -> String {
    let mut out = String::from("label,online_net,predictor,target_net,features,scalar,total,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.3}",
            r.label,
            r.components[&Component::OnlineNet],
            r.components[&Component::Predictor],
            r.components[&Component::TargetNet],
            r.components[&Component::Features],
            r.components[&Component::Scalar],
            r.total,
            r.ratio
        );
    }
    out
}

pub fn summary_table(rows: &[LedgerSummaryRow]) -> String {
    let mut out = format!(
        "{:<16} {:>12} {:>11} {:>12} {:>12} {:>8} {:>14} {:>7}\n",
        "label", "online_net", "predictor", "target_net", "features", "scalar", "total", "ratio"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>11} {:>12} {:>12} {:>8} {:>14} {:>7.3}",
            r.label,
            r.components[&Component::OnlineNet],
            r.components[&Component::Predictor],
            r.components[&Component::TargetNet],
            r.components[&Component::Features],
            r.components[&Component::Scalar],
            r.total,
            r.ratio
        );
    }
    out
}

/// Probe a checkpointed encoder against a fresh random initialization
/// under the configured cohort; returns (checkpoint, random-init) accuracy.
pub fn probe_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let encoder = ParamVector::load(checkpoint)?;
    let arch = crate::protocol::ModelArch::from_configs(&cfg.data, &cfg.protocol);
    if encoder.layout() != &arch.encoder.layout() {
        return Err(Error::LayoutMismatch { context: "probe checkpoint" });
    }
    let cohort = generate_cohort(&cfg.data)?;
    let accuracy =
        linear_probe(&arch.encoder, &encoder, &cohort, cfg.data.partitions, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(cfg.seed, "init", 0));
    let random = arch.encoder.init_params(&mut rng);
    let baseline =
        linear_probe(&arch.encoder, &random, &cohort, cfg.data.partitions, cfg.seed)?;
    Ok((accuracy, baseline))
}

/// One line of the gradient verification suite.
#[derive(Debug, Clone)]
pub struct GradCheckLine {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub threshold: f64,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize, partition: usize) -> FeatureVector {
    loop {
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Ok(f) = FeatureVector::from_raw(&raw, 0, 0, partition) {
            return f;
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, dim: usize) -> Tensor {
    Tensor::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
}

/// Verify the analytic gradients of the primitive ops and all three
/// losses against central finite differences.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut lines = Vec::new();

    // Primitive ops.
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let w = Tensor::new(vec![4, 8], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let b = random_tensor(&mut rng, 8);
        let point = random_tensor(&mut rng, 4);
        let err = grad_check(
            move |tape: &mut GradTape, x: ValueId| {
                let wid = tape.leaf(w.clone());
                let bid = tape.leaf(b.clone());
                let y = tape.affine(x, wid, bid)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &point,
            step,
        )?;
        worst = worst.max(err);
    }
    lines.push(GradCheckLine { name: "affine", instances, max_error: worst, threshold: 1e-6 });

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let data: Vec<f64> = (0..8)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let point = Tensor::from_vec(data)?;
        let err = grad_check(
            |tape: &mut GradTape, x: ValueId| {
                let y = tape.relu(x)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &point,
            step,
        )?;
        worst = worst.max(err);
    }
    lines.push(GradCheckLine { name: "relu", instances, max_error: worst, threshold: 1e-6 });

    let mut worst = 0.0f64;
    for _ in 0..instances {
        let target = random_tensor(&mut rng, 16);
        let point = random_tensor(&mut rng, 16);
        let err = grad_check(
            move |tape: &mut GradTape, x: ValueId| {
                let y = tape.l2_normalize(x)?;
                let t = tape.leaf(target.clone());
                tape.dot(y, t)
            },
            &point,
            step,
        )?;
        worst = worst.max(err);
    }
    lines.push(GradCheckLine { name: "l2_normalize", instances, max_error: worst, threshold: 1e-6 });

    // Contrastive loss with respect to the query.
    let dim = 12;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let positives: Vec<FeatureVector> = (0..2).map(|_| random_unit(&mut rng, dim, 0)).collect();
        let negatives: Vec<FeatureVector> = (0..8).map(|_| random_unit(&mut rng, dim, 1)).collect();
        let point = random_tensor(&mut rng, dim);
        let err = grad_check(
            move |tape: &mut GradTape, q: ValueId| contrastive_term(tape, q, &positives, &negatives, 0.1),
            &point,
            step,
        )?;
        worst = worst.max(err);
    }
    lines.push(GradCheckLine { name: "contrastive_loss", instances, max_error: worst, threshold: 1e-4 });

    // Combined matching loss with respect to the query.
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let positives: Vec<FeatureVector> = (0..2).map(|_| random_unit(&mut rng, dim, 0)).collect();
        let remote: Vec<FeatureVector> = (0..3).map(|_| random_unit(&mut rng, dim, 0)).collect();
        let negatives: Vec<FeatureVector> = (0..8).map(|_| random_unit(&mut rng, dim, 1)).collect();
        let point = random_tensor(&mut rng, dim);
        let err = grad_check(
            move |tape: &mut GradTape, q: ValueId| {
                gsm_term(tape, q, &positives, &remote, &negatives, 0.1)
            },
            &point,
            step,
        )?;
        worst = worst.max(err);
    }
    lines.push(GradCheckLine { name: "matching_loss", instances, max_error: worst, threshold: 1e-4 });

    // Regression loss with respect to the online projection.
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let target = random_tensor(&mut rng, dim);
        let point = Tensor::from_vec((0..dim).map(|_| rng.gen_range(0.2..1.2)).collect())?;
        let t = target.clone();
        let err = grad_check(
            move |tape: &mut GradTape, z: ValueId| byol_term(tape, z, &t),
            &point,
            step,
        )?;
        worst = worst.max(err);
    }
    lines.push(GradCheckLine { name: "regression_loss", instances, max_error: worst, threshold: 1e-4 });

    // Regression loss through the whole online network with respect to
    // the first encoder layer.
    let enc = MlpSpec::encoder(6, 5, 4);
    let pred = MlpSpec::predictor(4);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let enc_params = enc.init_params(&mut rng);
        let pred_params = pred.init_params(&mut rng);
        let image = Tensor::from_vec((0..6).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        let z_prime = random_tensor(&mut rng, 4);
        let w0_len = 6 * 5;
        let w0 = Tensor::new(vec![6, 5], enc_params.values()[..w0_len].to_vec())?;
        let rest: Vec<f64> = enc_params.values()[w0_len..].to_vec();
        let (enc2, pred2, image2, zp2) = (enc.clone(), pred.clone(), image.clone(), z_prime.clone());
        let pred_params2 = pred_params.clone();
        let err = grad_check(
            move |tape: &mut GradTape, w0_leaf: ValueId| {
                // Remaining encoder layers are constants around the leaf.
                let b0 = tape.leaf(Tensor::from_vec(rest[..5].to_vec())?);
                let w1 = tape.leaf(Tensor::new(vec![5, 4], rest[5..25].to_vec())?);
                let b1 = tape.leaf(Tensor::from_vec(rest[25..29].to_vec())?);
                let staged_enc = StagedParams::from_ids(vec![w0_leaf, b0, w1, b1]);
                let staged_pred = pred2.stage_params(tape, &pred_params2)?;
                let x = tape.leaf(image2.clone());
                let h = enc2.forward_staged(tape, &staged_enc, x)?;
                let z = pred2.forward_staged(tape, &staged_pred, h)?;
                byol_term(tape, z, &zp2)
            },
            &w0,
            step,
        );
        match err {
            // A tiny ReLU layer can zero out the whole projection for
            // some draws; such instances are outside the loss's domain.
            Err(Error::DegenerateVector { .. }) => continue,
            Err(other) => return Err(other),
            Ok(err) => {
                worst = worst.max(err);
                done += 1;
            }
        }
    }
    lines.push(GradCheckLine {
        name: "regression_loss_wrt_params",
        instances,
        max_error: worst,
        threshold: 1e-4,
    });

    Ok(lines)
}

pub fn gradient_suite_report(lines: &[GradCheckLine]) -> String {
    let mut out = String::new();
    for line in lines {
        let _ = writeln!(
            out,
            "{} [{}]: {} instances, max rel. error {:.3e} (threshold {:.0e})",
            if line.passed() { "PASS" } else { "FAIL" },
            line.name,
            line.instances,
            line.max_error,
            line.threshold
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataConfig;
    use crate::protocol::ProtocolConfig;

    fn tiny_cfg(dir: &str) -> ExperimentConfig {
        ExperimentConfig {
            seed: 5,
            output_dir: dir.into(),
            data: DataConfig {
                n_clients: 3,
                volumes_per_client: 2,
                depth: 8,
                height: 6,
                width: 6,
                partitions: 4,
                seed: 2,
            },
            protocol: ProtocolConfig {
                rounds: 2,
                steps_per_epoch: 1,
                batch_size: 2,
                hidden_dim: 8,
                feature_dim: 6,
                ..ProtocolConfig::default()
            },
            loss: crate::contrastive::LossConfig { bank_size: 8, ..Default::default() },
            augment: Default::default(),
        }
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("fedcl_runner_{tag}_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn run_writes_all_artifacts() {
        let dir = temp_dir("run");
        let cfg = tiny_cfg(dir.to_str().unwrap());
        let artifacts = run_experiment(&cfg).unwrap();
        for file in ["round_results.csv", "ledger.csv", "summary.txt"] {
            assert!(dir.join(file).exists(), "missing {file}");
        }
        for file in ["encoder.bin", "predictor.bin", "target.bin", "initial_encoder.bin"] {
            assert!(dir.join("checkpoints").join(file).exists(), "missing {file}");
        }
        assert!(artifacts.probe_accuracy.is_finite());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir_a = temp_dir("rerun_a");
        let dir_b = temp_dir("rerun_b");
        let cfg_a = tiny_cfg(dir_a.to_str().unwrap());
        let mut cfg_b = cfg_a.clone();
        cfg_b.output_dir = dir_b.to_str().unwrap().into();
        run_experiment(&cfg_a).unwrap();
        run_experiment(&cfg_b).unwrap();
        for file in ["round_results.csv", "ledger.csv"] {
            let a = std::fs::read(dir_a.join(file)).unwrap();
            let b = std::fs::read(dir_b.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn summarize_single_ledger_is_unit_ratio() {
        let dir = temp_dir("sum1");
        let cfg = tiny_cfg(dir.to_str().unwrap());
        run_experiment(&cfg).unwrap();
        let rows = summarize(&[dir.join("ledger.csv")]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].ratio - 1.0).abs() < 1e-12);
        let component_sum: u64 = rows[0].components.values().sum();
        assert_eq!(component_sum, rows[0].total);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn summarize_rejects_mismatched_model_sizes() {
        let dir_a = temp_dir("mismatch_a");
        let dir_b = temp_dir("mismatch_b");
        let cfg_a = tiny_cfg(dir_a.to_str().unwrap());
        let mut cfg_b = tiny_cfg(dir_b.to_str().unwrap());
        cfg_b.protocol.hidden_dim = 12;
        run_experiment(&cfg_a).unwrap();
        run_experiment(&cfg_b).unwrap();
        let err = summarize(&[dir_a.join("ledger.csv"), dir_b.join("ledger.csv")]).unwrap_err();
        assert!(err.to_string().contains("model sizes disagree"), "got: {err}");
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn gradient_suite_passes_quickly() {
        let lines = gradient_suite(5, 77).unwrap();
        assert_eq!(lines.len(), 7);
        for line in &lines {
            assert!(line.passed(), "{} failed with {:.3e}", line.name, line.max_error);
        }
    }
}
