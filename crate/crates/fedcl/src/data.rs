//! Synthetic partitioned volumes, structural slice sampling, and views.
//!
//! Each partition index carries a shared motif (a blob whose center and
//! size are fixed functions of the index) plus per-subject jitter, so
//! same-partition slices across subjects correlate more strongly than
//! cross-partition slices. That is the structural premise the matching
//! loss exploits, and it is measurable on the generated data.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Cohort dimensions and seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_clients: usize,
    pub volumes_per_client: usize,
    /// Slices per volume.
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Contiguous partitions along the slicing axis.
    pub partitions: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            volumes_per_client: 4,
            depth: 16,
            height: 16,
            width: 16,
            partitions: 4,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, message: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig { key: format!("data.{key}"), message: message.into() })
            }
        };
        check(self.n_clients >= 1, "n_clients", "must be at least 1")?;
        check(self.volumes_per_client >= 1, "volumes_per_client", "must be at least 1")?;
        check(self.partitions >= 2, "partitions", "must be at least 2")?;
        check(self.depth >= 2, "depth", "must be at least 2")?;
        check(self.height >= 2, "height", "must be at least 2")?;
        check(self.width >= 2, "width", "must be at least 2")?;
        check(self.depth >= self.partitions, "depth", "must be at least `partitions` so no partition is empty")?;
        Ok(())
    }

    pub fn slice_count(&self) -> usize {
        self.depth
    }

    /// Samples held by one client (all slices of all its volumes).
    pub fn samples_per_client(&self) -> usize {
        self.volumes_per_client * self.depth
    }
}

/// One subject's 3D grid, values in [0, 1].
#[derive(Debug, Clone)]
pub struct Volume {
    voxels: Vec<f64>,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub subject_id: usize,
    pub client_id: usize,
}

impl Volume {
    pub fn slice(&self, index: usize) -> Tensor {
        let n = self.height * self.width;
        let data = self.voxels[index * n..(index + 1) * n].to_vec();
        Tensor::new(vec![self.height, self.width], data).expect("volume slices are finite")
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }
}

/// Partition of a slice index: `floor(index * partitions / depth)`.
pub fn partition_of_slice(slice_index: usize, depth: usize, partitions: usize) -> usize {
    slice_index * partitions / depth
}

/// One 2D slice tagged with its volume and partition.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub image: Tensor,
    pub volume_id: usize,
    pub partition: usize,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent stream seed from a base seed and a role tag.
pub fn derive_seed(base: u64, domain: &str, index: u64) -> u64 {
    let mut h = base;
    for b in domain.as_bytes() {
        h = splitmix64(h ^ u64::from(*b));
    }
    splitmix64(h ^ index)
}

/// Generate the full cohort, one volume list per client.
///
/// Deterministic in the config: each volume draws from its own derived
/// stream, so generation order never matters.
pub fn generate_cohort(cfg: &DataConfig) -> Result<Vec<Vec<Volume>>> {
    cfg.validate()?;
    let mut cohort = Vec::with_capacity(cfg.n_clients);
    for client in 0..cfg.n_clients {
        let mut volumes = Vec::with_capacity(cfg.volumes_per_client);
        for v in 0..cfg.volumes_per_client {
            let subject_id = client * cfg.volumes_per_client + v;
            volumes.push(generate_volume(cfg, client, subject_id));
        }
        cohort.push(volumes);
    }
    Ok(cohort)
}

fn generate_volume(cfg: &DataConfig, client_id: usize, subject_id: usize) -> Volume {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "volume", subject_id as u64));
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    // Heavy pixel noise keeps raw pixels (and random projections of them)
    // a poor partition predictor while the blob structure stays learnable.
    let noise = Normal::new(0.0, 0.22).expect("valid stddev");

    // Per-subject perturbation shared by all slices of the volume.
    let jitter_y = rng.gen_range(-0.07..0.07) * h;
    let jitter_x = rng.gen_range(-0.07..0.07) * w;
    let amplitude = rng.gen_range(0.55..1.0);
    let radius_scale = rng.gen_range(0.8..1.2);

    let mut voxels = Vec::with_capacity(cfg.depth * cfg.height * cfg.width);
    for d in 0..cfg.depth {
        let s = partition_of_slice(d, cfg.depth, cfg.partitions);
        let frac = s as f64 / (cfg.partitions - 1).max(1) as f64;
        // Motif: blob sweeping the diagonal as the partition index grows,
        // shrinking as it goes.
        let cy = (0.25 + 0.5 * frac) * h + jitter_y;
        let cx = (0.25 + 0.5 * frac) * w + jitter_x;
        let radius = (0.26 - 0.12 * frac) * h.min(w) * radius_scale;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let dy = (y as f64 - cy) / radius;
                let dx = (x as f64 - cx) / radius;
                let blob = amplitude * (-(dy * dy + dx * dx) / 2.0).exp();
                let v = blob + noise.sample(&mut rng);
                voxels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Volume {
        voxels,
        depth: cfg.depth,
        height: cfg.height,
        width: cfg.width,
        subject_id,
        client_id,
    }
}

/// Slice indices belonging to one partition.
fn partition_slices(depth: usize, partitions: usize, s: usize) -> Vec<usize> {
    (0..depth).filter(|&d| partition_of_slice(d, depth, partitions) == s).collect()
}

/// Draw one slice from partition `s` of two distinct volumes.
pub fn sample_partition_pair(
    volumes: &[Volume],
    s: usize,
    partitions: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SliceSample, SliceSample)> {
    if volumes.len() < 2 {
        return Err(Error::PoolTooSmall { pool: volumes.len(), requested: 2 });
    }
    let i = rng.gen_range(0..volumes.len());
    let mut j = rng.gen_range(0..volumes.len() - 1);
    if j >= i {
        j += 1;
    }
    let sample = |vol: &Volume, rng: &mut ChaCha8Rng| -> SliceSample {
        let slices = partition_slices(vol.depth, partitions, s);
        let idx = slices[rng.gen_range(0..slices.len())];
        SliceSample { image: vol.slice(idx), volume_id: vol.subject_id, partition: s }
    };
    let a = sample(&volumes[i], rng);
    let b = sample(&volumes[j], rng);
    Ok((a, b))
}

/// Draw one slice uniformly over (volume, slice index).
pub fn sample_slice(volumes: &[Volume], partitions: usize, rng: &mut ChaCha8Rng) -> Result<SliceSample> {
    if volumes.is_empty() {
        return Err(Error::EmptyInput { context: "sample_slice" });
    }
    let vol = &volumes[rng.gen_range(0..volumes.len())];
    let idx = rng.gen_range(0..vol.depth);
    Ok(SliceSample {
        image: vol.slice(idx),
        volume_id: vol.subject_id,
        partition: partition_of_slice(idx, vol.depth, partitions),
    })
}

/// Stochastic view parameters: crop-and-resize, flip, additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_min_scale: f64,
    pub crop_max_scale: f64,
    pub flip_prob: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { crop_min_scale: 0.6, crop_max_scale: 1.0, flip_prob: 0.5, noise_sigma: 0.05 }
    }
}

impl AugmentConfig {
    /// Configuration under which `augment` is the identity.
    pub fn identity() -> Self {
        Self { crop_min_scale: 1.0, crop_max_scale: 1.0, flip_prob: 0.0, noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, message: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig { key: format!("augment.{key}"), message: message.into() })
            }
        };
        check(
            self.crop_min_scale > 0.0 && self.crop_min_scale <= self.crop_max_scale && self.crop_max_scale <= 1.0,
            "crop_min_scale",
            "need 0 < crop_min_scale <= crop_max_scale <= 1",
        )?;
        check((0.0..=1.0).contains(&self.flip_prob), "flip_prob", "must be in [0, 1]")?;
        check(self.noise_sigma >= 0.0, "noise_sigma", "must be nonnegative")?;
        Ok(())
    }
}

/// Two independent stochastic views of one image, clamped to [0, 1].
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let a = augment_once(image, cfg, rng)?;
    let b = augment_once(image, cfg, rng)?;
    Ok((a, b))
}

fn augment_once(image: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if image.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "augment input",
            expected: vec![2],
            found: image.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let scale = if cfg.crop_min_scale == cfg.crop_max_scale {
        cfg.crop_min_scale
    } else {
        rng.gen_range(cfg.crop_min_scale..cfg.crop_max_scale)
    };
    let crop_h = ((h as f64) * scale).round() as usize;
    let crop_w = ((w as f64) * scale).round() as usize;
    if crop_h < 2 || crop_w < 2 {
        return Err(Error::InvalidConfig {
            key: "augment.crop_min_scale".into(),
            message: format!("crop of {crop_h}x{crop_w} from {h}x{w} image is below the 2x2 minimum"),
        });
    }
    let top = if crop_h < h { rng.gen_range(0..=h - crop_h) } else { 0 };
    let left = if crop_w < w { rng.gen_range(0..=w - crop_w) } else { 0 };

    // Bilinear resize of the crop back to h x w. With a full-size crop the
    // source coordinates are integral and this is an exact copy.
    let src = image.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = if h > 1 { y as f64 * (crop_h - 1) as f64 / (h - 1) as f64 } else { 0.0 };
            let sx = if w > 1 { x as f64 * (crop_w - 1) as f64 / (w - 1) as f64 } else { 0.0 };
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(crop_h - 1);
            let x1 = (x0 + 1).min(crop_w - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let at = |yy: usize, xx: usize| src[(top + yy) * w + (left + xx)];
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            out[y * w + x] = v;
        }
    }

    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        for y in 0..h {
            out[y * w..(y + 1) * w].reverse();
        }
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid stddev");
        for v in &mut out {
            *v += noise.sample(rng);
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w], out)
}

/// Dump the cohort to a flat binary file: dims + seed header, then voxel
/// values as little-endian f32 in (client, volume, slice, row) order.
pub fn dump_cohort(cfg: &DataConfig, cohort: &[Vec<Volume>], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(b"FCVOL")?;
    for dim in [cfg.n_clients, cfg.volumes_per_client, cfg.depth, cfg.height, cfg.width, cfg.partitions] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.seed.to_le_bytes())?;
    for volumes in cohort {
        for vol in volumes {
            for &v in vol.voxels() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Mean Pearson correlation between slice pairs drawn from different
/// volumes, split into same-partition and cross-partition pairs.
pub fn partition_correlation(cohort: &[Vec<Volume>], partitions: usize) -> (f64, f64) {
    let volumes: Vec<&Volume> = cohort.iter().flatten().collect();
    let mut within = (0.0, 0usize);
    let mut across = (0.0, 0usize);
    for (a_idx, a) in volumes.iter().enumerate() {
        for b in volumes.iter().skip(a_idx + 1) {
            for da in 0..a.depth {
                let pa = partition_of_slice(da, a.depth, partitions);
                for db in 0..b.depth {
                    let pb = partition_of_slice(db, b.depth, partitions);
                    let r = pearson(a.slice(da).data(), b.slice(db).data());
                    if pa == pb {
                        within.0 += r;
                        within.1 += 1;
                    } else {
                        across.0 += r;
                        across.1 += 1;
                    }
                }
            }
        }
    }
    (within.0 / within.1.max(1) as f64, across.0 / across.1.max(1) as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_config_matches_protocol_scale() {
        let cfg = DataConfig::default();
        assert_eq!(cfg.partitions, 4);
        assert_eq!(cfg.n_clients, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_invalid_config() {
        let cfg = DataConfig { partitions: 1, ..DataConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = DataConfig { depth: 2, partitions: 4, ..DataConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = DataConfig { n_clients: 3, volumes_per_client: 2, ..DataConfig::default() };
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        for (ca, cb) in a.iter().zip(&b) {
            for (va, vb) in ca.iter().zip(cb) {
                assert_eq!(va.voxels(), vb.voxels());
            }
        }
    }

    #[test]
    fn voxels_stay_in_unit_interval() {
        let cfg = DataConfig { n_clients: 2, volumes_per_client: 2, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        for vol in cohort.iter().flatten() {
            assert!(vol.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn within_partition_correlation_exceeds_cross() {
        // 10-volume cohort as the measurement basis.
        let cfg = DataConfig { n_clients: 5, volumes_per_client: 2, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let (within, across) = partition_correlation(&cohort, cfg.partitions);
        assert!(
            within > across,
            "structural premise violated: within {within:.3} <= across {across:.3}"
        );
    }

    #[test]
    fn partition_formula_consistency() {
        for d in 0..16 {
            assert_eq!(partition_of_slice(d, 16, 4), d / 4);
        }
        assert_eq!(partition_slices(16, 4, 2), vec![8, 9, 10, 11]);
    }

    #[test]
    fn pair_with_two_volumes_is_forced() {
        let cfg = DataConfig { n_clients: 1, volumes_per_client: 2, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (a, b) = sample_partition_pair(&cohort[0], 1, cfg.partitions, &mut rng).unwrap();
            assert_ne!(a.volume_id, b.volume_id);
            assert_eq!(a.partition, 1);
            assert_eq!(b.partition, 1);
            let mut ids = [a.volume_id, b.volume_id];
            ids.sort_unstable();
            assert_eq!(ids, [0, 1]);
        }
    }

    #[test]
    fn pair_rejects_single_volume() {
        let cfg = DataConfig { n_clients: 1, volumes_per_client: 1, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(sample_partition_pair(&cohort[0], 0, cfg.partitions, &mut rng).is_err());
    }

    #[test]
    fn pair_sampling_is_uniform_over_unordered_pairs() {
        let cfg = DataConfig { n_clients: 1, volumes_per_client: 4, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::BTreeMap::new();
        let draws = 1000;
        for _ in 0..draws {
            let (a, b) = sample_partition_pair(&cohort[0], 0, cfg.partitions, &mut rng).unwrap();
            let mut key = [a.volume_id, b.volume_id];
            key.sort_unstable();
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (&pair, &count) in &counts {
            let freq = count as f64 / draws as f64;
            assert!(
                (freq - 1.0 / 6.0).abs() <= 0.05,
                "pair {pair:?} frequency {freq:.3} outside 1/6 +- 0.05"
            );
        }
    }

    #[test]
    fn identity_augment_returns_input() {
        let cfg = DataConfig { n_clients: 1, volumes_per_client: 1, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let image = cohort[0][0].slice(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = augment(&image, &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(a, image);
        assert_eq!(b, image);
    }

    #[test]
    fn augment_output_is_clamped() {
        let cfg = DataConfig { n_clients: 1, volumes_per_client: 1, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let image = cohort[0][0].slice(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = AugmentConfig { noise_sigma: 0.5, ..AugmentConfig::default() };
        for _ in 0..10 {
            let (a, b) = augment(&image, &noisy, &mut rng).unwrap();
            for view in [&a, &b] {
                assert!(view.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn default_views_differ_almost_surely() {
        let cfg = DataConfig { n_clients: 1, volumes_per_client: 1, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let image = cohort[0][0].slice(5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut distinct = 0;
        let trials = 200;
        for _ in 0..trials {
            let (a, b) = augment(&image, &AugmentConfig::default(), &mut rng).unwrap();
            let dist: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dist > 0.0 {
                distinct += 1;
            }
        }
        assert!(distinct as f64 / trials as f64 > 0.99);
    }

    #[test]
    fn augment_rejects_tiny_images() {
        let image = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AugmentConfig { crop_min_scale: 0.3, crop_max_scale: 0.3, ..AugmentConfig::default() };
        assert!(augment(&image, &cfg, &mut rng).is_err());
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(42, "client", 0);
        let b = derive_seed(42, "client", 1);
        let c = derive_seed(42, "server", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, "client", 0));
    }

    #[test]
    fn cohort_dump_has_expected_size() {
        let cfg = DataConfig { n_clients: 2, volumes_per_client: 1, ..DataConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let dir = std::env::temp_dir().join("fedcl_dump_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cohort.bin");
        dump_cohort(&cfg, &cohort, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let expected = 5 + 6 * 4 + 8 + (2 * 16 * 16 * 16) * 4;
        assert_eq!(len, expected as u64);
        std::fs::remove_file(&path).ok();
    }
}
