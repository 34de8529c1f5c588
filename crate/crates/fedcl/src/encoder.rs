//! Encoder/projector/predictor networks and parameter-space operations.
//!
//! Networks are plain MLPs whose parameters live in a single flat
//! [`ParamVector`]; synchronization, averaging, and distance math never
//! need to know the layer structure.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Gradients, Tensor, ValueId};

/// Ordered (layer name, shape) pairs mapping a flat value array to layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout(Vec<(String, Vec<usize>)>);

impl Layout {
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Self {
        Self(entries)
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.0
    }

    /// Total number of values the layout describes.
    pub fn param_count(&self) -> usize {
        self.0.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Flat model parameters plus the layout that maps them to layers.
///
/// Two `ParamVector`s are compatible iff their layouts are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::ShapeMismatch {
                context: "param vector construction",
                expected: vec![layout.param_count()],
                found: vec![values.len()],
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "param vector construction" });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.param_count();
        Self { values: vec![0.0; n], layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn compatible(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    /// In-place gradient step `p -= lr * grad`.
    pub fn step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                context: "gradient step",
                expected: vec![self.values.len()],
                found: vec![grad.len()],
            });
        }
        for (p, &g) in self.values.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "gradient step" });
        }
        Ok(())
    }

    /// Bytes this vector occupies on the wire (4 bytes per value, no header).
    pub fn wire_bytes(&self) -> u64 {
        4 * self.values.len() as u64
    }

    /// Serialize as a layout header followed by little-endian f32 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"FCPV")?;
        w.write_all(&(self.layout.0.len() as u32).to_le_bytes())?;
        for (name, shape) in &self.layout.0 {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Read back a vector written by [`ParamVector::write_to`]. Values come
    /// back at f32 precision.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FCPV" {
            return Err(Error::Malformed { what: "checkpoint", message: "bad magic".into() });
        }
        let n_layers = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Malformed { what: "checkpoint", message: e.to_string() })?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            entries.push((name, shape));
        }
        let layout = Layout::new(entries);
        let mut values = Vec::with_capacity(layout.param_count());
        for _ in 0..layout.param_count() {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        Self::new(values, layout)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// `m * target + (1 - m) * online`, elementwise. `m` must be in (0, 1].
pub fn ema_update(target: &ParamVector, online: &ParamVector, m: f64) -> Result<ParamVector> {
    if !target.compatible(online) {
        return Err(Error::LayoutMismatch { context: "ema_update" });
    }
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::InvalidConfig {
            key: "ema momentum".into(),
            message: format!("must be in (0, 1], got {m}"),
        });
    }
    let values = target
        .values
        .iter()
        .zip(&online.values)
        .map(|(&t, &o)| m * t + (1.0 - m) * o)
        .collect();
    ParamVector::new(values, target.layout.clone())
}

/// Mean absolute difference between two compatible parameter vectors.
pub fn param_l1_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if !a.compatible(b) {
        return Err(Error::LayoutMismatch { context: "param_l1_distance" });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.values.iter().zip(&b.values).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Unit-norm embedding tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    embedding: Vec<f64>,
    pub client_id: usize,
    pub volume_id: usize,
    pub partition: usize,
}

impl FeatureVector {
    /// Wrap an embedding, enforcing the unit-norm invariant to 1e-9.
    pub fn new(embedding: Vec<f64>, client_id: usize, volume_id: usize, partition: usize) -> Result<Self> {
        let norm: f64 = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateVector { norm });
        }
        Ok(Self { embedding, client_id, volume_id, partition })
    }

    /// Normalize an arbitrary nonzero vector and tag it.
    pub fn from_raw(raw: &[f64], client_id: usize, volume_id: usize, partition: usize) -> Result<Self> {
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= crate::numerics::NORM_EPSILON {
            return Err(Error::DegenerateVector { norm });
        }
        let embedding = raw.iter().map(|v| v / norm).collect();
        Ok(Self { embedding, client_id, volume_id, partition })
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

/// Online half of a BYOL-style pair: encoder plus predictor.
#[derive(Debug, Clone)]
pub struct OnlineNetwork {
    pub encoder: ParamVector,
    pub predictor: ParamVector,
}

/// Target half: an encoder with the same layout as the online encoder.
#[derive(Debug, Clone)]
pub struct TargetNetwork {
    pub encoder: ParamVector,
}

/// Fully-connected network: ReLU between layers, optional unit-norm output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub normalize_output: bool,
}

impl MlpSpec {
    /// Encoder over flattened slices: input -> hidden -> feature, normalized.
    pub fn encoder(input_dim: usize, hidden_dim: usize, feature_dim: usize) -> Self {
        Self {
            name: "enc".into(),
            dims: vec![input_dim, hidden_dim, feature_dim],
            normalize_output: true,
        }
    }

    /// Predictor head: feature -> feature with one hidden layer, raw output.
    pub fn predictor(feature_dim: usize) -> Self {
        Self {
            name: "pred".into(),
            dims: vec![feature_dim, feature_dim, feature_dim],
            normalize_output: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("spec has at least one dim")
    }

    pub fn layout(&self) -> Layout {
        let mut entries = Vec::new();
        for (i, pair) in self.dims.windows(2).enumerate() {
            entries.push((format!("{}.w{i}", self.name), vec![pair[0], pair[1]]));
            entries.push((format!("{}.b{i}", self.name), vec![pair[1]]));
        }
        Layout::new(entries)
    }

    /// He-style initialization: weights N(0, sqrt(2/fan_in)), zero biases.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector {
        let layout = self.layout();
        let mut values = Vec::with_capacity(layout.param_count());
        for pair in self.dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid stddev");
            for _ in 0..fan_in * fan_out {
                values.push(normal.sample(rng));
            }
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
        ParamVector::new(values, layout).expect("init produces finite values")
    }

    /// Register the parameters as tape leaves, one per layout entry.
    pub fn stage_params(&self, tape: &mut GradTape, params: &ParamVector) -> Result<StagedParams> {
        if params.layout() != &self.layout() {
            return Err(Error::LayoutMismatch { context: "stage_params" });
        }
        let mut ids = Vec::new();
        let mut offset = 0;
        for (_, shape) in params.layout().entries() {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), params.values()[offset..offset + n].to_vec())?;
            ids.push(tape.leaf(t));
            offset += n;
        }
        Ok(StagedParams { ids })
    }

    /// Forward through staged parameters; input is a `[input_dim]` vector
    /// (or a flattenable `[h, w]` image handled by the caller).
    pub fn forward_staged(
        &self,
        tape: &mut GradTape,
        staged: &StagedParams,
        input: ValueId,
    ) -> Result<ValueId> {
        let n_layers = self.dims.len() - 1;
        let mut x = input;
        for layer in 0..n_layers {
            let w = staged.ids[2 * layer];
            let b = staged.ids[2 * layer + 1];
            x = tape.affine(x, w, b)?;
            if layer + 1 < n_layers {
                x = tape.relu(x)?;
            }
        }
        if self.normalize_output {
            x = tape.l2_normalize(x)?;
        }
        Ok(x)
    }

    /// Forward pass without keeping gradients.
    pub fn forward(&self, params: &ParamVector, input: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let flat = flatten_input(input, self.input_dim())?;
        let x = tape.leaf(flat);
        let staged = self.stage_params(&mut tape, params)?;
        let out = self.forward_staged(&mut tape, &staged, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape leaf ids for one network's parameters, in layout order.
#[derive(Debug)]
pub struct StagedParams {
    ids: Vec<ValueId>,
}

impl StagedParams {
    /// Assemble from explicit leaf ids, in layout order. Lets callers
    /// differentiate with respect to a single layer while holding the
    /// rest constant.
    pub fn from_ids(ids: Vec<ValueId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[ValueId] {
        &self.ids
    }

    /// Concatenate layer adjoints back into a flat gradient.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in &self.ids {
            out.extend_from_slice(grads.wrt(id).data());
        }
        out
    }
}

/// Flatten a `[h, w]` image (or pass through a vector) to `[input_dim]`.
pub fn flatten_input(image: &Tensor, input_dim: usize) -> Result<Tensor> {
    if image.len() != input_dim {
        return Err(Error::ShapeMismatch {
            context: "encoder input",
            expected: vec![input_dim],
            found: image.shape().to_vec(),
        });
    }
    Tensor::from_vec(image.data().to_vec())
}

/// Encode one image into a tagged unit-norm feature.
pub fn forward_embed(
    spec: &MlpSpec,
    encoder: &ParamVector,
    image: &Tensor,
    client_id: usize,
    volume_id: usize,
    partition: usize,
) -> Result<FeatureVector> {
    let out = spec.forward(encoder, image)?;
    FeatureVector::new(out.data().to_vec(), client_id, volume_id, partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_spec() -> MlpSpec {
        MlpSpec::encoder(6, 5, 4)
    }

    fn random_params(seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        small_spec().init_params(&mut rng)
    }

    fn random_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layout_param_count_matches_values() {
        let p = random_params(1);
        assert_eq!(p.len(), p.layout().param_count());
        assert_eq!(p.len(), 6 * 5 + 5 + 5 * 4 + 4);
    }

    #[test]
    fn zero_weights_give_degenerate_embedding() {
        let spec = small_spec();
        let zeros = ParamVector::zeros(spec.layout());
        let err = forward_embed(&spec, &zeros, &random_image(2), 0, 0, 0).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { .. }));
    }

    #[test]
    fn forward_embed_is_deterministic_and_unit_norm() {
        let spec = small_spec();
        let params = random_params(3);
        let image = random_image(4);
        let a = forward_embed(&spec, &params, &image, 1, 2, 3).unwrap();
        let b = forward_embed(&spec, &params, &image, 1, 2, 3).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.embedding().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
        assert_eq!((a.client_id, a.volume_id, a.partition), (1, 2, 3));
    }

    #[test]
    fn ema_with_m_one_keeps_target() {
        let target = random_params(5);
        let online = random_params(6);
        let out = ema_update(&target, &online, 1.0).unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn ema_ones_zeros() {
        let layout = Layout::new(vec![("w".into(), vec![4])]);
        let target = ParamVector::new(vec![1.0; 4], layout.clone()).unwrap();
        let online = ParamVector::zeros(layout);
        let out = ema_update(&target, &online, 0.99).unwrap();
        for &v in out.values() {
            assert!((v - 0.99).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_rejects_bad_momentum_and_layout() {
        let target = random_params(7);
        let online = random_params(8);
        assert!(ema_update(&target, &online, 0.0).is_err());
        assert!(ema_update(&target, &online, 1.5).is_err());
        let other = MlpSpec::predictor(4).init_params(&mut ChaCha8Rng::seed_from_u64(9));
        assert!(matches!(
            ema_update(&target, &other, 0.5).unwrap_err(),
            Error::LayoutMismatch { .. }
        ));
    }

    #[test]
    fn l1_distance_basics() {
        let layout = Layout::new(vec![("w".into(), vec![2])]);
        let a = ParamVector::new(vec![1.0, 3.0], layout.clone()).unwrap();
        let b = ParamVector::new(vec![2.0, 5.0], layout.clone()).unwrap();
        assert_eq!(param_l1_distance(&a, &a).unwrap(), 0.0);
        assert!((param_l1_distance(&a, &b).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn l1_distance_symmetric_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = Layout::new(vec![("w".into(), vec![32])]);
        for _ in 0..50 {
            let rand_pv = |rng: &mut ChaCha8Rng| {
                ParamVector::new((0..32).map(|_| rng.gen_range(-2.0..2.0)).collect(), layout.clone()).unwrap()
            };
            let a = rand_pv(&mut rng);
            let b = rand_pv(&mut rng);
            let c = rand_pv(&mut rng);
            let dab = param_l1_distance(&a, &b).unwrap();
            let dba = param_l1_distance(&b, &a).unwrap();
            assert_eq!(dab, dba);
            let dac = param_l1_distance(&a, &c).unwrap();
            let dcb = param_l1_distance(&c, &b).unwrap();
            assert!(dab <= dac + dcb + 1e-15);
        }
    }

    #[test]
    fn ema_contraction_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let layout = Layout::new(vec![("w".into(), vec![64])]);
        for _ in 0..20 {
            let target =
                ParamVector::new((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(), layout.clone()).unwrap();
            let online =
                ParamVector::new((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(), layout.clone()).unwrap();
            let m = rng.gen_range(0.1..0.999);
            let moved = ema_update(&target, &online, m).unwrap();
            let before = param_l1_distance(&target, &online).unwrap();
            let after = param_l1_distance(&moved, &online).unwrap();
            assert!((after - m * before).abs() < 1e-12, "contraction off: {after} vs {}", m * before);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_layout_and_f32_values() {
        let p = random_params(33);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(
            buf.len() as u64,
            4 + 4 + p.layout().entries().iter().map(|(n, s)| 4 + n.len() + 4 + 4 * s.len()).sum::<usize>() as u64
                + p.wire_bytes()
        );
        let q = ParamVector::read_from(buf.as_slice()).unwrap();
        assert_eq!(p.layout(), q.layout());
        for (&a, &b) in p.values().iter().zip(q.values()) {
            assert_eq!(a as f32, b as f32);
        }
    }

    #[test]
    fn feature_vector_rejects_non_unit() {
        assert!(FeatureVector::new(vec![1.0, 1.0], 0, 0, 0).is_err());
        assert!(FeatureVector::new(vec![0.6, 0.8], 0, 0, 0).is_ok());
    }
}
