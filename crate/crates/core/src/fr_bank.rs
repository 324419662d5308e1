//! Face-embedding models: the opaque image → unit-vector functions behind
//! the attack loss and every protection metric.
//!
//! The mock factory builds small frozen convolutional embedders that are
//! deterministic, differentiable and decorrelated across seeds — enough to
//! exercise ensemble-transfer logic at desk scale. Real pretrained weights
//! plug in through the registry/adapter path behind the same trait.

use crate::autodiff::{self, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// An opaque face-recognition embedding function. Outputs are L2-normalized
/// and deterministic for a fixed input.
pub trait EmbeddingModel {
    fn name(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    /// Differentiable embedding of an `[h, w, 3]` unit-interval image node.
    fn embed_var(&self, image: &Var) -> Var;

    fn embed(&self, image: &Array3<f64>) -> Array1<f64> {
        let out = self.embed_var(&Var::constant(image.clone().into_dyn()));
        out.value()
            .clone()
            .into_dimensionality::<Ix1>()
            .expect("embedding must be a vector")
    }

    fn embed_batch(&self, images: &[Array3<f64>]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((images.len(), self.embedding_dim()));
        for (i, img) in images.iter().enumerate() {
            out.row_mut(i).assign(&self.embed(img));
        }
        out
    }
}

/// `dot(e1, e2) / (‖e1‖·‖e2‖)`.
pub fn cosine_similarity(e1: &Array1<f64>, e2: &Array1<f64>) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::contract(format!(
            "embedding dims differ: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    let n1 = e1.dot(e1).sqrt();
    let n2 = e2.dot(e2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok(e1.dot(e2) / (n1 * n2))
}

/// L2-normalize a vector node, differentiably.
pub fn normalize_var(v: &Var) -> Var {
    let norm = v.mul(v).sum_all().sqrt_eps(1e-24);
    v.mul_scalar_var(&norm.recip())
}

/// Differentiable cosine of two embedding nodes (normalized internally).
pub fn cosine_var(e1: &Var, e2: &Var) -> Var {
    normalize_var(e1).mul(&normalize_var(e2)).sum_all()
}

struct ConvLayer {
    weight: ArrayD<f64>,
    bias: ArrayD<f64>,
    stride: usize,
}

/// Frozen random-weight convolutional embedder: resize → scale to [-1, 1] →
/// three strided convolutions → global average pooling → per-channel
/// standardization (calibrated on procedural noise) → L2 normalization.
/// Weights are clipped at construction so the map stays Lipschitz-tame.
pub struct ConvEmbedder {
    name: String,
    input_side: usize,
    layers: Vec<ConvLayer>,
    center: Array1<f64>,
    scale: Array1<f64>,
    dim: usize,
}

impl ConvEmbedder {
    const WEIGHT_CLIP: f64 = 0.5;

    pub fn random(name: impl Into<String>, seed: u64, dim: usize) -> ConvEmbedder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_side = 32;
        let widths = [3usize, 16, 32, dim];
        let mut layers = Vec::new();
        for k in 0..3 {
            let (ci, co) = (widths[k], widths[k + 1]);
            let bound = (1.6 / (ci as f64 * 9.0)).sqrt();
            let weight = ArrayD::from_shape_fn(IxDyn(&[3, 3, ci, co]), |_| {
                rng.gen_range(-bound..bound)
                    .clamp(-Self::WEIGHT_CLIP, Self::WEIGHT_CLIP)
            });
            let bias = ArrayD::from_shape_fn(IxDyn(&[co]), |_| rng.gen_range(-0.05..0.05));
            layers.push(ConvLayer {
                weight,
                bias,
                stride: 2,
            });
        }
        let mut model = ConvEmbedder {
            name: name.into(),
            input_side,
            layers,
            center: Array1::zeros(dim),
            scale: Array1::ones(dim),
            dim,
        };
        model.calibrate(seed ^ 0x5eed_ca11);
        model
    }

    /// Sets per-channel centering/scaling from pooled responses on a small
    /// deterministic batch of smooth noise images. Centering is what makes
    /// embeddings of correlated natural images spread over the sphere
    /// instead of collapsing onto a common direction.
    fn calibrate(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 16;
        let side = self.input_side;
        let mut pooled = Array2::<f64>::zeros((n, self.dim));
        for i in 0..n {
            // smooth random field: sum of a few low-frequency waves
            let mut params = Vec::new();
            for _ in 0..6 {
                params.push((
                    rng.gen_range(0.2..3.0),
                    rng.gen_range(0.2..3.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.05..0.3),
                ));
            }
            let img = Array3::from_shape_fn((side, side, 3), |(r, c, ch)| {
                let mut v: f64 = 0.45 + 0.1 * ch as f64;
                for (fr, fc, phase, amp) in &params {
                    v += amp
                        * (fr * r as f64 / side as f64 * std::f64::consts::TAU
                            + fc * c as f64 / side as f64 * std::f64::consts::TAU
                            + phase
                            + ch as f64)
                            .sin();
                }
                v.clamp(0.0, 1.0)
            });
            let gap = self.pooled_features(&Var::constant(img.into_dyn()));
            pooled
                .row_mut(i)
                .assign(&gap.value().clone().into_dimensionality::<Ix1>().unwrap());
        }
        let mean = pooled.mean_axis(ndarray::Axis(0)).unwrap();
        let mut std = Array1::<f64>::zeros(self.dim);
        for j in 0..self.dim {
            let col = pooled.column(j);
            let m = mean[j];
            std[j] = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        }
        self.center = mean;
        self.scale = std.mapv(|s| s + 1e-3);
    }

    fn pooled_features(&self, image: &Var) -> Var {
        let resized = autodiff::bilinear_resize(image, self.input_side, self.input_side);
        let mut x = resized.scale(2.0).add_scalar(-1.0);
        for layer in &self.layers {
            let w = Var::constant(layer.weight.clone());
            let b = Var::constant(layer.bias.clone());
            x = autodiff::conv2d(&x, &w, &b, layer.stride, 1).leaky_relu(0.2);
        }
        autodiff::global_avg_pool(&x)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "kind": "embedding_model",
            "adapter": "conv-gap-v1",
            "name": self.name,
            "input_side": self.input_side,
            "dim": self.dim,
        }));
        for (i, layer) in self.layers.iter().enumerate() {
            c.push_f64(format!("layer{i}.weight"), layer.weight.clone());
            c.push_f64(format!("layer{i}.bias"), layer.bias.clone());
        }
        c.push_f64("center", self.center.clone().into_dyn());
        c.push_f64("scale", self.scale.clone().into_dyn());
        c.write_to(path)
    }
}

impl EmbeddingModel for ConvEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn embed_var(&self, image: &Var) -> Var {
        let gap = self.pooled_features(image);
        let centered = gap
            .sub(&Var::constant(self.center.clone().into_dyn()))
            .mul(&Var::constant(self.scale.mapv(f64::recip).into_dyn()));
        normalize_var(&centered)
    }
}

/// Ordered collection of embedding models with optional hold-out index.
pub struct ModelBank {
    models: Vec<Arc<dyn EmbeddingModel>>,
    pub holdout: Option<usize>,
}

impl ModelBank {
    pub fn new(models: Vec<Arc<dyn EmbeddingModel>>) -> Result<ModelBank> {
        if models.is_empty() {
            return Err(Error::contract("model bank needs K >= 1 models"));
        }
        let mut names: Vec<&str> = models.iter().map(|m| m.name()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != models.len() {
            return Err(Error::contract("model bank names must be unique"));
        }
        Ok(ModelBank {
            models,
            holdout: None,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get(&self, i: usize) -> &dyn EmbeddingModel {
        self.models[i].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn EmbeddingModel> {
        self.models.iter().map(|m| m.as_ref())
    }

    pub fn models(&self) -> &[Arc<dyn EmbeddingModel>] {
        &self.models
    }

    /// Splits off model `idx` as the black-box victim, keeping the rest for
    /// ensemble training (the hold-one-out protocol).
    pub fn hold_one_out(&self, idx: usize) -> Result<(ModelBank, Arc<dyn EmbeddingModel>)> {
        if idx >= self.models.len() {
            return Err(Error::contract(format!(
                "hold-out index {idx} out of range for bank of {}",
                self.models.len()
            )));
        }
        if self.models.len() < 2 {
            return Err(Error::contract("hold-one-out needs K >= 2"));
        }
        let victim = Arc::clone(&self.models[idx]);
        let rest: Vec<Arc<dyn EmbeddingModel>> = self
            .models
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, m)| Arc::clone(m))
            .collect();
        Ok((ModelBank::new(rest)?, victim))
    }
}

/// `k` frozen random embedders with derived seeds. Same `(k, seed, dim)`
/// always builds the identical bank.
pub fn build_mock_bank(k: usize, seed: u64, dim: usize) -> Result<ModelBank> {
    if k < 1 {
        return Err(Error::contract("build_mock_bank: k >= 1"));
    }
    let models: Vec<Arc<dyn EmbeddingModel>> = (0..k)
        .map(|i| {
            Arc::new(ConvEmbedder::random(
                format!("mock-{i:02}"),
                seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64 * 1013),
                dim,
            )) as Arc<dyn EmbeddingModel>
        })
        .collect();
    ModelBank::new(models)
}

/// One registry row: which adapter loads which checkpoint, plus cached
/// FAR thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub adapter: String,
    pub path: String,
    pub embedding_dim: usize,
    #[serde(default)]
    pub far_thresholds: std::collections::BTreeMap<String, f64>,
}

/// Wraps an external checkpoint behind the embedding contract. The
/// `conv-gap-v1` adapter reads this crate's container format; unknown
/// adapters and unreadable files report descriptive errors.
pub fn load_external_model(path: impl AsRef<Path>, name: &str) -> Result<Arc<dyn EmbeddingModel>> {
    let path = path.as_ref();
    let c = Container::read_from(path)?;
    if c.meta["kind"] != "embedding_model" {
        return Err(Error::format(format!(
            "{}: not an embedding model container",
            path.display()
        )));
    }
    let adapter = c.meta["adapter"].as_str().unwrap_or("");
    match adapter {
        "conv-gap-v1" => {
            let input_side = c.meta["input_side"].as_u64().unwrap_or(32) as usize;
            let dim = c.meta["dim"]
                .as_u64()
                .ok_or_else(|| Error::format("embedding container missing dim"))?
                as usize;
            let mut layers = Vec::new();
            for i in 0.. {
                let wname = format!("layer{i}.weight");
                if !c.names().any(|n| n == wname) {
                    break;
                }
                layers.push(ConvLayer {
                    weight: c.get_f64(&wname)?.clone(),
                    bias: c.get_f64(&format!("layer{i}.bias"))?.clone(),
                    stride: 2,
                });
            }
            if layers.is_empty() {
                return Err(Error::format(format!(
                    "{}: adapter conv-gap-v1 found no layers",
                    path.display()
                )));
            }
            Ok(Arc::new(ConvEmbedder {
                name: name.to_string(),
                input_side,
                layers,
                center: c
                    .get_f64("center")?
                    .clone()
                    .into_dimensionality::<Ix1>()
                    .map_err(|e| Error::format(e.to_string()))?,
                scale: c
                    .get_f64("scale")?
                    .clone()
                    .into_dimensionality::<Ix1>()
                    .map_err(|e| Error::format(e.to_string()))?,
                dim,
            }))
        }
        other => Err(Error::format(format!(
            "unknown embedding adapter '{other}' for model '{name}'"
        ))),
    }
}

/// Builds a bank from registry rows, resolving relative paths against
/// `base_dir`.
pub fn bank_from_registry(entries: &[RegistryEntry], base_dir: &Path) -> Result<ModelBank> {
    let mut models = Vec::new();
    for e in entries {
        let p = base_dir.join(&e.path);
        models.push(load_external_model(&p, &e.name)?);
    }
    ModelBank::new(models)
}

/// Empirical FAR threshold: the smallest similarity τ (higher-interpolation
/// quantile) such that the fraction of impostor similarities above τ equals
/// `far`. `far = 1` returns `min(sims) - 1e-6` so every pair is accepted.
pub fn far_threshold_from_sims(sims: &[f64], far: f64) -> Result<f64> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::contract(format!("far must lie in (0, 1], got {far}")));
    }
    if sims.is_empty() {
        return Err(Error::InsufficientData("no impostor similarities".into()));
    }
    let mut sorted = sims.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let idx = ((1.0 - far) * n as f64).ceil() as isize - 1;
    if idx < 0 {
        return Ok(sorted[0] - 1e-6);
    }
    Ok(sorted[(idx as usize).min(n - 1)])
}

/// Calibrates τ at the requested FAR from impostor image pairs. Requires at
/// least `10 / far` pairs.
pub fn far_threshold(
    model: &dyn EmbeddingModel,
    impostor_pairs: &[(Array3<f64>, Array3<f64>)],
    far: f64,
) -> Result<f64> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::contract(format!("far must lie in (0, 1], got {far}")));
    }
    let required = (10.0 / far).ceil() as usize;
    if impostor_pairs.len() < required {
        return Err(Error::InsufficientData(format!(
            "far_threshold at far={far} needs at least {required} impostor pairs, got {}",
            impostor_pairs.len()
        )));
    }
    let sims: Vec<f64> = impostor_pairs
        .iter()
        .map(|(a, b)| cosine_similarity(&model.embed(a), &model.embed(b)))
        .collect::<Result<_>>()?;
    far_threshold_from_sims(&sims, far)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    pub(crate) fn noise_image(seed: u64, side: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = Vec::new();
        for _ in 0..5 {
            waves.push((
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..6.28),
                rng.gen_range(0.1..0.3),
            ));
        }
        Array3::from_shape_fn((side, side, 3), |(r, c, ch)| {
            let mut v: f64 = 0.5;
            for (fr, fc, ph, amp) in &waves {
                v += amp
                    * (fr * r as f64 / side as f64 * 6.28
                        + fc * c as f64 / side as f64 * 6.28
                        + ph
                        + 0.7 * ch as f64)
                        .sin();
            }
            v.clamp(0.0, 1.0)
        })
    }

    #[test]
    fn cosine_similarity_hand_values() {
        let e = arr1(&[1.0, 2.0, -1.0]);
        assert!((cosine_similarity(&e, &e).unwrap() - 1.0).abs() < 1e-12);
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let c = arr1(&[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]);
        assert!((cosine_similarity(&c, &a).unwrap() - 0.7071).abs() < 1e-4);
        let neg = e.mapv(|v| -v);
        assert!((cosine_similarity(&e, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&arr1(&[0.0, 0.0]), &a.clone()).is_err());
    }

    #[test]
    fn mock_bank_is_deterministic_and_normalized() {
        let bank1 = build_mock_bank(3, 42, 64).unwrap();
        let bank2 = build_mock_bank(3, 42, 64).unwrap();
        let img = noise_image(5, 48);
        for i in 0..3 {
            let e1 = bank1.get(i).embed(&img);
            let e2 = bank2.get(i).embed(&img);
            assert_eq!(e1, e2, "same (k, seed) must rebuild identical models");
            let norm = e1.dot(&e1).sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn different_seeds_decorrelate() {
        let bank = build_mock_bank(4, 9, 32).unwrap();
        let images: Vec<_> = (0..6).map(|i| noise_image(100 + i, 40)).collect();
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..4 {
            for b in (a + 1)..4 {
                for img in &images {
                    let ea = bank.get(a).embed(img);
                    let eb = bank.get(b).embed(img);
                    total += cosine_similarity(&ea, &eb).unwrap().abs();
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        assert!(mean < 0.5, "mean cross-model cosine {mean}");
    }

    #[test]
    fn batching_matches_single_calls() {
        let bank = build_mock_bank(1, 3, 16).unwrap();
        let images: Vec<_> = (0..3).map(|i| noise_image(i, 32)).collect();
        let batch = bank.get(0).embed_batch(&images);
        for (i, img) in images.iter().enumerate() {
            let single = bank.get(0).embed(img);
            for j in 0..16 {
                assert!((batch[(i, j)] - single[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embeddings_have_input_gradients() {
        let bank = build_mock_bank(1, 7, 16).unwrap();
        let img = Var::param(noise_image(2, 24).into_dyn());
        let emb = bank.get(0).embed_var(&img);
        let probe = Var::constant(ArrayD::from_shape_fn(IxDyn(&[16]), |i| {
            0.1 * (i[0] as f64 - 8.0)
        }));
        emb.mul(&probe).sum_all().backward();
        let g = img.grad().expect("input gradient");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn far_threshold_matches_hand_quantiles() {
        let sims: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let tau = far_threshold_from_sims(&sims, 0.1).unwrap();
        assert!((tau - 0.9).abs() < 1e-12);
        let tau = far_threshold_from_sims(&sims, 1.0).unwrap();
        assert!(tau < 0.1 && (0.1 - tau) < 1e-3);
        assert!(sims.iter().all(|&s| s > tau), "far=1 accepts all pairs");
    }

    #[test]
    fn far_threshold_is_monotone_in_far() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let sims: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for far in [0.02, 0.05, 0.1, 0.25, 0.5, 1.0] {
            let tau = far_threshold_from_sims(&sims, far).unwrap();
            assert!(tau <= last, "tau must not grow as far grows");
            last = tau;
        }
    }

    #[test]
    fn far_threshold_requires_enough_pairs() {
        let bank = build_mock_bank(1, 5, 16).unwrap();
        let pairs: Vec<_> = (0..5)
            .map(|i| (noise_image(i, 24), noise_image(50 + i, 24)))
            .collect();
        let err = far_threshold(bank.get(0), &pairs, 0.01).unwrap_err();
        assert!(err.to_string().contains("1000"), "error states required count: {err}");
    }

    #[test]
    fn external_model_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embedder.uvtc");
        let original = ConvEmbedder::random("m0", 77, 24);
        original.write_to(&path).unwrap();
        let loaded = load_external_model(&path, "m0").unwrap();
        assert_eq!(loaded.embedding_dim(), 24);
        let img = noise_image(4, 36);
        assert_eq!(loaded.embed(&img), original.embed(&img));
        assert_eq!(loaded.embed(&img), loaded.embed(&img), "deterministic across calls");
        assert_eq!(loaded.embed(&img).len(), loaded.embedding_dim());

        let missing = dir.path().join("nope.uvtc");
        let err = load_external_model(&missing, "x").err().expect("missing file must fail");
        assert!(err.to_string().contains("nope.uvtc"), "{err}");

        // unknown adapter
        let mut c = Container::new(serde_json::json!({
            "kind": "embedding_model",
            "adapter": "resnet-onnx",
            "dim": 512,
        }));
        c.push_f64("w", arr1(&[0.0]).into_dyn());
        let bad = dir.path().join("bad.uvtc");
        c.write_to(&bad).unwrap();
        let err = load_external_model(&bad, "x").err().expect("unknown adapter must fail");
        assert!(err.to_string().contains("resnet-onnx"));
    }

    #[test]
    fn hold_one_out_splits_bank() {
        let bank = build_mock_bank(3, 11, 16).unwrap();
        let (train, victim) = bank.hold_one_out(1).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(victim.name(), "mock-01");
        assert!(train.iter().all(|m| m.name() != "mock-01"));
        assert!(bank.hold_one_out(5).is_err());
    }

    #[test]
    fn bank_rejects_duplicate_names_and_empty() {
        assert!(ModelBank::new(vec![]).is_err());
        let a = Arc::new(ConvEmbedder::random("same", 1, 8)) as Arc<dyn EmbeddingModel>;
        let b = Arc::new(ConvEmbedder::random("same", 2, 8)) as Arc<dyn EmbeddingModel>;
        assert!(ModelBank::new(vec![a, b]).is_err());
    }
}
