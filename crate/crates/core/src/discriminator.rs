//! Codebook labels and the (K+1)-class patch discriminator.
//!
//! Real images are labelled per feature-map position with the index of the nearest
//! codeword (classes `1..=K`); reconstructions are labelled with class 0.

use candle_core::{DType, Tensor};
use candle_nn::ops::log_softmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::nn::{Collection, Conv, ConvSpec, ConvStack, Init, ParamStore};
use crate::ops;

/// Probabilities are floored at this value inside every cross-entropy.
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    entries: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Codebook {
    pub fn new(entries: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let dim = entries.first().map(Vec::len).unwrap_or(0);
        if entries.is_empty() || dim == 0 {
            return Err(Error::invalid(
                "codebook needs at least one non-empty entry",
            ));
        }
        if entries
            .iter()
            .any(|e| e.len() != dim || e.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid(
                "codebook entries must be finite and equally sized",
            ));
        }
        Ok(Self { entries, seed })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].len()
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Number of discriminator classes, `K + 1`.
    pub fn classes(&self) -> usize {
        self.len() + 1
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(feature: &[f64], entries: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, e) in entries.iter().enumerate() {
        let d = sq_dist(feature, e);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Seeded k-means (k-means++ seeding, Lloyd iterations until assignments settle).
pub fn build_codebook(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::invalid("codebook size must be at least 1"));
    }
    if k > samples.len() {
        return Err(Error::invalid(format!(
            "codebook size {k} exceeds the {} available samples",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("feature samples differ in dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres = vec![samples[rng.random_range(0..samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = samples.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..samples.len())
        };
        centres.push(samples[pick].clone());
        let c = centres.last().expect("just pushed");
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, c));
        }
    }

    let mut assign = vec![usize::MAX; samples.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (a, s) in assign.iter_mut().zip(samples) {
            let j = nearest(s, &centres);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, s) in assign.iter().zip(samples) {
            counts[*a] += 1;
            for (acc, v) in sums[*a].iter_mut().zip(s) {
                *acc += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centres[j] = sums[j].iter().map(|v| v / counts[j] as f64).collect();
            }
        }
    }
    Codebook::new(centres, seed)
}

/// Class of the nearest codeword (`1..=K`), lowest index on ties.
pub fn nearest_code(feature: &[f64], codebook: &Codebook) -> Result<usize> {
    if feature.len() != codebook.dim() {
        return Err(Error::shape(format!(
            "feature has {} dims, codebook {}",
            feature.len(),
            codebook.dim()
        )));
    }
    Ok(nearest(feature, &codebook.entries) + 1)
}

/// [`nearest_code`] as a one-hot vector over `K + 1` classes.
pub fn nearest_code_one_hot(feature: &[f64], codebook: &Codebook) -> Result<Vec<f64>> {
    let mut v = vec![0.0; codebook.classes()];
    v[nearest_code(feature, codebook)?] = 1.0;
    Ok(v)
}

/// Per-position feature vectors of an `[N, d, h, w]` map, in `(n, y, x)` order.
pub fn feature_vectors(features: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, d, h, w) = features.dims4()?;
    let flat = ops::to_vec(&features.permute((0, 2, 3, 1))?.contiguous()?)?;
    debug_assert_eq!(flat.len(), n * h * w * d);
    Ok(flat.chunks(d.max(1)).map(<[f64]>::to_vec).collect())
}

/// Per-position class labels `[N, h, w]` of an `[N, d, h, w]` feature map.
pub fn label_map(features: &Tensor, codebook: &Codebook) -> Result<Tensor> {
    let (n, _, h, w) = features.dims4()?;
    let labels = feature_vectors(features)?
        .iter()
        .map(|f| nearest_code(f, codebook).map(|c| c as u32))
        .collect::<Result<Vec<u32>>>()?;
    Ok(Tensor::from_vec(labels, (n, h, w), &ops::DEVICE)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub codebook_size: usize,
    pub width: usize,
    /// Extractor depth whose features define the labels; its stride must be 4.
    pub label_depth: usize,
    pub seed: u64,
    /// Upper bound on feature vectors fed to k-means.
    pub max_codebook_samples: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            width: 32,
            label_depth: 2,
            seed: 7,
            max_codebook_samples: 20_000,
        }
    }
}

/// Patch classifier producing `[N, K + 1, H / 4, W / 4]` logits.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    net: ConvStack,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig) -> Result<Self> {
        if config.codebook_size == 0 || config.width == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let w = config.width;
        let specs = [
            ConvSpec::down(3, w, 3, 1),
            ConvSpec::down(w, w, 5, 2),
            ConvSpec::down(w, w, 5, 2),
            ConvSpec::down(w, config.codebook_size + 1, 1, 1),
        ];
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                Conv::trainable(
                    &mut store,
                    Collection::Discriminator,
                    &format!("discriminator.{i}"),
                    s,
                    &mut init,
                    if i == 3 { 0.5 } else { 1.7 },
                    0.0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            store,
            net: ConvStack::new(layers),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn classes(&self) -> usize {
        self.config.codebook_size + 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(&x.affine(2.0, -1.0)?)
    }

    /// Same logits with the discriminator's own parameters outside the graph.
    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward_detached(&x.affine(2.0, -1.0)?)
    }

    /// Class probabilities (softmax over the class axis).
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.forward(x)?, 1)?)
    }

    /// Labels `u(x)` for a batch of real images.
    pub fn labels(
        &self,
        real: &Tensor,
        codebook: &Codebook,
        extractor: &dyn FeatureExtractor,
    ) -> Result<Tensor> {
        if codebook.len() != self.config.codebook_size {
            return Err(Error::shape(format!(
                "codebook has {} entries, discriminator expects {}",
                codebook.len(),
                self.config.codebook_size
            )));
        }
        let feats = extractor.features(real)?;
        let f = feats.get(self.config.label_depth).ok_or_else(|| {
            Error::invalid(format!(
                "extractor has no depth {}",
                self.config.label_depth
            ))
        })?;
        label_map(&f.detach(), codebook)
    }

    /// k-means codebook over label-depth features of real images.
    pub fn build_codebook(
        &self,
        images: &[Tensor],
        extractor: &dyn FeatureExtractor,
    ) -> Result<Codebook> {
        let mut samples = Vec::new();
        for img in images {
            let feats = extractor.features(img)?;
            let f = feats.get(self.config.label_depth).ok_or_else(|| {
                Error::invalid(format!(
                    "extractor has no depth {}",
                    self.config.label_depth
                ))
            })?;
            samples.extend(feature_vectors(f)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        while samples.len() > self.config.max_codebook_samples {
            let i = rng.random_range(0..samples.len());
            samples.swap_remove(i);
        }
        build_codebook(&samples, self.config.codebook_size, self.config.seed)
    }
}

/// Mean over positions of `-log max(p_label, 1e-8)` for `[N, K+1, h, w]` logits and
/// `[N, h, w]` integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = logits.dims4()?;
    if labels.dims() != [n, h, w] {
        return Err(Error::shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let logp = log_softmax(logits, 1)?.maximum(LOG_FLOOR.ln())?;
    let classes = Tensor::arange(0u32, k as u32, &ops::DEVICE)?.reshape((1, k, 1, 1))?;
    let one_hot = labels
        .to_dtype(DType::U32)?
        .unsqueeze(1)?
        .broadcast_eq(&classes)?
        .to_dtype(ops::DTYPE)?;
    let picked = (logp * one_hot)?.sum_all()?;
    Ok((picked.neg()? / (n * h * w) as f64)?)
}

/// `CE(D(x), u(x)) + CE(D(x_hat), 0)`; reconstructions are cut out of the graph.
pub fn disc_loss(
    real: &Tensor,
    fake: &Tensor,
    codebook: &Codebook,
    extractor: &dyn FeatureExtractor,
    disc: &Discriminator,
) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::shape("real and fake batches differ in shape"));
    }
    let labels = disc.labels(real, codebook, extractor)?;
    let real_term = cross_entropy(&disc.forward(real)?, &labels)?;
    let fake_labels = labels.zeros_like()?;
    let fake_term = cross_entropy(&disc.forward(&fake.detach())?, &fake_labels)?;
    Ok((real_term + fake_term)?)
}

/// `CE(D(x_hat), u(x))` with the discriminator frozen: gradients reach `fake` only.
pub fn adv_loss(
    real: &Tensor,
    fake: &Tensor,
    codebook: &Codebook,
    extractor: &dyn FeatureExtractor,
    disc: &Discriminator,
) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::shape("real and fake batches differ in shape"));
    }
    let labels = disc.labels(real, codebook, extractor)?;
    cross_entropy(&disc.forward_detached(fake)?, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ConvPyramid, PyramidConfig};

    fn cb(entries: &[&[f64]]) -> Codebook {
        Codebook::new(entries.iter().map(|e| e.to_vec()).collect(), 0).unwrap()
    }

    #[test]
    fn kmeans_separable_clusters() {
        let mut samples = vec![vec![0.0, 0.0]; 50];
        samples.extend(vec![vec![10.0, 10.0]; 50]);
        let c = build_codebook(&samples, 2, 3).unwrap();
        let mut e = c.entries().to_vec();
        e.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(e, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        assert!(build_codebook(&samples, 101, 3).is_err());
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean_and_deterministic() {
        let samples: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let c = build_codebook(&samples, 1, 9).unwrap();
        assert!((c.entries()[0][0] - 9.5).abs() < 1e-12);
        assert!((c.entries()[0][1] - 123.5).abs() < 1e-12);
        let a = build_codebook(&samples, 4, 11).unwrap();
        let b = build_codebook(&samples, 4, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_code_rules() {
        let c = cb(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(nearest_code(&[0.1, 0.1], &c).unwrap(), 1);
        assert_eq!(nearest_code(&[1.0, 1.0], &c).unwrap(), 2);
        assert_eq!(nearest_code(&[0.5, 0.5], &c).unwrap(), 1);
        assert_eq!(
            nearest_code_one_hot(&[0.9, 1.0], &c).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        assert!(nearest_code(&[0.5], &c).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let logits = Tensor::zeros((2, 3, 2, 2), ops::DTYPE, &ops::DEVICE).unwrap();
        let labels =
            Tensor::from_vec(vec![0u32, 1, 2, 1, 0, 0, 2, 2], (2, 2, 2), &ops::DEVICE).unwrap();
        let ce = ops::scalar(&cross_entropy(&logits, &labels).unwrap()).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
        // a huge margin on the right class: loss vanishes
        let one_hot = labels
            .unsqueeze(1)
            .unwrap()
            .broadcast_eq(
                &Tensor::arange(0u32, 3, &ops::DEVICE)
                    .unwrap()
                    .reshape((1, 3, 1, 1))
                    .unwrap(),
            )
            .unwrap()
            .to_dtype(ops::DTYPE)
            .unwrap();
        let ce = ops::scalar(&cross_entropy(&(one_hot.clone() * 100.0).unwrap(), &labels).unwrap())
            .unwrap();
        assert!(ce >= 0.0 && ce < 1e-12);
        // confidently wrong: bounded by the log floor
        let wrong = labels.zeros_like().unwrap().affine(1.0, 0.0).unwrap();
        let ce = ops::scalar(&cross_entropy(&(one_hot * 1e4).unwrap(), &wrong).unwrap()).unwrap();
        assert!(ce <= -LOG_FLOOR.ln() + 1e-9);
    }

    #[test]
    fn discriminator_shapes_and_frozen_adv_gradient() {
        let cfg = DiscriminatorConfig {
            codebook_size: 4,
            width: 8,
            ..Default::default()
        };
        let d = Discriminator::new(&cfg).unwrap();
        let ex = ConvPyramid::new(&PyramidConfig::default()).unwrap();
        let real = crate::synthetic::image(16, 16, 1)
            .unwrap()
            .image
            .batch()
            .unwrap();
        let fake = crate::synthetic::image(16, 16, 2)
            .unwrap()
            .image
            .batch()
            .unwrap();
        let cb = d.build_codebook(&[real.clone()], &ex).unwrap();
        let logits = d.forward(&real).unwrap();
        assert_eq!(logits.dims(), &[1, 5, 4, 4]);
        let p = d.probabilities(&real).unwrap().sum(1).unwrap();
        for v in ops::to_vec(&p).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }

        let fake_var = candle_core::Var::from_tensor(&fake).unwrap();
        let adv = adv_loss(&real, fake_var.as_tensor(), &cb, &ex, &d).unwrap();
        let grads = adv.backward().unwrap();
        for (_, _, v) in d.store().iter() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
        assert!(grads.get(fake_var.as_tensor()).is_some());

        let dl = disc_loss(&real, fake_var.as_tensor(), &cb, &ex, &d).unwrap();
        let grads = dl.backward().unwrap();
        assert!(grads.get(fake_var.as_tensor()).is_none());
        assert!(d
            .store()
            .iter()
            .all(|(_, _, v)| grads.get(v.as_tensor()).is_some()));
    }
}
