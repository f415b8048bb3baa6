//! Deterministic synthetic modality-incremental data streams.
//!
//! Each modality is a Gaussian class mixture over a shared latent space,
//! observed through two fixed random affine-plus-tanh maps: one producing
//! the "image" vector, one the "text" vector. Both observations of a pair
//! derive from the same latent draw, so they are ground-truth positives.
//! Distinct modalities get distinct maps, which is what makes later-stage
//! training interfere with earlier alignments.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Class latent means live on a sphere of this radius.
pub const LATENT_RADIUS: f64 = 3.0;
/// Class means must be at least this many noise sigmas apart.
pub const SEPARATION_FACTOR: f64 = 4.0;
/// Give up resampling means after this many attempts.
const MAX_MEAN_RESAMPLES: usize = 1000;
/// Modality m owns class labels [m * LABEL_STRIDE, m * LABEL_STRIDE + n_classes).
pub const LABEL_STRIDE: u32 = 1000;

/// Static description of one synthetic modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub modality_id: u32,
    pub n_classes: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub noise_sigma: f64,
    pub generator_seed: u64,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_classes", self.n_classes),
            ("latent_dim", self.latent_dim),
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Parameter(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// One image-text observation pair with its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub class_label: u32,
    pub modality_id: u32,
}

/// Fixed affine-plus-tanh observation map.
#[derive(Debug, Clone)]
struct ObservationMap {
    /// latent_dim x out_dim weight, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
    latent_dim: usize,
    out_dim: usize,
}

impl ObservationMap {
    fn random(latent_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let weight = (0..latent_dim * out_dim).map(|_| rng.normal() * scale).collect();
        let bias = (0..out_dim).map(|_| rng.normal() * 0.1).collect();
        ObservationMap { weight, bias, latent_dim, out_dim }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (k, &zk) in z.iter().enumerate() {
            let row = &self.weight[k * self.out_dim..(k + 1) * self.out_dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += zk * w;
            }
        }
        out.iter_mut().for_each(|v| *v = v.tanh());
        let _ = self.latent_dim;
        out
    }
}

/// Immutable sampler for one modality.
#[derive(Debug, Clone)]
pub struct ModalityGenerator {
    spec: ModalitySpec,
    class_means: Vec<Vec<f64>>,
    image_map: ObservationMap,
    text_map: ObservationMap,
}

/// Build a modality: sample separated class means on the latent sphere and
/// fix the two observation maps, all seeded from the modality spec.
pub fn build_modality(spec: &ModalitySpec) -> Result<ModalityGenerator> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.generator_seed, &[0x6d6f64, spec.modality_id as u64]);

    let min_separation = SEPARATION_FACTOR * spec.noise_sigma;
    let mut class_means: Option<Vec<Vec<f64>>> = None;
    for _ in 0..MAX_MEAN_RESAMPLES {
        let means: Vec<Vec<f64>> = (0..spec.n_classes)
            .map(|_| {
                let mut v: Vec<f64> = (0..spec.latent_dim).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x *= LATENT_RADIUS / norm);
                v
            })
            .collect();
        let mut ok = true;
        'sep: for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let d2: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2.sqrt() < min_separation {
                    ok = false;
                    break 'sep;
                }
            }
        }
        if ok {
            class_means = Some(means);
            break;
        }
    }
    let class_means = class_means.ok_or_else(|| {
        Error::Generation(format!(
            "could not place {} class means at separation {min_separation} after {MAX_MEAN_RESAMPLES} attempts",
            spec.n_classes
        ))
    })?;

    let image_map = ObservationMap::random(spec.latent_dim, spec.image_dim, &mut rng);
    let text_map = ObservationMap::random(spec.latent_dim, spec.text_dim, &mut rng);
    Ok(ModalityGenerator { spec: spec.clone(), class_means, image_map, text_map })
}

impl ModalityGenerator {
    pub fn spec(&self) -> &ModalitySpec {
        &self.spec
    }

    pub fn modality_id(&self) -> u32 {
        self.spec.modality_id
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    /// Global label of local class c.
    pub fn label_of(&self, class: usize) -> u32 {
        self.spec.modality_id * LABEL_STRIDE + class as u32
    }

    /// Local class index of a global label from this modality.
    pub fn class_of(&self, label: u32) -> usize {
        (label - self.spec.modality_id * LABEL_STRIDE) as usize
    }

    /// Draw one pair: uniform class, latent = mean + N(0, sigma^2 I),
    /// observations through the fixed maps plus N(0, (sigma/2)^2 I) noise.
    pub fn sample_one(&self, rng: &mut Rng) -> PairSample {
        let class = rng.uniform_usize(self.spec.n_classes);
        let sigma = self.spec.noise_sigma;
        let z: Vec<f64> = self.class_means[class]
            .iter()
            .map(|&m| m + sigma * rng.normal())
            .collect();
        let obs_sigma = sigma / 2.0;
        let mut image = self.image_map.apply(&z);
        image.iter_mut().for_each(|v| *v += obs_sigma * rng.normal());
        let mut text = self.text_map.apply(&z);
        text.iter_mut().for_each(|v| *v += obs_sigma * rng.normal());
        PairSample {
            image,
            text,
            class_label: self.label_of(class),
            modality_id: self.spec.modality_id,
        }
    }

    pub fn sample_pairs(&self, n: usize, rng: &mut Rng) -> Result<Vec<PairSample>> {
        if n == 0 {
            return Err(Error::Parameter("sample_pairs needs n >= 1".into()));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    /// Canonical noiseless text observation of every class, one row per
    /// class; used as zero-shot class prototypes.
    pub fn class_prompt_vectors(&self) -> Tensor {
        let c = self.spec.n_classes;
        let d = self.spec.text_dim;
        let mut data = Vec::with_capacity(c * d);
        for mean in &self.class_means {
            data.extend(self.text_map.apply(mean));
        }
        Tensor::matrix(c, d, data).unwrap()
    }

    /// Noiseless image observation of a class mean (test support).
    pub fn noiseless_image(&self, class: usize) -> Vec<f64> {
        self.image_map.apply(&self.class_means[class])
    }
}

/// Stack image vectors of samples into an N x d_img tensor.
pub fn image_batch(samples: &[PairSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Contract("empty sample batch".into()));
    }
    let d = samples[0].image.len();
    let mut data = Vec::with_capacity(samples.len() * d);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    Tensor::matrix(samples.len(), d, data)
}

/// Stack text vectors of samples into an N x d_txt tensor.
pub fn text_batch(samples: &[PairSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Contract("empty sample batch".into()));
    }
    let d = samples[0].text.len();
    let mut data = Vec::with_capacity(samples.len() * d);
    for s in samples {
        data.extend_from_slice(&s.text);
    }
    Tensor::matrix(samples.len(), d, data)
}

// ── Dataset dump format ─────────────────────────────────────────────
//
// Flat binary layout for cross-implementation comparison:
//   magic "CCSYN1", then little-endian u32 n, d_img, d_txt,
//   row-major f32 image block, f32 text block, u32 labels.

pub const DATASET_MAGIC: &[u8; 6] = b"CCSYN1";

/// Serialize samples into the flat dataset format.
pub fn write_dataset(samples: &[PairSample]) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot dump an empty dataset".into()));
    }
    let n = samples.len();
    let d_img = samples[0].image.len();
    let d_txt = samples[0].text.len();
    let mut out = Vec::with_capacity(6 + 12 + 4 * (n * d_img + n * d_txt + n));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [n as u32, d_img as u32, d_txt as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        for &x in &s.image {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    for s in samples {
        for &x in &s.text {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    for s in samples {
        out.extend_from_slice(&s.class_label.to_le_bytes());
    }
    Ok(out)
}

/// Parse the flat dataset format back into (images, texts, labels).
pub fn read_dataset(bytes: &[u8]) -> Result<(Tensor, Tensor, Vec<u32>)> {
    if bytes.len() < 18 {
        return Err(Error::Corrupt("dataset shorter than its header".into()));
    }
    if &bytes[..6] != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n, d_img, d_txt) = (word(6), word(10), word(14));
    let expected = 18 + 4 * (n * d_img + n * d_txt + n);
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "dataset payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut off = 18;
    let read_f32_block = |count: usize, off: &mut usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(f32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap()) as f64);
            *off += 4;
        }
        v
    };
    let images = Tensor::matrix(n, d_img, read_f32_block(n * d_img, &mut off))?;
    let texts = Tensor::matrix(n, d_txt, read_f32_block(n * d_txt, &mut off))?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        off += 4;
    }
    Ok((images, texts, labels))
}

/// Default three-modality stream: decreasing class counts, distinct seeds.
pub fn default_stream_specs(base_seed: u64, latent_dim: usize, image_dim: usize, text_dim: usize, noise_sigma: f64) -> Vec<ModalitySpec> {
    [(1u32, 8usize), (2, 6), (3, 5)]
        .iter()
        .map(|&(modality_id, n_classes)| ModalitySpec {
            modality_id,
            n_classes,
            latent_dim,
            image_dim,
            text_dim,
            noise_sigma,
            generator_seed: base_seed.wrapping_add(modality_id as u64 * 7919),
        })
        .collect()
}
