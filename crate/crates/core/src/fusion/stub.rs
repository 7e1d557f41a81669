//! Deterministic stand-in for pretrained image and text backbones.
//!
//! Image vectors are a per-class center plus per-image noise, so a labeled
//! image carries a learnable signal. Text vectors are a signed hashed bag of
//! caption tokens and hashtags.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureError, FeatureTable, Modality};
use crate::seed::{derive_seed, stage_rng};
use crate::text::normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubExtractor {
    pub seed: u64,
    pub image_dim: usize,
    pub text_dim: usize,
    /// Scale of the class center relative to unit per-dimension noise.
    pub separation: f32,
}

impl Default for StubExtractor {
    fn default() -> Self {
        Self {
            seed: 0,
            image_dim: 64,
            text_dim: 32,
            separation: 1.5,
        }
    }
}

impl StubExtractor {
    fn gaussian(&self, stage: &str, dim: usize) -> Vec<f32> {
        let mut rng = stage_rng(self.seed, stage);
        (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    /// Feature vector for one image. `label` is the class name when known.
    pub fn image_vector(&self, example_id: &str, label: Option<&str>) -> Vec<f32> {
        let mut v = self.gaussian(&format!("stub/image/{example_id}"), self.image_dim);
        if let Some(label) = label {
            let center = self.gaussian(&format!("stub/class/{label}"), self.image_dim);
            v.iter_mut().zip(center).for_each(|(x, c)| *x += self.separation * c);
        }
        v
    }

    /// L2-normalized signed feature hash of the caption's tokens and hashtags.
    pub fn text_vector(&self, caption: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.text_dim];
        if self.text_dim == 0 {
            return v;
        }
        let doc = normalize(caption);
        for term in doc.tokens.iter().chain(&doc.hashtags) {
            let h = Sha256::new()
                .chain_update(self.seed.to_le_bytes())
                .chain_update(term.as_bytes())
                .finalize();
            let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % self.text_dim;
            v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    /// Builds both tables for `(example_id, label, caption)` rows.
    pub fn tables<'a>(
        &self,
        rows: impl IntoIterator<Item = (&'a str, Option<&'a str>, &'a str)>,
    ) -> Result<(FeatureTable, FeatureTable), FeatureError> {
        let mut images = FeatureTable::new(Modality::Image, self.image_dim);
        let mut texts = FeatureTable::new(Modality::Text, self.text_dim);
        for (id, label, caption) in rows {
            images.insert(id, self.image_vector(id, label))?;
            texts.insert(id, self.text_vector(caption))?;
        }
        Ok((images, texts))
    }

    /// A child extractor with an independent seed.
    pub fn derive(&self, stage: &str) -> Self {
        Self {
            seed: derive_seed(self.seed, stage),
            ..self.clone()
        }
    }
}
