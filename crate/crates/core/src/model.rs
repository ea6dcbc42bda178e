//! Encoder plus VLAD head as one parameter set.

use sha2::{Digest, Sha256};

use crate::encoder::{init_encoder, EncoderParams, FeatureMap, Image, LayerSpec};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::vlad::{aggregate, init_vlad, Descriptor, VladParams};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub vlad: VladParams,
}

impl Model {
    /// Seeded encoder; VLAD centers from k-means over the feature maps of
    /// `samples` under that encoder.
    pub fn init(seed: u64, spec: &LayerSpec, clusters: usize, samples: &[&Image]) -> Result<Self> {
        let encoder = init_encoder(seed, spec)?;
        let maps = samples
            .iter()
            .map(|img| encoder.encode(img))
            .collect::<Result<Vec<_>>>()?;
        let vlad = init_vlad(&maps, clusters, seed.wrapping_add(0x5eed))?;
        Ok(Self { encoder, vlad })
    }

    pub fn feature_map(&self, img: &Image) -> Result<FeatureMap> {
        self.encoder.encode(img)
    }

    pub fn descriptor(&self, img: &Image) -> Result<Descriptor> {
        aggregate(self.feature_map(img)?.view(), &self.vlad)
    }

    /// All tensors in canonical order with their names and trainability.
    pub fn tensors(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight, !l.frozen));
            out.push((format!("encoder.{i}.bias"), &l.bias, !l.frozen));
        }
        out.push(("vlad.weight".into(), &self.vlad.weight, true));
        out.push(("vlad.bias".into(), &self.vlad.bias, true));
        out.push(("vlad.centers".into(), &self.vlad.centers, true));
        out
    }

    /// Mutable tensors in the order of [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.vlad.weight);
        out.push(&mut self.vlad.bias);
        out.push(&mut self.vlad.centers);
        out
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.tensors().into_iter().map(|(_, _, t)| t).collect()
    }

    /// Hex SHA-256 over every tensor's shape and f64 bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t, _) in self.tensors() {
            h.update(name.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every parameter to the nearest f32 so storage is lossless.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images() -> Vec<Image> {
        (0..3)
            .map(|s| {
                Image::new(
                    16,
                    32,
                    (0..512).map(|i| ((i * (s + 3)) % 17) as f64 / 17.0).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic() {
        let imgs = images();
        let refs: Vec<&Image> = imgs.iter().collect();
        let a = Model::init(3, &LayerSpec::default(), 4, &refs).unwrap();
        let b = Model::init(3, &LayerSpec::default(), 4, &refs).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Model::init(4, &LayerSpec::default(), 4, &refs).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn mask_follows_freezing() {
        let imgs = images();
        let refs: Vec<&Image> = imgs.iter().collect();
        let m = Model::init(3, &LayerSpec::default(), 4, &refs).unwrap();
        assert_eq!(m.trainable_mask(), vec![false, false, false, false, true, true, true, true, true]);
        let d = m.descriptor(&imgs[0]).unwrap();
        assert_eq!(d.len(), 4 * 16);
    }
}
