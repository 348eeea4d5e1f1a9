//! The assembled system: mapping networks, generator, critic and extractor.

use cisnet_autograd::param::join;
use cisnet_autograd::{Graph, Module, Param, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::AdversaryParams;
use crate::config::TrainConfig;
use crate::error::{check_dim, CisError, Result};
use crate::extractor::{decide_bits, ExtractorParams};
use crate::generator::GeneratorParams;
use crate::image::{stack, unstack, ImageTensor};
use crate::message::{encode_batch, onehot_batch, ExpressionLabel, MappingParams, SecretMessage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Bits in, extractor trained jointly.
    Stego,
    /// Plain GAN on standard-normal inputs of the same width; no extractor.
    Baseline,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stego => "stego",
            Self::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug)]
pub struct StegoModel {
    pub config: TrainConfig,
    pub variant: Variant,
    pub mapping: MappingParams,
    pub generator: GeneratorParams,
    pub adversary: AdversaryParams,
    pub extractor: Option<ExtractorParams>,
}

impl StegoModel {
    pub fn new<R: Rng + ?Sized>(config: &TrainConfig, variant: Variant, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mapping = MappingParams::new(&config.mapping_config(), rng);
        let generator = GeneratorParams::new(&config.generator_config(), rng);
        let adversary = AdversaryParams::new(&config.adversary_config(), rng);
        let extractor = match variant {
            Variant::Stego => Some(ExtractorParams::new(&config.extractor_config(), rng)),
            Variant::Baseline => None,
        };
        Ok(Self {
            config: config.clone(),
            variant,
            mapping,
            generator,
            adversary,
            extractor,
        })
    }

    pub fn n_bits(&self) -> usize {
        self.mapping.n_bits()
    }

    pub fn has_expression(&self) -> bool {
        self.mapping.has_expression()
    }

    pub fn extractor(&self) -> Result<&ExtractorParams> {
        self.extractor
            .as_ref()
            .ok_or_else(|| CisError::Invalid(format!("{} model has no extractor", self.variant)))
    }

    /// Batched synthesis from `[N, n_bits]` input signals. The same latent drives every
    /// style unit.
    pub fn generate_var(&self, signal: &Var, onehot: Option<&Var>, noise: &[Tensor]) -> Result<Var> {
        let z = self.mapping.latent_var(signal, onehot)?;
        let latents = vec![z; self.generator.n_styles()];
        self.generator.forward(&latents, noise)
    }

    fn onehots(&self, labels: Option<&[ExpressionLabel]>, n: usize) -> Result<Option<Tensor>> {
        match labels {
            Some(l) => {
                check_dim("label count", n, l.len())?;
                Ok(Some(onehot_batch(l)))
            }
            None => Ok(None),
        }
    }

    /// Images for raw input signals (bits in `{-1, +1}` or baseline noise).
    pub fn generate_signals<R: Rng + ?Sized>(
        &self,
        signal: &Tensor,
        labels: Option<&[ExpressionLabel]>,
        rng: &mut R,
    ) -> Result<Vec<ImageTensor>> {
        let n = signal.shape()[0];
        if n == 0 {
            return Err(CisError::Empty("generation batch"));
        }
        let onehot = self.onehots(labels, n)?;
        let noise = self.generator.sample_noise(n, rng);
        let g = Graph::inference();
        let oh = onehot.map(|t| g.constant(t));
        let out = self.generate_var(&g.constant(signal.clone()), oh.as_ref(), &noise)?;
        Ok(unstack(&out.value()))
    }

    /// Stego images hiding `msgs`; in expression mode each needs a label.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        msgs: &[SecretMessage],
        labels: Option<&[ExpressionLabel]>,
        rng: &mut R,
    ) -> Result<Vec<ImageTensor>> {
        if msgs.is_empty() {
            return Err(CisError::Empty("message batch"));
        }
        for m in msgs {
            check_dim("message length", self.n_bits(), m.len())?;
        }
        self.generate_signals(&encode_batch(msgs), labels, rng)
    }

    /// Raw extractor estimates, `[N, n_bits]`.
    pub fn extract_var(&self, images: &Var) -> Result<Var> {
        self.extractor()?.forward(images)
    }

    pub fn decode(&self, images: &[ImageTensor]) -> Result<Vec<SecretMessage>> {
        let est = self.estimate(images)?;
        est.chunks(self.n_bits()).map(decide_bits).collect()
    }

    /// Flat estimates, row-major `[N, n_bits]`.
    pub fn estimate(&self, images: &[ImageTensor]) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(CisError::Empty("image batch"));
        }
        let g = Graph::inference();
        let out = self.extract_var(&g.constant(stack(images)))?;
        Ok(out.value().data().to_vec())
    }

    /// Mapping and generator parameters; these stay fixed when only the extractor retrains.
    pub fn generator_side(&self) -> Vec<&Param> {
        let mut v = self.mapping.params();
        v.extend(self.generator.params());
        v
    }
}

impl Module for StegoModel {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.mapping.collect_params(&join(prefix, "mapping"), out);
        self.generator.collect_params(&join(prefix, "generator"), out);
        self.adversary.collect_params(&join(prefix, "adversary"), out);
        self.extractor.collect_params(&join(prefix, "extractor"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.mapping.collect_params_mut(&join(prefix, "mapping"), out);
        self.generator.collect_params_mut(&join(prefix, "generator"), out);
        self.adversary.collect_params_mut(&join(prefix, "adversary"), out);
        self.extractor.collect_params_mut(&join(prefix, "extractor"), out);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::message::ExpressionLabel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A model small enough for unit tests.
    pub(crate) fn tiny_config(n_bits: usize, expression: bool) -> TrainConfig {
        TrainConfig {
            n_bits,
            expression,
            latent_dim: 8,
            mapping_layers: 2,
            mapping_width: 8,
            fusion_layers: 1,
            gen_channels: [6, 5, 4, 3],
            disc_channels: [3, 4, 4, 5],
            ext_channels: [3, 4, 4, 5],
            ext_hidden: 8,
            batch_size: 4,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn encode_decode_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = StegoModel::new(&tiny_config(6, false), Variant::Stego, &mut rng).unwrap();
        let msgs: Vec<_> = (0..3).map(|_| SecretMessage::random(6, &mut rng)).collect();
        let imgs = m.encode(&msgs, None, &mut rng).unwrap();
        assert_eq!(imgs.len(), 3);
        assert!(imgs.iter().all(|i| i.height() == 32 && i.width() == 32));
        let dec = m.decode(&imgs).unwrap();
        assert!(dec.iter().all(|d| d.len() == 6));
        assert!(m.encode(&[SecretMessage::random(5, &mut rng)], None, &mut rng).is_err());
        let label = [ExpressionLabel::new(0).unwrap()];
        assert!(m.encode(&msgs[..1], Some(&label), &mut rng).is_err());
    }

    #[test]
    fn expression_model_needs_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = StegoModel::new(&tiny_config(4, true), Variant::Stego, &mut rng).unwrap();
        let msgs = vec![SecretMessage::parse("1010").unwrap(); 2];
        assert!(m.encode(&msgs, None, &mut rng).is_err());
        let labels = [ExpressionLabel::new(3).unwrap(), ExpressionLabel::new(5).unwrap()];
        assert_eq!(m.encode(&msgs, Some(&labels), &mut rng).unwrap().len(), 2);
        assert!(m.encode(&msgs, Some(&labels[..1]), &mut rng).is_err());
    }

    #[test]
    fn baseline_has_no_extractor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = StegoModel::new(&tiny_config(4, false), Variant::Baseline, &mut rng).unwrap();
        assert!(m.extractor.is_none());
        assert!(m.named_params().iter().all(|(n, _)| !n.starts_with("extractor")));
        let sig = Tensor::randn(&[2, 4], &mut rng);
        assert_eq!(m.generate_signals(&sig, None, &mut rng).unwrap().len(), 2);
        assert!(m.decode(&[ImageTensor::full(32, 32, 0.0)]).is_err());
    }

    #[test]
    fn same_noise_same_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = StegoModel::new(&tiny_config(4, false), Variant::Stego, &mut rng).unwrap();
        let msgs = [SecretMessage::parse("0110").unwrap()];
        let a = m.encode(&msgs, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.encode(&msgs, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a[0].tensor().data(), b[0].tensor().data());
    }
}
