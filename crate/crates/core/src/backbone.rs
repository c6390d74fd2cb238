//! The k-stage convolutional encoder/decoder and the assembled model.
//!
//! Encoder stage i applies two (conv3x3, BN, ReLU) blocks then a 2x2
//! max-pool; decoder stage i applies two conv blocks, nearest-upsamples x2,
//! and concatenates the stage's lateral attention feature along channels.
//! Each decoder stage output feeds its segmentation head.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{derive_seed, ModelConfig};
use crate::csaa::Csaa;
use crate::error::{Error, Result};
use crate::layers::{ConvBlock, Mode, ParamList, StateSink};
use crate::mps::{active_heads, upsample_to_full, SegHead, SegOutputs};
use crate::scalar::Scalar;
use crate::tensor::shape_ops::{concat_channels, maxpool2, nearest_upsample};
use crate::tensor::Tensor;

/// Static description of one stage's extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Encoder stage output extents: channels double, spatial halves per stage.
pub fn encoder_stage_specs(config: &ModelConfig) -> Vec<StageSpec> {
    (1..=config.stages)
        .map(|i| {
            let (h, w) = config.encoder_extent(i);
            StageSpec {
                index: i,
                in_channels: if i == 1 {
                    config.input_channels
                } else {
                    config.stage_channels(i - 1)
                },
                out_channels: config.stage_channels(i),
                height: h,
                width: w,
            }
        })
        .collect()
}

/// Decoder stage output extents (after the lateral concat): spatial doubles
/// per stage walking from the deepest stage back to full resolution.
pub fn decoder_stage_specs(config: &ModelConfig) -> Vec<StageSpec> {
    (1..=config.stages)
        .map(|i| {
            let (h, w) = config.decoder_extent(i);
            StageSpec {
                index: i,
                in_channels: if i == config.stages {
                    config.stage_channels(i)
                } else {
                    2 * config.stage_channels(i + 1)
                },
                out_channels: 2 * config.stage_channels(i),
                height: h,
                width: w,
            }
        })
        .collect()
}

/// Ordered encoder features, shallow to deep, one per stage.
pub struct EncoderOutputs<S: Scalar> {
    pub features: Vec<Tensor<S>>,
}

pub struct EncoderStage<S: Scalar> {
    block1: ConvBlock<S>,
    block2: ConvBlock<S>,
}

pub struct Encoder<S: Scalar> {
    stages: Vec<EncoderStage<S>>,
}

impl<S: Scalar> Encoder<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let stages = encoder_stage_specs(config)
            .iter()
            .map(|spec| {
                let name = format!("encoder.stage{}", spec.index);
                EncoderStage {
                    block1: ConvBlock::new(
                        &format!("{name}.block1"),
                        spec.in_channels,
                        spec.out_channels,
                        3,
                        rng,
                    ),
                    block2: ConvBlock::new(
                        &format!("{name}.block2"),
                        spec.out_channels,
                        spec.out_channels,
                        3,
                        rng,
                    ),
                }
            })
            .collect();
        Encoder { stages }
    }

    /// Runs all stages; feature i is the post-downsample map of stage i.
    pub fn forward(&self, image: &Tensor<S>, mode: Mode) -> Result<EncoderOutputs<S>> {
        let shape = image.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "encoder_forward",
                format!("expected NCHW input, got {shape:?}"),
            ));
        }
        let div = 1usize << self.stages.len();
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "input {}x{} not divisible by 2^{}",
                    shape[2],
                    shape[3],
                    self.stages.len()
                ),
            ));
        }
        let mut features = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            let y = stage.block2.forward(&stage.block1.forward(&x, mode)?, mode)?;
            x = maxpool2(&y)?;
            features.push(x.clone());
        }
        Ok(EncoderOutputs { features })
    }

    fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        for stage in &self.stages {
            stage.block1.visit_state(sink);
            stage.block2.visit_state(sink);
        }
    }
}

pub struct DecoderStage<S: Scalar> {
    block1: ConvBlock<S>,
    block2: ConvBlock<S>,
}

impl<S: Scalar> DecoderStage<S> {
    /// Two conv blocks, upsample x2, then concat the lateral feature (when
    /// present) along channels.
    pub fn forward(
        &self,
        prev: &Tensor<S>,
        lateral: Option<&Tensor<S>>,
        mode: Mode,
    ) -> Result<Tensor<S>> {
        let x = self.block2.forward(&self.block1.forward(prev, mode)?, mode)?;
        let up = nearest_upsample(&x, 2)?;
        match lateral {
            Some(l) => concat_channels(&[up, l.clone()]),
            None => Ok(up),
        }
    }
}

pub struct Decoder<S: Scalar> {
    /// Indexed by stage - 1; executed deepest (k) first.
    pub stages: Vec<DecoderStage<S>>,
}

impl<S: Scalar> Decoder<S> {
    fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let stages = decoder_stage_specs(config)
            .iter()
            .map(|spec| {
                let name = format!("decoder.stage{}", spec.index);
                let conv_out = config.stage_channels(spec.index);
                DecoderStage {
                    block1: ConvBlock::new(
                        &format!("{name}.block1"),
                        spec.in_channels,
                        conv_out,
                        3,
                        rng,
                    ),
                    block2: ConvBlock::new(&format!("{name}.block2"), conv_out, conv_out, 3, rng),
                }
            })
            .collect();
        Decoder { stages }
    }

    fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        for stage in &self.stages {
            stage.block1.visit_state(sink);
            stage.block2.visit_state(sink);
        }
    }
}

/// The full segmentation model: encoder, cross-stage axial attention,
/// decoder, and one segmentation head per decoder stage.
pub struct EfcNet<S: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder<S>,
    pub csaa: Csaa<S>,
    pub decoder: Decoder<S>,
    pub heads: Vec<SegHead<S>>,
}

impl<S: Scalar> EfcNet<S> {
    /// Builds the model with seeded fan-in-uniform initialization. Two
    /// models from the same config produce bitwise-identical parameters;
    /// every head and attention stage is constructed regardless of variant
    /// so the parameter count is a pure function of the config.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "init"));
        let encoder = Encoder::new(config, &mut rng);
        let csaa = Csaa::new(config, &mut rng);
        let decoder = Decoder::new(config, &mut rng);
        let heads = (1..=config.stages)
            .map(|i| {
                let mid = config.stage_channels(i);
                SegHead::new(&format!("mps.stage{i}"), 2 * mid, mid, &mut rng)
            })
            .collect();
        Ok(EfcNet {
            config: config.clone(),
            encoder,
            csaa,
            decoder,
            heads,
        })
    }

    /// Encoder -> CSAA -> decoder (deepest stage first) -> active heads.
    pub fn forward(&self, image: &Tensor<S>, mode: Mode) -> Result<SegOutputs<S>> {
        let k = self.config.stages;
        let encoded = self.encoder.forward(image, mode)?;
        let laterals = self.csaa.forward(&encoded.features, mode)?;

        let mut decoder_outputs: Vec<Option<Tensor<S>>> = vec![None; k];
        let mut prev = encoded.features[k - 1].clone();
        for i in (1..=k).rev() {
            let out = self.decoder.stages[i - 1].forward(&prev, Some(&laterals[i - 1]), mode)?;
            prev = out.clone();
            decoder_outputs[i - 1] = Some(out);
        }

        let batch = image.shape()[0];
        let (full_h, full_w) = (self.config.input_height, self.config.input_width);
        let mut stages = Vec::new();
        let mut p_list = Vec::new();
        let mut m_list = Vec::new();
        for i in active_heads(self.config.mps_heads, k)? {
            let feature = decoder_outputs[i - 1].as_ref().expect("decoder stage ran");
            let p = self.heads[i - 1].forward(feature, mode)?;
            let (sh, sw) = self.config.decoder_extent(i);
            debug_assert_eq!(p.shape(), vec![batch, 1, sh, sw]);
            let m = upsample_to_full(&p, full_h, full_w)?;
            stages.push(i);
            p_list.push(p);
            m_list.push(m);
        }
        Ok(SegOutputs {
            stages,
            p: p_list,
            m: m_list,
            final_index: 0,
        })
    }

    pub fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        self.encoder.visit_state(sink);
        self.csaa.visit_state(sink);
        self.decoder.visit_state(sink);
        for head in &self.heads {
            head.visit_state(sink);
        }
    }

    /// Parameters of every submodule (active or not), in construction order.
    pub fn named_parameters(&self) -> ParamList<S> {
        let mut list = ParamList::new();
        self.visit_state(&mut list);
        list
    }

    /// Parameters that receive gradients for the configured variant: heads
    /// beyond `mps_heads` never run, and attention projections never run
    /// under Concat-One.
    pub fn parameters(&self) -> Vec<Tensor<S>> {
        self.named_parameters().tensors()
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;

    fn desk(k: usize, base: usize, hw: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.stages = k;
        cfg.base_channels = base;
        cfg.input_height = hw;
        cfg.input_width = hw;
        cfg.mps_heads = k.min(cfg.mps_heads);
        cfg
    }

    #[test]
    fn desk_encoder_shapes_follow_halving_rule() {
        let mut cfg = desk(2, 8, 32);
        cfg.input_channels = 1;
        cfg.csaa.common_height = 8;
        cfg.csaa.common_width = 8;
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 32, 32]);
        let out = model.encoder.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.features.len(), 2);
        assert_eq!(out.features[0].shape(), vec![1, 8, 16, 16]);
        assert_eq!(out.features[1].shape(), vec![1, 16, 8, 8]);
    }

    #[test]
    fn zero_image_with_zero_bias_encodes_to_zero() {
        let cfg = desk(2, 4, 32);
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 32, 32]);
        let out = model.encoder.forward(&x, Mode::Eval).unwrap();
        for f in out.features {
            assert!(f.to_vec().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn encoder_rejects_indivisible_extents() {
        let cfg = desk(2, 4, 32);
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 30, 32]);
        assert!(model.encoder.forward(&x, Mode::Eval).is_err());
    }

    #[test]
    fn decoder_without_lateral_has_conv_out_channels_only() {
        let cfg = desk(2, 4, 32);
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        // deepest stage: prev is the stage-2 encoder feature (8ch at 8x8)
        let prev = Tensor::zeros(&[1, 8, 8, 8]);
        let out = model.decoder.stages[1].forward(&prev, None, Mode::Eval).unwrap();
        assert_eq!(out.shape(), vec![1, 8, 16, 16]);
    }

    #[test]
    fn desk_forward_produces_full_resolution_maps() {
        let cfg = desk(2, 4, 32);
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 32, 32]);
        let out = no_grad(|| model.forward(&x, Mode::Eval)).unwrap();
        assert_eq!(out.m.len(), 2);
        assert_eq!(out.stages, vec![1, 2]);
        for m in &out.m {
            assert_eq!(m.shape(), vec![1, 1, 32, 32]);
            assert!(m.to_vec().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        assert_eq!(out.final_map().shape(), vec![1, 1, 32, 32]);
    }

    #[test]
    fn same_config_and_seed_give_bitwise_identical_parameters() {
        let cfg = desk(2, 4, 32);
        let a: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let b: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let pa = a.named_parameters();
        let pb = b.named_parameters();
        assert_eq!(pa.entries.len(), pb.entries.len());
        for ((na, ta), (nb, tb)) in pa.entries.iter().zip(&pb.entries) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "parameter {na} differs");
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = desk(2, 4, 32);
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let data: Vec<f64> = (0..1024).map(|i| (i % 97) as f64 / 97.0).collect();
        let x = Tensor::from_vec(vec![1, 1, 32, 32], data).unwrap();
        let a = no_grad(|| model.forward(&x, Mode::Eval)).unwrap();
        let b = no_grad(|| model.forward(&x, Mode::Eval)).unwrap();
        assert_eq!(a.final_map().to_vec(), b.final_map().to_vec());
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = desk(2, 4, 32);
        let model: EfcNet<f64> = EfcNet::new(&cfg).unwrap();
        let params = model.named_parameters();
        let mut names: Vec<&String> = params.entries.iter().map(|(n, _)| n).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(before, names.len());
    }
}
