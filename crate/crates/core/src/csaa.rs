//! Cross-stage axial attention: every encoder feature map is resized to one
//! common size, attended along the width axis and then the height axis with
//! per-stage queries against keys/values drawn from all stages, and resized
//! back to the matching decoder stage.

use rand_chacha::ChaCha20Rng;

use crate::config::{CsaaConfig, CsaaVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::{ConvBlock, Linear, Mode, StateSink};
use crate::scalar::Scalar;
use crate::tensor::elementwise::scale;
use crate::tensor::matmul::matmul;
use crate::tensor::shape_ops::{concat, nearest_resize, permute, reshape};
use crate::tensor::softmax::softmax_lastdim;
use crate::tensor::Tensor;

/// The spatial axis a 1-D attention pass runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Width,
    Height,
}

/// Flattens `(N, C, H, W)` into axis-major tokens.
///
/// Width tokens: `(N, W, C*H)`, one token per column. Height tokens:
/// `(N, H, C*W)`, one token per row. The flattening is lossless;
/// [`untokens`] inverts it exactly.
pub fn tokens<S: Scalar>(x: &Tensor<S>, axis: Axis) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("tokens", format!("expected rank 4, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    match axis {
        Axis::Width => reshape(&permute(x, &[0, 3, 1, 2])?, vec![n, w, c * h]),
        Axis::Height => reshape(&permute(x, &[0, 2, 1, 3])?, vec![n, h, c * w]),
    }
}

/// Inverse of [`tokens`]: rebuilds `(N, C, H, W)` from axis-major tokens.
pub fn untokens<S: Scalar>(
    t: &Tensor<S>,
    axis: Axis,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let n = t.shape()[0];
    match axis {
        Axis::Width => permute(&reshape(t, vec![n, w, c, h])?, &[0, 2, 3, 1]),
        Axis::Height => permute(&reshape(t, vec![n, h, c, w])?, &[0, 2, 1, 3]),
    }
}

/// Query/key/value projections for one stage along one axis. Queries and
/// keys map the token embedding to the projection dim; values keep the
/// embedding so outputs unflatten back to the common size.
pub struct AxialProjections<S: Scalar> {
    pub query: Linear<S>,
    pub key: Linear<S>,
    pub value: Linear<S>,
}

impl<S: Scalar> AxialProjections<S> {
    fn new(name: &str, embed: usize, proj: usize, rng: &mut ChaCha20Rng) -> Self {
        AxialProjections {
            query: Linear::new(&format!("{name}.query"), embed, proj, rng),
            key: Linear::new(&format!("{name}.key"), embed, proj, rng),
            value: Linear::new(&format!("{name}.value"), embed, embed, rng),
        }
    }

    fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        self.query.visit_state(sink);
        self.key.visit_state(sink);
        self.value.visit_state(sink);
    }
}

/// One stage's lateral path: resize in, per-axis projections, resize back.
pub struct CsaaStage<S: Scalar> {
    pub resize_in: ConvBlock<S>,
    pub w_proj: AxialProjections<S>,
    pub h_proj: AxialProjections<S>,
    pub resize_back: ConvBlock<S>,
}

pub struct Csaa<S: Scalar> {
    pub cfg: CsaaConfig,
    pub stages: Vec<CsaaStage<S>>,
    /// Decoder-side target extents per stage: (channels, height, width).
    pub targets: Vec<(usize, usize, usize)>,
}

impl<S: Scalar> Csaa<S> {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Self {
        let cfg = config.csaa.clone();
        let embed_w = cfg.common_channels * cfg.common_height;
        let embed_h = cfg.common_channels * cfg.common_width;
        let mut stages = Vec::with_capacity(config.stages);
        let mut targets = Vec::with_capacity(config.stages);
        for i in 1..=config.stages {
            let name = format!("csaa.stage{i}");
            let enc_channels = config.stage_channels(i);
            let (dh, dw) = config.decoder_extent(i);
            let dec_channels = config.stage_channels(i);
            stages.push(CsaaStage {
                resize_in: ConvBlock::new(
                    &format!("{name}.resize_in"),
                    enc_channels,
                    cfg.common_channels,
                    1,
                    rng,
                ),
                w_proj: AxialProjections::new(&format!("{name}.w"), embed_w, cfg.projection_dim, rng),
                h_proj: AxialProjections::new(&format!("{name}.h"), embed_h, cfg.projection_dim, rng),
                resize_back: ConvBlock::new(
                    &format!("{name}.resize_back"),
                    cfg.common_channels,
                    dec_channels,
                    1,
                    rng,
                ),
            });
            targets.push((dec_channels, dh, dw));
        }
        Csaa { cfg, stages, targets }
    }

    /// Resizes every encoder feature to the common `(C*, H*, W*)` shape:
    /// spatial nearest-resize, then conv1x1 + BN + ReLU.
    pub fn resize_to_common(&self, features: &[Tensor<S>], mode: Mode) -> Result<Vec<Tensor<S>>> {
        features
            .iter()
            .zip(&self.stages)
            .map(|(f, stage)| {
                let resized = nearest_resize(f, self.cfg.common_height, self.cfg.common_width)?;
                stage.resize_in.forward(&resized, mode)
            })
            .collect()
    }

    /// One 1-D attention pass over all stages along `axis`.
    ///
    /// Per stage i the query comes from stage i's own tokens while keys and
    /// values are projected from the concatenation of every stage's tokens
    /// (sequence length k * axis extent); the AA-One variant restricts keys
    /// and values to stage i. Attention logits are scaled by the reciprocal
    /// square root of the token embedding dim.
    pub fn axial_attention(
        &self,
        inputs: &[Tensor<S>],
        axis: Axis,
    ) -> Result<Vec<Tensor<S>>> {
        let (c, h, w) = (
            self.cfg.common_channels,
            self.cfg.common_height,
            self.cfg.common_width,
        );
        let embed = match axis {
            Axis::Width => c * h,
            Axis::Height => c * w,
        };
        let inv_scale = S::of(1.0 / (embed as f64).sqrt());

        let token_list: Vec<Tensor<S>> = inputs
            .iter()
            .map(|f| tokens(f, axis))
            .collect::<Result<_>>()?;
        let all_tokens = match self.cfg.variant {
            CsaaVariant::AaAll => Some(concat(1, &token_list)?),
            _ => None,
        };

        let mut outputs = Vec::with_capacity(inputs.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let proj = match axis {
                Axis::Width => &stage.w_proj,
                Axis::Height => &stage.h_proj,
            };
            let kv_source = all_tokens.as_ref().unwrap_or(&token_list[i]);
            let q = proj.query.forward(&token_list[i])?;
            let k = proj.key.forward(kv_source)?;
            let v = proj.value.forward(kv_source)?;
            let scores = scale(&matmul(&q, &permute(&k, &[0, 2, 1])?)?, inv_scale);
            let attn = softmax_lastdim(&scores)?;
            let out = matmul(&attn, &v)?;
            outputs.push(untokens(&out, axis, c, h, w)?);
        }
        Ok(outputs)
    }

    /// Resizes attention outputs back to each decoder stage's extents:
    /// spatial nearest-resize, then conv1x1 + BN + ReLU to the stage channels.
    pub fn resize_back(&self, features: &[Tensor<S>], mode: Mode) -> Result<Vec<Tensor<S>>> {
        features
            .iter()
            .zip(self.stages.iter().zip(&self.targets))
            .map(|(f, (stage, &(_, th, tw)))| {
                let resized = nearest_resize(f, th, tw)?;
                stage.resize_back.forward(&resized, mode)
            })
            .collect()
    }

    /// The full lateral path: resize in, W-axis attention, H-axis attention,
    /// resize back. The Concat-One variant skips both attention passes and
    /// carries the resized features straight through.
    pub fn forward(&self, encoder_features: &[Tensor<S>], mode: Mode) -> Result<Vec<Tensor<S>>> {
        if encoder_features.len() != self.stages.len() {
            return Err(Error::shape(
                "csaa_forward",
                format!(
                    "{} features for {} stages",
                    encoder_features.len(),
                    self.stages.len()
                ),
            ));
        }
        let common = self.resize_to_common(encoder_features, mode)?;
        let attended = match self.cfg.variant {
            CsaaVariant::ConcatOne => common,
            _ => {
                let w_out = self.axial_attention(&common, Axis::Width)?;
                self.axial_attention(&w_out, Axis::Height)?
            }
        };
        self.resize_back(&attended, mode)
    }

    pub fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        for stage in &self.stages {
            stage.resize_in.visit_state(sink);
            stage.w_proj.visit_state(sink);
            stage.h_proj.visit_state(sink);
            stage.resize_back.visit_state(sink);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;

    fn desk_cfg(k: usize, variant: CsaaVariant) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.stages = k;
        cfg.csaa.variant = variant;
        cfg.csaa.common_channels = 2;
        cfg.csaa.common_height = 2;
        cfg.csaa.common_width = 3;
        cfg.csaa.projection_dim = 4;
        cfg
    }

    fn rng_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn token_views_are_lossless() {
        let x = Tensor::<f64>::from_vec(vec![2, 3, 4, 5], rng_vec(120, 3)).unwrap();
        for axis in [Axis::Width, Axis::Height] {
            let t = tokens(&x, axis).unwrap();
            let back = untokens(&t, axis, 3, 4, 5).unwrap();
            assert_eq!(back.to_vec(), x.to_vec());
        }
        let tw = tokens(&x, Axis::Width).unwrap();
        assert_eq!(tw.shape(), vec![2, 5, 12]);
        let th = tokens(&x, Axis::Height).unwrap();
        assert_eq!(th.shape(), vec![2, 4, 15]);
    }

    #[test]
    fn single_stage_single_column_returns_value_token() {
        // k=1 with W*=1: one key, softmax weight 1, output equals V token
        let mut cfg = desk_cfg(1, CsaaVariant::AaAll);
        cfg.csaa.common_width = 1;
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let csaa: Csaa<f64> = Csaa::new(&cfg, &mut rng);
        let x = Tensor::from_vec(vec![1, 2, 2, 1], rng_vec(4, 9)).unwrap();
        let out = csaa.axial_attention(&[x.clone()], Axis::Width).unwrap();
        let v = csaa.stages[0]
            .w_proj
            .value
            .forward(&tokens(&x, Axis::Width).unwrap())
            .unwrap();
        let direct = untokens(&v, Axis::Width, 2, 2, 1).unwrap();
        for (a, b) in out[0].to_vec().iter().zip(direct.to_vec()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_tokens_average_under_any_query() {
        // all W-tokens identical => every attention row is uniform and the
        // output token equals the (single) value token
        let cfg = desk_cfg(1, CsaaVariant::AaAll);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let csaa: Csaa<f64> = Csaa::new(&cfg, &mut rng);
        let column = rng_vec(4, 77); // C*=2, H*=2 per column
        let mut data = vec![0.0; 2 * 2 * 3];
        for ch in 0..2 {
            for y in 0..2 {
                for x in 0..3 {
                    data[(ch * 2 + y) * 3 + x] = column[ch * 2 + y];
                }
            }
        }
        let x = Tensor::from_vec(vec![1, 2, 2, 3], data).unwrap();
        let out = csaa.axial_attention(&[x.clone()], Axis::Width).unwrap();
        let v = csaa.stages[0]
            .w_proj
            .value
            .forward(&tokens(&x, Axis::Width).unwrap())
            .unwrap();
        // all value tokens equal, so their mean equals any one of them
        let direct = untokens(&v, Axis::Width, 2, 2, 3).unwrap();
        for (a, b) in out[0].to_vec().iter().zip(direct.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aa_all_with_one_stage_equals_aa_one_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let all: Csaa<f64> = Csaa::new(&desk_cfg(1, CsaaVariant::AaAll), &mut rng);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let one: Csaa<f64> = Csaa::new(&desk_cfg(1, CsaaVariant::AaOne), &mut rng);
        let x = Tensor::from_vec(vec![1, 2, 2, 3], rng_vec(12, 5)).unwrap();
        for axis in [Axis::Width, Axis::Height] {
            let a = all.axial_attention(&[x.clone()], axis).unwrap();
            let b = one.axial_attention(&[x.clone()], axis).unwrap();
            assert_eq!(a[0].to_vec(), b[0].to_vec());
        }
    }

    #[test]
    fn concat_one_ignores_attention_parameters() {
        let mut cfg = desk_cfg(2, CsaaVariant::ConcatOne);
        cfg.csaa.common_width = 2; // integer resize factor from 32x32 and 16x16
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let csaa: Csaa<f64> = Csaa::new(&cfg, &mut rng);
        let f1 = Tensor::from_vec(vec![1, 8, 32, 32], rng_vec(8 * 32 * 32, 1)).unwrap();
        let f2 = Tensor::from_vec(vec![1, 16, 16, 16], rng_vec(16 * 16 * 16, 2)).unwrap();
        let before = csaa.forward(&[f1.clone(), f2.clone()], Mode::Eval).unwrap();
        // scribble over every attention projection
        for stage in &csaa.stages {
            for proj in [&stage.w_proj, &stage.h_proj] {
                for lin in [&proj.query, &proj.key, &proj.value] {
                    let n = lin.weight.value.numel();
                    lin.weight.value.set_data(&vec![42.0; n]);
                    let n = lin.bias.value.numel();
                    lin.bias.value.set_data(&vec![-3.0; n]);
                }
            }
        }
        let after = csaa.forward(&[f1, f2], Mode::Eval).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
    }

    #[test]
    fn transposed_input_swaps_axes() {
        // H-attention on spatially transposed input with the same weights
        // equals the transpose of the W-attention result when H* == W*.
        let mut cfg = desk_cfg(1, CsaaVariant::AaAll);
        cfg.csaa.common_height = 3;
        cfg.csaa.common_width = 3;
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let csaa: Csaa<f64> = Csaa::new(&cfg, &mut rng);
        // copy W-pass weights into the H-pass slots
        for stage in &csaa.stages {
            for (src, dst) in [
                (&stage.w_proj.query, &stage.h_proj.query),
                (&stage.w_proj.key, &stage.h_proj.key),
                (&stage.w_proj.value, &stage.h_proj.value),
            ] {
                dst.weight.value.set_data(&src.weight.value.to_vec());
                dst.bias.value.set_data(&src.bias.value.to_vec());
            }
        }
        let x = Tensor::from_vec(vec![1, 2, 3, 3], rng_vec(18, 13)).unwrap();
        let xt = permute(&x, &[0, 1, 3, 2]).unwrap();
        let w_out = csaa.axial_attention(&[x], Axis::Width).unwrap();
        let h_out = csaa.axial_attention(&[xt], Axis::Height).unwrap();
        let w_out_t = permute(&w_out[0], &[0, 1, 3, 2]).unwrap();
        for (a, b) in h_out[0].to_vec().iter().zip(w_out_t.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_with_zero_value_bias_yields_zero() {
        let cfg = desk_cfg(2, CsaaVariant::AaAll);
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let csaa: Csaa<f64> = Csaa::new(&cfg, &mut rng);
        let zeros = vec![
            Tensor::<f64>::zeros(&[1, 2, 2, 3]),
            Tensor::<f64>::zeros(&[1, 2, 2, 3]),
        ];
        // value biases are zero-initialized; outputs must be exactly zero
        for axis in [Axis::Width, Axis::Height] {
            let outs = csaa.axial_attention(&zeros, axis).unwrap();
            for o in outs {
                assert!(o.to_vec().iter().all(|v| *v == 0.0));
            }
        }
    }
}
