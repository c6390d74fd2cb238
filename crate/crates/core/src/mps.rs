//! Multi-precision supervision: one segmentation head per decoder stage,
//! upsampled to ground-truth resolution with nearest-neighbor interpolation.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvBlock, Mode, StateSink};
use crate::scalar::Scalar;
use crate::tensor::elementwise::sigmoid;
use crate::tensor::shape_ops::nearest_resize;
use crate::tensor::Tensor;

/// Per-stage predictions from one forward pass.
///
/// Entries are ordered by stage index ascending, so index 0 is the
/// full-resolution head of the last decoder stage — the final segmentation
/// result at test time.
pub struct SegOutputs<S: Scalar> {
    /// Stage index per entry (1 = full resolution).
    pub stages: Vec<usize>,
    /// Native-resolution probability maps `(N, 1, H_i, W_i)`.
    pub p: Vec<Tensor<S>>,
    /// Ground-truth-resolution upsamplings `(N, 1, H, W)`.
    pub m: Vec<Tensor<S>>,
    /// Index into the lists of the last decoder stage's output.
    pub final_index: usize,
}

impl<S: Scalar> SegOutputs<S> {
    /// The final full-resolution prediction.
    pub fn final_map(&self) -> &Tensor<S> {
        &self.m[self.final_index]
    }
}

/// Segmentation head: two (conv3x3, BN, ReLU) blocks, a 1x1 conv down to one
/// channel, then a sigmoid.
pub struct SegHead<S: Scalar> {
    pub block1: ConvBlock<S>,
    pub block2: ConvBlock<S>,
    pub out: Conv2d<S>,
}

impl<S: Scalar> SegHead<S> {
    pub fn new(name: &str, in_channels: usize, mid_channels: usize, rng: &mut ChaCha20Rng) -> Self {
        SegHead {
            block1: ConvBlock::new(&format!("{name}.block1"), in_channels, mid_channels, 3, rng),
            block2: ConvBlock::new(&format!("{name}.block2"), mid_channels, mid_channels, 3, rng),
            out: Conv2d::new(&format!("{name}.out"), mid_channels, 1, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, feature: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let x = self.block1.forward(feature, mode)?;
        let x = self.block2.forward(&x, mode)?;
        Ok(sigmoid(&self.out.forward(&x)?))
    }

    pub fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        self.block1.visit_state(sink);
        self.block2.visit_state(sink);
        self.out.visit_state(sink);
    }
}

/// Nearest-neighbor upsampling of a stage prediction to ground-truth
/// extents; both ratios must be integers.
pub fn upsample_to_full<S: Scalar>(
    p: &Tensor<S>,
    full_height: usize,
    full_width: usize,
) -> Result<Tensor<S>> {
    let s = p.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "upsample_to_full",
            format!("expected rank 4, got {s:?}"),
        ));
    }
    if full_height % s[2] != 0 || full_width % s[3] != 0 {
        return Err(Error::shape(
            "upsample_to_full",
            format!(
                "non-integer upsample factor: {}x{} -> {}x{}",
                s[2], s[3], full_height, full_width
            ),
        ));
    }
    nearest_resize(p, full_height, full_width)
}

/// Stage indices supervised by the `MPS-m` variant: the `m`
/// highest-resolution decoder stages, always including the final
/// full-resolution head (stage 1).
pub fn active_heads(m: usize, k: usize) -> Result<Vec<usize>> {
    if m < 1 || m > k {
        return Err(Error::invalid(
            "active_heads",
            format!("head count {m} out of range 1..={k}"),
        ));
    }
    Ok((1..=m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mps_one_supervises_only_the_final_stage() {
        assert_eq!(active_heads(1, 4).unwrap(), vec![1]);
    }

    #[test]
    fn mps_k_supervises_every_stage() {
        assert_eq!(active_heads(4, 4).unwrap(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn mps_two_takes_the_two_highest_resolution_stages() {
        assert_eq!(active_heads(2, 4).unwrap(), vec![1, 2]);
    }

    #[test]
    fn head_count_out_of_range_is_rejected() {
        assert!(active_heads(0, 4).is_err());
        assert!(active_heads(5, 4).is_err());
    }

    #[test]
    fn zero_feature_gives_uniform_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let head: SegHead<f64> = SegHead::new("head", 4, 2, &mut rng);
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let p = head.forward(&x, Mode::Eval).unwrap();
        assert_eq!(p.shape(), vec![1, 1, 8, 8]);
        // zero feature and zero final bias pin the logit at 0
        assert!(p.to_vec().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn head_output_stays_strictly_inside_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let head: SegHead<f64> = SegHead::new("head", 2, 2, &mut rng);
        let data: Vec<f64> = (0..2 * 16).map(|i| ((i * 37) % 100) as f64 / 25.0 - 2.0).collect();
        let x = Tensor::from_vec(vec![1, 2, 4, 4], data).unwrap();
        let p = head.forward(&x, Mode::Eval).unwrap();
        assert!(p.to_vec().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn full_resolution_stage_passes_through() {
        let p = Tensor::<f64>::from_vec(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let m = upsample_to_full(&p, 4, 4).unwrap();
        assert_eq!(m.to_vec(), p.to_vec());
    }

    #[test]
    fn upsampled_map_is_block_constant() {
        let p = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = upsample_to_full(&p, 4, 4).unwrap();
        let v = m.to_vec();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(v[y * 4 + x], p.to_vec()[(y / 2) * 2 + x / 2]);
            }
        }
    }

    #[test]
    fn block_corners_recover_the_stage_map() {
        let p = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![0.9, 0.8, 0.7, 0.6]).unwrap();
        let m = upsample_to_full(&p, 8, 8).unwrap();
        let v = m.to_vec();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(v[(y * 4) * 8 + x * 4], p.to_vec()[y * 2 + x]);
            }
        }
    }

    #[test]
    fn non_integer_factor_is_rejected() {
        let p = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(upsample_to_full(&p, 8, 8).is_err());
    }
}
