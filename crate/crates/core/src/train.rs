//! SGD training loop, evaluation, and the per-run log.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::backbone::EfcNet;
use crate::checkpoint::checkpoint_bytes;
use crate::config::{derive_seed, ModelConfig};
use crate::dataio::{FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{stage_loss, total_loss};
use crate::metrics::{binarize, dsc, iou, MetricsReport};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

/// Plain SGD: `p <- p - lr * grad`. No momentum, no weight decay. Parameters
/// without an accumulated gradient are left untouched.
pub fn sgd_step<S: Scalar>(params: &[Tensor<S>], lr: f64) {
    let neg_lr = S::of(-lr);
    for p in params {
        if let Some(grad) = p.grad() {
            p.apply_delta(&grad, neg_lr);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over batches of the weighted total loss.
    pub total_loss: f64,
    /// Mean per active stage, ordered full-resolution first.
    pub stage_losses: Vec<f64>,
    pub val_dsc: f64,
    pub val_iou: f64,
}

/// One training run's log. Everything except `wall_time_secs` is a pure
/// function of (config, seed, dataset); [`TrainLog::deterministic_csv`]
/// serializes exactly that reproducible part.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub run_id: String,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub wall_time_secs: f64,
}

impl TrainLog {
    /// CSV of the reproducible fields; bitwise identical across reruns of
    /// the same seeded configuration.
    pub fn deterministic_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# run {} config {}", self.run_id, self.config_hash);
        let _ = writeln!(s, "epoch,total_loss,stage_losses,val_dsc,val_iou");
        for e in &self.epochs {
            let stages: Vec<String> = e.stage_losses.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch,
                e.total_loss,
                stages.join(";"),
                e.val_dsc,
                e.val_iou
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}# wall_time_secs {}\n", self.deterministic_csv(), self.wall_time_secs)
    }
}

pub struct TrainOutcome<S: Scalar> {
    pub model: EfcNet<S>,
    pub log: TrainLog,
    /// Checkpoint of the best-validation-DSC epoch.
    pub best_checkpoint: Vec<u8>,
    pub best_epoch: usize,
}

fn flip_w<S: Scalar>(data: &mut [S], channels: usize, h: usize, w: usize) {
    for c in 0..channels {
        for y in 0..h {
            data[(c * h + y) * w..(c * h + y + 1) * w].reverse();
        }
    }
}

/// Stacks samples into `(N, C, H, W)` image and `(N, 1, H, W)` mask batches,
/// optionally flipping each sample horizontally.
fn assemble_batch<S: Scalar>(
    samples: &[&Sample<S>],
    flips: &[bool],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let shape = samples[0].image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut images = Vec::with_capacity(samples.len() * c * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for (s, flip) in samples.iter().zip(flips) {
        let mut img = s.image.to_vec();
        let mut msk = s.mask.to_vec();
        if *flip {
            flip_w(&mut img, c, h, w);
            flip_w(&mut msk, 1, h, w);
        }
        images.extend_from_slice(&img);
        masks.extend_from_slice(&msk);
    }
    Ok((
        Tensor::from_vec(vec![samples.len(), c, h, w], images)?,
        Tensor::from_vec(vec![samples.len(), 1, h, w], masks)?,
    ))
}

fn select<'s, S: Scalar>(
    by_id: &HashMap<&str, &'s Sample<S>>,
    ids: &[String],
) -> Result<Vec<&'s Sample<S>>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Config(format!("unknown sample id `{id}`")))
        })
        .collect()
}

/// Trains on the fold's train split (or the whole dataset when `fold` is
/// None, validating on the training set). Deterministic for a given
/// (config, dataset, fold); returns the log and the best-validation
/// checkpoint.
pub fn train<S: Scalar>(
    config: &ModelConfig,
    samples: &[Sample<S>],
    fold: Option<&FoldSplit>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    let start = Instant::now();
    let by_id: HashMap<&str, &Sample<S>> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let all_ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let (train_ids, val_ids) = match fold {
        Some(f) => (f.train.clone(), f.val.clone()),
        None => (all_ids.clone(), all_ids),
    };
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::Config("empty train or validation split".into()));
    }
    let train_set = select(&by_id, &train_ids)?;
    let val_set = select(&by_id, &val_ids)?;

    let model = EfcNet::<S>::new(config)?;
    let params = model.parameters();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, "train"));

    let mut log_epochs = Vec::with_capacity(config.epochs);
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_checkpoint = checkpoint_bytes(&model)?;
    let mut best_epoch = 0usize;

    let n_heads = config.mps_heads;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut batch_totals = 0.0f64;
        let mut stage_sums = vec![0.0f64; n_heads];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample<S>> = chunk.iter().map(|i| train_set[*i]).collect();
            let flips: Vec<bool> = batch
                .iter()
                .map(|_| config.augment_hflip && rng.gen_bool(0.5))
                .collect();
            let (images, masks) = assemble_batch(&batch, &flips)?;

            let outputs = model.forward(&images, Mode::Train)?;
            let mut losses = Vec::with_capacity(outputs.m.len());
            for m in &outputs.m {
                losses.push(stage_loss(
                    m,
                    &masks,
                    config.loss.lambda_dice,
                    config.loss.lambda_bce,
                )?);
            }
            let total = total_loss(&losses, &config.loss.alpha)?;
            let total_value = total.item().as_f64();
            if !total_value.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: batches });
            }
            for (sum, l) in stage_sums.iter_mut().zip(&losses) {
                *sum += l.item().as_f64();
            }
            batch_totals += total_value;
            batches += 1;

            model.zero_grad();
            total.backward()?;
            sgd_step(&params, config.lr);
        }

        let val = evaluate_model(&model, &val_set, None, &config.variant_tag())?;
        if val.mean_dsc > best_dsc {
            best_dsc = val.mean_dsc;
            best_checkpoint = checkpoint_bytes(&model)?;
            best_epoch = epoch;
        }
        log_epochs.push(EpochLog {
            epoch,
            total_loss: batch_totals / batches as f64,
            stage_losses: stage_sums.iter().map(|s| s / batches as f64).collect(),
            val_dsc: val.mean_dsc,
            val_iou: val.mean_iou,
        });
    }

    let log = TrainLog {
        run_id: format!(
            "{}-{}-fold{}",
            config.variant_tag(),
            config.hash(),
            fold.map_or_else(|| "all".to_string(), |f| f.fold.to_string())
        ),
        config_hash: config.hash(),
        epochs: log_epochs,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_checkpoint,
        best_epoch,
    })
}

/// Eval-mode forward over `samples`, final head only, thresholded at 0.5;
/// returns per-sample DSC/IoU and fold means.
pub fn evaluate_model<S: Scalar>(
    model: &EfcNet<S>,
    samples: &[&Sample<S>],
    fold: Option<usize>,
    variant: &str,
) -> Result<MetricsReport> {
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let shape = s.image.shape();
        let image = Tensor::from_vec(
            vec![1, shape[0], shape[1], shape[2]],
            s.image.to_vec(),
        )?;
        let outputs = no_grad(|| model.forward(&image, Mode::Eval))?;
        let pred = binarize(outputs.final_map(), 0.5);
        let gt = s.mask_bits();
        per_sample.push((s.id.clone(), dsc(&pred, &gt)?, iou(&pred, &gt)?));
    }
    Ok(MetricsReport::new(fold, variant.to_string(), per_sample))
}

/// Convenience wrapper selecting the fold's test ids from `samples`.
pub fn evaluate_fold<S: Scalar>(
    model: &EfcNet<S>,
    samples: &[Sample<S>],
    fold: &FoldSplit,
    variant: &str,
) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &Sample<S>> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let test = select(&by_id, &fold.test)?;
    evaluate_model(model, &test, Some(fold.fold), variant)
}

/// Convenience: a batch image/mask pair for the whole sample list (no
/// augmentation), used by gradient-flow and regression tests.
pub fn full_batch<S: Scalar>(samples: &[&Sample<S>]) -> Result<(Tensor<S>, Tensor<S>)> {
    let flips = vec![false; samples.len()];
    assemble_batch(samples, &flips)
}

/// Single-batch loss at the model's current parameters (train mode,
/// no update); used by the learning-rate sanity band.
pub fn batch_loss<S: Scalar>(
    model: &EfcNet<S>,
    images: &Tensor<S>,
    masks: &Tensor<S>,
    config: &ModelConfig,
) -> Result<Tensor<S>> {
    let outputs = model.forward(images, Mode::Train)?;
    let mut losses = Vec::with_capacity(outputs.m.len());
    for m in &outputs.m {
        losses.push(stage_loss(
            m,
            masks,
            config.loss.lambda_dice,
            config.loss.lambda_bce,
        )?);
    }
    total_loss(&losses, &config.loss.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_dataset, SyntheticSpec};

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.stages = 2;
        cfg.base_channels = 4;
        cfg.input_height = 32;
        cfg.input_width = 32;
        cfg.mps_heads = 2;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.data_count = 8;
        cfg.data_ratio_min = 0.002;
        cfg.data_ratio_max = 0.01;
        cfg
    }

    fn tiny_dataset(cfg: &ModelConfig) -> Vec<Sample<f64>> {
        generate_dataset(&SyntheticSpec::from_config(cfg), cfg.data_count).unwrap()
    }

    #[test]
    fn sgd_leaves_parameters_without_gradients_untouched() {
        let p = Tensor::<f64>::from_vec(vec![2], vec![1.0, -2.0]).unwrap().requires_grad();
        sgd_step(&[p.clone()], 0.1);
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_applies_the_plain_update_rule() {
        let p = Tensor::<f64>::from_vec(vec![1], vec![1.0]).unwrap().requires_grad();
        p.accumulate_grad(&[0.5]);
        sgd_step(&[p.clone()], 0.01);
        assert!((p.to_vec()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn sgd_on_quadratic_bowl_follows_closed_form() {
        // loss 0.5 * p^2 has gradient p, so p_t = p_0 * (1 - lr)^t
        let p = Tensor::<f64>::from_vec(vec![1], vec![1.0]).unwrap().requires_grad();
        let lr = 0.1;
        let mut prev = 1.0f64;
        for t in 1..=20 {
            let loss = crate::tensor::elementwise::scale(
                &crate::tensor::elementwise::mul(&p, &p).unwrap(),
                0.5,
            );
            p.zero_grad();
            loss.backward().unwrap();
            sgd_step(&[p.clone()], lr);
            let now = p.to_vec()[0];
            let expect = (1.0 - lr).powi(t);
            assert!((now - expect).abs() < 1e-12, "t={t}: {now} vs {expect}");
            assert!(now < prev, "monotone decrease toward 0");
            prev = now;
        }
    }

    #[test]
    fn zero_learning_rate_freezes_the_loss() {
        let mut cfg = tiny_config();
        cfg.lr = 0.0;
        cfg.augment_hflip = false;
        cfg.batch_size = cfg.data_count; // one batch, so shuffling cannot regroup
        cfg.epochs = 4;
        let data = tiny_dataset(&cfg);
        let out = train(&cfg, &data, None).unwrap();
        let first = out.log.epochs[0].total_loss;
        for e in &out.log.epochs {
            assert!((e.total_loss - first).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_reproduces_log_and_checkpoint_bitwise() {
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.log.deterministic_csv(), b.log.deterministic_csv());
        assert_eq!(a.best_checkpoint, b.best_checkpoint);
        assert_eq!(
            checkpoint_bytes(&a.model).unwrap(),
            checkpoint_bytes(&b.model).unwrap()
        );
    }

    #[test]
    fn gradient_flow_matches_active_heads() {
        let mut cfg = tiny_config();
        cfg.mps_heads = 1;
        cfg.loss.alpha = vec![1.0];
        let data = tiny_dataset(&cfg);
        let model = EfcNet::<f64>::new(&cfg).unwrap();
        let set: Vec<&Sample<f64>> = data.iter().collect();
        let (images, masks) = full_batch(&set[..4]).unwrap();
        let loss = batch_loss(&model, &images, &masks, &cfg).unwrap();
        model.zero_grad();
        loss.backward().unwrap();
        // the final head must receive gradients, inactive heads must not
        let final_head = &model.heads[0];
        assert!(final_head
            .out
            .weight
            .value
            .grad()
            .is_some_and(|g| g.iter().any(|v| *v != 0.0)));
        for head in &model.heads[1..] {
            assert!(head.out.weight.value.grad().is_none());
            assert!(head.block1.conv.weight.value.grad().is_none());
        }
    }

    #[test]
    fn every_active_head_gets_gradient_with_full_supervision() {
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        let model = EfcNet::<f64>::new(&cfg).unwrap();
        let set: Vec<&Sample<f64>> = data.iter().collect();
        let (images, masks) = full_batch(&set[..4]).unwrap();
        let loss = batch_loss(&model, &images, &masks, &cfg).unwrap();
        assert!(loss.item() > 0.0);
        model.zero_grad();
        loss.backward().unwrap();
        for head in &model.heads {
            assert!(
                head.out
                    .weight
                    .value
                    .grad()
                    .is_some_and(|g| g.iter().any(|v| *v != 0.0)),
                "head without gradient"
            );
        }
    }

    #[test]
    fn halving_lr_does_not_over_double_the_single_step_decrease() {
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        let set: Vec<&Sample<f64>> = data.iter().collect();
        let (images, masks) = full_batch(&set[..4]).unwrap();
        let mut decreases = Vec::new();
        for lr in [0.01, 0.005] {
            let model = EfcNet::<f64>::new(&cfg).unwrap();
            let params = model.parameters();
            let before = batch_loss(&model, &images, &masks, &cfg).unwrap();
            model.zero_grad();
            before.backward().unwrap();
            sgd_step(&params, lr);
            let after = no_grad(|| batch_loss(&model, &images, &masks, &cfg)).unwrap();
            decreases.push(before.item() - after.item());
        }
        assert!(
            decreases[1] <= 2.0 * decreases[0].abs() + 1e-9,
            "half-lr decrease {} vs full-lr decrease {}",
            decreases[1],
            decreases[0]
        );
    }

    #[test]
    fn perfect_oracle_predictions_score_one() {
        // feeding the mask as a +/-10 logit through a sigmoid and thresholding
        // recovers the mask exactly
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        for s in &data[..2] {
            let logits: Vec<f64> = s.mask.to_vec().iter().map(|m| if *m > 0.5 { 10.0 } else { -10.0 }).collect();
            let map = Tensor::from_vec(s.mask.shape(), logits).unwrap();
            let probs = crate::tensor::elementwise::sigmoid(&map);
            let pred = binarize(&probs, 0.5);
            let gt = s.mask_bits();
            assert_eq!(dsc(&pred, &gt).unwrap(), 1.0);
            assert_eq!(iou(&pred, &gt).unwrap(), 1.0);
        }
    }

    #[test]
    fn constant_half_output_matches_all_ones_prediction() {
        // at the inclusive 0.5 threshold a constant-0.5 map binarizes to all
        // ones, so its DSC equals the all-ones DSC
        let cfg = tiny_config();
        let data = tiny_dataset(&cfg);
        let s = &data[0];
        let half = Tensor::<f64>::full(&s.mask.shape(), 0.5);
        let ones = vec![1u8; s.mask.numel()];
        let gt = s.mask_bits();
        let from_half = binarize(&half, 0.5);
        assert_eq!(from_half, ones);
        assert_eq!(dsc(&from_half, &gt).unwrap(), dsc(&ones, &gt).unwrap());
    }
}
