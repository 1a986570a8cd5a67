//! Early-stopped training with per-epoch resampling and rigid augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::geometry::{self, PointCloud};
use crate::metrics::roc_auc;
use crate::optim::{adam_step, AdamState, Grads};
use crate::pointnet::{forward, init_params, Mode, ModelParams, PointNetConfig, BN_MOMENTUM};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a strictly better validation AUC before stopping.
    pub patience: usize,
    pub lr: f64,
    pub ortho_weight: f64,
    pub augment: bool,
    pub max_angle: f64,
    pub max_shift_mm: f64,
    pub scale_um: f64,
    pub init_seed: u64,
    pub sample_seed: u64,
    pub dropout_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            batch_size: 32,
            patience: 5,
            lr: 1e-3,
            ortho_weight: 0.001,
            augment: true,
            max_angle: geometry::DEFAULT_MAX_ANGLE,
            max_shift_mm: geometry::DEFAULT_MAX_SHIFT_MM,
            scale_um: geometry::DEFAULT_SCALE_UM,
            init_seed: 1,
            sample_seed: 2,
            dropout_seed: 3,
        }
    }
}

impl TrainConfig {
    /// Derives the three seeds from one master seed.
    pub fn with_seed(mut self, master: u64) -> Self {
        self.init_seed = seed::derive(master, &[0x1417]);
        self.sample_seed = seed::derive(master, &[0x5a3b]);
        self.dropout_seed = seed::derive(master, &[0xd709]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2 for batchnorm, got {}",
                self.batch_size
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.ortho_weight >= 0.0) {
            return bad(format!("ortho_weight must be ≥ 0, got {}", self.ortho_weight));
        }
        if !(self.max_angle >= 0.0) || !(self.max_shift_mm >= 0.0) {
            return bad("augmentation magnitudes must be ≥ 0".into());
        }
        if !(self.scale_um > 0.0) {
            return bad(format!("coordinate scale must be positive, got {}", self.scale_um));
        }
        Ok(())
    }
}

/// One labeled scan: its full aligned cloud.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub cloud: &'a PointCloud,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Scan-weighted mean of cross entropy plus weighted ortho penalty.
    pub train_loss: f64,
    pub val_auc: f64,
    /// Scan-weighted mean ortho penalty over the epoch's batches.
    pub ortho_penalty: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    /// 1-based epoch whose parameters are kept.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_val_auc(&self) -> f64 {
        self.history[self.best_epoch - 1].val_auc
    }
}

/// Seed of the per-scan point subset drawn in `epoch`.
pub fn subsample_seed(sample_seed: u64, epoch: usize, source_id: &str) -> u64 {
    seed::derive(sample_seed, &[epoch as u64, seed::hash_str(source_id)])
}

/// Fixed validation / evaluation subset seed of a scan.
pub fn eval_seed(sample_seed: u64, source_id: &str) -> u64 {
    seed::derive(sample_seed, &[u64::MAX, seed::hash_str(source_id)])
}

fn encode(cloud: &PointCloud, s: usize, seed: u64, scale: f64) -> Result<Tensor> {
    let sub = geometry::subsample(cloud, s, seed)?;
    geometry::encode_features(&sub, scale)
}

/// Sizes of `ceil(n / batch_size)` batches differing by at most one.
pub fn batch_sizes(n: usize, batch_size: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let count = n.div_ceil(batch_size);
    (0..count)
        .map(|i| n / count + usize::from(i < n % count))
        .collect()
}

/// Class-1 minus class-0 logit for each encoded cloud, in eval mode.
pub fn score_encoded(
    params: &ModelParams,
    config: &PointNetConfig,
    clouds: &[Tensor],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(batch_size.max(1)) {
        let batch = Tensor::stack(chunk)?;
        let mut g = Graph::new();
        let pass = forward(&mut g, params, config, &batch, Mode::Eval, 0)?;
        let logits = g.value(pass.logits);
        if !logits.all_finite() {
            return Err(Error::NonFinite("eval logits".into()));
        }
        scores.extend(logits.data().chunks(2).map(|r| (r[1] - r[0]) as f64));
    }
    Ok(scores)
}

/// Scores of full clouds, each subsampled with its fixed evaluation seed.
pub fn score_clouds(
    params: &ModelParams,
    config: &PointNetConfig,
    clouds: &[&PointCloud],
    sample_seed: u64,
    scale_um: f64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let encoded: Vec<Tensor> = clouds
        .iter()
        .map(|c| encode(c, config.s_points, eval_seed(sample_seed, &c.source_id), scale_um))
        .collect::<Result<_>>()?;
    score_encoded(params, config, &encoded, batch_size)
}

/// Trains from fresh parameters and keeps those of the best validation AUC.
pub fn train(
    model: &PointNetConfig,
    train_set: &[Sample<'_>],
    val_set: &[Sample<'_>],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 scans, got {}",
            train_set.len()
        )));
    }
    if val_set.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let s = model.s_points;
    let val_labels: Vec<u8> = val_set.iter().map(|v| v.label).collect();
    let val_x: Vec<Tensor> = val_set
        .iter()
        .map(|v| {
            encode(
                v.cloud,
                s,
                eval_seed(config.sample_seed, &v.cloud.source_id),
                config.scale_um,
            )
        })
        .collect::<Result<_>>()?;

    let mut params: ModelParams = init_params(model, config.init_seed)?;
    let mut adam = AdamState::new(config.lr);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(config.sample_seed, &[epoch as u64, 0x0dde]));
        let (mut loss_sum, mut ortho_sum) = (0.0, 0.0);
        let mut start = 0;
        for (b, size) in batch_sizes(order.len(), config.batch_size).into_iter().enumerate() {
            let idx = &order[start..start + size];
            start += size;
            let clouds: Vec<Tensor> = idx
                .iter()
                .map(|&i| {
                    let c = train_set[i].cloud;
                    encode(c, s, subsample_seed(config.sample_seed, epoch, &c.source_id), config.scale_um)
                })
                .collect::<Result<_>>()?;
            let mut batch = Tensor::stack(&clouds)?;
            if config.augment {
                let aug_seed = seed::derive(config.sample_seed, &[epoch as u64, b as u64, 0xa06]);
                batch = geometry::augment_rigid(&batch, aug_seed, config.max_angle, config.max_shift_mm)?;
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train_set[i].label as usize).collect();

            let mut g = Graph::new();
            let dropout = seed::derive(config.dropout_seed, &[epoch as u64, b as u64]);
            let pass = forward(&mut g, &params, model, &batch, Mode::Train, dropout)?;
            let ce = g.softmax_cross_entropy(pass.logits, &labels)?;
            let reg = g.scale(pass.ortho_penalty, config.ortho_weight as f32);
            let loss = g.add(ce, reg)?;
            g.backward(loss)?;
            let loss_v = g.value(loss).item()? as f64;
            let ortho_v = g.value(pass.ortho_penalty).item()? as f64;
            let mut grads = Grads::new();
            for (name, v) in &pass.params {
                let grad = g
                    .grad(*v)
                    .ok_or_else(|| Error::Contract(format!("no gradient reached {name}")))?;
                grads.insert(name.clone(), grad);
            }
            adam_step(&mut params, &mut grads, &mut adam)?;
            for (prefix, m) in &pass.moments {
                params.update_running(prefix, m, BN_MOMENTUM)?;
            }
            loss_sum += loss_v * size as f64;
            ortho_sum += ortho_v * size as f64;
        }
        let n = train_set.len() as f64;
        let scores = score_encoded(&params, model, &val_x, config.batch_size)?;
        let val_auc = roc_auc(&scores, &val_labels)?.auc;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_auc,
            ortho_penalty: ortho_sum / n,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, auc, _)| val_auc > *auc) {
            best = Some((epoch, val_auc, params.clone()));
        }
        let since_best = epoch - best.as_ref().map_or(0, |b| b.0);
        if since_best > config.patience {
            break;
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_balanced() {
        assert_eq!(batch_sizes(65, 32), [22, 22, 21]);
        assert_eq!(batch_sizes(33, 32), [17, 16]);
        assert_eq!(batch_sizes(4, 32), [4]);
        assert!(batch_sizes(0, 8).is_empty());
        for n in 2..200 {
            let b = batch_sizes(n, 32);
            assert_eq!(b.iter().sum::<usize>(), n);
            assert!(b.iter().all(|&k| (2..=32).contains(&k)));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Spec(_))));
        let c = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
