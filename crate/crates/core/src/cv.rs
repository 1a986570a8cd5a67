//! Subject-grouped k-fold cross-validation of the PointNet pipeline.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{mean_sd, roc_auc, RocResult};
use crate::pointnet::{ModelParams, PointNetConfig};
use crate::seed;
use crate::split::{fold_indices, split_indices, DatasetManifest};
use crate::train::{score_clouds, train, EpochRecord, Sample, TrainConfig};

/// Train and validation shares of the data outside the test fold, in the
/// 70:15 ratio of a 70/15/15 split.
pub const INNER_FRACTIONS: [f64; 2] = [70.0 / 85.0, 15.0 / 85.0];

#[derive(Clone, Debug)]
pub struct FoldResult {
    /// 0-based.
    pub fold: usize,
    /// Manifest row indices, sorted.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Scores of the test rows, in `test` order.
    pub test_scores: Vec<f64>,
    pub roc: RocResult,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_auc: f64,
    /// Sample standard deviation of the fold AUCs.
    pub sd_auc: f64,
}

impl CvReport {
    pub fn aucs(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.roc.auc).collect()
    }
}

/// Seed of fold `fold`'s training run.
pub fn fold_train_seed(master: u64, fold: usize) -> u64 {
    seed::derive(master, &[2, fold as u64])
}

/// `clouds[i]` belongs to manifest row `i`. Each fold is held out once;
/// the remaining subjects are re-split into train and validation sets and
/// the model is early-stopped on the latter.
pub fn cross_validate(
    manifest: &DatasetManifest,
    clouds: &[PointCloud],
    model: &PointNetConfig,
    train_config: &TrainConfig,
    k: usize,
    master_seed: u64,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<CvReport> {
    if clouds.len() != manifest.len() {
        return Err(Error::Data(format!(
            "{} clouds for {} manifest rows",
            clouds.len(),
            manifest.len()
        )));
    }
    let labels = manifest.labels();
    let folds = fold_indices(manifest, k, seed::derive(master_seed, &[0]))?;
    let mut results = Vec::with_capacity(k);
    for (f, test) in folds.into_iter().enumerate() {
        let mut in_test = alloc::vec![false; manifest.len()];
        for &i in &test {
            in_test[i] = true;
        }
        let rest: Vec<usize> = (0..manifest.len()).filter(|&i| !in_test[i]).collect();
        let inner = split_indices(
            &manifest.select(&rest),
            &INNER_FRACTIONS,
            seed::derive(master_seed, &[1, f as u64]),
        )?;
        let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = (
            inner[0].iter().map(|&i| rest[i]).collect(),
            inner[1].iter().map(|&i| rest[i]).collect(),
        );
        let samples = |idx: &[usize]| -> Vec<Sample<'_>> {
            idx.iter()
                .map(|&i| Sample {
                    cloud: &clouds[i],
                    label: labels[i],
                })
                .collect()
        };
        let cfg = train_config.clone().with_seed(fold_train_seed(master_seed, f));
        let outcome = train(
            model,
            &samples(&train_idx),
            &samples(&val_idx),
            &cfg,
            &mut |r| on_epoch(f, r),
        )?;
        let test_clouds: Vec<&PointCloud> = test.iter().map(|&i| &clouds[i]).collect();
        let scores = score_clouds(
            &outcome.best_params,
            model,
            &test_clouds,
            cfg.sample_seed,
            cfg.scale_um,
            cfg.batch_size,
        )?;
        let test_labels: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
        let roc = roc_auc(&scores, &test_labels)?;
        results.push(FoldResult {
            fold: f,
            train: train_idx,
            val: val_idx,
            test,
            test_scores: scores,
            roc,
            best_epoch: outcome.best_epoch,
            history: outcome.history,
            params: outcome.best_params,
        });
    }
    let aucs: Vec<f64> = results.iter().map(|r| r.roc.auc).collect();
    let (mean_auc, sd_auc) = mean_sd(&aucs);
    Ok(CvReport {
        folds: results,
        mean_auc,
        sd_auc,
    })
}
