//! The convolutional-network pruning target and the terminal prune + fine-tune stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BestRecord, PruningTarget, WeightEpoch};
use crate::config::{DatasetConfig, RunConfig, TrainConfig};
use crate::data::augment::augment_batch;
use crate::data::cifar::{load_cifar10, IngestAudit};
use crate::data::{batch_indices, stratified_indices, synthetic_dataset, Dataset, Split, SyntheticSpec};
use crate::env::EnvSpec;
use crate::model::align::{train_step_weights, WeightLoss};
use crate::model::eval::accuracy;
use crate::model::flops::{breakdown, full_breakdown};
use crate::model::{ArchMask, Architecture, PrunableModel};
use crate::tensor::optim::{Sgd, SgdConfig};
use crate::{Error, Result};

/// Seed offsets so each consumer of the run seed gets its own stream.
const MODEL_STREAM: u64 = 0x6d6f_6465_6c00;
const DATA_STREAM: u64 = 0x6461_7461_0000;
const BASELINE_STREAM: u64 = 0x6261_7365_0000;

pub struct CnnTarget {
    pub model: PrunableModel<f32>,
    pub train: Dataset,
    pub test: Dataset,
    pub reward_idx: Vec<usize>,
    pub train_cfg: TrainConfig,
    pub loss: WeightLoss,
    pub total_epochs: usize,
    pub seed: u64,
    spec: EnvSpec,
    opt: Sgd<f32>,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    /// Test accuracy of the identically budgeted unpruned model, in `[0, 1]`.
    pub baseline_acc: f64,
    pub pruned_acc: f64,
    pub delta_acc: f64,
    /// Percentage of whole-model FLOPs removed.
    pub pruned_flops_pct: f64,
    pub full_flops: u64,
    pub pruned_flops: u64,
    pub prunable_budget: u64,
    pub realized_prunable: u64,
    pub best_reward: f64,
    pub best_epoch: usize,
    pub kept: Vec<usize>,
    /// Reward-subset accuracy of the best mask on the final weights.
    pub masked_eval_subset_acc: f64,
    /// Reward-subset accuracy of the physically pruned model before fine-tuning.
    pub pre_finetune_subset_acc: f64,
    pub pre_finetune_test_acc: f64,
    /// Test accuracy of the jointly trained model without any mask.
    pub unpruned_test_acc: f64,
    pub masked_to_kept_norm_ratio: Option<f64>,
    pub finetune_epochs: usize,
}

fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset, Option<IngestAudit>)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { train, test_size } => {
            // One draw split in two so both halves share normalization.
            let all = synthetic_dataset(
                &SyntheticSpec {
                    size: train.size + test_size,
                    ..train.clone()
                },
                Split::Train,
            )?;
            let tr: Vec<usize> = (0..train.size).collect();
            let te: Vec<usize> = (train.size..train.size + test_size).collect();
            let mut test = all.select(&te);
            test.split = Split::Test;
            Ok((all.select(&tr), test, None))
        }
        DatasetConfig::Cifar10 {
            dir,
            train_subset,
            test_subset,
        } => {
            let (mut train, mut test, audit) = load_cifar10(dir)?;
            if let Some(n) = train_subset {
                let idx = stratified_indices(&train.labels, 10, *n, cfg.seed ^ DATA_STREAM)?;
                train = train.select(&idx);
            }
            if let Some(n) = test_subset {
                let idx = stratified_indices(&test.labels, 10, *n, cfg.seed ^ DATA_STREAM ^ 1)?;
                test = test.select(&idx);
            }
            Ok((train, test, Some(audit)))
        }
    }
}

fn sgd(cfg: &TrainConfig) -> Sgd<f32> {
    Sgd::new(SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    })
}

/// One epoch of `L_w` minimization over `data` at learning rate `lr`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_epoch(
    model: &mut PrunableModel<f32>,
    opt: &mut Sgd<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    mask: &ArchMask,
    loss: WeightLoss,
    rng: &mut ChaCha8Rng,
) -> Result<WeightEpoch> {
    opt.set_lr(lr);
    let batches = batch_indices(data.len(), cfg.batch_size, Some(&mut *rng));
    let mut sum = WeightEpoch {
        lr,
        ..WeightEpoch::default()
    };
    for idx in &batches {
        let (mut x, y) = data.batch::<f32>(idx);
        if cfg.augment {
            augment_batch(&mut x, rng);
        }
        let l = train_step_weights(model, opt, x, &y, mask, loss)?;
        sum.l_w += l.l_w;
        sum.l_class += l.l_class;
        sum.l_align += l.l_align;
    }
    let n = batches.len().max(1) as f64;
    sum.l_w /= n;
    sum.l_class /= n;
    sum.l_align /= n;
    Ok(sum)
}

pub fn build_cnn_target(cfg: &RunConfig) -> Result<(CnnTarget, Option<IngestAudit>)> {
    let (arch, budget) = cfg.validate()?;
    let (train, test, audit) = datasets(cfg)?;
    let reward_idx = stratified_indices(&train.labels, train.num_classes, cfg.prune.reward_subset, cfg.seed)?;
    let model = PrunableModel::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ MODEL_STREAM))?;
    let spec = EnvSpec::new(&arch, budget)?;
    let mut loss = WeightLoss::new(cfg.prune.beta);
    loss.grouping = cfg.prune.grouping;
    Ok((
        CnnTarget {
            model,
            train,
            test,
            reward_idx,
            train_cfg: cfg.train.clone(),
            loss,
            total_epochs: cfg.schedule.epochs,
            seed: cfg.seed,
            spec,
            opt: sgd(&cfg.train),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM),
        },
        audit,
    ))
}

impl CnnTarget {
    pub fn arch(&self) -> &Architecture {
        &self.model.arch
    }

    pub fn test_accuracy(&self, model: &PrunableModel<f32>, mask: Option<&ArchMask>) -> Result<f64> {
        let idx: Vec<usize> = (0..self.test.len()).collect();
        accuracy(model, &self.test, &idx, mask, self.train_cfg.eval_batch)
    }

    pub fn subset_accuracy(&self, model: &PrunableModel<f32>, mask: Option<&ArchMask>) -> Result<f64> {
        accuracy(model, &self.train, &self.reward_idx, mask, self.train_cfg.eval_batch)
    }

    /// Fine-tune `model` for `finetune_epochs` without alignment.
    fn finetune(&self, model: &mut PrunableModel<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
        let cfg = &self.train_cfg;
        let epochs = cfg.finetune_epochs;
        let mut opt = sgd(cfg);
        let ones = ArchMask::all_ones(&model.arch);
        let plain = WeightLoss::new(0.0);
        for f in 1..=epochs {
            let lr = if cfg.finetune_restart_lr {
                cfg.lr_at(f, epochs)
            } else {
                cfg.lr_at(self.total_epochs, self.total_epochs)
            };
            weight_epoch(model, &mut opt, &self.train, cfg, lr, &ones, plain, rng)?;
        }
        Ok(())
    }

    /// Unpruned model trained with the same epoch budget as the pruned one.
    fn baseline_accuracy(&self) -> Result<f64> {
        let mut model = PrunableModel::new(self.model.arch.clone(), &mut ChaCha8Rng::seed_from_u64(self.seed ^ MODEL_STREAM))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ BASELINE_STREAM);
        let mut opt = sgd(&self.train_cfg);
        let ones = ArchMask::all_ones(&model.arch);
        for t in 1..=self.total_epochs {
            let lr = self.train_cfg.lr_at(t, self.total_epochs);
            weight_epoch(&mut model, &mut opt, &self.train, &self.train_cfg, lr, &ones, WeightLoss::new(0.0), &mut rng)?;
        }
        self.finetune(&mut model, &mut rng)?;
        self.test_accuracy(&model, None)
    }

    /// Physically prune to the best mask, fine-tune and report.
    pub fn finalize(&self, best: Option<&BestRecord>) -> Result<(FinalReport, PrunableModel<f32>)> {
        let best = best.ok_or_else(|| {
            Error::Config("no pruning episode ran, so there is no best mask to finalize (check the schedule)".into())
        })?;
        let full = full_breakdown(&self.model.arch);
        let mut pruned = self.model.physical_prune(&best.mask)?;
        let masked_eval_subset_acc = self.subset_accuracy(&self.model, Some(&best.mask))?;
        let pre_finetune_subset_acc = self.subset_accuracy(&pruned, None)?;
        let pre_finetune_test_acc = self.test_accuracy(&pruned, None)?;
        let unpruned_test_acc = self.test_accuracy(&self.model, None)?;
        let masked_to_kept_norm_ratio = self.model.masked_to_kept_norm_ratio(&best.mask);

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ DATA_STREAM ^ 2);
        self.finetune(&mut pruned, &mut rng)?;
        let pruned_acc = self.test_accuracy(&pruned, None)?;
        let baseline_acc = if self.train_cfg.train_baseline {
            self.baseline_accuracy()?
        } else {
            unpruned_test_acc
        };
        let kept = best.mask.kept_counts();
        let after = breakdown(&self.model.arch, &kept)?;
        Ok((
            FinalReport {
                baseline_acc,
                pruned_acc,
                delta_acc: pruned_acc - baseline_acc,
                pruned_flops_pct: 100.0 * (1.0 - after.total as f64 / full.total as f64),
                full_flops: full.total,
                pruned_flops: after.total,
                prunable_budget: self.spec.desire,
                realized_prunable: after.prunable,
                best_reward: best.reward,
                best_epoch: best.epoch,
                kept,
                masked_eval_subset_acc,
                pre_finetune_subset_acc,
                pre_finetune_test_acc,
                unpruned_test_acc,
                masked_to_kept_norm_ratio,
                finetune_epochs: self.train_cfg.finetune_epochs,
            },
            pruned,
        ))
    }
}

impl PruningTarget for CnnTarget {
    fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn rankings(&self) -> Vec<Vec<usize>> {
        self.model.rank_all()
    }

    fn reward(&self, mask: &ArchMask) -> Result<f64> {
        self.subset_accuracy(&self.model, Some(mask))
    }

    fn train_epoch(&mut self, t: usize, mask: &ArchMask) -> Result<WeightEpoch> {
        let lr = self.train_cfg.lr_at(t, self.total_epochs);
        weight_epoch(
            &mut self.model,
            &mut self.opt,
            &self.train,
            &self.train_cfg,
            lr,
            mask,
            self.loss,
            &mut self.rng,
        )
    }
}
