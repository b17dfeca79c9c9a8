//! Training loops: combined cross-entropy + contrastive pretraining on
//! balanced synthetic data, last-layer (or full) retraining on real data,
//! a plain ERM baseline, and group-reweighted robust training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BalanceMode, BatchSampler, GroupKey, GroupedDataset};
use crate::error::{Error, Result};
use crate::loss::{
    ce_grad_logits, combined_loss, supcon_with_grad, GroupWeights, SupConForm,
};
use crate::model::{Mlp, MlpConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Weight of the cross-entropy term; 1 - beta goes to the contrastive term.
    pub beta: f64,
    pub tau: f64,
    pub supcon_form: SupConForm,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 32,
            feature_dim: 16,
            beta: 0.5,
            tau: 1.0,
            supcon_form: SupConForm::NegativesOnly,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 1e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} not in [0, 1]", self.beta)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Head only, class-uniform batches over the full real train split.
    HeadFull,
    /// Head only, group-balanced subsample of the real train split.
    HeadBalanced,
    /// Whole network, group-balanced subsample.
    FullBalanced,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub contrastive: f64,
}

pub struct TrainOutcome {
    pub model: Mlp,
    pub trajectory: Vec<EpochRecord>,
    /// Class label for each model output index.
    pub class_names: Vec<String>,
}

/// Flatten images to f64 rows and map class labels to indices (sorted order).
pub fn inputs_and_labels(ds: &GroupedDataset) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<String>)> {
    let class_names: Vec<String> = ds.classes().iter().cloned().collect();
    let mut inputs = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for item in ds.items() {
        let img = item.image()?;
        // Center pixels to [-1, 1]; raw [0, 1] inputs optimize poorly.
        inputs.push(img.pixels.iter().map(|&p| (p as f64 - 0.5) * 2.0).collect());
        labels.push(
            class_names
                .iter()
                .position(|c| *c == item.class_label)
                .expect("item class is in the dataset's class set"),
        );
    }
    Ok((inputs, labels, class_names))
}

pub fn save_trajectory(trajectory: &[EpochRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "loss", "ce", "contrastive"])?;
    for rec in trajectory {
        writer.write_record([
            rec.epoch.to_string(),
            rec.loss.to_string(),
            rec.ce.to_string(),
            rec.contrastive.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size).max(1)
}

fn check_finite(loss: f64, model: &Mlp, context: &str) -> Result<()> {
    if !loss.is_finite() || !model.has_finite_params() {
        return Err(Error::Numerical(format!(
            "{context}: loss or parameters became non-finite; aborting"
        )));
    }
    Ok(())
}

/// Stage 1: combined objective on a group-balanced stream from the
/// (synthetic, filtered) dataset.
pub fn pretrain(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (inputs, labels, class_names) = inputs_and_labels(ds)?;
    let input_dim = inputs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Capacity("cannot train on an empty dataset".into()))?;
    let mut model = Mlp::new(
        MlpConfig {
            input_dim,
            hidden_dim: cfg.hidden_dim,
            feature_dim: cfg.feature_dim,
            n_classes: class_names.len(),
        },
        cfg.seed,
    );
    let mut sampler = BatchSampler::new(ds, BalanceMode::Group, cfg.batch_size, cfg.seed)?;
    let steps = steps_per_epoch(ds.len(), cfg.batch_size);
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_ce = 0.0;
        let mut epoch_sc = 0.0;
        for _ in 0..steps {
            let batch = sampler.next_batch();
            let x: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let fwd = model.forward(&x)?;
            let logits: Vec<Vec<f64>> =
                (0..x.len()).map(|i| fwd.logits.row(i).iter().copied().collect()).collect();
            let (ce, mut d_logits) = ce_grad_logits(&logits, &y)?;
            for row in &mut d_logits {
                for g in row {
                    *g *= cfg.beta;
                }
            }
            let features: Vec<Vec<f64>> =
                (0..x.len()).map(|i| fwd.features.row(i).iter().copied().collect()).collect();
            // The contrastive loss sums over anchors; train on the per-anchor
            // mean so its scale is comparable to the cross-entropy term.
            let (sc_sum, mut d_feat) = supcon_with_grad(&features, &y, cfg.tau, cfg.supcon_form)?;
            let sc = sc_sum / y.len() as f64;
            for row in &mut d_feat {
                for g in row {
                    *g *= (1.0 - cfg.beta) / y.len() as f64;
                }
            }
            let grads = model.backward(&fwd, &d_logits, Some(&d_feat))?;
            model.sgd_step(&grads, cfg.lr, cfg.weight_decay, false);
            check_finite(combined_loss(ce, sc, cfg.beta)?, &model, "pretrain")?;
            epoch_ce += ce;
            epoch_sc += sc;
        }
        let n = steps as f64;
        trajectory.push(EpochRecord {
            epoch,
            loss: combined_loss(epoch_ce / n, epoch_sc / n, cfg.beta)?,
            ce: epoch_ce / n,
            contrastive: epoch_sc / n,
        });
    }
    Ok(TrainOutcome {
        model,
        trajectory,
        class_names,
    })
}

/// Stage 2: cross-entropy retraining on real data. Head-only modes freeze the
/// encoder and verify it byte-for-byte afterwards.
pub fn finetune(
    mut model: Mlp,
    real: &GroupedDataset,
    mode: FinetuneMode,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let subsampled;
    let (train_ds, balance) = match mode {
        FinetuneMode::HeadFull => (real, BalanceMode::Class),
        FinetuneMode::HeadBalanced | FinetuneMode::FullBalanced => {
            subsampled = real.balanced_subsample(cfg.seed)?;
            (&subsampled, BalanceMode::Group)
        }
    };
    let freeze = mode != FinetuneMode::FullBalanced;
    let encoder_before = model.encoder_hash();
    let (inputs, labels, class_names) = inputs_and_labels(train_ds)?;
    if class_names.len() != model.cfg.n_classes {
        return Err(Error::Config(format!(
            "model has {} outputs but the data has {} classes",
            model.cfg.n_classes,
            class_names.len()
        )));
    }
    let batch_size = cfg.batch_size.min(train_ds.len()).max(1);
    let mut sampler = BatchSampler::new(train_ds, balance, batch_size, cfg.seed ^ 0x666e)?;
    let steps = steps_per_epoch(train_ds.len(), batch_size);
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_ce = 0.0;
        for _ in 0..steps {
            let batch = sampler.next_batch();
            let x: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let fwd = model.forward(&x)?;
            let logits: Vec<Vec<f64>> =
                (0..x.len()).map(|i| fwd.logits.row(i).iter().copied().collect()).collect();
            let (ce, d_logits) = ce_grad_logits(&logits, &y)?;
            let grads = model.backward(&fwd, &d_logits, None)?;
            model.sgd_step(&grads, cfg.lr, cfg.weight_decay, freeze);
            check_finite(ce, &model, "finetune")?;
            epoch_ce += ce;
        }
        let ce = epoch_ce / steps as f64;
        trajectory.push(EpochRecord {
            epoch,
            loss: ce,
            ce,
            contrastive: 0.0,
        });
    }
    if freeze && model.encoder_hash() != encoder_before {
        return Err(Error::Integrity(
            "encoder changed during head-only retraining".into(),
        ));
    }
    Ok(TrainOutcome {
        model,
        trajectory,
        class_names,
    })
}

/// Plain empirical-risk baseline: cross-entropy on the dataset as given,
/// shuffled batches without any balancing.
pub fn erm_baseline(ds: &GroupedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (inputs, labels, class_names) = inputs_and_labels(ds)?;
    let input_dim = inputs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Capacity("cannot train on an empty dataset".into()))?;
    let mut model = Mlp::new(
        MlpConfig {
            input_dim,
            hidden_dim: cfg.hidden_dim,
            feature_dim: cfg.feature_dim,
            n_classes: class_names.len(),
        },
        cfg.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x65726d);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_ce = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size.min(ds.len())) {
            let x: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let fwd = model.forward(&x)?;
            let logits: Vec<Vec<f64>> =
                (0..x.len()).map(|i| fwd.logits.row(i).iter().copied().collect()).collect();
            let (ce, d_logits) = ce_grad_logits(&logits, &y)?;
            let grads = model.backward(&fwd, &d_logits, None)?;
            model.sgd_step(&grads, cfg.lr, cfg.weight_decay, false);
            check_finite(ce, &model, "erm")?;
            epoch_ce += ce;
            steps += 1;
        }
        let ce = epoch_ce / steps as f64;
        trajectory.push(EpochRecord {
            epoch,
            loss: ce,
            ce,
            contrastive: 0.0,
        });
    }
    Ok(TrainOutcome {
        model,
        trajectory,
        class_names,
    })
}

/// Group-robust training: per-batch group losses feed an exponentiated-
/// gradient update of the group weights, and samples are reweighted by their
/// group's adversarial weight. Batches are group-balanced so every group is
/// represented even under severe bias.
pub fn gdro_train(ds: &GroupedDataset, cfg: &TrainConfig, eta: f64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (inputs, labels, class_names) = inputs_and_labels(ds)?;
    let input_dim = inputs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Capacity("cannot train on an empty dataset".into()))?;
    let groups: Vec<GroupKey> = ds.group_sizes().keys().cloned().collect();
    let group_of: Vec<usize> = ds
        .items()
        .iter()
        .map(|item| groups.iter().position(|g| *g == item.group()).unwrap())
        .collect();
    let mut weights = GroupWeights::uniform(groups.len(), eta)?;
    let mut model = Mlp::new(
        MlpConfig {
            input_dim,
            hidden_dim: cfg.hidden_dim,
            feature_dim: cfg.feature_dim,
            n_classes: class_names.len(),
        },
        cfg.seed,
    );
    let batch_size = cfg.batch_size.min(ds.len()).max(groups.len());
    let mut sampler = BatchSampler::new(ds, BalanceMode::Group, batch_size, cfg.seed ^ 0x67d50)?;
    let steps = steps_per_epoch(ds.len(), batch_size);
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let batch = sampler.next_batch();
            let x: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let g: Vec<usize> = batch.iter().map(|&i| group_of[i]).collect();
            let fwd = model.forward(&x)?;
            let logits: Vec<Vec<f64>> =
                (0..x.len()).map(|i| fwd.logits.row(i).iter().copied().collect()).collect();
            // Per-sample nll, grouped means.
            let probs: Vec<Vec<f64>> = logits.iter().map(|r| crate::loss::softmax(r)).collect();
            let mut group_sum = vec![0.0f64; groups.len()];
            let mut group_n = vec![0usize; groups.len()];
            for ((row, &yi), &gi) in probs.iter().zip(&y).zip(&g) {
                group_sum[gi] -= row[yi].max(1e-12).ln();
                group_n[gi] += 1;
            }
            let group_losses: Vec<Option<f64>> = group_sum
                .iter()
                .zip(&group_n)
                .map(|(s, &n)| (n > 0).then(|| s / n as f64))
                .collect();
            let robust_loss = weights.step(&group_losses)?;
            // d(robust loss)/d logits_i = q_g * (softmax - onehot) / n_g.
            let d_logits: Vec<Vec<f64>> = probs
                .iter()
                .zip(&y)
                .zip(&g)
                .map(|((row, &yi), &gi)| {
                    let scale = weights.q[gi] / group_n[gi] as f64;
                    row.iter()
                        .enumerate()
                        .map(|(k, p)| scale * (p - f64::from(u8::from(k == yi))))
                        .collect()
                })
                .collect();
            let grads = model.backward(&fwd, &d_logits, None)?;
            model.sgd_step(&grads, cfg.lr, cfg.weight_decay, false);
            check_finite(robust_loss, &model, "robust training")?;
            epoch_loss += robust_loss;
        }
        let loss = epoch_loss / steps as f64;
        trajectory.push(EpochRecord {
            epoch,
            loss,
            ce: loss,
            contrastive: 0.0,
        });
    }
    Ok(TrainOutcome {
        model,
        trajectory,
        class_names,
    })
}
