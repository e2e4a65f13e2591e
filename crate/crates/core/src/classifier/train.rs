use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dro::{dro_weight_update, group_mean_losses, weighted_group_loss, GroupWeights};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::forge::derive_seed;
use crate::nn::{sigmoid, Adam, LogitModel, Tensor};

/// Images with binary targets and a group index per sample.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub x: Tensor<f32>,
    pub y: Vec<f32>,
    pub groups: Vec<usize>,
    pub n_groups: usize,
}

impl TrainingData {
    pub fn new(x: Tensor<f32>, y: Vec<f32>, groups: Vec<usize>, n_groups: usize) -> Self {
        assert_eq!(x.batch(), y.len());
        assert_eq!(y.len(), groups.len());
        assert!(groups.iter().all(|&g| g < n_groups));
        Self { x, y, groups, n_groups }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_groups];
        for &g in &self.groups {
            c[g] += 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Mean cross-entropy over every sample.
    Erm,
    /// Online group DRO: per-batch group losses drive `q`, the step descends
    /// on `Σ q_g L_g`.
    GroupDro { eta_q: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Accuracy,
    WorstGroupAccuracy,
    /// Negated largest per-group mean cross-entropy.
    WorstGroupLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub params: Vec<f32>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<EpochLog>,
    pub final_q: Option<GroupWeights>,
}

const EVAL_CHUNK: usize = 128;

pub(crate) fn predict_logits<M: LogitModel<f32>>(model: &M, params: &[f32], x: &Tensor<f32>) -> Vec<f32> {
    let idx: Vec<usize> = (0..x.batch()).collect();
    let mut out = Vec::with_capacity(x.batch());
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model.logits(params, &x.gather(chunk)));
    }
    out
}

/// Validation score under `selection`; higher is better. Only groups with
/// samples take part in the worst-group variants.
pub fn score(logits: &[f32], data: &TrainingData, threshold: f64, selection: Selection) -> f64 {
    if selection == Selection::WorstGroupLoss {
        let counts = data.group_counts();
        let losses = group_mean_losses(logits, &data.y, &data.groups, data.n_groups);
        return -losses.iter().zip(&counts).filter(|(_, &c)| c > 0).map(|(&l, _)| l).fold(f64::NEG_INFINITY, f64::max);
    }
    let mut hit = vec![0usize; data.n_groups];
    let mut tot = vec![0usize; data.n_groups];
    for ((&z, &y), &g) in logits.iter().zip(&data.y).zip(&data.groups) {
        let pred = sigmoid(z as f64) >= threshold;
        tot[g] += 1;
        if pred == (y >= 0.5) {
            hit[g] += 1;
        }
    }
    match selection {
        Selection::Accuracy => hit.iter().sum::<usize>() as f64 / tot.iter().sum::<usize>().max(1) as f64,
        Selection::WorstGroupAccuracy | Selection::WorstGroupLoss => hit
            .iter()
            .zip(&tot)
            .filter(|(_, &t)| t > 0)
            .map(|(&h, &t)| h as f64 / t as f64)
            .fold(f64::INFINITY, f64::min),
    }
}

/// Minibatch Adam on `objective`, keeping the parameters with the best
/// validation score. Ties go to the lower mean validation loss.
pub fn fit<M: LogitModel<f32>>(
    model: &M,
    init: Vec<f32>,
    train: &TrainingData,
    val: &TrainingData,
    cfg: &TrainConfig,
    objective: Objective,
    selection: Selection,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if val.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    assert_eq!(init.len(), model.num_params());
    let mut params = init;
    let mut adam = Adam::new(params.len(), cfg.learning_rate, 0.9, 0.999, cfg.weight_decay);
    let mut q = GroupWeights::uniform(train.n_groups);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY, f64::INFINITY);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train.x.gather(batch);
            let y: Vec<f32> = batch.iter().map(|&i| train.y[i]).collect();
            let g: Vec<usize> = batch.iter().map(|&i| train.groups[i]).collect();
            let (logits, cache) = model.forward(&params, &x);
            let weights: Vec<f64> = match objective {
                Objective::Erm => vec![1.0],
                Objective::GroupDro { eta_q } => {
                    let losses = group_mean_losses(&logits, &y, &g, train.n_groups);
                    q = dro_weight_update(&q, &losses, eta_q)?;
                    q.as_slice().to_vec()
                }
            };
            let groups_used: Vec<usize> = match objective {
                Objective::Erm => vec![0; g.len()],
                Objective::GroupDro { .. } => g,
            };
            let (loss, dlogits) = weighted_group_loss(&logits, &y, &groups_used, &weights);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let mut grad = vec![0.0f32; params.len()];
            model.backward(&params, cache, &dlogits, Some(&mut grad), false);
            adam.step(&mut params, &grad);
            loss_sum += loss as f64;
            batches += 1;
        }
        let val_logits = predict_logits(model, &params, &val.x);
        let val_score = score(&val_logits, val, cfg.threshold, selection);
        let val_loss = weighted_group_loss(&val_logits, &val.y, &vec![0; val.len()], &[1.0]).0 as f64;
        let log_q = matches!(objective, Objective::GroupDro { .. }).then(|| q.as_slice().to_vec());
        history.push(EpochLog { epoch, train_loss: loss_sum / batches as f64, val_score, val_loss, q: log_q });
        if val_score > best.2 || (val_score == best.2 && val_loss < best.3) {
            best = (params.clone(), epoch, val_score, val_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    let final_q = matches!(objective, Objective::GroupDro { .. }).then_some(q);
    Ok(FitOutcome { params: best.0, best_epoch: best.1, best_score: best.2, history, final_q })
}
