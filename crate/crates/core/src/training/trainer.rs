use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{
    balanced_mse, class_weights, mse, weighted_cross_entropy, BalancedMseConfig, LossGrad,
};
use super::optim::{optimizer_step, OptimizerKind, OptimizerState};
use super::preset::{Balancing, LossKind, OptimizerChoice, TrainPreset};
use super::schedule::{one_cycle_lr, OneCycle};
use crate::attmil::{
    backward_batch, forward_batch, forward_features, sample_dropout_mask, update_running_stats,
    HeadKind, ModelConfig, ModelParams,
};
use crate::data_model::{Cohort, TargetSpec};
use crate::error::{Error, Result};
use crate::splitting::FoldPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    /// Binarization of the continuous target for classification presets,
    /// fitted on the training ids of the fold.
    pub target: TargetSpec,
    pub h_att: usize,
    pub h_mlp: usize,
    pub gated: bool,
    /// Instance cap per bag for batched (batch size > 1) training.
    pub max_instances: usize,
    pub schedule: OneCycle,
    /// Decoupled (AdamW) rather than L2-coupled weight decay for Adam.
    pub adam_decoupled: bool,
    /// Balanced-MSE noise variance; the squared Silverman bandwidth of the
    /// training labels when unset.
    pub sigma2: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            target: TargetSpec::median_split("target"),
            h_att: 128,
            h_mlp: 256,
            gated: false,
            max_instances: 512,
            schedule: OneCycle::default(),
            adam_decoupled: true,
            sigma2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Learning rate of every optimizer step, in order.
    pub lr_trace: Vec<f64>,
    /// Total steps the schedule was planned for.
    pub planned_steps: usize,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Per-bag objective of a training run. The balanced loss is multiplied
/// by `2σ²`, which leaves its minimizer and Adam's updates unchanged.
#[derive(Debug, Clone)]
pub enum Objective {
    CrossEntropy { weights: [f64; 2] },
    Mse,
    Balanced(BalancedMseConfig),
}

impl Objective {
    pub fn eval(&self, prediction: &Array1<f64>, target: f64) -> Result<LossGrad> {
        match self {
            Objective::CrossEntropy { weights } => {
                weighted_cross_entropy(prediction, target as u8, *weights)
            }
            Objective::Mse => Ok(mse(prediction[0], target)),
            Objective::Balanced(cfg) => {
                // rescaled by 2σ² to the magnitude of a squared error
                let scale = 2.0 * cfg.sigma2;
                let lg = balanced_mse(prediction[0], target, cfg)?;
                Ok(LossGrad { loss: lg.loss * scale, grad: lg.grad * scale })
            }
        }
    }
}

/// Steps per epoch. With batch normalization a trailing batch of one bag
/// is merged into the previous batch.
fn batch_bounds(n: usize, batch: usize, merge_single: bool) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(batch)
        .map(|s| (s, (s + batch).min(n)))
        .collect();
    if merge_single && out.len() > 1 && out.last().map_or(false, |(a, b)| b - a == 1) {
        let (_, end) = out.pop().unwrap();
        out.last_mut().unwrap().1 = end;
    }
    out
}

fn subsample(h: &Array2<f64>, cap: usize, rng: &mut ChaCha8Rng) -> Option<Array2<f64>> {
    if h.nrows() <= cap {
        return None;
    }
    let mut rows = index::sample(rng, h.nrows(), cap).into_vec();
    rows.sort_unstable();
    Some(h.select(Axis(0), &rows))
}

fn mean_loss(
    params: &ModelParams,
    bags: &[Array2<f64>],
    targets: &[f64],
    objective: &Objective,
) -> Result<f64> {
    let mut total = 0.0;
    for (h, t) in bags.iter().zip(targets) {
        let trace = forward_features(h.view(), params, None)?;
        total += objective.eval(&trace.heads[0].prediction, *t)?.loss;
    }
    Ok(total / bags.len() as f64)
}

pub fn train_model(
    cohort: &Cohort,
    plan: &FoldPlan,
    fold: usize,
    preset: &TrainPreset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    preset.validate()?;
    let f = plan.fold(fold)?;
    let train_ids: Vec<&String> = f
        .train_ids
        .iter()
        .filter(|id| cohort.bag(id).is_some())
        .collect();
    let val_ids: Vec<&String> = f
        .val_ids
        .iter()
        .filter(|id| cohort.bag(id).is_some())
        .collect();
    if train_ids.is_empty() {
        return Err(Error::Invalid(format!("fold {fold}: empty training split")));
    }
    let d = cohort
        .feature_dim()
        .ok_or_else(|| Error::Invalid("cohort has no feature bags".into()))?;
    let head = preset.head();

    let raw = cohort.target_values();
    let target_of = |ids: &[&String]| -> Result<Vec<f64>> {
        match head {
            HeadKind::Regression => Ok(ids.iter().map(|id| raw[*id]).collect()),
            HeadKind::Classification => {
                let fit: BTreeSet<String> = train_ids.iter().map(|s| (*s).clone()).collect();
                let cut = opts.target.fit(&raw, &fit)?;
                Ok(ids.iter().map(|id| cut.label(raw[*id]) as f64).collect())
            }
        }
    };
    let train_y = target_of(&train_ids)?;
    let val_y = target_of(&val_ids)?;

    let objective = match (preset.loss, preset.balancing) {
        (LossKind::WeightedCrossEntropy, balancing) => {
            let labels: Vec<u8> = train_y.iter().map(|y| *y as u8).collect();
            let weights = match balancing {
                Balancing::InverseWeighted => class_weights(&labels)?,
                _ => [1.0, 1.0],
            };
            Objective::CrossEntropy { weights }
        }
        (LossKind::BalancedMse, Balancing::KernelBased) => Objective::Balanced(match opts.sigma2 {
            Some(sigma2) => BalancedMseConfig {
                sigma2,
                candidates: train_y.clone(),
            },
            None => BalancedMseConfig::from_train_labels(&train_y)?,
        }),
        (LossKind::Mse | LossKind::BalancedMse, _) => Objective::Mse,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let config = ModelConfig {
        d,
        h_att: opts.h_att,
        h_mlp: opts.h_mlp,
        head,
        dropout_rate: preset.dropout_rate,
        gated: opts.gated,
        batch_norm: preset.batch_norm,
    };
    let mut params = ModelParams::init(config, &mut rng)?;
    let mut state = OptimizerState::new(&params);
    let optimizer = match preset.optimizer {
        OptimizerChoice::Adam => match OptimizerKind::adam() {
            OptimizerKind::Adam {
                beta1, beta2, eps, ..
            } => OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                decoupled: opts.adam_decoupled,
            },
            k => k,
        },
        OptimizerChoice::Sgd => OptimizerKind::Sgd,
    };

    let train_bags: Vec<Array2<f64>> = train_ids
        .iter()
        .map(|id| cohort.bag(id).unwrap().features_f64())
        .collect();
    let val_bags: Vec<Array2<f64>> = val_ids
        .iter()
        .map(|id| cohort.bag(id).unwrap().features_f64())
        .collect();

    let batch = preset.batch_size.min(train_bags.len());
    let steps_per_epoch = batch_bounds(train_bags.len(), batch, preset.batch_norm).len();
    let planned_steps = steps_per_epoch * preset.epochs;
    let schedule_span = planned_steps.saturating_sub(1).max(1);

    let mut log = TrainLog {
        planned_steps,
        ..TrainLog::default()
    };
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut step = 0;

    for epoch in 1..=preset.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (start, end) in batch_bounds(order.len(), batch, preset.batch_norm) {
            let idx = &order[start..end];
            let sub: Vec<Option<Array2<f64>>> = idx
                .iter()
                .map(|&i| {
                    if batch > 1 {
                        subsample(&train_bags[i], opts.max_instances, &mut rng)
                    } else {
                        None
                    }
                })
                .collect();
            let views: Vec<ArrayView2<f64>> = idx
                .iter()
                .zip(&sub)
                .map(|(&i, s)| s.as_ref().unwrap_or(&train_bags[i]).view())
                .collect();
            let masks: Vec<Option<Array1<f64>>> = idx
                .iter()
                .map(|_| sample_dropout_mask(preset.dropout_rate, opts.h_mlp, &mut rng))
                .collect();
            let batch_stats = params.norm.is_some() && idx.len() > 1;
            let trace = forward_batch(&views, &params, &masks, batch_stats)?;
            let b = idx.len() as f64;
            let mut upstream = Vec::with_capacity(idx.len());
            for (head, &i) in trace.heads.iter().zip(idx) {
                let lg = objective.eval(&head.prediction, train_y[i])?;
                if !lg.loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {epoch}: training loss {}",
                        lg.loss
                    )));
                }
                epoch_loss += lg.loss;
                upstream.push(lg.grad / b);
            }
            let grads = backward_batch(&views, &trace, &params, &upstream)?;
            lr = one_cycle_lr(step, schedule_span, preset.lr, opts.schedule);
            optimizer_step(
                &mut params,
                &grads,
                &mut state,
                optimizer,
                lr,
                preset.weight_decay,
            )?;
            if batch_stats {
                update_running_stats(&mut params, &trace);
            }
            log.lr_trace.push(lr);
            step += 1;
        }
        let train_loss = epoch_loss / train_bags.len() as f64;
        let val_loss = if val_bags.is_empty() {
            mean_loss(&params, &train_bags, &train_y, &objective)?
        } else {
            mean_loss(&params, &val_bags, &val_y, &objective)?
        };
        if !val_loss.is_finite() || !params.is_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: validation loss {val_loss}"
            )));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= preset.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    log.best_epoch = best_epoch;
    Ok(TrainOutcome {
        params: best_params,
        log,
    })
}

/// Continuous bag score: the regression output, or the positive-class
/// probability of a classification head.
pub fn bag_score(params: &ModelParams, features: ArrayView2<f64>) -> Result<f64> {
    let trace = forward_features(features, params, None)?;
    let p = &trace.heads[0].prediction;
    Ok(match params.config.head {
        HeadKind::Regression => p[0],
        HeadKind::Classification => 1.0 / (1.0 + (p[0] - p[1]).exp()),
    })
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
    for e in &log.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
            e.lr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
