//! Training loop binding cells, BPTT, and datasets: batched gradient
//! accumulation with a deterministic fixed-order reduction, cosine-scheduled
//! Adam/Adamax, burn-in masked losses, validation-based model selection, and
//! divergence handling.

pub mod checkpoint;
pub mod loss;
pub mod metrics;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, SectionMeta};
pub use optim::{cosine_lr, Optimizer, OptimizerKind};

use crate::cells::{Cell, Mode};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tasks::{Dataset, Targets, TaskKind};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Initial window excluded from loss and gradients (teacher fitting).
    pub burn_in_ms: f64,
    pub dropout_p: f64,
    /// LSTM only: variational dropout on the recurrent path.
    pub recurrent_dropout_p: f64,
    /// SNN only: L1 penalty on mean spike activity.
    pub spike_l1_coeff: f64,
    /// Scale applied to the voltage target before the squared error.
    pub voltage_scale: f64,
    /// Trailing fraction of the data held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Batch-parallel gradient workers; 1 is the bit-reproducible reference
    /// (the fixed-order reduction keeps other counts identical in practice).
    pub threads: usize,
    /// FPR operating points reported for spike tasks.
    pub fpr_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr0: 5e-4,
            batch_size: 8,
            epochs: 10,
            burn_in_ms: 150.0,
            dropout_p: 0.0,
            recurrent_dropout_p: 0.0,
            spike_l1_coeff: 0.0,
            voltage_scale: 1.0,
            val_fraction: 0.1,
            seed: 1,
            threads: 1,
            fpr_grid: vec![0.01, 0.05, 0.1, 0.25],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Invalid("train: lr0 must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("train: batch_size must be >= 1".into()));
        }
        for p in [self.dropout_p, self.recurrent_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Invalid("train: dropout probabilities must lie in [0, 1)".into()));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Invalid("train: val_fraction must lie in [0, 1)".into()));
        }
        let duration_ms = data.steps as f64 * data.dt_ms;
        if data.kind == TaskKind::TeacherFit && self.burn_in_ms >= duration_ms {
            return Err(Error::Invalid(format!(
                "train: burn-in {} ms must be shorter than the {} ms sequences",
                self.burn_in_ms, duration_ms
            )));
        }
        Ok(())
    }

    pub fn burn_in_steps(&self, data: &Dataset) -> usize {
        match data.kind {
            TaskKind::TeacherFit => (self.burn_in_ms / data.dt_ms).round() as usize,
            TaskKind::Classify => 0,
        }
    }
}

/// Metrics for one data split.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SplitEval {
    pub loss: f64,
    pub rmse: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub rmse: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub rmse: Option<f64>,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub curves: Vec<EpochRow>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (initial params if no epoch
    /// improved or epochs = 0).
    pub best_params: Vec<f64>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metric_name: &'static str,
    pub divergent: bool,
    pub report: MetricsReport,
}

fn target_slices(data: &Dataset, i: usize) -> (&[f64], &[f64]) {
    match &data.targets {
        Targets::PerStep { voltage, spikes } => {
            let t = data.steps;
            (&voltage[i * t..(i + 1) * t], &spikes[i * t..(i + 1) * t])
        }
        _ => unreachable!("target_slices on classification data"),
    }
}

fn seq_loss_grads<C: Cell>(
    cell: &C,
    data: &Dataset,
    i: usize,
    burn_in_steps: usize,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(f64, Vec<f64>)> {
    let dts = vec![data.dt_ms; data.steps];
    let (ys, tape) = cell.rollout(data.sequence(i), &dts, mode).map_err(|e| e.with_seq(i))?;
    let (mut loss, gy) = match &data.targets {
        Targets::PerStep { .. } => {
            let (v, s) = target_slices(data, i);
            loss::neuronio_loss(&ys, v, s, burn_in_steps, cfg.voltage_scale)?
        }
        Targets::Class { labels, n_classes } => {
            loss::last_step_ce(&ys, *n_classes, labels[i] as usize)?
        }
    };
    loss += cell.reg_loss(&tape);
    let g = cell.backward(&tape, &gy)?;
    Ok((loss, g))
}

/// Mean loss and gradient over a batch. Per-sequence results are reduced in
/// fixed index order so the outcome is identical for any worker count.
fn batch_loss_grads<C: Cell + Sync>(
    cell: &C,
    data: &Dataset,
    idxs: &[usize],
    burn_in_steps: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<f64>)> {
    let master = Rng::new(cfg.seed);
    let run_one = |i: usize| -> Result<(f64, Vec<f64>)> {
        let mut rng = master.substream(&format!("drop.{epoch}.{i}"));
        seq_loss_grads(cell, data, i, burn_in_steps, cfg, Mode::Train { rng: &mut rng })
    };

    let results: Vec<Result<(f64, Vec<f64>)>> = if cfg.threads <= 1 || idxs.len() == 1 {
        idxs.iter().map(|&i| run_one(i)).collect()
    } else {
        let chunk = idxs.len().div_ceil(cfg.threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = idxs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&i| run_one(i)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };

    let n = idxs.len() as f64;
    let mut total_loss = 0.0;
    let mut total_grad: Option<Vec<f64>> = None;
    for r in results {
        let (l, g) = r?;
        total_loss += l;
        match &mut total_grad {
            None => total_grad = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
        }
    }
    let mut grad = total_grad.unwrap_or_default();
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((total_loss / n, grad))
}

/// Eval-mode metrics over the given sequence indices.
pub fn evaluate<C: Cell>(
    cell: &C,
    data: &Dataset,
    idxs: &[usize],
    cfg: &TrainConfig,
) -> Result<SplitEval> {
    let burn = cfg.burn_in_steps(data);
    let dts = vec![data.dt_ms; data.steps];
    match &data.targets {
        Targets::PerStep { .. } => {
            let mut loss_sum = 0.0;
            let mut v_pred = Vec::new();
            let mut v_tgt = Vec::new();
            let mut logits = Vec::new();
            let mut spike_labels = Vec::new();
            for &i in idxs {
                let (ys, _) =
                    cell.rollout(data.sequence(i), &dts, Mode::Eval).map_err(|e| e.with_seq(i))?;
                let (v, s) = target_slices(data, i);
                let (l, _) = loss::neuronio_loss(&ys, v, s, burn, cfg.voltage_scale)?;
                loss_sum += l;
                for t in burn..data.steps {
                    v_pred.push(ys[2 * t]);
                    v_tgt.push(cfg.voltage_scale * v[t]);
                    logits.push(ys[2 * t + 1]);
                    spike_labels.push(s[t] as u8);
                }
            }
            let auc = metrics::auc(&logits, &spike_labels).ok();
            let tpr = cfg
                .fpr_grid
                .iter()
                .filter_map(|&f| metrics::tpr_at_fpr(&logits, &spike_labels, f).ok().map(|t| (f, t)))
                .collect();
            Ok(SplitEval {
                loss: loss_sum / idxs.len().max(1) as f64,
                rmse: Some(metrics::rmse(&v_pred, &v_tgt)),
                auc,
                accuracy: None,
                tpr_at_fpr: tpr,
            })
        }
        Targets::Class { labels, n_classes } => {
            let mut loss_sum = 0.0;
            let mut pred = Vec::with_capacity(idxs.len());
            let mut lab = Vec::with_capacity(idxs.len());
            for &i in idxs {
                let (ys, _) =
                    cell.rollout(data.sequence(i), &dts, Mode::Eval).map_err(|e| e.with_seq(i))?;
                let (l, _) = loss::last_step_ce(&ys, *n_classes, labels[i] as usize)?;
                loss_sum += l;
                let last = &ys[(data.steps - 1) * n_classes..];
                let argmax = last
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap();
                pred.push(argmax);
                lab.push(labels[i]);
            }
            Ok(SplitEval {
                loss: loss_sum / idxs.len().max(1) as f64,
                rmse: None,
                auc: None,
                accuracy: Some(metrics::accuracy(&pred, &lab)),
                tpr_at_fpr: Vec::new(),
            })
        }
    }
}

/// Deterministic trailing-fraction split into (train, validation) indices.
pub fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if n < 2 || val_fraction == 0.0 {
        return ((0..n).collect(), Vec::new());
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

/// Full training loop with validation-based model selection.
pub fn train<C: Cell + Sync>(cell: &mut C, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(data)?;
    let n = data.n_sequences();
    if n == 0 {
        return Err(Error::Invalid("train: empty dataset".into()));
    }
    if cell.input_dim() != data.channels {
        return Err(Error::Shape(format!(
            "train: model input dim {} != dataset channels {}",
            cell.input_dim(),
            data.channels
        )));
    }
    if let Targets::Class { n_classes, .. } = &data.targets {
        if cell.output_dim() != *n_classes {
            return Err(Error::Shape(format!(
                "train: model output dim {} != {} classes",
                cell.output_dim(),
                n_classes
            )));
        }
    } else if cell.output_dim() != 2 {
        return Err(Error::Shape("train: teacher fitting needs output dim 2".into()));
    }

    let (train_idx, val_idx) = split_indices(n, cfg.val_fraction);
    let eval_idx: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let burn = cfg.burn_in_steps(data);
    let (metric_name, better): (&'static str, fn(f64, f64) -> bool) = match data.kind {
        TaskKind::TeacherFit => ("rmse", |new, old| new < old),
        TaskKind::Classify => ("accuracy", |new, old| new > old),
    };
    let metric_of = |e: &SplitEval| match data.kind {
        TaskKind::TeacherFit => e.rmse.unwrap_or(f64::INFINITY),
        TaskKind::Classify => e.accuracy.unwrap_or(0.0),
    };

    let mut curves = Vec::new();
    let mut push_rows = |curves: &mut Vec<EpochRow>, epoch: usize, lr: f64, tr: &SplitEval, va: &SplitEval| {
        for (split, e) in [("train", tr), ("val", va)] {
            curves.push(EpochRow {
                epoch,
                split: split.to_string(),
                loss: e.loss,
                rmse: e.rmse,
                auc: e.auc,
                accuracy: e.accuracy,
                lr,
            });
        }
    };

    let init_train = evaluate(cell, data, &train_idx, cfg)?;
    let init_val = evaluate(cell, data, eval_idx, cfg)?;
    push_rows(&mut curves, 0, cfg.lr0, &init_train, &init_val);

    let mut best_params = cell.trainable();
    let mut best_metric = metric_of(&init_val);
    let mut best_epoch = 0usize;
    let mut best_eval = init_val;

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut optimizer = Optimizer::new(cfg.optimizer, cell.count_params());
    let master = Rng::new(cfg.seed);
    let mut divergent = false;
    let mut global_step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        master.substream(&format!("order.{epoch}")).shuffle(&mut order);
        let mut last_lr = cosine_lr(cfg.lr0, global_step, total_steps);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg.lr0, global_step, total_steps);
            last_lr = lr;
            let step_result = batch_loss_grads(cell, data, batch, burn, cfg, epoch);
            let (loss, grads) = match step_result {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    divergent = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                divergent = true;
                break 'epochs;
            }
            let mut params = cell.trainable();
            optimizer.step(&mut params, &grads, lr)?;
            cell.set_trainable(&params)?;
            global_step += 1;
        }

        let tr = evaluate(cell, data, &train_idx, cfg)?;
        let va = evaluate(cell, data, eval_idx, cfg)?;
        push_rows(&mut curves, epoch, last_lr, &tr, &va);
        let m = metric_of(&va);
        if better(m, best_metric) {
            best_metric = m;
            best_epoch = epoch;
            best_params = cell.trainable();
            best_eval = va;
        }
    }

    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_metric,
        metric_name,
        divergent,
        report: MetricsReport {
            rmse: best_eval.rmse,
            auc: best_eval.auc,
            accuracy: best_eval.accuracy,
            tpr_at_fpr: best_eval.tpr_at_fpr.clone(),
            curves,
        },
    })
}
