//! End-to-end training: hybrid loss (cross-entropy + soft Dice + load
//! balance), decoupled-weight-decay optimizer with first/second moment
//! estimates, the two-stage discriminative learning-rate schedule, and
//! per-epoch history with routing telemetry.
//!
//! Batch gradients run in two passes. Pass one forwards every sample on
//! its own tape (parallel, index-ordered); the hard top-K counts from all
//! samples then fix the batch-level assignment fractions `f`. Pass two
//! extends each tape with the loss (balance term differentiable through
//! the routing probabilities only), runs backward, and merges parameter
//! gradients in sample-index order, so results are identical at any
//! worker count.

use std::path::Path;

use crate::data::{Dataset, Sample, Split};
use crate::error::{Result, SageError};
use crate::model::{checkpoint, metrics, ForwardPass, Model, NoiseCtx, Prediction};
use crate::par;
use crate::params::{Gradients, ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::routing::Mode;
use crate::telemetry::TelemetryLog;
use crate::tensor::{Tape, Var};

const DICE_EPS: f64 = 1e-6;
const SHUFFLE_TAG: u64 = 0x7368_7566;

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub lb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, dice: 1.5, lb: 1.0 }
    }
}

/// Training schedule. Stage 1 uses a uniform learning rate; stage 2
/// applies discriminative fine-tuning with shared experts stepped at five
/// times the base rate.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 30,
            stage2_epochs: 0,
            batch_size: 8,
            lr: 1e-5,
            weight_decay: 0.0,
            weights: LossWeights::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Per-group learning rate for a stage.
pub fn stage_lr(stage: Stage, base: f64, group: ParamGroup) -> f64 {
    match (stage, group) {
        (Stage::Two, ParamGroup::SharedExperts) => 5.0 * base,
        _ => base,
    }
}

// ── Losses (graph level) ───────────────────────────────────────────────

/// Mean per-pixel negative log-softmax of the target class.
pub fn ce_loss(tape: &mut Tape, logits: Var, target: &[u8]) -> Result<Var> {
    let [_, h, w] = tape.shape(logits)[..] else {
        return Err(SageError::shape("ce_loss expects [classes,h,w]".to_string()));
    };
    if target.len() != h * w {
        return Err(SageError::shape("ce_loss: target size mismatch".to_string()));
    }
    let rows = tape.patchify(logits, 1)?;
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    tape.cross_entropy_rows(rows, &targets)
}

/// Soft Dice loss averaged over foreground classes:
/// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &[u8]) -> Result<Var> {
    let [classes, h, w] = tape.shape(logits)[..] else {
        return Err(SageError::shape("dice_loss expects [classes,h,w]".to_string()));
    };
    if target.len() != h * w {
        return Err(SageError::shape("dice_loss: target size mismatch".to_string()));
    }
    let rows = tape.patchify(logits, 1)?;
    let probs = tape.softmax_rows(rows)?;
    let n = h * w;
    let mut acc: Option<Var> = None;
    for class in 1..classes {
        // Column mask picking this class's probability at every pixel,
        // and the same mask restricted to ground-truth pixels.
        let mut col = vec![0.0; n * classes];
        let mut col_gt = vec![0.0; n * classes];
        let mut gt_count = 0.0;
        for p in 0..n {
            col[p * classes + class] = 1.0;
            if target[p] as usize == class {
                col_gt[p * classes + class] = 1.0;
                gt_count += 1.0;
            }
        }
        let col = tape.constant(&[n, classes], col);
        let col_gt = tape.constant(&[n, classes], col_gt);
        let inter = tape.mul(probs, col_gt)?;
        let inter = tape.sum(inter);
        let pred_sum = tape.mul(probs, col)?;
        let pred_sum = tape.sum(pred_sum);

        let num = tape.mul_scalar(inter, 2.0);
        let num = tape.add_scalar(num, DICE_EPS);
        let den = tape.add_scalar(pred_sum, gt_count + DICE_EPS);
        let dice = tape.div_scalar_t(num, den)?;
        let neg = tape.neg(dice);
        let loss_c = tape.add_scalar(neg, 1.0);
        acc = Some(match acc {
            None => loss_c,
            Some(a) => tape.add(a, loss_c)?,
        });
    }
    let total = acc.ok_or_else(|| SageError::contract("dice_loss: no foreground classes"))?;
    Ok(tape.mul_scalar(total, 1.0 / (classes - 1) as f64))
}

/// Hard assignment fractions per layer from a batch of decisions,
/// normalized by K so each vector sums to 1.
pub fn batch_assignment_fractions(passes: &[&ForwardPass], m: usize, k: usize) -> Vec<Vec<f64>> {
    let layers = passes.first().map(|p| p.decisions.len()).unwrap_or(0);
    let mut f = vec![vec![0.0; m]; layers];
    for pass in passes {
        for (l, d) in pass.decisions.iter().enumerate() {
            for &j in &d.topk_indices {
                f[l][j] += 1.0;
            }
        }
    }
    let denom = (passes.len() * k) as f64;
    for row in f.iter_mut() {
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    f
}

/// Loss components for one sample, as graph nodes.
pub struct SampleLoss {
    pub total: Var,
    pub ce: f64,
    pub dice: f64,
    pub balance: f64,
}

/// Assemble the total loss on a sample's tape:
/// `lambda_ce CE + lambda_dice Dice + lambda_lb (1/T) sum_l M <f_l, p_l>`.
/// `f` is the batch-level hard assignment (constant); gradients reach the
/// balance term through the routing probabilities only.
pub fn total_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    target: &[u8],
    weights: &LossWeights,
    f: &[Vec<f64>],
) -> Result<SampleLoss> {
    if pass.decisions.is_empty() {
        return Err(SageError::contract("total_loss: no routing decisions"));
    }
    let ce = ce_loss(tape, pass.logits, target)?;
    let dice = dice_loss(tape, pass.logits, target)?;
    let ce_val = tape.scalar_value(ce);
    let dice_val = tape.scalar_value(dice);

    let layers = pass.probs.len();
    let m = f[0].len() as f64;
    let mut balance: Option<Var> = None;
    for (l, &probs) in pass.probs.iter().enumerate() {
        let f_const = tape.constant(&[f[l].len()], f[l].clone());
        let prod = tape.mul(probs, f_const)?;
        let dot = tape.sum(prod);
        let layer_loss = tape.mul_scalar(dot, m);
        balance = Some(match balance {
            None => layer_loss,
            Some(b) => tape.add(b, layer_loss)?,
        });
    }
    let balance = balance.expect("at least one layer");
    let balance = tape.mul_scalar(balance, 1.0 / layers as f64);
    let balance_val = tape.scalar_value(balance);

    let ce_term = tape.mul_scalar(ce, weights.ce);
    let dice_term = tape.mul_scalar(dice, weights.dice);
    let lb_term = tape.mul_scalar(balance, weights.lb);
    let task = tape.add(ce_term, dice_term)?;
    let total = tape.add(task, lb_term)?;
    Ok(SampleLoss { total, ce: ce_val, dice: dice_val, balance: balance_val })
}

// ── Optimizer ──────────────────────────────────────────────────────────

/// Gradient descent with decoupled weight decay and (0.9, 0.999) moment
/// estimates, bias-corrected.
pub struct Optimizer {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Optimizer {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.tensor.values.len()).collect();
        Optimizer {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step<F>(&mut self, store: &mut ParamStore, grads: &Gradients, lr_for: F)
    where
        F: Fn(ParamGroup) -> f64,
    {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let lr = lr_for(store.get(id).group);
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let values = &mut store.get_mut(id).tensor.values;
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * values[i]);
            }
        }
    }
}

// ── Batch gradients ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub balance: f64,
}

pub struct BatchResult {
    pub grads: Gradients,
    pub losses: LossParts,
    pub passes: Vec<ForwardPassRecord>,
}

/// Value-level leftovers of a sample forward (for telemetry/metrics).
pub struct ForwardPassRecord {
    pub decisions: Vec<crate::routing::RoutingDecision>,
    pub mask: Vec<u8>,
}

fn batch_core<M>(
    model: &Model,
    batch: &[(usize, &Sample)],
    plan: &TrainPlan,
    step: u64,
    map: M,
) -> Result<BatchResult>
where
    M: Fn(
        &[(usize, &Sample)],
        &(dyn Fn(usize, &(usize, &Sample)) -> Result<(Tape, ForwardPass)> + Sync),
    ) -> Vec<Result<(Tape, ForwardPass)>>,
{
    if batch.is_empty() {
        return Err(SageError::contract("empty batch"));
    }
    // Pass 1: independent forwards, collected in batch order.
    let forwards = map(batch, &|_, (sample_idx, sample)| {
        let mut tape = Tape::new();
        let noise = NoiseCtx { seed: plan.seed, step, sample: *sample_idx as u64 };
        let pass = model.forward(&mut tape, &sample.image, Mode::Train, Some(&noise), None)?;
        Ok((tape, pass))
    });
    let mut forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;

    // Batch-level hard assignment fractions.
    let pass_refs: Vec<&ForwardPass> = forwards.iter().map(|(_, p)| p).collect();
    let f = batch_assignment_fractions(&pass_refs, model.pool.size(), model.config.top_k);

    // Pass 2: losses and backward per sample, merged in index order.
    let weights = plan.weights;
    let results: Vec<Result<(Gradients, LossParts, ForwardPassRecord)>> = forwards
        .iter_mut()
        .enumerate()
        .map(|(i, (tape, pass))| {
            let (_, sample) = batch[i];
            let loss = total_loss(tape, pass, &sample.mask, &weights, &f)?;
            let total_val = tape.scalar_value(loss.total);
            if !total_val.is_finite() {
                return Err(SageError::numeric("non-finite training loss"));
            }
            tape.backward(loss.total)?;
            let mut grads = Gradients::zeros_like(&model.store);
            tape.accumulate_param_grads(&mut grads);
            let parts = LossParts {
                total: total_val,
                ce: loss.ce,
                dice: loss.dice,
                balance: loss.balance,
            };
            let logits =
                crate::tensor::Tensor::new(tape.shape(pass.logits).to_vec(), tape.value(pass.logits).to_vec())?;
            let record = ForwardPassRecord {
                decisions: pass.decisions.clone(),
                mask: metrics::argmax_mask(&logits),
            };
            Ok((grads, parts, record))
        })
        .collect();

    let mut merged = Gradients::zeros_like(&model.store);
    let mut losses = LossParts::default();
    let mut passes = Vec::with_capacity(batch.len());
    let b = batch.len() as f64;
    for r in results {
        let (g, parts, record) = r?;
        merged.merge(&g);
        losses.total += parts.total / b;
        losses.ce += parts.ce / b;
        losses.dice += parts.dice / b;
        losses.balance += parts.balance / b;
        passes.push(record);
    }
    merged.scale(1.0 / b);
    Ok(BatchResult { grads: merged, losses, passes })
}

/// Feature-dispatched batch gradients (rayon when `parallel` is on).
pub fn batch_gradients(
    model: &Model,
    batch: &[(usize, &Sample)],
    plan: &TrainPlan,
    step: u64,
) -> Result<BatchResult> {
    batch_core(model, batch, plan, step, |items, f| par::map_indexed(items, f))
}

/// Sequential twin for the bench and the worker-count-independence test.
pub fn batch_gradients_seq(
    model: &Model,
    batch: &[(usize, &Sample)],
    plan: &TrainPlan,
    step: u64,
) -> Result<BatchResult> {
    batch_core(model, batch, plan, step, |items, f| par::map_indexed_seq(items, f))
}

// ── Evaluation ─────────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub metrics: metrics::Metrics,
    pub predictions: Vec<Prediction>,
}

fn eval_core<M>(model: &Model, samples: &[&Sample], map: M) -> Result<EvalOutcome>
where
    M: Fn(
        &[&Sample],
        &(dyn Fn(usize, &&Sample) -> Result<(Prediction, metrics::Metrics)> + Sync),
    ) -> Vec<Result<(Prediction, metrics::Metrics)>>,
{
    if samples.is_empty() {
        return Err(SageError::contract("evaluate: empty sample list"));
    }
    let results = map(samples, &|_, sample| {
        let pred = model.predict(&sample.image)?;
        let m = metrics::metrics(&pred.mask(), &sample.mask)?;
        Ok((pred, m))
    });
    let mut per_image = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for r in results {
        let (pred, m) = r?;
        per_image.push(m);
        predictions.push(pred);
    }
    Ok(EvalOutcome { metrics: metrics::mean_metrics(&per_image), predictions })
}

/// Per-image metrics averaged over the set; parallel per image.
pub fn evaluate(model: &Model, samples: &[&Sample]) -> Result<EvalOutcome> {
    eval_core(model, samples, |items, f| par::map_indexed(items, f))
}

pub fn evaluate_seq(model: &Model, samples: &[&Sample]) -> Result<EvalOutcome> {
    eval_core(model, samples, |items, f| par::map_indexed_seq(items, f))
}

// ── History ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub losses: LossParts,
    pub metrics: metrics::Metrics,
    pub mean_gs: Vec<f64>,
    pub activation_counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub layer_count: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss_total,loss_ce,loss_dice,loss_balance,acc,iou,dsc");
        for l in 0..self.layer_count {
            out.push_str(&format!(",mean_gs_layer_{l}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.split.label(),
                r.losses.total,
                r.losses.ce,
                r.losses.dice,
                r.losses.balance,
                r.metrics.acc,
                r.metrics.iou,
                r.metrics.dsc
            ));
            for g in &r.mean_gs {
                out.push_str(&format!(",{g}"));
            }
            out.push('\n');
        }
        out
    }
}

// ── Training loop ──────────────────────────────────────────────────────

pub struct TrainOutput {
    pub model: Model,
    pub history: History,
    pub telemetry: TelemetryLog,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// Set when training aborted on divergence.
    pub diverged: bool,
}

/// Run the plan: stage 1 for `epochs`, then stage 2 for `stage2_epochs`
/// with discriminative rates. Keeps the checkpoint with the best
/// validation Dice; aborts (keeping the last good state) if the loss
/// goes non-finite.
pub fn train(model: Model, data: &Dataset, plan: &TrainPlan) -> Result<TrainOutput> {
    train_with_checkpoint(model, data, plan, None)
}

pub fn train_with_checkpoint(
    mut model: Model,
    data: &Dataset,
    plan: &TrainPlan,
    best_path: Option<&Path>,
) -> Result<TrainOutput> {
    let train_idx = data.indices(Split::Train);
    let val_idx = data.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(SageError::contract("training needs non-empty train and val splits"));
    }
    if plan.batch_size == 0 {
        return Err(SageError::config("batch_size must be positive"));
    }

    let mut optimizer = Optimizer::new(&model.store, plan.weight_decay);
    let mut history = History { records: Vec::new(), layer_count: model.layer_count() };
    let mut telemetry = TelemetryLog::new(model.layer_kinds(), model.pool.size(), model.config.top_k);
    let mut best_val_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_bytes: Vec<u8> = checkpoint::to_bytes(&model);
    let mut step: u64 = 0;
    let total_epochs = plan.epochs + plan.stage2_epochs;

    for epoch in 0..total_epochs {
        let stage = if epoch < plan.epochs { Stage::One } else { Stage::Two };
        let mut order = train_idx.clone();
        let mut rng = Rng::derive(plan.seed, &[SHUFFLE_TAG, epoch as u64]);
        rng.shuffle(&mut order);

        let mut epoch_losses = LossParts::default();
        let mut train_metrics = Vec::new();
        let mut batches = 0usize;
        let mut gs_accum = vec![0.0; model.layer_count()];
        let mut gs_count = 0usize;
        let mut activation = vec![vec![0u64; model.pool.size()]; model.layer_count()];

        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<(usize, &Sample)> =
                chunk.iter().map(|&i| (i, &data.samples[i])).collect();
            let result = batch_gradients(&model, &batch, plan, step);
            let result = match result {
                Ok(r) => r,
                Err(SageError::Numeric(_)) => {
                    // Divergence: return the last good checkpoint.
                    let model = checkpoint::from_bytes(&best_bytes)?;
                    return Ok(TrainOutput {
                        model,
                        history,
                        telemetry,
                        best_epoch,
                        best_val_dsc: best_val_dsc.max(0.0),
                        diverged: true,
                    });
                }
                Err(e) => return Err(e),
            };
            if !result.losses.total.is_finite() {
                let model = checkpoint::from_bytes(&best_bytes)?;
                return Ok(TrainOutput {
                    model,
                    history,
                    telemetry,
                    best_epoch,
                    best_val_dsc: best_val_dsc.max(0.0),
                    diverged: true,
                });
            }
            optimizer.step(&mut model.store, &result.grads, |group| {
                stage_lr(stage, plan.lr, group)
            });
            step += 1;
            batches += 1;
            epoch_losses.total += result.losses.total;
            epoch_losses.ce += result.losses.ce;
            epoch_losses.dice += result.losses.dice;
            epoch_losses.balance += result.losses.balance;
            for (record, &(idx, _)) in result.passes.iter().zip(&batch) {
                train_metrics.push(metrics::metrics(&record.mask, &data.samples[idx].mask)?);
                for (l, d) in record.decisions.iter().enumerate() {
                    gs_accum[l] += d.gs;
                    for &j in &d.topk_indices {
                        activation[l][j] += 1;
                    }
                }
                gs_count += 1;
            }
        }
        let scale = 1.0 / batches.max(1) as f64;
        epoch_losses.total *= scale;
        epoch_losses.ce *= scale;
        epoch_losses.dice *= scale;
        epoch_losses.balance *= scale;
        let train_gs: Vec<f64> =
            gs_accum.iter().map(|s| s / gs_count.max(1) as f64).collect();

        history.records.push(EpochRecord {
            epoch,
            split: Split::Train,
            losses: epoch_losses,
            metrics: metrics::mean_metrics(&train_metrics),
            mean_gs: train_gs,
            activation_counts: activation,
        });

        // Validation pass: eval-mode predictions, telemetry recorded.
        let val_samples: Vec<&Sample> = val_idx.iter().map(|&i| &data.samples[i]).collect();
        let val = evaluate(&model, &val_samples)?;
        let mut val_losses = LossParts::default();
        {
            // Loss on the validation split, eval-mode graph (no noise).
            let vb: Vec<(usize, &Sample)> = val_idx
                .iter()
                .map(|&i| (i, &data.samples[i]))
                .collect();
            let forwards: Vec<Result<(Tape, ForwardPass)>> = par::map_indexed(&vb, |_, (_, s)| {
                let mut tape = Tape::new();
                let pass = model.forward(&mut tape, &s.image, Mode::Eval, None, None)?;
                Ok((tape, pass))
            });
            let mut forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ForwardPass> = forwards.iter().map(|(_, p)| p).collect();
            let f = batch_assignment_fractions(&refs, model.pool.size(), model.config.top_k);
            let n = forwards.len() as f64;
            for (i, (tape, pass)) in forwards.iter_mut().enumerate() {
                let loss = total_loss(tape, pass, &vb[i].1.mask, &plan.weights, &f)?;
                val_losses.total += tape.scalar_value(loss.total) / n;
                val_losses.ce += loss.ce / n;
                val_losses.dice += loss.dice / n;
                val_losses.balance += loss.balance / n;
            }
        }
        let mut val_gs = vec![0.0; model.layer_count()];
        let mut val_activation = vec![vec![0u64; model.pool.size()]; model.layer_count()];
        for pred in &val.predictions {
            for (l, d) in pred.decisions.iter().enumerate() {
                telemetry.record(l, d)?;
                val_gs[l] += d.gs;
                for &j in &d.topk_indices {
                    val_activation[l][j] += 1;
                }
            }
        }
        telemetry.end_epoch();
        let val_gs: Vec<f64> =
            val_gs.iter().map(|s| s / val.predictions.len() as f64).collect();

        history.records.push(EpochRecord {
            epoch,
            split: Split::Val,
            losses: val_losses,
            metrics: val.metrics,
            mean_gs: val_gs,
            activation_counts: val_activation,
        });

        if val.metrics.dsc > best_val_dsc {
            best_val_dsc = val.metrics.dsc;
            best_epoch = epoch;
            best_bytes = checkpoint::to_bytes(&model);
            if let Some(path) = best_path {
                std::fs::write(path, &best_bytes)?;
            }
        }
    }

    let model = checkpoint::from_bytes(&best_bytes)?;
    Ok(TrainOutput {
        model,
        history,
        telemetry,
        best_epoch,
        best_val_dsc,
        diverged: false,
    })
}
