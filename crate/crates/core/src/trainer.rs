//! Epoch-driven training: the penalty-decomposition algorithm (alternating
//! W/V updates under an escalating coupling weight) and plain subgradient
//! baselines, sharing one deterministic minibatch engine.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{gather, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, GroupingMode, NetworkParams};
use crate::optimizer::{
    baseline_step, f_beta_given_loss, inner_step_v, inner_step_w, LayerGrads, OptState,
    OptimizerSpec, PenaltyState, StepCtx,
};
use crate::regularizers::{self, RegularizerKind, RegularizerSpec};
use crate::tensor::Tensor;

/// Everything a training run needs beyond the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub regularizer: RegularizerSpec,
    pub optimizer: OptimizerSpec,
    pub grouping: GroupingMode,
    /// Initial coupling weight β₀ (penalty-decomposition kinds only).
    pub beta0: f64,
    /// Coupling escalation factor σ > 1.
    pub sigma: f64,
    /// Epochs between β escalations.
    pub beta_interval: u64,
    pub weight_threshold: f64,
    pub neuron_threshold: f64,
    /// Training samples (taken from the front of the set) used for the
    /// logged objective value.
    pub probe_size: usize,
    pub eval_batch_size: usize,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epoch count must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.probe_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(
                "probe size and eval batch size must be >= 1".into(),
            ));
        }
        RegularizerSpec::new(self.regularizer.kind, self.regularizer.lambda)?;
        self.optimizer.validate()?;
        if !(self.weight_threshold >= 0.0) || !(self.neuron_threshold >= 0.0) {
            return Err(Error::Config(
                "pruning thresholds must be nonnegative".into(),
            ));
        }
        if self.uses_penalty_decomposition() {
            if !(self.sigma > 1.0) {
                return Err(Error::Config(format!(
                    "coupling escalation factor must exceed 1, got {}",
                    self.sigma
                )));
            }
            if self.beta_interval == 0 {
                return Err(Error::Config(
                    "coupling escalation interval must be >= 1".into(),
                ));
            }
            let disabled = self.regularizer.lambda == 0.0 && self.beta0 == 0.0;
            if !disabled && !(self.beta0 > 0.0) {
                return Err(Error::Config(format!(
                    "initial coupling weight must be positive, got {}",
                    self.beta0
                )));
            }
        }
        Ok(())
    }

    pub fn uses_penalty_decomposition(&self) -> bool {
        matches!(
            self.regularizer.kind,
            RegularizerKind::L0 | RegularizerKind::SparseGroupL0asso
        )
    }
}

/// Per-epoch log row.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub probe_objective: f64,
    pub test_error_pct: f64,
    pub weight_sparsity_pct: f64,
    pub neuron_sparsity_pct: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub wall_time_s: f64,
}

/// A finished run: trained weights, the auxiliary V tensors when the
/// penalty-decomposition path ran, and all per-epoch records.
#[derive(Debug)]
pub struct TrainOutcome {
    pub net: NetworkParams,
    pub aux: Option<Vec<Tensor>>,
    pub records: Vec<TrainRecord>,
}

/// An aborted run: the error plus the last epoch-boundary snapshot (absent
/// when the first epoch never completed).
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<(NetworkParams, u64)>,
    pub records: Vec<TrainRecord>,
}

enum Mode {
    Penalty { state: PenaltyState, gl_weight: f64 },
    Baseline,
}

/// Train with whichever algorithm the regularizer kind requires.
pub fn run_training(
    net: NetworkParams,
    train: &Dataset,
    test: &Dataset,
    settings: &TrainSettings,
    on_epoch: impl FnMut(&TrainRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    if settings.uses_penalty_decomposition() {
        run_algorithm1(net, train, test, settings, on_epoch)
    } else {
        run_baseline(net, train, test, settings, on_epoch)
    }
}

/// Penalty decomposition: every minibatch takes one W gradient step on the
/// relaxed objective followed by the exact V prox step; β escalates by σ on
/// its epoch interval.
pub fn run_algorithm1(
    net: NetworkParams,
    train: &Dataset,
    test: &Dataset,
    settings: &TrainSettings,
    on_epoch: impl FnMut(&TrainRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |error| TrainFailure {
        error,
        last_good: None,
        records: Vec::new(),
    };
    if let Err(e) = settings.validate() {
        return Err(fail(e));
    }
    if !settings.uses_penalty_decomposition() {
        return Err(fail(Error::Config(format!(
            "{:?} is a subgradient baseline; use the baseline runner",
            settings.regularizer.kind
        ))));
    }
    let gl_weight = match settings.regularizer.kind {
        RegularizerKind::SparseGroupL0asso => 1.0,
        _ => 0.0,
    };
    let state = match PenaltyState::new(
        &net,
        settings.regularizer.lambda,
        settings.beta0,
        settings.sigma,
    ) {
        Ok(s) => s,
        Err(e) => return Err(fail(e)),
    };
    run_epochs(
        net,
        train,
        test,
        settings,
        Mode::Penalty { state, gl_weight },
        on_epoch,
    )
}

/// Plain subgradient training for the convex penalties (none / ℓ₁ / group
/// lasso / sparse group lasso): no auxiliary variable, no coupling.
pub fn run_baseline(
    net: NetworkParams,
    train: &Dataset,
    test: &Dataset,
    settings: &TrainSettings,
    on_epoch: impl FnMut(&TrainRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |error| TrainFailure {
        error,
        last_good: None,
        records: Vec::new(),
    };
    if let Err(e) = settings.validate() {
        return Err(fail(e));
    }
    if settings.uses_penalty_decomposition() {
        return Err(fail(Error::Config(format!(
            "{:?} requires the penalty-decomposition runner",
            settings.regularizer.kind
        ))));
    }
    run_epochs(net, train, test, settings, Mode::Baseline, on_epoch)
}

fn run_epochs(
    mut net: NetworkParams,
    train: &Dataset,
    test: &Dataset,
    settings: &TrainSettings,
    mut mode: Mode,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let partition = model::extract_groups(&net, settings.grouping);
    let mut opt_state = OptState::new(&net, settings.optimizer.method);
    let n = train.len();
    let probe_indices: Vec<usize> = (0..settings.probe_size.min(n)).collect();
    let (probe_images, probe_labels) = gather(train, &probe_indices);

    let mut records: Vec<TrainRecord> = Vec::with_capacity(settings.epochs as usize);
    let mut last_good: Option<(NetworkParams, u64)> = None;

    macro_rules! guard {
        ($records:expr, $last_good:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => {
                    return Err(TrainFailure {
                        error,
                        last_good: $last_good,
                        records: $records,
                    })
                }
            }
        };
    }

    for epoch in 1..=settings.epochs {
        let started = Instant::now();
        if let Mode::Penalty { state, .. } = &mut mode {
            if epoch > 1 && (epoch - 1) % settings.beta_interval == 0 {
                state.escalate();
            }
        }
        let lr = settings.optimizer.lr_at(epoch);
        let plan = guard!(
            records,
            last_good.clone(),
            BatchPlan::new(n, settings.batch_size, settings.seed, epoch)
        );
        let mut loss_sum = 0.0;
        for indices in plan.batches() {
            let step = opt_state.step_count() + 1;
            let ctx = StepCtx { epoch, step };
            let (images, labels) = gather(train, indices);
            let step_result = run_step(
                &mut net,
                &partition,
                &mut mode,
                settings,
                &mut opt_state,
                lr,
                ctx,
                images,
                &labels,
            );
            let batch_loss = guard!(records, last_good.clone(), step_result);
            loss_sum += batch_loss * indices.len() as f64;
        }

        let record_result = epoch_record(
            &net,
            &partition,
            &mode,
            settings,
            test,
            &probe_images,
            &probe_labels,
            epoch,
            loss_sum / n as f64,
            lr,
            started,
        );
        let record = guard!(records, last_good.clone(), record_result);
        on_epoch(&record);
        records.push(record);
        last_good = Some((net.clone(), epoch));
    }

    let aux = match mode {
        Mode::Penalty { state, .. } => Some(state.v),
        Mode::Baseline => None,
    };
    Ok(TrainOutcome { net, aux, records })
}

/// One minibatch: forward, scalar-loss check, backward, optimizer step(s).
/// Returns the batch's mean loss.
#[allow(clippy::too_many_arguments)]
fn run_step(
    net: &mut NetworkParams,
    partition: &crate::model::GroupPartition,
    mode: &mut Mode,
    settings: &TrainSettings,
    opt_state: &mut OptState,
    lr: f64,
    ctx: StepCtx,
    images: Tensor,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let (logits, nodes) = model::forward(net, &mut tape, images)?;
    let loss_node = tape.softmax_xent(logits, labels)?;
    let loss = tape.value(loss_node).item();
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch: ctx.epoch,
            step: ctx.step,
            what: "loss".into(),
        });
    }
    let mut grads = tape.backward(loss_node)?;
    let layer_grads: Vec<LayerGrads> = nodes
        .iter()
        .enumerate()
        .map(|(li, ln)| LayerGrads {
            weight: grads
                .take(ln.weight)
                .unwrap_or_else(|| Tensor::zeros(net.layers[li].weight.shape())),
            bias: ln.bias.map(|b| {
                grads
                    .take(b)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(b).shape()))
            }),
        })
        .collect();
    opt_state.begin_step();
    match mode {
        Mode::Penalty { state, gl_weight } => {
            inner_step_w(
                net,
                partition,
                &layer_grads,
                state,
                *gl_weight,
                &settings.optimizer,
                opt_state,
                lr,
                ctx,
            )?;
            inner_step_v(net, state)?;
        }
        Mode::Baseline => {
            baseline_step(
                net,
                partition,
                &layer_grads,
                settings.regularizer.kind,
                settings.regularizer.lambda,
                &settings.optimizer,
                opt_state,
                lr,
                ctx,
            )?;
        }
    }
    Ok(loss)
}

/// Epoch-boundary bookkeeping: probe objective, pruned-model evaluation,
/// sparsity metrics.
#[allow(clippy::too_many_arguments)]
fn epoch_record(
    net: &NetworkParams,
    partition: &crate::model::GroupPartition,
    mode: &Mode,
    settings: &TrainSettings,
    test: &Dataset,
    probe_images: &Tensor,
    probe_labels: &[usize],
    epoch: u64,
    train_loss: f64,
    lr: f64,
    started: Instant,
) -> Result<TrainRecord> {
    let probe_loss = model::eval_loss(net, probe_images, probe_labels, settings.eval_batch_size)?;
    let (probe_objective, beta) = match mode {
        Mode::Penalty { state, gl_weight } => (
            f_beta_given_loss(probe_loss, net, partition, state, *gl_weight),
            state.beta,
        ),
        Mode::Baseline => {
            let reg: f64 = net
                .layers
                .iter()
                .enumerate()
                .map(|(li, layer)| {
                    regularizers::layer_value(
                        settings.regularizer.kind,
                        &layer.weight,
                        &partition.layers[li].groups,
                    )
                })
                .sum();
            (probe_loss + settings.regularizer.lambda * reg, 0.0)
        }
    };
    let pruned = metrics::prune(
        net,
        partition,
        settings.weight_threshold,
        settings.neuron_threshold,
    )?;
    let test_error_pct = model::test_error_pct(
        &pruned,
        &test.images,
        &test.labels,
        settings.eval_batch_size,
    )?;
    let weight_sparsity_pct = metrics::weight_sparsity(&pruned, settings.weight_threshold)?;
    let neuron_sparsity_pct =
        metrics::neuron_sparsity(&pruned, partition, settings.neuron_threshold)?;
    Ok(TrainRecord {
        epoch,
        train_loss,
        probe_objective,
        test_error_pct,
        weight_sparsity_pct,
        neuron_sparsity_pct,
        beta,
        learning_rate: lr,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
