//! Parameter update machinery: SGD/Adam steps, trained-rate and coupling
//! schedules, and the alternating W/V primitives of the penalty-decomposition
//! algorithm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupPartition, NetworkParams};
use crate::regularizers::{self, RegularizerKind};
use crate::tensor::Tensor;

/// Gradient-step rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum OptMethod {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptMethod {
    pub fn adam_default() -> OptMethod {
        OptMethod::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Step rule plus learning-rate schedule (γ = γ₀ · decay^⌊(epoch−1)/interval⌋).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub method: OptMethod,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_interval: u64,
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "learning-rate decay must lie in (0,1], got {}",
                self.lr_decay
            )));
        }
        if self.lr_decay_interval == 0 {
            return Err(Error::Config(
                "learning-rate decay interval must be >= 1".into(),
            ));
        }
        if let OptMethod::Adam {
            beta1,
            beta2,
            epsilon,
        } = self.method
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config(format!(
                    "adam moment decays must lie in [0,1), got {} and {}",
                    beta1, beta2
                )));
            }
            if !(epsilon > 0.0) {
                return Err(Error::Config(format!(
                    "adam epsilon must be positive, got {}",
                    epsilon
                )));
            }
        }
        Ok(())
    }

    /// Learning rate in force during `epoch` (1-based).
    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.lr0
            * self
                .lr_decay
                .powi(((epoch - 1) / self.lr_decay_interval) as i32)
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    m: Tensor,
    v: Tensor,
}

/// Mutable optimizer state: one global step counter plus per-tensor moments
/// (two slots per layer: weight, bias). Moments persist for the lifetime of
/// a run — in particular across coupling-escalation boundaries.
#[derive(Debug, Clone)]
pub struct OptState {
    step: u64,
    slots: Vec<Option<AdamMoments>>,
}

impl OptState {
    pub fn new(net: &NetworkParams, method: OptMethod) -> OptState {
        let mut slots = Vec::with_capacity(net.layers.len() * 2);
        for layer in &net.layers {
            for t in [Some(&layer.weight), layer.bias.as_ref()] {
                slots.push(match (method, t) {
                    (OptMethod::Adam { .. }, Some(t)) => Some(AdamMoments {
                        m: Tensor::zeros(t.shape()),
                        v: Tensor::zeros(t.shape()),
                    }),
                    _ => None,
                });
            }
        }
        OptState { step: 0, slots }
    }

    /// Advance the shared step counter; call once per minibatch before the
    /// per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn apply(
        &mut self,
        slot: usize,
        method: OptMethod,
        lr: f64,
        param: &mut Tensor,
        grad: &Tensor,
    ) {
        match method {
            OptMethod::Sgd => param.axpy(-lr, grad),
            OptMethod::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let mom = self.slots[slot].as_mut().expect("adam moments allocated");
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v, p, g) = (
                    mom.m.data_mut(),
                    mom.v.data_mut(),
                    param.data_mut(),
                    grad.data(),
                );
                for i in 0..g.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
}

/// Mutable state of the penalty-decomposition run: auxiliary weights V (one
/// per layer weight tensor), penalty strength λ, coupling weight β with its
/// escalation factor σ, and iteration counters.
#[derive(Debug, Clone)]
pub struct PenaltyState {
    pub v: Vec<Tensor>,
    pub lambda: f64,
    pub beta: f64,
    pub sigma: f64,
    pub inner_steps: u64,
    pub outer_iters: u64,
}

impl PenaltyState {
    /// Start a run: V is the exact V-step applied to the initial weights
    /// (the value any first V-update would produce).
    ///
    /// β₀ = 0 is allowed only together with λ = 0 — the fully disabled
    /// coupling mode, where training degenerates to the plain loss.
    pub fn new(net: &NetworkParams, lambda: f64, beta0: f64, sigma: f64) -> Result<PenaltyState> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "penalty strength must be nonnegative, got {}",
                lambda
            )));
        }
        let disabled = lambda == 0.0 && beta0 == 0.0;
        if !disabled && !(beta0 > 0.0) {
            return Err(Error::Config(format!(
                "initial coupling weight must be positive, got {}",
                beta0
            )));
        }
        if !(sigma > 1.0) {
            return Err(Error::Config(format!(
                "coupling escalation factor must exceed 1, got {}",
                sigma
            )));
        }
        let v = net
            .layers
            .iter()
            .map(|l| {
                if disabled {
                    Ok(l.weight.clone())
                } else {
                    regularizers::prox_l0(&l.weight, lambda, beta0)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PenaltyState {
            v,
            lambda,
            beta: beta0,
            sigma,
            inner_steps: 0,
            outer_iters: 0,
        })
    }

    /// Outer-iteration boundary: β ← σβ.
    pub fn escalate(&mut self) {
        self.beta *= self.sigma;
        self.outer_iters += 1;
    }

    /// Σ_l ‖V_l − W_l‖₂² — the squared coupling gap.
    pub fn coupling_gap_sq(&self, net: &NetworkParams) -> f64 {
        self.v
            .iter()
            .zip(&net.layers)
            .map(|(v, l)| {
                v.data()
                    .iter()
                    .zip(l.weight.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Loss gradients for one layer, as produced by a backward pass.
#[derive(Debug)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Where in the run a step happened; carried into divergence errors.
#[derive(Debug, Clone, Copy)]
pub struct StepCtx {
    pub epoch: u64,
    pub step: u64,
}

fn check_finite(t: &Tensor, ctx: StepCtx, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch: ctx.epoch,
            step: ctx.step,
            what: what.to_string(),
        })
    }
}

/// One W-update. Each regularized tensor sees the loss gradient
/// + λ·group-lasso subgradient + β(W−V); biases feel only the loss
/// gradient. The full effective gradient passes through the optimizer.
///
/// `gl_weight` selects whether the group term participates (1 for the sparse
/// group penalty, 0 for pure elementwise ℓ₀).
#[allow(clippy::too_many_arguments)]
pub fn inner_step_w(
    net: &mut NetworkParams,
    partition: &GroupPartition,
    grads: &[LayerGrads],
    penalty: &mut PenaltyState,
    gl_weight: f64,
    opt: &OptimizerSpec,
    opt_state: &mut OptState,
    lr: f64,
    ctx: StepCtx,
) -> Result<()> {
    if grads.len() != net.layers.len() {
        return Err(Error::shape(
            "inner_step_w",
            format!("{} gradients for {} layers", grads.len(), net.layers.len()),
        ));
    }
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let mut eff = grads[li].weight.clone();
        if penalty.lambda > 0.0 && gl_weight > 0.0 {
            let sub =
                regularizers::group_lasso_subgrad(&layer.weight, &partition.layers[li].groups);
            eff.axpy(penalty.lambda * gl_weight, &sub);
        }
        if penalty.beta > 0.0 {
            // β(W − V)
            eff.axpy(penalty.beta, &layer.weight);
            eff.axpy(-penalty.beta, &penalty.v[li]);
        }
        check_finite(&eff, ctx, "weight gradient")?;
        opt_state.apply(2 * li, opt.method, lr, &mut layer.weight, &eff);
        if let (Some(bias), Some(bg)) = (layer.bias.as_mut(), grads[li].bias.as_ref()) {
            check_finite(bg, ctx, "bias gradient")?;
            opt_state.apply(2 * li + 1, opt.method, lr, bias, bg);
        }
    }
    penalty.inner_steps += 1;
    Ok(())
}

/// One V-update: the exact minimizer V_l = prox over each regularized
/// tensor, applied after the W-update of the same inner iteration.
pub fn inner_step_v(net: &NetworkParams, penalty: &mut PenaltyState) -> Result<()> {
    for (li, layer) in net.layers.iter().enumerate() {
        penalty.v[li] = if penalty.beta == 0.0 {
            layer.weight.clone()
        } else {
            regularizers::prox_l0(&layer.weight, penalty.lambda, penalty.beta)?
        };
    }
    Ok(())
}

/// Assemble the relaxed objective from an already-computed data loss:
/// L̃ + Σ_l [λ·(gl_weight·R_GL(W_l) + ‖V_l‖₀) + (β/2)‖V_l − W_l‖₂²].
pub fn f_beta_given_loss(
    loss: f64,
    net: &NetworkParams,
    partition: &GroupPartition,
    penalty: &PenaltyState,
    gl_weight: f64,
) -> f64 {
    let mut total = loss;
    for (li, layer) in net.layers.iter().enumerate() {
        let gl = if gl_weight > 0.0 {
            gl_weight * regularizers::group_lasso_value(&layer.weight, &partition.layers[li].groups)
        } else {
            0.0
        };
        let l0 = regularizers::l0_count(&penalty.v[li]) as f64;
        let gap: f64 = penalty.v[li]
            .data()
            .iter()
            .zip(layer.weight.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += penalty.lambda * (gl + l0) + 0.5 * penalty.beta * gap;
    }
    total
}

/// Relaxed objective with the data loss evaluated on the given samples.
pub fn f_beta_eval(
    net: &NetworkParams,
    partition: &GroupPartition,
    penalty: &PenaltyState,
    gl_weight: f64,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let loss = crate::model::eval_loss(net, images, labels, batch_size)?;
    Ok(f_beta_given_loss(loss, net, partition, penalty, gl_weight))
}

/// One subgradient step for the baseline penalties (group lasso / sparse
/// group lasso / ℓ₁ / none): gradient = loss gradient + λ·subgradient.
#[allow(clippy::too_many_arguments)]
pub fn baseline_step(
    net: &mut NetworkParams,
    partition: &GroupPartition,
    grads: &[LayerGrads],
    kind: RegularizerKind,
    lambda: f64,
    opt: &OptimizerSpec,
    opt_state: &mut OptState,
    lr: f64,
    ctx: StepCtx,
) -> Result<()> {
    if grads.len() != net.layers.len() {
        return Err(Error::shape(
            "baseline_step",
            format!("{} gradients for {} layers", grads.len(), net.layers.len()),
        ));
    }
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let mut eff = grads[li].weight.clone();
        if lambda > 0.0 {
            let sub =
                regularizers::layer_subgrad(kind, &layer.weight, &partition.layers[li].groups)?;
            eff.axpy(lambda, &sub);
        }
        check_finite(&eff, ctx, "weight gradient")?;
        opt_state.apply(2 * li, opt.method, lr, &mut layer.weight, &eff);
        if let (Some(bias), Some(bg)) = (layer.bias.as_mut(), grads[li].bias.as_ref()) {
            check_finite(bg, ctx, "bias gradient")?;
            opt_state.apply(2 * li + 1, opt.method, lr, bias, bg);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp, extract_groups, GroupingMode};

    fn sgd_spec(lr0: f64) -> OptimizerSpec {
        OptimizerSpec {
            method: OptMethod::Sgd,
            lr0,
            lr_decay: 1.0,
            lr_decay_interval: 1,
        }
    }

    /// 1-weight network with the scalar set to `w`; bias removed.
    fn scalar_net(w: f64) -> NetworkParams {
        let mut net = build_mlp(&[1, 1], 0).unwrap();
        net.layers[0].weight = Tensor::from_vec(&[1, 1], vec![w]).unwrap();
        net.layers[0].bias = None;
        net
    }

    #[test]
    fn scalar_sgd_step_hand_value() {
        // ∇L̃=1, λ=0, β=1, V=0, W=2, γ=0.1 → W' = 2 − 0.1·(1 − 1·(0−2)) = 1.7
        let mut net = scalar_net(2.0);
        let part = extract_groups(&net, GroupingMode::Output);
        let mut penalty = PenaltyState::new(&net, 0.0, 1.0, 2.0).unwrap();
        penalty.v[0] = Tensor::zeros(&[1, 1]);
        let grads = vec![LayerGrads {
            weight: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            bias: None,
        }];
        let spec = sgd_spec(0.1);
        let mut state = OptState::new(&net, spec.method);
        state.begin_step();
        inner_step_w(
            &mut net,
            &part,
            &grads,
            &mut penalty,
            1.0,
            &spec,
            &mut state,
            0.1,
            StepCtx { epoch: 1, step: 1 },
        )
        .unwrap();
        assert!((net.layers[0].weight.item() - 1.7).abs() < 1e-15);
    }

    #[test]
    fn coupling_and_regularizer_vanish_cases() {
        // β=0, λ=0 and V=W, λ=0 both reduce to a vanilla SGD step
        for init_v_equals_w in [true, false] {
            let mut net = scalar_net(2.0);
            let part = extract_groups(&net, GroupingMode::Output);
            let mut penalty = if init_v_equals_w {
                let mut p = PenaltyState::new(&net, 0.0, 1.0, 2.0).unwrap();
                p.v[0] = net.layers[0].weight.clone();
                p
            } else {
                PenaltyState::new(&net, 0.0, 0.0, 2.0).unwrap()
            };
            let grads = vec![LayerGrads {
                weight: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
                bias: None,
            }];
            let spec = sgd_spec(0.1);
            let mut state = OptState::new(&net, spec.method);
            state.begin_step();
            inner_step_w(
                &mut net,
                &part,
                &grads,
                &mut penalty,
                1.0,
                &spec,
                &mut state,
                0.1,
                StepCtx { epoch: 1, step: 1 },
            )
            .unwrap();
            assert!((net.layers[0].weight.item() - 1.9).abs() < 1e-15);
        }
    }

    #[test]
    fn v_step_applies_prox_after_w() {
        let mut net = scalar_net(0.5);
        net.layers[0].weight = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let mut penalty = PenaltyState::new(&net, 2.0, 1.0, 2.0).unwrap();
        // threshold √(2·2/1) = 2: 0.5 → 0
        assert_eq!(penalty.v[0].data(), &[0.0]);
        net.layers[0].weight = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        inner_step_v(&net, &mut penalty).unwrap();
        assert_eq!(penalty.v[0].data(), &[3.0]);
    }

    #[test]
    fn v_step_beats_candidate_set() {
        let mut net = build_mlp(&[3, 2], 4).unwrap();
        net.layers[0].weight =
            Tensor::from_vec(&[2, 3], vec![0.05, -0.4, 1.3, -0.01, 0.7, 0.0]).unwrap();
        let part = extract_groups(&net, GroupingMode::Output);
        let mut penalty = PenaltyState::new(&net, 0.1, 0.9, 2.0).unwrap();
        inner_step_v(&net, &mut penalty).unwrap();
        let base = f_beta_given_loss(0.0, &net, &part, &penalty, 1.0);
        // flipping any coordinate to the other candidate never improves F_β
        for i in 0..6 {
            let w = net.layers[0].weight.data()[i];
            let cur = penalty.v[0].data()[i];
            let alt = if cur == 0.0 { w } else { 0.0 };
            if alt == cur {
                continue;
            }
            let mut trial = penalty.clone();
            trial.v[0].data_mut()[i] = alt;
            let val = f_beta_given_loss(0.0, &net, &part, &trial, 1.0);
            assert!(base <= val + 1e-12, "coordinate {}: {} > {}", i, base, val);
        }
    }

    #[test]
    fn f_beta_assembly_hand_value() {
        let mut net = build_mlp(&[2, 1], 0).unwrap();
        net.layers[0].weight = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        net.layers[0].bias = None;
        let part = extract_groups(&net, GroupingMode::Input);
        // Input grouping on [1,2] gives two singleton groups: √1·3 + √1·4 = 7.
        // Use a single-group partition instead to match the hand value.
        let single = GroupPartition {
            mode: GroupingMode::Output,
            layers: vec![crate::model::LayerGroups {
                layer: 0,
                groups: vec![vec![0, 1]],
            }],
        };
        let mut penalty = PenaltyState::new(&net, 1.0, 10.0, 2.0).unwrap();
        penalty.v[0] = net.layers[0].weight.clone();
        let f = f_beta_given_loss(0.25, &net, &single, &penalty, 1.0);
        assert!((f - 9.321_067_811_865_476).abs() < 1e-9, "got {}", f);
        assert!(f >= 0.25);
        let _ = part;
    }

    #[test]
    fn f_beta_zero_weights_is_pure_loss() {
        let mut net = build_mlp(&[2, 2], 0).unwrap();
        net.layers[0].weight = Tensor::zeros(&[2, 2]);
        net.layers[0].bias = Some(Tensor::zeros(&[2]));
        let part = extract_groups(&net, GroupingMode::Output);
        let penalty = PenaltyState::new(&net, 0.7, 3.0, 2.0).unwrap();
        let f = f_beta_given_loss(1.5, &net, &part, &penalty, 1.0);
        assert_eq!(f, 1.5);
    }

    #[test]
    fn escalation_multiplies_beta() {
        let net = scalar_net(1.0);
        let mut penalty = PenaltyState::new(&net, 0.1, 2.5 / 60_000.0, 1.25).unwrap();
        penalty.escalate();
        assert!((penalty.beta - 3.125 / 60_000.0).abs() < 1e-18);
        assert_eq!(penalty.outer_iters, 1);
    }

    #[test]
    fn lr_schedule_decays_on_interval() {
        let spec = OptimizerSpec {
            method: OptMethod::adam_default(),
            lr0: 0.001,
            lr_decay: 0.1,
            lr_decay_interval: 40,
        };
        assert_eq!(spec.lr_at(1), 0.001);
        assert_eq!(spec.lr_at(40), 0.001);
        assert!((spec.lr_at(41) - 0.0001).abs() < 1e-18);
        assert!((spec.lr_at(81) - 0.00001).abs() < 1e-18);
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut spec = sgd_spec(0.1);
        spec.lr0 = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = sgd_spec(0.1);
        spec.lr_decay = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = sgd_spec(0.1);
        spec.lr_decay_interval = 0;
        assert!(spec.validate().is_err());
        let spec = OptimizerSpec {
            method: OptMethod::Adam {
                beta1: 1.0,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            lr0: 0.001,
            lr_decay: 1.0,
            lr_decay_interval: 1,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn penalty_state_validation() {
        let net = scalar_net(1.0);
        assert!(PenaltyState::new(&net, -1.0, 1.0, 2.0).is_err());
        assert!(PenaltyState::new(&net, 0.1, 0.0, 2.0).is_err());
        assert!(PenaltyState::new(&net, 0.1, 1.0, 1.0).is_err());
        assert!(PenaltyState::new(&net, 0.0, 0.0, 2.0).is_ok());
    }

    #[test]
    fn adam_normalizes_persistent_gradients() {
        // with a constant gradient, the very first adam step moves by ≈ lr
        let mut net = scalar_net(1.0);
        let part = extract_groups(&net, GroupingMode::Output);
        let spec = OptimizerSpec {
            method: OptMethod::adam_default(),
            lr0: 0.01,
            lr_decay: 1.0,
            lr_decay_interval: 1,
        };
        let mut state = OptState::new(&net, spec.method);
        let grads = vec![LayerGrads {
            weight: Tensor::from_vec(&[1, 1], vec![0.37]).unwrap(),
            bias: None,
        }];
        state.begin_step();
        baseline_step(
            &mut net,
            &part,
            &grads,
            RegularizerKind::None,
            0.0,
            &spec,
            &mut state,
            0.01,
            StepCtx { epoch: 1, step: 1 },
        )
        .unwrap();
        let moved = 1.0 - net.layers[0].weight.item();
        assert!((moved - 0.01).abs() < 1e-6, "moved {}", moved);
    }

    #[test]
    fn divergent_gradient_is_reported_with_context() {
        let mut net = scalar_net(1.0);
        let part = extract_groups(&net, GroupingMode::Output);
        let mut penalty = PenaltyState::new(&net, 0.0, 0.0, 2.0).unwrap();
        let grads = vec![LayerGrads {
            weight: Tensor::from_vec(&[1, 1], vec![f64::NAN]).unwrap(),
            bias: None,
        }];
        let spec = sgd_spec(0.1);
        let mut state = OptState::new(&net, spec.method);
        state.begin_step();
        let err = inner_step_w(
            &mut net,
            &part,
            &grads,
            &mut penalty,
            1.0,
            &spec,
            &mut state,
            0.1,
            StepCtx { epoch: 3, step: 17 },
        )
        .unwrap_err();
        match err {
            Error::Diverged {
                epoch: 3, step: 17, ..
            } => {}
            other => panic!("unexpected error {:?}", other),
        }
    }
}
