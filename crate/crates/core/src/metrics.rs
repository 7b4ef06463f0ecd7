//! Pruning and sparsity reporting.
//!
//! Weight sparsity counts trainable scalars (biases included) whose
//! magnitude sits strictly below the weight threshold or is exactly zero.
//! A group ("neuron") is dead when the mean absolute weight over the group
//! falls strictly below the neuron threshold.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{GroupPartition, NetworkParams};
use crate::tensor::Tensor;

/// Per-layer zero counts backing a [`SparsityReport`].
#[derive(Debug, Clone, Serialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub total_weights: usize,
    pub zero_weights: usize,
    pub total_groups: usize,
    pub dead_groups: usize,
}

/// Network-level sparsity summary.
#[derive(Debug, Clone, Serialize)]
pub struct SparsityReport {
    pub weight_sparsity_pct: f64,
    pub neuron_sparsity_pct: f64,
    pub weight_threshold: f64,
    pub neuron_threshold: f64,
    pub total_params: usize,
    pub total_groups: usize,
    pub layers: Vec<LayerSparsity>,
}

fn check_threshold(name: &str, tau: f64) -> Result<()> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!(
            "{} must be nonnegative, got {}",
            name, tau
        )));
    }
    Ok(())
}

fn is_zeroish(w: f64, tau: f64) -> bool {
    w.abs() < tau || w == 0.0
}

/// Set every trainable scalar with |w| < τ_w to exactly 0.
pub fn prune_weights(net: &NetworkParams, tau_w: f64) -> Result<NetworkParams> {
    check_threshold("weight threshold", tau_w)?;
    let mut out = net.clone();
    for layer in &mut out.layers {
        let zap = |w: f64| if w.abs() < tau_w { 0.0 } else { w };
        layer.weight = layer.weight.map(zap);
        if let Some(b) = &layer.bias {
            layer.bias = Some(b.map(zap));
        }
    }
    Ok(out)
}

/// Percentage of trainable scalars at or thresholded to zero.
pub fn weight_sparsity(net: &NetworkParams, tau_w: f64) -> Result<f64> {
    check_threshold("weight threshold", tau_w)?;
    let mut total = 0usize;
    let mut zero = 0usize;
    for layer in &net.layers {
        for t in std::iter::once(&layer.weight).chain(layer.bias.as_ref()) {
            total += t.numel();
            zero += t.iter().filter(|&w| is_zeroish(w, tau_w)).count();
        }
    }
    Ok(100.0 * zero as f64 / total as f64)
}

fn dead_groups(weights: &Tensor, groups: &[Vec<usize>], tau_n: f64) -> Vec<bool> {
    let w = weights.data();
    groups
        .iter()
        .map(|g| {
            let mean: f64 = g.iter().map(|&i| w[i].abs()).sum::<f64>() / g.len() as f64;
            mean < tau_n
        })
        .collect()
}

/// Zero out every group whose mean absolute weight is below τ_n.
pub fn prune_neurons(
    net: &NetworkParams,
    partition: &GroupPartition,
    tau_n: f64,
) -> Result<NetworkParams> {
    check_threshold("neuron threshold", tau_n)?;
    let mut out = net.clone();
    for lg in &partition.layers {
        let weight = &mut out.layers[lg.layer].weight;
        let dead = dead_groups(weight, &lg.groups, tau_n);
        for (g, _) in lg.groups.iter().zip(&dead).filter(|(_, &d)| d) {
            for &i in g {
                weight.data_mut()[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Percentage of dead groups across the whole partition.
pub fn neuron_sparsity(net: &NetworkParams, partition: &GroupPartition, tau_n: f64) -> Result<f64> {
    check_threshold("neuron threshold", tau_n)?;
    let mut total = 0usize;
    let mut dead = 0usize;
    for lg in &partition.layers {
        let flags = dead_groups(&net.layers[lg.layer].weight, &lg.groups, tau_n);
        total += flags.len();
        dead += flags.iter().filter(|&&d| d).count();
    }
    Ok(100.0 * dead as f64 / total as f64)
}

/// The evaluation model: weights pruned at τ_w, then dead groups zeroed at
/// τ_n. Reported test error is measured on this network.
pub fn prune(
    net: &NetworkParams,
    partition: &GroupPartition,
    tau_w: f64,
    tau_n: f64,
) -> Result<NetworkParams> {
    prune_neurons(&prune_weights(net, tau_w)?, partition, tau_n)
}

/// Full sparsity summary with per-layer breakdowns.
pub fn sparsity_report(
    net: &NetworkParams,
    partition: &GroupPartition,
    tau_w: f64,
    tau_n: f64,
) -> Result<SparsityReport> {
    check_threshold("weight threshold", tau_w)?;
    check_threshold("neuron threshold", tau_n)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        let mut total_weights = 0;
        let mut zero_weights = 0;
        for t in std::iter::once(&layer.weight).chain(layer.bias.as_ref()) {
            total_weights += t.numel();
            zero_weights += t.iter().filter(|&w| is_zeroish(w, tau_w)).count();
        }
        let lg = partition.layers.iter().find(|lg| lg.layer == li);
        let (total_groups, dead) = match lg {
            Some(lg) => {
                let flags = dead_groups(&layer.weight, &lg.groups, tau_n);
                (flags.len(), flags.iter().filter(|&&d| d).count())
            }
            None => (0, 0),
        };
        layers.push(LayerSparsity {
            layer: li,
            total_weights,
            zero_weights,
            total_groups,
            dead_groups: dead,
        });
    }
    let total_params: usize = layers.iter().map(|l| l.total_weights).sum();
    let zero_params: usize = layers.iter().map(|l| l.zero_weights).sum();
    let total_groups: usize = layers.iter().map(|l| l.total_groups).sum();
    let dead_total: usize = layers.iter().map(|l| l.dead_groups).sum();
    Ok(SparsityReport {
        weight_sparsity_pct: 100.0 * zero_params as f64 / total_params as f64,
        neuron_sparsity_pct: 100.0 * dead_total as f64 / total_groups as f64,
        weight_threshold: tau_w,
        neuron_threshold: tau_n,
        total_params,
        total_groups,
        layers,
    })
}
