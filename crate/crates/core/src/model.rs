//! Network definitions, parameter registry, and group-partition extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a layer's weight tensor means and how `forward` applies it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight shape [F, C, k, k]; valid cross-correlation.
    Conv2d { stride: usize },
    /// Weight shape [O, I]; y = x w^T + b.
    Linear,
}

/// One layer's trainable tensors.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Which builder produced a network; fixes the forward wiring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// conv(1→20,5×5) → pool2 → conv(20→50,5×5) → pool2 → fc(800→500) → ReLU → fc(500→10).
    LeNet5Caffe,
    /// Affine+ReLU chain over the given layer sizes, final affine bare.
    Mlp { sizes: Vec<usize> },
}

/// A trainable network: architecture tag plus ordered layer parameters.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
}

/// How weights are grouped into "neurons" for the group regularizers.
///
/// `Input` groups fully connected layers by input column (conv layers stay
/// grouped by filter); `Output` groups them by output row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    #[default]
    Input,
    Output,
}

/// Disjoint index sets over one layer's flat weight storage.
#[derive(Debug, Clone)]
pub struct LayerGroups {
    pub layer: usize,
    pub groups: Vec<Vec<usize>>,
}

/// Per-layer group structure for a whole network.
#[derive(Debug, Clone)]
pub struct GroupPartition {
    pub mode: GroupingMode,
    pub layers: Vec<LayerGroups>,
}

impl GroupPartition {
    pub fn total_groups(&self) -> usize {
        self.layers.iter().map(|l| l.groups.len()).sum()
    }
}

/// Node handles for one layer's parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

fn conv_layer(filters: usize, channels: usize, k: usize, rng: &mut ChaCha8Rng) -> LayerParams {
    LayerParams {
        kind: LayerKind::Conv2d { stride: 1 },
        weight: glorot(
            &[filters, channels, k, k],
            channels * k * k,
            filters * k * k,
            rng,
        ),
        bias: Some(Tensor::zeros(&[filters])),
    }
}

fn linear_layer(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> LayerParams {
    LayerParams {
        kind: LayerKind::Linear,
        weight: glorot(&[out_dim, in_dim], in_dim, out_dim, rng),
        bias: Some(Tensor::zeros(&[out_dim])),
    }
}

/// The MNIST network: 431,080 trainable scalars across two conv and two
/// fully connected layers. Seeded scaled-uniform init, zero biases.
pub fn build_lenet5_caffe(seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv_layer(20, 1, 5, &mut rng),
        conv_layer(50, 20, 5, &mut rng),
        linear_layer(500, 800, &mut rng),
        linear_layer(10, 500, &mut rng),
    ];
    NetworkParams {
        arch: Architecture::LeNet5Caffe,
        layers,
    }
}

/// Affine+ReLU chain over `sizes`, final layer bare; fast test fixture.
pub fn build_mlp(sizes: &[usize], seed: u64) -> Result<NetworkParams> {
    if sizes.len() < 2 {
        return Err(Error::Config(format!(
            "mlp needs at least 2 layer sizes, got {}",
            sizes.len()
        )));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| s < 1) {
        return Err(Error::Config(format!(
            "mlp layer size must be >= 1, got {}",
            bad
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .map(|w| linear_layer(w[1], w[0], &mut rng))
        .collect();
    Ok(NetworkParams {
        arch: Architecture::Mlp {
            sizes: sizes.to_vec(),
        },
        layers,
    })
}

/// Total trainable scalar count, biases included.
pub fn count_params(net: &NetworkParams) -> usize {
    net.layers
        .iter()
        .map(|l| l.weight.numel() + l.bias.as_ref().map_or(0, Tensor::numel))
        .sum()
}

/// Partition each layer's weights into groups under the given mode.
///
/// Conv layers always group by filter. Fully connected layers group by input
/// column under [`GroupingMode::Input`] and by output row under
/// [`GroupingMode::Output`]. Biases are never grouped.
pub fn extract_groups(net: &NetworkParams, mode: GroupingMode) -> GroupPartition {
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(li, layer)| {
            let shape = layer.weight.shape();
            let groups = match (layer.kind, mode) {
                (LayerKind::Conv2d { .. }, _) => {
                    let per_filter: usize = shape[1..].iter().product();
                    (0..shape[0])
                        .map(|f| (f * per_filter..(f + 1) * per_filter).collect())
                        .collect()
                }
                (LayerKind::Linear, GroupingMode::Output) => {
                    let (out_dim, in_dim) = (shape[0], shape[1]);
                    (0..out_dim)
                        .map(|o| (o * in_dim..(o + 1) * in_dim).collect())
                        .collect()
                }
                (LayerKind::Linear, GroupingMode::Input) => {
                    let (out_dim, in_dim) = (shape[0], shape[1]);
                    (0..in_dim)
                        .map(|i| (0..out_dim).map(|o| o * in_dim + i).collect())
                        .collect()
                }
            };
            LayerGroups { layer: li, groups }
        })
        .collect();
    GroupPartition { mode, layers }
}

/// Record the network's forward pass on a tape. Returns the logits node and
/// per-layer parameter handles (for gradient retrieval).
pub fn forward(
    net: &NetworkParams,
    tape: &mut Tape,
    x: Tensor,
) -> Result<(NodeId, Vec<LayerNodes>)> {
    let mut nodes = Vec::with_capacity(net.layers.len());
    let mut cur = tape.input(x);
    match &net.arch {
        Architecture::LeNet5Caffe => {
            for (li, layer) in net.layers.iter().enumerate() {
                let w = tape.param(&layer.weight);
                let b = layer.bias.as_ref().map(|b| tape.param(b));
                nodes.push(LayerNodes { weight: w, bias: b });
                match layer.kind {
                    LayerKind::Conv2d { stride } => {
                        cur = tape.conv2d(cur, w, b, stride)?;
                        cur = tape.maxpool2d(cur, 2)?;
                    }
                    LayerKind::Linear => {
                        if li == 2 {
                            cur = tape.flatten(cur)?;
                        }
                        cur = tape.affine(cur, w, b)?;
                        if li == 2 {
                            cur = tape.relu(cur);
                        }
                    }
                }
            }
        }
        Architecture::Mlp { .. } => {
            cur = tape.flatten(cur)?;
            let last = net.layers.len() - 1;
            for (li, layer) in net.layers.iter().enumerate() {
                let w = tape.param(&layer.weight);
                let b = layer.bias.as_ref().map(|b| tape.param(b));
                nodes.push(LayerNodes { weight: w, bias: b });
                cur = tape.affine(cur, w, b)?;
                if li != last {
                    cur = tape.relu(cur);
                }
            }
        }
    }
    Ok((cur, nodes))
}

/// Copy rows `lo..hi` of a [N, ...] tensor into a fresh [hi-lo, ...] tensor.
fn slice_rows(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::from_vec(&shape, t.data()[lo * row..hi * row].to_vec()).expect("row slice")
}

/// Predicted class per sample: index of the first maximal logit.
pub fn predict(net: &NetworkParams, images: &Tensor, batch_size: usize) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut lo = 0;
    while lo < n {
        let hi = (lo + batch_size).min(n);
        let mut tape = Tape::new();
        let (logits, _) = forward(net, &mut tape, slice_rows(images, lo, hi))?;
        let lt = tape.value(logits);
        let classes = lt.shape()[1];
        for row in lt.data().chunks(classes) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
        lo = hi;
    }
    Ok(out)
}

/// Percentage of misclassified samples.
pub fn test_error_pct(
    net: &NetworkParams,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::shape(
            "test_error_pct",
            format!("{} labels for {} images", labels.len(), n),
        ));
    }
    if n == 0 {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict(net, images, batch_size)?;
    let wrong = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(100.0 * wrong as f64 / n as f64)
}

/// Mean cross-entropy of the network on the given samples (no gradient use).
pub fn eval_loss(
    net: &NetworkParams,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let n = images.shape()[0];
    if labels.len() != n || n == 0 {
        return Err(Error::shape(
            "eval_loss",
            format!("{} labels for {} images", labels.len(), n),
        ));
    }
    let mut total = 0.0;
    let mut lo = 0;
    while lo < n {
        let hi = (lo + batch_size).min(n);
        let mut tape = Tape::new();
        let (logits, _) = forward(net, &mut tape, slice_rows(images, lo, hi))?;
        let loss = tape.softmax_xent(logits, &labels[lo..hi])?;
        total += tape.value(loss).item() * (hi - lo) as f64;
        lo = hi;
    }
    Ok(total / n as f64)
}
