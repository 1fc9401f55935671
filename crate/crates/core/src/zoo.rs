//! Built-in topologies and parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{InputSpec, LayerKind, NetworkGraph};
use crate::tensor::Tensor;

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d { out_channels, kernel, stride, padding, bias: false }
}

fn dw(kernel: usize, stride: usize, padding: usize) -> LayerKind {
    LayerKind::DepthwiseConv2d { kernel, stride, padding, bias: false }
}

fn bn() -> LayerKind {
    LayerKind::BatchNorm { eps: 1e-5, momentum: 0.1 }
}

/// Names accepted by [`builtin`].
pub const BUILTINS: &[&str] = &["toy-cnn", "plain-chain", "inverted-residual", "depthwise-block", "mlp"];

/// Looks up a built-in topology by name, with random parameters from `seed`.
pub fn builtin(name: &str, seed: u64) -> Option<NetworkGraph> {
    Some(match name {
        "toy-cnn" => toy_cnn(3, 8, 10, seed),
        "plain-chain" => plain_chain(seed),
        "inverted-residual" => inverted_residual(seed),
        "depthwise-block" => depthwise_block(seed),
        "mlp" => mlp(16, 32, 4, seed),
        _ => return None,
    })
}

/// Three convolutions with batch norm, then global pooling and a classifier.
pub fn toy_cnn(in_channels: usize, size: usize, classes: usize, seed: u64) -> NetworkGraph {
    let mut g = NetworkGraph::new(InputSpec::image(in_channels, size, size));
    let steps = [
        ("conv1", conv(8, 3, 1, 1)),
        ("bn1", bn()),
        ("relu1", LayerKind::Relu),
        ("conv2", conv(16, 3, 2, 1)),
        ("bn2", bn()),
        ("relu2", LayerKind::Relu),
        ("conv3", conv(16, 3, 1, 1)),
        ("bn3", bn()),
        ("relu3", LayerKind::Relu),
        ("pool", LayerKind::GlobalAvgPool),
        ("fc", LayerKind::Dense { out_features: classes, bias: true }),
    ];
    for (name, kind) in steps {
        g.then(name, kind).expect("toy cnn is well formed");
    }
    init_params(&mut g, seed);
    g
}

/// Three 3x3 convolutions separated by relu.
pub fn plain_chain(seed: u64) -> NetworkGraph {
    let mut g = NetworkGraph::new(InputSpec::image(3, 6, 6));
    let steps = [
        ("c1", conv(4, 3, 1, 1)),
        ("r1", LayerKind::Relu),
        ("c2", conv(6, 3, 1, 1)),
        ("r2", LayerKind::Relu),
        ("c3", conv(5, 3, 1, 1)),
    ];
    for (name, kind) in steps {
        g.then(name, kind).expect("plain chain is well formed");
    }
    init_params(&mut g, seed);
    g
}

/// Stem, one inverted-residual block with a skip add, and a small head.
pub fn inverted_residual(seed: u64) -> NetworkGraph {
    let mut g = NetworkGraph::new(InputSpec::image(4, 6, 6));
    let chain = [
        ("stem", conv(8, 1, 1, 0)),
        ("stem_bn", bn()),
        ("stem_relu", LayerKind::Relu),
        ("expand", conv(16, 1, 1, 0)),
        ("expand_bn", bn()),
        ("expand_relu", LayerKind::Relu),
        ("dw", dw(3, 1, 1)),
        ("dw_bn", bn()),
        ("dw_relu", LayerKind::Relu),
        ("project", conv(8, 1, 1, 0)),
        ("project_bn", bn()),
    ];
    for (name, kind) in chain {
        g.then(name, kind).expect("block is well formed");
    }
    g.push("skip", LayerKind::Add, &["stem_relu", "project_bn"]).expect("block is well formed");
    let tail = [
        ("head", conv(6, 1, 1, 0)),
        ("head_relu", LayerKind::Relu),
        ("pool", LayerKind::GlobalAvgPool),
        ("fc", LayerKind::Dense { out_features: 5, bias: true }),
    ];
    for (name, kind) in tail {
        g.then(name, kind).expect("block is well formed");
    }
    init_params(&mut g, seed);
    g
}

/// Pointwise conv, strided depthwise conv, pointwise conv.
pub fn depthwise_block(seed: u64) -> NetworkGraph {
    let mut g = NetworkGraph::new(InputSpec::image(3, 6, 6));
    let steps = [
        ("pw1", conv(6, 1, 1, 0)),
        ("r1", LayerKind::Relu),
        ("dw", dw(3, 2, 1)),
        ("r2", LayerKind::Relu),
        ("pw2", conv(4, 1, 1, 0)),
        ("pool", LayerKind::GlobalAvgPool),
        ("fc", LayerKind::Dense { out_features: 3, bias: true }),
    ];
    for (name, kind) in steps {
        g.then(name, kind).expect("depthwise block is well formed");
    }
    init_params(&mut g, seed);
    g
}

pub fn mlp(inputs: usize, hidden: usize, classes: usize, seed: u64) -> NetworkGraph {
    let mut g = NetworkGraph::new(InputSpec::vector(inputs));
    g.then("fc1", LayerKind::Dense { out_features: hidden, bias: true }).expect("mlp is well formed");
    g.then("relu", LayerKind::Relu).expect("mlp is well formed");
    g.then("fc2", LayerKind::Dense { out_features: classes, bias: true }).expect("mlp is well formed");
    init_params(&mut g, seed);
    g
}

/// He-normal kernels, zero biases, unit batch-norm scales.
pub fn init_params(g: &mut NetworkGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut g.layers {
        let fan_in = match (&layer.kind, &layer.weight) {
            (LayerKind::Conv2d { .. }, Some(w)) => w.shape()[1..].iter().product::<usize>(),
            (LayerKind::DepthwiseConv2d { .. }, Some(w)) => w.shape()[1..].iter().product::<usize>(),
            (LayerKind::Dense { .. }, Some(w)) => w.shape()[1],
            _ => continue,
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w = layer.weight.as_mut().expect("checked above");
        for v in w.data_mut() {
            *v = normal.sample(&mut rng);
        }
        if let Some(b) = &mut layer.bias {
            *b = Tensor::zeros(b.shape()).with_grad();
        }
    }
}
