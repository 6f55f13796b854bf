//! Builders for the supported model families.
//!
//! All three published families are CIFAR-style: VGG16 with batch norm and a
//! two-layer classifier head, and ResNet-56/110 built from basic blocks with
//! 16/32/64 stage widths and parameter-free zero-pad shortcuts. A small
//! `toycnn` family exists for desk-scale experiments.

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Node, INPUT_ID};
use crate::layers::{ConvParams, LayerKind};

const VGG16_PLAN: &[&[usize]] = &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];

fn conv_node(id: &str, input: &str, in_c: usize, out_c: usize, stride: usize) -> Node {
    Node {
        id: id.into(),
        kind: LayerKind::Conv2d {
            params: ConvParams {
                kernel_h: 3,
                kernel_w: 3,
                stride,
                padding: 1,
                in_channels: in_c,
                out_channels: out_c,
            },
            // Bias disabled: every conv here is followed by batch norm.
            bias: false,
        },
        inputs: vec![input.into()],
    }
}

fn bn_node(id: &str, input: &str, channels: usize) -> Node {
    Node {
        id: id.into(),
        kind: LayerKind::BatchNorm { channels },
        inputs: vec![input.into()],
    }
}

fn relu_node(id: &str, input: &str) -> Node {
    Node {
        id: id.into(),
        kind: LayerKind::ReLU,
        inputs: vec![input.into()],
    }
}

/// Build one of the supported families at the given input shape.
pub fn build_architecture(
    family: &str,
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<ModelGraph> {
    match family {
        "vgg16-cifar" => build_vgg16(input_shape, num_classes),
        "resnet56" => build_resnet(input_shape, num_classes, 9),
        "resnet110" => build_resnet(input_shape, num_classes, 18),
        "toycnn" => build_toycnn(input_shape, num_classes),
        other => Err(Error::InvalidArgument(format!(
            "unknown architecture family {other:?} (expected vgg16-cifar, resnet56, resnet110, or toycnn)"
        ))),
    }
}

fn check_divisible(input_shape: (usize, usize, usize), factor: usize, family: &str) -> Result<()> {
    let (_, h, w) = input_shape;
    if h % factor != 0 || w % factor != 0 || h / factor == 0 || w / factor == 0 {
        return Err(Error::InvalidArgument(format!(
            "{family} needs spatial dims divisible by {factor}, got {h}x{w}"
        )));
    }
    Ok(())
}

fn build_vgg16(input_shape: (usize, usize, usize), num_classes: usize) -> Result<ModelGraph> {
    check_divisible(input_shape, 32, "vgg16-cifar")?;
    let (in_c, _, _) = input_shape;
    let mut nodes = Vec::new();
    let mut prev = INPUT_ID.to_string();
    let mut prev_c = in_c;
    let mut conv_no = 0usize;
    for (stage, widths) in VGG16_PLAN.iter().enumerate() {
        for &width in *widths {
            conv_no += 1;
            let cid = format!("conv{conv_no:02}");
            let bid = format!("bn{conv_no:02}");
            let rid = format!("relu{conv_no:02}");
            nodes.push(conv_node(&cid, &prev, prev_c, width, 1));
            nodes.push(bn_node(&bid, &cid, width));
            nodes.push(relu_node(&rid, &bid));
            prev = rid;
            prev_c = width;
        }
        let pid = format!("pool{}", stage + 1);
        nodes.push(Node {
            id: pid.clone(),
            kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
            inputs: vec![prev.clone()],
        });
        prev = pid;
    }
    nodes.push(Node {
        id: "gap".into(),
        kind: LayerKind::GlobalAvgPool,
        inputs: vec![prev.clone()],
    });
    nodes.push(Node {
        id: "fc1".into(),
        kind: LayerKind::Dense {
            in_features: 512,
            out_features: 512,
        },
        inputs: vec!["gap".into()],
    });
    nodes.push(Node {
        id: "fc1relu".into(),
        kind: LayerKind::ReLU,
        inputs: vec!["fc1".into()],
    });
    nodes.push(Node {
        id: "fc2".into(),
        kind: LayerKind::Dense {
            in_features: 512,
            out_features: num_classes,
        },
        inputs: vec!["fc1relu".into()],
    });
    ModelGraph::new(nodes, input_shape, num_classes)
}

/// Basic-block ResNet with `blocks_per_stage` blocks in each of 3 stages.
/// Depth = 6 * blocks_per_stage + 2 (56 or 110 here).
fn build_resnet(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    blocks_per_stage: usize,
) -> Result<ModelGraph> {
    check_divisible(input_shape, 4, "resnet")?;
    let (in_c, _, _) = input_shape;
    let widths = [16usize, 32, 64];
    let mut nodes = Vec::new();
    nodes.push(conv_node("conv1", INPUT_ID, in_c, 16, 1));
    nodes.push(bn_node("bn1", "conv1", 16));
    nodes.push(relu_node("relu1", "bn1"));
    let mut prev = "relu1".to_string();
    let mut prev_c = 16;
    for (s, &width) in widths.iter().enumerate() {
        for b in 0..blocks_per_stage {
            let base = format!("s{}b{}", s + 1, b);
            let downsample = s > 0 && b == 0;
            let stride = if downsample { 2 } else { 1 };
            nodes.push(conv_node(
                &format!("{base}.conv1"),
                &prev,
                prev_c,
                width,
                stride,
            ));
            nodes.push(bn_node(&format!("{base}.bn1"), &format!("{base}.conv1"), width));
            nodes.push(relu_node(&format!("{base}.relu1"), &format!("{base}.bn1")));
            nodes.push(conv_node(
                &format!("{base}.conv2"),
                &format!("{base}.relu1"),
                width,
                width,
                1,
            ));
            nodes.push(bn_node(&format!("{base}.bn2"), &format!("{base}.conv2"), width));
            let shortcut = if downsample {
                // Parameter-free shortcut: subsample spatially, zero-pad the
                // new channels around the old ones.
                let pool_id = format!("{base}.short.pool");
                nodes.push(Node {
                    id: pool_id.clone(),
                    kind: LayerKind::AvgPool { kernel: 1, stride: 2 },
                    inputs: vec![prev.clone()],
                });
                let pad = (width - prev_c) / 2;
                let pad_id = format!("{base}.short.pad");
                nodes.push(Node {
                    id: pad_id.clone(),
                    kind: LayerKind::ChannelPad {
                        out_channels: width,
                        positions: (0..prev_c).map(|i| i + pad).collect(),
                    },
                    inputs: vec![pool_id],
                });
                pad_id
            } else {
                prev.clone()
            };
            nodes.push(Node {
                id: format!("{base}.add"),
                kind: LayerKind::Add,
                inputs: vec![format!("{base}.bn2"), shortcut],
            });
            nodes.push(relu_node(&format!("{base}.relu2"), &format!("{base}.add")));
            prev = format!("{base}.relu2");
            prev_c = width;
        }
    }
    nodes.push(Node {
        id: "gap".into(),
        kind: LayerKind::GlobalAvgPool,
        inputs: vec![prev],
    });
    nodes.push(Node {
        id: "fc".into(),
        kind: LayerKind::Dense {
            in_features: 64,
            out_features: num_classes,
        },
        inputs: vec!["gap".into()],
    });
    ModelGraph::new(nodes, input_shape, num_classes)
}

/// Three-conv CNN for fast experiments: 16/32/64 channels, two 2x2 pools.
fn build_toycnn(input_shape: (usize, usize, usize), num_classes: usize) -> Result<ModelGraph> {
    check_divisible(input_shape, 4, "toycnn")?;
    let (in_c, _, _) = input_shape;
    let nodes = vec![
        conv_node("conv1", INPUT_ID, in_c, 16, 1),
        bn_node("bn1", "conv1", 16),
        relu_node("relu1", "bn1"),
        Node {
            id: "pool1".into(),
            kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
            inputs: vec!["relu1".into()],
        },
        conv_node("conv2", "pool1", 16, 32, 1),
        bn_node("bn2", "conv2", 32),
        relu_node("relu2", "bn2"),
        Node {
            id: "pool2".into(),
            kind: LayerKind::MaxPool { kernel: 2, stride: 2 },
            inputs: vec!["relu2".into()],
        },
        conv_node("conv3", "pool2", 32, 64, 1),
        bn_node("bn3", "conv3", 64),
        relu_node("relu3", "bn3"),
        Node {
            id: "gap".into(),
            kind: LayerKind::GlobalAvgPool,
            inputs: vec!["relu3".into()],
        },
        Node {
            id: "fc".into(),
            kind: LayerKind::Dense {
                in_features: 64,
                out_features: num_classes,
            },
            inputs: vec!["gap".into()],
        },
    ];
    ModelGraph::new(nodes, input_shape, num_classes)
}
