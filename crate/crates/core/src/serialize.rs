//! Model persistence: a UTF-8 text manifest plus a little-endian f32 blob.
//!
//! `save_model("m")` writes `m.manifest` and `m.blob`. The manifest lists
//! nodes and tensor shapes; the blob holds every tensor's values
//! concatenated in manifest order. Round-trips are bitwise exact.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelWeights, Node, NodeParams};
use crate::layers::{ConvParams, LayerKind};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "manifest")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "blob")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push('.');
    name.push_str(suffix);
    prefix.with_file_name(name)
}

fn kind_to_line(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Conv2d { params, bias } => format!(
            "conv in={} out={} kh={} kw={} stride={} pad={} bias={}",
            params.in_channels,
            params.out_channels,
            params.kernel_h,
            params.kernel_w,
            params.stride,
            params.padding,
            u8::from(*bias)
        ),
        LayerKind::BatchNorm { channels } => format!("batchnorm channels={channels}"),
        LayerKind::ReLU => "relu".into(),
        LayerKind::MaxPool { kernel, stride } => format!("maxpool kernel={kernel} stride={stride}"),
        LayerKind::AvgPool { kernel, stride } => format!("avgpool kernel={kernel} stride={stride}"),
        LayerKind::GlobalAvgPool => "globalavgpool".into(),
        LayerKind::Flatten => "flatten".into(),
        LayerKind::Dense {
            in_features,
            out_features,
        } => format!("dense in={in_features} out={out_features}"),
        LayerKind::Add => "add".into(),
        LayerKind::ChannelPad {
            out_channels,
            positions,
        } => {
            let pos: Vec<String> = positions.iter().map(ToString::to_string).collect();
            format!("channelpad out={} positions={}", out_channels, pos.join(";"))
        }
        LayerKind::Softmax => "softmax".into(),
    }
}

/// Render the manifest text for a model.
pub fn manifest_string(graph: &ModelGraph, weights: &ModelWeights) -> String {
    let (c, h, w) = graph.input_shape();
    let mut out = String::new();
    out.push_str(&format!("format_version {FORMAT_VERSION}\n"));
    out.push_str(&format!("input_shape {c} {h} {w}\n"));
    out.push_str(&format!("num_classes {}\n", graph.num_classes()));
    for node in graph.nodes() {
        out.push_str(&format!(
            "node {} {} inputs={}\n",
            node.id,
            kind_to_line(&node.kind),
            node.inputs.join(",")
        ));
    }
    for node in graph.nodes() {
        if let Some(params) = weights.get(&node.id) {
            for (role, tensor) in params.tensors() {
                let dims: Vec<String> = tensor.shape().iter().map(ToString::to_string).collect();
                out.push_str(&format!("tensor {} {} {}\n", node.id, role, dims.join(" ")));
            }
        }
    }
    out
}

pub fn save_model(graph: &ModelGraph, weights: &ModelWeights, prefix: &Path) -> Result<()> {
    if let Some(parent) = prefix.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(manifest_path(prefix), manifest_string(graph, weights))?;
    let mut blob: Vec<u8> = Vec::new();
    for node in graph.nodes() {
        if let Some(params) = weights.get(&node.id) {
            for (_, tensor) in params.tensors() {
                for v in tensor.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(blob_path(prefix), blob)?;
    Ok(())
}

struct ManifestData {
    input_shape: (usize, usize, usize),
    num_classes: usize,
    nodes: Vec<Node>,
    tensors: Vec<(String, String, Vec<usize>)>,
}

fn parse_kv(token: &str, path: &str) -> Result<(String, String)> {
    match token.split_once('=') {
        Some((k, v)) => Ok((k.to_string(), v.to_string())),
        None => Err(Error::Parse {
            path: path.into(),
            message: format!("expected key=value, got {token:?}"),
        }),
    }
}

fn parse_usize(s: &str, path: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        path: path.into(),
        message: format!("invalid {what}: {s:?}"),
    })
}

fn parse_manifest(text: &str, path: &str) -> Result<ManifestData> {
    let mut input_shape = None;
    let mut num_classes = None;
    let mut nodes = Vec::new();
    let mut tensors = Vec::new();
    let mut version_seen = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap();
        let err = |message: String| Error::Parse {
            path: path.into(),
            message: format!("line {}: {message}", lineno + 1),
        };
        match head {
            "format_version" => {
                let v = parts.next().ok_or_else(|| err("missing version".into()))?;
                if v != FORMAT_VERSION {
                    return Err(Error::VersionMismatch { found: v.into() });
                }
                version_seen = true;
            }
            "input_shape" => {
                let dims: Vec<usize> = parts
                    .map(|p| parse_usize(p, path, "input dim"))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(err("input_shape needs 3 dims".into()));
                }
                input_shape = Some((dims[0], dims[1], dims[2]));
            }
            "num_classes" => {
                let v = parts.next().ok_or_else(|| err("missing value".into()))?;
                num_classes = Some(parse_usize(v, path, "num_classes")?);
            }
            "node" => {
                let id = parts
                    .next()
                    .ok_or_else(|| err("node line missing id".into()))?
                    .to_string();
                let kind_name = parts
                    .next()
                    .ok_or_else(|| err("node line missing kind".into()))?;
                let mut kv = std::collections::BTreeMap::new();
                let mut inputs = Vec::new();
                for token in parts {
                    let (k, v) = parse_kv(token, path)?;
                    if k == "inputs" {
                        inputs = v.split(',').map(str::to_string).collect();
                    } else {
                        kv.insert(k, v);
                    }
                }
                let get = |key: &str| -> Result<usize> {
                    kv.get(key)
                        .ok_or_else(|| Error::Parse {
                            path: path.into(),
                            message: format!("node {id}: missing {key}"),
                        })
                        .and_then(|v| parse_usize(v, path, key))
                };
                let kind = match kind_name {
                    "conv" => LayerKind::Conv2d {
                        params: ConvParams {
                            in_channels: get("in")?,
                            out_channels: get("out")?,
                            kernel_h: get("kh")?,
                            kernel_w: get("kw")?,
                            stride: get("stride")?,
                            padding: get("pad")?,
                        },
                        bias: get("bias")? != 0,
                    },
                    "batchnorm" => LayerKind::BatchNorm {
                        channels: get("channels")?,
                    },
                    "relu" => LayerKind::ReLU,
                    "maxpool" => LayerKind::MaxPool {
                        kernel: get("kernel")?,
                        stride: get("stride")?,
                    },
                    "avgpool" => LayerKind::AvgPool {
                        kernel: get("kernel")?,
                        stride: get("stride")?,
                    },
                    "globalavgpool" => LayerKind::GlobalAvgPool,
                    "flatten" => LayerKind::Flatten,
                    "dense" => LayerKind::Dense {
                        in_features: get("in")?,
                        out_features: get("out")?,
                    },
                    "add" => LayerKind::Add,
                    "channelpad" => {
                        let positions = kv
                            .get("positions")
                            .map(|v| {
                                v.split(';')
                                    .filter(|s| !s.is_empty())
                                    .map(|s| parse_usize(s, path, "position"))
                                    .collect::<Result<Vec<_>>>()
                            })
                            .transpose()?
                            .unwrap_or_default();
                        LayerKind::ChannelPad {
                            out_channels: get("out")?,
                            positions,
                        }
                    }
                    "softmax" => LayerKind::Softmax,
                    other => return Err(err(format!("unknown node kind {other:?}"))),
                };
                nodes.push(Node { id, kind, inputs });
            }
            "tensor" => {
                let id = parts
                    .next()
                    .ok_or_else(|| err("tensor line missing node id".into()))?
                    .to_string();
                let role = parts
                    .next()
                    .ok_or_else(|| err("tensor line missing role".into()))?
                    .to_string();
                let dims: Vec<usize> = parts
                    .map(|p| parse_usize(p, path, "tensor dim"))
                    .collect::<Result<_>>()?;
                tensors.push((id, role, dims));
            }
            other => return Err(err(format!("unknown directive {other:?}"))),
        }
    }
    if !version_seen {
        return Err(Error::Parse {
            path: path.into(),
            message: "manifest missing format_version".into(),
        });
    }
    Ok(ManifestData {
        input_shape: input_shape.ok_or_else(|| Error::Parse {
            path: path.into(),
            message: "manifest missing input_shape".into(),
        })?,
        num_classes: num_classes.ok_or_else(|| Error::Parse {
            path: path.into(),
            message: "manifest missing num_classes".into(),
        })?,
        nodes,
        tensors,
    })
}

pub fn load_model(prefix: &Path) -> Result<(ModelGraph, ModelWeights)> {
    let mpath = manifest_path(prefix);
    let text = fs::read_to_string(&mpath)?;
    let data = parse_manifest(&text, &mpath.to_string_lossy())?;
    let graph = ModelGraph::new(data.nodes, data.input_shape, data.num_classes)?;

    let blob = fs::read(blob_path(prefix))?;
    let declared: usize = data
        .tensors
        .iter()
        .map(|(_, _, dims)| dims.iter().product::<usize>())
        .sum();
    if blob.len() != declared * 4 {
        return Err(Error::BlobMismatch {
            tensor: "(whole blob)".into(),
            message: format!(
                "blob holds {} bytes but manifest declares {} floats ({} bytes)",
                blob.len(),
                declared,
                declared * 4
            ),
        });
    }

    let mut weights = ModelWeights::new();
    let mut offset = 0usize;
    let mut staged: std::collections::BTreeMap<String, Vec<(String, Tensor)>> =
        std::collections::BTreeMap::new();
    for (id, role, dims) in &data.tensors {
        let count: usize = dims.iter().product();
        let bytes = &blob[offset * 4..(offset + count) * 4];
        offset += count;
        let mut values = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let tensor = Tensor::from_vec(dims.clone(), values).map_err(|e| Error::BlobMismatch {
            tensor: format!("{id}.{role}"),
            message: e.to_string(),
        })?;
        staged.entry(id.clone()).or_default().push((role.clone(), tensor));
    }

    for node in graph.nodes() {
        let Some(mut tensors) = staged.remove(&node.id) else {
            match node.kind {
                LayerKind::Conv2d { .. } | LayerKind::BatchNorm { .. } | LayerKind::Dense { .. } => {
                    return Err(Error::BlobMismatch {
                        tensor: node.id.clone(),
                        message: "parametric node has no tensors in manifest".into(),
                    })
                }
                _ => continue,
            }
        };
        let mut take = |role: &str| -> Result<Tensor> {
            let pos = tensors.iter().position(|(r, _)| r == role).ok_or_else(|| {
                Error::BlobMismatch {
                    tensor: format!("{}.{role}", node.id),
                    message: "missing tensor role".into(),
                }
            })?;
            Ok(tensors.remove(pos).1)
        };
        let params = match &node.kind {
            LayerKind::Conv2d { bias, .. } => NodeParams::Conv {
                weight: take("weight")?,
                bias: if *bias { Some(take("bias")?) } else { None },
            },
            LayerKind::BatchNorm { .. } => NodeParams::BatchNorm {
                gamma: take("gamma")?,
                beta: take("beta")?,
                running_mean: take("running_mean")?,
                running_var: take("running_var")?,
            },
            LayerKind::Dense { .. } => NodeParams::Dense {
                weight: take("weight")?,
                bias: take("bias")?,
            },
            _ => {
                return Err(Error::BlobMismatch {
                    tensor: node.id.clone(),
                    message: "tensors declared for a parameter-free node".into(),
                })
            }
        };
        weights.insert(node.id.clone(), params);
    }

    crate::graph::validate_weights(&graph, &weights)?;
    Ok((graph, weights))
}
