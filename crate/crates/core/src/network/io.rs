//! Network spec files and weight directories.
//!
//! A spec file is line-oriented `key=value` text: `input.height`,
//! `input.width`, `input.frames`, then `layer.<n>.*` blocks in topological
//! order. A weight directory holds the same text as `manifest.kv` plus one
//! `.stt` container per parameter tensor (`<layer>.weight.stt`,
//! `<layer>.bias.stt`), so a save/load round trip reproduces the forward
//! pass bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::tensor::SpatiotemporalTensor;

use super::{Layer, LayerDecl, LayerOp, LayerWeights, NetworkGraph, NetworkSpec};

pub(crate) fn spec_to_kv_text(spec: &NetworkSpec) -> String {
    let mut kv = KvFile::new();
    kv.set("input.height", spec.input_height);
    kv.set("input.width", spec.input_width);
    kv.set("input.frames", spec.frames);
    for (idx, layer) in spec.layers.iter().enumerate() {
        let p = format!("layer.{idx}");
        kv.set(format!("{p}.name"), &layer.name);
        kv.set(format!("{p}.kind"), layer.op.kind_name());
        if layer.inputs.len() == 1 {
            kv.set(format!("{p}.input"), &layer.inputs[0]);
        } else {
            kv.set(format!("{p}.inputs"), layer.inputs.join(","));
        }
        match &layer.op {
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                kv.set(format!("{p}.in_channels"), in_channels);
                kv.set(format!("{p}.out_channels"), out_channels);
                kv.set(format!("{p}.kernel_h"), kernel_h);
                kv.set(format!("{p}.kernel_w"), kernel_w);
                kv.set(format!("{p}.stride"), stride);
                kv.set(format!("{p}.padding"), padding);
            }
            LayerOp::MaxPool2d { window, stride } => {
                kv.set(format!("{p}.window"), window);
                kv.set(format!("{p}.stride"), stride);
            }
            LayerOp::FullyConnected { out_features } => {
                kv.set(format!("{p}.out_features"), out_features);
            }
            LayerOp::Relu | LayerOp::ConcatFusion | LayerOp::SumFusion => {}
        }
    }
    kv.to_text()
}

pub(crate) fn spec_from_kv_text(text: &str, path: &str) -> Result<NetworkSpec> {
    let kv = KvFile::parse(text, path)?;
    let input_height = kv.require_parsed::<usize>("input.height", path)?;
    let input_width = kv.require_parsed::<usize>("input.width", path)?;
    let frames = kv.require_parsed::<usize>("input.frames", path)?;

    let mut count = 0usize;
    for key in kv.keys_with_prefix("layer.") {
        let rest = &key["layer.".len()..];
        if let Some((idx, _)) = rest.split_once('.') {
            if let Ok(idx) = idx.parse::<usize>() {
                count = count.max(idx + 1);
            }
        }
    }
    if count == 0 {
        return Err(Error::format(path, "spec declares no layers"));
    }

    let mut layers = Vec::with_capacity(count);
    for idx in 0..count {
        let p = format!("layer.{idx}");
        let name = kv.require(&format!("{p}.name"), path)?.to_string();
        let kind = kv.require(&format!("{p}.kind"), path)?;
        let inputs: Vec<String> = match kv.get(&format!("{p}.inputs")) {
            Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
            None => vec![kv.require(&format!("{p}.input"), path)?.to_string()],
        };
        let op = match kind {
            "conv2d" => LayerOp::Conv2d {
                in_channels: kv.require_parsed(&format!("{p}.in_channels"), path)?,
                out_channels: kv.require_parsed(&format!("{p}.out_channels"), path)?,
                kernel_h: kv.require_parsed(&format!("{p}.kernel_h"), path)?,
                kernel_w: kv.require_parsed(&format!("{p}.kernel_w"), path)?,
                stride: kv.require_parsed(&format!("{p}.stride"), path)?,
                padding: kv.require_parsed(&format!("{p}.padding"), path)?,
            },
            "relu" => LayerOp::Relu,
            "maxpool2d" => LayerOp::MaxPool2d {
                window: kv.require_parsed(&format!("{p}.window"), path)?,
                stride: kv.require_parsed(&format!("{p}.stride"), path)?,
            },
            "concat_fusion" => LayerOp::ConcatFusion,
            "sum_fusion" => LayerOp::SumFusion,
            "fully_connected" => LayerOp::FullyConnected {
                out_features: kv.require_parsed(&format!("{p}.out_features"), path)?,
            },
            other => {
                return Err(Error::format(
                    path,
                    format!("layer '{name}': unknown kind '{other}'"),
                ))
            }
        };
        layers.push(LayerDecl { name, inputs, op });
    }

    Ok(NetworkSpec {
        input_height,
        input_width,
        frames,
        layers,
    })
}

pub(crate) fn spec_from_kv_file(path: &Path) -> Result<NetworkSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    spec_from_kv_text(&text, &path.display().to_string())
}

fn weight_shape(layer: &Layer) -> Option<(usize, usize, usize, usize)> {
    match &layer.op {
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => Some((*out_channels, *in_channels, *kernel_h, *kernel_w)),
        LayerOp::FullyConnected { .. } => None, // resolved from stored in_features
        _ => None,
    }
}

/// Writes a manifest plus one `.stt` container per parameter tensor.
pub fn save_weights(net: &NetworkGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = dir.join("manifest.kv");
    fs::write(&manifest, spec_to_kv_text(&net.spec()))
        .map_err(|e| Error::io(manifest.display().to_string(), e))?;
    for layer in net.layers() {
        match &layer.weights {
            LayerWeights::None => {}
            LayerWeights::Conv { weights, bias } => {
                let (oc, ic, kh, kw) = weight_shape(layer).expect("conv layer");
                // The container layout (channels fastest) matches the flat
                // (out_c, in_c, kh, kw) weight order, so the buffer is reused.
                let w = SpatiotemporalTensor::from_vec(oc, ic, kh, kw, weights.clone())?;
                w.write_stt(dir.join(format!("{}.weight.stt", layer.name)))?;
                let b = SpatiotemporalTensor::from_vec(1, 1, 1, bias.len(), bias.clone())?;
                b.write_stt(dir.join(format!("{}.bias.stt", layer.name)))?;
            }
            LayerWeights::Dense {
                weights,
                bias,
                in_features,
            } => {
                let out_features = bias.len();
                let w = SpatiotemporalTensor::from_vec(
                    out_features,
                    *in_features,
                    1,
                    1,
                    weights.clone(),
                )?;
                w.write_stt(dir.join(format!("{}.weight.stt", layer.name)))?;
                let b = SpatiotemporalTensor::from_vec(1, 1, 1, out_features, bias.clone())?;
                b.write_stt(dir.join(format!("{}.bias.stt", layer.name)))?;
            }
        }
    }
    Ok(())
}

/// Loads a weight directory written by [`save_weights`].
pub fn load_weights(dir: impl AsRef<Path>) -> Result<NetworkGraph> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.kv");
    let spec = spec_from_kv_file(&manifest)?;
    let mut net = NetworkGraph::zero_init(&spec)?;

    let layer_params: Vec<(String, LayerOp)> = net
        .layers()
        .iter()
        .map(|l| (l.name.clone(), l.op.clone()))
        .collect();
    for (name, op) in layer_params {
        match op {
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let wpath = dir.join(format!("{name}.weight.stt"));
                let w = SpatiotemporalTensor::read_stt(&wpath)?;
                if w.shape() != (out_channels, in_channels, kernel_h, kernel_w) {
                    return Err(Error::format(
                        wpath.display().to_string(),
                        format!(
                            "weight shape {:?} does not match layer '{name}' ({out_channels}x{in_channels}x{kernel_h}x{kernel_w})",
                            w.shape()
                        ),
                    ));
                }
                let bpath = dir.join(format!("{name}.bias.stt"));
                let b = SpatiotemporalTensor::read_stt(&bpath)?;
                if b.len() != out_channels {
                    return Err(Error::format(
                        bpath.display().to_string(),
                        format!("bias length {} does not match layer '{name}'", b.len()),
                    ));
                }
                net.set_conv2d_weights(&name, w.data().to_vec(), b.data().to_vec())?;
            }
            LayerOp::FullyConnected { out_features } => {
                let wpath = dir.join(format!("{name}.weight.stt"));
                let w = SpatiotemporalTensor::read_stt(&wpath)?;
                let (rows, _, _, _) = w.shape();
                if rows != out_features {
                    return Err(Error::format(
                        wpath.display().to_string(),
                        format!(
                            "weight rows {rows} do not match layer '{name}' out_features {out_features}"
                        ),
                    ));
                }
                let bpath = dir.join(format!("{name}.bias.stt"));
                let b = SpatiotemporalTensor::read_stt(&bpath)?;
                net.set_fully_connected_weights(&name, w.data().to_vec(), b.data().to_vec())?;
            }
            _ => {}
        }
    }
    Ok(net)
}
