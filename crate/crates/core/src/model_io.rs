//! On-disk model format: a directory holding `manifest.json` and one
//! little-endian `f64` blob per parametric layer (weights row-major,
//! then bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::{ConvParams, DenseParams, Tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "smoea-model";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    endianness: String,
    dtype: String,
    input: [usize; 3],
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerEntry {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        blob: String,
    },
    Relu,
    Maxpool,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
        blob: String,
    },
}

fn write_blob(path: &Path, parts: &[&Tensor]) -> Result<()> {
    let mut bytes = Vec::with_capacity(parts.iter().map(|t| t.len() * 8).sum());
    for t in parts {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::CorruptModel(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save_model(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let blob = format!("layer_{i:03}.bin");
        let entry = match layer {
            Layer::Conv(p) => {
                write_blob(&dir.join(&blob), &[&p.weights, &p.bias])?;
                LayerEntry::Conv {
                    out_channels: p.out_channels,
                    in_channels: p.in_channels,
                    kernel_h: p.kernel_h,
                    kernel_w: p.kernel_w,
                    stride: p.stride,
                    padding: p.padding,
                    blob,
                }
            }
            Layer::Dense(p) => {
                write_blob(&dir.join(&blob), &[&p.weights, &p.bias])?;
                LayerEntry::Dense {
                    in_features: p.in_features(),
                    out_features: p.out_features(),
                    blob,
                }
            }
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool => LayerEntry::Maxpool,
            Layer::Flatten => LayerEntry::Flatten,
        };
        layers.push(entry);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        endianness: "little".into(),
        dtype: "f64".into(),
        input: net.input_shape(),
        layers,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptModel(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.endianness != "little" || manifest.dtype != "f64" {
        return Err(Error::CorruptModel(format!(
            "unsupported model format {}/{}/{}",
            manifest.format, manifest.endianness, manifest.dtype
        )));
    }

    let blobs_on_disk = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
        .count();
    let blobs_named = manifest
        .layers
        .iter()
        .filter(|l| matches!(l, LayerEntry::Conv { .. } | LayerEntry::Dense { .. }))
        .count();
    if blobs_on_disk != blobs_named {
        return Err(Error::CorruptModel(format!(
            "manifest names {blobs_named} blobs, directory holds {blobs_on_disk}"
        )));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        let layer = match entry {
            LayerEntry::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                blob,
            } => {
                let nw = out_channels * in_channels * kernel_h * kernel_w;
                let mut data = read_blob(&dir.join(&blob), nw + out_channels)?;
                let bias = data.split_off(nw);
                let weights = Tensor::new(vec![out_channels, in_channels, kernel_h, kernel_w], data)
                    .map_err(|e| Error::CorruptModel(e.to_string()))?;
                let bias = Tensor::new(vec![out_channels], bias)
                    .map_err(|e| Error::CorruptModel(e.to_string()))?;
                Layer::Conv(
                    ConvParams::new(weights, bias, stride, padding)
                        .map_err(|e| Error::CorruptModel(e.to_string()))?,
                )
            }
            LayerEntry::Dense {
                in_features,
                out_features,
                blob,
            } => {
                let nw = in_features * out_features;
                let mut data = read_blob(&dir.join(&blob), nw + out_features)?;
                let bias = data.split_off(nw);
                let weights = Tensor::new(vec![in_features, out_features], data)
                    .map_err(|e| Error::CorruptModel(e.to_string()))?;
                let bias = Tensor::new(vec![out_features], bias)
                    .map_err(|e| Error::CorruptModel(e.to_string()))?;
                Layer::Dense(
                    DenseParams::new(weights, bias).map_err(|e| Error::CorruptModel(e.to_string()))?,
                )
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::Maxpool => Layer::MaxPool,
            LayerEntry::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    Network::new(manifest.input, layers).map_err(|e| Error::CorruptModel(e.to_string()))
}
