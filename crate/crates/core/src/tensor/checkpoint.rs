//! Parameter dumps: JSON with hex-encoded `f64` bits, or a compact binary
//! layout. Both round-trip bit-exactly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Activation, DenseNet, Layer, Matrix};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VLNT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerDump {
    rows: usize,
    cols: usize,
    activation: Activation,
    weight: Vec<String>,
    bias: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetDump {
    layers: Vec<LayerDump>,
}

fn hex(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| format!("{:016x}", v.to_bits())).collect()
}

fn unhex(values: &[String]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|s| {
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|e| Error::Checkpoint(format!("bad hex float {s:?}: {e}")))
        })
        .collect()
}

pub fn to_json(net: &DenseNet) -> Result<String> {
    let dump = NetDump {
        layers: net
            .layers()
            .iter()
            .map(|l| LayerDump {
                rows: l.weight.rows(),
                cols: l.weight.cols(),
                activation: l.activation,
                weight: hex(l.weight.data()),
                bias: hex(l.bias.data()),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&dump)?)
}

pub fn from_json(text: &str) -> Result<DenseNet> {
    let dump: NetDump = serde_json::from_str(text)?;
    let layers = dump
        .layers
        .iter()
        .map(|l| {
            let weight = Matrix::from_vec(l.rows, l.cols, unhex(&l.weight)?)?;
            let bias = Matrix::from_vec(1, l.cols, unhex(&l.bias)?)?;
            Layer::new(weight, bias, l.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    DenseNet::from_layers(layers)
}

pub fn write_binary<W: Write>(net: &DenseNet, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(net.layers().len() as u32).to_le_bytes())?;
    for l in net.layers() {
        w.write_all(&(l.weight.rows() as u32).to_le_bytes())?;
        w.write_all(&(l.weight.cols() as u32).to_le_bytes())?;
        w.write_all(&[match l.activation {
            Activation::Identity => 0u8,
            Activation::Relu => 1u8,
        }])?;
        for v in l.weight.data().iter().chain(l.bias.data()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn read_binary<R: Read>(mut r: R) -> Result<DenseNet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a network checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut act = [0u8; 1];
        r.read_exact(&mut act)?;
        let activation = match act[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        };
        let weight = Matrix::from_vec(rows, cols, read_f64s(&mut r, rows * cols)?)?;
        let bias = Matrix::from_vec(1, cols, read_f64s(&mut r, cols)?)?;
        layers.push(Layer::new(weight, bias, activation)?);
    }
    DenseNet::from_layers(layers)
}
