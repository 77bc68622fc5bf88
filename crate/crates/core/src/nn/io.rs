//! Versioned JSON form of a network. Parameters are stored as base64 of
//! little-endian f64 in row-major order, so loading is bit-exact.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, DenseNetwork, SideInput};
use crate::error::{Error, Result};

pub const FORMAT: &str = "connectome-ensemble/dense-network";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub weights: String,
    pub biases: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub format: String,
    pub version: u32,
    /// Free-form role tag such as "ssdae/AE1" or "mlp".
    pub role: String,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side_input: Option<SideInput>,
}

fn encode(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(text).map_err(|e| Error::invalid(format!("bad parameter encoding: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::shape(format!("parameter block has {} bytes, expected {}", bytes.len(), expected * 8)));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

impl DenseNetwork {
    pub fn to_record(&self, role: &str) -> NetworkRecord {
        NetworkRecord {
            format: FORMAT.into(),
            version: VERSION,
            role: role.into(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    fan_in: l.fan_in(),
                    fan_out: l.fan_out(),
                    activation: l.activation,
                    weights: encode(l.weights.iter().copied()),
                    biases: encode(l.biases.iter().copied()),
                })
                .collect(),
            side_input: self.side_input,
        }
    }

    pub fn from_record(record: &NetworkRecord) -> Result<Self> {
        if record.format != FORMAT {
            return Err(Error::invalid(format!("unknown model format `{}`", record.format)));
        }
        if record.version != VERSION {
            return Err(Error::invalid(format!("unsupported model version {}", record.version)));
        }
        let layers = record
            .layers
            .iter()
            .map(|l| {
                let w = decode(&l.weights, l.fan_in * l.fan_out)?;
                let b = decode(&l.biases, l.fan_out)?;
                Ok(DenseLayer {
                    weights: Array2::from_shape_vec((l.fan_in, l.fan_out), w).map_err(|e| Error::shape(e.to_string()))?,
                    biases: Array1::from(b),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNetwork::new(layers, record.side_input)
    }
}
