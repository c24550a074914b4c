//! Run checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0       8 bytes   magic "DRPBCKPT"
//! 8       u32       header length H
//! 12      H bytes   UTF-8 JSON header (CheckpointHeader)
//! 12+H    payload
//! ```
//!
//! Payload `dropback`: `entry_count` records of 20 bytes each, sorted by id:
//! `u32 tensor_index, u32 flat_offset, f64 delta, f32 velocity`.
//! The delta is stored at double width so that `init + delta` rounds back to
//! the exact stored weight.
//!
//! Payload `sgd` / `magnitude`: `|W|` f32 weights in global order followed by
//! `|W|` f32 velocities.

use crate::baselines::{DenseOptState, MagnitudePruneState};
use crate::dropback::TrackedSet;
use crate::error::{Error, Result};
use crate::init::{ParamId, Seed};
use crate::nn::{DenseParams, NetworkSpec};
use crate::optim::Optimizer;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DRPBCKPT";
pub const FORMAT_VERSION: u32 = 1;
const ENTRY_BYTES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// `dropback`, `sgd` or `magnitude`.
    pub payload: String,
    pub seed: Seed,
    pub network_digest: String,
    pub network: NetworkSpec,
    /// Tracked capacity `k` (dropback) or the keep count (magnitude); `|W|` for sgd.
    pub k: usize,
    pub frozen: bool,
    pub steps: u64,
    pub entry_count: usize,
    pub epoch: usize,
    pub validation_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub optimizer: Optimizer,
}

impl Checkpoint {
    pub fn new(
        network: &NetworkSpec,
        seed: Seed,
        optimizer: &Optimizer,
        epoch: usize,
        validation_error: Option<f64>,
    ) -> Self {
        let (k, frozen, steps, entry_count) = match optimizer {
            Optimizer::Dropback(set) => (set.capacity(), set.is_frozen(), set.steps(), set.len()),
            Optimizer::Sgd(_) => (network.num_params(), false, 0, network.num_params()),
            Optimizer::Magnitude(m) => (m.keep(), false, 0, network.num_params()),
        };
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                payload: optimizer.kind().to_string(),
                seed,
                network_digest: network.digest(),
                network: network.clone(),
                k,
                frozen,
                steps,
                entry_count,
                epoch,
                validation_error,
            },
            optimizer: optimizer.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.optimizer {
            Optimizer::Dropback(set) => {
                out.reserve(set.len() * ENTRY_BYTES);
                for (id, delta, velocity) in set.triples() {
                    out.extend_from_slice(&id.tensor_index.to_le_bytes());
                    out.extend_from_slice(&id.flat_offset.to_le_bytes());
                    out.extend_from_slice(&delta.to_le_bytes());
                    out.extend_from_slice(&velocity.to_le_bytes());
                }
            }
            Optimizer::Sgd(dense) => write_dense(&mut out, dense),
            Optimizer::Magnitude(m) => write_dense(&mut out, &m.dense),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad header JSON: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        header.network.check()?;
        if header.network.digest() != header.network_digest {
            return Err(Error::Checkpoint("network digest does not match the network".into()));
        }
        let payload = &bytes[12 + hlen..];
        let layout = header.network.layout.clone();
        let optimizer = match header.payload.as_str() {
            "dropback" => {
                if payload.len() != header.entry_count * ENTRY_BYTES {
                    return Err(Error::Checkpoint(format!(
                        "payload holds {} bytes, expected {} entries",
                        payload.len(),
                        header.entry_count
                    )));
                }
                let triples = payload.chunks_exact(ENTRY_BYTES).map(|c| {
                    let u = |r: std::ops::Range<usize>| u32::from_le_bytes(c[r].try_into().expect("4"));
                    (
                        ParamId::new(u(0..4), u(4..8)),
                        f64::from_le_bytes(c[8..16].try_into().expect("8")),
                        f32::from_le_bytes(c[16..20].try_into().expect("4")),
                    )
                });
                Optimizer::Dropback(TrackedSet::restore(
                    header.k,
                    header.seed,
                    layout,
                    header.frozen,
                    header.steps,
                    triples,
                )?)
            }
            "sgd" => Optimizer::Sgd(read_dense(payload, &header.network)?),
            "magnitude" => Optimizer::Magnitude(MagnitudePruneState::from_dense(
                read_dense(payload, &header.network)?,
                header.k,
            )),
            other => return Err(Error::Checkpoint(format!("unknown payload tag {other:?}"))),
        };
        Ok(Self { header, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_dense(out: &mut Vec<u8>, dense: &DenseOptState) {
    for w in dense.weights.tensors.iter().flatten() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for v in dense.velocity.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_dense(payload: &[u8], network: &NetworkSpec) -> Result<DenseOptState> {
    let n = network.num_params();
    if payload.len() != 8 * n {
        return Err(Error::Checkpoint(format!(
            "dense payload holds {} bytes, expected {}",
            payload.len(),
            8 * n
        )));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
        .collect();
    let split = |flat: &[f32]| -> Vec<Vec<f32>> {
        network
            .layout
            .tensors()
            .iter()
            .map(|s| flat[s.offset as usize..s.offset as usize + s.len].to_vec())
            .collect()
    };
    Ok(DenseOptState {
        weights: DenseParams {
            tensors: split(&floats[..n]),
        },
        velocity: split(&floats[n..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GradientBuffer;

    fn trained_set(spec: &NetworkSpec) -> TrackedSet {
        let mut set = TrackedSet::new(7, Seed(17), spec.layout.clone()).unwrap();
        for s in 0..4 {
            let mut g = GradientBuffer::zeros(&spec.layout);
            for (t, tensor) in g.tensors.iter_mut().enumerate() {
                for (o, v) in tensor.iter_mut().enumerate() {
                    *v = (((o * 31 + t * 7 + s * 13) % 17) as f32 - 8.0) * 0.01;
                }
            }
            set.step(&g, 0.3, 0.9).unwrap();
        }
        set
    }

    #[test]
    fn dropback_roundtrip() {
        let spec = NetworkSpec::mlp(&[4, 3, 2]).unwrap();
        let set = trained_set(&spec);
        let ck = Checkpoint::new(&spec, Seed(17), &Optimizer::Dropback(set.clone()), 3, Some(0.25));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header, ck.header);
        match back.optimizer {
            Optimizer::Dropback(restored) => assert_eq!(restored.entries(), set.entries()),
            other => panic!("wrong payload {}", other.kind()),
        }
        // payload size is exactly entries * 20 bytes
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 12 - hlen, set.len() * 20);
    }

    #[test]
    fn dense_roundtrip() {
        let spec = NetworkSpec::mlp(&[3, 2]).unwrap();
        let mut dense = DenseOptState::new(Seed(2), &spec.layout);
        let mut g = GradientBuffer::zeros(&spec.layout);
        g.tensors[0][1] = 0.5;
        dense.sgd_momentum_step(&g, 0.1, 0.9).unwrap();
        let ck = Checkpoint::new(&spec, Seed(2), &Optimizer::Sgd(dense.clone()), 1, None);
        match Checkpoint::from_bytes(&ck.to_bytes()).unwrap().optimizer {
            Optimizer::Sgd(back) => assert_eq!(back, dense),
            other => panic!("wrong payload {}", other.kind()),
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let spec = NetworkSpec::mlp(&[4, 3, 2]).unwrap();
        let ck = Checkpoint::new(&spec, Seed(17), &Optimizer::Dropback(trained_set(&spec)), 0, None);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }
}
