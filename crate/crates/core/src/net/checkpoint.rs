//! Checkpoint container:
//!
//! ```text
//! bytes 0..4    magic "SVCK"
//! bytes 4..8    format version, u32 little-endian
//! bytes 8..12   header length H, u32 little-endian
//! bytes 12..12+H  UTF-8 JSON header (network config, optimizer state,
//!               iteration, blob sizes)
//! then          parameters, Adam first moments, Adam second moments; each
//!               the concatenation of every blob as f32 little-endian, in
//!               the header's blob order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Mode;
use crate::net::adam::Adam;
use crate::net::unet::{UNet, UNetConfig};

pub const MAGIC: &[u8; 4] = b"SVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    network: UNetConfig,
    iteration: u64,
    mode: Mode,
    similar_channel: Option<usize>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    adam_step: u64,
    blobs: Vec<usize>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: UNet<f32>,
    pub adam: Adam<f32>,
    pub iteration: u64,
    pub mode: Mode,
    pub similar_channel: Option<usize>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            network: self.net.cfg,
            iteration: self.iteration,
            mode: self.mode,
            similar_channel: self.similar_channel,
            lr: self.adam.lr,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
            adam_step: self.adam.step,
            blobs: self.net.blobs().iter().map(|b| b.len()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 12 * self.net.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let sections: [Vec<&[f32]>; 3] = [
            self.net.blobs(),
            self.adam.m.iter().map(|v| v.as_slice()).collect(),
            self.adam.v.iter().map(|v| v.as_slice()).collect(),
        ];
        for section in sections {
            for blob in section {
                for x in blob {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[0..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut net = UNet::<f32>::zeros(header.network)?;
        let sizes: Vec<usize> = net.blobs().iter().map(|b| b.len()).collect();
        if sizes != header.blobs {
            return Err(bad("blob sizes do not match the network config"));
        }
        let total: usize = sizes.iter().sum();
        let payload = &bytes[12 + hlen..];
        if payload.len() != 3 * 4 * total {
            return Err(Error::Checkpoint(format!("payload is {} bytes, expected {}", payload.len(), 12 * total)));
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for blob in net.blobs_mut() {
            blob.iter_mut().for_each(|v| *v = floats.next().unwrap());
        }
        let mut adam = Adam::new(&net, header.lr);
        for moments in [&mut adam.m, &mut adam.v] {
            for blob in moments.iter_mut() {
                blob.iter_mut().for_each(|v| *v = floats.next().unwrap());
            }
        }
        adam.beta1 = header.beta1;
        adam.beta2 = header.beta2;
        adam.eps = header.eps;
        adam.step = header.adam_step;
        Ok(Checkpoint { net, adam, iteration: header.iteration, mode: header.mode, similar_channel: header.similar_channel })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}
