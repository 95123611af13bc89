//! Checkpoint file: magic `FPNET`, a little-endian `u32` byte length and the
//! canonical config text, then every parameter tensor in `TNSR` format in
//! declaration order. Learned temporal pooling weights, when saved, follow
//! as one extra trailing tensor.

use std::fs;
use std::path::Path;

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::temporal::PoolingWeights;
use crate::tensor::io as tio;

pub const MAGIC: &[u8; 5] = b"FPNET";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub pooling: Option<PoolingWeights>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            pooling: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let text = self.network.config().to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for p in self.network.params() {
            tio::write_to(&p.value, &mut out).expect("in-memory write");
        }
        if let Some(w) = &self.pooling {
            tio::write_to(&w.to_tensor(), &mut out).expect("in-memory write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(origin, "bad checkpoint magic"));
        }
        let mut rest = &bytes[MAGIC.len()..];
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(Error::format(origin, "truncated checkpoint config"));
        }
        let text = std::str::from_utf8(&rest[..len])
            .map_err(|_| Error::format(origin, "config text is not UTF-8"))?;
        let config = NetworkConfig::parse(text)?;
        rest = &rest[len..];
        let mut network = Network::zeros(config)?;
        let mut values = Vec::with_capacity(network.params().len());
        for _ in 0..network.params().len() {
            values.push(tio::read_from(&mut rest, origin)?);
        }
        network.set_params(values)?;
        let pooling = if rest.is_empty() {
            None
        } else {
            let t = tio::read_from(&mut rest, origin)?;
            Some(PoolingWeights::from_tensor(&t)?)
        };
        if !rest.is_empty() {
            return Err(Error::format(origin, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { network, pooling })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
