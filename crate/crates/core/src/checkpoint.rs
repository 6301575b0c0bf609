//! Binary checkpoint format.
//!
//! Layout (little-endian): the 8 magic bytes `MTPNET01`, a `u32` header
//! length, a JSON header of that many bytes, a `u64` parameter count, then
//! the parameters as `f64` in canonical layer order (encoder `W`, `b` per
//! layer, then aggregator `W_s`, `W_o` per layer).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{MtpNetwork, NetConfig, ParamSet};
use crate::scene::Intention;

pub const MAGIC: &[u8; 8] = b"MTPNET01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub net: NetConfig,
    pub intention_order: Vec<Intention>,
    pub n_params: usize,
    /// Digest of the training configuration that produced the weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

pub fn to_bytes(net: &MtpNetwork, config_digest: Option<&str>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        net: net.config().clone(),
        intention_order: Intention::ORDER.to_vec(),
        n_params: net.params().num_params(),
        config_digest: config_digest.map(str::to_owned),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + 4 + json.len() + 8 + 8 * header.n_params);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(header.n_params as u64).to_le_bytes());
    for s in net.params().slices() {
        for v in s {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, MtpNetwork)> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(err("not an MTPNET01 checkpoint (bad magic bytes)"));
    }
    let mut pos = 8;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        *pos += n;
        Ok(s)
    };
    let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut pos, hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.intention_order != Intention::ORDER {
        return Err(err("checkpoint uses a different intention one-hot ordering"));
    }
    header.net.validate()?;
    let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let mut params = ParamSet::zeros(&header.net);
    if count != header.n_params || count != params.num_params() {
        return Err(err("parameter count does not match the architecture"));
    }
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes"));
        }
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes after parameters"));
    }
    let net = MtpNetwork::from_parts(header.net.clone(), params)?;
    Ok((header, net))
}

pub fn save_params(net: &MtpNetwork, path: &Path, config_digest: Option<&str>) -> Result<()> {
    let bytes = to_bytes(net, config_digest)?;
    let tmp = path.with_extension("tmp");
    {
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(CheckpointHeader, MtpNetwork)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and insists on a specific prediction horizon.
pub fn load_params_with_horizon(path: &Path, horizon: usize) -> Result<MtpNetwork> {
    let (h, net) = load_params(path)?;
    if h.net.horizon != horizon {
        return Err(Error::HorizonMismatch {
            expected: horizon,
            found: h.net.horizon,
        });
    }
    Ok(net)
}
