//! Single-file checkpoint container.
//!
//! Layout: magic `HDRCKPT\0`, `u32` version, `u64` length + TOML manifest
//! (mode, step, seed, full config), `u32` tensor count, then per tensor a
//! `u32`-length name, `u32` rank, `u64` dims and little-endian `f32` values.

use std::path::Path;

use hdr_tensor::{RunningStats, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::decoder::UNetParams;
use crate::error::{Error, Result};
use crate::training::{Adam, Mode, TrainState};

const MAGIC: &[u8; 8] = b"HDRCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub step: u64,
    pub epoch: u64,
    pub cursor: u64,
    pub seed: u64,
    pub adam_t: u64,
    pub config_sha256: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub state: TrainState,
}

pub fn encode(state: &TrainState, cfg: &RunConfig) -> Vec<u8> {
    let m = Manifest {
        mode: state.mode,
        step: state.step,
        epoch: state.epoch,
        cursor: state.cursor,
        seed: cfg.train.seed,
        adam_t: state.adam.t,
        config_sha256: cfg.hash(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&m).expect("manifest serializes");
    let mut tensors: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    let p = &state.params;
    for (n, v) in p.names.iter().zip(&p.values) {
        tensors.push((format!("param/{n}"), v.shape().to_vec(), v.data()));
    }
    for (n, s) in p.stat_names.iter().zip(&p.stats) {
        tensors.push((format!("bn/{n}/mean"), vec![s.mean.len()], &s.mean));
        tensors.push((format!("bn/{n}/var"), vec![s.var.len()], &s.var));
    }
    if let Some(o) = &state.optic {
        tensors.push(("optic".into(), o.shape().to_vec(), o.data()));
    }
    for (i, (m, v)) in state.adam.m.iter().zip(&state.adam.v).enumerate() {
        tensors.push((format!("adam/m/{i}"), vec![m.len()], m));
        tensors.push((format!("adam/v/{i}"), vec![v.len()], v));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::data(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::data(self.path, format!("invalid UTF-8 at byte {at}")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { b: bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::data(path, "not a checkpoint (bad magic at byte 0)"));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::data(path, format!("unsupported checkpoint version {v}")));
    }
    let len = r.u64()? as usize;
    let text = r.string(len)?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::data(path, format!("manifest: {e}")))?;
    let count = r.u32()?;
    let mut params = UNetParams {
        names: vec![],
        values: vec![],
        stat_names: vec![],
        stats: vec![],
    };
    let mut optic = None;
    let (mut am, mut av): (Vec<Vec<f32>>, Vec<Vec<f32>>) = (vec![], vec![]);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::data(path, "tensor too large"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if let Some(p) = name.strip_prefix("param/") {
            params.names.push(p.to_string());
            params.values.push(Tensor::new(shape, data)?);
        } else if let Some(rest) = name.strip_prefix("bn/") {
            if let Some(s) = rest.strip_suffix("/mean") {
                params.stat_names.push(s.to_string());
                params.stats.push(RunningStats { mean: data, var: vec![] });
            } else if let Some(s) = rest.strip_suffix("/var") {
                match (params.stat_names.last(), params.stats.last_mut()) {
                    (Some(last), Some(st)) if last == s => st.var = data,
                    _ => return Err(Error::data(path, format!("{name} without matching mean"))),
                }
            }
        } else if name == "optic" {
            optic = Some(Tensor::new(shape, data)?);
        } else if name.starts_with("adam/m/") {
            am.push(data);
        } else if name.starts_with("adam/v/") {
            av.push(data);
        } else {
            return Err(Error::data(path, format!("unknown tensor {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::data(path, format!("trailing data at byte {}", r.pos)));
    }
    let state = TrainState {
        mode: manifest.mode,
        params,
        optic,
        adam: Adam {
            cfg: manifest.config.train.adam,
            t: manifest.adam_t,
            m: am,
            v: av,
        },
        step: manifest.step,
        epoch: manifest.epoch,
        cursor: manifest.cursor,
    };
    Ok(Checkpoint { manifest, state })
}

pub fn save(path: &Path, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    std::fs::write(path, encode(state, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::init_params;

    #[test]
    fn encode_decode_is_bit_exact() {
        let cfg = RunConfig::desk();
        let mut params = init_params::<f32>(&cfg.net, 4);
        params.stats[0].mean[1] = 0.125;
        let sizes: Vec<usize> = params.values.iter().map(|v| v.len()).chain([9]).collect();
        let mut adam = Adam::new(cfg.train.adam, &sizes);
        adam.t = 7;
        adam.m[0][0] = f32::MIN_POSITIVE;
        let state = TrainState {
            mode: Mode::E2eUnconstrained,
            params,
            optic: Some(Tensor::from_fn(vec![1, 3, 3], |i| i as f32 * 0.1)),
            adam,
            step: 12,
            epoch: 2,
            cursor: 5,
        };
        let bytes = encode(&state, &cfg);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.manifest.config, cfg);
        assert_eq!(encode(&back.state, &back.manifest.config), bytes);
    }

    #[test]
    fn truncation_reports_the_offset() {
        let cfg = RunConfig::desk();
        let state = TrainState {
            mode: Mode::LdrUnet,
            params: init_params::<f32>(&cfg.net, 0),
            optic: None,
            adam: Adam::new(cfg.train.adam, &[]),
            step: 0,
            epoch: 0,
            cursor: 0,
        };
        let bytes = encode(&state, &cfg);
        let e = decode(&bytes[..bytes.len() - 3], Path::new("c.bin")).unwrap_err();
        assert!(e.to_string().contains("truncated at byte"), "{e}");
        assert!(decode(b"nope", Path::new("c.bin")).is_err());
    }
}
