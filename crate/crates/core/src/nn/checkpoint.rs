//! Checkpoint files: a text manifest followed by a raw `f32` payload.
//!
//! ```text
//! gstuda-checkpoint 1
//! network translator depth=3 base=8 dropout=0.2
//! tensor translator enc0.weight 8 1 3 3
//! ...
//! payload 12345
//! <12345 little-endian f32 values, tensors in manifest order>
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Real;
use crate::error::{Error, IoContext, Result};

const MAGIC: &str = "gstuda-checkpoint 1";

/// One network as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredNetwork {
    pub name: String,
    /// Architecture descriptor as `key=value` pairs.
    pub descriptor: Vec<(String, String)>,
    pub params: ParamSet<f32>,
}

impl StoredNetwork {
    pub fn new<F: Real>(name: &str, descriptor: Vec<(String, String)>, params: &ParamSet<F>) -> Self {
        Self {
            name: name.to_string(),
            descriptor,
            params: params.cast(),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.descriptor
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("network {} lacks descriptor key {key}", self.name)))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key} in network {}", self.name)))
    }
}

pub fn write_checkpoint(path: &Path, networks: &[StoredNetwork]) -> Result<()> {
    let mut header = format!("{MAGIC}\n");
    let mut payload = Vec::new();
    for net in networks {
        header.push_str(&format!("network {}", net.name));
        for (k, v) in &net.descriptor {
            header.push_str(&format!(" {k}={v}"));
        }
        header.push('\n');
        for p in net.params.iter() {
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {} {} {}\n", net.name, p.name, dims.join(" ")));
            for v in &p.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    header.push_str(&format!("payload {}\n", payload.len() / 4));
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).at(dir)?;
        }
    }
    fs::write(path, bytes).at(path)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<StoredNetwork>> {
    let bytes = fs::read(path).at(path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));

    let mut pos = 0usize;
    let mut next_line = || -> Option<String> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n')?;
        pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).ok()
    };
    if next_line().as_deref() != Some(MAGIC) {
        return Err(bad("not a gstuda checkpoint".into()));
    }

    let mut networks: Vec<StoredNetwork> = Vec::new();
    let mut shapes: Vec<(usize, String, Vec<usize>)> = Vec::new();
    let total: usize = loop {
        let line = next_line().ok_or_else(|| bad("truncated manifest".into()))?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("network") => {
                let name = parts.next().ok_or_else(|| bad("network without name".into()))?;
                let descriptor = parts
                    .map(|kv| {
                        kv.split_once('=')
                            .map(|(k, v)| (k.to_string(), v.to_string()))
                            .ok_or_else(|| bad(format!("bad descriptor entry {kv:?}")))
                    })
                    .collect::<Result<_>>()?;
                networks.push(StoredNetwork {
                    name: name.to_string(),
                    descriptor,
                    params: ParamSet::new(),
                });
            }
            Some("tensor") => {
                let net = parts.next().ok_or_else(|| bad("tensor without network".into()))?;
                let idx = networks
                    .iter()
                    .position(|n| n.name == net)
                    .ok_or_else(|| bad(format!("tensor for unknown network {net}")))?;
                let name = parts.next().ok_or_else(|| bad("tensor without name".into()))?;
                let shape = parts
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dimension {d:?}"))))
                    .collect::<Result<Vec<usize>>>()?;
                shapes.push((idx, name.to_string(), shape));
            }
            Some("payload") => {
                break parts
                    .next()
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| bad("bad payload count".into()))?;
            }
            _ => return Err(bad(format!("unexpected manifest line {line:?}"))),
        }
    };
    let declared: usize = shapes.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
    if declared != total || bytes.len() - pos != total * 4 {
        return Err(bad(format!(
            "payload holds {} bytes, manifest declares {} values",
            bytes.len() - pos,
            declared
        )));
    }
    let mut floats = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for (idx, name, shape) in shapes {
        let n = shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        networks[idx].params.push(name, shape, data);
    }
    Ok(networks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::<f32>::new();
        ps.push("a.weight", vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.5, f32::MIN_POSITIVE]);
        ps.push("a.bias", vec![2], vec![0.25, -0.0]);
        let net = StoredNetwork::new("net", vec![("depth".into(), "3".into())], &ps);
        let path = dir.path().join("x.ckpt");
        write_checkpoint(&path, std::slice::from_ref(&net)).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, vec![net]);
        assert_eq!(back[0].parse::<usize>("depth").unwrap(), 3);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::<f32>::new();
        ps.push("w", vec![4], vec![1.0; 4]);
        let path = dir.path().join("x.ckpt");
        write_checkpoint(&path, &[StoredNetwork::new("n", vec![], &ps)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        fs::write(&path, bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
