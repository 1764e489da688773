//! Binary checkpoint container: one blob holding parameters (and optional
//! optimizer moments) plus a JSON sidecar describing the model.
//!
//! Layout: `SRDACKPT` magic, format version, kind string, meta JSON,
//! parameter tensors (ndim, dims, f64 little-endian data), then an optional
//! Adam state (step counter plus first/second moments, shapes matching the
//! parameters).

use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrdaError};
use crate::fsprobe;
use crate::nn::AdamState;

const MAGIC: &[u8; 8] = b"SRDACKPT";
const VERSION: u32 = 1;

pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: Vec<ArrayD<f64>>,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    meta: serde_json::Value,
}

/// `<path>.json`, next to the blob.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn push_array(buf: &mut Vec<u8>, arr: &ArrayD<f64>) {
    buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
    for &d in arr.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(SrdaError::format(self.path, "truncated checkpoint"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u32()? as usize;
        if ndim > 4 {
            return Err(SrdaError::format(self.path, "implausible tensor rank"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(ndarray::IxDyn(&dims), values)
            .map_err(|e| SrdaError::format(self.path, e.to_string()))
    }
}

pub fn save(path: &Path, container: &Container) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let meta_bytes = serde_json::to_vec(&container.meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(container.kind.len() as u32).to_le_bytes());
    buf.extend_from_slice(container.kind.as_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(container.params.len() as u32).to_le_bytes());
    for p in &container.params {
        push_array(&mut buf, p);
    }
    match &container.adam {
        None => buf.push(0),
        Some(state) => {
            buf.push(1);
            buf.extend_from_slice(&state.t.to_le_bytes());
            for arr in state.m.iter().chain(state.v.iter()) {
                push_array(&mut buf, arr);
            }
        }
    }
    std::fs::write(path, &buf)?;

    let sidecar = Sidecar {
        kind: container.kind.clone(),
        meta: container.meta.clone(),
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container> {
    let bytes = fsprobe::read_bytes(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(SrdaError::format(path, "bad magic; not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SrdaError::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let kind_len = r.u32()? as usize;
    let kind = String::from_utf8(r.take(kind_len)?.to_vec())
        .map_err(|_| SrdaError::format(path, "bad kind string"))?;
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)?;
    let n_params = r.u32()? as usize;
    if n_params > 4096 {
        return Err(SrdaError::format(path, "implausible parameter count"));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.array()?);
    }
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let mut m = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                m.push(r.array()?);
            }
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                v.push(r.array()?);
            }
            Some(AdamState { t, m, v })
        }
        other => {
            return Err(SrdaError::format(
                path,
                format!("bad optimizer flag {other}"),
            ))
        }
    };
    Ok(Container {
        kind,
        meta,
        params,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_with_adam_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = arr2(&[[1.0, 2.0], [3.0, 4.5]]).into_dyn();
        let container = Container {
            kind: "segmentation".into(),
            meta: serde_json::json!({"classes": 2}),
            params: vec![p.clone()],
            adam: Some(AdamState {
                t: 7,
                m: vec![p.mapv(|v| v * 0.1)],
                v: vec![p.mapv(|v| v * 0.2)],
            }),
        };
        save(&path, &container).unwrap();
        assert!(sidecar_path(&path).is_file());

        let back = load(&path).unwrap();
        assert_eq!(back.kind, "segmentation");
        assert_eq!(back.meta["classes"], 2);
        assert_eq!(back.params[0], p);
        let adam = back.adam.unwrap();
        assert_eq!(adam.t, 7);
        assert_eq!(adam.m[0], p.mapv(|v| v * 0.1));
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"SRDACKPTgarbage").unwrap();
        assert!(matches!(load(&path), Err(SrdaError::Format { .. })));
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load(&path), Err(SrdaError::Format { .. })));
    }
}
