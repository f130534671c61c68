//! Binary checkpoints and pretrain -> fine-tune weight transfer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SQPT0001"
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! records    meta.tensors times:
//!              name_len u32, name bytes, rank u32, rank x u64 dims,
//!              payload: product(dims) IEEE-754 values (f64 or f32 per meta.dtype)
//! crc        u32       CRC-32C (Castagnoli) of every preceding byte
//! ```

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Components, ModelSpec, Params};
use crate::numkernel::{Matrix, RngState};

pub const MAGIC: &[u8; 8] = b"SQPT0001";
const MAGIC_FAMILY: &[u8; 4] = b"SQPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    #[default]
    F64,
    F32,
}

impl StorageDtype {
    fn width(self) -> usize {
        match self {
            StorageDtype::F64 => 8,
            StorageDtype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub vocab_hash: Option<String>,
    pub step: u64,
    pub objective: String,
    pub seed: u64,
    pub dtype: StorageDtype,
    /// Number of tensor records that follow.
    pub tensors: usize,
    /// Free-form tag, e.g. a fingerprint of the run configuration.
    pub tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub meta: CheckpointMeta,
}

/// Serializes to the on-disk byte layout. `meta.tensors` is filled in.
pub fn encode(params: &Params, meta: &CheckpointMeta) -> Vec<u8> {
    let tensors = params.tensors();
    let meta = CheckpointMeta {
        tensors: tensors.len(),
        ..meta.clone()
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::with_capacity(64 + json.len() + 8 * params.num_values());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, m) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        match meta.dtype {
            StorageDtype::F64 => m.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
            StorageDtype::F32 => m.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    let crc = crc32c::crc32c(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Writes atomically: temp file in the same directory, fsync, rename.
pub fn save(params: &Params, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(params, meta);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Length(format!(
                "{what} needs {n} bytes at offset {}, file body has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Length(format!("file has {} bytes, shorter than the header", bytes.len())));
    }
    let magic = &bytes[..8];
    if magic != MAGIC {
        if &magic[..4] == MAGIC_FAMILY {
            return Err(Error::Version {
                found: String::from_utf8_lossy(&magic[4..]).into_owned(),
                expected: "0001".into(),
            });
        }
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Length("file ends before the checksum".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: 8 };
    let meta_len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::Format(format!("metadata: {e}")))?;

    let mut records = Vec::with_capacity(meta.tensors);
    for _ in 0..meta.tensors {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name:?} has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<usize>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name:?} dims overflow")))?;
        let width = meta.dtype.width();
        let payload = r.take(count.saturating_mul(width), &format!("payload of {name:?}"))?;
        let data: Vec<f64> = match meta.dtype {
            StorageDtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            StorageDtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        records.push((name, dims, data));
    }
    if r.pos != body.len() {
        return Err(Error::Length(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32c::crc32c(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let components = Components {
        softmax: records.iter().any(|(n, _, _)| n == "softmax.w"),
        rows: records.iter().any(|(n, _, _)| n == "rows.w"),
        head: records.iter().any(|(n, _, _)| n == "head.out.w"),
    };
    let mut params = Params::init(&meta.spec, components, &mut RngState::new(0))
        .map_err(|e| Error::Format(format!("metadata model spec: {e}")))?;
    let expected: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut seen = vec![false; expected.len()];
    {
        let mut slots = params.tensors_mut();
        for (name, dims, data) in records {
            let Some(idx) = expected.iter().position(|n| *n == name) else {
                return Err(Error::UnknownTensor { name, expected });
            };
            if seen[idx] {
                return Err(Error::Format(format!("duplicate tensor {name:?}")));
            }
            seen[idx] = true;
            let slot = &mut slots[idx].1;
            let want = vec![slot.rows(), slot.cols()];
            if dims != want {
                return Err(Error::TensorShape { name, found: dims, expected: want });
            }
            **slot = Matrix::from_vec(want[0], want[1], data)?;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("missing tensor {:?}", expected[i])));
    }
    Ok(Checkpoint { params, meta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorOrigin {
    Transferred,
    Fresh,
}

/// Which tensors of a transferred model came from the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferManifest {
    pub entries: Vec<(String, TensorOrigin)>,
}

impl TransferManifest {
    pub fn origin(&self, name: &str) -> Option<TensorOrigin> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, o)| o)
    }
}

/// Builds parameters for `target` with the embedding and every LSTM layer
/// copied from `pretrained`; all other components are drawn fresh from
/// `seed`. Any mismatch aborts before anything is copied.
pub fn transfer_init(
    pretrained: &Checkpoint,
    target: &ModelSpec,
    components: Components,
    target_vocab_hash: Option<&str>,
    seed: u64,
) -> Result<(Params, TransferManifest)> {
    if let (Some(a), Some(b)) = (pretrained.meta.vocab_hash.as_deref(), target_vocab_hash) {
        if a != b {
            return Err(Error::Transfer {
                tensor: "embedding".into(),
                reason: "vocabulary hash differs from the pretraining vocabulary".into(),
            });
        }
    }
    let mut fresh = Params::init(target, components, &mut RngState::new(seed))?;
    let src = pretrained.params.stack.tensors();
    let dst_shapes: Vec<(String, (usize, usize))> = fresh
        .stack
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect();
    if src.len() != dst_shapes.len() {
        let missing = dst_shapes
            .iter()
            .find(|(n, _)| !src.iter().any(|(s, _)| s == n))
            .or(dst_shapes.last())
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| "lstm".into());
        return Err(Error::Transfer {
            tensor: missing,
            reason: format!(
                "pretrained encoder has {} tensors, target expects {}",
                src.len(),
                dst_shapes.len()
            ),
        });
    }
    for ((sn, sm), (dn, dshape)) in src.iter().zip(&dst_shapes) {
        if sn != dn || sm.shape() != *dshape {
            return Err(Error::Transfer {
                tensor: dn.clone(),
                reason: format!("pretrained {sn} has shape {:?}, target needs {dshape:?}", sm.shape()),
            });
        }
    }
    fresh.stack = pretrained.params.stack.clone();
    let entries = fresh
        .tensors()
        .into_iter()
        .map(|(n, _)| {
            let origin = if dst_shapes.iter().any(|(d, _)| *d == n) {
                TensorOrigin::Transferred
            } else {
                TensorOrigin::Fresh
            };
            (n, origin)
        })
        .collect();
    Ok((fresh, TransferManifest { entries }))
}
