//! Versioned binary checkpoint for network parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DFMCKPT\x01"
//! version u32      currently 1
//! sizes   6 x u64  d, hidden, depth, classes, pitches, velocities
//! seed    u64      init seed carried with the weights
//! count   u64      number of tensors
//! per tensor: name_len u64, name bytes (utf-8), rows u64, cols u64,
//!             rows*cols f64 values in row-major order
//! ```
//!
//! Tensors are written in the canonical order of [`NetParams::tensors`], and
//! the loader insists on exactly that order, those names, and those shapes,
//! so a checkpoint can never silently half-apply.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DfmError, Result};
use crate::net::{LayerSizes, NetParams};

const MAGIC: &[u8; 8] = b"DFMCKPT\x01";
const VERSION: u32 = 1;

pub fn save(params: &NetParams, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_to(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NetParams> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let params = read_from(&mut r)?;
    // Trailing garbage means the file is not what we think it is.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(DfmError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

pub fn write_to<W: Write>(params: &NetParams, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let s = params.sizes;
    for v in [s.d, s.hidden, s.depth, s.classes, s.pitches, s.velocities] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&params.init_seed.to_le_bytes())?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, rows, cols, data) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(rows as u64).to_le_bytes())?;
        w.write_all(&(cols as u64).to_le_bytes())?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_from<R: Read>(r: &mut R) -> Result<NetParams> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(DfmError::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(DfmError::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let d = read_u64(r, "sizes.d")? as usize;
    let hidden = read_u64(r, "sizes.hidden")? as usize;
    let depth = read_u64(r, "sizes.depth")? as usize;
    let classes = read_u64(r, "sizes.classes")? as usize;
    let pitches = read_u64(r, "sizes.pitches")? as usize;
    let velocities = read_u64(r, "sizes.velocities")? as usize;
    let sizes = LayerSizes { d, hidden, depth, classes, pitches, velocities };
    sizes
        .validate()
        .map_err(|e| DfmError::Checkpoint(format!("invalid layer sizes in header: {e}")))?;
    let init_seed = read_u64(r, "init_seed")?;

    let mut params = NetParams::zeros(sizes, init_seed);
    let expected: Vec<(String, usize, usize)> = params
        .tensors()
        .iter()
        .map(|(n, rows, cols, _)| (n.clone(), *rows, *cols))
        .collect();
    let count = read_u64(r, "tensor count")? as usize;
    if count != expected.len() {
        return Err(DfmError::Checkpoint(format!(
            "checkpoint has {count} tensors, sizes imply {}",
            expected.len()
        )));
    }
    for (name, rows, cols) in expected {
        let name_len = read_u64(r, "tensor name length")? as usize;
        if name_len > 4096 {
            return Err(DfmError::Checkpoint("tensor name implausibly long".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(r, &mut name_bytes, "tensor name")?;
        let got_name = String::from_utf8(name_bytes)
            .map_err(|_| DfmError::Checkpoint("tensor name is not utf-8".into()))?;
        if got_name != name {
            return Err(DfmError::Checkpoint(format!(
                "tensor order mismatch: expected {name}, found {got_name}"
            )));
        }
        let got_rows = read_u64(r, "tensor rows")? as usize;
        let got_cols = read_u64(r, "tensor cols")? as usize;
        if got_rows != rows || got_cols != cols {
            return Err(DfmError::Checkpoint(format!(
                "tensor {name}: shape ({got_rows}, {got_cols}) does not match ({rows}, {cols})"
            )));
        }
        let mut tensors = params.tensors_mut();
        let slot = &mut tensors
            .iter_mut()
            .find(|(n, _)| n == &name)
            .expect("expected names come from tensors()")
            .1;
        let mut buf = [0u8; 8];
        for v in slot.iter_mut() {
            read_exact(r, &mut buf, "tensor data")?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok(params)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| DfmError::Checkpoint(format!("truncated while reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> NetParams {
        let sizes = LayerSizes { d: 3, hidden: 8, depth: 2, classes: 2, pitches: 4, velocities: 2 };
        NetParams::init(sizes, 42).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let params = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(loaded.init_seed, 42);
    }

    #[test]
    fn same_params_serialize_to_identical_bytes() {
        let params = sample_params();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_to(&params, &mut a).unwrap();
        write_to(&params, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let params = sample_params();
        let mut bytes = Vec::new();
        write_to(&params, &mut bytes).unwrap();
        bytes[0] ^= 0xff;
        let err = read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, DfmError::Checkpoint(_)), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let params = sample_params();
        let mut bytes = Vec::new();
        write_to(&params, &mut bytes).unwrap();
        bytes[8] = 99;
        let err = read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let params = sample_params();
        let mut bytes = Vec::new();
        write_to(&params, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 9);
        let err = read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let params = sample_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&params, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn tampered_tensor_name_is_rejected() {
        let params = sample_params();
        let mut bytes = Vec::new();
        write_to(&params, &mut bytes).unwrap();
        // The first tensor name, "class_table", starts right after the
        // fixed-size header (8 magic + 4 version + 48 sizes + 8 seed +
        // 8 count + 8 name_len).
        let name_at = 8 + 4 + 48 + 8 + 8 + 8;
        assert_eq!(&bytes[name_at..name_at + 11], b"class_table");
        bytes[name_at] = b'k';
        let err = read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn missing_file_maps_to_io_error() {
        let err = load(Path::new("/nonexistent/nowhere.ckpt")).unwrap_err();
        assert!(matches!(err, DfmError::Io(_)));
    }
}
