//! "ZLT1" checkpoint format.
//!
//! Layout, bit-exact: an ASCII header starting with the magic line `ZLT1`,
//! one line per tensor (`name ndim d0 d1 ... dk`), a blank line, then the
//! concatenated little-endian IEEE-754 float64 payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamStore;
use super::Tensor;

const MAGIC: &str = "ZLT1";

/// Writes every parameter of the store, in insertion order.
pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (name, t) in store.iter() {
        header.push_str(name);
        header.push(' ');
        header.push_str(&t.shape.len().to_string());
        for d in &t.shape {
            header.push(' ');
            header.push_str(&d.to_string());
        }
        header.push('\n');
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;
    for (_, t) in store.iter() {
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back as named tensors in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(format!("checkpoint {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;

    // Header ends at the first blank line.
    let mut line_start = 0usize;
    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    let mut saw_magic = false;
    let payload_start;
    loop {
        let rel = bytes[line_start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::invalid_argument("checkpoint header is truncated"))?;
        let line = std::str::from_utf8(&bytes[line_start..line_start + rel])
            .map_err(|_| Error::invalid_argument("checkpoint header is not ASCII"))?;
        line_start += rel + 1;
        if !saw_magic {
            if line != MAGIC {
                return Err(Error::invalid_argument(format!(
                    "bad checkpoint magic {line:?}, expected {MAGIC:?}"
                )));
            }
            saw_magic = true;
            continue;
        }
        if line.is_empty() {
            payload_start = line_start;
            break;
        }
        let mut tok = line.split(' ');
        let name = tok
            .next()
            .ok_or_else(|| Error::invalid_argument("checkpoint header line missing name"))?
            .to_string();
        let ndim: usize = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::invalid_argument(format!("bad ndim for tensor {name}")))?;
        let dims: Vec<usize> = tok
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::invalid_argument(format!("bad extent for tensor {name}")))
            })
            .collect::<Result<_>>()?;
        if dims.len() != ndim {
            return Err(Error::invalid_argument(format!(
                "tensor {name} declares {ndim} dims but lists {}",
                dims.len()
            )));
        }
        entries.push((name, dims));
    }

    let mut tensors = Vec::with_capacity(entries.len());
    let mut offset = payload_start;
    for (name, dims) in entries {
        let numel: usize = dims.iter().product();
        let need = numel * 8;
        if offset + need > bytes.len() {
            return Err(Error::invalid_argument(format!(
                "checkpoint payload truncated at tensor {name}"
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[offset + i * 8..offset + (i + 1) * 8]);
            data.push(f64::from_le_bytes(buf));
        }
        offset += need;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if offset != bytes.len() {
        return Err(Error::invalid_argument(
            "checkpoint has trailing bytes after declared payloads",
        ));
    }
    Ok(tensors)
}

/// Loads a checkpoint into an existing store. Every stored parameter must be
/// present with a matching shape; mismatches are reported together by name.
pub fn load_into_store(store: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = read_checkpoint(path)?;
    let mut mismatches = Vec::new();
    let mut seen = vec![false; store.len()];
    let mut updates = Vec::new();
    for (name, tensor) in loaded {
        match store.lookup(&name) {
            Some(id) => {
                seen[id.0] = true;
                if store.get(id).shape != tensor.shape {
                    mismatches.push(format!(
                        "{name} (shape {:?} in file, {:?} in model)",
                        tensor.shape,
                        store.get(id).shape
                    ));
                } else {
                    updates.push((id, tensor.data));
                }
            }
            None => mismatches.push(format!("{name} (not in model)")),
        }
    }
    for id in store.ids() {
        if !seen[id.0] {
            mismatches.push(format!("{} (missing from file)", store.name(id)));
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::invalid_argument(format!(
            "incompatible checkpoint: {}",
            mismatches.join(", ")
        )));
    }
    for (id, data) in updates {
        let t = store.get_mut(id);
        t.data = data;
        t.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        store
            .add("mnet.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -0.0]).unwrap())
            .unwrap();
        store
            .add("anet.b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, 7.0]).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.zlt");
        let store = sample_store();
        write_checkpoint(&store, &path).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((name, t), (sname, st)) in loaded.iter().zip(store.iter()) {
            assert_eq!(name, sname);
            assert_eq!(t.shape, st.shape);
            let got: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = st.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn header_layout_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.zlt");
        write_checkpoint(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"ZLT1\nmnet.w 2 2 3\nanet.b 1 2\n\n";
        assert_eq!(&bytes[..header.len()], header.as_slice());
        assert_eq!(bytes.len(), header.len() + 8 * 8);
        // first payload value is 1.0 little-endian
        assert_eq!(&bytes[header.len()..header.len() + 8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn load_reports_all_mismatches_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.zlt");
        write_checkpoint(&sample_store(), &path).unwrap();

        let mut other = ParamStore::new();
        other.add("mnet.w", Tensor::zeros(vec![9])).unwrap();
        other.add("cnet.w", Tensor::zeros(vec![1])).unwrap();
        let err = load_into_store(&mut other, &path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mnet.w"), "{msg}");
        assert!(msg.contains("anet.b"), "{msg}");
        assert!(msg.contains("cnet.w"), "{msg}");
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = read_checkpoint(Path::new("/nonexistent/ck.zlt")).unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }
}
