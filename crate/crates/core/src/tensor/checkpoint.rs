//! Lossless parameter checkpoints.
//!
//! Layout: the magic line `LCKPT1\n`, a little-endian `u64` header length,
//! a JSON header `{ "meta": …, "tensors": [{ "name", "shape" }, …] }`, then
//! every tensor's values as little-endian f64 in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 7] = b"LCKPT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn write<W: Write>(mut w: W, meta: &serde_json::Value, params: &ParamStore) -> Result<()> {
    let header = Header {
        meta: meta.clone(),
        tensors: params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    for p in params.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, returning its metadata and named tensors in file order.
pub fn read<R: Read>(mut r: R) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut hbuf = vec![0u8; len];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data for '{}'", e.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40)) {
            let mut store = ParamStore::new();
            store.push("a", Tensor::new(vec![values.len()], values.clone()).unwrap());
            store.push("b.c", Tensor::zeros(&[2, 3]));
            let meta = serde_json::json!({"kind": "lstm"});
            let mut bytes = Vec::new();
            write(&mut bytes, &meta, &store).unwrap();
            let (m, tensors) = read(bytes.as_slice()).unwrap();
            prop_assert_eq!(m, meta);
            prop_assert_eq!(tensors.len(), 2);
            let got: Vec<u64> = tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(tensors[1].1.shape(), &[2, 3]);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(read(&b"nope nope nope"[..]).is_err());
        let mut store = ParamStore::new();
        store.push("w", Tensor::full(&[4], 1.5));
        let mut bytes = Vec::new();
        write(&mut bytes, &serde_json::Value::Null, &store).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read(bytes.as_slice()), Err(Error::Checkpoint(_))));
    }
}
