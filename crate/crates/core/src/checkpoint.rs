//! Checkpoint files: a JSON manifest followed by one binary section per
//! parameter (name length + name bytes + rank + dims as LE u64, then raw LE
//! f32 payload). Round-trips are byte-identical.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{contract, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub fn save_checkpoint(path: &Path, manifest: &serde_json::Value, params: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let manifest_bytes = serde_json::to_vec(manifest)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape.len() as u64).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(contract(format!("checkpoint truncated while reading {what}")));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    let manifest_len = u64::from_le_bytes(take(8, "manifest length")?.try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(take(manifest_len, "manifest")?)?;
    let count = u64::from_le_bytes(take(8, "parameter count")?.try_into().unwrap()) as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = u64::from_le_bytes(take(8, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len, "name")?.to_vec())
            .map_err(|e| contract(format!("parameter name not utf-8: {e}")))?;
        let rank = u64::from_le_bytes(take(8, "rank")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8, "dim")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(4 * n, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data));
    }
    if at != bytes.len() {
        return Err(contract(format!("checkpoint has {} trailing bytes", bytes.len() - at)));
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream_rng(1, 2);
        let mut params = ParamStore::new();
        params.insert("b.weight", Tensor::trunc_normal(&[3, 4], 0.5, &mut rng));
        params.insert("a.bias", Tensor::trunc_normal(&[4], 0.5, &mut rng));
        let manifest = serde_json::json!({"embed_dim": 64, "kind": "test"});
        let p1 = dir.path().join("model.ckpt");
        save_checkpoint(&p1, &manifest, &params).unwrap();
        let (m2, params2) = load_checkpoint(&p1).unwrap();
        assert_eq!(m2, manifest);
        assert!(params2.bitwise_eq(&params));
        let p2 = dir.path().join("again.ckpt");
        save_checkpoint(&p2, &m2, &params2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::ones(&[8]));
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&p, &serde_json::json!({}), &params).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
