//! Checkpoint container: magic+version header, the model configuration as
//! JSON, then named tensors as 64-bit little-endian floats.

use crate::error::{RadflowError, Result};
use crate::model::config::ModelConfig;
use crate::model::params::RadflowParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 16] = b"RADFLOW-CKPT\0\0\0\x01";

pub fn save(params: &RadflowParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(CKPT_MAGIC)?;
        let config = serde_json::to_vec(&params.config)
            .map_err(|e| RadflowError::Data(e.to_string()))?;
        w.write_all(&(config.len() as u64).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(params.store.len() as u64).to_le_bytes())?;
        for (_, name, tensor) in params.store.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<RadflowParams> {
    let fmt = |reason: String| RadflowError::Format {
        path: path.display().to_string(),
        reason,
    };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(fmt("bad magic bytes".into()));
    }
    let read_u64 = |r: &mut BufReader<std::fs::File>| -> Result<usize> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|_| fmt("truncated field".into()))?;
        Ok(u64::from_le_bytes(buf) as usize)
    };
    let config_len = read_u64(&mut r)?;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)
        .map_err(|_| fmt("truncated configuration".into()))?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)
        .map_err(|e| fmt(format!("configuration: {e}")))?;
    config.validate()?;

    // Structure is rebuilt from the configuration, then tensors overwrite
    // the placeholder initialization by name.
    let mut params = RadflowParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
    let n = read_u64(&mut r)?;
    if n != params.store.len() {
        return Err(fmt(format!(
            "{n} tensors where the configuration implies {}",
            params.store.len()
        )));
    }
    let names: std::collections::HashMap<String, crate::tape::ParamId> = params
        .store
        .iter()
        .map(|(id, name, _)| (name.to_string(), id))
        .collect();
    for _ in 0..n {
        let name_len = read_u64(&mut r)?;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| fmt("truncated tensor name".into()))?;
        let name = String::from_utf8(name_buf).map_err(|_| fmt("tensor name not UTF-8".into()))?;
        let ndim = read_u64(&mut r)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)?);
        }
        let id = *names
            .get(&name)
            .ok_or_else(|| fmt(format!("unknown tensor {name}")))?;
        let target = params.store.get_mut(id);
        if target.shape() != shape.as_slice() {
            return Err(fmt(format!(
                "tensor {name} has shape {shape:?} where {:?} was expected",
                target.shape()
            )));
        }
        let mut buf = vec![0u8; target.len() * 8];
        r.read_exact(&mut buf)
            .map_err(|_| fmt(format!("truncated tensor {name}")))?;
        for (slot, chunk) in target.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(params)
}
