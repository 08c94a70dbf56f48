//! Binary checkpoint format.
//!
//! Layout: magic `SPAC`, format version, the model configuration, a tensor
//! manifest (name, shape) in sorted-name order, then the payloads as
//! little-endian 32-bit floats in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::model::ModelConfig;
use crate::lm::tensor::{ParameterStore, Tensor};

const MAGIC: &[u8; 4] = b"SPAC";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Saves the parameter store with its architecture header.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ParameterStore<f32>,
) -> Result<()> {
    config.check_params(params)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    for v in [
        config.vocab_size,
        config.context_length,
        config.d_model,
        config.n_layers,
        config.n_heads,
        usize::from(config.tie_output),
    ] {
        write_u32(&mut w, v as u32)?;
    }
    write_u32(&mut w, params.len() as u32)?;
    for (name, tensor) in params.iter() {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, tensor.shape().len() as u32)?;
        for &dim in tensor.shape() {
            write_u32(&mut w, dim as u32)?;
        }
    }
    for (_, tensor) in params.iter() {
        for &x in tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, validating magic, version, manifest, and payload size.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParameterStore<f32>)> {
    let mut r = BufReader::new(File::open(&path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".to_string()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let vocab_size = read_u32(&mut r)? as usize;
    let context_length = read_u32(&mut r)? as usize;
    let d_model = read_u32(&mut r)? as usize;
    let n_layers = read_u32(&mut r)? as usize;
    let n_heads = read_u32(&mut r)? as usize;
    let tie_output = read_u32(&mut r)? != 0;
    let config = ModelConfig {
        vocab_size,
        context_length,
        d_model,
        n_layers,
        n_heads,
        tie_output,
    };
    config.validate().map_err(|e| {
        Error::Checkpoint(format!("header holds an invalid model config: {e}"))
    })?;

    let n_tensors = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|e| Error::Checkpoint(format!("truncated manifest: {e}")))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        manifest.push((name, shape));
    }

    let mut params = ParameterStore::new();
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated payload for `{name}`: {e}")))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params
            .insert(name.clone(), Tensor::from_data(&shape, data)?)
            .map_err(|_| Error::Checkpoint(format!("duplicate tensor `{name}`")))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".to_string()));
    }
    config
        .check_params(&params)
        .map_err(|e| Error::Checkpoint(format!("manifest does not match config: {e}")))?;
    Ok((config, params))
}

/// Loads a checkpoint and insists it matches the expected architecture.
pub fn load_checkpoint_matching(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<ParameterStore<f32>> {
    let (config, params) = load_checkpoint(path)?;
    if config != *expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config {config:?} differs from expected {expected:?}"
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::{forward, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            context_length: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            tie_output: false,
        }
    }

    #[test]
    fn round_trip_preserves_probe_logits_bitwise() {
        let config = cfg();
        let params = config.init_params::<f32>(33).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let (loaded_cfg, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, config);

        let probe = vec![0u32, 4, 7, 2, 8, 1];
        let a = forward(&config, &params, &probe).unwrap();
        let b = forward(&config, &loaded, &probe).unwrap();
        for (x, y) in a.logits_flat().iter().zip(b.logits_flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let config = cfg();
        let params = config.init_params::<f32>(33).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let full = std::fs::read(&path).unwrap();
        for cut in [3, 11, 40, full.len() / 2, full.len() - 1] {
            let cut_path = dir.path().join("cut.ckpt");
            std::fs::write(&cut_path, &full[..cut]).unwrap();
            assert!(
                matches!(load_checkpoint(&cut_path), Err(Error::Checkpoint(_))),
                "cut at {cut} did not error"
            );
        }
    }

    #[test]
    fn config_mismatch_is_an_error() {
        let config = cfg();
        let params = config.init_params::<f32>(33).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        let other = ModelConfig {
            d_model: 16,
            ..config
        };
        assert!(load_checkpoint_matching(&path, &other).is_err());
        assert!(load_checkpoint_matching(&path, &config).is_ok());
    }

    #[test]
    fn bad_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
