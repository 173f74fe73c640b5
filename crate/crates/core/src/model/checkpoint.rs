//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IGPNCKPT" | u32 version | u32 len, config JSON
//! u32 count, then per parameter: u32 len, name | u8 dtype | u32 rank | u64 dims.. | values..
//! u32 count, then the running-moment buffers in the same form
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"IGPNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_blob<T: Scalar>(w: &mut impl Write, name: &str, value: &Tensor<T>) -> Result<()> {
    w.write_u32::<LE>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(T::DTYPE.tag())?;
    w.write_u32::<LE>(value.rank() as u32)?;
    for &d in value.shape() {
        w.write_u64::<LE>(d as u64)?;
    }
    match T::DTYPE {
        DType::F32 => value.data().iter().try_for_each(|v| w.write_f32::<LE>(v.as_f64() as f32))?,
        DType::F64 => value.data().iter().try_for_each(|v| w.write_f64::<LE>(v.as_f64()))?,
    }
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_len(r: &mut impl Read, limit: usize, what: &str) -> Result<usize> {
    let len = r.read_u32::<LE>()? as usize;
    if len > limit {
        return Err(corrupt(format!("{what} length {len} exceeds {limit}")));
    }
    Ok(len)
}

fn read_blob<T: Scalar>(r: &mut impl Read) -> Result<(String, Tensor<T>)> {
    let len = read_len(r, 4096, "name")?;
    let mut name = vec![0; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| corrupt("parameter name is not UTF-8"))?;
    let dtype = DType::from_tag(r.read_u8()?).ok_or_else(|| corrupt(format!("`{name}` has an unknown dtype tag")))?;
    let rank = read_len(r, 8, "rank")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LE>()? as usize);
    }
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let count = count.filter(|&c| c <= 1 << 31).ok_or_else(|| corrupt(format!("`{name}` is implausibly large")))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let v = match dtype {
            DType::F32 => r.read_f32::<LE>()? as f64,
            DType::F64 => r.read_f64::<LE>()?,
        };
        data.push(T::lit(v));
    }
    Ok((name, Tensor::new(shape, data)?))
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, model: &Model<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(CHECKPOINT_VERSION)?;
    let config = serde_json::to_vec(model.config())?;
    w.write_u32::<LE>(config.len() as u32)?;
    w.write_all(&config)?;
    let store = model.store();
    w.write_u32::<LE>(store.len() as u32)?;
    for (name, value) in store.names().iter().zip(store.values()) {
        write_blob(w, name, value)?;
    }
    w.write_u32::<LE>(store.buffers().len() as u32)?;
    for (name, value) in store.buffer_names().iter().zip(store.buffers()) {
        write_blob(w, name, value)?;
    }
    Ok(())
}

/// Reads a checkpoint, rebuilding the model from its stored configuration.
pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Model<T>> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let len = read_len(r, 1 << 24, "config")?;
    let mut config = vec![0; len];
    r.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    let mut model = build_model::<T>(&config, 0)?;
    let params = r.read_u32::<LE>()? as usize;
    if params != model.store().len() {
        return Err(corrupt(format!("checkpoint has {params} parameters, model expects {}", model.store().len())));
    }
    for _ in 0..params {
        let (name, value) = read_blob(r)?;
        model.store_mut().set(&name, value)?;
    }
    let buffers = r.read_u32::<LE>()? as usize;
    if buffers != model.store().buffers().len() {
        return Err(corrupt(format!("checkpoint has {buffers} buffers, model expects {}", model.store().buffers().len())));
    }
    for _ in 0..buffers {
        let (name, value) = read_blob(r)?;
        model.store_mut().set_buffer(&name, value)?;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::nn::normal_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            variant: Variant::Heavy,
            channels: vec![8, 8, 8],
            temporal_kernel: 3,
            classes: 4,
            frames: 4,
            ism_width: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut model: Model<f32> = build_model(&config(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in model.store_mut().values_mut() {
            *v = normal_init(v.shape(), 1.0, &mut rng);
        }
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model).unwrap();
        let back: Model<f32> = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.config(), model.config());
        for (p, q) in model.store().values().iter().zip(back.store().values()) {
            assert!(p.bit_eq(q));
        }
        let x = normal_init(&[1, 3, 4, 25], 1.0, &mut rng);
        assert!(model.predict(&x).unwrap().bit_eq(&back.predict(&x).unwrap()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model: Model<f32> = build_model(&config(), 0).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&mut bad_magic.as_slice()), Err(Error::Checkpoint(_))));

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(read_checkpoint::<f32>(&mut bad_version.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() / 2];
        assert!(read_checkpoint::<f32>(&mut &truncated[..]).is_err());
    }
}
