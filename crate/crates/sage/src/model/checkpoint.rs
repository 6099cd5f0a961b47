//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!   magic "SAGE" | version u32 | config-text length u32 | config text |
//!   param count u32 | per param: name length u32, name bytes, rank u32,
//!   extents u64 each, values f64 each.
//!
//! Loading rebuilds the model from the embedded config, then overwrites
//! every parameter; save -> load -> save is byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SageError};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"SAGE";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, param) in model.store.iter() {
        let name = param.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(param.tensor.shape.len() as u32).to_le_bytes());
        for &e in &param.tensor.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &param.tensor.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(SageError::Checkpoint(format!(
                "truncated at byte {} reading {what}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn from_bytes(data: &[u8]) -> Result<Model> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(SageError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SageError::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config text")?)
        .map_err(|_| SageError::Checkpoint("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_text(cfg_text)?;
    let mut model = Model::build(config)?;

    let count = r.u32("param count")? as usize;
    if count != model.store.len() {
        return Err(SageError::Checkpoint(format!(
            "parameter count {count} does not match model ({})",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| SageError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        {
            let param = model.store.get(id);
            if param.name != name || param.tensor.shape != shape {
                return Err(SageError::Checkpoint(format!(
                    "parameter mismatch: file has {name} {shape:?}, model expects {} {:?}",
                    param.name, param.tensor.shape
                )));
            }
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(8 * n, "values")?;
        let values = &mut model.store.get_mut(id).tensor.values;
        for (i, v) in values.iter_mut().enumerate() {
            *v = f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
        }
    }
    if r.pos != data.len() {
        return Err(SageError::Checkpoint(format!(
            "{} trailing bytes after parameters",
            data.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<Model> {
    let data = fs::read(path)?;
    from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            height: 8,
            width: 8,
            conv_channels: vec![4, 6],
            token_dim: 8,
            router_key_dim: 4,
            seed: 31,
            ..ModelConfig::default()
        };
        Model::build(cfg).unwrap()
    }

    #[test]
    fn byte_exact_round_trip() {
        let model = tiny_model();
        let bytes = to_bytes(&model);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&loaded), bytes);
    }

    #[test]
    fn predictions_survive_round_trip_bitwise() {
        let model = tiny_model();
        let loaded = from_bytes(&to_bytes(&model)).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let img = Tensor::new(
                vec![3, 8, 8],
                (0..192).map(|_| rng.uniform()).collect(),
            )
            .unwrap();
            let a = model.predict(&img).unwrap();
            let b = loaded.predict(&img).unwrap();
            assert_eq!(a.logits.values, b.logits.values);
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_context() {
        let model = tiny_model();
        let bytes = to_bytes(&model);

        let bad_magic = {
            let mut b = bytes.clone();
            b[0] = b'X';
            b
        };
        assert!(from_bytes(&bad_magic).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        let err = match from_bytes(truncated) {
            Err(e) => e,
            Ok(_) => panic!("truncated checkpoint parsed"),
        };
        assert!(err.to_string().contains("truncated"));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
