//! Versioned binary checkpoints.
//!
//! Layout: magic `HYPF`, format version u32, config JSON (u32 length +
//! bytes), parameter count u32, then per parameter: name (u32 length +
//! UTF-8), rows u32, cols u32, and rows*cols little-endian f64 values.

use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

use super::{Hypformer, HypformerConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HYPF";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &Hypformer) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config_json = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);

    let params = model.parameters();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let (rows, cols) = tensor.shape();
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        tensor.with_values(|v| {
            for &x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        });
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at offset {} (wanted {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Hypformer> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected HYPF".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config: HypformerConfig = serde_json::from_slice(r.take(config_len)?)?;

    let model = Hypformer::new(config)?;
    let params = model.parameters();
    let count = r.u32()? as usize;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model expects {}",
            params.len()
        )));
    }
    for (expected_name, tensor) in &params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
        if &name != expected_name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: got `{name}`, expected `{expected_name}`"
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {rows}x{cols}, model expects {:?}",
                tensor.shape()
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let mut vals = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensor.set_values(Array2::from_shape_vec((rows, cols), vals).unwrap());
    }
    if r.pos != r.buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            r.buf.len() - r.pos
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::blocks::Mode;
    use crate::data::gen_tree;
    use crate::model::normalized_adjacency;

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let ds = gen_tree(3, 3, 4, 0.3, 0).unwrap();
        let cfg = HypformerConfig {
            d_in: 4,
            d_hidden: 8,
            d_out: 3,
            layers: 1,
            gnn_layers: 1,
            epochs: 3,
            seed: 11,
            ..Default::default()
        };
        let mut model = Hypformer::new(cfg).unwrap();
        crate::model::train(&mut model, &ds).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let adj = normalized_adjacency(ds.num_nodes(), &ds.edges).unwrap();
        let feats = Tensor::from_array(ds.features.clone());
        let a = crate::autodiff::no_grad(|| {
            model.forward(&feats, Some(&adj), Mode::Eval).unwrap().value()
        });
        let b = crate::autodiff::no_grad(|| {
            loaded
                .forward(&feats, Some(&adj), Mode::Eval)
                .unwrap()
                .value()
        });
        assert_eq!(a, b, "loaded checkpoint must reproduce outputs exactly");
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let cfg = HypformerConfig {
            d_in: 4,
            d_hidden: 8,
            d_out: 3,
            layers: 1,
            gnn_layers: 1,
            seed: 1,
            ..Default::default()
        };
        let model = Hypformer::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'H';
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
