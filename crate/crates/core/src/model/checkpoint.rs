//! Versioned binary checkpoint of named tensors.
//!
//! Layout (all integers little-endian `u32`, floats little-endian):
//!
//! ```text
//! magic        8 bytes  "RVCKPT\0\0"
//! version      u32      = 1
//! elem_bytes   u32      4 (f32) or 8 (f64)
//! config       8 x u32  n_layers d_model n_heads d_mlp vocab_size max_seq_len
//!                       attention(0 causal, 1 bidirectional) tie_embeddings(0/1)
//! n_tensors    u32
//! per tensor:  name_len u32, name (UTF-8), rows u32, cols u32,
//!              rows*cols floats, row-major
//! ```
//!
//! Tensors appear in the canonical order of [`Parameters::tensors`]; loading
//! checks every name and shape against a freshly shaped model.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::tape::{cast, Scalar};
use super::transformer::{init, Parameters};
use super::{AttentionMode, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"RVCKPT\0\0";
pub const VERSION: u32 = 1;

/// Trained parameters plus the per-step training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub steps: usize,
    pub loss_log: Vec<f64>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Writes the parameters to `path` and, if non-empty, the loss log next
    /// to it as `<path>.loss.csv`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_params(&mut f, &self.params)?;
        f.flush()?;
        let mut log = String::from("step,loss\n");
        for (i, l) in self.loss_log.iter().enumerate() {
            log.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(loss_path(path), log)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let params = read_params(&mut f)?;
        let loss_log = match std::fs::read_to_string(loss_path(path)) {
            Ok(text) => text
                .lines()
                .skip(1)
                .filter_map(|l| l.split(',').nth(1)?.parse().ok())
                .collect(),
            Err(_) => Vec::new(),
        };
        Ok(Self { params, steps: loss_log.len(), loss_log })
    }
}

fn loss_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".loss.csv");
    name.into()
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_params<F: Scalar>(w: &mut impl Write, params: &Parameters<F>) -> Result<(), ModelError> {
    let elem = std::mem::size_of::<F>();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, elem)?;
    let c = &params.config;
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_mlp, c.vocab_size, c.max_seq_len] {
        put_u32(w, v)?;
    }
    put_u32(w, (c.attention == AttentionMode::Bidirectional) as usize)?;
    put_u32(w, c.tie_embeddings as usize)?;
    let tensors = params.tensors();
    put_u32(w, tensors.len())?;
    for (name, t) in tensors {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.nrows())?;
        put_u32(w, t.ncols())?;
        for &x in t.iter() {
            let x = x.to_f64().expect("finite");
            if elem == 4 {
                w.write_all(&(x as f32).to_le_bytes())?;
            } else {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_params<F: Scalar>(r: &mut impl Read) -> Result<Parameters<F>, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let elem = get_u32(r)?;
    if elem != 4 && elem != 8 {
        return Err(ModelError::Checkpoint(format!("unsupported element size {elem}")));
    }
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = get_u32(r)?;
    }
    let config = ModelConfig {
        n_layers: fields[0],
        d_model: fields[1],
        n_heads: fields[2],
        d_mlp: fields[3],
        vocab_size: fields[4],
        max_seq_len: fields[5],
        attention: if fields[6] == 1 { AttentionMode::Bidirectional } else { AttentionMode::Causal },
        tie_embeddings: fields[7] == 1,
    };
    let mut params = init::<F>(&config, 0)?;
    let expected: Vec<(String, (usize, usize))> =
        params.tensors().into_iter().map(|(n, t)| (n, t.dim())).collect();
    let count = get_u32(r)?;
    if count != expected.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for ((name, dim), slot) in expected.into_iter().zip(params.tensors_mut()) {
        let len = get_u32(r)?;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let found = String::from_utf8(buf).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if found != name {
            return Err(ModelError::Checkpoint(format!("expected tensor {name}, found {found}")));
        }
        let (rows, cols) = (get_u32(r)?, get_u32(r)?);
        if (rows, cols) != dim {
            return Err(ModelError::Checkpoint(format!(
                "{name}: expected shape {dim:?}, found ({rows}, {cols})"
            )));
        }
        let mut data = vec![0u8; rows * cols * elem];
        r.read_exact(&mut data)?;
        let values: Vec<F> = data
            .chunks_exact(elem)
            .map(|c| {
                let x = if elem == 4 {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                };
                cast::<F>(x)
            })
            .collect();
        *slot = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_mlp: 8,
            vocab_size: 7,
            max_seq_len: 5,
            attention: AttentionMode::Bidirectional,
            tie_embeddings: false,
        }
    }

    #[test]
    fn save_load_preserves_params_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint { params: init::<f32>(&cfg(), 9).unwrap(), steps: 2, loss_log: vec![2.5, 1.25] };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_corrupted_header() {
        let mut bytes = Vec::new();
        write_params(&mut bytes, &init::<f32>(&cfg(), 0).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(read_params::<f32>(&mut bytes.as_slice()).is_err());
        let mut truncated = Vec::new();
        write_params(&mut truncated, &init::<f32>(&cfg(), 0).unwrap()).unwrap();
        truncated.truncate(truncated.len() - 3);
        assert!(read_params::<f32>(&mut truncated.as_slice()).is_err());
    }
}
