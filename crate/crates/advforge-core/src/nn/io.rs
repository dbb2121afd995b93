//! Model persistence.
//!
//! Layout: `b"ADVF"`, a little-endian `u32` format version, a length-prefixed
//! JSON header (`{"config": …, "rng_seed": …}`), then each parameter tensor
//! in declaration order as a little-endian `u64` element count followed by
//! raw little-endian `f64` bits. Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::config::ModelConfig;
use crate::nn::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ADVF";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    rng_seed: u64,
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        rng_seed: model.rng_seed,
    })
    .expect("model header serializes");
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header).map_err(io_err)?;
    for p in model.params() {
        w.write_all(&(p.len() as u64).to_le_bytes()).map_err(io_err)?;
        for v in p.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);
    let bad = |msg: &str| Error::DataFormat(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("not a model file (bad magic)"));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(io_err)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(io_err)?;
    let hlen = u64::from_le_bytes(l8) as usize;
    if hlen > 1 << 20 {
        return Err(bad("implausible header length"));
    }
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| bad(&format!("bad header JSON: {e}")))?;

    // Infer tensor shapes the same way construction does, then overwrite
    // the freshly initialized values with the stored ones.
    let skeleton = Model::new(header.config.clone(), header.rng_seed)?;
    let mut params = Vec::with_capacity(skeleton.params().len());
    for want in skeleton.params() {
        r.read_exact(&mut l8).map_err(io_err)?;
        let n = u64::from_le_bytes(l8) as usize;
        if n != want.len() {
            return Err(bad(&format!(
                "parameter length {n} does not match architecture ({})",
                want.len()
            )));
        }
        let mut data = vec![0.0f64; n];
        let mut b8 = [0u8; 8];
        for slot in &mut data {
            r.read_exact(&mut b8).map_err(io_err)?;
            *slot = f64::from_le_bytes(b8);
        }
        params.push(Tensor::from_vec(want.shape().to_vec(), data).unwrap());
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(bad("trailing bytes after final parameter"));
    }
    Model::from_parts(header.config, header.rng_seed, params)
}
