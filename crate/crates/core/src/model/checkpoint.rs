//! Checkpoint files: a sectioned binary blob (parameters, batch-norm
//! buffers, and optional optimizer state) plus a human-readable JSON
//! sidecar describing the architecture, seed, iteration and normalization
//! constants. A load followed by a forward pass reproduces the saved
//! model's logits bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{read_tensors, write_tensors, Buffers, ParamStore, Scalar};

use super::{Model, SegConfig, NORM_MEAN, NORM_STD};

const MAGIC: &[u8; 4] = b"IHCK";
const VERSION: u32 = 1;

/// Sidecar metadata stored as `<checkpoint>.json` next to the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: SegConfig,
    pub seed: u64,
    pub iteration: u64,
    /// Element type of the stored tensors (0 = f32, 1 = f64).
    pub dtype: u8,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write the model (and any extra named sections, e.g. optimizer moments)
/// to `path`, with the JSON sidecar alongside.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    iteration: u64,
    extra_sections: &[(&str, Vec<u8>)],
) -> Result<()> {
    let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut params_bytes = Vec::new();
    write_tensors(&mut params_bytes, &model.params.to_map()).map_err(|e| Error::io(path, e))?;
    sections.push(("params", params_bytes));
    let mut buffer_bytes = Vec::new();
    write_tensors(&mut buffer_bytes, &model.buffers.to_map()).map_err(|e| Error::io(path, e))?;
    sections.push(("buffers", buffer_bytes));
    for (name, data) in extra_sections {
        if *name == "params" || *name == "buffers" {
            return Err(Error::validation(format!(
                "extra checkpoint section may not shadow built-in section {name:?}"
            )));
        }
        sections.push((name, data.clone()));
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(sections.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, data) in &sections {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(data).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let meta = CheckpointMeta {
        config: model.config.clone(),
        seed: model.seed,
        iteration,
        dtype: S::DTYPE,
        norm_mean: NORM_MEAN,
        norm_std: NORM_STD,
    };
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&sidecar, e))?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

/// Read back a checkpoint written by [`save_checkpoint`]. Returns the model,
/// its sidecar metadata, and any extra sections keyed by name.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(Model<S>, CheckpointMeta, BTreeMap<String, Vec<u8>>)> {
    let sidecar = sidecar_path(path);
    let meta_text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::json(&sidecar, e))?;
    if meta.dtype != S::DTYPE {
        return Err(Error::validation(format!(
            "checkpoint holds dtype {} tensors but dtype {} was requested",
            meta.dtype,
            S::DTYPE
        )));
    }
    if meta.norm_mean != NORM_MEAN || meta.norm_std != NORM_STD {
        return Err(Error::validation(
            "checkpoint normalization constants do not match this build",
        ));
    }

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::validation(format!("checkpoint {}: {msg}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut sections: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad("section name is not utf-8".into()))?;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        let data_len = u64::from_le_bytes(u64buf) as usize;
        let mut data = vec![0u8; data_len];
        r.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
        if sections.insert(name.clone(), data).is_some() {
            return Err(bad(format!("duplicate section {name:?}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after final section".into()));
    }

    let params_bytes = sections
        .remove("params")
        .ok_or_else(|| bad("missing params section".into()))?;
    let buffer_bytes = sections
        .remove("buffers")
        .ok_or_else(|| bad("missing buffers section".into()))?;
    let params = ParamStore::from_map(read_tensors(&mut params_bytes.as_slice())?);
    let buffers = Buffers::from_map(read_tensors(&mut buffer_bytes.as_slice())?);
    let model = Model::from_parts(meta.config.clone(), meta.seed, params, buffers)?;
    Ok((model, meta, sections))
}
