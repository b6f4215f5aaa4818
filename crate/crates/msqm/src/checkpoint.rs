//! Flat binary checkpoint format.
//!
//! Little-endian throughout: magic `MSQM`, format version u32, parameter
//! count u32; then per parameter: name length u32, UTF-8 name, rank u32, one
//! u32 extent per axis, then the f32 data. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"MSQM";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io)?;
    for (_, name, tensor) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())
            .map_err(io)?;
        for &e in tensor.shape() {
            w.write_all(&(e as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |message: String| Error::BadCheckpoint {
        path: path.to_path_buf(),
        message,
    };

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected \"MSQM\"")));
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, path)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| bad(format!("non-UTF-8 parameter name: {e}")))?;
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; n];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, path)?;
            *v = f32::from_le_bytes(b);
        }
        params.push((name, Tensor::new(&shape, data)));
    }
    Ok(params)
}

/// Load a checkpoint into an existing store. Every stored parameter must be
/// present in the file with a matching shape and vice versa.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let loaded = load(path)?;
    let bad = |message: String| Error::BadCheckpoint {
        path: path.to_path_buf(),
        message,
    };
    if loaded.len() != store.len() {
        return Err(bad(format!(
            "parameter count {} does not match model ({}); wrong --mode or config?",
            loaded.len(),
            store.len()
        )));
    }
    for (name, tensor) in loaded {
        let id = store
            .id_by_name(&name)
            .ok_or_else(|| bad(format!("parameter {name} not present in model")))?;
        if store.get(id).shape() != tensor.shape() {
            return Err(bad(format!(
                "parameter {name}: shape {:?} in file, {:?} in model",
                tensor.shape(),
                store.get(id).shape()
            )));
        }
        let dst = store.get_mut(id);
        dst.data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}
