//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `FRUCKPT\0`, u32 version, u32 embedding
//! size, u32 item count, u32 number of layer dims followed by the dims
//! (`[2e, d1, ..., dk]` for NCF, none for LightGCN), then row-major f32
//! tensors: item table, each layer's weight and bias, output vector.
//!
//! User tables use magic `FRUUSER\0`, u32 version, u32 embedding size,
//! u32 user count, then the row-major f32 table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::params::{DenseLayer, DenseWeights, GlobalParameters};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRUCKPT\0";
pub const USERS_MAGIC: &[u8; 8] = b"FRUUSER\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {}",
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

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode(params: &GlobalParameters) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(32 + 4 * (params.item_embeddings.len() + params.dense.param_count()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, params.embedding_size() as u32);
    put_u32(&mut out, params.item_count() as u32);
    let dims = params.dense.layer_dims();
    put_u32(&mut out, dims.len() as u32);
    for d in &dims {
        put_u32(&mut out, *d as u32);
    }
    put_f32s(&mut out, params.item_embeddings.iter());
    for t in params.dense.tensors() {
        if dims.is_empty() {
            break;
        }
        put_f32s(&mut out, t.iter());
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<GlobalParameters> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let e = c.u32()? as usize;
    let items = c.u32()? as usize;
    let ndims = c.u32()? as usize;
    let dims: Vec<usize> = (0..ndims)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<_>>()?;
    let item_embeddings = Array2::from_shape_vec((items, e), c.f32s(items * e)?)
        .map_err(|err| Error::Format(err.to_string()))?;
    let dense = if dims.is_empty() {
        DenseWeights::empty()
    } else {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let weight = Array2::from_shape_vec((w[0], w[1]), c.f32s(w[0] * w[1])?)
                .map_err(|err| Error::Format(err.to_string()))?;
            let bias = Array1::from_vec(c.f32s(w[1])?);
            layers.push(DenseLayer { weight, bias });
        }
        let output = Array1::from_vec(c.f32s(*dims.last().unwrap())?);
        DenseWeights { layers, output }
    };
    if c.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - c.pos
        )));
    }
    Ok(GlobalParameters {
        item_embeddings,
        dense,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn save(params: &GlobalParameters, path: &Path) -> Result<()> {
    write_file(path, &encode(params))
}

pub fn load(path: &Path) -> Result<GlobalParameters> {
    decode(&read_file(path)?)
}

pub fn encode_users(users: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * users.len());
    out.extend_from_slice(USERS_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, users.ncols() as u32);
    put_u32(&mut out, users.nrows() as u32);
    put_f32s(&mut out, users.iter());
    out
}

pub fn decode_users(buf: &[u8]) -> Result<Array2<f32>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != USERS_MAGIC {
        return Err(Error::Format("bad user table magic".into()));
    }
    if c.u32()? != VERSION {
        return Err(Error::Format("unsupported user table version".into()));
    }
    let e = c.u32()? as usize;
    let n = c.u32()? as usize;
    Array2::from_shape_vec((n, e), c.f32s(n * e)?).map_err(|err| Error::Format(err.to_string()))
}

pub fn save_users(users: &Array2<f32>, path: &Path) -> Result<()> {
    write_file(path, &encode_users(users))
}

pub fn load_users(path: &Path) -> Result<Array2<f32>> {
    decode_users(&read_file(path)?)
}
