//! Little-endian tensor container used for checkpoints, datasets and probe
//! images.
//!
//! Layout: magic `WPCK`, `u32` version (1), `u32` entry count, then per
//! entry a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32`
//! dimensions and the raw `f32` data.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WPCK";
pub const VERSION: u32 = 1;

/// Serializes named tensors.
pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Input(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Input(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension too large for {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a container into its named tensors, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected WPCK".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: start + 2, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data_at = r.pos as u64;
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format { offset: data_at, msg: e.to_string() })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes after last entry".into() });
    }
    Ok(out)
}

pub fn write_file<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Writes every tensor of the model, buffers included.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    write_file(path, model.params().iter().map(|(n, t, _)| (n, t)))
}

/// Loads a checkpoint into `model`, requiring identical names and shapes.
pub fn load_model(model: &mut Model, path: &Path) -> Result<()> {
    let entries = read_file(path)?;
    apply_entries(model, entries)
}

pub fn apply_entries(model: &mut Model, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mismatch = |why: String| Error::Input(format!("checkpoint incompatible with {}: {why}", model.describe()));
    if entries.len() != model.params().len() {
        return Err(mismatch(format!("{} tensors, expected {}", entries.len(), model.params().len())));
    }
    let mut params = model.params().clone();
    for (id, (name, t)) in entries.into_iter().enumerate() {
        let expected = params.name(id);
        if name != expected {
            return Err(mismatch(format!("tensor {id} is {name:?}, expected {expected:?}")));
        }
        if t.shape() != params.by_id(id).shape() {
            return Err(mismatch(format!("{name} has shape {:?}, expected {:?}", t.shape(), params.by_id(id).shape())));
        }
        *params.by_id_mut(id) = t;
    }
    model.load_params(params)
}
