//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "LINEREC\0"
//! version    u32
//! dtype      u8       bytes per value (4 or 8)
//! blank      u32      blank class index (= charset length)
//! charset    u32 byte length, UTF-8, one character per line
//! config     u32 byte length, UTF-8 config echo
//! tensors    u32 count, then per tensor:
//!              u8 kind (0 parameter, 1 buffer), u32 name length, name,
//!              u32 rank, rank × u32 extents
//! payload    every tensor's values in table order
//! crc32      u32 over all preceding bytes
//! ```

use std::path::Path;

use crate::charset::CharSet;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Recognizer};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"LINEREC\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

/// Serialises `model` with its charset and the configuration echo `extra`
/// (model settings are always written into it).
pub fn to_bytes<T: Real>(
    model: &Recognizer<T>,
    charset: &CharSet,
    extra: &Config,
) -> Result<Vec<u8>> {
    if charset.classes() != model.classes {
        return Err(Error::Checkpoint(format!(
            "charset has {} classes but the model outputs {}",
            charset.classes(),
            model.classes
        )));
    }
    let mut echo = extra.clone();
    model.config.write_to(&mut echo);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::BYTES);
    put_u32(&mut out, charset.blank() as u32);
    put_bytes(&mut out, charset.to_text().as_bytes());
    put_bytes(&mut out, echo.to_text().as_bytes());
    let s = &model.store;
    let tensors: Vec<(u8, &String, &crate::Tensor<T>)> = s
        .param_names()
        .iter()
        .zip(s.params())
        .map(|(n, t)| (0u8, n, t))
        .chain(
            s.buffer_names()
                .iter()
                .zip(s.buffers())
                .map(|(n, t)| (1u8, n, t)),
        )
        .collect();
    put_u32(&mut out, tensors.len() as u32);
    for (kind, name, t) in &tensors {
        out.push(*kind);
        put_bytes(&mut out, name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
    }
    for (_, _, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn save<T: Real>(
    path: &Path,
    model: &Recognizer<T>,
    charset: &CharSet,
    extra: &Config,
) -> Result<()> {
    let bytes = to_bytes(model, charset, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 block".into()))
    }
}

/// A decoded checkpoint.
pub struct Loaded<T> {
    pub model: Recognizer<T>,
    pub charset: CharSet,
    pub config: Config,
}

/// Parses a checkpoint. With `expected` set, the stored charset must match
/// it exactly.
pub fn from_bytes<T: Real>(bytes: &[u8], expected: Option<&CharSet>) -> Result<Loaded<T>> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint(
            "checksum mismatch; file is corrupt or was modified".into(),
        ));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let dtype = r.u8()?;
    if dtype != 4 && dtype != 8 {
        return Err(Error::Checkpoint(format!("unknown value width {dtype}")));
    }
    let blank = r.u32()? as usize;
    let charset = CharSet::parse(&r.string()?)?;
    if charset.blank() != blank {
        return Err(Error::Checkpoint(format!(
            "blank index {blank} disagrees with a charset of {} characters",
            charset.len()
        )));
    }
    if let Some(exp) = expected {
        if exp != &charset {
            return Err(Error::Checkpoint(
                "charset mismatch: the checkpoint was trained on a different charset".into(),
            ));
        }
    }
    let config = Config::parse(&r.string()?)?;
    let mc = ModelConfig::from_config(&config)?;
    let mut model = Recognizer::<T>::new(mc, charset.classes(), 0)?;
    let count = r.u32()? as usize;
    let expected_count = model.store.len() + model.store.buffers().len();
    if count != expected_count {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture needs {expected_count}"
        )));
    }
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = r.u8()?;
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((kind, name, shape));
    }
    let n_params = model.store.len();
    for (i, (kind, name, shape)) in table.iter().enumerate() {
        let (want_kind, want_name, target) = if i < n_params {
            (
                0,
                model.store.param_names()[i].clone(),
                model.store.params()[i].shape().to_vec(),
            )
        } else {
            let j = i - n_params;
            (
                1,
                model.store.buffer_names()[j].clone(),
                model.store.buffers()[j].shape().to_vec(),
            )
        };
        if *kind != want_kind || *name != want_name || *shape != target {
            return Err(Error::Checkpoint(format!(
                "tensor {i} is {name} {shape:?}, architecture expects {want_name} {target:?}"
            )));
        }
    }
    let width = dtype as usize;
    let read_into = |r: &mut Reader<'_>, dst: &mut [T]| -> Result<()> {
        let raw = r.take(dst.len() * width)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(width)) {
            *d = if width == 4 {
                T::lit(f32::read_le(chunk) as f64)
            } else {
                T::lit(f64::read_le(chunk))
            };
        }
        Ok(())
    };
    for p in model.store.params_mut() {
        read_into(&mut r, p.data_mut())?;
    }
    for b in model.store.buffers_mut() {
        read_into(&mut r, b.data_mut())?;
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Loaded {
        model,
        charset,
        config,
    })
}

pub fn load<T: Real>(path: &Path, expected: Option<&CharSet>) -> Result<Loaded<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}
