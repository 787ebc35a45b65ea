//! Checkpoint container, all integers and floats little-endian:
//!
//! ```text
//! magic "XKWS" | version u32
//! n_constants u32 | { name_len u32, name utf-8, value f64 } ...
//! seed u64
//! n_params u32 | { name_len u32, name utf-8, requires_grad u8, ndims u32, dims u32..., values f64... } ...
//! ```
//!
//! Parameters appear in registration order. Optimizer moments are not stored.

use std::path::Path;

use super::{KwsModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XKWS";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn encode(model: &KwsModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let constants = model.config.constants();
    put_u32(&mut out, constants.len());
    for (name, v) in constants {
        put_str(&mut out, name);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&model.seed.to_le_bytes());
    put_u32(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put_str(&mut out, &p.name);
        out.push(u8::from(p.requires_grad));
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &KwsModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::format(
                field,
                format!("truncated at byte {} of {}", self.pos, self.bytes.len()),
            )),
        }
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, field)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8, field)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)?;
        std::str::from_utf8(self.take(n, field)?)
            .map(str::to_string)
            .map_err(|e| Error::format(field, e.to_string()))
    }
}

struct Decoded {
    constants: Vec<(String, f64)>,
    seed: u64,
    params: Vec<(String, bool, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "expected XKWS"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(
            "version",
            format!("expected {CHECKPOINT_VERSION}, found {version}"),
        ));
    }
    let n_const = r.u32("constants")?;
    let mut constants = Vec::with_capacity(n_const.min(64));
    for _ in 0..n_const {
        let name = r.string("constant name")?;
        let v = r.f64("constant value")?;
        constants.push((name, v));
    }
    let seed = r.u64("seed")?;
    let n_params = r.u32("parameters")?;
    let mut params = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let name = r.string("parameter name")?;
        let requires_grad = match r.take(1, "requires_grad")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format("requires_grad", format!("{name}: byte {b}"))),
        };
        let ndims = r.u32("ndims")?;
        if ndims > 8 {
            return Err(Error::format("ndims", format!("{name}: {ndims}")));
        }
        let dims = (0..ndims)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format("dims", format!("{name}: {dims:?}")))?;
        let raw = r.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, requires_grad, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "values",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(Decoded {
        constants,
        seed,
        params,
    })
}

fn build(d: Decoded, config: ModelConfig) -> Result<KwsModel> {
    let mut model = KwsModel::new(config, d.seed)?;
    if d.params.len() != model.store.len() {
        return Err(Error::format(
            "parameters",
            format!("expected {}, found {}", model.store.len(), d.params.len()),
        ));
    }
    for (id, (name, requires_grad, value)) in model
        .store
        .ids()
        .collect::<Vec<_>>()
        .into_iter()
        .zip(d.params)
    {
        let p = model.store.get_mut(id);
        if p.name != name || p.value.shape() != value.shape() || p.requires_grad != requires_grad {
            return Err(Error::format(
                "parameters",
                format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.value.shape(),
                    value.shape()
                ),
            ));
        }
        p.value = value;
    }
    Ok(model)
}

pub(crate) fn decode_model(bytes: &[u8]) -> Result<KwsModel> {
    let d = decode(bytes)?;
    let config = ModelConfig::from_constants(&d.constants)?;
    build(d, config)
}

/// Restores a model with the architecture recorded in the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<KwsModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::Format {
            field,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// Restores a model whose architecture must equal `expected`; the first differing constant is
/// reported as a validation error.
pub fn load_checkpoint_into(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<KwsModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode(&bytes)?;
    for (name, want) in expected.constants() {
        match d.constants.iter().find(|(n, _)| n == name) {
            Some((_, got)) if got.to_bits() == want.to_bits() => {}
            Some((_, got)) => return Err(Error::validation(name, want, got)),
            None => return Err(Error::format("constants", format!("missing `{name}`"))),
        }
    }
    build(d, expected.clone())
}
