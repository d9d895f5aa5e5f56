//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "RESITER\0"
//! version      u32
//! header_len   u64
//! header       header_len bytes of JSON (CheckpointHeader)
//! array_count  u64
//! per array, in parameter registry order:
//!   name_len u32, name (UTF-8), kind u8, ndim u32, dims u64 × ndim,
//!   values f64 × product(dims)
//! ```
//!
//! Loading rebuilds the network from the header and then requires every array
//! to match the rebuilt registry by position, name, kind and shape.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::config::ArchitectureConfig;
use crate::nn::model::Model;
use crate::nn::params::ParamKind;
use crate::share_unroll::SharingSpec;
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 8] = b"RESITER\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub architecture: ArchitectureConfig,
    pub sharing: Option<SharingSpec>,
    pub seed: u64,
    pub epoch: usize,
}

pub fn to_bytes(model: &Model, epoch: usize) -> Result<Vec<u8>> {
    if model.unrolled_steps() > 0 {
        return Err(Error::InvalidArgument(
            "unrolled models are evaluation-time views; checkpoint the base model instead".into(),
        ));
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        architecture: model.config().clone(),
        sharing: model.sharing().cloned(),
        seed: model.seed(),
        epoch,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(64 + json.len() + 8 * model.params().snapshot().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (_, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.kind.code());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            format: "checkpoint",
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.fail(format!("{what} {v} overflows")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(Model, CheckpointHeader)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let hlen = r.len("header length")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)?;
    let mut model = Model::build(&header.architecture, header.sharing.as_ref(), header.seed)?;
    let count = r.len("array count")?;
    if count != model.params().len() {
        return Err(r.fail(format!(
            "{count} arrays, architecture defines {}",
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let start = r.pos;
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?).map_err(|_| r.fail("name is not UTF-8"))?;
        let kind_code = r.take(1, "kind")?[0];
        let kind = ParamKind::from_code(kind_code).ok_or_else(|| r.fail(format!("unknown kind {kind_code}")))?;
        let ndim = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.len("dimension")?);
        }
        let expected = model.params().get(id);
        if name != expected.name || kind != expected.kind || dims != expected.value.shape() {
            r.pos = start;
            return Err(r.fail(format!(
                "array `{name}` {kind:?} {dims:?} where `{}` {:?} {:?} was expected",
                expected.name,
                expected.kind,
                expected.value.shape()
            )));
        }
        let n = expected.value.len();
        let raw = r.take(8 * n, "values")?;
        let dst = model.params_mut().value_mut(id).data_mut();
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real;
        }
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((model, header))
}

pub fn save_checkpoint(model: &Model, epoch: usize, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, epoch)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::Family;
    use crate::nn::model::build_model;

    fn model() -> Model {
        let mut c = ArchitectureConfig::desk(Family::Original);
        c.input_shape = [1, 4, 4];
        for s in &mut c.stages {
            s.blocks = 1;
        }
        build_model(&c, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        let id = m.params().find("head.bn.running_var").unwrap();
        m.params_mut().value_mut(id).data_mut()[0] = 0.1 + 0.2;
        let bytes = to_bytes(&m, 7).unwrap();
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(header.epoch, 7);
        let bits = |m: &Model| m.params().snapshot().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
        assert_eq!(to_bytes(&back, 7).unwrap(), bytes);
    }

    #[test]
    fn corruption_reports_offset() {
        let bytes = to_bytes(&model(), 0).unwrap();
        match from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
