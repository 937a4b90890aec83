//! `.pmtw` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PMTW"  u32 version (=1)  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f64 values
//! ```
//!
//! Model weights use names `layer{i}.weight` / `layer{i}.bias`; feature dumps
//! use arbitrary names.

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PMTW";
pub const VERSION: u32 = 1;

/// Encodes named tensors.
pub fn write_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decodes a tensor file into `(name, tensor)` pairs in file order.
pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "header").map_err(|_| Error::BadMagic { format: "PMTW" })? != MAGIC {
        return Err(Error::BadMagic { format: "PMTW" });
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("header")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let label = format!("tensor #{idx}");
        let len = u16::from_le_bytes(r.take(2, &label)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, &label)?)
            .map_err(|_| Error::WeightMismatch(format!("{label}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, &name)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Truncated(name.clone()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::WeightMismatch(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn serialize_weights(model: &Model) -> Vec<u8> {
    let named: Vec<(String, &Tensor)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().enumerate().map(move |(j, t)| (ModelSpec::param_name(i, j), t)))
        .collect();
    write_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// Rebuilds a model of architecture `spec` from `bytes`.
///
/// Tensors must appear in layer order with the expected names and shapes.
/// The provenance seed is not stored and is set to 0.
pub fn deserialize_weights(bytes: &[u8], spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let tensors = read_tensors(bytes)?;
    let expected: Vec<(usize, String, Vec<usize>)> = spec
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.param_shapes().into_iter().enumerate().map(move |(j, s)| (i, ModelSpec::param_name(i, j), s)))
        .collect();
    if tensors.len() != expected.len() {
        return Err(Error::WeightMismatch(format!("file holds {} tensors, model needs {}", tensors.len(), expected.len())));
    }
    let mut params: Vec<Vec<Tensor>> = vec![Vec::new(); spec.layers.len()];
    for ((name, t), (layer, want_name, want_shape)) in tensors.into_iter().zip(expected) {
        if name != want_name {
            return Err(Error::WeightMismatch(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        if t.shape() != want_shape.as_slice() {
            return Err(Error::WeightMismatch(format!("`{name}` has shape {:?}, expected {want_shape:?}", t.shape())));
        }
        params[layer].push(t);
    }
    Model::from_parts(spec.clone(), params, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::build(ModelSpec::toy_recognizer(Some(4)), 11).unwrap()
    }

    #[test]
    fn magic_prefix() {
        assert_eq!(&serialize_weights(&model())[..4], &[0x50, 0x4D, 0x54, 0x57]);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let back = deserialize_weights(&serialize_weights(&m), m.spec()).unwrap();
        assert_eq!(back, m);
        assert!(m.params().iter().flatten().zip(back.params().iter().flatten()).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn empty_model_is_header_only() {
        let m = Model::build(ModelSpec::new(vec![], vec![3]).unwrap(), 0).unwrap();
        let bytes = serialize_weights(&m);
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[8..12], &[0, 0, 0, 0]);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = serialize_weights(&model());
        bytes[0] = b'X';
        assert!(matches!(deserialize_weights(&bytes, model().spec()), Err(Error::BadMagic { .. })));
        assert!(matches!(read_tensors(b"PM"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = serialize_weights(&model());
        bytes[4] = 2;
        assert!(matches!(deserialize_weights(&bytes, model().spec()), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_names_tensor() {
        let bytes = serialize_weights(&model());
        // header (12) + name len (2) + "layer0.weight" (13) + rank (1) + 4 dims (16) + a few values
        let cut = &bytes[..12 + 2 + 13 + 1 + 16 + 40];
        match deserialize_weights(cut, model().spec()) {
            Err(Error::Truncated(what)) => assert_eq!(what, "layer0.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_and_name_mismatch() {
        let bytes = serialize_weights(&model());
        let other = ModelSpec::toy_alternate(Some(4));
        assert!(matches!(deserialize_weights(&bytes, &other), Err(Error::WeightMismatch(_))));
        let t = Tensor::zeros(&[2]);
        let bytes = write_tensors([("wrong", &t)]);
        let spec = ModelSpec::new(vec![crate::layers::LayerSpec::linear(1, 2)], vec![1]).unwrap();
        assert!(matches!(deserialize_weights(&bytes, &spec), Err(Error::WeightMismatch(_))));
    }
}
