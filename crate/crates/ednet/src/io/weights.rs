//! Binary weight container. Little-endian throughout:
//!
//! ```text
//! magic "EDNW" | version u32 | entry_count u32
//! entry: name_len u16 | name utf8 | dtype u8 | ndim u8 | dims u32 x ndim
//!        | payload | qflag u8 [| zero_point i32 | nscales u32 | scales f32 x n]
//! ```
//!
//! dtype 0 = f32, 1 = i8, 2 = binary16 (stored as u16 bits). Read errors
//! report the byte offset where parsing failed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::blocks::WeightMap;
use crate::error::{Error, Result};
use crate::quant::{f16_bits_to_f32, f32_to_f16_bits, QuantParams, QuantSite, QuantWeight, QuantizedModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EDNW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
    F16(Vec<u16>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
            Payload::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::I8(_) => 1,
            Payload::F16(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QRecord {
    pub zero_point: i32,
    pub scales: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Payload,
    pub qparams: Option<QRecord>,
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(i32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.take(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn write_entries<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        if e.name.len() > u16::MAX as usize {
            return Err(Error::InvalidArg(format!("entry name too long: {}", e.name.len())));
        }
        let elems: u64 = e.dims.iter().map(|&d| d as u64).product();
        if elems != e.payload.len() as u64 {
            return Err(Error::InvalidArg(format!(
                "entry '{}': dims {:?} imply {elems} elements, payload has {}",
                e.name,
                e.dims,
                e.payload.len()
            )));
        }
        w.write_all(&(e.name.len() as u16).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.payload.dtype(), e.dims.len() as u8])?;
        for d in &e.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        match &e.payload {
            Payload::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::I8(v) => {
                let bytes: Vec<u8> = v.iter().map(|&x| x as u8).collect();
                w.write_all(&bytes)?;
            }
            Payload::F16(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        match &e.qparams {
            None => w.write_all(&[0u8])?,
            Some(q) => {
                w.write_all(&[1u8])?;
                w.write_all(&q.zero_point.to_le_bytes())?;
                w.write_all(&(q.scales.len() as u32).to_le_bytes())?;
                for s in &q.scales {
                    w.write_all(&s.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_entries<R: Read>(r: R) -> Result<Vec<Entry>> {
    let mut r = OffsetReader { inner: r, offset: 0 };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}, expected \"EDNW\"") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        let name_at = r.offset;
        r.take(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|e| Error::Format {
            offset: name_at,
            msg: format!("entry {i}: name is not utf-8: {e}"),
        })?;
        let dtype_at = r.offset;
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dim")?);
        }
        let elems: u64 = dims.iter().map(|&d| d as u64).product();
        if elems > u32::MAX as u64 {
            return Err(Error::Format {
                offset: dtype_at,
                msg: format!("entry '{name}': element count {elems} is implausible"),
            });
        }
        let n = elems as usize;
        let payload = match dtype {
            0 => Payload::F32(r.f32s(n, "f32 payload")?),
            1 => {
                let mut bytes = vec![0u8; n];
                r.take(&mut bytes, "i8 payload")?;
                Payload::I8(bytes.iter().map(|&b| b as i8).collect())
            }
            2 => {
                let mut bytes = vec![0u8; n * 2];
                r.take(&mut bytes, "f16 payload")?;
                Payload::F16(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
            }
            other => {
                return Err(Error::Format {
                    offset: dtype_at,
                    msg: format!("entry '{name}': unknown dtype {other}"),
                })
            }
        };
        let qflag_at = r.offset;
        let qparams = match r.u8("qparams flag")? {
            0 => None,
            1 => {
                let zero_point = r.i32("zero point")?;
                let nscales = r.u32("scale count")? as usize;
                Some(QRecord { zero_point, scales: r.f32s(nscales, "scales")? })
            }
            other => {
                return Err(Error::Format {
                    offset: qflag_at,
                    msg: format!("entry '{name}': invalid qparams flag {other}"),
                })
            }
        };
        entries.push(Entry { name, dims, payload, qparams });
    }
    Ok(entries)
}

fn tensor_entry(name: &str, t: &Tensor, half: bool) -> Entry {
    let (n, c, h, w) = t.shape();
    let payload = if half {
        Payload::F16(t.data().iter().map(|&v| f32_to_f16_bits(v)).collect())
    } else {
        Payload::F32(t.data().to_vec())
    };
    Entry {
        name: name.to_string(),
        dims: vec![n as u32, c as u32, h as u32, w as u32],
        payload,
        qparams: None,
    }
}

fn entry_tensor(e: &Entry) -> Result<Tensor> {
    if e.dims.len() != 4 {
        return Err(Error::Schema(format!(
            "entry '{}' has {} dims, expected 4",
            e.name,
            e.dims.len()
        )));
    }
    let data: Vec<f32> = match &e.payload {
        Payload::F32(v) => v.clone(),
        Payload::F16(v) => v.iter().map(|&b| f16_bits_to_f32(b)).collect(),
        Payload::I8(_) => {
            return Err(Error::Schema(format!(
                "entry '{}' is int8; expected a float weight file",
                e.name
            )))
        }
    };
    Tensor::new(e.dims[0] as usize, e.dims[1] as usize, e.dims[2] as usize, e.dims[3] as usize, data)
}

/// Serializes a float weight map; `half` stores binary16 payloads.
pub fn save_weights(path: &Path, map: &WeightMap, half: bool) -> Result<()> {
    let entries: Vec<Entry> = map.iter().map(|(k, t)| tensor_entry(k, t, half)).collect();
    let file = std::fs::File::create(path)?;
    write_entries(std::io::BufWriter::new(file), &entries)
}

pub fn load_weights(path: &Path) -> Result<WeightMap> {
    let file = std::fs::File::open(path)?;
    let entries = read_entries(std::io::BufReader::new(file))?;
    let mut map = WeightMap::new();
    for e in &entries {
        map.insert(e.name.clone(), entry_tensor(e)?);
    }
    Ok(map)
}

/// Serializes a quantized model: per site an i8 weight entry carrying the
/// per-channel scales, a float bias, and two-element qin/qout records.
pub fn save_quantized(path: &Path, model: &QuantizedModel) -> Result<()> {
    let mut entries = Vec::new();
    for (site, s) in &model.sites {
        let (oc, cg, kh, kw) = s.weight.shape;
        entries.push(Entry {
            name: format!("{site}.weight"),
            dims: vec![oc as u32, cg as u32, kh as u32, kw as u32],
            payload: Payload::I8(s.weight.data.clone()),
            qparams: Some(QRecord { zero_point: 0, scales: s.weight.scales.clone() }),
        });
        entries.push(Entry {
            name: format!("{site}.bias"),
            dims: vec![s.bias.len() as u32],
            payload: Payload::F32(s.bias.clone()),
            qparams: None,
        });
        for (suffix, qp) in [("qin", s.qin), ("qout", s.qout)] {
            entries.push(Entry {
                name: format!("{site}.{suffix}"),
                dims: vec![2],
                payload: Payload::F32(vec![qp.scale, qp.zero_point as f32]),
                qparams: None,
            });
        }
    }
    let file = std::fs::File::create(path)?;
    write_entries(std::io::BufWriter::new(file), &entries)
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    let file = std::fs::File::open(path)?;
    let entries = read_entries(std::io::BufReader::new(file))?;
    let by_name: BTreeMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut model = QuantizedModel::default();
    for e in &entries {
        let Some(site) = e.name.strip_suffix(".weight") else { continue };
        let Payload::I8(data) = &e.payload else {
            return Err(Error::Schema(format!("quantized weight '{}' is not int8", e.name)));
        };
        if e.dims.len() != 4 {
            return Err(Error::Schema(format!("quantized weight '{}' is not 4-d", e.name)));
        }
        let q = e
            .qparams
            .as_ref()
            .ok_or_else(|| Error::Schema(format!("quantized weight '{}' is missing scales", e.name)))?;
        let shape = (e.dims[0] as usize, e.dims[1] as usize, e.dims[2] as usize, e.dims[3] as usize);
        if q.scales.len() != shape.0 {
            return Err(Error::Schema(format!(
                "quantized weight '{}': {} scales for {} output channels",
                e.name,
                q.scales.len(),
                shape.0
            )));
        }
        let get = |suffix: &str| -> Result<&Entry> {
            by_name
                .get(format!("{site}.{suffix}").as_str())
                .copied()
                .ok_or_else(|| Error::Schema(format!("site '{site}' is missing {suffix}")))
        };
        let bias = match &get("bias")?.payload {
            Payload::F32(v) => v.clone(),
            _ => return Err(Error::Schema(format!("site '{site}': bias is not f32"))),
        };
        let qp = |e: &Entry| -> Result<QuantParams> {
            match &e.payload {
                Payload::F32(v) if v.len() == 2 => Ok(QuantParams { scale: v[0], zero_point: v[1] as i32 }),
                _ => Err(Error::Schema(format!("entry '{}' is not an f32[2] record", e.name))),
            }
        };
        model.sites.insert(
            site.to_string(),
            QuantSite {
                weight: QuantWeight { data: data.clone(), shape, scales: q.scales.clone() },
                bias,
                qin: qp(get("qin")?)?,
                qout: qp(get("qout")?)?,
            },
        );
    }
    if model.sites.is_empty() {
        return Err(Error::Schema("file contains no quantized sites".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, uniform_tensor};

    #[test]
    fn float_roundtrip_is_bit_exact() {
        let mut map = WeightMap::new();
        map.insert("a.weight".into(), uniform_tensor(&mut rng(1), 4, 3, 3, 3, 1.0));
        map.insert("a.bn.gamma".into(), uniform_tensor(&mut rng(2), 1, 1, 1, 4, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ednw");
        save_weights(&path, &map, false).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn f16_roundtrip_within_half_ulp() {
        let mut map = WeightMap::new();
        map.insert("w".into(), uniform_tensor(&mut rng(3), 2, 2, 3, 3, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w16.ednw");
        save_weights(&path, &map, true).unwrap();
        let back = load_weights(&path).unwrap();
        for (a, b) in map["w"].data().iter().zip(back["w"].data()) {
            assert!(((a - b) / a).abs() <= 1.0 / 2048.0);
        }
        // storing the loaded values again is lossless
        save_weights(&path, &back, true).unwrap();
        let twice = load_weights(&path).unwrap();
        assert_eq!(back, twice);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut map = WeightMap::new();
        map.insert("w".into(), uniform_tensor(&mut rng(4), 2, 2, 3, 3, 1.0));
        let mut buf = Vec::new();
        let entries: Vec<Entry> = map.iter().map(|(k, t)| tensor_entry(k, t, false)).collect();
        write_entries(&mut buf, &entries).unwrap();
        buf.truncate(buf.len() / 2);
        let err = read_entries(buf.as_slice()).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_entries(&b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn quantized_roundtrip() {
        use crate::quant::quantize_weight;
        let w = uniform_tensor(&mut rng(5), 4, 2, 3, 3, 0.3);
        let mut model = QuantizedModel::default();
        model.sites.insert(
            "b2.cv1".into(),
            QuantSite {
                weight: quantize_weight(&w),
                bias: vec![0.1, -0.2, 0.3, 0.0],
                qin: QuantParams { scale: 0.01, zero_point: 128 },
                qout: QuantParams { scale: 0.02, zero_point: 100 },
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ednw");
        save_quantized(&path, &model).unwrap();
        let back = load_quantized(&path).unwrap();
        let a = &model.sites["b2.cv1"];
        let b = &back.sites["b2.cv1"];
        assert_eq!(a.weight.data, b.weight.data);
        assert_eq!(a.weight.scales, b.weight.scales);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.qin, b.qin);
        assert_eq!(a.qout, b.qout);
    }
}
