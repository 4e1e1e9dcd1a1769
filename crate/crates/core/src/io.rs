//! Checkpoint and dataset containers: a magic line, a one-line JSON
//! manifest, then a raw little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{to_byte, Dataset};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::vit::Image;

const CKPT_MAGIC: &str = "MAECT-CKPT 1";
const DATA_MAGIC: &str = "MAECT-DATA 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CkptManifest {
    stage: String,
    dtype: String,
    endianness: String,
    payload_bytes: usize,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Named `f64` tensors plus free-form provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub meta: serde_json::Value,
    pub tensors: Params,
}

fn split_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(&'a str, &'a [u8])> {
    let m = magic.as_bytes();
    if bytes.len() < m.len() + 1 || &bytes[..m.len()] != m || bytes[m.len()] != b'\n' {
        return Err(Error::Format(format!("missing `{magic}` header")));
    }
    let rest = &bytes[m.len() + 1..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("unterminated manifest line".into()))?;
    let header = std::str::from_utf8(&rest[..nl])
        .map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
    Ok((header, &rest[nl + 1..]))
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, meta: serde_json::Value, tensors: Params) -> Self {
        Checkpoint {
            stage: stage.into(),
            meta,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.tensors.numel() * 8);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = CkptManifest {
            stage: self.stage.clone(),
            dtype: "f64".into(),
            endianness: "little".into(),
            payload_bytes: payload.len(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mut out = format!("{CKPT_MAGIC}\n{}\n", serde_json::to_string(&manifest)?).into_bytes();
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(bytes, CKPT_MAGIC)?;
        let m: CkptManifest = serde_json::from_str(header)?;
        if m.dtype != "f64" || m.endianness != "little" {
            return Err(Error::Format(format!(
                "unsupported payload {} / {}",
                m.dtype, m.endianness
            )));
        }
        if payload.len() != m.payload_bytes {
            return Err(Error::Format(format!(
                "payload has {} bytes, manifest declares {}",
                payload.len(),
                m.payload_bytes
            )));
        }
        let mut tensors = Params::new();
        for e in m.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > payload.len() {
                return Err(Error::Format(format!(
                    "tensor `{}` overruns the payload",
                    e.name
                )));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(Checkpoint {
            stage: m.stage,
            meta: m.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub dtype: String,
    pub label_dtype: String,
    pub endianness: String,
}

impl DatasetHeader {
    pub fn payload_bytes(&self) -> usize {
        self.n * self.height * self.width * self.channels + self.n * 4
    }
}

/// Serialises a dataset; pixels are quantised to bytes.
pub fn dataset_to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let h = DatasetHeader {
        n: data.len(),
        height: data.image_size(),
        width: data.image_size(),
        channels: data.channels(),
        n_classes: data.n_classes,
        dtype: "u8".into(),
        label_dtype: "u32".into(),
        endianness: "little".into(),
    };
    let mut out = format!("{DATA_MAGIC}\n{}\n", serde_json::to_string(&h)?).into_bytes();
    out.reserve(h.payload_bytes());
    for img in &data.images {
        out.extend(img.data.iter().map(|v| to_byte(*v)));
    }
    for l in &data.labels {
        let l = u32::try_from(*l).map_err(|_| Error::Format("label exceeds u32".into()))?;
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<(DatasetHeader, Dataset)> {
    let (header, payload) = split_header(bytes, DATA_MAGIC)?;
    let h: DatasetHeader = serde_json::from_str(header)?;
    if h.dtype != "u8" || h.label_dtype != "u32" || h.endianness != "little" {
        return Err(Error::Format("unsupported dataset encoding".into()));
    }
    if h.height != h.width {
        return Err(Error::Format("only square images are supported".into()));
    }
    if payload.len() != h.payload_bytes() {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            h.payload_bytes()
        )));
    }
    let px = h.height * h.width * h.channels;
    let (pix, lab) = payload.split_at(h.n * px);
    let images = pix
        .chunks_exact(px)
        .map(|c| {
            Image::new(
                h.height,
                h.channels,
                c.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = lab
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let d = Dataset::new(images, labels, h.n_classes)?;
    Ok((h, d))
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_bytes(data)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(dataset_from_bytes(&fs::read(path)?)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = Params::new();
        p.insert(
            "a",
            Tensor::matrix(1, 3, vec![0.1, -0.0, f64::MIN_POSITIVE]).unwrap(),
        );
        p.insert("b.weight", Tensor::matrix(2, 1, vec![1e300, -3.5]).unwrap());
        let c = Checkpoint::new("pretrain", serde_json::json!({"mask_ratio": 0.75}), p);
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tensors.fingerprint(), c.tensors.fingerprint());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope\n{}\n").is_err());
    }

    #[test]
    fn dataset_payload_size() {
        let img = Image::filled(2, 3, 0.5);
        let d = Dataset::new(vec![img.clone(), img], vec![0, 1], 2).unwrap();
        let bytes = dataset_to_bytes(&d).unwrap();
        let (h, back) = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(h.payload_bytes(), 2 * 12 + 8);
        assert_eq!(back.labels, vec![0, 1]);
        assert_eq!(dataset_to_bytes(&back).unwrap(), bytes);
    }
}
