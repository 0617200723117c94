//! Binary tensor files, PGM images and checkpoint containers.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::GrayImage;

const TENSOR_MAGIC: &[u8; 4] = b"STPF";
const TENSOR_VERSION: u8 = 1;
const CHECKPOINT_MAGIC: &str = "STPF-CHECKPOINT 1";

/// Dense f32 tensor, row-major with the innermost dimension last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|d| *d > u32::MAX as usize) {
            return Err(Error::Dimension(format!(
                "tensor dims {dims:?} not representable"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(TENSOR_VERSION);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::Format("not a tensor file (bad magic)".into()));
        }
        if bytes[4] != TENSOR_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor version {}",
                bytes[4]
            )));
        }
        let rank = bytes[5] as usize;
        let head = 6 + 4 * rank;
        if bytes.len() < head {
            return Err(Error::Format("truncated tensor header".into()));
        }
        let dims: Vec<usize> = bytes[6..head]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let payload = &bytes[head..];
        if n.checked_mul(4) != Some(payload.len()) {
            return Err(Error::Format(format!(
                "tensor payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                n.saturating_mul(4)
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Binary (P5) 8-bit PGM.
pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, pgm_bytes(img))?;
    Ok(())
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!(
            "unsupported PGM magic {:?}",
            fields[0]
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!(
            "only 8-bit PGM supported (maxval {maxval})"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(Error::Format(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            w * h
        )));
    }
    Ok(GrayImage::from_u8(w, h, raster))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    parse_pgm(&std::fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Named tensors plus string metadata in one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta_value<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint has no field {key:?}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint field {key} = {raw:?} is malformed")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{CHECKPOINT_MAGIC}\n");
        for (k, v) in &self.meta {
            head.push_str(&format!("{k} {v}\n"));
        }
        head.push_str(&format!("tensors {}\nend\n", self.tensors.len()));
        let mut out = head.into_bytes();
        for (name, t) in &self.tensors {
            let b = t.to_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend(b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
            let s = String::from_utf8_lossy(&bytes[pos..pos + end]).into_owned();
            pos += end + 1;
            Ok(s)
        };
        if line()? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut meta = BTreeMap::new();
        let mut count = None;
        loop {
            let l = line()?;
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once(' ').unwrap_or((l.as_str(), ""));
            if k == "tensors" {
                count = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad tensor count {v:?}")))?,
                );
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let count =
            count.ok_or_else(|| Error::Format("checkpoint header lacks a tensor count".into()))?;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::Format("truncated checkpoint body".into()))?;
            *pos += n;
            Ok(s)
        };
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let blen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            tensors.push((name, Tensor::from_bytes(take(&mut pos, blen)?)?));
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint body".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
