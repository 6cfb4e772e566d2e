//! Row-major tensors, the `MTENSOR` container, and PPM frame I/O.
//!
//! An `MTENSOR` file is laid out as
//!
//! ```text
//! "MTENSOR\0"            8 bytes
//! header_len             u32, little endian
//! {"dtype":..,"shape":..} UTF-8 JSON, space padded so the payload starts on a 64-byte boundary
//! payload                row-major, little endian
//! ```
//!
//! `header_len` counts the JSON text together with its padding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};

pub const MAGIC: &[u8; 8] = b"MTENSOR\0";
const ALIGN: usize = 64;
const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::F32 => "f32",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }
}

/// A shaped, row-major buffer of `u8` or `f32` scalars with rank 1 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("rank must be between 1 and {MAX_RANK}"),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "dims must be positive".into() });
    }
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::InvalidShape {
        shape: shape.to_vec(),
        reason: "element count overflows".into(),
    })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = check_shape(&shape)?;
        if data.len() != n {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("shape holds {n} elements but buffer has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        let data = match dtype {
            DType::U8 => TensorData::U8(vec![0; n]),
            DType::F32 => TensorData::F32(vec![0.0; n]),
        };
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::U8(_) => DType::U8,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::DtypeMismatch { expected: "u8", found: "f32" }),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::DtypeMismatch { expected: "f32", found: "u8" }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::DtypeMismatch { expected: "f32", found: "u8" }),
        }
    }

    /// Encodes the tensor as an `MTENSOR` byte stream.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header { dtype: self.dtype(), shape: self.shape.clone() })
            .expect("header serializes");
        let prefix = MAGIC.len() + 4;
        let padded = (prefix + header.len()).div_ceil(ALIGN) * ALIGN - prefix;
        let mut out = Vec::with_capacity(prefix + padded + self.len() * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(padded as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.resize(prefix + padded, b' ');
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes an `MTENSOR` byte stream.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 4 {
            return Err(Error::CorruptContainer("missing header length".into()));
        }
        let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() < header_len {
            return Err(Error::CorruptContainer(format!(
                "header declares {header_len} bytes but only {} remain",
                rest.len()
            )));
        }
        let text = std::str::from_utf8(&rest[..header_len])
            .map_err(|_| Error::CorruptContainer("header is not UTF-8".into()))?;
        let raw: RawHeader = serde_json::from_str(text)
            .map_err(|e| Error::CorruptContainer(format!("unreadable header: {e}")))?;
        let dtype = match raw.dtype.as_str() {
            "u8" => DType::U8,
            "f32" => DType::F32,
            other => return Err(Error::UnknownDtype(other.to_string())),
        };
        let count = check_shape(&raw.shape).map_err(|e| Error::CorruptContainer(e.to_string()))?;
        let payload = &rest[header_len..];
        let expected = count * dtype.size();
        if payload.len() != expected {
            return Err(Error::CorruptContainer(format!(
                "shape {:?} needs {expected} payload bytes, found {}",
                raw.shape,
                payload.len()
            )));
        }
        let data = match dtype {
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Tensor { shape: raw.shape, data })
    }
}

#[derive(Serialize)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Deserialize)]
struct RawHeader {
    dtype: String,
    shape: Vec<usize>,
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).in_file(path)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).in_file(path)?;
    Tensor::from_bytes(&bytes).in_file(path)
}

/// An interleaved 8-bit RGB raster together with its position in the video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub frame_index: u64,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, frame_index: u64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("frame size {width}x{height} is empty")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} RGB frame needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(ImageFrame { width, height, pixels, frame_index })
    }

    /// A frame filled with one colour.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3], frame_index: u64) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self::new(width, height, pixels, frame_index)
    }

    pub fn same_size(&self, other: &ImageFrame) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Converts to a planar `[3, H, W]` u8 tensor (R, G, B planes in order).
    pub fn to_planar(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0u8; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            data[i] = px[0];
            data[plane + i] = px[1];
            data[2 * plane + i] = px[2];
        }
        Tensor::from_u8(vec![3, self.height, self.width], data).expect("planar shape is valid")
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn to_planar(frame: &ImageFrame) -> Tensor {
    frame.to_planar()
}

/// Frame number taken from the last run of decimal digits in the file stem.
pub fn frame_index_from_path(path: &Path) -> Result<u64> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let end = stem.rfind(|c: char| c.is_ascii_digit()).map(|i| i + 1);
    let digits = end.map(|end| {
        let start = stem[..end].rfind(|c: char| !c.is_ascii_digit()).map_or(0, |i| i + 1);
        &stem[start..end]
    });
    digits
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| Error::NonNumericStem(stem.to_string()))
}

/// Decodes a binary P6 PPM into `(width, height, pixels)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::MalformedHeader("missing P magic".into()));
    }
    if bytes[1] != b'6' {
        return Err(Error::UnsupportedFormat(String::from_utf8_lossy(&bytes[..2]).into_owned()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader(format!("expected numeric header field {}", i + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::MalformedHeader("header field out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::MalformedHeader("missing whitespace after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = 3 * width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated { expected, found: payload.len() });
    }
    Ok((width, height, payload[..expected].to_vec()))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageFrame> {
    let path = path.as_ref();
    let bytes = fs::read(path).in_file(path)?;
    let (width, height, pixels) = decode_ppm(&bytes).in_file(path)?;
    let index = frame_index_from_path(path).in_file(path)?;
    ImageFrame::new(width, height, pixels, index).in_file(path)
}

pub fn write_ppm(frame: &ImageFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, frame.to_ppm_bytes()).in_file(path)
}
