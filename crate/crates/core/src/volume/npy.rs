//! Minimal NPY v1.0 reader/writer for C-order little-endian arrays of
//! `float32`, `float64` or `uint8`.
//!
//! Values are carried as `f64` in memory alongside their on-disk dtype, so a
//! read followed by a write reproduces the original payload byte for byte.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::U8 => "|u1",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(DType::F32),
            "<f8" => Ok(DType::F64),
            "|u1" | "<u1" => Ok(DType::U8),
            other => Err(Error::Format(format!("unsupported dtype '{other}'"))),
        }
    }
}

/// An n-dimensional array as stored in an NPY file.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(NpyArray { shape, dtype, data })
    }
}

pub fn encode(array: &NpyArray) -> Result<Vec<u8>> {
    let shape = match array.shape.len() {
        1 => format!("({},)", array.shape[0]),
        _ => {
            let parts: Vec<String> = array.shape.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        array.dtype.descr(),
        shape
    );
    // magic(6) + version(2) + header_len(2) + header + '\n' aligned to 64.
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    let padding = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    header.push_str(&" ".repeat(padding));
    header.push('\n');
    let header_len = u16::try_from(header.len())
        .map_err(|_| Error::Format("header longer than 65535 bytes".into()))?;

    let mut out = Vec::with_capacity(unpadded + padding + array.data.len() * array.dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match array.dtype {
        DType::F64 => {
            for &v in &array.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in &array.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::U8 => {
            for &v in &array.data {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Format(format!("value {v} is not representable as uint8")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes an NPY byte stream. A payload shorter than the header promises is
/// reported as an I/O error (`UnexpectedEof`) against `origin`.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(Error::Format(format!(
            "unsupported NPY version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(truncated(origin));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let (dtype, fortran, shape) = parse_header(header)?;
    if fortran {
        return Err(Error::Format("Fortran-order arrays are not supported".into()));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[data_start..];
    if payload.len() < count * dtype.size() {
        return Err(truncated(origin));
    }
    let data = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .take(count)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .take(count)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::U8 => payload[..count].iter().map(|&b| b as f64).collect(),
    };
    Ok(NpyArray { shape, dtype, data })
}

fn truncated(origin: &Path) -> Error {
    Error::io(
        origin,
        io::Error::new(io::ErrorKind::UnexpectedEof, "truncated NPY payload"),
    )
}

fn parse_header(header: &str) -> Result<(DType, bool, Vec<usize>)> {
    let descr = dict_value(header, "descr")?;
    let descr = descr.trim().trim_matches(|c| c == '\'' || c == '"');
    let dtype = DType::from_descr(descr)?;

    let fortran = match dict_value(header, "fortran_order")?.trim() {
        "False" => false,
        "True" => true,
        other => return Err(Error::Format(format!("bad fortran_order '{other}'"))),
    };

    let shape_src = dict_value(header, "shape")?;
    let inner = shape_src
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format(format!("bad shape '{shape_src}'")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, fortran, shape))
}

/// Returns the raw source text of a value in the header dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pattern = format!("'{key}'");
    let start = header
        .find(&pattern)
        .ok_or_else(|| Error::Format(format!("header lacks '{key}'")))?;
    let rest = header[start + pattern.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Format(format!("malformed entry for '{key}'")))?;
    let mut depth = 0usize;
    for (i, ch) in rest.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' | '}' if depth == 0 => return Ok(&rest[..i]),
            _ => {}
        }
    }
    Err(Error::Format(format!("unterminated entry for '{key}'")))
}

pub fn read(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes through a sibling temporary file and renames it into place, so
/// readers never observe a partially written array.
pub fn write(array: &NpyArray, path: &Path) -> Result<()> {
    let bytes = encode(array)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
