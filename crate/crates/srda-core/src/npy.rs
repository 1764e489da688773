//! Minimal NPY (version 1.0) reader/writer for the two dtypes the dataset
//! format needs: little-endian float32 images and uint8 masks, C-ordered,
//! 3-dimensional.

use std::io::Write;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Result, SrdaError};
use crate::fsprobe;

const MAGIC: &[u8] = b"\x93NUMPY\x01\x00";

fn header_for(descr: &str, shape: &[usize]) -> Vec<u8> {
    let dims = shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let shape_str = if shape.len() == 1 {
        format!("({dims},)")
    } else {
        format!("({dims})")
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    // Pad so magic + length field + header is a multiple of 64, newline-terminated.
    let unpadded = MAGIC.len() + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat(' ').take(pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 2 + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

pub fn write_f32_3d(path: &Path, data: &Array3<f64>) -> Result<()> {
    let (d, h, w) = data.dim();
    let mut file = std::fs::File::create(path)?;
    file.write_all(&header_for("<f4", &[d, h, w]))?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data.as_slice().expect("standard layout") {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn write_u8_3d(path: &Path, data: &Array3<u8>) -> Result<()> {
    let (d, h, w) = data.dim();
    let mut file = std::fs::File::create(path)?;
    file.write_all(&header_for("|u1", &[d, h, w]))?;
    file.write_all(data.as_slice().expect("standard layout"))?;
    Ok(())
}

struct ParsedHeader {
    descr: String,
    shape: Vec<usize>,
    data_offset: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<ParsedHeader> {
    let bad = |reason: &str| SrdaError::format(path, reason);
    if bytes.len() < 10 || &bytes[..6] != &MAGIC[..6] {
        return Err(bad("not an NPY file"));
    }
    if bytes[6] != 1 {
        return Err(bad("unsupported NPY version"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_offset = 10 + header_len;
    if bytes.len() < data_offset {
        return Err(bad("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..data_offset])
        .map_err(|_| bad("header is not ASCII"))?;

    let field = |key: &str| -> Result<String> {
        let pos = header
            .find(key)
            .ok_or_else(|| bad(&format!("missing '{key}'")))?;
        Ok(header[pos + key.len()..].to_string())
    };
    let descr_tail = field("'descr':")?;
    let descr = descr_tail
        .split('\'')
        .nth(1)
        .ok_or_else(|| bad("malformed descr"))?
        .to_string();

    if field("'fortran_order':")?.trim_start().starts_with("True") {
        return Err(bad("fortran order not supported"));
    }

    let shape_tail = field("'shape':")?;
    let open = shape_tail.find('(').ok_or_else(|| bad("malformed shape"))?;
    let close = shape_tail.find(')').ok_or_else(|| bad("malformed shape"))?;
    let shape = shape_tail[open + 1..close]
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| bad(&format!("bad dimension '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ParsedHeader {
        descr,
        shape,
        data_offset,
    })
}

fn expect_3d(path: &Path, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(SrdaError::format(
            path,
            format!("expected 3 dimensions, got {:?}", shape),
        ));
    }
    Ok((shape[0], shape[1], shape[2]))
}

pub fn read_f32_3d(path: &Path) -> Result<Array3<f64>> {
    let bytes = fsprobe::read_bytes(path)?;
    let header = parse_header(path, &bytes)?;
    if header.descr != "<f4" {
        return Err(SrdaError::format(
            path,
            format!("expected '<f4' dtype, got '{}'", header.descr),
        ));
    }
    let (d, h, w) = expect_3d(path, &header.shape)?;
    let n = d * h * w;
    let data = &bytes[header.data_offset..];
    if data.len() != n * 4 {
        return Err(SrdaError::format(
            path,
            format!("expected {} data bytes, got {}", n * 4, data.len()),
        ));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array3::from_shape_vec((d, h, w), values)
        .map_err(|e| SrdaError::format(path, e.to_string()))
}

pub fn read_u8_3d(path: &Path) -> Result<Array3<u8>> {
    let bytes = fsprobe::read_bytes(path)?;
    let header = parse_header(path, &bytes)?;
    if header.descr != "|u1" {
        return Err(SrdaError::format(
            path,
            format!("expected '|u1' dtype, got '{}'", header.descr),
        ));
    }
    let (d, h, w) = expect_3d(path, &header.shape)?;
    let n = d * h * w;
    let data = &bytes[header.data_offset..];
    if data.len() != n {
        return Err(SrdaError::format(
            path,
            format!("expected {n} data bytes, got {}", data.len()),
        ));
    }
    Array3::from_shape_vec((d, h, w), data.to_vec())
        .map_err(|e| SrdaError::format(path, e.to_string()))
}
