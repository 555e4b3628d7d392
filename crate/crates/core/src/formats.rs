//! Row-matrix file framing shared by pose datasets and eigengrasp weight
//! streams.
//!
//! Binary layout: 8 magic bytes, u32 row count, u32 row width, then the
//! rows as little-endian floats. Files that do not start with `XDEX` are
//! read as headerless CSV instead.

use crate::error::{Error, Result};
use crate::pose_model::{HandPose, POSE_DIM};

pub const POSE_MAGIC: &[u8; 8] = b"XDEXPOSE";
pub const STREAM_MAGIC: &[u8; 8] = b"XDEXWSTR";

/// Little-endian cursor over a byte buffer.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated input: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

fn magic_name(magic: &[u8; 8]) -> &'static str {
    match magic {
        m if m == POSE_MAGIC => "XDEXPOSE",
        m if m == STREAM_MAGIC => "XDEXWSTR",
        _ => "XDEX",
    }
}

/// Rows of a binary file. `width` pins the row width when known.
pub fn read_rows_binary(
    bytes: &[u8],
    magic: &[u8; 8],
    width: Option<usize>,
    precision: Precision,
) -> Result<(usize, Vec<f64>)> {
    let mut cur = Reader::new(bytes);
    if cur.take(8).ok() != Some(&magic[..]) {
        return Err(Error::BadMagic {
            expected: magic_name(magic),
        });
    }
    let n = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    if let Some(w) = width {
        if dim != w {
            return Err(Error::Dimension {
                what: "row width in file header",
                expected: w,
                got: dim,
            });
        }
    }
    let item = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let need = n.checked_mul(dim).and_then(|c| c.checked_mul(item));
    if need != Some(cur.remaining()) {
        return Err(Error::Format(format!(
            "header declares {n} rows of {dim} values but {} payload bytes follow",
            cur.remaining()
        )));
    }
    let mut values = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        values.push(match precision {
            Precision::F32 => cur.f32()? as f64,
            Precision::F64 => cur.f64()?,
        });
    }
    Ok((dim, values))
}

pub fn write_rows_binary(magic: &[u8; 8], dim: usize, values: &[f64], precision: Precision) -> Vec<u8> {
    let n = values.len().checked_div(dim).unwrap_or(0);
    let mut out = Vec::with_capacity(16 + values.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in values {
        match precision {
            Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

/// Headerless CSV of equal-width numeric rows. Blank lines are skipped;
/// errors carry the 1-based line number.
pub fn read_rows_csv(text: &str, width: Option<usize>) -> Result<(usize, Vec<f64>)> {
    let mut dim = width;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("{:?}: {e}", cell.trim()),
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            Some(d) if d != row.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {d} columns, found {}", row.len()),
                })
            }
            None => dim = Some(row.len()),
            _ => {}
        }
        values.extend(row);
    }
    Ok((dim.unwrap_or(0), values))
}

pub fn write_rows_csv(dim: usize, values: &[f64]) -> String {
    let mut out = String::new();
    for row in values.chunks(dim.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Shortest decimal string that parses back to the same value.
pub fn format_float(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

fn read_rows(bytes: &[u8], magic: &[u8; 8], width: Option<usize>, precision: Precision) -> Result<(usize, Vec<f64>)> {
    if bytes.starts_with(b"XDEX") {
        return read_rows_binary(bytes, magic, width, precision);
    }
    match std::str::from_utf8(bytes) {
        Ok(text) => read_rows_csv(text, width),
        Err(_) => Err(Error::BadMagic {
            expected: magic_name(magic),
        }),
    }
}

/// Pose dataset from binary (`XDEXPOSE`, f32) or 45-column CSV bytes.
pub fn parse_pose_dataset(bytes: &[u8]) -> Result<Vec<HandPose>> {
    let (_, values) = read_rows(bytes, POSE_MAGIC, Some(POSE_DIM), Precision::F32)?;
    values.chunks(POSE_DIM).map(HandPose::from_slice).collect()
}

pub fn pose_dataset_binary(poses: &[HandPose]) -> Vec<u8> {
    let values: Vec<f64> = poses.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
    write_rows_binary(POSE_MAGIC, POSE_DIM, &values, Precision::F32)
}

pub fn pose_dataset_csv(poses: &[HandPose]) -> String {
    let values: Vec<f64> = poses.iter().flat_map(|p| p.as_slice().iter().copied()).collect();
    write_rows_csv(POSE_DIM, &values)
}

/// Eigengrasp weight stream, one row per timestep, from binary
/// (`XDEXWSTR`, f64) or CSV bytes. Returns the row width and the rows.
pub fn parse_weight_stream(bytes: &[u8]) -> Result<(usize, Vec<Vec<f64>>)> {
    let (dim, values) = read_rows(bytes, STREAM_MAGIC, None, Precision::F64)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight stream"));
    }
    Ok((dim, values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect()))
}

pub fn weight_stream_binary(rows: &[Vec<f64>]) -> Vec<u8> {
    let dim = rows.first().map_or(0, Vec::len);
    let values: Vec<f64> = rows.iter().flatten().copied().collect();
    write_rows_binary(STREAM_MAGIC, dim, &values, Precision::F64)
}
