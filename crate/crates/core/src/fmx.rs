//! `FMX1` binary matrices plus the small text formats that accompany them.
//!
//! Layout of an `FMX1` blob (all integers little-endian):
//!
//! | bytes   | content                                  |
//! |---------|------------------------------------------|
//! | 0..4    | magic `FMX1`                             |
//! | 4..12   | rows, `u64`                              |
//! | 12..20  | cols, `u64`                              |
//! | 20..    | `rows * cols` IEEE-754 `f64`, column-major |

use std::fs;
use std::path::Path;

use crate::data::{SemanticTable, TriModalDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const FMX_MAGIC: &[u8; 4] = b"FMX1";
const HEADER_LEN: usize = 20;

/// File names used for a dataset directory.
pub mod names {
    pub const IMAGES: &str = "images.fmx";
    pub const KEYFRAMES: &str = "keyframes.fmx";
    pub const VIDEOS: &str = "videos.fmx";
    pub const LABELS: &str = "labels.txt";
    pub const CLASSES: &str = "classes.txt";
    pub const SEMANTICS: &str = "semantics.fmx";
}

pub fn encode_fmx(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(FMX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    let slice = bytes.get(at..at + 8).ok_or_else(|| {
        Error::format(
            bytes.len() as u64,
            format!("truncated header, need byte {}", at + 8),
        )
    })?;
    Ok(u64::from_le_bytes(
        slice.try_into().unwrap_or_else(|_| unreachable!()),
    ))
}

/// Decode one `FMX1` blob from the front of `bytes`; returns the matrix and
/// the number of bytes consumed. Offsets in errors are relative to `base`.
pub fn decode_fmx_at(bytes: &[u8], base: u64) -> Result<(Matrix, usize)> {
    let shift = |e: Error| match e {
        Error::Format { offset, reason } => Error::Format {
            offset: offset + base,
            reason,
        },
        other => other,
    };
    decode_inner(bytes).map_err(shift)
}

pub fn decode_fmx(bytes: &[u8]) -> Result<Matrix> {
    let (m, used) = decode_fmx_at(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(
            used as u64,
            format!("{} trailing bytes", bytes.len() - used),
        ));
    }
    Ok(m)
}

fn decode_inner(bytes: &[u8]) -> Result<(Matrix, usize)> {
    match bytes.get(..4) {
        Some(m) if m == FMX_MAGIC => {}
        Some(m) => {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected \"FMX1\"",
                    String::from_utf8_lossy(m)
                ),
            ))
        }
        None => return Err(Error::format(bytes.len() as u64, "truncated magic")),
    }
    let rows = read_u64(bytes, 4)?;
    let cols = read_u64(bytes, 12)?;
    if rows == 0 || cols == 0 {
        return Err(Error::format(
            if rows == 0 { 4 } else { 12 },
            "matrix dimensions must be positive",
        ));
    }
    let count = rows
        .checked_mul(cols)
        .filter(|c| {
            c.checked_mul(8)
                .is_some_and(|b| b <= usize::MAX as u64 - HEADER_LEN as u64)
        })
        .ok_or_else(|| Error::format(4, format!("dimension overflow: {rows} x {cols}")))?;
    let payload = (count * 8) as usize;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: header declares {rows} x {cols} ({payload} bytes) but only {available} present"),
        ));
    }
    let mut data = Vec::with_capacity(count as usize);
    for (i, chunk) in bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(8)
        .enumerate()
    {
        let v = f64::from_le_bytes(chunk.try_into().unwrap_or_else(|_| unreachable!()));
        if !v.is_finite() {
            return Err(Error::format(
                (HEADER_LEN + 8 * i) as u64,
                "non-finite value",
            ));
        }
        data.push(v);
    }
    Ok((
        Matrix::from_vec(rows as usize, cols as usize, data),
        HEADER_LEN + payload,
    ))
}

pub fn save_feature_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_fmx(m)).map_err(|e| Error::io(path, e))
}

pub fn load_feature_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmx(&bytes)
}

/// Comma-separated text, one row per feature dimension, one column per sample.
pub fn parse_csv_matrix(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row = trimmed
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::format(line_offset, format!("bad csv value {:?}", f.trim()))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::format(
                    line_offset,
                    format!("csv row has {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let Some(first) = rows.first() else {
        return Err(Error::format(0, "empty csv"));
    };
    let cols = first.len();
    Ok(Matrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

pub fn csv_to_fmx(csv: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<Matrix> {
    let csv = csv.as_ref();
    let text = fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let m = parse_csv_matrix(&text)?;
    save_feature_matrix(&m, out)?;
    Ok(m)
}

pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.lines() {
        let at = offset;
        offset += line.len() as u64 + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|_| Error::format(at, format!("bad label {t:?}")))?,
        );
    }
    Ok(out)
}

pub fn format_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn parse_names(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn format_names(names: &[String]) -> String {
    names.iter().map(|n| format!("{n}\n")).collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the six-file dataset layout into `dir` (created if missing).
pub fn save_dataset(
    dir: impl AsRef<Path>,
    ds: &TriModalDataset,
    table: &SemanticTable,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_feature_matrix(ds.images(), dir.join(names::IMAGES))?;
    save_feature_matrix(ds.keyframes(), dir.join(names::KEYFRAMES))?;
    save_feature_matrix(ds.videos(), dir.join(names::VIDEOS))?;
    write_text(&dir.join(names::LABELS), &format_labels(ds.labels()))?;
    write_text(&dir.join(names::CLASSES), &format_names(ds.class_names()))?;
    save_feature_matrix(table.embeddings(), dir.join(names::SEMANTICS))
}

/// Inverse of [`save_dataset`]. The semantic table is flagged normalized
/// when every column has unit norm.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(TriModalDataset, SemanticTable)> {
    let dir = dir.as_ref();
    let labels = parse_labels(&read_text(&dir.join(names::LABELS))?)?;
    let class_names = parse_names(&read_text(&dir.join(names::CLASSES))?);
    let ds = TriModalDataset::new(
        load_feature_matrix(dir.join(names::IMAGES))?,
        load_feature_matrix(dir.join(names::KEYFRAMES))?,
        load_feature_matrix(dir.join(names::VIDEOS))?,
        labels,
        class_names,
    )?;
    let emb = load_feature_matrix(dir.join(names::SEMANTICS))?;
    if emb.ncols() != ds.num_classes() {
        return Err(Error::contract(format!(
            "semantic table has {} columns but {} class names",
            emb.ncols(),
            ds.num_classes()
        )));
    }
    let normalized = emb.column_iter().all(|c| (c.norm() - 1.0).abs() <= 1e-9);
    Ok((ds, SemanticTable::new(emb, normalized)?))
}
