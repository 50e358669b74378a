//! Files: a compact binary format for grid fields, CSV tables and curve
//! input.
//!
//! Binary grid layout, all little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `MSGRID\0\0` |
//! | 4 | format version (u32, currently 1) |
//! | 4 | dimension (u32) |
//! | 8 + 8 | node counts `nx`, `ny` (u64) |
//! | 4 x 8 | box `lo_x, lo_y, hi_x, hi_y` (f64) |
//! | 8 each | values (f64), row-major with `x` fastest |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::{BoundingBox, Grid, NodalField};
use crate::surfaces::Curve;
use crate::point;

pub const MAGIC: [u8; 8] = *b"MSGRID\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_field<W: Write>(mut w: W, field: &NodalField) -> Result<()> {
    let g = &field.grid;
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(g.dim as u32).to_le_bytes())?;
    w.write_all(&(g.nx as u64).to_le_bytes())?;
    w.write_all(&(g.ny as u64).to_le_bytes())?;
    for v in [g.bounds.lo[0], g.bounds.lo[1], g.bounds.hi[0], g.bounds.hi[1]] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &field.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<NodalField> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(invalid("not a grid field file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut u32_ = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let version = u32_(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(invalid(format!("unsupported grid format version {version}")));
    }
    let dim = u32_(&mut r)? as usize;
    let mut u64_ = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let nx = u64_(&mut r)? as usize;
    let ny = u64_(&mut r)? as usize;
    let f64_ = |r: &mut R| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let (lx, ly, hx, hy) = (f64_(&mut r)?, f64_(&mut r)?, f64_(&mut r)?, f64_(&mut r)?);
    let grid = Grid::new(dim, BoundingBox::new([lx, ly], [hx, hy]), [nx, ny])?;
    if grid.len() != nx * ny {
        return Err(invalid("grid header is inconsistent"));
    }
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        values.push(f64_(&mut r)?);
    }
    NodalField::new(grid, values)
}

pub fn save_field(path: &Path, field: &NodalField) -> Result<()> {
    write_field(BufWriter::new(File::create(path)?), field)
}

pub fn load_field(path: &Path) -> Result<NodalField> {
    read_field(BufReader::new(File::open(path)?))
}

/// Node coordinates and values as CSV (`x,value` or `x,y,value`).
pub fn save_field_csv(path: &Path, field: &NodalField) -> Result<()> {
    let g = &field.grid;
    let mut w = csv_writer(path)?;
    if g.dim == 1 {
        w.write_record(["x", "value"]).map_err(csv_err)?;
    } else {
        w.write_record(["x", "y", "value"]).map_err(csv_err)?;
    }
    for (p, v) in g.nodes().zip(&field.values) {
        let rec: Vec<String> = if g.dim == 1 {
            vec![p.x.to_string(), v.to_string()]
        } else {
            vec![p.x.to_string(), p.y.to_string(), v.to_string()]
        };
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Serializes `rows` (structs or tuples) as CSV with a header from the
/// field names.
pub fn save_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header line and numeric rows.
pub fn save_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => invalid(format!("csv: {other:?}")),
    }
}

/// Reads a curve from CSV rows of `dim` coordinates, or `s` followed by
/// `dim` coordinates. A header row is skipped if it is not numeric.
pub fn load_curve(path: &Path, dim: usize) -> Result<Curve> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if k == 0 => continue,
            Err(e) => return Err(invalid(format!("{}: row {}: {e}", path.display(), k + 1))),
        }
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(invalid(format!("{}: rows have different lengths", path.display())));
    }
    let at = |r: &[f64]| if dim == 1 { point(r[0], 0.0) } else { point(r[0], r[1]) };
    if width == dim {
        Curve::new(rows.iter().map(|r| at(r)).collect())
    } else if width == dim + 1 {
        Curve::from_parametrized(rows.iter().map(|r| (r[0], at(&r[1..]))).collect())
    } else {
        Err(invalid(format!("{}: expected {dim} or {} columns, got {width}", path.display(), dim + 1)))
    }
}
