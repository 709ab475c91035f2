//! CAVF matrix files and a CSV fallback.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CAVF"
//! 4       2     version (u16) = 1
//! 6       1     dtype (u8): 0 = float32, 1 = float64; bit 0x80 permits NaN/Inf
//! 7       8     rows (u64)
//! 15      8     cols (u64)
//! 23      ...   rows·cols values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CAVF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 23;
const NON_FINITE_FLAG: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(Dtype::F32),
            "f64" | "float64" => Ok(Dtype::F64),
            other => Err(Error::Parameter(format!("unknown dtype '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub allow_non_finite: bool,
    pub rows: u64,
    pub cols: u64,
}

fn parse_header(buf: &[u8; HEADER_LEN]) -> Result<Header> {
    if &buf[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected CAVF".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CAVF version {version}")));
    }
    let flags = buf[6];
    let dtype = match flags & !NON_FINITE_FLAG {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let rows = u64::from_le_bytes(buf[7..15].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(buf[15..23].try_into().expect("8 bytes"));
    Ok(Header { dtype, allow_non_finite: flags & NON_FINITE_FLAG != 0, rows, cols })
}

/// Reads a CAVF matrix from any byte source.
pub fn read_matrix_from<R: Read>(mut reader: R) -> Result<DMatrix<f64>> {
    let mut hbuf = [0u8; HEADER_LEN];
    reader
        .read_exact(&mut hbuf)
        .map_err(|_| Error::Truncation("file shorter than the CAVF header".into()))?;
    let header = parse_header(&hbuf)?;
    let count = header
        .rows
        .checked_mul(header.cols)
        .and_then(|c| c.checked_mul(header.dtype.width() as u64))
        .ok_or_else(|| Error::Truncation("header dimensions overflow the payload size".into()))?;
    let (rows, cols) = (header.rows as usize, header.cols as usize);
    let mut payload = Vec::new();
    (&mut reader).take(count).read_to_end(&mut payload)?;
    if (payload.len() as u64) < count {
        return Err(Error::Truncation(format!(
            "payload has {} bytes, header promises {count}",
            payload.len()
        )));
    }
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after the payload".into()));
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    if !header.allow_non_finite && values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("payload contains NaN or infinite values".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix_from(BufReader::new(File::open(path)?))
}

/// Writes a CAVF matrix; `allow_non_finite` sets the header flag.
pub fn write_matrix_to<W: Write>(m: &DMatrix<f64>, mut w: W, dtype: Dtype, allow_non_finite: bool) -> Result<()> {
    if !allow_non_finite && m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("matrix contains NaN or infinite values".into()));
    }
    if dtype == Dtype::F32 && !allow_non_finite && m.iter().any(|&v| !(v as f32).is_finite()) {
        return Err(Error::Data("value overflows float32".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let flag = if allow_non_finite { NON_FINITE_FLAG } else { 0 };
    w.write_all(&[dtype.code() | flag])?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = m[(r, c)];
            match dtype {
                Dtype::F64 => w.write_all(&v.to_le_bytes())?,
                // `as` narrowing rounds to nearest, ties to even.
                Dtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix(m: &DMatrix<f64>, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    write_matrix_to(m, BufWriter::new(File::create(path)?), dtype, false)
}

/// Headerless, comma-separated, `.` decimal separator.
pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_csv_from(File::open(path)?)
}

pub fn read_csv_from<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(format!("csv: {e}")))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Format(format!("csv row {} has {} fields, expected {c}", rows + 1, rec.len())))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("csv row {}: cannot parse '{field}'", rows + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data("csv contains NaN or infinite values".into()));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &values))
}

/// CSV with 17 significant digits per value.
pub fn write_csv_matrix(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads CAVF, or CSV when the file does not start with the CAVF magic.
pub fn read_any(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut head = [0u8; 4];
    let n = File::open(path)?.read(&mut head)?;
    if n == 4 && &head == MAGIC {
        read_matrix(path)
    } else {
        read_csv_matrix(path)
    }
}
