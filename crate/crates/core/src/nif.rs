//! Persistence: the NIF1 matrix format, probe/anchor sidecars and CSV
//! reports.
//!
//! NIF1 layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "NUMINT01"
//! dtype   u8       1 = f64, 2 = complex f64 (re, im interleaved), 3 = u8
//! rows    u64
//! cols    u64
//! payload row-major
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::imaging::LossRecord;
use crate::probes::{AnchorSet, ProbeSet};
use crate::{BinaryMatrix, CMatrix, Complex64, Error, RMatrix, Result};

pub const MAGIC: &[u8; 8] = b"NUMINT01";
pub const HEADER_LEN: usize = 8 + 1 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Real = 1,
    Complex = 2,
    Byte = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::Real),
            2 => Ok(DType::Complex),
            3 => Ok(DType::Byte),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn elem_size(self) -> usize {
        match self {
            DType::Real => 8,
            DType::Complex => 16,
            DType::Byte => 1,
        }
    }
}

/// A matrix read back from a NIF1 stream.
#[derive(Debug, Clone, PartialEq)]
pub enum NifMatrix {
    Real(RMatrix),
    Complex(CMatrix),
    Byte(BinaryMatrix),
}

impl NifMatrix {
    pub fn dtype(&self) -> DType {
        match self {
            NifMatrix::Real(_) => DType::Real,
            NifMatrix::Complex(_) => DType::Complex,
            NifMatrix::Byte(_) => DType::Byte,
        }
    }

    pub fn into_complex(self) -> Result<CMatrix> {
        match self {
            NifMatrix::Complex(a) => Ok(a),
            other => Err(Error::Format(format!(
                "expected a complex matrix, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_real(self) -> Result<RMatrix> {
        match self {
            NifMatrix::Real(a) => Ok(a),
            other => Err(Error::Format(format!("expected a real matrix, found {:?}", other.dtype()))),
        }
    }

    pub fn into_byte(self) -> Result<BinaryMatrix> {
        match self {
            NifMatrix::Byte(a) => Ok(a),
            other => Err(Error::Format(format!("expected a u8 matrix, found {:?}", other.dtype()))),
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: DType, rows: usize, cols: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype as u8])?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    Ok(())
}

pub fn write_complex<W: Write>(w: &mut W, a: &CMatrix) -> Result<()> {
    write_header(w, DType::Complex, a.nrows(), a.ncols())?;
    // Logical row-major order regardless of memory layout.
    for z in a.iter() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_real<W: Write>(w: &mut W, a: &RMatrix) -> Result<()> {
    write_header(w, DType::Real, a.nrows(), a.ncols())?;
    for v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_byte<W: Write>(w: &mut W, a: &BinaryMatrix) -> Result<()> {
    write_header(w, DType::Byte, a.nrows(), a.ncols())?;
    let bytes: Vec<u8> = a.iter().copied().collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<NifMatrix> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &header[..8] != MAGIC {
        return Err(Error::Format("bad magic, not a NIF1 file".into()));
    }
    let dtype = DType::from_code(header[8])?;
    let rows = u64::from_le_bytes(header[9..17].try_into().unwrap());
    let cols = u64::from_le_bytes(header[17..25].try_into().unwrap());
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.elem_size() as u64))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format(format!("shape {rows} x {cols} overflows")))?;
    let (rows, cols) = (rows as usize, cols as usize);

    let mut payload = Vec::new();
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {len}",
            payload.len()
        )));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }

    let f64_at = |i: usize| f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().unwrap());
    let shape_err = |e: ndarray::ShapeError| Error::Format(e.to_string());
    Ok(match dtype {
        DType::Real => {
            let v = (0..rows * cols).map(f64_at).collect();
            NifMatrix::Real(Array2::from_shape_vec((rows, cols), v).map_err(shape_err)?)
        }
        DType::Complex => {
            let v = (0..rows * cols)
                .map(|i| Complex64::new(f64_at(2 * i), f64_at(2 * i + 1)))
                .collect();
            NifMatrix::Complex(Array2::from_shape_vec((rows, cols), v).map_err(shape_err)?)
        }
        DType::Byte => NifMatrix::Byte(Array2::from_shape_vec((rows, cols), payload).map_err(shape_err)?),
    })
}

pub fn save_complex(path: &Path, a: &CMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_complex(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn save_real(path: &Path, a: &RMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_real(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn save_byte(path: &Path, a: &BinaryMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_byte(&mut w, a)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<NifMatrix> {
    read_matrix(&mut BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// key=value text

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// later keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("missing key `{key}`")))
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("invalid value for `{key}`: {v:?}")))
}

fn bits_string(v: &[u8]) -> String {
    v.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

fn parse_bits(key: &str, s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Format(format!("`{key}` must be a 0/1 string"))),
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| parse_value(key, t.trim())).collect()
}

pub fn probe_sidecar(p: &ProbeSet) -> String {
    format!(
        "n={}\nset_id={}\nseed={}\ngen_a={}\ngen_b={}\nzero_rows={}\n",
        p.n(),
        p.set_id(),
        p.seed(),
        bits_string(p.gen_a()),
        bits_string(p.gen_b()),
        join(p.zero_rows())
    )
}

pub fn parse_probe_sidecar(text: &str) -> Result<ProbeSet> {
    let kv = parse_key_values(text)?;
    let n = parse_value("n", get(&kv, "n")?)?;
    let set_id = parse_value("set_id", get(&kv, "set_id")?)?;
    let seed = parse_value("seed", get(&kv, "seed")?)?;
    let gen_a = parse_bits("gen_a", get(&kv, "gen_a")?)?;
    let gen_b = parse_bits("gen_b", get(&kv, "gen_b")?)?;
    let zero_rows = parse_list("zero_rows", get(&kv, "zero_rows")?)?;
    Ok(ProbeSet::from_parts(n, gen_a, gen_b, zero_rows, seed)?.with_set_id(set_id))
}

/// Anchors are stored by column as 0/1 strings, `anchor.0` first.
pub fn anchor_sidecar(a: &AnchorSet) -> String {
    let mut s = format!(
        "n={}\ns_count={}\nseed={}\nfill_fraction={}\n",
        a.n(),
        a.s_count(),
        a.seed(),
        a.fill_fraction()
    );
    for j in 0..a.s_count() {
        s.push_str(&format!("anchor.{j}={}\n", bits_string(&a.anchor(j).to_vec())));
    }
    s
}

pub fn parse_anchor_sidecar(text: &str) -> Result<AnchorSet> {
    let kv = parse_key_values(text)?;
    let n: usize = parse_value("n", get(&kv, "n")?)?;
    let s_count: usize = parse_value("s_count", get(&kv, "s_count")?)?;
    let seed = parse_value("seed", get(&kv, "seed")?)?;
    let fill_fraction = parse_value("fill_fraction", get(&kv, "fill_fraction")?)?;
    let mut m = BinaryMatrix::zeros((n, s_count));
    for j in 0..s_count {
        let key = format!("anchor.{j}");
        let col = parse_bits(&key, get(&kv, &key)?)?;
        if col.len() != n {
            return Err(Error::Format(format!("`{key}` has length {}, expected {n}", col.len())));
        }
        m.column_mut(j).iter_mut().zip(col).for_each(|(d, v)| *d = v);
    }
    AnchorSet::from_matrix(m, fill_fraction, seed)
}

// ---------------------------------------------------------------------------
// CSV reports

pub const TIMINGS_HEADER: [&str; 2] = ["stage", "seconds"];
pub const SWEEP_HEADER: [&str; 5] = ["n", "oversampling", "tm_rel_err", "img_rel_err", "seconds_total"];
pub const ROWS_HEADER: [&str; 4] = ["row_index", "residual", "conj_flag", "phase"];
pub const LOSS_HEADER: [&str; 3] = ["iter", "stage", "loss"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub oversampling: usize,
    pub tm_rel_err: f64,
    pub img_rel_err: f64,
    pub seconds_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowReport {
    pub row_index: usize,
    pub residual: f64,
    pub conjugate: bool,
    pub phase: f64,
}

fn csv_writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(header)?;
    Ok(wr)
}

pub fn write_timings<W: Write>(w: W, timings: &[(String, f64)]) -> Result<()> {
    let mut wr = csv_writer(w, &TIMINGS_HEADER)?;
    for (stage, secs) in timings {
        wr.write_record([stage.clone(), secs.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_sweep<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wr = csv_writer(w, &SWEEP_HEADER)?;
    for r in rows {
        wr.write_record([
            r.n.to_string(),
            r.oversampling.to_string(),
            r.tm_rel_err.to_string(),
            r.img_rel_err.to_string(),
            r.seconds_total.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_row_report<W: Write>(w: W, rows: &[RowReport]) -> Result<()> {
    let mut wr = csv_writer(w, &ROWS_HEADER)?;
    for r in rows {
        wr.write_record([
            r.row_index.to_string(),
            r.residual.to_string(),
            (r.conjugate as u8).to_string(),
            r.phase.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_loss_trace<W: Write>(w: W, trace: &[LossRecord]) -> Result<()> {
    let mut wr = csv_writer(w, &LOSS_HEADER)?;
    for r in trace {
        wr.write_record([r.iter.to_string(), r.stage.to_string(), r.loss.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
