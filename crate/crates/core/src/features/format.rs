//! MSFV feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0      | 4    | ASCII `MSFV` |
//! | 4      | 1    | version (`1`) |
//! | 5      | 4    | `u32` feature dimension |
//! | 9      | 8    | `u64` record count |
//! | 17     | 4    | `u32` label cardinality |
//! | 21     | ...  | records: `u32` label then `dim` × `f32` |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MsdemError, Result};

pub const MAGIC: &[u8; 4] = b"MSFV";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: u64 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub dim: u32,
    pub count: u64,
    pub cardinality: u32,
}

impl FeatureHeader {
    pub fn record_len(&self) -> u64 {
        4 + 4 * self.dim as u64
    }

    pub fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[0..4].copy_from_slice(MAGIC);
        out[4] = VERSION;
        out[5..9].copy_from_slice(&self.dim.to_le_bytes());
        out[9..17].copy_from_slice(&self.count.to_le_bytes());
        out[17..21].copy_from_slice(&self.cardinality.to_le_bytes());
        out
    }
}

/// Read as many bytes as available into `buf`; returns how many were read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Streaming reader: yields `(label, vector)` one record at a time.
pub struct FeatureReader<R> {
    inner: R,
    header: FeatureHeader,
    next: u64,
    offset: u64,
    buf: Vec<u8>,
    done: bool,
}

impl<R: Read> FeatureReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut raw = [0u8; HEADER_LEN as usize];
        let got = read_full(&mut inner, &mut raw).map_err(|e| MsdemError::parse(0, e.to_string()))?;
        if got < 4 || &raw[0..4] != MAGIC {
            return Err(MsdemError::parse(0, "bad magic, expected MSFV"));
        }
        if got < HEADER_LEN as usize {
            return Err(MsdemError::parse(got as u64, "truncated header"));
        }
        if raw[4] != VERSION {
            return Err(MsdemError::parse(4, format!("unsupported version {}", raw[4])));
        }
        let header = FeatureHeader {
            dim: u32::from_le_bytes(raw[5..9].try_into().unwrap()),
            count: u64::from_le_bytes(raw[9..17].try_into().unwrap()),
            cardinality: u32::from_le_bytes(raw[17..21].try_into().unwrap()),
        };
        if header.dim == 0 {
            return Err(MsdemError::parse(5, "feature dimension is zero"));
        }
        let buf = vec![0u8; header.record_len() as usize];
        Ok(FeatureReader {
            inner,
            header,
            next: 0,
            offset: HEADER_LEN,
            buf,
            done: false,
        })
    }

    pub fn header(&self) -> FeatureHeader {
        self.header
    }

    fn read_record(&mut self) -> Result<Option<(u32, Vec<f32>)>> {
        if self.next == self.header.count {
            let mut probe = [0u8; 1];
            let extra = read_full(&mut self.inner, &mut probe)
                .map_err(|e| MsdemError::parse(self.offset, e.to_string()))?;
            if extra != 0 {
                return Err(MsdemError::parse(
                    self.offset,
                    format!("trailing data after {} declared records", self.header.count),
                ));
            }
            return Ok(None);
        }
        let got = read_full(&mut self.inner, &mut self.buf)
            .map_err(|e| MsdemError::parse(self.offset, e.to_string()))?;
        if got < self.buf.len() {
            return Err(MsdemError::parse(
                self.offset + got as u64,
                format!(
                    "truncated record {} of {} (expected {} bytes, found {got})",
                    self.next,
                    self.header.count,
                    self.buf.len()
                ),
            ));
        }
        let label = u32::from_le_bytes(self.buf[0..4].try_into().unwrap());
        if label >= self.header.cardinality {
            return Err(MsdemError::parse(
                self.offset,
                format!("label {label} >= cardinality {}", self.header.cardinality),
            ));
        }
        let mut v = Vec::with_capacity(self.header.dim as usize);
        for (i, chunk) in self.buf[4..].chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(MsdemError::parse(
                    self.offset + 4 + 4 * i as u64,
                    "non-finite feature value",
                ));
            }
            v.push(x);
        }
        self.offset += self.buf.len() as u64;
        self.next += 1;
        Ok(Some((label, v)))
    }
}

impl<R: Read> Iterator for FeatureReader<R> {
    type Item = Result<(u32, Vec<f32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Open a feature file for streaming.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureReader<BufReader<File>>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| MsdemError::io(path, e))?;
    FeatureReader::new(BufReader::new(f))
}

/// Sequential writer; the declared count is checked on [`finish`](Self::finish).
pub struct FeatureWriter<W: Write> {
    inner: W,
    header: FeatureHeader,
    written: u64,
}

impl<W: Write> FeatureWriter<W> {
    pub fn new(mut inner: W, header: FeatureHeader) -> Result<Self> {
        if header.dim == 0 {
            return Err(MsdemError::invalid("feature dimension must be positive"));
        }
        inner
            .write_all(&header.encode())
            .map_err(|e| MsdemError::io("<writer>", e))?;
        Ok(FeatureWriter {
            inner,
            header,
            written: 0,
        })
    }

    pub fn write_record(&mut self, label: u32, values: &[f32]) -> Result<()> {
        if values.len() != self.header.dim as usize {
            return Err(MsdemError::Shape {
                op: "write_record",
                lhs: vec![self.header.dim as usize],
                rhs: vec![values.len()],
            });
        }
        if label >= self.header.cardinality {
            return Err(MsdemError::invalid(format!(
                "label {label} >= cardinality {}",
                self.header.cardinality
            )));
        }
        if self.written == self.header.count {
            return Err(MsdemError::invalid("more records than declared"));
        }
        let io = |e| MsdemError::io("<writer>", e);
        self.inner.write_all(&label.to_le_bytes()).map_err(io)?;
        for v in values {
            self.inner.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.count {
            return Err(MsdemError::invalid(format!(
                "declared {} records, wrote {}",
                self.header.count, self.written
            )));
        }
        self.inner.flush().map_err(|e| MsdemError::io("<writer>", e))?;
        Ok(self.inner)
    }
}

/// Write a whole file; the temporary is renamed into place on success.
pub fn write_feature_file(
    path: impl AsRef<Path>,
    dim: u32,
    cardinality: u32,
    records: &[(u32, Vec<f32>)],
) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("msfv.tmp");
    let f = File::create(&tmp).map_err(|e| MsdemError::io(&tmp, e))?;
    let header = FeatureHeader {
        dim,
        count: records.len() as u64,
        cardinality,
    };
    let mut w = FeatureWriter::new(BufWriter::new(f), header)?;
    for (label, v) in records {
        w.write_record(*label, v)?;
    }
    w.finish()?;
    std::fs::rename(&tmp, path).map_err(|e| MsdemError::io(path, e))
}
