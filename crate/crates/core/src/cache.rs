//! On-disk matrix cache.
//!
//! Each file holds one dense row-major `f64` matrix behind a fixed 32-byte
//! little-endian header:
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 4    | magic `DSGC`                            |
//! | 4      | 4    | format version (`u32`)                  |
//! | 8      | 4    | rows (`u32`)                            |
//! | 12     | 4    | cols (`u32`)                            |
//! | 16     | 8    | φ (`f64`)                               |
//! | 24     | 8    | checksum of the payload (`u64`)         |
//!
//! The checksum is the first eight bytes of the SHA-256 digest of the
//! payload, read as a little-endian integer. Files are written to a temporary
//! name and renamed into place, so a reader never observes a partial file
//! with a valid header.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{DisaggError, Result};

pub const MAGIC: [u8; 4] = *b"DSGC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub rows: usize,
    pub cols: usize,
    pub phi: f64,
    pub checksum: u64,
}

impl Header {
    fn encode(&self) -> [u8; 32] {
        let mut b = [0u8; 32];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&(self.rows as u32).to_le_bytes());
        b[12..16].copy_from_slice(&(self.cols as u32).to_le_bytes());
        b[16..24].copy_from_slice(&self.phi.to_le_bytes());
        b[24..32].copy_from_slice(&self.checksum.to_le_bytes());
        b
    }

    fn decode(b: &[u8; 32]) -> Option<Header> {
        if b[0..4] != MAGIC || u32::from_le_bytes(b[4..8].try_into().unwrap()) != VERSION {
            return None;
        }
        Some(Header {
            rows: u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize,
            cols: u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize,
            phi: f64::from_le_bytes(b[16..24].try_into().unwrap()),
            checksum: u64::from_le_bytes(b[24..32].try_into().unwrap()),
        })
    }
}

fn digest_u64(hasher: Sha256) -> u64 {
    let d = hasher.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// `<stem>_phi<φ>.bin`, with φ printed in shortest round-trip form.
pub fn file_name(stem: &str, phi: f64) -> String {
    format!("{stem}_phi{phi}.bin")
}

/// Streams rows into a cache file. Rows must be pushed in order.
pub struct MatrixWriter {
    path: PathBuf,
    tmp: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    rows: usize,
    cols: usize,
    phi: f64,
    written: usize,
}

impl MatrixWriter {
    pub fn create(path: &Path, rows: usize, cols: usize, phi: f64) -> Result<Self> {
        if rows > u32::MAX as usize || cols > u32::MAX as usize {
            return Err(DisaggError::validation("matrix too large for cache format"));
        }
        let tmp = path.with_extension("bin.tmp");
        let file = File::create(&tmp).map_err(|e| DisaggError::io(&tmp, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        out.write_all(&[0u8; 32]).map_err(|e| DisaggError::io(&tmp, e))?;
        Ok(MatrixWriter {
            path: path.to_path_buf(),
            tmp,
            out,
            hasher: Sha256::new(),
            rows,
            cols,
            phi,
            written: 0,
        })
    }

    /// Appends whole rows (`values.len()` must be a multiple of `cols`).
    pub fn push_rows(&mut self, values: &[f64]) -> Result<()> {
        debug_assert_eq!(values.len() % self.cols.max(1), 0);
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.hasher.update(&buf);
        self.out.write_all(&buf).map_err(|e| DisaggError::io(&self.tmp, e))?;
        self.written += values.len() / self.cols.max(1);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let MatrixWriter {
            path,
            tmp,
            out,
            hasher,
            rows,
            cols,
            phi,
            written,
        } = self;
        if written != rows {
            return Err(DisaggError::validation(format!(
                "cache writer for {} received {written} of {rows} rows",
                path.display()
            )));
        }
        let io = |e| DisaggError::io(&tmp, e);
        let mut file = out.into_inner().map_err(|e| DisaggError::io(&tmp, e.into_error()))?;
        let header = Header {
            rows,
            cols,
            phi,
            checksum: digest_u64(hasher),
        };
        file.seek(SeekFrom::Start(0)).map_err(io)?;
        file.write_all(&header.encode()).map_err(io)?;
        file.sync_all().map_err(io)?;
        drop(file);
        fs::rename(&tmp, &path).map_err(|e| DisaggError::io(&path, e))?;
        Ok(path)
    }
}

pub fn write_matrix(path: &Path, rows: usize, cols: usize, phi: f64, row_major: &[f64]) -> Result<()> {
    let mut w = MatrixWriter::create(path, rows, cols, phi)?;
    w.push_rows(row_major)?;
    w.finish().map(|_| ())
}

/// Reads and verifies a header plus checksum, streaming the payload. Returns
/// `None` if the file is missing, malformed, for another φ or shape, or fails
/// its checksum.
pub fn verify(path: &Path, rows: usize, cols: usize, phi: f64) -> Option<Header> {
    let file = File::open(path).ok()?;
    let len = file.metadata().ok()?.len();
    let mut rdr = BufReader::with_capacity(1 << 20, file);
    let mut hb = [0u8; 32];
    rdr.read_exact(&mut hb).ok()?;
    let header = Header::decode(&hb)?;
    if header.rows != rows
        || header.cols != cols
        || header.phi.to_bits() != phi.to_bits()
        || len != HEADER_LEN + (rows * cols * 8) as u64
    {
        return None;
    }
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = rdr.read(&mut buf).ok()?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    (digest_u64(hasher) == header.checksum).then_some(header)
}

/// Loads a verified matrix as row-major values.
pub fn read_matrix(path: &Path, rows: usize, cols: usize, phi: f64) -> Option<Vec<f64>> {
    let bytes = fs::read(path).ok()?;
    let hb: [u8; 32] = bytes.get(..32)?.try_into().ok()?;
    let header = Header::decode(&hb)?;
    if header.rows != rows || header.cols != cols || header.phi.to_bits() != phi.to_bits() {
        return None;
    }
    let payload = &bytes[32..];
    if payload.len() != rows * cols * 8 {
        return None;
    }
    let mut hasher = Sha256::new();
    hasher.update(payload);
    if digest_u64(hasher) != header.checksum {
        return None;
    }
    Some(
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Random row access into a verified cache file.
#[derive(Debug)]
pub struct RowReader {
    path: PathBuf,
    file: File,
    cols: usize,
    rows: usize,
}

impl RowReader {
    pub fn open(path: &Path, rows: usize, cols: usize) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .open(path)
            .map_err(|e| DisaggError::io(path, e))?;
        Ok(RowReader {
            path: path.to_path_buf(),
            file,
            cols,
            rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_row(&self, j: usize, out: &mut [f64], scratch: &mut Vec<u8>) -> Result<()> {
        debug_assert_eq!(out.len(), self.cols);
        scratch.resize(self.cols * 8, 0);
        let offset = HEADER_LEN + (j * self.cols * 8) as u64;
        self.file
            .read_exact_at(scratch, offset)
            .map_err(|e| DisaggError::io(&self.path, e))?;
        for (o, c) in out.iter_mut().zip(scratch.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_32_bytes_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, 2, 3, 2.5, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 32 + 48);
        assert_eq!(&bytes[0..4], b"DSGC");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2.5);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 1.0);
        assert!(verify(&p, 2, 3, 2.5).is_some());
        assert_eq!(read_matrix(&p, 2, 3, 2.5).unwrap()[5], 6.0);

        let r = RowReader::open(&p, 2, 3).unwrap();
        let mut row = [0.0; 3];
        r.read_row(1, &mut row, &mut Vec::new()).unwrap();
        assert_eq!(row, [4.0, 5.0, 6.0]);
    }

    #[test]
    fn detects_corruption_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, 1, 2, 1.0, &[1.0, 2.0]).unwrap();
        assert!(verify(&p, 1, 2, 2.0).is_none());
        assert!(verify(&p, 2, 1, 1.0).is_none());
        let mut bytes = fs::read(&p).unwrap();
        bytes[40] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        assert!(verify(&p, 1, 2, 1.0).is_none());
        assert!(read_matrix(&p, 1, 2, 1.0).is_none());
        assert!(verify(&dir.path().join("missing.bin"), 1, 2, 1.0).is_none());
    }

    #[test]
    fn file_names_use_shortest_phi() {
        assert_eq!(file_name("sigma00", 2.5), "sigma00_phi2.5.bin");
        assert_eq!(file_name("sigmap0", 10.0), "sigmap0_phi10.bin");
        assert_eq!(file_name("sigmap0", 2.75), "sigmap0_phi2.75.bin");
    }
}
