//! Checkpoint archives: a text header plus named f64 arrays in one file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u64  header byte length
//! ...  header bytes (UTF-8 text, TOML by convention)
//! u32  array count
//! per array:
//!   u32  name byte length
//!   ...  name bytes (UTF-8)
//!   u32  rank
//!   u64  extent per axis
//!   f64  data, row-major
//! ```
//!
//! Floats are written via their bit patterns, so a save/load cycle is
//! bit-exact — including negative zero and subnormals. The header carries
//! whatever the writer needs (format version, model config, seed, step
//! count); this module treats it as opaque text.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Array;

/// Cap on header/name/array byte sizes while reading, to fail fast on
/// corrupt or misaligned files instead of attempting huge allocations.
const MAX_SANE_BYTES: u64 = 1 << 34;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    Malformed(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o: {e}"),
            CheckpointError::Malformed(why) => write!(f, "malformed checkpoint: {why}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub header: String,
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new(header: String) -> Self {
        Archive {
            header,
            ..Archive::default()
        }
    }

    /// Add a named array; names must be unique within the archive.
    pub fn insert(&mut self, name: &str, array: Array) {
        assert!(
            !self.index.contains_key(name),
            "archive entry {name:?} inserted twice"
        );
        self.index.insert(name.to_string(), self.arrays.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    /// Like [`Archive::get`] but reports a missing entry as an error.
    pub fn require(&self, name: &str) -> Result<&Array, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing array {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// `(name, array)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&(self.header.len() as u64).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, array) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(array.rank() as u32).to_le_bytes())?;
            for &extent in array.shape() {
                w.write_all(&(extent as u64).to_le_bytes())?;
            }
            for &v in array.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let header_len = read_u64(r, "header length")?;
        if header_len > MAX_SANE_BYTES {
            return Err(CheckpointError::Malformed(format!(
                "header length {header_len} is implausible"
            )));
        }
        let header = read_string(r, header_len as usize, "header")?;
        let count = read_u32(r, "array count")?;
        let mut archive = Archive::new(header);
        for i in 0..count {
            let name_len = read_u32(r, "name length")? as usize;
            let name = read_string(r, name_len, "array name")?;
            let rank = read_u32(r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1u64;
            for _ in 0..rank {
                let extent = read_u64(r, "extent")?;
                numel = numel.saturating_mul(extent);
                shape.push(extent as usize);
            }
            if numel.saturating_mul(8) > MAX_SANE_BYTES {
                return Err(CheckpointError::Malformed(format!(
                    "array {name:?} ({i} of {count}) claims {numel} elements"
                )));
            }
            let mut data = vec![0.0f64; numel as usize];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                fill(r, &mut buf, "array data")?;
                *v = f64::from_le_bytes(buf);
            }
            if archive.index.contains_key(&name) {
                return Err(CheckpointError::Malformed(format!(
                    "duplicate array {name:?}"
                )));
            }
            archive.insert(&name, Array::new(shape, data));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let archive = Self::read_from(&mut r)?;
        // Trailing bytes mean the file is not what we think it is.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(CheckpointError::Malformed(
                "trailing bytes after last array".to_string(),
            ));
        }
        Ok(archive)
    }
}

fn fill(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|e| CheckpointError::Malformed(format!("truncated while reading {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    fill(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    fill(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string(r: &mut impl Read, len: usize, what: &str) -> Result<String, CheckpointError> {
    let mut buf = vec![0u8; len];
    fill(r, &mut buf, what)?;
    String::from_utf8(buf)
        .map_err(|_| CheckpointError::Malformed(format!("{what} is not valid UTF-8")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut a = Archive::new("format_version = 1\nseed = 42\n".to_string());
        a.insert("w.1", Array::uniform(&[3, 4], -5.0, 5.0, &mut rng));
        a.insert(
            "edge_cases",
            Array::from_vec(vec![
                -0.0,
                f64::MIN_POSITIVE,
                f64::MAX,
                1.0e-308,
                -1.5,
                std::f64::consts::PI,
            ]),
        );
        a.insert("scalar_step", Array::scalar(1234.0));

        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let b = Archive::read_from(&mut bytes.as_slice()).unwrap();

        assert_eq!(a.header, b.header);
        assert_eq!(a.len(), b.len());
        for ((na, aa), (nb, ab)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(aa.shape(), ab.shape());
            for (x, y) in aa.data().iter().zip(ab.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Negative zero specifically: equality would pass for 0.0 == -0.0.
        assert_eq!(b.get("edge_cases").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn save_load_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut a = Archive::new("kind = \"test\"".to_string());
        a.insert("p", Array::from_vec(vec![1.0, 2.0, 3.0]));
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(b.header, a.header);
        assert_eq!(b.require("p").unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(b.get("missing").is_none());
        assert!(b.require("missing").is_err());
    }

    #[test]
    fn truncated_file_is_malformed() {
        let mut a = Archive::new("h".to_string());
        a.insert("p", Array::from_vec(vec![1.0, 2.0]));
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        for cut in [3, bytes.len() - 5, bytes.len() - 1] {
            let err = Archive::read_from(&mut &bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Malformed(_)), "cut at {cut}");
        }
    }

    #[test]
    fn trailing_garbage_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("padded.ckpt");
        let a = Archive::new(String::new());
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        bytes.push(0xFF);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Archive::load(&path),
            Err(CheckpointError::Malformed(_))
        ));
    }

    #[test]
    fn empty_archive_round_trips() {
        let a = Archive::new(String::new());
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let b = Archive::read_from(&mut bytes.as_slice()).unwrap();
        assert!(b.is_empty());
        assert!(b.header.is_empty());
    }
}
