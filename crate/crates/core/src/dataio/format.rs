//! Binary dataset container.
//!
//! Layout (little-endian): magic `CDRD`, version byte, `u64` user count,
//! item count and interaction count, the user and item key tables (`u32`
//! byte length + UTF-8 bytes each), then per interaction in user-major
//! chronological order: `u32` user, `u32` item, `f64` rating, `i64`
//! timestamp, `u8` split.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, Interaction, Split};

pub const DATASET_MAGIC: &[u8; 4] = b"CDRD";
pub const DATASET_VERSION: u8 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, ds).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    decode(&bytes)
}

fn encode(w: &mut impl Write, ds: &Dataset) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[DATASET_VERSION])?;
    w.write_all(&(ds.num_users() as u64).to_le_bytes())?;
    w.write_all(&(ds.num_items() as u64).to_le_bytes())?;
    w.write_all(&(ds.num_interactions() as u64).to_le_bytes())?;
    for key in ds.user_keys().iter().chain(ds.item_keys()) {
        w.write_all(&(key.len() as u32).to_le_bytes())?;
        w.write_all(key.as_bytes())?;
    }
    for u in 0..ds.num_users() {
        for x in ds.interactions(u) {
            w.write_all(&(u as u32).to_le_bytes())?;
            w.write_all(&x.item.to_le_bytes())?;
            w.write_all(&x.rating.to_le_bytes())?;
            w.write_all(&x.timestamp.to_le_bytes())?;
            w.write_all(&[x.split as u8])?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DataError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u64(&mut self) -> Result<usize, DataError> {
        let v = u64::from_le_bytes(self.array()?);
        usize::try_from(v).map_err(|_| DataError::Format(format!("count {v} too large")))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn key(&mut self) -> Result<String, DataError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DataError::Format("key is not UTF-8".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).ok() != Some(&DATASET_MAGIC[..]) {
        return Err(DataError::Format("bad magic bytes".into()));
    }
    let version = c.array::<1>()?[0];
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!(
            "unsupported version {version}, expected {DATASET_VERSION}"
        )));
    }
    let n_users = c.u64()?;
    let n_items = c.u64()?;
    let n = c.u64()?;
    let user_keys = (0..n_users).map(|_| c.key()).collect::<Result<Vec<_>, _>>()?;
    let item_keys = (0..n_items).map(|_| c.key()).collect::<Result<Vec<_>, _>>()?;
    let mut users = vec![Vec::new(); n_users];
    let mut last_user = 0usize;
    for _ in 0..n {
        let u = c.u32()? as usize;
        let item = c.u32()?;
        let rating = f64::from_le_bytes(c.array()?);
        let timestamp = i64::from_le_bytes(c.array()?);
        let split = Split::from_u8(c.array::<1>()?[0])
            .ok_or_else(|| DataError::Format("bad split tag".into()))?;
        if u >= n_users || u < last_user {
            return Err(DataError::Format(format!("user index {u} out of order")));
        }
        last_user = u;
        users[u].push(Interaction {
            item,
            rating,
            timestamp,
            split,
        });
    }
    if c.pos != bytes.len() {
        return Err(DataError::Format("trailing bytes".into()));
    }
    Dataset::new(user_keys, item_keys, users)
}
