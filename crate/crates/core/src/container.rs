//! Binary tensor container (`.ten`) and the named-array archive used for
//! checkpoints.
//!
//! Container layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `LTSR` |
//! | 1 | version (= 1) |
//! | 1 | dtype: 0 = f32, 1 = u8 |
//! | 1 | ndim |
//! | 4·ndim | dims as u32 |
//! | ... | row-major payload |
//!
//! Archive layout: magic `LTAR`, version u8 (= 1), entry count u32, then per
//! entry a u32 name length, UTF-8 name, u64 blob length and one container.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTSR";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"LTAR";
pub const VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// One array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32 { shape, .. } | Array::U8 { shape, .. } => shape,
        }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Array::F32 {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        match self {
            Array::F32 { shape, data } => Tensor::from_vec(shape, data.clone()),
            Array::U8 { .. } => Err(Error::validation("expected an f32 array, found u8")),
        }
    }

    pub fn text(s: &str) -> Self {
        Array::U8 {
            shape: vec![s.len()],
            data: s.as_bytes().to_vec(),
        }
    }

    pub fn as_text(&self) -> Result<String> {
        match self {
            Array::U8 { data, .. } => String::from_utf8(data.clone())
                .map_err(|e| Error::validation(format!("invalid UTF-8 text entry: {e}"))),
            Array::F32 { .. } => Err(Error::validation("expected a u8 text entry")),
        }
    }

    /// Bitwise equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &Array) -> bool {
        match (self, other) {
            (Array::F32 { shape: a, data: x }, Array::F32 { shape: b, data: y }) => {
                a == b && x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
            }
            (Array::U8 { shape: a, data: x }, Array::U8 { shape: b, data: y }) => a == b && x == y,
            _ => false,
        }
    }
}

pub fn encode(a: &Array) -> Result<Vec<u8>> {
    let shape = a.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::validation(format!("rank {} exceeds 255", shape.len())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match a {
        Array::F32 { .. } => DTYPE_F32,
        Array::U8 { .. } => DTYPE_U8,
    });
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::validation(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match a {
        Array::F32 { data, .. } => {
            out.reserve(data.len() * 4);
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Array::U8 { data, .. } => out.extend_from_slice(data),
    }
    Ok(out)
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => {
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        }
        None => Err(fmt_err(
            bytes.len(),
            format!("truncated {what}: need {n} bytes at offset {}, have {}", *pos, bytes.len() - *pos),
        )),
    }
}

/// Decode one container starting at `bytes[0]`; returns the array and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Array, usize)> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 4, "magic")?;
    if magic != MAGIC {
        return Err(fmt_err(0, format!("bad magic {magic:?}")));
    }
    let version = take(bytes, &mut pos, 1, "version")?[0];
    if version != VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let dtype = take(bytes, &mut pos, 1, "dtype")?[0];
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(fmt_err(5, format!("unknown dtype {dtype}")));
    }
    let ndim = take(bytes, &mut pos, 1, "ndim")?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = take(bytes, &mut pos, 4, "dims")?;
        shape.push(u32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt_err(7, "element count overflows"))?;
    let arr = if dtype == DTYPE_F32 {
        let nbytes = count
            .checked_mul(4)
            .ok_or_else(|| fmt_err(7, "payload size overflows"))?;
        let raw = take(bytes, &mut pos, nbytes, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Array::F32 { shape, data }
    } else {
        let raw = take(bytes, &mut pos, count, "payload")?;
        Array::U8 {
            shape,
            data: raw.to_vec(),
        }
    };
    Ok((arr, pos))
}

pub fn decode(bytes: &[u8]) -> Result<Array> {
    let (a, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(fmt_err(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(a)
}

/// Write through a temporary sibling file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_container(path: &Path, a: &Array) -> Result<()> {
    write_atomic(path, &encode(a)?)
}

pub fn read_container(path: &Path) -> Result<Array> {
    decode(&fs::read(path)?)
}

/// Ordered list of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, Array)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, a: Array) {
        self.entries.push((name.into(), a));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::State(format!("archive has no entry {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, a) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let blob = encode(a)?;
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if take(bytes, &mut pos, 4, "archive magic")? != ARCHIVE_MAGIC {
            return Err(fmt_err(0, "bad archive magic"));
        }
        let version = take(bytes, &mut pos, 1, "archive version")?[0];
        if version != VERSION {
            return Err(fmt_err(4, format!("unsupported archive version {version}")));
        }
        let c = take(bytes, &mut pos, 4, "entry count")?;
        let count = u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let l = take(bytes, &mut pos, 4, "name length")?;
            let len = u32::from_le_bytes([l[0], l[1], l[2], l[3]]) as usize;
            let at = pos;
            let name = std::str::from_utf8(take(bytes, &mut pos, len, "name")?)
                .map_err(|_| fmt_err(at, "entry name is not UTF-8"))?
                .to_string();
            let b = take(bytes, &mut pos, 8, "blob length")?;
            let blen = u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
            let start = pos;
            let blob = take(bytes, &mut pos, blen, "blob")?;
            let arr = decode(blob).map_err(|e| match e {
                Error::Format { offset, msg } => fmt_err(start + offset as usize, msg),
                other => other,
            })?;
            entries.push((name, arr));
        }
        if pos != bytes.len() {
            return Err(fmt_err(pos, "trailing bytes after archive"));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let a = Array::F32 {
            shape: vec![2, 1],
            data: vec![1.0, -0.5],
        };
        let b = encode(&a).unwrap();
        assert_eq!(&b[..4], b"LTSR");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 0);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &1u32.to_le_bytes());
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn scalar_container_is_legal() {
        let a = Array::F32 {
            shape: vec![],
            data: vec![3.25],
        };
        let b = encode(&a).unwrap();
        assert_eq!(b.len(), 7 + 4);
        assert!(decode(&b).unwrap().bit_eq(&a));
    }

    #[test]
    fn truncation_and_bad_header_report_offsets() {
        let a = Array::U8 {
            shape: vec![4],
            data: vec![1, 2, 3, 4],
        };
        let b = encode(&a).unwrap();
        match decode(&b[..b.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (b.len() - 1) as u64),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 4, .. })));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip_and_archive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.ten");
        let a = Array::F32 {
            shape: vec![3],
            data: vec![f32::NAN, -0.0, 1e-40],
        };
        write_container(&p, &a).unwrap();
        assert!(read_container(&p).unwrap().bit_eq(&a));

        let mut ar = Archive::new();
        ar.push("w", a.clone());
        ar.push("__config__", Array::text("x = 1\n"));
        let ap = dir.path().join("ck.ltar");
        ar.write(&ap).unwrap();
        let back = Archive::read(&ap).unwrap();
        assert!(back.require("w").unwrap().bit_eq(&a));
        assert_eq!(back.require("__config__").unwrap().as_text().unwrap(), "x = 1\n");
        assert!(back.require("nope").is_err());
        let bytes = ar.encode().unwrap();
        assert!(Archive::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn f32_round_trip_bit_exact(bits in proptest::collection::vec(any::<u32>(), 0..64), split in 1usize..4) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let shape = if data.len() % split == 0 { vec![split, data.len() / split] } else { vec![data.len()] };
            let a = Array::F32 { shape, data };
            prop_assert!(decode(&encode(&a).unwrap()).unwrap().bit_eq(&a));
        }
    }
}
