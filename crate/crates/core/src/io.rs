//! `CPT1` binary tensor files and content digests.
//!
//! Layout: the magic bytes `CPT1`, a little-endian `u32` rank, `rank`
//! little-endian `u64` dimensions, then the elements as little-endian `f64`
//! in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPT1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("truncated rank".into()))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensors are not supported".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut dword = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut dword)
            .map_err(|_| Error::Format("truncated dimensions".into()))?;
        let d = u64::from_le_bytes(dword);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    if r.len() != count * 8 {
        return Err(Error::Format(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            count * 8,
            r.len()
        )));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// All regular files under `root`, relative and sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// SHA-256 over every file in a directory tree (relative path and content,
/// in sorted path order).
pub fn tree_sha256(root: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for rel in list_files(root)? {
        let name = rel.to_string_lossy().replace('\\', "/");
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        let bytes = fs::read(root.join(&rel))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"CPT1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::from_slice(&[1.0, 2.0]);
        let mut bytes = encode_tensor(&t);
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_tensor(&bytes).is_err());
        assert!(decode_tensor(b"CP").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            // Arbitrary bit patterns, including NaN payloads and signed zeros.
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.rotate_left(i as u32 * 7) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = encode_tensor(&t);
            let back = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u64> = back.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(encode_tensor(&back), bytes);
        }
    }
}
