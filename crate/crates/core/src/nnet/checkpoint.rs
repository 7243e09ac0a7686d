//! `DVNN1` parameter checkpoints.
//!
//! Layout: the 5-byte magic `DVNN1`, then records until end of file. Each
//! record is `u32` name length, UTF-8 name, `u32` rank, `rank` × `u32` dims,
//! and the little-endian `f32` payload. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DVNN1";

pub fn encode_checkpoint(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::from(&CHECKPOINT_MAGIC[..]);
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Checkpoint(format!(
                "truncated checkpoint: {what} at byte {} needs {n} bytes, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, NnError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic: not a DVNN1 checkpoint".into()));
    }
    let mut r = Reader { buf: bytes, pos: 5 };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| NnError::Checkpoint(format!("record {} name is not UTF-8", records.len())))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(NnError::Checkpoint(format!("record {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NnError::Checkpoint(format!("record {name}: shape overflow")))?;
        let payload = r.take(
            count.checked_mul(4).ok_or_else(|| NnError::Checkpoint("payload overflow".into()))?,
            "payload",
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn save_checkpoint(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<(), NnError> {
    write_atomic(path, &encode_checkpoint(records))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, NnError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Writes to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NnError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| NnError::Checkpoint(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("0.conv2d.weight".into(), Tensor::new(vec![2, 1, 1, 1], vec![1.5, -0.0]).unwrap()),
            ("scalar".into(), Tensor::new(vec![], vec![f32::from_bits(0x7fc0_0001)]).unwrap()),
            ("empty".into(), Tensor::new(vec![0, 3], vec![]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let recs = sample();
        let back = decode_checkpoint(&encode_checkpoint(&recs)).unwrap();
        assert_eq!(back.len(), recs.len());
        for ((na, ta), (nb, tb)) in recs.iter().zip(&back) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = encode_checkpoint(&sample());
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
    }
}
