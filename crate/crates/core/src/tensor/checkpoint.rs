use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{NasError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCNNAS01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named `f32` tensors plus a UTF-8 metadata block.
///
/// Layout, all integers little-endian `u32`:
///
/// ```text
/// magic "GCNNAS01" | version | meta_len | meta bytes | tensor_count
/// per tensor: name_len | name | rank | dims[rank] | f32 data (LE)
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NasError::argument("value does not fit in u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> NasError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NasError::Parse("checkpoint is truncated".into())
    } else {
        NasError::Io(e)
    }
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| NasError::Parse(format!("invalid utf-8 in checkpoint: {e}")))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION as usize)?;
        write_u32(w, self.meta.len())?;
        w.write_all(self.meta.as_bytes())?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NasError::Parse("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(NasError::Parse(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(r)?;
        let meta = read_string(r, meta_len)?;
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(r)?;
            let name = read_string(r, name_len)?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let ck = Checkpoint {
            meta: "{}".into(),
            tensors: vec![("w".into(), Tensor::new(&[2], vec![1.0f32, -2.5]).unwrap())],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"GCNNAS01");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[buf.len() - 4..], &(-2.5f32).to_le_bytes());
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);
    }

    #[test]
    fn corrupt_inputs_are_parse_errors() {
        assert!(matches!(Checkpoint::read_from(&mut &b"NOTACKPT...."[..]), Err(NasError::Parse(_))));
        let ck = Checkpoint { meta: "m".into(), tensors: vec![("a".into(), Tensor::zeros(&[3]))] };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice()), Err(NasError::Parse(_))));
    }
}
