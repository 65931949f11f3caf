use std::collections::HashMap;
use std::io::{Read, Write};

use super::tensor::Tensor;
use super::NeuralError;

const MAGIC: &[u8; 8] = b"BCNCKPT1";

/// Named parameter blocks in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter block {name}");
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.id(name)?;
        Some(&mut self.tensors[id])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Self-describing checkpoint: magic, a UTF-8 header (typically the config
/// text), then each named block with its shape and little-endian f64 values.
pub fn write_checkpoint(out: &mut impl Write, header: &str, params: &ParamStore) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    write_bytes(out, header.as_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_bytes(out, name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in &t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<(String, ParamStore), NeuralError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let header = String::from_utf8(read_bytes(input)?).map_err(|_| NeuralError::Checkpoint("header is not UTF-8".into()))?;
    let n = read_u32(input)?;
    let mut params = ParamStore::default();
    for _ in 0..n {
        let name =
            String::from_utf8(read_bytes(input)?).map_err(|_| NeuralError::Checkpoint("block name is not UTF-8".into()))?;
        let ndim = read_u32(input)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if params.id(&name).is_some() {
            return Err(NeuralError::Checkpoint(format!("duplicate block {name}")));
        }
        params.insert(&name, Tensor::new(shape, data));
    }
    Ok((header, params))
}

fn write_bytes(out: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    out.write_all(&(b.len() as u32).to_le_bytes())?;
    out.write_all(b)
}

fn read_u32(input: &mut impl Read) -> Result<u32, NeuralError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(input: &mut impl Read) -> Result<Vec<u8>, NeuralError> {
    let n = read_u32(input)? as usize;
    if n > 1 << 24 {
        return Err(NeuralError::Checkpoint("implausible string length".into()));
    }
    let mut v = vec![0u8; n];
    input.read_exact(&mut v)?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = ParamStore::default();
        p.insert("w", Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]));
        p.insert("b", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, "d = 4\n", &p).unwrap();
        let (header, back) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(header, "d = 4\n");
        assert_eq!(back.names, p.names);
        for (a, b) in back.tensors.iter().zip(&p.tensors) {
            let bits = |t: &Tensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert!(read_checkpoint(&mut &bytes[..bytes.len() - 1]).is_err());
        assert!(read_checkpoint(&mut &b"NOTACKPT"[..]).is_err());
    }
}
