//! Named tensor stores and their binary serialization.
//!
//! Learnable parameters are reference-counted so graph nodes can hold cheap
//! handles to the weights they used; the optimizer updates them in place via
//! copy-on-write once all graphs from the previous step are dropped.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::rc::Rc;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Learnable parameters, keyed by dotted layer path (e.g. `stem.conv1.weight`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Rc<ArrayD<S>>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<S>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter {name}")));
        }
        self.map.insert(name, Rc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Rc<ArrayD<S>>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::validation(format!("unknown parameter {name}")))
    }

    /// Mutable view for optimizer updates; clones only if a graph still holds
    /// the tensor.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<S>> {
        self.map
            .get_mut(name)
            .map(Rc::make_mut)
            .ok_or_else(|| Error::validation(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    pub fn to_map(&self) -> BTreeMap<String, ArrayD<S>> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.as_ref().clone()))
            .collect()
    }

    pub fn from_map(map: BTreeMap<String, ArrayD<S>>) -> Self {
        ParamStore {
            map: map.into_iter().map(|(k, v)| (k, Rc::new(v))).collect(),
        }
    }
}

/// Non-learnable state (batch-norm running statistics), mutated during
/// training-mode forwards and frozen in evaluation mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Buffers<S: Scalar> {
    map: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> Buffers<S> {
    pub fn new() -> Self {
        Buffers {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<S>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::validation(format!("duplicate buffer {name}")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::validation(format!("unknown buffer {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<S>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::validation(format!("unknown buffer {name}")))
    }

    pub fn to_map(&self) -> BTreeMap<String, ArrayD<S>> {
        self.map.clone()
    }

    pub fn from_map(map: BTreeMap<String, ArrayD<S>>) -> Self {
        Buffers { map }
    }
}

const TENSOR_BLOCK_MAGIC: &[u8; 4] = b"TNSR";
const TENSOR_BLOCK_VERSION: u32 = 1;

/// Serialize a name→tensor map: little-endian, bit-exact.
///
/// Layout: magic, version, entry count, then per entry name length + UTF-8
/// name, dtype tag, rank, dimensions, raw element bytes in standard layout.
pub fn write_tensors<S: Scalar, W: Write>(
    writer: &mut W,
    tensors: &BTreeMap<String, ArrayD<S>>,
) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_BLOCK_MAGIC);
    buf.extend_from_slice(&TENSOR_BLOCK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, tensor) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(S::DTYPE);
        let shape = tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.as_standard_layout().iter() {
            S::append_le_bytes(&mut buf, v);
        }
    }
    writer.write_all(&buf)
}

/// Inverse of [`write_tensors`]; rejects wrong magic, version, or dtype.
pub fn read_tensors<S: Scalar, R: Read>(reader: &mut R) -> Result<BTreeMap<String, ArrayD<S>>> {
    let bad = |msg: &str| Error::validation(format!("tensor block: {msg}"));
    let mut data = Vec::new();
    reader
        .read_to_end(&mut data)
        .map_err(|e| Error::validation(format!("tensor block unreadable: {e}")))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > data.len() {
            return Err(bad("truncated"));
        }
        let s = &data[pos..pos + n];
        pos += n;
        Ok(s)
    };

    if take(4)? != TENSOR_BLOCK_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != TENSOR_BLOCK_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("non-UTF-8 name"))?
            .to_owned();
        let dtype = take(1)?[0];
        if dtype != S::DTYPE {
            return Err(bad(&format!(
                "tensor {name}: dtype tag {dtype} does not match expected {}",
                S::DTYPE
            )));
        }
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * S::BYTE_WIDTH)?;
        let values: Vec<S> = raw
            .chunks_exact(S::BYTE_WIDTH)
            .map(S::from_le_bytes)
            .collect();
        let tensor = ArrayD::from_shape_vec(shape, values).map_err(|_| bad("bad shape"))?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(bad(&format!("duplicate tensor {name}")));
        }
    }
    if pos != data.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip<S: Scalar>(map: &BTreeMap<String, ArrayD<S>>) -> BTreeMap<String, ArrayD<S>> {
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, map).unwrap();
        read_tensors(&mut bytes.as_slice()).unwrap()
    }

    #[test]
    fn tensors_roundtrip_bit_exact_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut map = BTreeMap::new();
        map.insert(
            "a.weight".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[4, 3, 3, 3]), |_| rng.random::<f32>() - 0.5),
        );
        map.insert(
            "a.bias".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[4]), |_| rng.random::<f32>() * 1e-30),
        );
        map.insert("scalar".to_string(), ArrayD::zeros(IxDyn(&[])));
        let back = roundtrip(&map);
        assert_eq!(back.len(), map.len());
        for (name, tensor) in &map {
            let b = &back[name];
            assert_eq!(b.shape(), tensor.shape());
            for (x, y) in tensor.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} not bit-exact");
            }
        }
    }

    #[test]
    fn tensors_roundtrip_bit_exact_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut map = BTreeMap::new();
        map.insert(
            "w".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[7, 5]), |_| rng.random::<f64>() - 0.5),
        );
        let back = roundtrip(&map);
        for (x, y) in map["w"].iter().zip(back["w"].iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), ArrayD::<f32>::zeros(IxDyn(&[2])));
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &map).unwrap();
        assert!(read_tensors::<f64, _>(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn corrupt_block_is_rejected() {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), ArrayD::<f32>::zeros(IxDyn(&[2])));
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, &map).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(read_tensors::<f32, _>(&mut bytes.as_slice()).is_err());
        assert!(read_tensors::<f32, _>(&mut b"JUNK".as_slice()).is_err());
    }

    #[test]
    fn param_store_rejects_duplicates_and_unknowns() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("w", ArrayD::zeros(IxDyn(&[2, 2]))).unwrap();
        assert!(ps.insert("w", ArrayD::zeros(IxDyn(&[1]))).is_err());
        assert!(ps.get("nope").is_err());
        assert_eq!(ps.param_count(), 4);
    }

    #[test]
    fn get_mut_preserves_shared_handles() {
        let mut ps = ParamStore::<f32>::new();
        ps.insert("w", ArrayD::zeros(IxDyn(&[2]))).unwrap();
        let held = ps.get("w").unwrap();
        ps.get_mut("w").unwrap()[[0]] = 5.0;
        // The handle taken before the update still sees the old value.
        assert_eq!(held[[0]], 0.0);
        assert_eq!(ps.get("w").unwrap()[[0]], 5.0);
    }
}
