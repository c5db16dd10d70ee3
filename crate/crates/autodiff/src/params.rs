use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Re-registering a name is a bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.values.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&mut f64)) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(&mut f);
        }
    }

    /// Writes `count` then `(name, rank, dims, payload)` records, little endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_tensor_list(w, self.names.iter().map(String::as_str).zip(&self.values))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, value) in read_tensor_list(r)? {
            if store.lookup.contains_key(&name) {
                return Err(TensorError::Format(format!("duplicate tensor `{name}`")));
            }
            store.insert(name, value);
        }
        Ok(store)
    }

    /// Copies values from `other` by name; shapes must agree and every
    /// parameter of `self` must be present.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let id = other
                .id(name)
                .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            let src = other.get(id);
            if src.shape() != self.values[i].shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: self.values[i].shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

pub fn write_tensor_list<'a, W: Write>(
    w: &mut W,
    items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    for (name, t) in items {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensor_list<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let count = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(TensorError::Format(format!("name length {len}")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let name = String::from_utf8(buf).map_err(|e| TensorError::Format(format!("name: {e}")))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(TensorError::Format(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(TensorError::Format(format!("`{name}` too large")));
        }
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let id = store.uniform("w", 16, 8, 16, &mut rng);
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.name(id), "w");
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.uniform("a.w", 3, 4, 3, &mut rng);
        store.uniform("a.b", 1, 4, 3, &mut rng);
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(2, 2));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_from(&mut buf.as_slice()).is_err());
    }
}
