//! Binary checkpoint format.
//!
//! ```text
//! magic "LLFLOWCK" | u32 version | u64 len + config TOML text | u32 blob count
//! blob: u32 len + name | u8 dtype | u32 rank | u64 dims... | little-endian data
//! ```
//!
//! Blob names: `param/<name>`, `adam.m/<name>`, `adam.v/<name>`,
//! `state/iter`, `state/adam_t`, `state/rng`, `state/actnorm_init`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{DType, Scalar, Tensor};
use crate::training::{Adam, Trainer};

pub const MAGIC: &[u8; 8] = b"LLFLOWCK";
pub const VERSION: u32 = 1;

struct Blob {
    name: String,
    dtype: DType,
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

impl Blob {
    fn tensor<T: Scalar>(name: String, t: &Tensor<T>) -> Blob {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Blob {
            name,
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            bytes,
        }
    }

    fn words(name: &str, words: &[u64]) -> Blob {
        Blob {
            name: name.into(),
            dtype: DType::U64,
            dims: vec![words.len()],
            bytes: words.iter().flat_map(|w| w.to_le_bytes()).collect(),
        }
    }

    fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "blob {} holds {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let size = T::DTYPE.size();
        Tensor::new(&self.dims, self.bytes.chunks_exact(size).map(T::read_le).collect())
    }

    fn to_words(&self) -> Result<Vec<u64>> {
        if self.dtype != DType::U64 {
            return Err(Error::Checkpoint(format!("blob {} is not u64", self.name)));
        }
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut w: Vec<u64> = seed
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let pos = rng.get_word_pos();
    w.push(rng.get_stream());
    w.push(pos as u64);
    w.push((pos >> 64) as u64);
    w
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    if w.len() != 7 {
        return Err(Error::Checkpoint(format!("rng state has {} words, expected 7", w.len())));
    }
    let mut seed = [0u8; 32];
    for (i, word) in w[..4].iter().enumerate() {
        seed[i * 8..i * 8 + 8].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
    Ok(rng)
}

/// Serializes a trainer's full state.
pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let params = &t.model.params;
    let mut blobs = Vec::new();
    for (name, v) in params.iter() {
        blobs.push(Blob::tensor(format!("param/{name}"), v));
    }
    for ((name, _), m) in params.iter().zip(&t.adam.m) {
        blobs.push(Blob::tensor(format!("adam.m/{name}"), m));
    }
    for ((name, _), v) in params.iter().zip(&t.adam.v) {
        blobs.push(Blob::tensor(format!("adam.v/{name}"), v));
    }
    blobs.push(Blob::words("state/iter", &[t.iter]));
    blobs.push(Blob::words("state/adam_t", &[t.adam.t]));
    blobs.push(Blob::words("state/rng", &rng_words(&t.rng)));
    blobs.push(Blob::words("state/actnorm_init", &[u64::from(t.model.actnorm_ready)]));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = t.config.canonical();
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in &blobs {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.push(b.dtype as u8);
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in &b.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&b.bytes);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Parses a checkpoint into a trainer that continues exactly where the
/// saved one stopped.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = c.u64()? as usize;
    let text = c.string(len)?;
    let config = RunConfig::parse(&text, &[])?;
    let count = c.u32()? as usize;
    let mut blobs = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = c.string(n)?;
        let tag = c.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("blob {name}: dtype tag {tag}")))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().product::<usize>();
        let data = c.take(numel * dtype.size())?.to_vec();
        blobs.insert(name.clone(), Blob { name, dtype, dims, bytes: data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let get = |name: &str| blobs.get(name).ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")));

    let mut model = Model::<f32>::new(&config.model, config.train.seed)?;
    let ids: Vec<_> = model.params.ids().collect();
    let mut adam = Adam::new(&model.params);
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.params.name(id).to_string();
        model.params.set(id, get(&format!("param/{name}"))?.to_tensor()?)?;
        adam.m[k] = get(&format!("adam.m/{name}"))?.to_tensor()?;
        adam.v[k] = get(&format!("adam.v/{name}"))?.to_tensor()?;
        if adam.m[k].shape() != model.params.get(id).shape() || adam.v[k].shape() != model.params.get(id).shape() {
            return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
        }
    }
    let word = |name: &str| -> Result<u64> {
        get(name)?
            .to_words()?
            .first()
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("empty blob {name}")))
    };
    let expected = 3 * model.params.len() + 4;
    if blobs.len() != expected {
        return Err(Error::Checkpoint(format!("{} blobs, expected {expected}", blobs.len())));
    }
    adam.t = word("state/adam_t")?;
    model.actnorm_ready = word("state/actnorm_init")? != 0;
    let iter = word("state/iter")?;
    let rng = rng_from_words(&get("state/rng")?.to_words()?)?;
    Trainer::from_parts(config, model, adam, iter, rng)
}

impl Trainer {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, to_bytes(self))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trainer> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        from_bytes(&bytes)
    }
}

/// Config and model of a checkpoint, for inference.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model<f32>)> {
    let t = Trainer::load(path)?;
    Ok((t.config, t.model))
}
