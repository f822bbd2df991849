use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"RLTS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a tensor file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    Version(u32),
    #[error("corrupt tensor file: {0}")]
    Corrupt(String),
    #[error("parameter {name}: expected shape {expected:?}, checkpoint has {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks parameter {0}")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Named parameter tensors plus Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.m.push(vec![0.0; t.len()]);
        self.v.push(vec![0.0; t.len()]);
        self.tensors.push(t);
        ParamId(id)
    }

    /// Uniform init in `±sqrt(3 / fan_in)` scaled by `gain`; unit-variance rows in expectation.
    pub fn add_init(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) {
        assert_eq!(grads.len(), self.tensors.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in grads.iter().enumerate() {
            let (w, m, v) = (&mut self.tensors[p].data, &mut self.m[p], &mut self.v[p]);
            for j in 0..w.len() {
                let gj = g.data[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                w[j] -= cfg.lr * (update + cfg.weight_decay * w[j]);
            }
        }
    }

    /// Copy of parameters, moments and step count, for rolling back a diverged step.
    pub fn snapshot(&self) -> ParamStore {
        self.clone()
    }

    pub fn restore(&mut self, snap: &ParamStore) {
        assert_eq!(self.names, snap.names);
        self.tensors.clone_from(&snap.tensors);
        self.m.clone_from(&snap.m);
        self.v.clone_from(&snap.v);
        self.step = snap.step;
    }

    /// Copies values and optimizer moments of every parameter from the same-named,
    /// same-shaped parameter of `other`, and its step count.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), CheckpointError> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .index
                .get(name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let src = &other.tensors[*j];
            if src.shape != self.tensors[i].shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: self.tensors[i].shape.clone(),
                    found: src.shape.clone(),
                });
            }
            self.tensors[i].data.copy_from_slice(&src.data);
            self.m[i].copy_from_slice(&other.m[*j]);
            self.v[i].copy_from_slice(&other.v[*j]);
        }
        self.step = other.step;
        Ok(())
    }

    /// Writes parameters and optimizer state: little-endian f64 in a tagged binary file.
    pub fn write_tensors(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        for (i, t) in self.tensors.iter().enumerate() {
            let name = self.names[i].as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for buf in [&t.data, &self.m[i], &self.v[i]] {
                for x in buf.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_tensors(r: &mut impl Read) -> Result<ParamStore, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = read_u32(r)? as usize;
        let mut step = [0u8; 8];
        r.read_exact(&mut step)?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(CheckpointError::Corrupt(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 4 {
                return Err(CheckpointError::Corrupt(format!("{name} has {ndim} axes")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut d = [0u8; 8];
                r.read_exact(&mut d)?;
                shape.push(u64::from_le_bytes(d) as usize);
            }
            let count: usize = shape.iter().product();
            if count > 1 << 28 {
                return Err(CheckpointError::Corrupt(format!("{name} has {count} elements")));
            }
            let data = read_f64s(r, count)?;
            let m = read_f64s(r, count)?;
            let v = read_f64s(r, count)?;
            if store.index.contains_key(&name) {
                return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
            }
            let id = store.add(&name, Tensor::new(&shape, data));
            store.m[id.0] = m;
            store.v[id.0] = v;
        }
        store.step = u64::from_le_bytes(step);
        Ok(store)
    }

    /// Saves `manifest.json` and `tensors.bin` under `dir`.
    pub fn save_checkpoint(&self, dir: &Path, manifest: &serde_json::Value) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;
        let mut f = io::BufWriter::new(fs::File::create(dir.join("tensors.bin"))?);
        self.write_tensors(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
        let manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut f = io::BufReader::new(fs::File::open(dir.join("tensors.bin"))?);
        let store = ParamStore::read_tensors(&mut f)?;
        Ok((store, manifest))
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
