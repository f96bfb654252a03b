//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "RSTA" | u32 version | u64 seed | u32 stage
//! config: u32 × 9 (heads, layers, hidden, intermediate, head_dim, rank,
//!         vocab_size, max_len, n_classes) | f64 eps
//! u32 n_arrays, then per array: u32 name_len | name | u32 ndim | u32 dims… | f32 data…
//! u8 has_singular_values [ u32 n | f64 … ]
//! u8 has_adam [ u64 step | f64 beta1 | f64 beta2 | f64 eps | m arrays | v arrays ]  (moments as f64)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::pipeline::{AdamConfig, AdamState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RSTA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<AdamState>,
    pub seed: u64,
    pub stage: u32,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::contract(format!("value {v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn store(&mut self, store: &ParamStore, double: bool) -> Result<()> {
        let names = store.names();
        self.u32(names.len())?;
        for (name, t) in names.iter().zip(store.leaves()) {
            self.u32(name.len())?;
            self.0.extend_from_slice(name.as_bytes());
            self.u32(t.shape().len())?;
            for &d in t.shape() {
                self.u32(d)?;
            }
            for &x in t.data() {
                if double {
                    self.f64(x);
                } else {
                    self.0.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(field, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u32(&mut self, field: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
    fn flag(&mut self, field: &str) -> Result<bool> {
        match self.u8(field)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(field, format!("flag byte {b}"))),
        }
    }
    fn store(&mut self, config: &ModelConfig, double: bool, what: &str) -> Result<ParamStore> {
        let n = self.u32(&format!("{what}.count"))?;
        let mut named = Vec::with_capacity(n);
        for i in 0..n {
            let len = self.u32(&format!("{what}[{i}].name_len"))?;
            let name = std::str::from_utf8(self.take(len, &format!("{what}[{i}].name"))?)
                .map_err(|_| Error::format(format!("{what}[{i}].name"), "not UTF-8"))?
                .to_string();
            let ndim = self.u32(&format!("{name}.ndim"))?;
            if ndim == 0 || ndim > 2 {
                return Err(Error::format(format!("{name}.ndim"), format!("{ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32(&format!("{name}.shape"))?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format(format!("{name}.shape"), "overflow"))?;
            let width = if double { 8 } else { 4 };
            let bytes = self.take(numel.saturating_mul(width), &format!("{name}.data"))?;
            let data: Vec<f64> = if double {
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()
            } else {
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect()
            };
            let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("{name}.shape"), e.to_string()))?;
            named.push((name, t));
        }
        ParamStore::from_named(config, named)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION as usize)?;
    w.u64(ck.seed);
    w.u32(ck.stage as usize)?;
    let c = &ck.model.config;
    for v in [
        c.heads,
        c.layers,
        c.hidden,
        c.intermediate,
        c.head_dim,
        c.rank,
        c.vocab_size,
        c.max_len,
        c.n_classes,
    ] {
        w.u32(v)?;
    }
    w.f64(c.eps);
    w.store(&ck.model.params, false)?;
    match &ck.model.singular_values {
        Some(s) => {
            w.u8(1);
            w.u32(s.len())?;
            s.iter().for_each(|&x| w.f64(x));
        }
        None => w.u8(0),
    }
    match &ck.adam {
        Some(a) => {
            w.u8(1);
            w.u64(a.step);
            w.f64(a.config.beta1);
            w.f64(a.config.beta2);
            w.f64(a.config.eps);
            w.store(&a.m, true)?;
            w.store(&a.v, true)?;
        }
        None => w.u8(0),
    }
    Ok(w.0)
}

/// Parses and validates a checkpoint; nothing is returned unless the whole
/// buffer is well formed.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not an RSTA checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(
            "version",
            format!("file has version {version}, this build reads {CHECKPOINT_VERSION}"),
        ));
    }
    let seed = r.u64("seed")?;
    let stage = r.u32("stage")? as u32;
    let mut dims = [0usize; 9];
    for (slot, name) in dims.iter_mut().zip([
        "config.heads",
        "config.layers",
        "config.hidden",
        "config.intermediate",
        "config.head_dim",
        "config.rank",
        "config.vocab_size",
        "config.max_len",
        "config.n_classes",
    ]) {
        *slot = r.u32(name)?;
    }
    let config = ModelConfig {
        heads: dims[0],
        layers: dims[1],
        hidden: dims[2],
        intermediate: dims[3],
        head_dim: dims[4],
        rank: dims[5],
        vocab_size: dims[6],
        max_len: dims[7],
        n_classes: dims[8],
        eps: r.f64("config.eps")?,
    };
    config.validate().map_err(|e| Error::format("config", e.to_string()))?;
    let params = r.store(&config, false, "params")?;
    let singular_values = if r.flag("singular_values.flag")? {
        let n = r.u32("singular_values.count")?;
        if n != config.rank {
            return Err(Error::format("singular_values.count", format!("{n} values for rank {}", config.rank)));
        }
        Some((0..n).map(|_| r.f64("singular_values")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let adam = if r.flag("adam.flag")? {
        let step = r.u64("adam.step")?;
        let cfg = AdamConfig {
            beta1: r.f64("adam.beta1")?,
            beta2: r.f64("adam.beta2")?,
            eps: r.f64("adam.eps")?,
        };
        let m = r.store(&config, true, "adam.m")?;
        let v = r.store(&config, true, "adam.v")?;
        Some(AdamState { config: cfg, step, m, v })
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::format("trailer", format!("{} unexpected trailing bytes", buf.len() - r.pos)));
    }
    let mut model = Model::new(config, params).map_err(|e| Error::format("params", e.to_string()))?;
    model.singular_values = singular_values;
    Ok(Checkpoint {
        model,
        adam,
        seed,
        stage,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
