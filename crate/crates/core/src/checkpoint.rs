//! Versioned little-endian binary checkpoints: resolved config, parameters,
//! both batch-norm banks and optionally the Adam moments, with a trailing
//! FNV-1a checksum.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamState, RunningStats, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 8] = b"SPFNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub dev_eer: Option<f64>,
    pub params: Vec<SavedParam>,
    /// `(main, auxiliary)` per batch-norm layer, front-end first.
    pub banks: Vec<(RunningStats, RunningStats)>,
    pub adam: Option<AdamState>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn floats(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"))
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| corrupt(what))
    }
    fn bytes(&mut self, what: &str) -> Result<&[u8]> {
        let n = self.len(what)?;
        self.take(n, what)
    }
    fn floats(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what)?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt(what))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes")))).collect())
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, adam: Option<&AdamState>, config_text: &str, epoch: u64, dev_eer: Option<f64>) -> Self {
        Checkpoint {
            adam: adam.cloned(),
            config_text: config_text.to_string(),
            epoch,
            dev_eer,
            params: model
                .store
                .iter()
                .map(|(_, p)| SavedParam { name: p.name.clone(), trainable: p.trainable, value: p.value.clone() })
                .collect(),
            banks: model.encoder.batch_norms().iter().map(|bn| (bn.main.clone(), bn.aux.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(FORMAT_VERSION);
        w.bytes(self.config_text.as_bytes());
        w.u64(self.epoch);
        w.u64(self.dev_eer.unwrap_or(f64::NAN).to_bits());
        w.u64(self.params.len() as u64);
        for p in &self.params {
            w.bytes(p.name.as_bytes());
            w.0.push(u8::from(p.trainable));
            w.u32(p.value.ndim() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.floats(p.value.data());
        }
        w.u64(self.banks.len() as u64);
        for (main, aux) in &self.banks {
            for s in [main, aux] {
                w.floats(&s.mean);
                w.floats(&s.var);
            }
        }
        match &self.adam {
            None => w.0.push(0),
            Some(a) => {
                w.0.push(1);
                for x in [a.config.beta1, a.config.beta2, a.config.eps] {
                    w.u64(x.to_bits());
                }
                w.u64(a.t);
                w.u64(a.m.len() as u64);
                for (m, v) in a.m.iter().zip(&a.v) {
                    w.floats(m);
                    w.floats(v);
                }
            }
        }
        let sum = fnv1a(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 12 || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config_text = String::from_utf8(r.bytes("config")?.to_vec()).map_err(|_| corrupt("config text"))?;
        let epoch = r.u64("epoch")?;
        let eer = f64::from_bits(r.u64("dev eer")?);
        let n = r.len("parameter count")?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(r.bytes("name")?.to_vec()).map_err(|_| corrupt("parameter name"))?;
            let trainable = r.take(1, "flag")?[0] != 0;
            let ndim = r.u32("ndim")? as usize;
            let shape = (0..ndim).map(|_| r.len("dim")).collect::<Result<Vec<_>>>()?;
            let value = Tensor::new(shape, r.floats("values")?).map_err(|_| corrupt("parameter shape"))?;
            params.push(SavedParam { name, trainable, value });
        }
        let n = r.len("bank count")?;
        let mut banks = Vec::with_capacity(n);
        for _ in 0..n {
            let mut stats = || -> Result<RunningStats> { Ok(RunningStats { mean: r.floats("mean")?, var: r.floats("var")? }) };
            banks.push((stats()?, stats()?));
        }
        let adam = match r.take(1, "adam flag")?[0] {
            0 => None,
            1 => {
                let mut bits = || r.u64("adam config").map(f64::from_bits);
                let config = AdamConfig { beta1: bits()?, beta2: bits()?, eps: bits()? };
                let t = r.u64("adam step")?;
                let n = r.len("adam count")?;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    m.push(r.floats("adam m")?);
                    v.push(r.floats("adam v")?);
                }
                Some(AdamState { config, m, v, t })
            }
            _ => return Err(corrupt("adam flag")),
        };
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { config_text, epoch, dev_eer: (!eer.is_nan()).then_some(eer), params, banks, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Copies parameters and statistics into a model of the same layout.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!("{} parameters saved, model has {}", self.params.len(), model.store.len())));
        }
        for saved in &self.params {
            let id = model
                .store
                .find(&saved.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", saved.name)))?;
            model
                .store
                .set_value(id, saved.value.clone())
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", saved.name)))?;
        }
        let mut norms = model.encoder.batch_norms_mut();
        if norms.len() != self.banks.len() {
            return Err(Error::Checkpoint(format!("{} batch-norm layers saved, model has {}", self.banks.len(), norms.len())));
        }
        for (bn, (main, aux)) in norms.iter_mut().zip(&self.banks) {
            if main.mean.len() != bn.channels() || aux.mean.len() != bn.channels() {
                return Err(Error::Checkpoint("batch-norm channel mismatch".into()));
            }
            bn.main = main.clone();
            bn.aux = aux.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the embedded config.
    pub fn restore(&self) -> Result<(RunConfig, Model)> {
        let cfg = RunConfig::from_str_at(&self.config_text, Path::new("checkpoint"))
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut model = Model::new(cfg.encoder()?, cfg.margin()?, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.apply(&mut model)?;
        Ok((cfg, model))
    }
}
