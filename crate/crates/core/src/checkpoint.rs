//! Binary checkpoints: `BRUN`, u32 version, u32-prefixed config text, u32
//! record count, then per record a u16-prefixed name, u8 rank, u64 dims, u8
//! dtype tag and the little-endian payload. Integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use brau_tensor::{DType, Element, Tensor};

use crate::config::Config;
use crate::error::{BrauError, Result};
use crate::model::Model;
use crate::optim::Optimizer;

pub const MAGIC: &[u8; 4] = b"BRUN";
pub const VERSION: u32 = 1;
const META_PREFIX: &str = "state.";
const OPTIM_PREFIX: &str = "optim.";

/// Training progress stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMeta {
    pub epoch: u64,
    pub step: u64,
    pub best_dsc: Option<f64>,
    pub best_epoch: Option<u64>,
}

impl TrainMeta {
    fn to_lines(&self, optim_t: Option<u64>) -> String {
        let mut s = format!(
            "{META_PREFIX}epoch = {}\n{META_PREFIX}step = {}\n",
            self.epoch, self.step
        );
        if let Some(d) = self.best_dsc {
            s += &format!("{META_PREFIX}best_dsc = {d}\n");
        }
        if let Some(e) = self.best_epoch {
            s += &format!("{META_PREFIX}best_epoch = {e}\n");
        }
        if let Some(t) = optim_t {
            s += &format!("{META_PREFIX}optim_t = {t}\n");
        }
        s
    }
}

/// A decoded file: config, meta values and every record by name.
pub struct Checkpoint<T: Element> {
    pub config: Config,
    pub meta: TrainMeta,
    pub optim_t: Option<u64>,
    pub records: Vec<(String, Tensor<T>)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn record<T: Element>(&mut self, name: &str, t: &Tensor<T>) {
        let b = &mut self.0;
        b.extend_from_slice(&(name.len() as u16).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(t.rank() as u8);
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        b.push(T::DTYPE.tag());
        for &v in t.data() {
            v.write_le(b);
        }
    }
}

/// Serializes model weights (including running statistics), config, meta and
/// optionally optimizer buffers.
pub fn encode<T: Element>(
    cfg: &Config,
    meta: &TrainMeta,
    model: &Model<T>,
    optim: Option<&Optimizer<T>>,
) -> Vec<u8> {
    let mut records: Vec<(String, &Tensor<T>)> = model
        .params
        .ids()
        .map(|id| (model.params.name(id).to_string(), model.params.value(id)))
        .collect();
    if let Some(o) = optim {
        for id in model.params.ids() {
            let name = model.params.name(id);
            if let Some(m) = &o.m[id] {
                records.push((format!("{OPTIM_PREFIX}m.{name}"), m));
            }
            if let Some(v) = &o.v[id] {
                records.push((format!("{OPTIM_PREFIX}v.{name}"), v));
            }
        }
    }
    let text = cfg.to_text() + &meta.to_lines(optim.map(|o| o.t));
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.0.extend_from_slice(&(text.len() as u32).to_le_bytes());
    w.0.extend_from_slice(text.as_bytes());
    w.0.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in &records {
        w.record(name, t);
    }
    w.0
}

pub fn save<T: Element>(
    path: &Path,
    cfg: &Config,
    meta: &TrainMeta,
    model: &Model<T>,
    optim: Option<&Optimizer<T>>,
) -> Result<()> {
    // write then rename so a crash never leaves a torn file behind
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(cfg, meta, model, optim)).map_err(|e| BrauError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| BrauError::io(path, e))
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or_else(|| BrauError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| BrauError::Checkpoint(e.to_string()))
    }
}

fn parse_meta(lines: &BTreeMap<String, String>) -> Result<(TrainMeta, Option<u64>)> {
    fn num<V: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<Option<V>> {
        m.get(k)
            .map(|v| {
                v.parse()
                    .map_err(|_| BrauError::Checkpoint(format!("bad {META_PREFIX}{k} `{v}`")))
            })
            .transpose()
    }
    let meta = TrainMeta {
        epoch: num(lines, "epoch")?.unwrap_or(0),
        step: num(lines, "step")?.unwrap_or(0),
        best_dsc: num(lines, "best_dsc")?,
        best_epoch: num(lines, "best_epoch")?,
    };
    Ok((meta, num(lines, "optim_t")?))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(BrauError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(BrauError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let text = r.str(len)?;
    let mut cfg_text = String::new();
    let mut meta = BTreeMap::new();
    for line in text.lines() {
        match line
            .strip_prefix(META_PREFIX)
            .and_then(|l| l.split_once('='))
        {
            Some((k, v)) => {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            None => {
                cfg_text += line;
                cfg_text.push('\n');
            }
        }
    }
    let config = Config::parse(&cfg_text)?;
    let (meta, optim_t) = parse_meta(&meta)?;
    let n = r.u32()? as usize;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let nl = r.u16()? as usize;
        let name = r.str(nl)?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| BrauError::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * dtype.size())?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => raw.chunks(d.size()).map(T::read_le).collect(),
            DType::F32 => raw
                .chunks(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        records.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(BrauError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        meta,
        optim_t,
        records,
    })
}

pub fn load<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| BrauError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        BrauError::Checkpoint(m) => BrauError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl<T: Element> Checkpoint<T> {
    /// Rebuilds the model from the stored config and copies every weight in.
    pub fn model(&self) -> Result<Model<T>> {
        let mut model = Model::new(&self.config.model)?;
        let mut seen = 0;
        for (name, t) in &self.records {
            if name.starts_with(OPTIM_PREFIX) {
                continue;
            }
            let id = model
                .params
                .find(name)
                .ok_or_else(|| BrauError::Checkpoint(format!("unexpected parameter {name}")))?;
            if model.params.value(id).shape() != t.shape() {
                return Err(BrauError::Checkpoint(format!(
                    "{name}: stored {:?}, model expects {:?}",
                    t.shape(),
                    model.params.value(id).shape()
                )));
            }
            *model.params.value_mut(id) = t.clone();
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(BrauError::Checkpoint(format!(
                "{} of {} parameters present",
                seen,
                model.params.len()
            )));
        }
        Ok(model)
    }

    /// Optimizer state for `model`, empty buffers if none were stored.
    pub fn optimizer(&self, model: &Model<T>) -> Result<Optimizer<T>> {
        let mut o = Optimizer::new(&self.config.optim, model.params.len());
        o.t = self.optim_t.unwrap_or(0);
        for (name, t) in &self.records {
            let Some(rest) = name.strip_prefix(OPTIM_PREFIX) else {
                continue;
            };
            let (slot, pname) = rest
                .split_once('.')
                .ok_or_else(|| BrauError::Checkpoint(format!("bad optimizer record {name}")))?;
            let id = model.params.find(pname).ok_or_else(|| {
                BrauError::Checkpoint(format!("optimizer record for unknown {pname}"))
            })?;
            match slot {
                "m" => o.m[id] = Some(t.clone()),
                "v" => o.v[id] = Some(t.clone()),
                _ => {
                    return Err(BrauError::Checkpoint(format!(
                        "bad optimizer record {name}"
                    )))
                }
            }
        }
        Ok(o)
    }
}
