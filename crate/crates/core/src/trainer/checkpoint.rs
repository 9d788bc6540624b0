//! Binary checkpoints.
//!
//! ```text
//! "MOBO" | version u32 | progress (u32 len, text) | config echo (u32 len, text)
//!        | header crc32 u32 | tensor count u32 | tensor*
//! tensor: name (u32 len, utf8) | dtype u8 | rank u8 | dims u64*rank
//!         | payload f64*numel | crc32 u32 over name, dims and payload
//! ```
//!
//! Integers and floats are little-endian. Tensor names are `param:<name>`,
//! `adam.m:<name>` and `adam.v:<name>`. Sampling and data streams are pure
//! functions of `(seed, stage, step)`, so the progress record is the
//! complete random-number state.

use std::fs;
use std::path::Path;

use super::adamw::{AdamW, AdamWConfig};
use super::config::TrainConfig;
use crate::backbones::{LoraSpec, ModelSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MOBO";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Position in the pipeline: `stage_step` steps of `config.stages[stage_index]`
/// are done. A finished stage `i` is recorded as `(i + 1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub stage_index: usize,
    pub stage_step: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub progress: Progress,
    pub models: ModelSet,
    /// Present only mid-stage; each stage starts a fresh optimizer.
    pub opt: Option<AdamW>,
}

fn progress_text(ck: &Checkpoint) -> String {
    let lora = ck.models.lora.unwrap_or(LoraSpec { rank: 0, alpha: 0.0 });
    let opt_step = ck.opt.as_ref().map(|o| o.step as i64).unwrap_or(-1);
    format!(
        "stage_index = {}\nstage_step = {}\nopt_step = {}\nlora_rank = {}\nlora_alpha = {}\nrng_seed = {}\n",
        ck.progress.stage_index,
        ck.progress.stage_step,
        opt_step,
        lora.rank,
        toml::Value::Float(lora.alpha),
        ck.models.seed
    )
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend((s.len() as u32).to_le_bytes());
    buf.extend(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    let start = buf.len();
    put_tensor_body(buf, name, t);
    let crc = crc32fast::hash(&buf[start..]);
    buf.extend(crc.to_le_bytes());
}

/// The per-tensor crc32 stored in the file.
pub fn tensor_checksum(name: &str, t: &Tensor) -> u32 {
    let mut buf = Vec::new();
    put_tensor_body(&mut buf, name, t);
    crc32fast::hash(&buf)
}

fn put_tensor_body(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(buf, name);
    buf.push(DTYPE_F64);
    buf.push(t.shape().len() as u8);
    for d in t.shape() {
        buf.extend((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    let header_start = buf.len();
    put_str(&mut buf, &progress_text(ck));
    put_str(&mut buf, &ck.config.echo());
    let crc = crc32fast::hash(&buf[header_start..]);
    buf.extend(crc.to_le_bytes());
    let store = &ck.models.store;
    let n = store.len() * if ck.opt.is_some() { 3 } else { 1 };
    buf.extend((n as u32).to_le_bytes());
    for (_, e) in store.iter() {
        put_tensor(&mut buf, &format!("param:{}", e.name), &e.value);
    }
    if let Some(opt) = &ck.opt {
        for (kind, ts) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
            for ((_, e), t) in store.iter().zip(ts.iter()) {
                put_tensor(&mut buf, &format!("{kind}:{}", e.name), t);
            }
        }
    }
    buf
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, encode(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity {
                offset: self.buf.len() as u64,
                reason: format!("file truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Integrity {
            offset: at as u64,
            reason: format!("{what} is not valid UTF-8"),
        })
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let start = r.pos;
    let name = r.string("tensor name")?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F64 {
        return Err(Error::Integrity {
            offset: (r.pos - 1) as u64,
            reason: format!("unknown dtype {dtype} for `{name}`"),
        });
    }
    let rank = r.u8("rank")? as usize;
    let dims = (0..rank)
        .map(|_| r.u64("dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = dims.iter().product();
    let payload = r.take(numel * 8, "tensor payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let body_end = r.pos;
    let crc = r.u32("tensor checksum")?;
    if crc32fast::hash(&r.buf[start..body_end]) != crc {
        return Err(Error::Integrity {
            offset: start as u64,
            reason: format!("checksum mismatch in tensor `{name}`"),
        });
    }
    Ok((name, Tensor::new(dims, data)?))
}

fn header_field(text: &str, key: &str) -> Result<toml::Value> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Format(format!("progress record: {}", e.message())))?;
    table
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Format(format!("progress record lacks `{key}`")))
}

fn header_int(text: &str, key: &str) -> Result<i64> {
    header_field(text, key)?
        .as_integer()
        .ok_or_else(|| Error::Format(format!("`{key}` is not an integer")))
}

/// Named tensors in file order, plus the raw header texts.
pub fn read_tensors(bytes: &[u8]) -> Result<(String, String, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_start = r.pos;
    let progress = r.string("progress record")?;
    let config = r.string("config echo")?;
    let header_end = r.pos;
    if crc32fast::hash(&bytes[header_start..header_end]) != r.u32("header checksum")? {
        return Err(Error::Integrity {
            offset: header_start as u64,
            reason: "header checksum mismatch".into(),
        });
    }
    let n = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        tensors.push(read_tensor(&mut r)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity {
            offset: r.pos as u64,
            reason: "trailing bytes after the last tensor".into(),
        });
    }
    Ok((progress, config, tensors))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (progress, config_text, tensors) = read_tensors(bytes)?;
    let config = TrainConfig::parse(&config_text)?;
    let lora_rank = header_int(&progress, "lora_rank")? as usize;
    let lora_alpha = match header_field(&progress, "lora_alpha")? {
        toml::Value::Float(f) => f,
        toml::Value::Integer(i) => i as f64,
        v => return Err(Error::Format(format!("`lora_alpha` is not a number: {v}"))),
    };
    let seed = header_int(&progress, "rng_seed")? as u64;
    let mut models = ModelSet::new(config.model.clone(), seed)?;
    if lora_rank > 0 {
        models.apply_lora(LoraSpec {
            rank: lora_rank,
            alpha: lora_alpha,
        })?;
    }
    let opt_step = header_int(&progress, "opt_step")?;
    let mut opt = (opt_step >= 0).then(|| AdamW {
        step: opt_step as u64,
        ..AdamW::new(AdamWConfig::default(), &models.store)
    });
    let expected = models.store.len() * if opt.is_some() { 3 } else { 1 };
    if tensors.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, the configured model needs {expected}",
            tensors.len()
        )));
    }
    for (name, t) in tensors {
        let (kind, pname) = name
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("malformed tensor name `{name}`")))?;
        let id = models
            .store
            .id(pname)
            .ok_or_else(|| Error::Format(format!("tensor `{pname}` does not exist in the configured model")))?;
        let slot = match (kind, opt.as_mut()) {
            ("param", _) => models.store.value_mut(id),
            ("adam.m", Some(o)) => &mut o.m[id.index()],
            ("adam.v", Some(o)) => &mut o.v[id.index()],
            _ => return Err(Error::Format(format!("unexpected tensor `{name}`"))),
        };
        if slot.shape() != t.shape() {
            return Err(Error::dim("load_checkpoint", slot.shape(), t.shape()));
        }
        *slot = t;
    }
    Ok(Checkpoint {
        config,
        progress: Progress {
            stage_index: header_int(&progress, "stage_index")? as usize,
            stage_step: header_int(&progress, "stage_step")? as usize,
        },
        models,
        opt,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_opt: bool, lora: bool) -> Checkpoint {
        let config = TrainConfig::default();
        let mut models = ModelSet::new(config.model.clone(), 5).unwrap();
        if lora {
            models
                .apply_lora(LoraSpec {
                    rank: 2,
                    alpha: 4.0,
                })
                .unwrap();
        }
        let opt = with_opt.then(|| {
            let mut o = AdamW::new(AdamWConfig::default(), &models.store);
            o.step = 7;
            o.m[0].data_mut()[0] = 0.25;
            o
        });
        Checkpoint {
            config,
            progress: Progress {
                stage_index: 2,
                stage_step: 7,
            },
            models,
            opt,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for (with_opt, lora) in [(false, false), (true, true)] {
            let ck = sample(with_opt, lora);
            let bytes = encode(&ck);
            let back = decode(&bytes).unwrap();
            assert_eq!(encode(&back), bytes);
            assert_eq!(back.progress, ck.progress);
            assert_eq!(back.models.lora, ck.models.lora);
            let names = |m: &ModelSet| m.store.iter().map(|(_, e)| e.name.clone()).collect::<Vec<_>>();
            assert_eq!(names(&back.models), names(&ck.models));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample(false, false));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        let last = bad.len() - 20;
        bad[last] ^= 0x40;
        assert!(matches!(decode(&bad), Err(Error::Integrity { .. })));

        let cut = bytes.len() - 100;
        match decode(&bytes[..cut]) {
            Err(Error::Integrity { offset, .. }) => assert_eq!(offset, cut as u64),
            other => panic!("{other:?}"),
        }
    }
}
