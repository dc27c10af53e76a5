//! On-disk checkpoints: a text header followed by a little-endian binary
//! payload. The header records the format version, a SHA-256 of the payload
//! and enough configuration to rebuild the networks before the payload
//! overwrites their parameters.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{ChannelSpec, NormStats};
use crate::error::{Error, Result};
use crate::model::Tfdpm;
use crate::nn::ParamStore;
use crate::scheduler::SchedulerNet;
use crate::tape::Tensor;

const MAGIC: &str = "TFDPM-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const END_HEADER: &str = "end_header";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn store(&mut self, store: &ParamStore) {
        self.u64(store.len() as u64);
        for id in store.ids() {
            let t = store.get(id);
            self.str(store.name(id));
            self.u64(t.ndim() as u64);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            let data: Vec<f64> = t.iter().copied().collect();
            self.f64s(&data);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("payload truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| bad(format!("implausible length {n}")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))
    }

    /// Overwrite every parameter of `store`, requiring names and shapes to
    /// match exactly.
    fn store_into(&mut self, store: &mut ParamStore) -> Result<()> {
        let n = self.len()?;
        if n != store.len() {
            return Err(bad(format!("checkpoint has {n} tensors, network expects {}", store.len())));
        }
        for _ in 0..n {
            let name = self.str()?;
            let id = store
                .by_name(&name)
                .ok_or_else(|| bad(format!("unexpected parameter {name:?}")))?;
            let ndim = self.len()?;
            let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            if shape != store.get(id).shape() {
                return Err(bad(format!(
                    "parameter {name:?} has shape {shape:?}, network expects {:?}",
                    store.get(id).shape()
                )));
            }
            let data = self.f64s()?;
            let t = Tensor::from_shape_vec(shape, data).map_err(|e| bad(format!("parameter {name:?}: {e}")))?;
            store.set(id, t);
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(bad(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Parsed header: ordered `key = value` fields.
struct Header {
    fields: Vec<(String, String)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("header lacks {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| bad(format!("invalid header value {v:?} for {key}")))
    }

    /// `config.*` fields as run configuration text.
    fn config(&self) -> Result<RunConfig> {
        let text: String = self
            .fields
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
            .collect();
        RunConfig::from_ini(&text).map_err(|e| bad(format!("embedded configuration: {e}")))
    }
}

fn encode(kind: &str, fields: &[(String, String)], payload: &[u8]) -> Vec<u8> {
    let mut head = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\nkind = {kind}\n");
    let _ = writeln!(head, "payload_sha256 = {}", sha256_hex(payload));
    let _ = writeln!(head, "payload_bytes = {}", payload.len());
    for (k, v) in fields {
        let _ = writeln!(head, "{k} = {v}");
    }
    head.push_str(END_HEADER);
    head.push('\n');
    let mut out = head.into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Split a checkpoint into a verified header and payload.
fn decode<'a>(bytes: &'a [u8], kind: &str) -> Result<(Header, &'a [u8])> {
    let marker = format!("\n{END_HEADER}\n");
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .ok_or_else(|| bad("missing header terminator"))?;
    let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[split + marker.len()..];
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file"));
    }
    let fields = lines
        .map(|l| {
            l.split_once(" = ")
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| bad(format!("malformed header line {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = Header { fields };
    let version: u32 = header.parse("format_version")?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let found = header.get("kind")?;
    if found != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {found}")));
    }
    if header.parse::<usize>("payload_bytes")? != payload.len() {
        return Err(bad("payload length does not match header"));
    }
    if header.get("payload_sha256")? != sha256_hex(payload) {
        return Err(bad("payload hash mismatch"));
    }
    Ok((header, payload))
}

fn model_payload(model: &Tfdpm) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.f64s(&model.norm_stats.min);
    w.f64s(&model.norm_stats.max);
    w.store(&model.store);
    w.0
}

/// Identity of a model's parameters and normalisation, as stored in its
/// checkpoint header.
pub fn model_hash(model: &Tfdpm) -> String {
    sha256_hex(&model_payload(model))
}

pub fn encode_model(model: &Tfdpm) -> Result<Vec<u8>> {
    let channels = serde_json::to_string(&model.channels).map_err(|e| bad(e.to_string()))?;
    let mut fields = vec![
        ("dim".to_string(), model.dim.to_string()),
        ("channels".to_string(), channels),
    ];
    for line in model.config.to_ini().lines() {
        let (k, v) = line.split_once(" = ").expect("config lines are key = value");
        fields.push((format!("config.{k}"), v.to_string()));
    }
    Ok(encode("model", &fields, &model_payload(model)))
}

pub fn decode_model(bytes: &[u8]) -> Result<Tfdpm> {
    let (header, payload) = decode(bytes, "model")?;
    let config = header.config()?;
    let dim: usize = header.parse("dim")?;
    let channels: Vec<ChannelSpec> =
        serde_json::from_str(header.get("channels")?).map_err(|e| bad(format!("channels: {e}")))?;
    let mut model = Tfdpm::new(&config, dim)?;
    model.channels = channels;
    let mut r = Reader { buf: payload, pos: 0 };
    let min = r.f64s()?;
    let max = r.f64s()?;
    if min.len() != max.len() {
        return Err(bad("normalisation bounds differ in length"));
    }
    model.norm_stats = NormStats { min, max };
    r.store_into(&mut model.store)?;
    r.finish()?;
    Ok(model)
}

pub fn save_model(model: &Tfdpm, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Tfdpm> {
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_scheduler(sched: &SchedulerNet, base: &Tfdpm) -> Vec<u8> {
    let fields: Vec<(String, String)> = [
        ("base_sha256", model_hash(base)),
        ("dim", sched.dim.to_string()),
        ("cond_size", sched.cond_size.to_string()),
        ("hidden", sched.hidden.to_string()),
        ("tau", sched.tau.to_string()),
        ("init_alpha_bar", format!("{:?}", sched.init_alpha_bar)),
        ("init_beta", format!("{:?}", sched.init_beta)),
        ("beta_floor", format!("{:?}", sched.beta_floor)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut w = Writer(Vec::new());
    w.store(&sched.store);
    encode("scheduler", &fields, &w.0)
}

/// Decode a scheduler checkpoint, refusing one trained against a different
/// base model.
pub fn decode_scheduler(bytes: &[u8], base: &Tfdpm) -> Result<SchedulerNet> {
    let (header, payload) = decode(bytes, "scheduler")?;
    let expected = model_hash(base);
    let found = header.get("base_sha256")?;
    if found != expected {
        return Err(bad(format!(
            "scheduler was trained against model {found}, not {expected}"
        )));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut sched = SchedulerNet::new(
        &mut rng,
        header.parse("dim")?,
        header.parse("cond_size")?,
        header.parse("hidden")?,
        header.parse("tau")?,
        header.parse("init_alpha_bar")?,
        header.parse("init_beta")?,
        header.parse("beta_floor")?,
    )
    .map_err(|e| bad(format!("scheduler header: {e}")))?;
    let mut r = Reader { buf: payload, pos: 0 };
    r.store_into(&mut sched.store)?;
    r.finish()?;
    Ok(sched)
}

pub fn save_scheduler(sched: &SchedulerNet, base: &Tfdpm, path: &Path) -> Result<()> {
    std::fs::write(path, encode_scheduler(sched, base)).map_err(|e| Error::io(path, e))
}

pub fn load_scheduler(path: &Path, base: &Tfdpm) -> Result<SchedulerNet> {
    decode_scheduler(&std::fs::read(path).map_err(|e| Error::io(path, e))?, base)
}
