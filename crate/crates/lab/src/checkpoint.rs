//! Self-describing binary container of named `f64` arrays.
//!
//! Layout (all integers little-endian), documented in `docs/checkpoint.md`:
//!
//! ```text
//! magic      8 bytes  "QACKPT\0\0"
//! version    u32      1
//! header_len u32      byte length of the header text
//! header     UTF-8    "key=value\n" lines
//! count      u32      number of records
//! record*    name_len u32, name UTF-8, rank u32, dims u64 * rank,
//!            data f64 * prod(dims) as raw IEEE-754 bits
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use qac_core::tensor::Tensor;
use qac_core::training::{SamplingWeights, TrainState};

use crate::config::ExperimentConfig;
use crate::error::{IoContext, LabError, Result};

pub const MAGIC: &[u8; 8] = b"QACKPT\0\0";
pub const VERSION: u32 = 1;

/// Decoded container: header entries and records in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: BTreeMap<String, String>,
    pub records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| LabError::validation(format!("{}: {msg}", origin.display()));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated version"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let htext = std::str::from_utf8(r.take(hlen).ok_or_else(|| bad("truncated header"))?)
            .map_err(|_| bad("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in htext.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32().ok_or_else(|| bad("truncated record count"))?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let name = std::str::from_utf8(r.take(nlen).ok_or_else(|| bad("truncated record name"))?)
                .map_err(|_| bad("record name is not UTF-8"))?
                .to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r
                .take(n.checked_mul(8).ok_or_else(|| bad("record too large"))?)
                .ok_or_else(|| bad("truncated data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after the last record"));
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        // Write-then-rename so readers never see a partial file.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes, path)
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn push_set(records: &mut Vec<(String, Tensor)>, prefix: &str, names: &[String], tensors: &[Tensor]) {
    for (n, t) in names.iter().zip(tensors) {
        records.push((format!("{prefix}{n}"), t.clone()));
    }
}

fn push_moments(records: &mut Vec<(String, Tensor)>, prefix: &str, moments: (&[Vec<f64>], &[Vec<f64>])) {
    for (tag, list) in [("m", moments.0), ("v", moments.1)] {
        for (i, m) in list.iter().enumerate() {
            records.push((format!("{prefix}{tag}.{i}"), Tensor::vector(m.clone())));
        }
    }
}

fn moments(c: &Container, prefix: &str, count: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut out = (Vec::new(), Vec::new());
    for (tag, list) in [("m", &mut out.0), ("v", &mut out.1)] {
        for i in 0..count {
            match c.get(&format!("{prefix}{tag}.{i}")) {
                Some(t) => list.push(t.data().to_vec()),
                None => break,
            }
        }
    }
    out
}

/// Serializes a training state for the configuration with train hash
/// `train_hash`.
pub fn save_state(state: &TrainState, train_hash: &str, path: &Path) -> Result<()> {
    let mut header = BTreeMap::new();
    header.insert("format".to_string(), "qac-train-state".to_string());
    header.insert("train_hash".to_string(), train_hash.to_string());
    header.insert("step".to_string(), state.step.to_string());
    header.insert("opt.den.steps".to_string(), state.opt_denoiser.steps().to_string());
    let mut records = Vec::new();
    let den = state.model.denoiser.params();
    push_set(&mut records, "den.", den.names(), den.tensors());
    push_set(
        &mut records,
        "ema.den.",
        state.ema_denoiser.names(),
        state.ema_denoiser.tensors(),
    );
    push_moments(&mut records, "opt.den.", state.opt_denoiser.moments());
    if let (Some(enc), Some(ema), Some(opt)) = (&state.model.encoder, &state.ema_encoder, &state.opt_encoder) {
        header.insert("opt.enc.steps".to_string(), opt.steps().to_string());
        push_set(&mut records, "enc.", enc.params().names(), enc.params().tensors());
        push_set(&mut records, "ema.enc.", ema.names(), ema.tensors());
        push_moments(&mut records, "opt.enc.", opt.moments());
    }
    if let Some(w) = &state.weights {
        header.insert("weights.size".to_string(), w.size().to_string());
        if let Some(mu) = w.decay() {
            header.insert("weights.decay".to_string(), mu.to_string());
        }
        let entries = w.entries();
        let flat = entries.iter().flat_map(|&(i, v)| [i as f64, v]).collect();
        records.push(("weights".to_string(), Tensor::new(vec![entries.len(), 2], flat)?));
    }
    Container { header, records }.write(path)
}

/// Loads a training state saved for `config`, refusing checkpoints written
/// under a different training configuration.
pub fn load_state(config: &ExperimentConfig, path: &Path) -> Result<TrainState> {
    let c = Container::read(path)?;
    let expected = config.train_hash();
    let found = c.header.get("train_hash").cloned().unwrap_or_default();
    if found != expected {
        return Err(LabError::StaleCheckpoint {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let header_num = |k: &str| -> Result<u64> {
        c.header
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| LabError::validation(format!("{}: header lacks {k}", path.display())))
    };
    let mut state = TrainState::new(config.train_config(), config.init_model()?)?;
    state.step = header_num("step")?;
    let named = |prefix: &str, names: &[String]| -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| {
                c.get(&format!("{prefix}{n}"))
                    .cloned()
                    .ok_or_else(|| LabError::validation(format!("{}: missing record {prefix}{n}", path.display())))
            })
            .collect()
    };
    let den_names = state.model.denoiser.params().names().to_vec();
    state.model.denoiser.params_mut().load(named("den.", &den_names)?)?;
    state.ema_denoiser.load(named("ema.den.", &den_names)?)?;
    let (m, v) = moments(&c, "opt.den.", den_names.len());
    state.opt_denoiser.restore(header_num("opt.den.steps")?, m, v)?;
    if let Some(enc) = state.model.encoder.as_mut() {
        let names = enc.params().names().to_vec();
        enc.params_mut().load(named("enc.", &names)?)?;
        if let Some(ema) = state.ema_encoder.as_mut() {
            ema.load(named("ema.enc.", &names)?)?;
        }
        let (m, v) = moments(&c, "opt.enc.", names.len());
        if let Some(opt) = state.opt_encoder.as_mut() {
            opt.restore(header_num("opt.enc.steps")?, m, v)?;
        }
    }
    if let Some(w) = state.weights.as_mut() {
        let t = c
            .get("weights")
            .ok_or_else(|| LabError::validation(format!("{}: missing weights", path.display())))?;
        let entries: Vec<(u64, f64)> = t.data().chunks(2).map(|p| (p[0] as u64, p[1])).collect();
        *w = SamplingWeights::from_entries(w.size(), w.decay(), &entries)?;
    }
    Ok(state)
}
