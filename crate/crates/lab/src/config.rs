//! Plain-text `key = value` experiment configuration.
//!
//! Every key has a default, so an empty file is a valid configuration (the
//! conditional 8-ring reference model). Lists are comma separated. Lines
//! starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use qac_core::denoiser::{DenoiserConfig, DenoiserNet};
use qac_core::flows::{FlowFamily, FlowSpec};
use qac_core::fsq::{CodebookConfig, EncoderArch, EncoderNet};
use qac_core::model::Model;
use qac_core::rng;
use qac_core::samplers::SolverConfig;
use qac_core::toy::{ToyKind, ToySpec};
use qac_core::training::{TimeDistribution, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::{IoContext, LabError, Result};

/// How sampling weights are obtained for conditional sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Collection {
    /// EMA of per-batch code frequencies accumulated during training.
    Online,
    /// Code histogram of the final encoder over the training set.
    Offline,
}

impl Collection {
    pub fn name(self) -> &'static str {
        match self {
            Collection::Online => "online",
            Collection::Offline => "offline",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: String,
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
    pub cells: usize,
    pub half_width: f64,
    pub noise: f64,
    pub image_channels: usize,
    pub count: usize,
    pub data_seed: u64,
    pub heldout_count: usize,
    pub heldout_seed: u64,
    pub flow: FlowFamily,
    pub levels: u32,
    /// Code channels `d`; 0 trains an unconditional model.
    pub channels: u32,
    pub encoder_hidden: usize,
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    pub ema: f64,
    pub train_seed: u64,
    pub init_seed: u64,
    pub collection: Collection,
    pub solvers: Vec<String>,
    pub nfe: Vec<usize>,
    pub samples: usize,
    pub replicates: usize,
    pub eval_seed: u64,
    /// Monte-Carlo samples for the loss decomposition; 0 skips it.
    pub mc_samples: usize,
    /// Euler NFE of the curvature measurement; 0 skips it.
    pub curvature_nfe: usize,
    pub curvature_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "ring8".into(),
            dataset: "gaussian-ring".into(),
            modes: 8,
            radius: 2.0,
            std: 0.1,
            cells: 4,
            half_width: 2.0,
            noise: 0.05,
            image_channels: 1,
            count: 4096,
            data_seed: 1,
            heldout_count: 1024,
            heldout_seed: 100,
            flow: FlowFamily::RectifiedFlow,
            levels: 2,
            channels: 12,
            encoder_hidden: 32,
            steps: 5000,
            lr: 2e-3,
            batch: 256,
            ema: 0.999,
            train_seed: 11,
            init_seed: 7,
            collection: Collection::Offline,
            solvers: vec!["euler".into()],
            nfe: vec![2, 3, 4, 8],
            samples: 1024,
            replicates: 8,
            eval_seed: 300,
            mc_samples: 0,
            curvature_nfe: 0,
            curvature_samples: 256,
        }
    }
}

/// Keys that determine the trained model; checkpoints are shared between
/// configurations that agree on all of them.
const TRAIN_KEYS: &[&str] = &[
    "dataset",
    "dataset.modes",
    "dataset.radius",
    "dataset.std",
    "dataset.cells",
    "dataset.half_width",
    "dataset.noise",
    "dataset.channels",
    "dataset.count",
    "dataset.seed",
    "flow",
    "codebook.levels",
    "codebook.channels",
    "encoder.hidden",
    "train.steps",
    "train.lr",
    "train.batch",
    "train.ema",
    "train.seed",
    "init.seed",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LabError::validation(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every accepted key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("name", self.name.clone()),
            ("dataset", self.dataset.clone()),
            ("dataset.modes", self.modes.to_string()),
            ("dataset.radius", self.radius.to_string()),
            ("dataset.std", self.std.to_string()),
            ("dataset.cells", self.cells.to_string()),
            ("dataset.half_width", self.half_width.to_string()),
            ("dataset.noise", self.noise.to_string()),
            ("dataset.channels", self.image_channels.to_string()),
            ("dataset.count", self.count.to_string()),
            ("dataset.seed", self.data_seed.to_string()),
            ("heldout.count", self.heldout_count.to_string()),
            ("heldout.seed", self.heldout_seed.to_string()),
            ("flow", self.flow.name().into()),
            ("codebook.levels", self.levels.to_string()),
            ("codebook.channels", self.channels.to_string()),
            ("encoder.hidden", self.encoder_hidden.to_string()),
            ("train.steps", self.steps.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.ema", self.ema.to_string()),
            ("train.seed", self.train_seed.to_string()),
            ("init.seed", self.init_seed.to_string()),
            ("collection", self.collection.name().into()),
            ("eval.solvers", self.solvers.join(",")),
            ("eval.nfe", join(&self.nfe)),
            ("eval.samples", self.samples.to_string()),
            ("eval.replicates", self.replicates.to_string()),
            ("eval.seed", self.eval_seed.to_string()),
            ("eval.mc_samples", self.mc_samples.to_string()),
            ("eval.curvature_nfe", self.curvature_nfe.to_string()),
            ("eval.curvature_samples", self.curvature_samples.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "name" => self.name = v.into(),
            "dataset" => self.dataset = v.into(),
            "dataset.modes" => self.modes = parse_num(key, v)?,
            "dataset.radius" => self.radius = parse_num(key, v)?,
            "dataset.std" => self.std = parse_num(key, v)?,
            "dataset.cells" => self.cells = parse_num(key, v)?,
            "dataset.half_width" => self.half_width = parse_num(key, v)?,
            "dataset.noise" => self.noise = parse_num(key, v)?,
            "dataset.channels" => self.image_channels = parse_num(key, v)?,
            "dataset.count" => self.count = parse_num(key, v)?,
            "dataset.seed" => self.data_seed = parse_num(key, v)?,
            "heldout.count" => self.heldout_count = parse_num(key, v)?,
            "heldout.seed" => self.heldout_seed = parse_num(key, v)?,
            "flow" => {
                self.flow =
                    FlowFamily::parse(v).ok_or_else(|| LabError::validation(format!("flow: unknown family {v:?}")))?
            }
            "codebook.levels" => self.levels = parse_num(key, v)?,
            "codebook.channels" => self.channels = parse_num(key, v)?,
            "encoder.hidden" => self.encoder_hidden = parse_num(key, v)?,
            "train.steps" => self.steps = parse_num(key, v)?,
            "train.lr" => self.lr = parse_num(key, v)?,
            "train.batch" => self.batch = parse_num(key, v)?,
            "train.ema" => self.ema = parse_num(key, v)?,
            "train.seed" => self.train_seed = parse_num(key, v)?,
            "init.seed" => self.init_seed = parse_num(key, v)?,
            "collection" => {
                self.collection = match v {
                    "online" => Collection::Online,
                    "offline" => Collection::Offline,
                    _ => {
                        return Err(LabError::validation(format!(
                            "collection: expected online or offline, got {v:?}"
                        )))
                    }
                }
            }
            "eval.solvers" => self.solvers = parse_list(key, v)?,
            "eval.nfe" => self.nfe = parse_list(key, v)?,
            "eval.samples" => self.samples = parse_num(key, v)?,
            "eval.replicates" => self.replicates = parse_num(key, v)?,
            "eval.seed" => self.eval_seed = parse_num(key, v)?,
            "eval.mc_samples" => self.mc_samples = parse_num(key, v)?,
            "eval.curvature_nfe" => self.curvature_nfe = parse_num(key, v)?,
            "eval.curvature_samples" => self.curvature_samples = parse_num(key, v)?,
            other => return Err(LabError::validation(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` assignments in order.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| LabError::validation(format!("expected key=value, got {a:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::parse(origin, i + 1, "expected key = value"))?;
            cfg.set(k, v)
                .map_err(|e| LabError::parse(origin, i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text, path)
    }

    /// `key=value` lines for every key; parsing it gives back `self`.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// SHA-256 of the canonical text; any field change changes it.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    /// SHA-256 over the keys that determine the trained model.
    pub fn train_hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if TRAIN_KEYS.contains(&k) {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        sha256_hex(s.as_bytes())
    }

    pub fn toy_kind(&self) -> Result<ToyKind> {
        Ok(match self.dataset.as_str() {
            "gaussian-ring" => ToyKind::GaussianRing {
                modes: self.modes,
                radius: self.radius,
                std: self.std,
            },
            "checkerboard" => ToyKind::Checkerboard {
                cells: self.cells,
                half_width: self.half_width,
            },
            "two-moons" => ToyKind::TwoMoons { noise: self.noise },
            "tiny-shapes" => ToyKind::TinyShapes {
                channels: self.image_channels,
            },
            other => return Err(LabError::validation(format!("dataset: unknown kind {other:?}"))),
        })
    }

    pub fn train_spec(&self) -> Result<ToySpec> {
        Ok(ToySpec {
            kind: self.toy_kind()?,
            count: self.count,
            seed: self.data_seed,
        })
    }

    /// Held-out set of replicate `r`.
    pub fn heldout_spec(&self, r: usize) -> Result<ToySpec> {
        Ok(ToySpec {
            kind: self.toy_kind()?,
            count: self.heldout_count,
            seed: self.heldout_seed + r as u64,
        })
    }

    pub fn flow_spec(&self) -> FlowSpec {
        FlowSpec::for_family(self.flow)
    }

    pub fn codebook(&self) -> Result<Option<CodebookConfig>> {
        if self.channels == 0 {
            return Ok(None);
        }
        Ok(Some(CodebookConfig::new(self.levels, self.channels)?))
    }

    pub fn train_config(&self) -> TrainConfig {
        let flow = self.flow_spec();
        let mut tc = match self.flow {
            FlowFamily::LinearEdm => TrainConfig::edm(self.steps, self.train_seed),
            FlowFamily::RectifiedFlow => TrainConfig::rectified(self.steps, self.train_seed),
            FlowFamily::Vp | FlowFamily::Ve => TrainConfig {
                flow,
                time: TimeDistribution::Uniform {
                    lo: flow.sample_floor,
                    hi: flow.t_max,
                },
                ..TrainConfig::rectified(self.steps, self.train_seed)
            },
        };
        tc.optimizer.lr = self.lr;
        tc.batch_size = self.batch;
        tc.ema_decay = self.ema;
        tc
    }

    /// A freshly initialized model for this configuration.
    pub fn init_model(&self) -> Result<Model> {
        let kind = self.toy_kind()?;
        let flow = self.flow_spec();
        let cb = self.codebook()?;
        let mut r = rng::seeded(self.init_seed);
        let den_cfg = match (kind.image_shape(), self.flow) {
            (Some(shape), _) => DenoiserConfig::image_edm(shape, cb, flow.sigma_data),
            (None, FlowFamily::LinearEdm) => DenoiserConfig::toy_edm(kind.dim(), cb, flow.sigma_data),
            (None, _) => DenoiserConfig::toy_velocity(kind.dim(), cb),
        };
        let den = DenoiserNet::new(den_cfg, &mut r)?;
        let enc = match cb {
            None => None,
            Some(cb) => {
                let arch = match kind.image_shape() {
                    Some(shape) => EncoderArch::Conv {
                        channels: shape.channels,
                        height: shape.height,
                        width: shape.width,
                        features: self.encoder_hidden,
                    },
                    None => EncoderArch::Mlp {
                        input_dim: kind.dim(),
                        hidden: self.encoder_hidden,
                    },
                };
                Some(EncoderNet::new(arch, cb, &mut r)?)
            }
        };
        Ok(Model::new(flow, den, enc)?)
    }

    /// Rejects configurations that cannot run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::validation(m));
        if self.name.is_empty() || self.name.contains(['/', '\\', ',', '\n']) {
            return bad(format!(
                "name {:?} must be non-empty without separators or commas",
                self.name
            ));
        }
        let kind = self.toy_kind()?;
        self.train_spec()?.validate()?;
        self.heldout_spec(0)?.validate()?;
        if kind.image_shape().is_some() && self.flow != FlowFamily::LinearEdm {
            return bad("tiny-shapes models use the edm flow".into());
        }
        self.codebook()?;
        self.train_config().validate()?;
        if self.replicates == 0 || self.samples == 0 {
            return bad("eval.samples and eval.replicates must be positive".into());
        }
        if self.heldout_count != self.samples {
            return bad("heldout.count must equal eval.samples (W2 compares equal-size sets)".into());
        }
        if self.samples > qac_core::metrics::EXACT_LIMIT {
            return bad(format!("eval.samples is limited to {}", qac_core::metrics::EXACT_LIMIT));
        }
        if self.curvature_nfe == 1 {
            return bad("eval.curvature_nfe needs at least 2 steps".into());
        }
        let flow = self.flow_spec();
        for s in &self.solvers {
            for &n in &self.nfe {
                SolverConfig::with_nfe(s, n, &flow)?;
            }
        }
        if self.mc_samples != 0 && self.mc_samples < qac_core::training::MIN_MC_SAMPLES {
            return bad(format!(
                "eval.mc_samples must be 0 or at least {}",
                qac_core::training::MIN_MC_SAMPLES
            ));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply([
            "codebook.channels=4",
            "eval.nfe=1,5",
            "train.lr=0.0005",
            "collection=online",
        ])
        .unwrap();
        let back = ExperimentConfig::parse(&c.canonical(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn every_field_changes_the_hash() {
        let base = ExperimentConfig::default();
        let alt = [
            "name=x",
            "dataset=two-moons",
            "dataset.modes=3",
            "dataset.radius=1.5",
            "dataset.std=0.2",
            "dataset.cells=6",
            "dataset.half_width=1",
            "dataset.noise=0.1",
            "dataset.channels=2",
            "dataset.count=99",
            "dataset.seed=2",
            "heldout.count=5",
            "heldout.seed=6",
            "flow=vp",
            "codebook.levels=3",
            "codebook.channels=4",
            "encoder.hidden=9",
            "train.steps=1",
            "train.lr=0.1",
            "train.batch=3",
            "train.ema=0.9",
            "train.seed=3",
            "init.seed=4",
            "collection=online",
            "eval.solvers=heun",
            "eval.nfe=5",
            "eval.samples=7",
            "eval.replicates=2",
            "eval.seed=1",
            "eval.mc_samples=1000",
            "eval.curvature_nfe=3",
            "eval.curvature_samples=2",
        ];
        assert_eq!(alt.len(), base.entries().len());
        for a in alt {
            let mut c = base.clone();
            c.apply([a]).unwrap();
            assert_ne!(c.hash(), base.hash(), "{a}");
        }
    }

    #[test]
    fn collection_and_eval_keys_leave_the_train_hash() {
        let base = ExperimentConfig::default();
        let mut c = base.clone();
        c.apply(["collection=online", "eval.nfe=16", "name=other"]).unwrap();
        assert_eq!(c.train_hash(), base.train_hash());
        c.apply(["train.seed=12"]).unwrap();
        assert_ne!(c.train_hash(), base.train_hash());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = ExperimentConfig::parse("# c\nflow = rf\nbogus\n", Path::new("f.cfg")).unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 3, .. }), "{e}");
        let e = ExperimentConfig::parse("flow = xx\n", Path::new("f.cfg")).unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 1, .. }), "{e}");
        assert!(ExperimentConfig::parse("dataset = tiny-shapes\n", Path::new("f")).is_err());
        assert!(ExperimentConfig::parse("eval.mc_samples = 10\n", Path::new("f")).is_err());
    }
}
