//! Train, sample and evaluate one experiment cell, and sweeps over cells.
//!
//! Output root layout:
//!
//! ```text
//! <root>/results.csv                  shared, append-only, locked
//! <root>/checkpoints/<train hash>.qck training states, shared between cells
//! <root>/cells/<name>-<hash>/         one directory per configuration
//!     config.cfg  data.csv  metrics.csv  manifest.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qac_core::flows::FiniteDataset;
use qac_core::metrics::{curvature, wasserstein2};
use qac_core::model::Model;
use qac_core::samplers::{conditional_sample, SolverConfig};
use qac_core::toy;
use qac_core::training::{collect_weights_offline, decompose_loss, McConfig, SamplingWeights, TrainState};

use crate::checkpoint::{load_state, save_state};
use crate::config::{sha256_hex, Collection, ExperimentConfig};
use crate::error::{IoContext, LabError, Result};
use crate::results::{self, ResultRow};
use crate::tables::{read_point_table, write_point_table};

/// Environment variable naming the output root.
pub const ROOT_ENV: &str = "QAC_OUT";
pub const DEFAULT_ROOT: &str = "qac-out";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$QAC_OUT`, else `./qac-out`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.qck", &cfg.train_hash()[..16]))
    }

    pub fn cell(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root
            .join("cells")
            .join(format!("{}-{}", cfg.name, &cfg.hash()[..12]))
    }

    fn ensure(&self) -> Result<()> {
        for d in [
            self.root.clone(),
            self.root.join("checkpoints"),
            self.root.join("cells"),
        ] {
            fs::create_dir_all(&d).at(&d)?;
        }
        Ok(())
    }
}

/// One evaluation: a metric, how it was sampled, and where its rows live.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub metric: String,
    pub solver: String,
    pub nfe: usize,
    pub seeds: Vec<u64>,
    pub metrics_csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Planned,
    Complete,
    Failed { stage: String, error: String },
}

/// Everything needed to reproduce and audit one cell. File paths are
/// relative to the cell directory; `files` maps each to its SHA-256.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub evals: Vec<EvalRun>,
    pub status: Status,
    pub files: BTreeMap<PathBuf, String>,
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).at(path)?))
}

/// `a` relative to directory `base`, both under a common root.
fn relative(a: &Path, base: &Path) -> PathBuf {
    let a: Vec<_> = a.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &a[common..] {
        out.push(c);
    }
    out
}

impl ExperimentManifest {
    /// The manifest of a cell that has not run yet.
    pub fn plan(config: ExperimentConfig, layout: &Layout) -> Result<Self> {
        config.validate()?;
        let dir = layout.cell(&config);
        let checkpoint = relative(&layout.checkpoint(&config), &dir);
        let mut evals = Vec::new();
        let seeds: Vec<u64> = (0..config.replicates as u64).map(|r| config.eval_seed + r).collect();
        for s in &config.solvers {
            for &n in &config.nfe {
                evals.push(EvalRun {
                    metric: "w2".into(),
                    solver: s.clone(),
                    nfe: n,
                    seeds: seeds.clone(),
                    metrics_csv: "metrics.csv".into(),
                });
            }
        }
        if config.mc_samples > 0 {
            for m in ["l_cfm", "l_fm", "v"] {
                evals.push(EvalRun {
                    metric: m.into(),
                    solver: "-".into(),
                    nfe: 0,
                    seeds: vec![config.eval_seed],
                    metrics_csv: "metrics.csv".into(),
                });
            }
        }
        if config.curvature_nfe > 0 {
            evals.push(EvalRun {
                metric: "curvature".into(),
                solver: "euler".into(),
                nfe: config.curvature_nfe,
                seeds: vec![config.eval_seed],
                metrics_csv: "metrics.csv".into(),
            });
        }
        Ok(Self {
            config_hash: config.hash(),
            config,
            dir,
            checkpoint,
            evals,
            status: Status::Planned,
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join("manifest.txt")
    }

    pub fn render(&self) -> String {
        let c = &self.config;
        let mut lines = vec![
            format!("config_hash={}", self.config_hash),
            format!("train_hash={}", c.train_hash()),
            "config=config.cfg".to_string(),
            format!(
                "dataset={} count={} seed={} heldout_count={} heldout_seed={}",
                c.dataset, c.count, c.data_seed, c.heldout_count, c.heldout_seed
            ),
            format!(
                "train=flow={} levels={} channels={} steps={} lr={} batch={} ema={} seed={} init_seed={}",
                c.flow.name(),
                c.levels,
                c.channels,
                c.steps,
                c.lr,
                c.batch,
                c.ema,
                c.train_seed,
                c.init_seed
            ),
            format!("checkpoint={}", self.checkpoint.display()),
        ];
        for (i, e) in self.evals.iter().enumerate() {
            let seeds = e.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
            lines.push(format!(
                "eval.{i}=metric={} solver={} nfe={} seeds={} csv={}",
                e.metric,
                e.solver,
                e.nfe,
                seeds,
                e.metrics_csv.display()
            ));
        }
        match &self.status {
            Status::Planned => lines.push("status=planned".into()),
            Status::Complete => lines.push("status=complete".into()),
            Status::Failed { stage, error } => {
                lines.push("status=failed".into());
                lines.push(format!("failed_stage={stage}"));
                lines.push(format!("error={}", error.replace('\n', " ")));
            }
        }
        for (p, h) in &self.files {
            lines.push(format!("file.{}={h}", p.display()));
        }
        lines.join("\n") + "\n"
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).at(&self.dir)?;
        let p = self.path();
        fs::write(&p, self.render()).at(p)
    }

    /// Reads a manifest and checks that every referenced file exists with
    /// the recorded hash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut kv = BTreeMap::new();
        let mut files = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::parse(path, i + 1, "expected key=value"))?;
            match k.strip_prefix("file.") {
                Some(f) => {
                    files.insert(PathBuf::from(f), v.to_string());
                }
                None => {
                    kv.insert(k.to_string(), v.to_string());
                }
            }
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| LabError::validation(format!("{}: missing {k}", path.display())))
        };
        for (f, h) in &files {
            let p = dir.join(f);
            if !p.exists() {
                return Err(LabError::validation(format!(
                    "{}: referenced file {} is missing",
                    path.display(),
                    p.display()
                )));
            }
            let found = file_hash(&p)?;
            if &found != h {
                return Err(LabError::HashMismatch {
                    path: p,
                    expected: h.clone(),
                    found,
                });
            }
        }
        let config = ExperimentConfig::load(&dir.join(get("config")?))?;
        let config_hash = get("config_hash")?;
        if config.hash() != config_hash {
            return Err(LabError::HashMismatch {
                path: dir.join("config.cfg"),
                expected: config_hash,
                found: config.hash(),
            });
        }
        let status = match get("status")?.as_str() {
            "planned" => Status::Planned,
            "complete" => Status::Complete,
            _ => Status::Failed {
                stage: get("failed_stage")?,
                error: get("error")?,
            },
        };
        let layout_root = dir.join("../..");
        let mut m = Self::plan(config, &Layout::new(layout_root))?;
        m.dir = dir;
        m.checkpoint = PathBuf::from(get("checkpoint")?);
        m.status = status;
        m.files = files;
        Ok(m)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let h = file_hash(&self.dir.join(rel))?;
        self.files.insert(PathBuf::from(rel), h);
        Ok(())
    }
}

/// Trains (or resumes) the model of `config`, reusing a finished
/// checkpoint. A checkpoint written under another configuration is refused.
pub fn ensure_trained(config: &ExperimentConfig, layout: &Layout, data: &FiniteDataset) -> Result<TrainState> {
    layout.ensure()?;
    let path = layout.checkpoint(config);
    let mut state = if path.exists() {
        load_state(config, &path)?
    } else {
        TrainState::new(config.train_config(), config.init_model()?)?
    };
    if state.step < config.steps {
        state.run(data, |_, _| {})?;
        save_state(&state, &config.train_hash(), &path)?;
    }
    Ok(state)
}

/// Sampling weights for conditional models under the configured strategy.
pub fn sampling_weights(
    config: &ExperimentConfig,
    state: &TrainState,
    model: &Model,
    data: &FiniteDataset,
) -> Result<Option<SamplingWeights>> {
    let Some(enc) = model.encoder.as_ref() else {
        return Ok(None);
    };
    Ok(Some(match config.collection {
        Collection::Online => state
            .weights
            .clone()
            .ok_or_else(|| LabError::validation("conditional state lacks online weights"))?,
        Collection::Offline => collect_weights_offline(enc, data)?,
    }))
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// W2 between model samples and held-out data, averaged over replicates.
/// Replicate `r` uses held-out seed `heldout.seed + r` and sampling seed
/// `eval.seed + r`.
pub fn replicate_w2(
    config: &ExperimentConfig,
    model: &Model,
    weights: Option<&SamplingWeights>,
    solver: &SolverConfig,
) -> Result<(f64, f64)> {
    let flow = model.flow;
    let mut w = Vec::with_capacity(config.replicates);
    for r in 0..config.replicates {
        let held = toy::generate(&config.heldout_spec(r)?)?;
        let s = conditional_sample(
            model,
            weights,
            &flow,
            solver,
            config.samples,
            config.eval_seed + r as u64,
        )?;
        w.push(wasserstein2(&s.x, held.points(), held.dim())?);
    }
    Ok(mean_se(&w))
}

/// Computes every metric of the cell, calling `emit` as each row is ready.
pub fn evaluate(
    config: &ExperimentConfig,
    state: &TrainState,
    data: &FiniteDataset,
    mut emit: impl FnMut(ResultRow) -> Result<()>,
) -> Result<()> {
    let model = state.ema_model()?;
    let flow = model.flow;
    let weights = sampling_weights(config, state, &model, data)?;
    let row = |metric: &str, solver: &str, nfe: usize, (value, stderr): (f64, f64)| ResultRow {
        experiment: config.name.clone(),
        config_hash: config.hash(),
        metric: metric.into(),
        solver: solver.into(),
        nfe,
        channels: config.channels,
        collection: if model.is_conditional() {
            config.collection.name().into()
        } else {
            "-".into()
        },
        value,
        stderr,
        seed: config.eval_seed,
    };
    for s in &config.solvers {
        for &n in &config.nfe {
            let solver = SolverConfig::with_nfe(s, n, &flow)?;
            emit(row(
                "w2",
                s,
                n,
                replicate_w2(config, &model, weights.as_ref(), &solver)?,
            ))?;
        }
    }
    if config.mc_samples > 0 {
        let mut mc = McConfig::new(&flow, config.mc_samples, config.eval_seed);
        let coded;
        let target = if let Some(enc) = model.encoder.as_ref() {
            let codes = enc.encode(data.points())?.iter().map(|c| c.index()).collect();
            coded = data.clone().with_codes(codes)?;
            mc.conditional = true;
            &coded
        } else {
            data
        };
        let d = decompose_loss(&model, &flow, target, &mc)?;
        for (name, e) in [("l_cfm", d.l_cfm), ("l_fm", d.l_fm), ("v", d.v)] {
            emit(row(name, "-", 0, (e.mean, e.se)))?;
        }
    }
    if config.curvature_nfe > 0 {
        let solver = SolverConfig::with_nfe("euler", config.curvature_nfe, &flow)?;
        let s = conditional_sample(
            &model,
            weights.as_ref(),
            &flow,
            &solver,
            config.curvature_samples,
            config.eval_seed,
        )?;
        let c = curvature(&[s.trajectory], data.dim())?;
        emit(row(
            "curvature",
            "euler",
            config.curvature_nfe,
            mean_se(&c.per_trajectory),
        ))?;
    }
    Ok(())
}

/// Runs dataset generation, training and evaluation for the manifest's
/// cell, appending rows to the shared results CSV. A configuration whose
/// rows are already present is not evaluated again. Failures are recorded
/// in the manifest, and rows computed before the failure are kept in the
/// cell's `metrics.csv`.
pub fn run_experiment(manifest: &mut ExperimentManifest, layout: &Layout) -> Result<Vec<ResultRow>> {
    layout.ensure()?;
    fs::create_dir_all(&manifest.dir).at(&manifest.dir)?;
    let cfg_path = manifest.dir.join("config.cfg");
    fs::write(&cfg_path, manifest.config.canonical()).at(&cfg_path)?;
    manifest.record("config.cfg")?;
    let outcome = run_stages(manifest, layout);
    if let Err((stage, e)) = &outcome {
        manifest.status = Status::Failed {
            stage: (*stage).into(),
            error: e.to_string(),
        };
    }
    manifest.write()?;
    outcome.map_err(|(_, e)| e)
}

fn run_stages(
    manifest: &mut ExperimentManifest,
    layout: &Layout,
) -> std::result::Result<Vec<ResultRow>, (&'static str, LabError)> {
    let cfg = manifest.config.clone();
    let data_path = manifest.dir.join("data.csv");
    let data = (|| {
        let data = toy::generate(&cfg.train_spec()?)?;
        if data_path.exists() {
            if read_point_table(&data_path)? != data {
                return Err(LabError::validation(format!(
                    "{} differs from the generated dataset",
                    data_path.display()
                )));
            }
        } else {
            write_point_table(&data, &data_path)?;
        }
        Ok(data)
    })()
    .map_err(|e| ("dataset", e))?;
    manifest.record("data.csv").map_err(|e| ("dataset", e))?;

    let existing = results::rows_for(&layout.results(), &manifest.config_hash).map_err(|e| ("results", e))?;
    if !existing.is_empty() {
        let ckpt = layout.checkpoint(&cfg);
        if ckpt.exists() {
            load_state(&cfg, &ckpt).map_err(|e| ("train", e))?;
        }
        finish(manifest, layout, &existing).map_err(|e| ("results", e))?;
        return Ok(existing);
    }

    let state = ensure_trained(&cfg, layout, &data).map_err(|e| ("train", e))?;

    let metrics_path = manifest.dir.join("metrics.csv");
    let mut rows = Vec::new();
    let eval = evaluate(&cfg, &state, &data, |r| {
        rows.push(r);
        fs::write(&metrics_path, results::render(&rows)).at(&metrics_path)
    });
    if let Err(e) = eval {
        let _ = manifest.record("metrics.csv");
        return Err(("eval", e));
    }
    let (rows, _) =
        results::append_unless_present(&layout.results(), &manifest.config_hash, &rows).map_err(|e| ("results", e))?;
    finish(manifest, layout, &rows).map_err(|e| ("results", e))?;
    Ok(rows)
}

fn finish(manifest: &mut ExperimentManifest, layout: &Layout, rows: &[ResultRow]) -> Result<()> {
    let metrics_path = manifest.dir.join("metrics.csv");
    fs::write(&metrics_path, results::render(rows)).at(&metrics_path)?;
    manifest.record("metrics.csv")?;
    let ckpt = layout.checkpoint(&manifest.config);
    if ckpt.exists() {
        let rel = relative(&ckpt, &manifest.dir);
        manifest.files.insert(rel, file_hash(&ckpt)?);
    }
    manifest.status = Status::Complete;
    Ok(())
}

/// A sweep dimension: a configuration key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Vary {
    pub key: String,
    pub values: Vec<String>,
}

impl Vary {
    /// Parses `key=v1,v2,...`.
    pub fn parse(s: &str) -> Result<Self> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| LabError::validation(format!("expected key=v1,v2,..., got {s:?}")))?;
        let values: Vec<String> = v
            .split(',')
            .map(|x| x.trim().to_string())
            .filter(|x| !x.is_empty())
            .collect();
        if values.is_empty() {
            return Err(LabError::validation(format!("{k}: no values to sweep")));
        }
        Ok(Self {
            key: k.trim().into(),
            values,
        })
    }
}

/// Cartesian product of `vary` applied to `base`; each cell's name gets the
/// varied assignments appended.
pub fn sweep_configs(base: &ExperimentConfig, vary: &[Vary]) -> Result<Vec<ExperimentConfig>> {
    let mut cells = vec![base.clone()];
    for v in vary {
        let mut next = Vec::with_capacity(cells.len() * v.values.len());
        for c in &cells {
            for value in &v.values {
                let mut c = c.clone();
                c.set(&v.key, value)?;
                let tag = v.key.rsplit('.').next().unwrap_or(&v.key);
                c.name = format!("{}-{tag}{value}", c.name);
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.validate()?;
    }
    Ok(cells)
}

/// Outcome of one sweep cell.
#[derive(Debug)]
pub struct CellOutcome {
    pub manifest: ExperimentManifest,
    pub result: Result<Vec<ResultRow>>,
}

/// Runs every cell in order; a failing cell does not stop the others.
pub fn sweep(base: &ExperimentConfig, vary: &[Vary], layout: &Layout) -> Result<Vec<CellOutcome>> {
    let mut out = Vec::new();
    for cfg in sweep_configs(base, vary)? {
        let mut manifest = ExperimentManifest::plan(cfg, layout)?;
        let result = run_experiment(&mut manifest, layout);
        out.push(CellOutcome { manifest, result });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        assert_eq!(
            relative(Path::new("/r/checkpoints/a.qck"), Path::new("/r/cells/x")),
            PathBuf::from("../../checkpoints/a.qck")
        );
    }

    #[test]
    fn sweep_cells_are_the_cartesian_product() {
        let base = ExperimentConfig::default();
        let vary = [
            Vary::parse("codebook.channels=0,4").unwrap(),
            Vary::parse("collection=online,offline").unwrap(),
        ];
        let cells = sweep_configs(&base, &vary).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].name, "ring8-channels0-collectionoffline");
        assert!(Vary::parse("x").is_err());
        assert!(sweep_configs(&base, &[Vary::parse("flow=zz").unwrap()]).is_err());
    }
}
