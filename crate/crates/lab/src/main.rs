use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qac_core::editing::{zero_shot_edit, EditTask};
use qac_core::flows::FiniteDataset;
use qac_core::samplers::{conditional_sample, SolverConfig};
use qac_core::toy;
use qac_core::training::TrainState;
use qac_lab::checkpoint::load_state;
use qac_lab::config::ExperimentConfig;
use qac_lab::edits::{edit_op, EditKind};
use qac_lab::plot::{emit_plots, trajectory_plot, PlotSpec};
use qac_lab::runner::{
    ensure_trained, run_experiment, sampling_weights, sweep, ExperimentManifest, Layout, Vary, ROOT_ENV,
};
use qac_lab::tables::{parse_trajectory_csv, point_table, read_point_table, trajectory_csv};
use qac_lab::{results, LabError, Result};

/// Conditional flow matching experiments on toy data.
#[derive(Parser)]
#[command(name = "qac", version)]
struct Cli {
    /// Output root directory.
    #[arg(long, global = true, env = ROOT_ENV, default_value = "qac-out")]
    root: PathBuf,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key, e.g. `--set codebook.channels=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(self.set.iter().map(String::as_str))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Write the training set (or a held-out replicate) as a point table.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write held-out replicate N instead of the training set.
        #[arg(long)]
        heldout: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, or resume, the configured model and save its checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw samples from the trained model.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "euler")]
        solver: String,
        #[arg(long, default_value_t = 4)]
        nfe: usize,
        #[arg(long, default_value_t = 1024)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Load this checkpoint instead of the one in the output root.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every intermediate state as a trajectory CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Train if needed, evaluate, and append rows to the results CSV.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Zero-shot editing of a held-out tiny-shapes image.
    Edit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// inpaint, super-resolution or colorize.
        #[arg(long, default_value = "inpaint")]
        task: String,
        /// Index of the reference image in held-out replicate 0.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Point table with the reference, degraded and edited rows.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every combination of the varied keys.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `KEY=V1,V2,...`; repeatable, combined as a Cartesian product.
        #[arg(long, value_name = "KEY=VALUES", required = true)]
        vary: Vec<String>,
    },
    /// Render SVG plots from a results CSV or a trajectory CSV.
    Plot {
        /// Results CSV; defaults to the one in the output root.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Only plot these metrics; repeatable.
        #[arg(long)]
        metric: Vec<String>,
        /// Trajectory CSV to draw as a scatter overlay instead.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Point table drawn under the trajectories.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn trained(cfg: &ExperimentConfig, layout: &Layout, checkpoint: Option<&Path>) -> Result<(TrainState, FiniteDataset)> {
    let data = toy::generate(&cfg.train_spec()?)?;
    let state = match checkpoint {
        Some(p) => load_state(cfg, p)?,
        None => ensure_trained(cfg, layout, &data)?,
    };
    Ok((state, data))
}

fn run(cli: Cli) -> Result<()> {
    let layout = Layout::new(&cli.root);
    match cli.verb {
        Verb::Generate { cfg, heldout, out } => {
            let cfg = cfg.load()?;
            let spec = match heldout {
                Some(r) => cfg.heldout_spec(r)?,
                None => cfg.train_spec()?,
            };
            let data = toy::generate(&spec)?;
            let out = out.unwrap_or_else(|| layout.root.join("data").join(format!("{}.csv", cfg.name)));
            write_text(&out, &point_table(&data))?;
            println!("{}", out.display());
        }
        Verb::Train { cfg } => {
            let cfg = cfg.load()?;
            let (state, _) = trained(&cfg, &layout, None)?;
            println!("{} step={}", layout.checkpoint(&cfg).display(), state.step);
        }
        Verb::Sample {
            cfg,
            solver,
            nfe,
            count,
            seed,
            checkpoint,
            out,
            trajectory,
        } => {
            let cfg = cfg.load()?;
            let (state, data) = trained(&cfg, &layout, checkpoint.as_deref())?;
            let model = state.ema_model()?;
            let weights = sampling_weights(&cfg, &state, &model, &data)?;
            let solver = SolverConfig::with_nfe(&solver, nfe, &model.flow)?;
            let s = conditional_sample(&model, weights.as_ref(), &model.flow, &solver, count, seed)?;
            let mut samples = FiniteDataset::new(data.dim(), s.x.clone())?;
            if let Some(c) = s.codes.clone() {
                samples = samples.with_codes(c)?;
            }
            let out = out.unwrap_or_else(|| {
                layout
                    .root
                    .join("samples")
                    .join(format!("{}-{}-{nfe}-{seed}.csv", cfg.name, solver.name()))
            });
            write_text(&out, &point_table(&samples))?;
            if let Some(t) = trajectory {
                write_text(&t, &trajectory_csv(&s.trajectory, data.dim()))?;
            }
            println!("{} nfe={}", out.display(), s.nfe);
        }
        Verb::Eval { cfg } => {
            let cfg = cfg.load()?;
            let mut manifest = ExperimentManifest::plan(cfg, &layout)?;
            let rows = run_experiment(&mut manifest, &layout)?;
            print!("{}", results::render(&rows));
            eprintln!("manifest: {}", manifest.path().display());
        }
        Verb::Edit {
            cfg,
            task,
            index,
            steps,
            seed,
            checkpoint,
            out,
        } => {
            let cfg = cfg.load()?;
            let kind = EditKind::parse(&task)?;
            let shape = cfg
                .toy_kind()?
                .image_shape()
                .ok_or_else(|| LabError::validation("editing needs dataset = tiny-shapes"))?;
            let held = toy::generate(&cfg.heldout_spec(0)?)?;
            if index >= held.len() {
                return Err(LabError::validation(format!(
                    "--index {index} beyond {} held-out images",
                    held.len()
                )));
            }
            let (state, _) = trained(&cfg, &layout, checkpoint.as_deref())?;
            let model = state.ema_model()?;
            let op = edit_op(kind, shape, seed)?;
            let reference = held.point(index).to_vec();
            let degraded = op.pseudo_invert(&op.apply(&reference)?)?;
            let task = EditTask::new(&model, reference.clone(), op, steps, seed)?;
            let result = zero_shot_edit(&model, &task)?;
            let table = FiniteDataset::new(reference.len(), [reference, degraded, result.x].concat())?;
            let out = out.unwrap_or_else(|| {
                layout.root.join("edits").join(format!(
                    "{}-{task_name}-{index}-{seed}.csv",
                    cfg.name,
                    task_name = match kind {
                        EditKind::Inpaint => "inpaint",
                        EditKind::SuperResolution => "super-resolution",
                        EditKind::Colorize => "colorize",
                    }
                ))
            });
            write_text(&out, &point_table(&table))?;
            let trace: Vec<String> = result
                .code_trace
                .iter()
                .map(|c| c.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
                .collect();
            println!("{}", out.display());
            if !trace.is_empty() {
                println!("code trace: {}", trace.join(" | "));
            }
        }
        Verb::Sweep { cfg, vary } => {
            let cfg = cfg.load()?;
            let vary = vary.iter().map(|v| Vary::parse(v)).collect::<Result<Vec<_>>>()?;
            let outcomes = sweep(&cfg, &vary, &layout)?;
            let mut first_err = None;
            for o in outcomes {
                match o.result {
                    Ok(rows) => eprintln!("{}: {} rows", o.manifest.config.name, rows.len()),
                    Err(e) => {
                        eprintln!("{}: failed: {e}", o.manifest.config.name);
                        first_err.get_or_insert(e);
                    }
                }
            }
            println!("{}", layout.results().display());
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Verb::Plot {
            results: res,
            metric,
            trajectory,
            data,
            out,
        } => {
            let out = out.unwrap_or_else(|| layout.root.join("plots"));
            if let Some(t) = trajectory {
                let text = fs::read_to_string(&t).map_err(|e| LabError::Io {
                    path: t.clone(),
                    source: e,
                })?;
                let traj = parse_trajectory_csv(&text, &t)?;
                let reference = data.as_deref().map(read_point_table).transpose()?;
                let svg = trajectory_plot("trajectories", &traj, reference.as_ref().map(|d| d.points()));
                let p = out.join("trajectories.svg");
                write_text(&p, &svg)?;
                println!("{}", p.display());
                return Ok(());
            }
            let path = res.unwrap_or_else(|| layout.results());
            let rows = results::read(&path)?;
            let spec = PlotSpec {
                metrics: (!metric.is_empty()).then_some(metric),
            };
            let written = emit_plots(&rows, &spec, &out)?;
            if written.is_empty() {
                eprintln!("warning: no rows matched; no plots written");
            }
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
