//! End-to-end runner, file-format and CLI behaviour on tiny budgets.

use std::fs;
use std::path::Path;
use std::process::Command;

use qac_core::toy;
use qac_lab::checkpoint::{load_state, save_state};
use qac_lab::config::ExperimentConfig;
use qac_lab::plot::{emit_plots, PlotSpec};
use qac_lab::results::{self, ResultRow};
use qac_lab::runner::{ensure_trained, run_experiment, sweep, ExperimentManifest, Layout, Status, Vary};
use qac_lab::LabError;

fn tiny(extra: &[&str]) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.apply([
        "dataset.count=512",
        "train.steps=40",
        "heldout.count=128",
        "eval.samples=128",
        "eval.replicates=2",
        "eval.nfe=2,4",
    ])
    .unwrap();
    c.apply(extra.iter().copied()).unwrap();
    c.validate().unwrap();
    c
}

fn run(cfg: &ExperimentConfig, root: &Path) -> qac_lab::Result<Vec<ResultRow>> {
    let layout = Layout::new(root);
    let mut m = ExperimentManifest::plan(cfg.clone(), &layout)?;
    run_experiment(&mut m, &layout)
}

#[test]
fn rerunning_a_manifest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    let first = run(&cfg, dir.path()).unwrap();
    assert_eq!(first.len(), 2);
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let again = run(&cfg, dir.path()).unwrap();
    assert_eq!(again, first);
    assert_eq!(fs::read_to_string(dir.path().join("results.csv")).unwrap(), csv);
}

#[test]
fn training_resumes_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let full = tiny(&[]);
    let data = toy::generate(&full.train_spec().unwrap()).unwrap();
    let straight = ensure_trained(&full, &layout, &data).unwrap();

    // Save half-way under the full configuration's hash, then resume.
    let dir2 = tempfile::tempdir().unwrap();
    let layout2 = Layout::new(dir2.path());
    let mut half = qac_core::training::TrainState::new(full.train_config(), full.init_model().unwrap()).unwrap();
    half.config.steps = 20;
    half.run(&data, |_, _| {}).unwrap();
    fs::create_dir_all(dir2.path().join("checkpoints")).unwrap();
    save_state(&half, &full.train_hash(), &layout2.checkpoint(&full)).unwrap();
    let resumed = ensure_trained(&full, &layout2, &data).unwrap();
    assert_eq!(resumed.step, 40);
    assert_eq!(resumed, straight);
}

#[test]
fn stale_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let a = tiny(&[]);
    let b = tiny(&["train.seed=99"]);
    let data = toy::generate(&a.train_spec().unwrap()).unwrap();
    ensure_trained(&a, &layout, &data).unwrap();
    fs::copy(layout.checkpoint(&a), layout.checkpoint(&b)).unwrap();
    let e = ensure_trained(&b, &layout, &data).unwrap_err();
    assert!(matches!(e, LabError::StaleCheckpoint { .. }), "{e}");
    assert_eq!(e.exit_code(), 1);
    assert!(load_state(&a, &layout.checkpoint(&a)).is_ok());
}

#[test]
fn manifests_verify_file_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny(&[]);
    let mut m = ExperimentManifest::plan(cfg.clone(), &layout).unwrap();
    run_experiment(&mut m, &layout).unwrap();
    let loaded = ExperimentManifest::load(&m.path()).unwrap();
    assert_eq!(loaded.status, Status::Complete);
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.files, m.files);
    assert!(loaded.files.keys().any(|p| p.ends_with("metrics.csv")));
    assert!(loaded.files.keys().any(|p| p.extension().is_some_and(|e| e == "qck")));

    let metrics = m.dir.join("metrics.csv");
    let mut text = fs::read_to_string(&metrics).unwrap();
    text.push_str("# tampered\n");
    fs::write(&metrics, text).unwrap();
    let e = ExperimentManifest::load(&m.path()).unwrap_err();
    assert!(matches!(e, LabError::HashMismatch { .. }), "{e}");
}

#[test]
fn failures_are_recorded_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = tiny(&[]);
    let mut m = ExperimentManifest::plan(cfg, &layout).unwrap();
    fs::create_dir_all(&m.dir).unwrap();
    fs::write(m.dir.join("data.csv"), "x0,x1\n0,0\n").unwrap();
    assert!(run_experiment(&mut m, &layout).is_err());
    let text = fs::read_to_string(m.path()).unwrap();
    assert!(text.contains("status=failed"), "{text}");
    assert!(text.contains("failed_stage=dataset"), "{text}");
    assert!(matches!(m.status, Status::Failed { .. }));
}

#[test]
fn reference_sweeps_emit_the_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let base = tiny(&["eval.nfe=2,3,4,8", "train.steps=10"]);
    let out = sweep(&base, &[Vary::parse("codebook.channels=0,4,8,12").unwrap()], &layout).unwrap();
    assert!(out.iter().all(|o| o.result.is_ok()));
    let rows = results::read(&layout.results()).unwrap();
    for d in [0, 4, 8, 12] {
        for nfe in [2, 3, 4, 8] {
            let n = rows
                .iter()
                .filter(|r| r.channels == d && r.nfe == nfe && r.metric == "w2")
                .count();
            assert_eq!(n, 1, "d={d} nfe={nfe}");
        }
    }

    // Solver comparison at a fixed budget.
    let cmp = tiny(&["eval.nfe=4", "eval.solvers=euler,heun,ipndm-afs", "train.steps=10"]);
    let rows = run(&cmp, dir.path()).unwrap();
    let solvers: Vec<&str> = rows.iter().map(|r| r.solver.as_str()).collect();
    assert_eq!(solvers, ["euler", "heun", "ipndm-afs"]);
    assert!(rows.iter().all(|r| r.nfe == 4));

    // Online/offline pair: one shared checkpoint, two rows each.
    let on = tiny(&["collection=online", "eval.nfe=4", "train.steps=10"]);
    let off = tiny(&["collection=offline", "eval.nfe=4", "train.steps=10"]);
    assert_eq!(on.train_hash(), off.train_hash());
    let a = run(&on, dir.path()).unwrap();
    let b = run(&off, dir.path()).unwrap();
    assert_eq!(
        (a[0].collection.as_str(), b[0].collection.as_str()),
        ("online", "offline")
    );
}

#[test]
fn plots_are_valid_svg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["eval.mc_samples=1000", "eval.curvature_nfe=4"]);
    let rows = run(&cfg, dir.path()).unwrap();
    let out = dir.path().join("plots");
    let written = emit_plots(&rows, &PlotSpec::default(), &out).unwrap();
    assert_eq!(written.len(), 5);
    for p in &written {
        let text = fs::read_to_string(p).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
    let one = emit_plots(&rows[..1], &PlotSpec::default(), &dir.path().join("one")).unwrap();
    assert_eq!(one.len(), 1);
    roxmltree::Document::parse(&fs::read_to_string(&one[0]).unwrap()).unwrap();
    let none = PlotSpec {
        metrics: Some(vec!["absent".into()]),
    };
    assert!(emit_plots(&rows, &none, &dir.path().join("none")).unwrap().is_empty());
    assert!(!dir.path().join("none").exists());
}

fn qac(root: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qac"))
        .env("QAC_OUT", root)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into(),
        String::from_utf8_lossy(&out.stderr).into(),
    )
}

#[test]
fn cli_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, tiny(&["train.steps=10"]).canonical()).unwrap();
    let c = cfg.to_str().unwrap();

    let (code, stdout, _) = qac(root, &["generate", "--config", c, "--set", "dataset.count=64"]);
    assert_eq!(code, 0);
    let table = qac_lab::tables::read_point_table(Path::new(stdout.trim())).unwrap();
    assert_eq!(table.len(), 64);

    let (code, stdout, _) = qac(root, &["eval", "--config", c]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with(results::HEADER));
    assert!(root.join("results.csv").exists());

    let traj = root.join("traj.csv");
    let (code, _, _) = qac(
        root,
        &[
            "sample",
            "--config",
            c,
            "--nfe",
            "3",
            "--count",
            "5",
            "--trajectory",
            traj.to_str().unwrap(),
        ],
    );
    assert_eq!(code, 0);
    let (code, stdout, _) = qac(root, &["plot", "--trajectory", traj.to_str().unwrap()]);
    assert_eq!(code, 0);
    roxmltree::Document::parse(&fs::read_to_string(stdout.trim()).unwrap()).unwrap();

    let (code, _, stderr) = qac(root, &["plot", "--metric", "absent"]);
    assert_eq!(code, 0);
    assert!(stderr.contains("warning"));

    let (code, _, _) = qac(root, &["eval", "--config", c, "--set", "flow=nope"]);
    assert_eq!(code, 1);
    let (code, _, _) = qac(root, &["frobnicate"]);
    assert_eq!(code, 1);
    fs::write(root.join("bad.csv"), format!("{}\nnot,a,row\n", results::HEADER)).unwrap();
    let (code, _, stderr) = qac(root, &["plot", "--results", root.join("bad.csv").to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(stderr.contains(":2:"), "{stderr}");
    let (code, _, _) = qac(root, &["plot", "--results", root.join("missing.csv").to_str().unwrap()]);
    assert_eq!(code, 2);
}
