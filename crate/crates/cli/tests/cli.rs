use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowcast_cli::commands::{ablation_row, window_file, AblationRow};
use flowcast_cli::config::ObjectiveKind;
use flowcast_cli::manifest::Manifest;
use flowcast_cli::{Category, Run, RunConfig};
use flowcast_core::codec::{CodecConfig, LatentStats, Vae};
use flowcast_core::container::read_tensors;
use flowcast_core::data::{generate_events, extract_windows, EventSampler};
use flowcast_core::field::{ModelConfig, VectorFieldNet};
use flowcast_core::metrics::ThresholdSet;
use flowcast_core::nn::ParamStore;
use flowcast_core::ode::{Method, SolverConfig};
use flowcast_core::pipeline::{Codec, Forecaster, Sampler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
seed = 5
[data]
events = 10
[vae.codec]
widths = [4, 4, 4]
[vae.train]
steps = 3
batch = 2
[model]
base_dim = 8
attn_heads = 2
time_freq_dim = 8
[cfm.train]
steps = 3
batch = 2
eval_every = 2
[cfm.validation]
members = 1
steps = 1
[ddpm.train]
steps = 3
batch = 2
eval_every = 2
[ddpm.validation]
members = 1
steps = 1
[forecast]
members = 2
[forecast.solver]
method = "euler"
steps = 2
[ablate]
nfe = [1, 2]
objective_nfe = [1, 2]
solvers = ["euler", "rk4"]
solver_steps = 1
members = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowcast"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn flowcast(config: &Path, out: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(output: Output) -> Output {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn stderr_line(output: &Output) -> String {
    let s = String::from_utf8_lossy(&output.stderr).to_string();
    assert_eq!(s.trim_end().lines().count(), 1, "stderr should be a single line: {s}");
    s.trim_end().to_string()
}

fn tiny_run(out: &Path) -> Run {
    Run::new(RunConfig::parse(TINY).unwrap(), out)
}

/// Every regular file under `root` except wall-clock logs, with contents.
fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().unwrap().to_string_lossy().contains("timing") {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_counts_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    run.generate().unwrap();
    let windows = fs::read_dir(run.data_dir().join("windows")).unwrap().count();
    assert_eq!(windows, 10);
    let data = run.load_data().unwrap();
    let count = |l: f64| data.labels.iter().filter(|&&v| v == l).count();
    assert_eq!((count(0.0), count(1.0), count(2.0)), (6, 2, 2));
    Manifest::read(&run.data_dir().join("manifest.toml")).unwrap().verify(dir.path()).unwrap();
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_config(a.path());
    ok(flowcast(&cfg, &a.path().join("run"), &["generate"]));
    ok(flowcast(&cfg, &b.path().join("run"), &["generate"]));
    assert_eq!(snapshot(&a.path().join("run")), snapshot(&b.path().join("run")));
    let c = tempfile::tempdir().unwrap();
    ok(flowcast(&cfg, &c.path().join("run"), &["--seed", "6", "generate"]));
    assert_ne!(snapshot(&a.path().join("run")), snapshot(&c.path().join("run")));
}

#[test]
fn zero_events_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("zero.toml");
    fs::write(&cfg, "[data]\nevents = 0\n").unwrap();
    let out = flowcast(&cfg, &dir.path().join("run"), &["generate"]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error[config]:"));
}

#[test]
fn usage_errors_are_single_line() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error[usage]:"));
    let out = bin().args(["--seed", "abc", "generate"]).output().unwrap();
    assert!(stderr_line(&out).starts_with("error[usage]:"));
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data]\nunknown_key = 1\n").unwrap();
    let out = flowcast(&cfg, &dir.path().join("run"), &["generate"]);
    assert!(stderr_line(&out).starts_with("error[config]:"));
    let out = bin().args(["--config", "/nonexistent/cfg.toml", "generate"]).output().unwrap();
    assert!(stderr_line(&out).starts_with("error[io]:"));
    let out = bin().args(["--subset", "1.5", "config"]).output().unwrap();
    assert!(stderr_line(&out).starts_with("error[config]:"));
}

#[test]
fn config_command_echoes_overrides() {
    let out = ok(bin().args(["--seed", "42", "--subset", "0.5", "config"]).output().unwrap());
    let cfg = RunConfig::parse(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!((cfg.seed, cfg.subset), (42, 0.5));
}

#[test]
fn missing_prerequisites_name_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = flowcast(&cfg, &run, &["train", "vae"]);
    let line = stderr_line(&out);
    assert!(line.starts_with("error[prerequisite]:") && line.contains("dataset"), "{line}");
    ok(flowcast(&cfg, &run, &["generate"]));
    let out = flowcast(&cfg, &run, &["train", "cfm"]);
    let line = stderr_line(&out);
    assert!(line.starts_with("error[prerequisite]:") && line.contains("VAE"), "{line}");
    ok(flowcast(&cfg, &run, &["train", "vae"]));
    let out = flowcast(&cfg, &run, &["forecast"]);
    assert!(stderr_line(&out).contains("cfm checkpoint"));
    let out = flowcast(&cfg, &run, &["evaluate"]);
    assert!(stderr_line(&out).starts_with("error[prerequisite]:"));
    ok(flowcast(&cfg, &run, &["train", "cfm"]));
    let out = flowcast(&cfg, &run, &["ablate", "nfe"]);
    assert!(stderr_line(&out).contains("ddpm checkpoint"));
}

#[test]
fn full_pipeline_is_deterministic_and_chained() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_config(a.path());
    for root in [a.path(), b.path()] {
        let run = root.join("run");
        for args in [
            &["generate"][..],
            &["train", "vae"],
            &["train", "cfm"],
            &["train", "ddpm"],
            &["forecast"],
            &["evaluate"],
            &["ablate", "nfe"],
            &["ablate", "solver"],
            &["ablate", "objective"],
        ] {
            ok(flowcast(&cfg, &run, args));
        }
    }
    let (ra, rb) = (a.path().join("run"), b.path().join("run"));
    assert_eq!(snapshot(&ra), snapshot(&rb));

    // Forecast: two members per test window, NFE equal to the Euler steps.
    let fdir = ra.join("forecast/cfm-euler-2");
    let fm = Manifest::read(&fdir.join("manifest.toml")).unwrap();
    assert_eq!(fm.nfe, Some(2));
    let members = read_tensors(&window_file(&fdir, 8)).unwrap();
    assert_eq!(members[0].shape(), &[2, 12, 32, 32]);
    let timing = fs::read_to_string(fdir.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().next(), Some("window,nfe,seconds"));
    assert_eq!(timing.lines().count(), 3);

    // Manifests chain evaluate -> forecast -> checkpoint -> data and verify.
    let em = Manifest::read(&ra.join("evaluate/cfm-euler-2/manifest.toml")).unwrap();
    assert_eq!(em.parents[0].path, "forecast/cfm-euler-2/manifest.toml");
    let parents: Vec<&str> = fm.parents.iter().map(|p| p.path.as_str()).collect();
    assert_eq!(parents, ["data/manifest.toml", "vae/manifest.toml", "cfm/manifest.toml"]);
    let cm = Manifest::read(&ra.join("cfm/manifest.toml")).unwrap();
    assert!(cm.parents.iter().any(|p| p.path == "vae/manifest.toml"));
    for m in [&em, &fm, &cm] {
        m.verify(&ra).unwrap();
    }
    assert_eq!(cm.config, RunConfig::parse(TINY).unwrap());

    // Evaluation output layout.
    let report = fs::read_to_string(ra.join("evaluate/cfm-euler-2/report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("threshold,lead_time_minutes,metric,value"));
    assert!(report.contains("M,all,csi_m,"));
    assert!(ra.join("evaluate/cfm-euler-2/persistence.csv").exists());

    // Training logs and checkpoint selection.
    let log = fs::read_to_string(ra.join("cfm/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(cm.selected_step.is_some());

    // Ablations: rows ordered by NFE within each method, one per requested point.
    let nfe = fs::read_to_string(ra.join("ablate/nfe.csv")).unwrap();
    let rows: Vec<Vec<&str>> = nfe.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let methods: Vec<(&str, &str)> = rows.iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(methods, [("cfm-euler", "1"), ("cfm-euler", "2"), ("ddim", "1"), ("ddim", "2")]);
    let solver = fs::read_to_string(ra.join("ablate/solver.csv")).unwrap();
    let nfes: Vec<&str> = solver.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(nfes, ["1", "4"]);
    let svg = fs::read_to_string(ra.join("ablate/objective.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    assert!(ra.join("ablate/objective_timing.csv").exists());
}

#[test]
fn ddpm_training_logs_repeat() {
    let a = tempfile::tempdir().unwrap();
    let run = tiny_run(a.path());
    run.generate().unwrap();
    run.train_vae().unwrap();
    run.train_model(ObjectiveKind::Ddpm).unwrap();
    let first = fs::read(run.stage_dir("ddpm").join("log.csv")).unwrap();
    run.train_model(ObjectiveKind::Ddpm).unwrap();
    assert_eq!(fs::read(run.stage_dir("ddpm").join("log.csv")).unwrap(), first);
}

#[test]
fn single_member_forecast_and_subset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.forecast.members = 1;
    cfg.subset = 0.5;
    let run = Run::new(cfg, dir.path());
    run.generate().unwrap();
    run.train_vae().unwrap();
    run.train_model(ObjectiveKind::Cfm).unwrap();
    let label = run.forecast().unwrap();
    let files: Vec<_> = fs::read_dir(run.forecast_dir(&label))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(".fct"))
        .collect();
    assert_eq!(files, ["w00008.fct"]);
    let members = read_tensors(&run.forecast_dir(&label).join("w00008.fct")).unwrap();
    assert_eq!(members[0].shape()[0], 1);
}

#[test]
fn evaluate_lists_missing_windows() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    run.generate().unwrap();
    run.train_vae().unwrap();
    run.train_model(ObjectiveKind::Cfm).unwrap();
    let label = run.forecast().unwrap();
    let before = fs::read(window_file(&run.forecast_dir(&label), 8)).unwrap();
    run.evaluate().unwrap();
    assert_eq!(fs::read(window_file(&run.forecast_dir(&label), 8)).unwrap(), before);
    fs::remove_file(window_file(&run.forecast_dir(&label), 9)).unwrap();
    let err = run.evaluate().unwrap_err();
    assert_eq!(err.category, Category::Data);
    assert!(err.message.contains("w00009"), "{}", err.message);
}

#[test]
fn zero_field_gives_identical_rows_at_every_nfe() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut vstore = ParamStore::new();
    let vae = Vae::new(CodecConfig { widths: [4, 4, 4], ..CodecConfig::default() }, &mut vstore, &mut rng).unwrap();
    let stats = LatentStats::identity(4);
    let mut store = ParamStore::new();
    let cfg = ModelConfig { base_dim: 8, attn_heads: 2, time_freq_dim: 8, ..ModelConfig::default() };
    let net = VectorFieldNet::new(cfg, &mut store, &mut rng).unwrap();
    let f = Forecaster { codec: Codec { vae: &vae, store: &vstore, stats: &stats }, net: &net, params: &store };
    let events = generate_events(&EventSampler::default(), 2, 3);
    let windows: Vec<_> = events.iter().flat_map(|(_, s)| extract_windows(s, 12).unwrap()).collect();
    let refs: Vec<_> = windows.iter().collect();
    let thresholds = ThresholdSet::sevir_unit();
    let rows: Vec<AblationRow> = [1, 2, 5]
        .iter()
        .map(|&n| {
            let s = Sampler::Flow(SolverConfig::fixed(Method::Euler, n));
            ablation_row(&f, &s, &refs, &[0, 1], 2, &thresholds, 7).unwrap()
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.nfe).collect::<Vec<_>>(), [1, 2, 5]);
    for r in &rows[1..] {
        assert_eq!(r.scores, rows[0].scores);
    }
}
