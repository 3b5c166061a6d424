//! Pipeline commands. Every command reads its inputs from, and writes its
//! outputs under, one run directory:
//!
//! ```text
//! data/       events.fct  split.fct  windows/wNNNNN.fct  manifest.toml
//! vae/        params.fct  stats.fct  log.csv  manifest.toml
//! cfm/ ddpm/  live.fct  ema.fct  best.fct  log.csv  manifest.toml
//! forecast/<label>/  wNNNNN.fct  timing.csv  manifest.toml
//! evaluate/<label>/  report.csv  persistence.csv  manifest.toml
//! ablate/     <kind>.csv  <kind>.svg  <kind>_timing.csv  <kind>.toml
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowcast_core::cfm::CfmObjective;
use flowcast_core::codec::{train_vae, LatentStats, Vae};
use flowcast_core::container::{read_tensors, write_tensors, Dtype};
use flowcast_core::data::{extract_windows, generate_events, split_chronological, SampleWindow};
use flowcast_core::diffusion::{DdpmObjective, NoiseSchedule};
use flowcast_core::field::VectorFieldNet;
use flowcast_core::metrics::{Aggregates, ThresholdSet};
use flowcast_core::nn::ParamStore;
use flowcast_core::ode::SolverConfig;
use flowcast_core::pipeline::{
    encode_windows, evaluate_forecasts, fit_stats, latent_source, persistence_report, window_seed, Codec, Forecast,
    Forecaster, Sampler,
};
use flowcast_core::tensor::Tensor;
use flowcast_core::train::{log_to_csv, train, TrainOutcome, Validator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ObjectiveKind, RunConfig, Validation};
use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path, write_file, Manifest};
use crate::svg;

pub const SPLIT_TRAIN: f64 = 0.0;
pub const SPLIT_VAL: f64 = 1.0;
pub const SPLIT_TEST: f64 = 2.0;

/// Seed offsets so each stage draws from its own stream.
const VAE_SEED: u64 = 1;
const CFM_SEED: u64 = 2;
const DDPM_SEED: u64 = 3;
const FORECAST_SEED: u64 = 4;

fn stage_seed(seed: u64, stage: u64) -> u64 {
    window_seed(seed, stage as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Nfe,
    Solver,
    Objective,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Nfe => "nfe",
            AblationKind::Solver => "solver",
            AblationKind::Objective => "objective",
        }
    }
}

pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

pub fn window_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("w{id:05}.fct"))
}

fn require(what: &str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(what, path))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_file(path, text.as_bytes())
}

fn write_fct(path: &Path, tensors: &[&Tensor]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(write_tensors(path, tensors, Dtype::F64)?)
}

fn save_store(path: &Path, store: &ParamStore) -> CliResult<()> {
    write_fct(path, &store.tensors().iter().collect::<Vec<_>>())
}

fn load_store(path: &Path, mut store: ParamStore) -> CliResult<ParamStore> {
    store.load_values(read_tensors(path)?)?;
    Ok(store)
}

/// Generated dataset with per-window split labels.
pub struct Dataset {
    pub windows: Vec<SampleWindow>,
    pub labels: Vec<f64>,
    pub events: Vec<Tensor>,
    pub event_labels: Vec<f64>,
}

impl Dataset {
    fn ids(&self, label: f64) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Trained codec and its standardization.
pub struct CodecState {
    pub vae: Vae,
    pub store: ParamStore,
    pub stats: LatentStats,
    pub manifest: PathBuf,
}

impl CodecState {
    pub fn codec(&self) -> Codec<'_> {
        Codec { vae: &self.vae, store: &self.store, stats: &self.stats }
    }
}

/// Trained vector-field network in its selected (best EMA) weights.
pub struct ModelState {
    pub net: VectorFieldNet,
    pub params: ParamStore,
    pub schedule: Option<NoiseSchedule>,
    pub manifest: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Run { config, out: out.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn stage_dir(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn forecast_dir(&self, label: &str) -> PathBuf {
        self.out.join("forecast").join(label)
    }

    pub fn evaluate_dir(&self, label: &str) -> PathBuf {
        self.out.join("evaluate").join(label)
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.config)
    }

    fn finish(&self, m: &mut Manifest, dir: &Path, artifacts: &[PathBuf], parents: &[PathBuf]) -> CliResult<()> {
        for a in artifacts {
            m.add_artifact(&self.out, a)?;
        }
        for p in parents {
            m.add_parent(&self.out, p)?;
        }
        m.write(&manifest_path(dir))
    }

    pub fn generate(&self) -> CliResult<()> {
        let d = &self.config.data;
        if d.events == 0 {
            return Err(CliError::config("data.events must be at least 1"));
        }
        let events = generate_events(&d.sampler, d.events, self.config.seed);
        let split = split_chronological((0..events.len()).collect(), (d.ratios[0], d.ratios[1], d.ratios[2]))?;
        let mut event_labels = vec![SPLIT_TRAIN; events.len()];
        split.val.iter().for_each(|&i| event_labels[i] = SPLIT_VAL);
        split.test.iter().for_each(|&i| event_labels[i] = SPLIT_TEST);

        let dir = self.data_dir();
        let mut artifacts = Vec::new();
        let mut labels = Vec::new();
        let mut owners = Vec::new();
        let mut id = 0;
        for (e, (_, seq)) in events.iter().enumerate() {
            for w in extract_windows(seq, d.stride)? {
                let path = window_file(&dir.join("windows"), id);
                write_fct(&path, &[&w.past, &w.future])?;
                artifacts.push(path);
                labels.push(event_labels[e]);
                owners.push(e as f64);
                id += 1;
            }
        }
        if id == 0 {
            return Err(CliError::data(format!(
                "events of {} frames yield no windows",
                d.sampler.frames_per_event
            )));
        }
        let frames: Vec<&Tensor> = events.iter().map(|(_, s)| &s.frames).collect();
        let events_path = dir.join("events.fct");
        write_fct(&events_path, &frames)?;
        let split_path = dir.join("split.fct");
        let t = |v: Vec<f64>| Tensor::new([v.len()], v);
        write_fct(&split_path, &[&t(labels)?, &t(owners)?, &t(event_labels)?])?;
        artifacts.splice(0..0, [events_path, split_path]);
        self.finish(&mut self.manifest("generate"), &dir, &artifacts, &[])
    }

    pub fn load_data(&self) -> CliResult<Dataset> {
        let dir = self.data_dir();
        require("dataset manifest (run `generate`)", &manifest_path(&dir))?;
        let split = read_tensors(&dir.join("split.fct"))?;
        if split.len() != 3 {
            return Err(CliError::data("split.fct must hold window labels, owners and event labels"));
        }
        let labels = split[0].data().to_vec();
        let windows = flowcast_core::par::try_map_indices(labels.len(), |i| -> CliResult<SampleWindow> {
            let path = window_file(&dir.join("windows"), i);
            require("window file", &path)?;
            let mut t = read_tensors(&path)?;
            if t.len() != 2 {
                return Err(CliError::data(format!("{} must hold past and future", path.display())));
            }
            let future = t.pop().expect("two records");
            let past = t.pop().expect("two records");
            Ok(SampleWindow { past, future })
        })?;
        let events = read_tensors(&dir.join("events.fct"))?;
        Ok(Dataset { windows, labels, events, event_labels: split[2].data().to_vec() })
    }

    pub fn train_vae(&self) -> CliResult<()> {
        let data = self.load_data()?;
        let frames: Vec<Tensor> = data
            .events
            .iter()
            .zip(&data.event_labels)
            .filter(|(_, &l)| l == SPLIT_TRAIN)
            .flat_map(|(e, _)| (0..e.shape()[0]).map(move |k| e.index_outer(k)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(self.config.seed, VAE_SEED));
        let mut store = ParamStore::new();
        let vae = Vae::new(self.config.vae.codec.clone(), &mut store, &mut rng)?;
        let log = train_vae(&vae, &mut store, &frames, &self.config.vae.train, stage_seed(self.config.seed, VAE_SEED))?;
        let train: Vec<SampleWindow> = data.ids(SPLIT_TRAIN).into_iter().map(|i| data.windows[i].clone()).collect();
        let stats = fit_stats(&encode_windows(&vae, &store, &train)?)?;

        let dir = self.stage_dir("vae");
        let params = dir.join("params.fct");
        save_store(&params, &store)?;
        let stats_path = dir.join("stats.fct");
        let st = |v: &Vec<f64>| Tensor::new([v.len()], v.clone());
        write_fct(&stats_path, &[&st(&stats.mean)?, &st(&stats.std)?])?;
        let mut csv = String::from("step,loss,lr\n");
        for r in &log {
            let _ = writeln!(csv, "{},{:.12e},{:.12e}", r.step, r.loss, r.lr);
        }
        let log_path = dir.join("log.csv");
        write_text(&log_path, &csv)?;
        self.finish(&mut self.manifest("train vae"), &dir, &[params, stats_path, log_path], &[manifest_path(&self.data_dir())])
    }

    pub fn load_codec(&self) -> CliResult<CodecState> {
        let dir = self.stage_dir("vae");
        let manifest = manifest_path(&dir);
        require("VAE checkpoint (run `train vae`)", &manifest)?;
        let m = Manifest::read(&manifest)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let vae = Vae::new(m.config.vae.codec, &mut store, &mut rng)?;
        let store = load_store(&dir.join("params.fct"), store)?;
        let st = read_tensors(&dir.join("stats.fct"))?;
        if st.len() != 2 {
            return Err(CliError::data("stats.fct must hold mean and std"));
        }
        let stats = LatentStats { mean: st[0].data().to_vec(), std: st[1].data().to_vec() };
        Ok(CodecState { vae, store, stats, manifest })
    }

    fn subset_ids(&self, data: &Dataset, label: f64) -> Vec<usize> {
        let ids = data.ids(label);
        let n = self.config.subset_len(ids.len());
        ids[..n].to_vec()
    }

    pub fn train_model(&self, kind: ObjectiveKind) -> CliResult<()> {
        let data = self.load_data()?;
        let codec = self.load_codec()?;
        let train_windows: Vec<SampleWindow> =
            data.ids(SPLIT_TRAIN).into_iter().map(|i| data.windows[i].clone()).collect();
        let latents = encode_windows(&codec.vae, &codec.store, &train_windows)?;
        let source = latent_source(&latents, &codec.stats)?;

        let (seed, train_cfg, validation) = match kind {
            ObjectiveKind::Cfm => (CFM_SEED, &self.config.cfm.train, &self.config.cfm.validation),
            ObjectiveKind::Ddpm => (DDPM_SEED, &self.config.ddpm.train, &self.config.ddpm.validation),
        };
        let seed = stage_seed(self.config.seed, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = VectorFieldNet::new(self.config.model.clone(), &mut store, &mut rng)?;
        let schedule = self.config.ddpm.schedule()?;
        let sampler = match kind {
            ObjectiveKind::Cfm => Sampler::Flow(SolverConfig::fixed(flowcast_core::ode::Method::Euler, validation.steps)),
            ObjectiveKind::Ddpm => Sampler::Ddim { steps: validation.steps, schedule: schedule.clone() },
        };
        let val_ids = self.subset_ids(&data, SPLIT_VAL);
        let thresholds = self.config.evaluate.threshold_set()?;
        let mut validator = |params: &ParamStore| -> flowcast_core::Result<Option<f64>> {
            validation_score(&codec, &net, params, &data, &val_ids, validation, &sampler, &thresholds, seed)
        };
        let hook: Option<&mut Validator<'_>> = if val_ids.is_empty() { None } else { Some(&mut validator) };
        let outcome = match kind {
            ObjectiveKind::Cfm => train(&net, &store, &source, &CfmObjective { sigma: self.config.cfm.sigma }, train_cfg, seed, hook),
            ObjectiveKind::Ddpm => train(&net, &store, &source, &DdpmObjective { schedule }, train_cfg, seed, hook),
        }?;
        self.write_checkpoint(kind, &outcome, &codec.manifest)
    }

    fn write_checkpoint(&self, kind: ObjectiveKind, outcome: &TrainOutcome, vae_manifest: &Path) -> CliResult<()> {
        let dir = self.stage_dir(kind.name());
        let live = dir.join("live.fct");
        save_store(&live, &outcome.params)?;
        let ema = dir.join("ema.fct");
        save_store(&ema, &outcome.ema)?;
        let best = dir.join("best.fct");
        save_store(&best, &outcome.best)?;
        let log = dir.join("log.csv");
        write_text(&log, &log_to_csv(&outcome.log))?;
        let mut m = self.manifest(&format!("train {}", kind.name()));
        m.selected_step = Some(outcome.best_step);
        self.finish(&mut m, &dir, &[live, ema, best, log], &[manifest_path(&self.data_dir()), vae_manifest.to_path_buf()])
    }

    pub fn load_model(&self, kind: ObjectiveKind) -> CliResult<ModelState> {
        let dir = self.stage_dir(kind.name());
        let manifest = manifest_path(&dir);
        require(&format!("{} checkpoint (run `train {}`)", kind.name(), kind.name()), &manifest)?;
        let m = Manifest::read(&manifest)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = VectorFieldNet::new(m.config.model.clone(), &mut store, &mut rng)?;
        let params = load_store(&dir.join("best.fct"), store)?;
        let schedule = match kind {
            ObjectiveKind::Cfm => None,
            ObjectiveKind::Ddpm => Some(m.config.ddpm.schedule()?),
        };
        Ok(ModelState { net, params, schedule, manifest })
    }

    /// Sampler selected by the `[forecast]` section.
    pub fn forecast_sampler(&self, model: &ModelState) -> Sampler {
        match (&model.schedule, self.config.forecast.objective) {
            (Some(schedule), ObjectiveKind::Ddpm) => {
                Sampler::Ddim { steps: self.config.forecast.ddim_steps, schedule: schedule.clone() }
            }
            _ => Sampler::Flow(self.config.forecast.solver.clone()),
        }
    }

    pub fn forecast_label(&self) -> String {
        match self.config.forecast.objective {
            ObjectiveKind::Cfm => Sampler::Flow(self.config.forecast.solver.clone()).label(),
            ObjectiveKind::Ddpm => format!("ddim-{}", self.config.forecast.ddim_steps),
        }
    }

    pub fn forecast(&self) -> CliResult<String> {
        let data = self.load_data()?;
        let codec = self.load_codec()?;
        let model = self.load_model(self.config.forecast.objective)?;
        let sampler = self.forecast_sampler(&model);
        let label = sampler.label();
        let ids = self.subset_ids(&data, SPLIT_TEST);
        let f = Forecaster { codec: codec.codec(), net: &model.net, params: &model.params };
        let seed = stage_seed(self.config.seed, FORECAST_SEED);
        let forecasts = flowcast_core::par::try_map_indices(ids.len(), |k| {
            let id = ids[k];
            f.ensemble_forecast(&data.windows[id].past, self.config.forecast.members, &sampler, window_seed(seed, id))
                .map_err(|e| {
                    let mut err = CliError::from(e);
                    err.message = format!("window {id}: {}", err.message);
                    err
                })
        })?;
        let dir = self.forecast_dir(&label);
        let mut artifacts = Vec::new();
        let mut timing = String::from("window,nfe,seconds\n");
        for (id, fc) in ids.iter().zip(&forecasts) {
            let path = window_file(&dir, *id);
            write_fct(&path, &[&Tensor::stack(&fc.members)?])?;
            artifacts.push(path);
            let _ = writeln!(timing, "{id},{},{:.6}", fc.nfe, fc.seconds);
        }
        write_text(&dir.join("timing.csv"), &timing)?;
        let mut m = self.manifest("forecast");
        m.nfe = forecasts.first().map(|f| f.nfe);
        self.finish(&mut m, &dir, &artifacts, &[manifest_path(&self.data_dir()), codec.manifest, model.manifest])?;
        Ok(label)
    }

    pub fn evaluate(&self) -> CliResult<String> {
        let data = self.load_data()?;
        let label = self.forecast_label();
        let dir = self.forecast_dir(&label);
        require(&format!("forecasts for {label} (run `forecast`)"), &manifest_path(&dir))?;
        let ids = self.subset_ids(&data, SPLIT_TEST);
        let missing: Vec<String> =
            ids.iter().filter(|&&id| !window_file(&dir, id).exists()).map(|id| format!("w{id:05}")).collect();
        if !missing.is_empty() {
            return Err(CliError::data(format!("forecasts missing for windows {}", missing.join(", "))));
        }
        let forecasts = ids
            .iter()
            .map(|&id| {
                let t = read_tensors(&window_file(&dir, id))?;
                let members = t.first().ok_or_else(|| CliError::data(format!("empty forecast for window {id}")))?;
                Ok(Forecast {
                    members: (0..members.shape()[0]).map(|i| members.index_outer(i)).collect(),
                    nfe: 0,
                    seconds: 0.0,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let thresholds = self.config.evaluate.threshold_set()?;
        let truths: Vec<Tensor> = ids.iter().map(|&id| data.windows[id].future.clone()).collect();
        let eval = evaluate_forecasts(&forecasts, &truths, &thresholds)?;
        let windows: Vec<SampleWindow> = ids.iter().map(|&id| data.windows[id].clone()).collect();
        let pers = persistence_report(&windows, &thresholds)?;

        let out = self.evaluate_dir(&label);
        let report = out.join("report.csv");
        write_text(&report, &eval.report.to_csv())?;
        let persistence = out.join("persistence.csv");
        write_text(&persistence, &pers.to_csv())?;
        self.finish(&mut self.manifest("evaluate"), &out, &[report, persistence], &[manifest_path(&dir)])?;
        Ok(label)
    }

    pub fn ablate(&self, kind: AblationKind) -> CliResult<Vec<AblationRow>> {
        let data = self.load_data()?;
        let codec = self.load_codec()?;
        let cfm = self.load_model(ObjectiveKind::Cfm)?;
        let ddpm = match kind {
            AblationKind::Solver => None,
            _ => Some(self.load_model(ObjectiveKind::Ddpm)?),
        };
        let a = &self.config.ablate;
        let mut points: Vec<(&ModelState, Sampler)> = Vec::new();
        let flow = |steps| Sampler::Flow(SolverConfig::fixed(flowcast_core::ode::Method::Euler, steps));
        match kind {
            AblationKind::Nfe | AblationKind::Objective => {
                let nfes = if kind == AblationKind::Nfe { &a.nfe } else { &a.objective_nfe };
                let ddpm = ddpm.as_ref().expect("loaded above");
                let schedule = ddpm.schedule.clone().expect("ddpm checkpoint has a schedule");
                for &n in nfes {
                    points.push((&cfm, flow(n)));
                }
                for &n in nfes {
                    points.push((ddpm, Sampler::Ddim { steps: n, schedule: schedule.clone() }));
                }
            }
            AblationKind::Solver => {
                for &method in &a.solvers {
                    let cfg = if method.is_adaptive() {
                        SolverConfig { method, ..self.config.forecast.solver.clone() }
                    } else {
                        SolverConfig::fixed(method, a.solver_steps)
                    };
                    points.push((&cfm, Sampler::Flow(cfg)));
                }
            }
        }
        let ids = self.subset_ids(&data, SPLIT_TEST);
        let windows: Vec<&SampleWindow> = ids.iter().map(|&id| &data.windows[id]).collect();
        let thresholds = self.config.evaluate.threshold_set()?;
        let seed = stage_seed(self.config.seed, FORECAST_SEED);
        let mut rows = Vec::new();
        for (model, sampler) in &points {
            let f = Forecaster { codec: codec.codec(), net: &model.net, params: &model.params };
            rows.push(ablation_row(&f, sampler, &windows, &ids, a.members, &thresholds, seed)?);
        }
        let dir = self.stage_dir("ablate");
        let name = kind.name();
        let csv_path = dir.join(format!("{name}.csv"));
        write_text(&csv_path, &ablation_csv(&rows))?;
        write_text(&dir.join(format!("{name}_timing.csv")), &ablation_timing_csv(&rows))?;
        let svg_path = dir.join(format!("{name}.svg"));
        write_text(&svg_path, &ablation_svg(&rows))?;
        let mut parents = vec![manifest_path(&self.data_dir()), codec.manifest.clone(), cfm.manifest.clone()];
        parents.extend(ddpm.as_ref().map(|d| d.manifest.clone()));
        let mut m = self.manifest(&format!("ablate {name}"));
        for a in [&csv_path, &svg_path] {
            m.add_artifact(&self.out, a)?;
        }
        for p in &parents {
            m.add_parent(&self.out, p)?;
        }
        m.write(&dir.join(format!("{name}.toml")))?;
        Ok(rows)
    }
}

#[allow(clippy::too_many_arguments)]
fn validation_score(
    codec: &CodecState,
    net: &VectorFieldNet,
    params: &ParamStore,
    data: &Dataset,
    ids: &[usize],
    validation: &Validation,
    sampler: &Sampler,
    thresholds: &ThresholdSet,
    seed: u64,
) -> flowcast_core::Result<Option<f64>> {
    let f = Forecaster { codec: codec.codec(), net, params };
    let pasts: Vec<&Tensor> = ids.iter().map(|&i| &data.windows[i].past).collect();
    let truths: Vec<Tensor> = ids.iter().map(|&i| data.windows[i].future.clone()).collect();
    let fc = f.forecast_windows(&pasts, validation.members, sampler, seed)?;
    Ok(evaluate_forecasts(&fc, &truths, thresholds)?.report.overall.csi_m)
}

/// One sweep point: aggregate scores plus measured cost.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub method: String,
    pub nfe: usize,
    pub scores: Aggregates,
    pub seconds_per_sequence: f64,
}

/// Forecasts `windows` with one sampler and scores the ensembles.
pub fn ablation_row(
    f: &Forecaster<'_>,
    sampler: &Sampler,
    windows: &[&SampleWindow],
    ids: &[usize],
    members: usize,
    thresholds: &ThresholdSet,
    seed: u64,
) -> CliResult<AblationRow> {
    let forecasts = flowcast_core::par::try_map_indices(windows.len(), |k| {
        f.ensemble_forecast(&windows[k].past, members, sampler, window_seed(seed, ids[k]))
    })?;
    let truths: Vec<Tensor> = windows.iter().map(|w| w.future.clone()).collect();
    let eval = evaluate_forecasts(&forecasts, &truths, thresholds)?;
    let method = match sampler {
        Sampler::Flow(cfg) => format!("cfm-{}", cfg.method),
        Sampler::Ddim { .. } => "ddim".to_string(),
    };
    Ok(AblationRow { method, nfe: eval.nfe, scores: eval.report.overall, seconds_per_sequence: eval.seconds_per_sequence })
}

pub const ABLATION_CSV_HEADER: &str = "method,nfe,crps,csi_m,csi_p16_m,fss_m_p16,hss_m,far_m";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.9}"))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let a = &r.scores;
        let _ = writeln!(
            s,
            "{},{},{:.9},{},{},{},{:.9},{:.9}",
            r.method,
            r.nfe,
            a.crps,
            opt(a.csi_m),
            opt(a.csi_p16_m),
            opt(a.fss_m_p16),
            a.hss_m,
            a.far_m
        );
    }
    s
}

pub fn ablation_timing_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,nfe,seconds_per_sequence\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6}", r.method, r.nfe, r.seconds_per_sequence);
    }
    s
}

/// CRPS and CSI-M against NFE, one line per method.
pub fn ablation_svg(rows: &[AblationRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let panel = |title: &str, value: &dyn Fn(&AblationRow) -> f64| svg::Panel {
        title: title.to_string(),
        series: methods
            .iter()
            .map(|m| svg::Series {
                label: m.to_string(),
                points: rows.iter().filter(|r| r.method == *m).map(|r| (r.nfe as f64, value(r))).collect(),
            })
            .collect(),
    };
    svg::line_chart(
        &[
            panel("CRPS (lower is better)", &|r| r.scores.crps),
            panel("CSI-M (higher is better)", &|r| r.scores.csi_m.unwrap_or(f64::NAN)),
        ],
        "NFE",
    )
}
