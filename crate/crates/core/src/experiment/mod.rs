//! Experiment orchestration: configuration, training runs, snapshots, run
//! directories and the consolidated report.
//!
//! A run directory holds `config.txt`, `history.csv`, `metrics.csv`,
//! `per_user.csv`, `model.snap`, `summary.json` and, for DE methods,
//! `experts.snap`.

pub mod config;
pub mod report;
pub mod snapshot;
pub mod train;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::PlantedBlocks;
use crate::data::{filter_log, load_interactions, read_tsv, write_tsv, FilterConfig, InteractionDataset};
use crate::de::{export_expert_assignments, write_assignments_csv, DistillationExperts};
use crate::error::{Error, Result};
use crate::eval::{self, evaluate, EvalReport, LatencyReport, Metric, Phase, CSV_HEADER, CUTOFFS};
use crate::gradcore::ParamStore;
use crate::models::{Bound, Model};
use crate::rng::Rng;
use crate::rrd::TeacherSnapshot;

pub use config::{ExperimentConfig, Method};
pub use snapshot::{SnapshotHeader, MODEL_PREFIX};
pub use train::{train, EpochLog, Role, Session, Trained};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Filter the raw (or generated) log and write the prepared dataset plus its
/// manifest. Returns the dataset path.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(PathBuf, InteractionDataset)> {
    let raw = if cfg.synthetic {
        PlantedBlocks::default().generate(cfg.seed)
    } else {
        let path = cfg
            .raw
            .as_ref()
            .ok_or_else(|| Error::Config("prepare-data needs `raw` or `synthetic = true`".into()))?;
        read_tsv(path)?
    };
    let filter = FilterConfig::users(cfg.min_user_interactions);
    let log = filter_log(&raw, filter);
    let ds = InteractionDataset::from_log(&log, filter)?;
    let out = cfg.dataset.clone().unwrap_or_else(|| cfg.output_dir.join("dataset.tsv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_tsv(&out, &log)?;
    write_file(&out.with_extension("manifest.txt"), ds.manifest())?;
    info!(
        "prepared {} users, {} items, {} interactions -> {}",
        ds.num_users,
        ds.num_items,
        ds.num_interactions(),
        out.display()
    );
    Ok((out, ds))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<InteractionDataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("`dataset` is not set".into()))?;
    load_interactions(path, cfg.min_user_interactions)
}

/// Evaluation pools depend on the seed only, so every method of one seed is
/// scored against the same negatives.
pub fn session(cfg: &ExperimentConfig, ds: InteractionDataset) -> Session {
    Session::new(ds, cfg.seed, cfg.execution())
}

/// What `summary.json` holds for one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_name: String,
    pub role: String,
    pub method: String,
    pub base_model: String,
    pub phi: f64,
    pub seed: u64,
    pub width: usize,
    pub teacher_width: usize,
    pub param_count: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Repeat-averaged test metrics keyed `H@5`, `N@10`, ...
    pub test: BTreeMap<String, f64>,
    pub teacher: Option<String>,
}

impl RunSummary {
    pub fn metric(&self, metric: Metric, n: usize) -> Option<f64> {
        self.test.get(&format!("{metric}@{n}")).copied()
    }
}

/// Outcome of a training command.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub trained: Trained,
    pub test: EvalReport,
    pub summary: RunSummary,
}

fn metric_map(report: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for metric in Metric::ALL {
        for n in CUTOFFS {
            m.insert(format!("{metric}@{n}"), report.mean(metric, n));
        }
    }
    m
}

pub fn per_user_csv(report: &EvalReport) -> String {
    let mut out = String::from("user");
    let cols: Vec<(Metric, usize)> = Metric::ALL.iter().flat_map(|&m| CUTOFFS.map(|n| (m, n))).collect();
    for (m, n) in &cols {
        let _ = write!(out, ",{m}@{n}");
    }
    out.push('\n');
    let values: Vec<Vec<f64>> = cols.iter().map(|&(m, n)| report.per_user(m, n)).collect();
    for u in 0..report.positions.len() {
        let _ = write!(out, "{u}");
        for v in &values {
            let _ = write!(out, ",{:.6}", v[u]);
        }
        out.push('\n');
    }
    out
}

/// Read one column of a `per_user.csv`.
pub fn read_per_user(path: &Path, column: &str) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let col = header
        .split(',')
        .position(|c| c == column)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("no column `{column}`"),
        })?;
    lines
        .enumerate()
        .map(|(k, line)| {
            line.split(',')
                .nth(col)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: k + 2,
                    message: format!("bad value in column `{column}`"),
                })
        })
        .collect()
}

fn header_for(cfg: &ExperimentConfig, trained: &Trained, ds: &InteractionDataset, role: &str) -> SnapshotHeader {
    SnapshotHeader {
        format_version: snapshot::FORMAT_VERSION,
        role: role.to_string(),
        base_model: cfg.base_model.to_string(),
        method: trained.method.to_string(),
        phi: if trained.role == Role::Teacher { 1.0 } else { cfg.phi },
        dims: snapshot::Dims {
            width: trained.width,
            neumf_layers: cfg.neumf_layers,
            teacher_width: trained.teacher_width,
            num_experts: trained.experts.as_ref().map(|_| cfg.de.num_experts),
        },
        num_users: ds.num_users,
        num_items: ds.num_items,
        dataset_checksum: format!("{:016x}", ds.checksum()),
        seed: cfg.seed,
        best_epoch: trained.best_epoch,
        tensors: Vec::new(),
    }
}

/// Score a trained model on the test split and write its run directory.
fn finish_run(cfg: &ExperimentConfig, session: &Session, trained: Trained, run_name: String) -> Result<RunOutcome> {
    let ds = &session.ds;
    let dir = cfg.output_dir.join(&run_name);
    create_dir(&dir)?;
    let test = evaluate(&Bound::new(&trained.model, &trained.params), ds, &session.pool, Phase::Test, session.exec);
    info!("{run_name} test: {}", test.summary());

    let role = trained.role.as_str();
    snapshot::save(dir.join("model.snap"), header_for(cfg, &trained, ds, role), &trained.params, &trained.model.tensors())?;
    if let Some(experts) = &trained.experts {
        snapshot::save(dir.join("experts.snap"), header_for(cfg, &trained, ds, "experts"), &trained.params, &experts.tensors())?;
    }
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    let mut history = format!("{}\n", train::HISTORY_HEADER);
    for log in &trained.history {
        history.push_str(&log.csv_row());
        history.push('\n');
    }
    write_file(&dir.join("history.csv"), history)?;
    let label = if trained.role == Role::Teacher { "teacher" } else { trained.method.as_str() };
    let phi = if trained.role == Role::Teacher { 1.0 } else { cfg.phi };
    write_file(&dir.join("metrics.csv"), format!("{CSV_HEADER}\n{}", test.csv_rows(label, phi)))?;
    write_file(&dir.join("per_user.csv"), per_user_csv(&test))?;

    let summary = RunSummary {
        run_name,
        role: role.to_string(),
        method: label.to_string(),
        base_model: cfg.base_model.to_string(),
        phi,
        seed: cfg.seed,
        width: trained.width,
        teacher_width: trained.teacher_width,
        param_count: trained.model.param_count(),
        best_epoch: trained.best_epoch,
        epochs_run: trained.history.len(),
        stopped_early: trained.stopped_early,
        test: metric_map(&test),
        teacher: cfg.teacher.as_ref().filter(|_| trained.role == Role::Student).map(|p| p.display().to_string()),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Snapshot(e.to_string()))?;
    write_file(&dir.join("summary.json"), json + "\n")?;
    Ok(RunOutcome {
        dir,
        trained,
        test,
        summary,
    })
}

pub fn train_teacher(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let session = session(cfg, load_dataset(cfg)?);
    train_teacher_in(cfg, &session)
}

/// Like [`train_teacher`] on an already loaded session.
pub fn train_teacher_in(cfg: &ExperimentConfig, session: &Session) -> Result<RunOutcome> {
    let trained = train(cfg, session, None, Role::Teacher)?;
    finish_run(cfg, session, trained, cfg.teacher_run_name())
}

/// Load a model snapshot, refusing one trained on another dataset.
pub fn load_model(path: &Path, ds: &InteractionDataset) -> Result<(SnapshotHeader, Model, ParamStore)> {
    let (header, params) = snapshot::load(path)?;
    header.check_dataset(ds)?;
    let model = snapshot::model_from(&header, &params)?;
    Ok((header, model, params))
}

/// Load the configured teacher snapshot and rebuild its ranking cache.
pub fn load_teacher(cfg: &ExperimentConfig, ds: &InteractionDataset) -> Result<TeacherSnapshot> {
    let path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Config("`teacher` snapshot path is not set".into()))?;
    let (header, model, params) = load_model(path, ds)?;
    if header.base_model()? != cfg.base_model {
        return Err(Error::Config(format!(
            "teacher snapshot is {} but base_model = {}",
            header.base_model, cfg.base_model
        )));
    }
    TeacherSnapshot::build(model, params, ds, cfg.cache_size, cfg.execution())
}

pub fn distill(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    cfg.check_method_keys()?;
    let session = session(cfg, load_dataset(cfg)?);
    let teacher = if cfg.method.needs_teacher() {
        Some(load_teacher(cfg, &session.ds)?)
    } else {
        None
    };
    distill_in(cfg, &session, teacher.as_ref())
}

/// Like [`distill`] on an already loaded session and teacher.
pub fn distill_in(cfg: &ExperimentConfig, session: &Session, teacher: Option<&TeacherSnapshot>) -> Result<RunOutcome> {
    let trained = train(cfg, session, teacher, Role::Student)?;
    finish_run(cfg, session, trained, cfg.student_run_name())
}

/// Test-split evaluation of the configured `snapshot`.
pub fn evaluate_snapshot(cfg: &ExperimentConfig) -> Result<(SnapshotHeader, EvalReport)> {
    let path = cfg
        .snapshot
        .as_ref()
        .ok_or_else(|| Error::Config("`snapshot` path is not set".into()))?;
    let session = session(cfg, load_dataset(cfg)?);
    let (header, model, params) = load_model(path, &session.ds)?;
    let report = evaluate(&Bound::new(&model, &params), &session.ds, &session.pool, Phase::Test, session.exec);
    Ok((header, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub role: String,
    pub method: String,
    pub phi: f64,
    pub width: usize,
    pub param_count: usize,
    pub seconds: f64,
    pub timings: Vec<f64>,
    pub test_h5: f64,
    /// Test H@5 relative to the teacher's.
    pub h5_ratio: f64,
}

impl LatencyEntry {
    fn new(header: &SnapshotHeader, report: &LatencyReport, test_h5: f64) -> Self {
        LatencyEntry {
            role: header.role.clone(),
            method: header.method.clone(),
            phi: header.phi,
            width: header.dims.width,
            param_count: report.param_count,
            seconds: report.seconds,
            timings: report.timings.clone(),
            test_h5,
            h5_ratio: report.h5_ratio.unwrap_or(1.0),
        }
    }
}

/// Time full ranking for the teacher and the configured student snapshot
/// and write `latency.json` next to the student snapshot.
pub fn bench_latency(cfg: &ExperimentConfig) -> Result<Vec<LatencyEntry>> {
    cfg.validate()?;
    let (teacher_path, student_path) = match (&cfg.teacher, &cfg.snapshot) {
        (Some(t), Some(s)) => (t, s),
        _ => return Err(Error::Config("bench-latency needs both `teacher` and `snapshot`".into())),
    };
    let session = session(cfg, load_dataset(cfg)?);
    let ds = &session.ds;
    let mut entries = Vec::new();
    let mut teacher_h5 = None;
    for path in [teacher_path, student_path] {
        let (header, model, params) = load_model(path, ds)?;
        let h5 = evaluate(&Bound::new(&model, &params), ds, &session.pool, Phase::Test, session.exec).mean(Metric::Hit, 5);
        let base = *teacher_h5.get_or_insert(h5);
        let mut report = eval::bench_latency(&model, &params, ds, cfg.latency_repeats, session.exec);
        report.h5_ratio = Some(if base > 0.0 { h5 / base } else { 0.0 });
        info!(
            "{} ({}): {:.6}s median, {} parameters, H@5 {:.4}",
            path.display(),
            header.role,
            report.seconds,
            report.param_count,
            h5
        );
        entries.push(LatencyEntry::new(&header, &report, h5));
    }
    let dir = student_path.parent().unwrap_or(Path::new("."));
    let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::Snapshot(e.to_string()))?;
    write_file(&dir.join("latency.json"), json + "\n")?;
    Ok(entries)
}

/// Write `experts.csv` for a finished DE run: the deterministic expert choice
/// for every user and item (or every training pair for joint banks).
pub fn export_experts(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let run = cfg
        .run
        .as_ref()
        .ok_or_else(|| Error::Config("`run` directory is not set".into()))?;
    let mut run_cfg = ExperimentConfig::from_file(run.join("config.txt"))?;
    if cfg.teacher.is_some() {
        run_cfg.teacher = cfg.teacher.clone();
    }
    if cfg.dataset.is_some() {
        run_cfg.dataset = cfg.dataset.clone();
    }
    run_cfg.parallel = cfg.parallel;
    let ds = load_dataset(&run_cfg)?;
    let (_, student, _) = load_model(&run.join("model.snap"), &ds)?;
    let (header, stored) = snapshot::load(run.join("experts.snap"))?;
    header.check_dataset(&ds)?;
    let teacher = load_teacher(&run_cfg, &ds)?;

    let mut de_cfg = run_cfg.de;
    if let Some(m) = header.dims.num_experts {
        de_cfg.num_experts = m;
    }
    let mut params = ParamStore::new();
    let experts = DistillationExperts::build(
        &mut params,
        student.tap_layout(),
        teacher.model.tap_layout(),
        &de_cfg,
        &mut <Rng as rand::SeedableRng>::seed_from_u64(0),
    )?;
    for id in experts.tensors() {
        let name = params.name(id).to_string();
        let src = stored
            .id(&name)
            .ok_or_else(|| Error::Snapshot(format!("experts snapshot lacks `{name}`")))?;
        if stored.shape(src) != params.shape(id) {
            return Err(Error::Snapshot(format!("tensor `{name}` has the wrong shape")));
        }
        params.value_mut(id).copy_from_slice(stored.value(src));
    }
    let pairs = ds.train_pairs();
    let rows = export_expert_assignments(&experts, &params, &teacher, ds.num_users, ds.num_items, &pairs, run_cfg.execution());
    let out = run.join("experts.csv");
    let mut buf = Vec::new();
    write_assignments_csv(&rows, &mut buf).map_err(|e| Error::io(&out, e))?;
    write_file(&out, buf)?;
    info!("wrote {} expert assignments to {}", rows.len(), out.display());
    Ok(out)
}
