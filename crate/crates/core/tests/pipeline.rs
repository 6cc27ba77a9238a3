use std::fs;
use std::path::Path;

use derrd::data::synthetic::PlantedBlocks;
use derrd::data::{write_tsv, FilterConfig, InteractionDataset};
use derrd::eval::Metric;
use derrd::experiment::{self, report, ExperimentConfig, Method, Role, Session};
use derrd::Error;

fn config(dir: &Path, extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let out = dir.join("runs").display().to_string();
    let data = dir.join("runs/dataset.tsv").display().to_string();
    let base = [
        ("output_dir", out.as_str()),
        ("dataset", data.as_str()),
        ("synthetic", "true"),
        ("teacher_width", "16"),
        ("epochs", "6"),
        ("latency_repeats", "3"),
    ];
    cfg.apply_overrides(base.iter().chain(extra).copied()).unwrap();
    cfg
}

fn teacher_path(cfg: &ExperimentConfig) -> std::path::PathBuf {
    cfg.output_dir.join(cfg.teacher_run_name()).join("model.snap")
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    let (path, ds) = experiment::prepare_data(&cfg).unwrap();
    assert!(path.is_file());
    let manifest = fs::read_to_string(path.with_extension("manifest.txt")).unwrap();
    assert!(manifest.contains(&format!("{:016x}", ds.checksum())));

    let teacher = experiment::train_teacher(&cfg).unwrap();
    for f in ["model.snap", "config.txt", "history.csv", "metrics.csv", "per_user.csv", "summary.json"] {
        assert!(teacher.dir.join(f).is_file(), "{f}");
    }
    assert!(!teacher.dir.join("experts.snap").exists());

    let mut student_cfg = config(dir.path(), &[("method", "de-rrd")]);
    student_cfg.teacher = Some(teacher_path(&cfg));
    let student = experiment::distill(&student_cfg).unwrap();
    assert!(student.dir.join("experts.snap").is_file());
    assert_eq!(student.summary.width, 2);
    assert_eq!(student.summary.teacher_width, 16);
    assert_eq!(student.trained.history.len(), 6);
    let metrics = fs::read_to_string(student.dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 54);

    // the stored student is exactly what was evaluated
    let mut eval_cfg = student_cfg.clone();
    eval_cfg.snapshot = Some(student.dir.join("model.snap"));
    let (header, report) = experiment::evaluate_snapshot(&eval_cfg).unwrap();
    assert_eq!(header.method, "de-rrd");
    assert_eq!(report, student.test);

    let latency = experiment::bench_latency(&eval_cfg).unwrap();
    assert_eq!(latency.len(), 2);
    assert!(latency[0].param_count > latency[1].param_count);
    assert!(student.dir.join("latency.json").is_file());

    let mut export_cfg = ExperimentConfig::default();
    export_cfg.run = Some(student.dir.clone());
    let csv = experiment::export_experts(&export_cfg).unwrap();
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("entity_type,entity_id,expert,alpha_0,alpha_1,alpha_2,alpha_3,alpha_4\n"));
    assert_eq!(text.lines().count(), 1 + ds.num_users + ds.num_items);

    let mut none_cfg = config(dir.path(), &[("method", "none")]);
    none_cfg.teacher = Some(teacher_path(&cfg));
    experiment::distill(&none_cfg).unwrap();

    let out = &cfg.output_dir;
    let first = report::run_report(out).unwrap();
    assert_eq!(first.runs.len(), 3);
    assert_eq!(first.groups.len(), 1);
    assert!(first.groups[0].improv_student.contains_key("H@5"));
    assert!(first.groups[0].p_vs_student.is_some());
    assert_eq!(first.latency.len(), 2);
    assert_eq!(first.expert_csvs.len(), 1);
    let csv1 = fs::read(out.join("report.csv")).unwrap();
    let txt1 = fs::read(out.join("report.txt")).unwrap();
    report::run_report(out).unwrap();
    assert_eq!(fs::read(out.join("report.csv")).unwrap(), csv1);
    assert_eq!(fs::read(out.join("report.txt")).unwrap(), txt1);
    assert!(String::from_utf8(txt1).unwrap().contains("Improv.s"));

    // a half-written run is listed, not fatal
    fs::create_dir(out.join("broken-run")).unwrap();
    let again = report::run_report(out).unwrap();
    assert_eq!(again.runs.len(), 3);
    assert_eq!(again.missing, vec![out.join("broken-run")]);
}

#[test]
fn single_run_gives_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    experiment::prepare_data(&cfg).unwrap();
    experiment::train_teacher(&cfg).unwrap();
    let r = report::run_report(&cfg.output_dir).unwrap();
    assert_eq!(r.runs.len(), 1);
    let csv = r.to_csv();
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 1);
    assert!(r.groups.is_empty());
}

#[test]
fn teacher_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    experiment::prepare_data(&cfg).unwrap();
    let a = experiment::train_teacher(&cfg).unwrap();
    let bytes_a = fs::read(a.dir.join("model.snap")).unwrap();
    let mut other = cfg.clone();
    other.run_name = Some("again".into());
    other.parallel = false;
    let b = experiment::train_teacher(&other).unwrap();
    assert_eq!(fs::read(b.dir.join("model.snap")).unwrap(), bytes_a);
    assert_eq!(
        fs::read(a.dir.join("history.csv")).unwrap(),
        fs::read(b.dir.join("history.csv")).unwrap()
    );
}

#[test]
fn distill_refuses_a_teacher_from_another_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    experiment::prepare_data(&cfg).unwrap();
    experiment::train_teacher(&cfg).unwrap();

    let other_data = dir.path().join("other.tsv");
    let gen = PlantedBlocks {
        num_users: 60,
        ..PlantedBlocks::default()
    };
    write_tsv(&other_data, &gen.generate(1)).unwrap();
    let mut student = config(dir.path(), &[("method", "rrd")]);
    student.dataset = Some(other_data);
    student.teacher = Some(teacher_path(&cfg));
    let got = experiment::distill(&student);
    assert!(matches!(got, Err(Error::Snapshot(_))), "{got:?}");
}

#[test]
fn method_keys_and_missing_teacher_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[("method", "none"), ("lambda_rrd", "1e-2")]);
    assert!(experiment::distill(&cfg).unwrap_err().is_config());
    cfg = config(dir.path(), &[("method", "rd"), ("rd_warmup", "2")]);
    experiment::prepare_data(&cfg).unwrap();
    assert!(experiment::distill(&cfg).unwrap_err().is_config());
    assert!(cfg.clone().apply_overrides([("no_such_key", "1")]).unwrap_err().is_config());
}

#[test]
fn divergence_aborts_with_the_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("learning_rate", "1e200")]);
    experiment::prepare_data(&cfg).unwrap();
    match experiment::train_teacher(&cfg) {
        Err(Error::Numerical { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected a numerical abort, got {other:?}"),
    }
}

#[test]
fn toy_teacher_beats_random_by_ten_times() {
    let gen = PlantedBlocks {
        num_users: 50,
        num_items: 100,
        num_blocks: 5,
        min_per_user: 10,
        max_per_user: 20,
        ..PlantedBlocks::default()
    };
    let ds = InteractionDataset::from_log(&gen.generate(5), FilterConfig::users(5)).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides([("teacher_width", "16"), ("epochs", "300"), ("learning_rate", "1e-2")]).unwrap();
    let session = Session::new(ds, 0, cfg.execution());
    let t = experiment::train(&cfg, &session, None, Role::Teacher).unwrap();
    assert_eq!(t.method, Method::None);
    let cached = derrd::rrd::TeacherSnapshot::build(t.model.clone(), t.params.clone(), &session.ds, 20, cfg.execution()).unwrap();
    for u in 0..session.ds.num_users {
        assert!(cached.ranked(u).iter().all(|&i| !session.ds.is_train(u, i)));
    }
    let report = derrd::eval::evaluate(
        &derrd::models::Bound::new(&t.model, &t.params),
        &session.ds,
        &session.pool,
        derrd::eval::Phase::Test,
        cfg.execution(),
    );
    let h5 = report.mean(Metric::Hit, 5);
    assert!(h5 >= 0.1, "H@5 = {h5}");
}
