//! Merge finished run directories into `report.csv` and `report.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{read_per_user, LatencyEntry, RunSummary};
use crate::error::{Error, Result};
use crate::eval::{paired_ttest, Metric, CUTOFFS};

/// Baselines DE-RRD is compared against.
pub const BASELINES: [&str; 4] = ["rd", "cd", "de", "rrd"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Mean test metrics of one method within a (base model, φ) group.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodMean {
    pub method: String,
    pub seeds: Vec<u64>,
    /// `H@5`, ... → (mean over seeds, standard error)
    pub metrics: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub base_model: String,
    pub phi: f64,
    pub methods: Vec<MethodMean>,
    /// `(DE-RRD − Student) / Student` per metric.
    pub improv_student: BTreeMap<String, f64>,
    /// `(DE-RRD − best baseline) / best baseline` per metric.
    pub improv_baseline: BTreeMap<String, f64>,
    pub best_baseline: Option<String>,
    /// Paired t-test p-values of DE-RRD on per-user H@5, pooled over common seeds.
    pub p_vs_student: Option<f64>,
    pub p_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub runs: Vec<RunRecord>,
    /// Run directories without a readable `summary.json`.
    pub missing: Vec<PathBuf>,
    pub groups: Vec<GroupReport>,
    pub latency: Vec<(PathBuf, LatencyEntry)>,
    pub expert_csvs: Vec<PathBuf>,
}

fn metric_keys() -> Vec<String> {
    Metric::ALL
        .iter()
        .flat_map(|m| CUTOFFS.map(|n| format!("{m}@{n}")))
        .collect()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Scan `output_dir` for run directories. Unreadable runs are listed in
/// `missing` rather than failing the report.
pub fn collect(output_dir: &Path) -> Result<Report> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(output_dir)
        .map_err(|e| Error::io(output_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    let mut latency = Vec::new();
    let mut expert_csvs = Vec::new();
    for dir in dirs {
        let summary_path = dir.join("summary.json");
        let parsed = fs::read_to_string(&summary_path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunSummary>(&t).ok());
        match parsed {
            Some(summary) => runs.push(RunRecord {
                dir: dir.clone(),
                summary,
            }),
            None => {
                warn!("{}: no readable summary.json, skipped", dir.display());
                missing.push(dir.clone());
                continue;
            }
        }
        let lat = dir.join("latency.json");
        if let Ok(text) = fs::read_to_string(&lat) {
            match serde_json::from_str::<Vec<LatencyEntry>>(&text) {
                Ok(entries) => latency.extend(entries.into_iter().map(|e| (dir.clone(), e))),
                Err(e) => warn!("{}: {e}", lat.display()),
            }
        }
        let experts = dir.join("experts.csv");
        if experts.is_file() {
            expert_csvs.push(experts);
        }
    }
    let groups = group(&runs);
    Ok(Report {
        runs,
        missing,
        groups,
        latency,
        expert_csvs,
    })
}

fn per_user_h5(run: &RunRecord) -> Option<Vec<f64>> {
    match read_per_user(&run.dir.join("per_user.csv"), "H@5") {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("{e}");
            None
        }
    }
}

/// Paired t-test pooling per-user values over the seeds both methods share.
fn pooled_ttest(a: &[&RunRecord], b: &[&RunRecord]) -> Option<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ra in a {
        let Some(rb) = b.iter().find(|r| r.summary.seed == ra.summary.seed) else {
            continue;
        };
        let (Some(x), Some(y)) = (per_user_h5(ra), per_user_h5(rb)) else {
            continue;
        };
        if x.len() != y.len() {
            warn!("{} and {} disagree on user counts", ra.dir.display(), rb.dir.display());
            continue;
        }
        xs.extend(x);
        ys.extend(y);
    }
    paired_ttest(&xs, &ys).ok()
}

fn group(runs: &[RunRecord]) -> Vec<GroupReport> {
    let mut by_group: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.summary.role == "student") {
        by_group
            .entry((r.summary.base_model.clone(), format!("{}", r.summary.phi)))
            .or_default()
            .push(r);
    }
    let keys = metric_keys();
    by_group
        .into_iter()
        .map(|((base_model, _), members)| {
            let phi = members[0].summary.phi;
            let mut by_method: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
            for r in &members {
                by_method.entry(r.summary.method.as_str()).or_default().push(r);
            }
            let methods: Vec<MethodMean> = by_method
                .iter()
                .map(|(m, rs)| MethodMean {
                    method: m.to_string(),
                    seeds: rs.iter().map(|r| r.summary.seed).collect(),
                    metrics: keys
                        .iter()
                        .map(|k| {
                            let xs: Vec<f64> = rs.iter().filter_map(|r| r.summary.test.get(k).copied()).collect();
                            (k.clone(), mean_se(&xs))
                        })
                        .collect(),
                })
                .collect();
            let find = |name: &str| methods.iter().find(|m| m.method == name);
            let h5 = |m: &MethodMean| m.metrics["H@5"].0;
            let best_baseline = BASELINES
                .iter()
                .filter_map(|b| find(b))
                .max_by(|a, b| h5(a).total_cmp(&h5(b)).then(b.method.cmp(&a.method)))
                .map(|m| m.method.clone());
            let improv = |other: Option<&MethodMean>| -> BTreeMap<String, f64> {
                match (find("de-rrd"), other) {
                    (Some(d), Some(o)) => keys
                        .iter()
                        .filter(|k| o.metrics[*k].0 > 0.0)
                        .map(|k| (k.clone(), (d.metrics[k].0 - o.metrics[k].0) / o.metrics[k].0))
                        .collect(),
                    _ => BTreeMap::new(),
                }
            };
            let improv_student = improv(find("none"));
            let improv_baseline = improv(best_baseline.as_deref().and_then(find));
            let derrd = by_method.get("de-rrd");
            let p_vs = |other: Option<&str>| -> Option<f64> {
                pooled_ttest(derrd?, by_method.get(other?)?)
            };
            GroupReport {
                base_model,
                phi,
                p_vs_student: p_vs(Some("none")),
                p_vs_baseline: p_vs(best_baseline.as_deref()),
                methods,
                improv_student,
                improv_baseline,
                best_baseline,
            }
        })
        .collect()
}

fn fmt_opt(p: Option<f64>) -> String {
    p.map_or_else(|| "-".into(), |v| format!("{v:.3e}"))
}

impl Report {
    /// Per-run rows, then per-group method means and improvement rows.
    pub fn to_csv(&self) -> String {
        let keys = metric_keys();
        let mut out = String::from("kind,run,role,method,base_model,phi,seed,param_count,best_epoch");
        for k in &keys {
            let _ = write!(out, ",{k}");
        }
        out.push('\n');
        for r in &self.runs {
            let s = &r.summary;
            let _ = write!(
                out,
                "run,{},{},{},{},{},{},{},{}",
                s.run_name, s.role, s.method, s.base_model, s.phi, s.seed, s.param_count, s.best_epoch
            );
            for k in &keys {
                let _ = write!(out, ",{:.6}", s.test.get(k).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        for g in &self.groups {
            for m in &g.methods {
                let _ = write!(out, "mean,,student,{},{},{},,,", m.method, g.base_model, g.phi);
                for k in &keys {
                    let _ = write!(out, ",{:.6}", m.metrics[k].0);
                }
                out.push('\n');
            }
            for (label, improv) in [("improv_s", &g.improv_student), ("improv_b", &g.improv_baseline)] {
                if improv.is_empty() {
                    continue;
                }
                let _ = write!(out, "{label},,student,de-rrd,{},{},,,", g.base_model, g.phi);
                for k in &keys {
                    let _ = write!(out, ",{:.6}", improv.get(k).copied().unwrap_or(f64::NAN));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let keys = metric_keys();
        let _ = writeln!(out, "runs: {}", self.runs.len());
        for m in &self.missing {
            let _ = writeln!(out, "missing: {}", m.display());
        }
        let _ = writeln!(out);
        let _ = write!(out, "{:<36} {:>8} {:>7}", "run", "params", "best");
        for k in &keys {
            let _ = write!(out, " {k:>7}");
        }
        out.push('\n');
        for r in &self.runs {
            let s = &r.summary;
            let _ = write!(out, "{:<36} {:>8} {:>7}", s.run_name, s.param_count, s.best_epoch);
            for k in &keys {
                let _ = write!(out, " {:>7.4}", s.test.get(k).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        for g in &self.groups {
            let _ = writeln!(out, "\n{} phi={}", g.base_model, g.phi);
            let _ = write!(out, "{:<10} {:>5}", "method", "seeds");
            for k in &keys {
                let _ = write!(out, " {k:>16}");
            }
            out.push('\n');
            for m in &g.methods {
                let _ = write!(out, "{:<10} {:>5}", m.method, m.seeds.len());
                for k in &keys {
                    let (mean, se) = m.metrics[k];
                    let _ = write!(out, " {:>16}", format!("{mean:.4}±{se:.4}"));
                }
                out.push('\n');
            }
            for (label, improv) in [("Improv.s", &g.improv_student), ("Improv.b", &g.improv_baseline)] {
                if improv.is_empty() {
                    continue;
                }
                let _ = write!(out, "{label:<10} {:>5}", "");
                for k in &keys {
                    let v = improv.get(k).map_or_else(|| "-".into(), |v| format!("{:.2}%", 100.0 * v));
                    let _ = write!(out, " {v:>16}");
                }
                out.push('\n');
            }
            if let Some(b) = &g.best_baseline {
                let _ = writeln!(out, "best baseline: {b}");
            }
            let _ = writeln!(
                out,
                "paired t-test on per-user H@5: p(de-rrd vs none) = {}, p(de-rrd vs best baseline) = {}",
                fmt_opt(g.p_vs_student),
                fmt_opt(g.p_vs_baseline)
            );
        }
        if !self.latency.is_empty() {
            let _ = writeln!(out, "\nlatency");
            let _ = writeln!(
                out,
                "{:<36} {:<8} {:<8} {:>6} {:>10} {:>12} {:>8}",
                "run", "role", "method", "width", "params", "seconds", "H@5 rel"
            );
            for (dir, e) in &self.latency {
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{:<36} {:<8} {:<8} {:>6} {:>10} {:>12.6} {:>8.4}",
                    name, e.role, e.method, e.width, e.param_count, e.seconds, e.h5_ratio
                );
            }
        }
        if !self.expert_csvs.is_empty() {
            let _ = writeln!(out, "\nexpert assignments");
            for p in &self.expert_csvs {
                let _ = writeln!(out, "{}", p.display());
            }
        }
        out
    }
}

/// Collect every run under `output_dir` and write `report.csv` and
/// `report.txt` there.
pub fn run_report(output_dir: &Path) -> Result<Report> {
    let report = collect(output_dir)?;
    if report.runs.is_empty() {
        return Err(Error::InvalidArgument(format!("no completed runs under {}", output_dir.display())));
    }
    for (name, body) in [("report.csv", report.to_csv()), ("report.txt", report.to_text())] {
        let path = output_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
