//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::de::DeConfig;
use crate::error::{Error, Result};
use crate::gradcore::AdamConfig;
use crate::kd::{CdConfig, RdConfig};
use crate::models::BaseModelKind;
use crate::par::Execution;
use crate::rrd::{RrdConfig, DEFAULT_CACHE_SIZE};

/// Which distillation terms are added to the student's base loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    None,
    Rd,
    Cd,
    De,
    Rrd,
    DeRrd,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::None, Method::Rd, Method::Cd, Method::De, Method::Rrd, Method::DeRrd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Rd => "rd",
            Method::Cd => "cd",
            Method::De => "de",
            Method::Rrd => "rrd",
            Method::DeRrd => "de-rrd",
        }
    }

    pub fn uses_de(self) -> bool {
        matches!(self, Method::De | Method::DeRrd)
    }

    pub fn uses_rrd(self) -> bool {
        matches!(self, Method::Rrd | Method::DeRrd)
    }

    /// Whether the method needs a teacher at all.
    pub fn needs_teacher(self) -> bool {
        self != Method::None
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "student" => Ok(Method::None),
            "rd" => Ok(Method::Rd),
            "cd" => Ok(Method::Cd),
            "de" => Ok(Method::De),
            "rrd" => Ok(Method::Rrd),
            "de-rrd" | "derrd" | "de_rrd" => Ok(Method::DeRrd),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Allowed distillation weights. Zero switches a term off while keeping its
/// code path, which the reduction checks rely on.
pub const LAMBDA_GRID: [f64; 7] = [0.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

fn check_lambda(key: &str, v: f64) -> Result<()> {
    if LAMBDA_GRID.iter().any(|&g| (g == 0.0 && v == 0.0) || (g != 0.0 && ((v - g) / g).abs() < 1e-9)) {
        Ok(())
    } else {
        Err(Error::Config(format!("{key} = {v} is not one of 0, 1, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Prepared interaction log.
    pub dataset: Option<PathBuf>,
    /// Raw log for `prepare-data`.
    pub raw: Option<PathBuf>,
    /// Generate a planted-block log instead of reading `raw`.
    pub synthetic: bool,
    pub output_dir: PathBuf,
    pub run_name: Option<String>,
    /// Teacher snapshot used by `distill`, `bench-latency` and `export-experts`.
    pub teacher: Option<PathBuf>,
    /// Model snapshot used by `evaluate` and `bench-latency`.
    pub snapshot: Option<PathBuf>,
    /// Run directory for `export-experts`.
    pub run: Option<PathBuf>,
    pub min_user_interactions: usize,
    pub base_model: BaseModelKind,
    pub teacher_width: usize,
    pub neumf_layers: usize,
    pub phi: f64,
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub cache_size: usize,
    pub de: DeConfig,
    pub rrd: RrdConfig,
    pub rd: RdConfig,
    pub cd: CdConfig,
    pub latency_repeats: usize,
    pub parallel: bool,
    explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            dataset: None,
            raw: None,
            synthetic: false,
            output_dir: PathBuf::from("runs"),
            run_name: None,
            teacher: None,
            snapshot: None,
            run: None,
            min_user_interactions: 5,
            base_model: BaseModelKind::Bpr,
            teacher_width: 0,
            neumf_layers: 2,
            phi: 0.1,
            method: Method::DeRrd,
            seed: 0,
            epochs: 1000,
            batch_size: 512,
            patience: 30,
            learning_rate: 1e-3,
            l2: 1e-5,
            cache_size: DEFAULT_CACHE_SIZE,
            de: DeConfig::default(),
            rrd: RrdConfig::default(),
            rd: RdConfig::default(),
            cd: CdConfig::default(),
            latency_repeats: 5,
            parallel: true,
            explicit: BTreeSet::new(),
        };
        cfg.resolve_defaults();
        cfg
    }
}

/// Keys that only make sense for some methods.
fn method_group(key: &str) -> Option<&'static [Method]> {
    const DE: &[Method] = &[Method::De, Method::DeRrd];
    const RRD: &[Method] = &[Method::Rrd, Method::DeRrd];
    const KD: &[Method] = &[Method::Rd, Method::Cd];
    if key.starts_with("de_") || key == "lambda_de" || key == "tau0" || key == "tau_end" {
        Some(DE)
    } else if key.starts_with("rrd_") || key == "lambda_rrd" {
        Some(RRD)
    } else if key.starts_with("rd_") {
        Some(&[Method::Rd])
    } else if key.starts_with("cd_") {
        Some(&[Method::Cd])
    } else if key == "lambda_kd" {
        Some(KD)
    } else {
        None
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "raw",
    "synthetic",
    "output_dir",
    "run_name",
    "teacher",
    "snapshot",
    "run",
    "min_user_interactions",
    "base_model",
    "teacher_width",
    "neumf_layers",
    "phi",
    "method",
    "seed",
    "epochs",
    "batch_size",
    "patience",
    "learning_rate",
    "l2",
    "cache_size",
    "lambda_de",
    "de_experts",
    "de_selection",
    "de_squared",
    "tau0",
    "tau_end",
    "lambda_rrd",
    "rrd_k",
    "rrd_l",
    "rrd_temperature",
    "rrd_mode",
    "lambda_kd",
    "rd_k",
    "rd_temperature",
    "rd_warmup",
    "rd_negatives",
    "cd_k",
    "cd_temperature",
    "latency_repeats",
    "parallel",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.resolve_defaults();
        Ok(())
    }

    /// Apply command-line style overrides; keys may use `-` for `_`.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(&k.replace('-', "_"), v)?;
        }
        self.resolve_defaults();
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| Some(PathBuf::from(v));
        match key {
            "dataset" => self.dataset = path(value),
            "raw" => self.raw = path(value),
            "synthetic" => self.synthetic = parse_bool(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "run_name" => self.run_name = Some(value.to_string()),
            "teacher" => self.teacher = path(value),
            "snapshot" => self.snapshot = path(value),
            "run" => self.run = path(value),
            "min_user_interactions" => self.min_user_interactions = parse(key, value)?,
            "base_model" => self.base_model = value.parse()?,
            "teacher_width" => self.teacher_width = parse(key, value)?,
            "neumf_layers" => self.neumf_layers = parse(key, value)?,
            "phi" => self.phi = parse(key, value)?,
            "method" => self.method = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "cache_size" => self.cache_size = parse(key, value)?,
            "lambda_de" => self.de.lambda = parse(key, value)?,
            "de_experts" => self.de.num_experts = parse(key, value)?,
            "de_selection" => self.de.mode = value.parse()?,
            "de_squared" => self.de.squared = parse_bool(key, value)?,
            "tau0" => self.de.tau0 = parse(key, value)?,
            "tau_end" => self.de.tau_end = parse(key, value)?,
            "lambda_rrd" => self.rrd.lambda = parse(key, value)?,
            "rrd_k" => self.rrd.k = parse(key, value)?,
            "rrd_l" => self.rrd.l = parse(key, value)?,
            "rrd_temperature" => self.rrd.temperature = parse(key, value)?,
            "rrd_mode" => self.rrd.mode = value.parse()?,
            "lambda_kd" => {
                let v = parse(key, value)?;
                self.rd.lambda = v;
                self.cd.lambda = v;
            }
            "rd_k" => self.rd.k = parse(key, value)?,
            "rd_temperature" => self.rd.temperature = parse(key, value)?,
            "rd_warmup" => self.rd.warmup_epochs = parse(key, value)?,
            "rd_negatives" => self.rd.dyn_negatives = parse(key, value)?,
            "cd_k" => self.cd.k = parse(key, value)?,
            "cd_temperature" => self.cd.temperature = parse(key, value)?,
            "latency_repeats" => self.latency_repeats = parse(key, value)?,
            "parallel" => self.parallel = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Fill in defaults that depend on other keys, unless set explicitly.
    fn resolve_defaults(&mut self) {
        let neumf = self.base_model == BaseModelKind::NeuMf;
        if !self.is_explicit("teacher_width") {
            self.teacher_width = if neumf { 128 } else { 200 };
        }
        if !self.is_explicit("lambda_de") {
            self.de.lambda = if neumf { 1e-4 } else { 1e-2 };
        }
        if !self.is_explicit("lambda_rrd") {
            self.rrd.lambda = if neumf { 1e-1 } else { 1e-3 };
        }
        if !self.is_explicit("rrd_l") {
            self.rrd.l = self.rrd.k;
        }
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::default()
        } else {
            Execution::Sequential
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }

    /// Range checks shared by every command that trains or scores.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return bad(format!("phi = {} must lie in (0, 1]", self.phi));
        }
        if self.teacher_width == 0 {
            return bad("teacher_width must be at least 1".into());
        }
        if self.base_model == BaseModelKind::NeuMf && !(1..=4).contains(&self.neumf_layers) {
            return bad(format!("neumf_layers = {} must be 1..=4", self.neumf_layers));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) {
            return bad("learning_rate must be positive and l2 non-negative".into());
        }
        if self.de.num_experts == 0 {
            return bad("de_experts must be at least 1".into());
        }
        if !(self.de.tau0 > 0.0 && self.de.tau_end > 0.0) {
            return bad("tau0 and tau_end must be positive".into());
        }
        if self.rrd.k == 0 || self.rd.k == 0 || self.cd.k == 0 {
            return bad("list sizes rrd_k, rd_k and cd_k must be at least 1".into());
        }
        if self.rrd.k > self.cache_size || self.rd.k > self.cache_size || self.cd.k > self.cache_size {
            return bad(format!("list sizes must not exceed cache_size = {}", self.cache_size));
        }
        for (k, t) in [
            ("rrd_temperature", self.rrd.temperature),
            ("rd_temperature", self.rd.temperature),
            ("cd_temperature", self.cd.temperature),
        ] {
            if !(t > 0.0) {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.method == Method::Rd && self.rd.warmup_epochs >= self.epochs {
            return bad(format!(
                "rd_warmup = {} must be below epochs = {}",
                self.rd.warmup_epochs, self.epochs
            ));
        }
        if self.rd.dyn_negatives == 0 {
            return bad("rd_negatives must be at least 1".into());
        }
        check_lambda("lambda_de", self.de.lambda)?;
        check_lambda("lambda_rrd", self.rrd.lambda)?;
        check_lambda("lambda_kd", self.rd.lambda)?;
        if self.latency_repeats == 0 {
            return bad("latency_repeats must be at least 1".into());
        }
        Ok(())
    }

    /// Reject keys that were set explicitly but belong to another method.
    pub fn check_method_keys(&self) -> Result<()> {
        for key in &self.explicit {
            if let Some(methods) = method_group(key) {
                if !methods.contains(&self.method) {
                    let names: Vec<&str> = methods.iter().map(|m| m.as_str()).collect();
                    return Err(Error::Config(format!(
                        "`{key}` applies only to method {} but method = {}",
                        names.join(" / "),
                        self.method
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn teacher_run_name(&self) -> String {
        self.run_name
            .clone()
            .unwrap_or_else(|| format!("teacher-{}-seed{}", self.base_model, self.seed))
    }

    pub fn student_run_name(&self) -> String {
        self.run_name.clone().unwrap_or_else(|| {
            format!("{}-{}-phi{}-seed{}", self.method, self.base_model, self.phi, self.seed)
        })
    }

    /// Every key with its resolved value, in a form [`from_file`](Self::from_file)
    /// reads back. Paths that are unset are omitted.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        for (k, p) in [
            ("dataset", &self.dataset),
            ("raw", &self.raw),
            ("teacher", &self.teacher),
            ("snapshot", &self.snapshot),
            ("run", &self.run),
        ] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        put("synthetic", self.synthetic.to_string());
        put("output_dir", self.output_dir.display().to_string());
        if let Some(n) = &self.run_name {
            put("run_name", n.clone());
        }
        put("min_user_interactions", self.min_user_interactions.to_string());
        put("base_model", self.base_model.to_string());
        put("teacher_width", self.teacher_width.to_string());
        put("neumf_layers", self.neumf_layers.to_string());
        put("phi", self.phi.to_string());
        put("method", self.method.to_string());
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("patience", self.patience.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("l2", self.l2.to_string());
        put("cache_size", self.cache_size.to_string());
        let m = self.method;
        if m.uses_de() {
            put("lambda_de", self.de.lambda.to_string());
            put("de_experts", self.de.num_experts.to_string());
            put("de_selection", self.de.mode.to_string());
            put("de_squared", self.de.squared.to_string());
            put("tau0", self.de.tau0.to_string());
            put("tau_end", self.de.tau_end.to_string());
        }
        if m.uses_rrd() {
            put("lambda_rrd", self.rrd.lambda.to_string());
            put("rrd_k", self.rrd.k.to_string());
            put("rrd_l", self.rrd.l.to_string());
            put("rrd_temperature", self.rrd.temperature.to_string());
            put("rrd_mode", self.rrd.mode.to_string());
        }
        if m == Method::Rd {
            put("lambda_kd", self.rd.lambda.to_string());
            put("rd_k", self.rd.k.to_string());
            put("rd_temperature", self.rd.temperature.to_string());
            put("rd_warmup", self.rd.warmup_epochs.to_string());
            put("rd_negatives", self.rd.dyn_negatives.to_string());
        }
        if m == Method::Cd {
            put("lambda_kd", self.cd.lambda.to_string());
            put("cd_k", self.cd.k.to_string());
            put("cd_temperature", self.cd.temperature.to_string());
        }
        put("latency_repeats", self.latency_repeats.to_string());
        put("parallel", self.parallel.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_base_model() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.teacher_width, 200);
        assert_eq!((cfg.de.lambda, cfg.rrd.lambda), (1e-2, 1e-3));
        assert_eq!((cfg.batch_size, cfg.epochs, cfg.patience), (512, 1000, 30));
        assert_eq!(cfg.rrd.l, cfg.rrd.k);

        let mut n = ExperimentConfig::default();
        n.apply_overrides([("base-model", "neumf")]).unwrap();
        assert_eq!(n.teacher_width, 128);
        assert_eq!((n.de.lambda, n.rrd.lambda), (1e-4, 1e-1));

        let mut pinned = ExperimentConfig::default();
        pinned.apply_overrides([("lambda_de", "1e-3"), ("base_model", "neumf")]).unwrap();
        assert_eq!(pinned.de.lambda, 1e-3);
    }

    #[test]
    fn parses_files_and_rejects_unknown_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# comment\nphi = 0.5\nmethod = rrd   # trailing\n\nrrd_k = 20\n", Path::new("x.conf"))
            .unwrap();
        assert_eq!(cfg.phi, 0.5);
        assert_eq!(cfg.method, Method::Rrd);
        assert_eq!((cfg.rrd.k, cfg.rrd.l), (20, 20));

        let err = cfg.apply_text("colour = blue\n", Path::new("x.conf")).unwrap_err();
        assert!(err.is_config());
        assert!(matches!(cfg.apply_text("no equals sign\n", Path::new("x.conf")), Err(Error::Parse { line: 1, .. })));
        assert!(cfg.set("epochs", "many").unwrap_err().is_config());
    }

    #[test]
    fn lambda_grid() {
        let mut cfg = ExperimentConfig::default();
        for ok in ["0", "1", "0.1", "1e-5"] {
            cfg.set("lambda_rrd", ok).unwrap();
            cfg.validate().unwrap();
        }
        cfg.set("lambda_rrd", "0.3").unwrap();
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn method_specific_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides([("method", "de"), ("de_experts", "10")]).unwrap();
        cfg.check_method_keys().unwrap();
        cfg.apply_overrides([("rrd_k", "5")]).unwrap();
        assert!(cfg.check_method_keys().unwrap_err().is_config());
        cfg.set("method", "de-rrd").unwrap();
        cfg.check_method_keys().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides([("method", "rd"), ("rd_k", "20"), ("dataset", "d.tsv"), ("seed", "9")]).unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("resolved")).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.rd, cfg.rd);
        assert_eq!(back.dataset, cfg.dataset);
    }

    #[test]
    fn every_listed_key_is_known() {
        for key in KEYS {
            if let Err(e) = ExperimentConfig::default().set(key, "bogus") {
                assert!(!e.to_string().contains("unknown configuration key"), "{key}");
            }
        }
    }
}
