//! Line-oriented `section.key = value` run configuration.
//!
//! Every key is declared in [`SCHEMA`] with its type, range and default.
//! Unknown keys, duplicates and out-of-range values are rejected with the
//! offending line number.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug)]
enum Kind {
    /// Unsigned integer in `[min, max]`.
    Int(u64, u64),
    /// Finite float in the closed range, optionally excluding the lower end.
    Float { min: f64, max: f64, open_min: bool },
    Bool,
    /// One of the listed words.
    Word(&'static [&'static str]),
    /// Comma-separated integers in `[min, max]`, at least one.
    Ints(u64, u64),
    /// Comma-separated floats in `(min, max]`; `none` gives an empty list.
    Floats(f64, f64),
    Text,
}

struct Key {
    name: &'static str,
    kind: Kind,
    /// `None` marks a mandatory key.
    default: Option<&'static str>,
}

const fn key(name: &'static str, kind: Kind, default: &'static str) -> Key {
    Key {
        name,
        kind,
        default: Some(default),
    }
}

const FAMILIES: &[&str] = &["ibm", "rl", "matern"];
const PROCESSES: &[&str] = &["brownian", "prior"];
const TASKS: &[&str] = &["density", "classification"];
const BIG: u64 = 1 << 40;

const SCHEMA: &[Key] = &[
    Key {
        name: "run.seed",
        kind: Kind::Int(0, u64::MAX),
        default: None,
    },
    key("run.threads", Kind::Int(0, 1024), "0"),
    key("run.out", Kind::Text, "out"),
    key("prior.family", Kind::Word(FAMILIES), "ibm"),
    key("prior.orders", Kind::Ints(0, 4), "1,2"),
    key("prior.alphas", Kind::Floats(0.0, 10.0), "1.5,2.5"),
    key("prior.dim", Kind::Int(1, 3), "1"),
    key("prior.k", Kind::Float { min: 0.0, max: 1e6, open_min: true }, "6"),
    key("prior.points", Kind::Int(3, 2001), "101"),
    key("truth.beta", Kind::Float { min: 0.0, max: 20.0, open_min: true }, "1.5"),
    key("sample.count", Kind::Int(1, 100_000), "10"),
    key("sample.max_attempts", Kind::Int(1, BIG), "1000000"),
    key("smallball.process", Kind::Word(PROCESSES), "brownian"),
    key("smallball.eps", Kind::Floats(0.0, 10.0), "0.3,0.4,0.5,0.6"),
    key("smallball.steps", Kind::Int(10, 100_000), "200"),
    key("smallball.particles", Kind::Int(100, BIG), "1000"),
    key("smallball.replicates", Kind::Int(2, 1000), "6"),
    key("smallball.moves", Kind::Int(1, 100), "3"),
    key("concentration.eps", Kind::Floats(0.0, 1.0), "0.1,0.15,0.2,0.25,0.3,0.4"),
    key("concentration.n", Kind::Floats(0.0, 1e15), "100,1000,10000"),
    key("concentration.particles", Kind::Int(100, BIG), "2000"),
    key("concentration.replicates", Kind::Int(2, 1000), "8"),
    key("concentration.moves", Kind::Int(1, 100), "3"),
    key("fit.n", Kind::Int(1, BIG), "400"),
    key("fit.iters", Kind::Int(1, BIG), "3000"),
    key("fit.burnin", Kind::Int(0, BIG), "1000"),
    key("fit.thin", Kind::Int(1, 100_000), "10"),
    key("fit.beta", Kind::Float { min: 0.0, max: 0.999, open_min: true }, "0.08"),
    key("fit.quantile", Kind::Float { min: 0.0, max: 1.0, open_min: false }, "0.9"),
    key("fit.save_chain", Kind::Bool, "false"),
    key("study.schedule", Kind::Ints(1, BIG), "100,200,400,800,1600,3200"),
    key("study.replicates", Kind::Int(1, 1000), "5"),
    key("study.task", Kind::Word(TASKS), "density"),
    key("check.rescaling_trials", Kind::Int(1, 100_000), "20"),
    key("check.lipschitz_pairs", Kind::Int(1, BIG), "500"),
    key("check.positivity_draws", Kind::Int(100, BIG), "100000"),
    key("check.correlation_draws", Kind::Int(100, BIG), "100000"),
    key("check.hellinger_pairs", Kind::Int(1, BIG), "200"),
    key("check.classification_pairs", Kind::Int(1, BIG), "50"),
    key("check.ordering_eps", Kind::Floats(0.0, 0.5), "0.2,0.3,0.5"),
    key("plot.svg", Kind::Bool, "false"),
];

#[derive(Clone, Debug, PartialEq)]
enum Value {
    Int(u64),
    Float(f64),
    Bool(bool),
    Text(String),
    Ints(Vec<u64>),
    Floats(Vec<f64>),
}

/// A parse or validation failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    /// One-based line, absent for whole-file problems.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn at(line: usize, message: String) -> ConfigError {
    ConfigError {
        line: Some(line),
        message,
    }
}

fn parse_value(kind: Kind, name: &str, raw: &str) -> Result<Value, String> {
    let int = |s: &str, lo: u64, hi: u64| -> Result<u64, String> {
        let v: u64 = s.trim().parse().map_err(|_| format!("`{name}` expects an integer, got `{s}`"))?;
        if v < lo || v > hi {
            return Err(format!("`{name}` = {v} is outside [{lo}, {hi}]"));
        }
        Ok(v)
    };
    let float = |s: &str| -> Result<f64, String> {
        let v: f64 = s.trim().parse().map_err(|_| format!("`{name}` expects a number, got `{s}`"))?;
        if !v.is_finite() {
            return Err(format!("`{name}` must be finite"));
        }
        Ok(v)
    };
    match kind {
        Kind::Int(lo, hi) => int(raw, lo, hi).map(Value::Int),
        Kind::Float { min, max, open_min } => {
            let v = float(raw)?;
            let low_ok = if open_min { v > min } else { v >= min };
            if !low_ok || v > max {
                let open = if open_min { '(' } else { '[' };
                return Err(format!("`{name}` = {v} is outside {open}{min}, {max}]"));
            }
            Ok(Value::Float(v))
        }
        Kind::Bool => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("`{name}` expects true or false, got `{raw}`")),
        },
        Kind::Word(words) => {
            if words.contains(&raw) {
                Ok(Value::Text(raw.to_string()))
            } else {
                Err(format!("`{name}` must be one of {}, got `{raw}`", words.join(", ")))
            }
        }
        Kind::Ints(lo, hi) => raw.split(',').map(|s| int(s, lo, hi)).collect::<Result<Vec<_>, _>>().map(Value::Ints),
        Kind::Floats(lo, hi) => {
            if raw == "none" {
                return Ok(Value::Floats(Vec::new()));
            }
            let v = raw.split(',').map(float).collect::<Result<Vec<_>, _>>()?;
            if let Some(bad) = v.iter().find(|&&x| !(x > lo && x <= hi)) {
                return Err(format!("`{name}` entry {bad} is outside ({lo}, {hi}]"));
            }
            Ok(Value::Floats(v))
        }
        Kind::Text => {
            if raw.is_empty() {
                Err(format!("`{name}` must not be empty"))
            } else {
                Ok(Value::Text(raw.to_string()))
            }
        }
    }
}

/// Parsed configuration with defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, Value>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut given: BTreeMap<&'static str, (usize, Value)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| at(line, format!("expected `section.key = value`, got `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let spec = SCHEMA
                .iter()
                .find(|s| s.name == k)
                .ok_or_else(|| at(line, format!("unknown key `{k}`")))?;
            if let Some((first, _)) = given.get(spec.name) {
                return Err(at(line, format!("duplicate key `{k}` (first set on line {first})")));
            }
            let value = parse_value(spec.kind, k, v).map_err(|m| at(line, m))?;
            given.insert(spec.name, (line, value));
        }
        let mut values = BTreeMap::new();
        for spec in SCHEMA {
            let value = match (given.remove(spec.name), spec.default) {
                (Some((_, v)), _) => v,
                (None, Some(d)) => parse_value(spec.kind, spec.name, d).expect("schema defaults are valid"),
                (None, None) => {
                    return Err(ConfigError {
                        line: None,
                        message: format!("missing mandatory key `{}`", spec.name),
                    })
                }
            };
            values.insert(spec.name, value);
        }
        let cfg = Self { values };
        cfg.cross_check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    fn cross_check(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError { line: None, message: m });
        if self.usize("fit.burnin") >= self.usize("fit.iters") {
            return fail("`fit.burnin` must be smaller than `fit.iters`".into());
        }
        let schedule = self.usizes("study.schedule");
        if schedule.windows(2).any(|w| w[1] <= w[0]) {
            return fail("`study.schedule` must increase".into());
        }
        if self.usizes("prior.orders").len() < 2 && self.word("prior.family") == "ibm" {
            return fail("`prior.orders` needs at least two layers".into());
        }
        if self.floats("prior.alphas").len() < 2 && self.word("prior.family") != "ibm" {
            return fail("`prior.alphas` needs at least two layers".into());
        }
        Ok(())
    }

    fn get(&self, name: &str) -> &Value {
        self.values.get(name).unwrap_or_else(|| panic!("`{name}` is not in the schema"))
    }

    pub fn u64(&self, name: &str) -> u64 {
        match self.get(name) {
            Value::Int(v) => *v,
            other => panic!("`{name}` is not an integer: {other:?}"),
        }
    }

    pub fn usize(&self, name: &str) -> usize {
        self.u64(name) as usize
    }

    pub fn f64(&self, name: &str) -> f64 {
        match self.get(name) {
            Value::Float(v) => *v,
            other => panic!("`{name}` is not a number: {other:?}"),
        }
    }

    pub fn bool(&self, name: &str) -> bool {
        match self.get(name) {
            Value::Bool(v) => *v,
            other => panic!("`{name}` is not a flag: {other:?}"),
        }
    }

    pub fn word(&self, name: &str) -> &str {
        match self.get(name) {
            Value::Text(v) => v,
            other => panic!("`{name}` is not a word: {other:?}"),
        }
    }

    pub fn usizes(&self, name: &str) -> Vec<usize> {
        match self.get(name) {
            Value::Ints(v) => v.iter().map(|&x| x as usize).collect(),
            other => panic!("`{name}` is not an integer list: {other:?}"),
        }
    }

    pub fn floats(&self, name: &str) -> Vec<f64> {
        match self.get(name) {
            Value::Floats(v) => v.clone(),
            other => panic!("`{name}` is not a number list: {other:?}"),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.word("run.out"))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.values.insert("run.seed", Value::Int(seed));
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.values.insert("run.threads", Value::Int(threads as u64));
    }

    pub fn set_out(&mut self, out: &Path) {
        self.values.insert("run.out", Value::Text(out.display().to_string()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse("run.seed = 7\n").unwrap();
        assert_eq!(c.u64("run.seed"), 7);
        assert_eq!(c.usizes("prior.orders"), vec![1, 2]);
        assert_eq!(c.f64("prior.k"), 6.0);
        assert!(!c.bool("plot.svg"));
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let e = RunConfig::parse("run.seed = 1\n\nprior.kk = 3\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("prior.kk"), "{e}");
    }

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::parse("prior.k = 2\n").unwrap_err();
        assert!(e.message.contains("run.seed"));
    }

    #[test]
    fn ranges_checked_at_parse() {
        let e = RunConfig::parse("run.seed = 1\nfit.quantile = 1.5\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = RunConfig::parse("run.seed = 1\nprior.k = 0\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = RunConfig::parse("run.seed = 1\nrun.seed = 2\n").unwrap_err();
        assert!(e.message.contains("duplicate"));
        assert!(RunConfig::parse("run.seed = 1\nfit.burnin = 5000\n").is_err());
    }

    #[test]
    fn comments_and_lists() {
        let c = RunConfig::parse("# header\nrun.seed = 3 # trailing\ncheck.ordering_eps = none\nsmallball.eps = 0.2, 0.4\n").unwrap();
        assert!(c.floats("check.ordering_eps").is_empty());
        assert_eq!(c.floats("smallball.eps"), vec![0.2, 0.4]);
    }
}
