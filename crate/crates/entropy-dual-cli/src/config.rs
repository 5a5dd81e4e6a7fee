//! Run configuration: flat `key = value` files with dotted keys, or JSON
//! (flat or nested). Every key is validated before anything is computed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// A number or the literal `auto`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Auto {
    Auto,
    Value(f64),
}

impl Serialize for Auto {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Auto::Auto => s.serialize_str("auto"),
            Auto::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl fmt::Display for Auto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Auto::Auto => write!(f, "auto"),
            Auto::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemConfig {
    pub name: String,
    pub alpha: f64,
    pub q: f64,
    pub d: usize,
    pub epsilon: Auto,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridConfig {
    pub nx: usize,
    pub length: f64,
    pub t_end: f64,
    pub steps: usize,
    pub cfl: f64,
    pub dealias: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataConfig {
    /// `random`, `cos` or `zero`.
    pub kind: String,
    pub amplitude: f64,
    pub modes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrongConfig {
    pub blowup: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualConfig {
    pub mu0: f64,
    pub stages: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub conj_tol: f64,
    pub newton_iters: usize,
    /// `random` or `zero`.
    pub start: String,
    pub start_amplitude: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyConfig {
    pub gap: f64,
    pub recovery: f64,
    pub constraint: f64,
    pub margin: f64,
    pub maximality: f64,
    pub solve: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DafermosConfig {
    pub t1: Auto,
    /// Constant inflation `g` of the subsolution.
    pub inflation: f64,
    pub samples: usize,
    pub certify: usize,
    pub modes: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HopfLaxConfig {
    pub amplitude: f64,
    pub t_end: f64,
    pub steps: usize,
    pub iterations: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChecksConfig {
    pub samples: usize,
    pub trials: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemConfig,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub strong: StrongConfig,
    pub dual: DualConfig,
    pub verify: VerifyConfig,
    pub dafermos: DafermosConfig,
    pub hopflax: HopfLaxConfig,
    pub checks: ChecksConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleConfig {
    pub gamma: Auto,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            system: SystemConfig { name: "gkdv".into(), alpha: 2.0, q: 1.0, d: 1, epsilon: Auto::Auto },
            grid: GridConfig { nx: 64, length: 2.0 * std::f64::consts::PI, t_end: 0.5, steps: 64, cfl: 0.5, dealias: true },
            data: DataConfig { kind: "random".into(), amplitude: 0.1, modes: 2 },
            schedule: ScheduleConfig { gamma: Auto::Auto },
            strong: StrongConfig { blowup: 1e6, tol: 1e-13 },
            dual: DualConfig {
                mu0: 1.0,
                stages: 4,
                max_iters: 400,
                tol: 1e-12,
                conj_tol: 1e-11,
                newton_iters: 60,
                start: "random".into(),
                start_amplitude: 1e-3,
            },
            verify: VerifyConfig { gap: 1e-6, recovery: 1e-8, constraint: 1e-8, margin: 1e-10, maximality: 1e-6, solve: false },
            dafermos: DafermosConfig { t1: Auto::Auto, inflation: 0.0, samples: 48, certify: 400, modes: 2, tol: 1e-6 },
            hopflax: HopfLaxConfig { amplitude: 0.05, t_end: 1.0, steps: 64, iterations: 40, gap: 2e-2 },
            checks: ChecksConfig { samples: 10_000, trials: 20, radius: 10.0 },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.trim().parse().map_err(|_| bad(format!("{key}: cannot parse '{raw}'")))
}

fn parse_auto(key: &str, raw: &str) -> Result<Auto, ConfigError> {
    if raw.trim() == "auto" {
        Ok(Auto::Auto)
    } else {
        parse(key, raw).map(Auto::Value)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let raw = raw.trim();
        match key {
            "seed" => self.seed = parse(key, raw)?,
            "system.name" => self.system.name = raw.to_string(),
            "system.alpha" => self.system.alpha = parse(key, raw)?,
            "system.q" => self.system.q = parse(key, raw)?,
            "system.d" => self.system.d = parse(key, raw)?,
            "system.epsilon" => self.system.epsilon = parse_auto(key, raw)?,
            "grid.nx" => self.grid.nx = parse(key, raw)?,
            "grid.length" => self.grid.length = parse(key, raw)?,
            "grid.t_end" => self.grid.t_end = parse(key, raw)?,
            "grid.steps" => self.grid.steps = parse(key, raw)?,
            "grid.cfl" => self.grid.cfl = parse(key, raw)?,
            "grid.dealias" => self.grid.dealias = parse(key, raw)?,
            "data.kind" => self.data.kind = raw.to_string(),
            "data.amplitude" => self.data.amplitude = parse(key, raw)?,
            "data.modes" => self.data.modes = parse(key, raw)?,
            "schedule.gamma" => self.schedule.gamma = parse_auto(key, raw)?,
            "strong.blowup" => self.strong.blowup = parse(key, raw)?,
            "strong.tol" => self.strong.tol = parse(key, raw)?,
            "dual.mu0" => self.dual.mu0 = parse(key, raw)?,
            "dual.stages" => self.dual.stages = parse(key, raw)?,
            "dual.max_iters" => self.dual.max_iters = parse(key, raw)?,
            "dual.tol" => self.dual.tol = parse(key, raw)?,
            "dual.conj_tol" => self.dual.conj_tol = parse(key, raw)?,
            "dual.newton_iters" => self.dual.newton_iters = parse(key, raw)?,
            "dual.start" => self.dual.start = raw.to_string(),
            "dual.start_amplitude" => self.dual.start_amplitude = parse(key, raw)?,
            "verify.gap" => self.verify.gap = parse(key, raw)?,
            "verify.recovery" => self.verify.recovery = parse(key, raw)?,
            "verify.constraint" => self.verify.constraint = parse(key, raw)?,
            "verify.margin" => self.verify.margin = parse(key, raw)?,
            "verify.maximality" => self.verify.maximality = parse(key, raw)?,
            "verify.solve" => self.verify.solve = parse(key, raw)?,
            "dafermos.t1" => self.dafermos.t1 = parse_auto(key, raw)?,
            "dafermos.inflation" => self.dafermos.inflation = parse(key, raw)?,
            "dafermos.samples" => self.dafermos.samples = parse(key, raw)?,
            "dafermos.certify" => self.dafermos.certify = parse(key, raw)?,
            "dafermos.modes" => self.dafermos.modes = parse(key, raw)?,
            "dafermos.tol" => self.dafermos.tol = parse(key, raw)?,
            "hopflax.amplitude" => self.hopflax.amplitude = parse(key, raw)?,
            "hopflax.t_end" => self.hopflax.t_end = parse(key, raw)?,
            "hopflax.steps" => self.hopflax.steps = parse(key, raw)?,
            "hopflax.iterations" => self.hopflax.iterations = parse(key, raw)?,
            "hopflax.gap" => self.hopflax.gap = parse(key, raw)?,
            "checks.samples" => self.checks.samples = parse(key, raw)?,
            "checks.trials" => self.checks.trials = parse(key, raw)?,
            "checks.radius" => self.checks.radius = parse(key, raw)?,
            _ => return Err(bad(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a config file: JSON if it starts with `{`, key-value otherwise.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        if text.trim_start().starts_with('{') {
            let v: Value = serde_json::from_str(text).map_err(|e| bad(format!("invalid JSON: {e}")))?;
            let mut flat = BTreeMap::new();
            flatten("", &v, &mut flat)?;
            for (k, raw) in flat {
                self.set(&k, &raw)?;
            }
            return Ok(());
        }
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key = value", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("override '{kv}': expected key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |k: &str, x: f64| if x > 0.0 && x.is_finite() { Ok(()) } else { Err(bad(format!("{k} must be positive"))) };
        let nonneg = |k: &str, x: f64| if x >= 0.0 && x.is_finite() { Ok(()) } else { Err(bad(format!("{k} must be nonnegative"))) };
        if !["gkdv", "nls", "nlkg", "scalar", "burgers", "hj"].contains(&self.system.name.as_str()) {
            return Err(bad(format!("system.name: unknown system '{}'", self.system.name)));
        }
        if let Auto::Value(e) = self.system.epsilon {
            positive("system.epsilon", e)?;
        }
        if self.system.d == 0 || self.system.d > 3 {
            return Err(bad("system.d must be 1, 2 or 3"));
        }
        if self.grid.nx < 4 || self.grid.nx % 2 == 1 {
            return Err(bad("grid.nx must be even and at least 4"));
        }
        positive("grid.length", self.grid.length)?;
        positive("grid.t_end", self.grid.t_end)?;
        positive("grid.cfl", self.grid.cfl)?;
        if self.grid.steps == 0 {
            return Err(bad("grid.steps must be at least 1"));
        }
        if !["random", "cos", "zero"].contains(&self.data.kind.as_str()) {
            return Err(bad(format!("data.kind: expected random, cos or zero, got '{}'", self.data.kind)));
        }
        nonneg("data.amplitude", self.data.amplitude)?;
        if self.data.modes == 0 {
            return Err(bad("data.modes must be at least 1"));
        }
        if let Auto::Value(g) = self.schedule.gamma {
            nonneg("schedule.gamma", g)?;
        }
        positive("strong.blowup", self.strong.blowup)?;
        positive("strong.tol", self.strong.tol)?;
        positive("dual.mu0", self.dual.mu0)?;
        positive("dual.tol", self.dual.tol)?;
        positive("dual.conj_tol", self.dual.conj_tol)?;
        if self.dual.stages == 0 {
            return Err(bad("dual.stages must be at least 1"));
        }
        if !["random", "zero"].contains(&self.dual.start.as_str()) {
            return Err(bad(format!("dual.start: expected random or zero, got '{}'", self.dual.start)));
        }
        nonneg("dual.start_amplitude", self.dual.start_amplitude)?;
        for (k, x) in [
            ("verify.gap", self.verify.gap),
            ("verify.recovery", self.verify.recovery),
            ("verify.constraint", self.verify.constraint),
            ("verify.margin", self.verify.margin),
            ("verify.maximality", self.verify.maximality),
            ("dafermos.inflation", self.dafermos.inflation),
        ] {
            nonneg(k, x)?;
        }
        if let Auto::Value(t1) = self.dafermos.t1 {
            if !(t1 > 0.0 && t1 <= self.grid.t_end) {
                return Err(bad("dafermos.t1 must lie in (0, grid.t_end]"));
            }
        }
        positive("dafermos.tol", self.dafermos.tol)?;
        if self.dafermos.samples == 0 || self.dafermos.modes == 0 {
            return Err(bad("dafermos.samples and dafermos.modes must be at least 1"));
        }
        nonneg("hopflax.amplitude", self.hopflax.amplitude)?;
        positive("hopflax.t_end", self.hopflax.t_end)?;
        positive("hopflax.gap", self.hopflax.gap)?;
        if self.hopflax.steps == 0 {
            return Err(bad("hopflax.steps must be at least 1"));
        }
        if self.checks.samples == 0 || self.checks.trials == 0 {
            return Err(bad("checks.samples and checks.trials must be at least 1"));
        }
        positive("checks.radius", self.checks.radius)?;
        Ok(())
    }

    /// Canonical JSON of the effective configuration.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) -> Result<(), ConfigError> {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out)?;
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Number(n) => {
            out.insert(prefix.to_string(), n.to_string());
        }
        Value::Bool(b) => {
            out.insert(prefix.to_string(), b.to_string());
        }
        _ => return Err(bad(format!("{prefix}: unsupported value {v}"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_and_json_agree() {
        let mut a = RunConfig::default();
        a.apply_text("# comment\nsystem.name = nls\ngrid.nx = 32\nschedule.gamma = 1.5\n").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(r#"{"system": {"name": "nls"}, "grid.nx": 32, "schedule": {"gamma": 1.5}}"#).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.schedule.gamma, Auto::Value(1.5));
    }

    #[test]
    fn effective_config_round_trips() {
        let mut a = RunConfig::default();
        a.set("dafermos.t1", "0.25").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.to_json().to_string()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("grid.nz", "3").is_err());
        assert!(c.set("grid.nx", "many").is_err());
        c.set("grid.nx", "7").unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
