//! Flat `key = value` experiment configuration with strict keys and a
//! stable content hash.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::CostConvention;
use crate::time_grid::{JumpMeasure, MarkDistribution, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExampleId {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub example: ExampleId,
    pub horizon: f64,
    pub delta: f64,
    pub delta_list: Vec<f64>,
    /// Steps per delay; when unset the grid uses `dt`.
    pub m: Option<usize>,
    pub dt: f64,
    pub n_paths: usize,
    pub master_seed: u64,

    pub a: f64,
    pub b: f64,
    pub sigma0: f64,
    pub theta: f64,
    pub jump_gamma: f64,
    pub lambda: f64,
    pub mark: MarkDistribution<f64>,
    pub ex1_cost_sign: f64,
    pub ex1_iterations: usize,
    pub v_lo: f64,
    pub v_hi: f64,
    pub x0: f64,

    pub alpha: f64,
    pub beta: f64,
    pub mu_hat0: f64,
    pub r0: f64,
    pub riccati_gamma0: f64,
    pub cost_convention: CostConvention,

    pub degree: usize,
    pub lags: Vec<usize>,
    pub v_grid: usize,
    pub epsilon: f64,
    pub smp_tolerance: f64,
    pub assert_monotone: bool,
    pub export_paths: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            example: ExampleId::Two,
            horizon: 1.0,
            delta: 0.4,
            delta_list: vec![0.38, 0.40, 0.42, 0.44, 0.48],
            m: None,
            dt: 0.02,
            n_paths: 10_000,
            master_seed: 20_240_607,
            a: 0.5,
            b: 1.0,
            sigma0: 0.2,
            theta: 0.3,
            jump_gamma: 0.1,
            lambda: 1.0,
            mark: MarkDistribution::Constant(1.0),
            ex1_cost_sign: -1.0,
            ex1_iterations: 3,
            v_lo: -2.0,
            v_hi: 2.0,
            x0: 1.0,
            alpha: 0.1,
            beta: 0.2,
            mu_hat0: 0.15,
            r0: 0.05,
            riccati_gamma0: 0.05,
            cost_convention: CostConvention::Half,
            degree: 2,
            lags: Vec::new(),
            v_grid: 401,
            epsilon: 0.05,
            smp_tolerance: 1.0,
            assert_monotone: true,
            export_paths: 100,
            output_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "example",
    "T",
    "delta",
    "delta_list",
    "m",
    "dt",
    "n_paths",
    "master_seed",
    "a",
    "b",
    "sigma0",
    "theta",
    "jump_gamma",
    "lambda",
    "mark",
    "ex1_cost_sign",
    "ex1_iterations",
    "v_lo",
    "v_hi",
    "x0",
    "alpha",
    "beta",
    "mu_hat0",
    "r0",
    "riccati_gamma0",
    "cost_convention",
    "degree",
    "lags",
    "v_grid",
    "epsilon",
    "smp_tolerance",
    "assert_monotone",
    "export_paths",
    "output_dir",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: Some(i + 1), message: format!("expected key=value, got '{line}'") })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config { message, .. } => Error::Config { line: Some(i + 1), message },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "example" => {
                self.example = match value {
                    "1" | "example1" => ExampleId::One,
                    "2" | "example2" => ExampleId::Two,
                    _ => return Err(Error::config(format!("example: expected 1 or 2, got '{value}'"))),
                }
            }
            "T" => self.horizon = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "delta_list" => self.delta_list = list(key, value)?,
            "m" => self.m = if value.is_empty() || value == "none" { None } else { Some(num(key, value)?) },
            "dt" => self.dt = num(key, value)?,
            "n_paths" => self.n_paths = num(key, value)?,
            "master_seed" => self.master_seed = num(key, value)?,
            "a" => self.a = num(key, value)?,
            "b" => self.b = num(key, value)?,
            "sigma0" => self.sigma0 = num(key, value)?,
            "theta" => self.theta = num(key, value)?,
            "jump_gamma" => self.jump_gamma = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "mark" => {
                self.mark = match value {
                    "uniform" => MarkDistribution::UniformSymmetric,
                    v => match v.strip_prefix("constant") {
                        Some("") => MarkDistribution::Constant(1.0),
                        Some(rest) => MarkDistribution::Constant(num(key, rest.trim_start_matches(':'))?),
                        None => return Err(Error::config(format!("mark: expected constant[:c] or uniform, got '{v}'"))),
                    },
                }
            }
            "ex1_cost_sign" => self.ex1_cost_sign = num(key, value)?,
            "ex1_iterations" => self.ex1_iterations = num(key, value)?,
            "v_lo" => self.v_lo = num(key, value)?,
            "v_hi" => self.v_hi = num(key, value)?,
            "x0" => self.x0 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "mu_hat0" => self.mu_hat0 = num(key, value)?,
            "r0" => self.r0 = num(key, value)?,
            "riccati_gamma0" => self.riccati_gamma0 = num(key, value)?,
            "cost_convention" => {
                self.cost_convention = match value {
                    "half" => CostConvention::Half,
                    "sum" => CostConvention::Sum,
                    _ => return Err(Error::config(format!("cost_convention: expected half or sum, got '{value}'"))),
                }
            }
            "degree" => self.degree = num(key, value)?,
            "lags" => self.lags = list(key, value)?,
            "v_grid" => self.v_grid = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "smp_tolerance" => self.smp_tolerance = num(key, value)?,
            "assert_monotone" => self.assert_monotone = num(key, value)?,
            "export_paths" => self.export_paths = num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key on its own line, in declaration order.
    pub fn canonical(&self) -> String {
        let mark = match self.mark {
            MarkDistribution::Constant(c) => format!("constant:{c}"),
            MarkDistribution::UniformSymmetric => "uniform".to_string(),
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("example", match self.example {
            ExampleId::One => "1".into(),
            ExampleId::Two => "2".into(),
        });
        put("T", self.horizon.to_string());
        put("delta", self.delta.to_string());
        put("delta_list", join(&self.delta_list));
        put("m", self.m.map_or("none".into(), |m| m.to_string()));
        put("dt", self.dt.to_string());
        put("n_paths", self.n_paths.to_string());
        put("master_seed", self.master_seed.to_string());
        put("a", self.a.to_string());
        put("b", self.b.to_string());
        put("sigma0", self.sigma0.to_string());
        put("theta", self.theta.to_string());
        put("jump_gamma", self.jump_gamma.to_string());
        put("lambda", self.lambda.to_string());
        put("mark", mark);
        put("ex1_cost_sign", self.ex1_cost_sign.to_string());
        put("ex1_iterations", self.ex1_iterations.to_string());
        put("v_lo", self.v_lo.to_string());
        put("v_hi", self.v_hi.to_string());
        put("x0", self.x0.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("mu_hat0", self.mu_hat0.to_string());
        put("r0", self.r0.to_string());
        put("riccati_gamma0", self.riccati_gamma0.to_string());
        put("cost_convention", self.cost_convention.as_str().into());
        put("degree", self.degree.to_string());
        put("lags", join(&self.lags));
        put("v_grid", self.v_grid.to_string());
        put("epsilon", self.epsilon.to_string());
        put("smp_tolerance", self.smp_tolerance.to_string());
        put("assert_monotone", self.assert_monotone.to_string());
        put("export_paths", self.export_paths.to_string());
        put("output_dir", self.output_dir.display().to_string());
        s
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn grid(&self, delta: f64) -> Result<TimeGrid<f64>> {
        match self.m {
            Some(m) => TimeGrid::new(self.horizon, delta, m),
            None => TimeGrid::with_step(self.horizon, delta, self.dt),
        }
    }

    pub fn jumps(&self) -> JumpMeasure<f64> {
        JumpMeasure { intensity: self.lambda, marks: self.mark }
    }

    /// Structural checks; statistical runs need at least 10³ paths.
    pub fn validate(&self) -> Result<()> {
        self.grid(self.delta)?;
        if self.n_paths < 1000 {
            return Err(Error::config(format!("n_paths must be at least 1000, got {}", self.n_paths)));
        }
        if !(self.v_lo < self.v_hi) {
            return Err(Error::config("v_lo must be below v_hi"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be non-negative"));
        }
        if self.v_grid < 2 {
            return Err(Error::config("v_grid needs at least two points"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_canonical_form() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("mark", "uniform").unwrap();
        cfg.set("lags", "2,5").unwrap();
        cfg.set("m", "20").unwrap();
        let back = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = ExperimentConfig::parse("T = 1\n# comment\nbogus = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: Some(3), .. }), "{err}");
    }

    #[test]
    fn hash_changes_with_any_value() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.set("master_seed", "7").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn sweep_deltas_align_with_default_step() {
        let cfg = ExperimentConfig::default();
        let shifts: Vec<usize> = cfg.delta_list.iter().map(|&d| cfg.grid(d).unwrap().delay_shift()).collect();
        assert_eq!(shifts, vec![19, 20, 21, 22, 24]);
        assert!(cfg.grid(0.41).is_err());
    }

    #[test]
    fn too_few_paths_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.n_paths = 10;
        assert!(cfg.validate().is_err());
    }
}
