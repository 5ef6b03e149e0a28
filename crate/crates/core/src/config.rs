//! Plain-text run configuration.
//!
//! One `section.key = value` per line; `#` starts a comment. Every key has
//! a default, so an empty file is a valid configuration.

use std::collections::HashMap;
use std::path::Path;

use crate::ekf::{FuseConfig, NoiseParams, DEFAULT_GATE};
use crate::error::{Error, Result};
use crate::moenet::{MoeConfig, TrainConfig};
use crate::sim::{PlanConfig, WindowConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Synthetic dataset layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub rides: usize,
    /// Distinct rider profiles cycled through the rides.
    pub participants: usize,
    pub plan: PlanConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rides: 10,
            participants: 4,
            plan: PlanConfig::default(),
        }
    }
}

/// Filter settings beyond the noise model.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub stride: usize,
    pub gate: Option<f64>,
    pub static_samples: usize,
    /// Standard deviation reported by the oracle velocity source, m/s.
    pub oracle_sigma: f64,
    /// RTE interval, s.
    pub rte_dt: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            stride: 10,
            gate: Some(DEFAULT_GATE),
            static_samples: 100,
            oracle_sigma: 0.05,
            rte_dt: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub moe: MoeConfig,
    pub train: TrainConfig,
    pub noise: NoiseParams,
    pub sim: SimConfig,
    /// Training-window stride in samples.
    pub data_stride: usize,
    /// Per-axis orientation perturbation of training windows, degrees.
    pub orientation_sigma_deg: f64,
    pub filter: FilterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            moe: MoeConfig::default(),
            train: TrainConfig::default(),
            noise: NoiseParams::default(),
            sim: SimConfig::default(),
            data_stride: 10,
            orientation_sigma_deg: 2.0,
            filter: FilterConfig::default(),
        }
    }
}

fn int<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got {v:?}"))
}

fn real(v: &str) -> std::result::Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, got {v:?}")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |key: &str, msg: String| Error::Config {
                line,
                key: key.to_owned(),
                msg,
            };
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(content, "expected `section.key = value`".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_owned(), line) {
                return Err(err(key, format!("duplicate key (first set on line {first})")));
            }
            cfg.set(key, value).map_err(|m| err(key, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let Some((section, name)) = key.split_once('.') else {
            return Err("unknown key".into());
        };
        let plan = &mut self.sim.plan;
        match (section, name) {
            ("run", "seed") => self.seed = int(value)?,
            ("run", "schema_version") => {
                let v: u32 = int(value)?;
                if v != SCHEMA_VERSION {
                    return Err(format!("unsupported schema version {v} (expected {SCHEMA_VERSION})"));
                }
            }
            ("moe", _) => self.moe.set(name, value)?,
            ("train", "lr") => self.train.lr = real(value)?,
            ("train", "batch_size") => self.train.batch_size = int(value)?,
            ("train", "max_epochs") => self.train.max_epochs = int(value)?,
            ("train", "patience") => self.train.patience = int(value)?,
            ("train", "min_delta") => self.train.min_delta = real(value)?,
            ("noise", _) => *self.noise.field_mut(name).ok_or("unknown key")? = real(value)?,
            ("sim", "rides") => self.sim.rides = int(value)?,
            ("sim", "participants") => self.sim.participants = int(value)?,
            ("sim", "duration") => plan.duration = real(value)?,
            ("sim", "roughness") => plan.roughness = real(value)?,
            ("sim", "rate_hz") => plan.rate_hz = real(value)?,
            ("sim", "lead_stop") => plan.lead_stop = real(value)?,
            ("sim", "min_speed") => plan.min_speed = real(value)?,
            ("sim", "max_speed") => plan.max_speed = real(value)?,
            ("data", "stride") => self.data_stride = int(value)?,
            ("data", "orientation_sigma_deg") => self.orientation_sigma_deg = real(value)?,
            ("filter", "stride") => self.filter.stride = int(value)?,
            ("filter", "gate") => {
                self.filter.gate = if value == "none" { None } else { Some(real(value)?) }
            }
            ("filter", "static_samples") => self.filter.static_samples = int(value)?,
            ("filter", "oracle_sigma") => self.filter.oracle_sigma = real(value)?,
            ("filter", "rte_dt") => self.filter.rte_dt = real(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        self.moe.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        self.fuse_config().validate()?;
        let p = &self.sim.plan;
        if self.sim.rides == 0 || self.sim.participants == 0 {
            return bad("sim.rides and sim.participants must be positive");
        }
        if !(p.duration > 0.0) || !(p.rate_hz > 0.0) || !(p.lead_stop >= 0.0) || !(p.roughness >= 0.0) {
            return bad("sim.duration and sim.rate_hz must be positive, sim.lead_stop and sim.roughness non-negative");
        }
        if !(0.0 < p.min_speed && p.min_speed <= p.max_speed && p.max_speed <= crate::sim::MAX_SPEED / 1.2) {
            return bad("0 < sim.min_speed <= sim.max_speed <= 8.33 violated");
        }
        if self.data_stride == 0 || !(self.orientation_sigma_deg >= 0.0) {
            return bad("data.stride must be positive and data.orientation_sigma_deg non-negative");
        }
        if !(self.filter.oracle_sigma > 0.0) || !(self.filter.rte_dt > 0.0) {
            return bad("filter.oracle_sigma and filter.rte_dt must be positive");
        }
        Ok(())
    }

    /// Effective configuration in the file grammar; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = format!("run.schema_version = {SCHEMA_VERSION}\nrun.seed = {}\n", self.seed);
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        for (k, v) in self.moe.entries() {
            put(&format!("moe.{k}"), v);
        }
        let t = &self.train;
        put("train.lr", t.lr.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.patience", t.patience.to_string());
        put("train.min_delta", t.min_delta.to_string());
        for (k, v) in self.noise.entries() {
            put(&format!("noise.{k}"), v.to_string());
        }
        let p = &self.sim.plan;
        put("sim.rides", self.sim.rides.to_string());
        put("sim.participants", self.sim.participants.to_string());
        put("sim.duration", p.duration.to_string());
        put("sim.roughness", p.roughness.to_string());
        put("sim.rate_hz", p.rate_hz.to_string());
        put("sim.lead_stop", p.lead_stop.to_string());
        put("sim.min_speed", p.min_speed.to_string());
        put("sim.max_speed", p.max_speed.to_string());
        put("data.stride", self.data_stride.to_string());
        put("data.orientation_sigma_deg", self.orientation_sigma_deg.to_string());
        let f = &self.filter;
        put("filter.stride", f.stride.to_string());
        put("filter.gate", f.gate.map_or("none".into(), |g| g.to_string()));
        put("filter.static_samples", f.static_samples.to_string());
        put("filter.oracle_sigma", f.oracle_sigma.to_string());
        put("filter.rte_dt", f.rte_dt.to_string());
        out
    }

    pub fn fuse_config(&self) -> FuseConfig {
        FuseConfig {
            rate_hz: self.sim.plan.rate_hz,
            window_len: self.moe.window_len,
            stride: self.filter.stride,
            gate: self.filter.gate,
            static_samples: self.filter.static_samples,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_add(2),
            ..self.train.clone()
        }
    }

    pub fn model_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Seed of synthetic ride `i`.
    pub fn ride_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(100 + i as u64)
    }

    /// Window settings for ride `i`.
    pub fn window_config(&self, i: usize) -> WindowConfig {
        WindowConfig {
            window_len: self.moe.window_len,
            stride: self.data_stride,
            orientation_sigma: self.orientation_sigma_deg.to_radians(),
            seed: self.seed.wrapping_add(10_000 + i as u64),
        }
    }
}
