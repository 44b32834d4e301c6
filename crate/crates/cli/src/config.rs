//! `key = value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use diffgda::csbm::{CsbmSpec, Shift};
use diffgda::pipeline::TrainConfig;

/// Synthetic pair written by `gen-synth`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub f: usize,
    pub separation: f64,
    pub std: f64,
    pub intra_p: f64,
    pub inter_q: f64,
    /// Degrees.
    pub rotation: f64,
    pub intra_delta: f64,
    pub inter_delta: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 300,
            f: 4,
            separation: 2.0,
            std: 1.0,
            intra_p: 0.2,
            inter_q: 0.05,
            rotation: 60.0,
            intra_delta: -0.1,
            inter_delta: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn spec(&self) -> diffgda::Result<CsbmSpec> {
        let mut spec = CsbmSpec::two_class(self.n, self.f, self.separation, self.std, self.intra_p, self.inter_q);
        spec.shift = Shift {
            rotation: self.rotation.to_radians(),
            intra_delta: self.intra_delta,
            inter_delta: self.inter_delta,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            source: None,
            target: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Every key accepted in a config file or by `--set`.
pub const KEYS: &[&str] = &[
    "alpha",
    "eta",
    "t_steps",
    "lr",
    "hidden",
    "dropout",
    "epochs",
    "rounds",
    "s_mc",
    "sigma_min",
    "sigma_max",
    "seed",
    "score_epochs",
    "score_lr",
    "classifier_epochs",
    "guidance_epochs",
    "feature_scale",
    "guidance_weight",
    "source",
    "target",
    "out",
    "synth.n",
    "synth.f",
    "synth.separation",
    "synth.std",
    "synth.intra_p",
    "synth.inter_q",
    "synth.rotation",
    "synth.intra_delta",
    "synth.inter_delta",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("{key}: cannot parse '{value}'"))
}

fn ranged(key: &str, value: &str, lo: f64, hi: f64) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if !(v.is_finite() && v >= lo && v <= hi) {
        bail!("{key} = {v} is out of range [{lo}, {hi}]");
    }
    Ok(v)
}

fn counted(key: &str, value: &str, lo: usize, hi: usize) -> Result<usize> {
    let v: usize = num(key, value)?;
    if !(lo..=hi).contains(&v) {
        bail!("{key} = {v} is out of range [{lo}, {hi}]");
    }
    Ok(v)
}

impl RunConfig {
    /// Applies one assignment, checking the key and its range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "alpha" => t.alpha = ranged(key, value, 0.0, 1.0)?,
            "eta" => t.eta = ranged(key, value, 0.0, 0.5)?,
            "t_steps" => t.t_steps = counted(key, value, 1, 150)?,
            "lr" => {
                let v: f64 = num(key, value)?;
                if !diffgda::pipeline::LR_CHOICES.iter().any(|&c| (v - c).abs() <= 1e-12 * c) {
                    bail!("lr = {v} is out of range {{1e-4, 1e-3, 1e-2}}");
                }
                t.lr = v;
            }
            "hidden" => t.hidden = counted(key, value, 1, 4096)?,
            "dropout" => {
                let v = ranged(key, value, 0.0, 1.0)?;
                if v >= 1.0 {
                    bail!("dropout = {v} is out of range [0, 1)");
                }
                t.dropout = v;
            }
            "epochs" => t.epochs = counted(key, value, 1, 100_000)?,
            "rounds" => t.rounds = counted(key, value, 1, 1000)?,
            "s_mc" => t.s_mc = counted(key, value, 1, 10_000)?,
            "sigma_min" => t.sigma_min = ranged(key, value, f64::MIN_POSITIVE, 1e6)?,
            "sigma_max" => t.sigma_max = ranged(key, value, f64::MIN_POSITIVE, 1e6)?,
            "seed" => t.seed = num(key, value)?,
            "score_epochs" => t.score_epochs = counted(key, value, 0, 1_000_000)?,
            "score_lr" => t.score_lr = ranged(key, value, 1e-8, 1.0)?,
            "classifier_epochs" => t.classifier_epochs = counted(key, value, 0, 1_000_000)?,
            "guidance_epochs" => t.guidance_epochs = counted(key, value, 0, 1_000_000)?,
            "feature_scale" => t.feature_scale = ranged(key, value, 1e-6, 1e6)?,
            "guidance_weight" => t.guidance_weight = ranged(key, value, 0.0, 1e6)?,
            "source" => self.source = Some(path(key, value)?),
            "target" => self.target = Some(path(key, value)?),
            "out" => self.out = path(key, value)?,
            "synth.n" => s.n = counted(key, value, 1, 100_000)?,
            "synth.f" => s.f = counted(key, value, 1, 100_000)?,
            "synth.separation" => s.separation = ranged(key, value, 0.0, 1e6)?,
            "synth.std" => s.std = ranged(key, value, 1e-12, 1e6)?,
            "synth.intra_p" => s.intra_p = ranged(key, value, 0.0, 1.0)?,
            "synth.inter_q" => s.inter_q = ranged(key, value, 0.0, 1.0)?,
            "synth.rotation" => s.rotation = ranged(key, value, -360.0, 360.0)?,
            "synth.intra_delta" => s.intra_delta = ranged(key, value, -1.0, 1.0)?,
            "synth.inter_delta" => s.inter_delta = ranged(key, value, -1.0, 1.0)?,
            _ => bail!("unknown key '{key}'"),
        }
        Ok(())
    }

    /// Cross-field checks once every assignment is in.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        Ok(())
    }

    pub fn source_path(&self) -> PathBuf {
        self.source.clone().unwrap_or_else(|| self.out.join("source.graph"))
    }

    pub fn target_path(&self) -> PathBuf {
        self.target.clone().unwrap_or_else(|| self.out.join("target.graph"))
    }
}

fn path(key: &str, value: &str) -> Result<PathBuf> {
    if value.is_empty() {
        bail!("{key} must not be empty");
    }
    Ok(PathBuf::from(value))
}

/// Splits `key=value` (or `key = value`).
pub fn split_assignment(s: &str) -> Result<(&str, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected key = value, got '{s}'"))?;
    Ok((k.trim(), v.trim()))
}

/// Applies the lines of a config file to `cfg`.
pub fn apply_text(cfg: &mut RunConfig, text: &str, origin: &Path) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = split_assignment(line).with_context(|| format!("{}:{}", origin.display(), i + 1))?;
        cfg.set(k, v).with_context(|| format!("{}:{}", origin.display(), i + 1))?;
    }
    Ok(())
}

/// Defaults, then the file (if any), then `overrides` in order.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
        apply_text(&mut cfg, &text, p)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
