//! Run configuration: an ordered `key = value` file with `[section]` headers.
//!
//! ```text
//! [run]
//! out = runs/phantom
//!
//! [data]
//! phantom = 70, 32, 32      # or: manifest = data/manifest.csv
//! split = 50, 0, 20
//!
//! [network]
//! variant = ibu
//! depth = 2
//!
//! [train]
//! epochs = 300
//! seed = 0
//!
//! [augmentation]
//! enabled = true
//! multiplicity = 2
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augmentation::AugPolicy;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

pub const SECTIONS: [&str; 5] = ["run", "data", "network", "train", "augmentation"];

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits a config file into entries. Comments start with `#` or `;`.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let syntax = |line, message: String| Error::ConfigSyntax { line, message };
    let mut section: Option<String> = None;
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax(line_no, format!("unterminated section header `{line}`")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(syntax(
                    line_no,
                    format!("unknown section `[{name}]` (expected one of {})", SECTIONS.join(", ")),
                ));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(line_no, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(syntax(line_no, "missing key before `=`".into()));
        }
        let section = section
            .clone()
            .ok_or_else(|| syntax(line_no, format!("`{key}` appears before any [section] header")))?;
        if let Some(prev) = entries.iter().find(|e| e.section == section && e.key == key) {
            return Err(syntax(
                line_no,
                format!("duplicate key `{section}.{key}` (first set on line {})", prev.line),
            ));
        }
        entries.push(Entry {
            section,
            key: key.to_string(),
            value: value.to_string(),
            line: line_no,
        });
    }
    Ok(entries)
}

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Manifest(PathBuf),
    Phantom { count: usize, height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DataConfig {
    pub source: Option<DataSource>,
    /// Seeds phantom generation and patient re-splitting; independent of the
    /// training seed so every cell of a comparison sees the same data.
    pub data_seed: u64,
    /// Train/val/test weights. Phantoms are cut in generation order;
    /// a manifest is re-split by patient only when this is set.
    pub split: Option<[f64; 3]>,
    /// Pixel spacing in mm applied to images loaded from a manifest.
    pub spacing_mm: Option<f64>,
}

/// Everything a CLI command needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Whether `train` augments; `compare` decides per cell.
    pub augment: bool,
    pub policy: AugPolicy,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            network: NetworkConfig::desk(),
            train: TrainConfig::default(),
            augment: false,
            policy: AugPolicy::default(),
            eval_batch_size: 16,
        }
    }
}

fn field_err(e: &Entry, message: impl fmt::Display) -> Error {
    Error::config(
        format!("{}.{}", e.section, e.key),
        format!("line {}: {message}", e.line),
    )
}

fn value<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: fmt::Display,
{
    e.value
        .parse()
        .map_err(|err: T::Err| field_err(e, format!("invalid value `{}`: {err}", e.value)))
}

fn list<T: FromStr, const N: usize>(e: &Entry) -> Result<[T; N]>
where
    T::Err: fmt::Display,
{
    let parts: Vec<&str> = e.value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(field_err(
            e,
            format!("expected {N} comma-separated values, got `{}`", e.value),
        ));
    }
    let parsed = parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|err: T::Err| field_err(e, format!("invalid value `{p}`: {err}")))
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(parsed.try_into().unwrap_or_else(|_| unreachable!()))
}

fn relative_to(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses config text; relative paths are joined onto `base`.
    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut manifest_line = None;
        let mut phantom_line = None;
        for e in parse_entries(text)? {
            match (e.section.as_str(), e.key.as_str()) {
                ("run", "out") => cfg.out_dir = relative_to(base, &e.value),
                ("run", "eval_batch_size") => cfg.eval_batch_size = value(&e)?,
                ("data", "manifest") => {
                    manifest_line = Some(e.line);
                    cfg.data.source = Some(DataSource::Manifest(relative_to(base, &e.value)));
                }
                ("data", "phantom") => {
                    phantom_line = Some(e.line);
                    let [count, height, width] = list::<usize, 3>(&e)?;
                    cfg.data.source = Some(DataSource::Phantom { count, height, width });
                }
                ("data", "seed") => cfg.data.data_seed = value(&e)?,
                ("data", "split") => {
                    let w = list::<f64, 3>(&e)?;
                    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                        return Err(field_err(&e, "weights must be non-negative with a positive sum"));
                    }
                    cfg.data.split = Some(w);
                }
                ("data", "spacing_mm") => cfg.data.spacing_mm = Some(value(&e)?),
                ("network", key) => cfg
                    .network
                    .set_field(key, &e.value)
                    .map_err(|err| field_err(&e, strip_config(err)))?,
                ("train", key) => set_train(&mut cfg.train, key, &e)?,
                ("augmentation", "enabled") => cfg.augment = value(&e)?,
                ("augmentation", key) => set_policy(&mut cfg.policy, key, &e)?,
                _ => return Err(field_err(&e, "unknown key")),
            }
        }
        if let (Some(a), Some(b)) = (manifest_line, phantom_line) {
            return Err(Error::config(
                "data",
                format!("exactly one of `manifest` (line {a}) and `phantom` (line {b}) may be set"),
            ));
        }
        if cfg.eval_batch_size == 0 {
            return Err(Error::config("run.eval_batch_size", "must be at least 1"));
        }
        cfg.network.validate()?;
        cfg.train.augmentation = cfg.policy.clone();
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base)
    }

    /// Training settings with augmentation switched on or off.
    pub fn train_config(&self, augment: bool) -> TrainConfig {
        TrainConfig {
            augmentation: if augment {
                self.policy.clone()
            } else {
                AugPolicy::none()
            },
            ..self.train.clone()
        }
    }

    pub fn source(&self) -> Result<&DataSource> {
        self.data
            .source
            .as_ref()
            .ok_or_else(|| Error::config("data", "one of `manifest` or `phantom` is required"))
    }
}

fn strip_config(err: Error) -> String {
    match err {
        Error::Config { message, .. } => message,
        other => other.to_string(),
    }
}

fn set_train(t: &mut TrainConfig, key: &str, e: &Entry) -> Result<()> {
    match key {
        "epochs" => t.epochs = value(e)?,
        "max_steps" => t.max_steps = Some(value(e)?),
        "batch_size" => t.batch_size = value(e)?,
        "learning_rate" => t.learning_rate = value(e)?,
        "optimizer" => t.optimizer = value(e)?,
        "momentum" => t.momentum = value(e)?,
        "loss" => t.loss = value(e)?,
        "seed" => t.seed = value(e)?,
        "threshold" => t.threshold = value(e)?,
        _ => return Err(field_err(e, "unknown key")),
    }
    Ok(())
}

fn set_policy(p: &mut AugPolicy, key: &str, e: &Entry) -> Result<()> {
    match key {
        "multiplicity" => p.multiplicity = value(e)?,
        "affine" => p.affine = value(e)?,
        "rotate_deg" => p.rotate_deg = value(e)?,
        "scale_min" => p.scale_min = value(e)?,
        "scale_max" => p.scale_max = value(e)?,
        "shift_frac" => p.shift_frac = value(e)?,
        "elastic" => p.elastic = value(e)?,
        "alpha" => p.alpha = value(e)?,
        "sigma" => p.sigma = value(e)?,
        _ => return Err(field_err(e, "unknown key")),
    }
    Ok(())
}
