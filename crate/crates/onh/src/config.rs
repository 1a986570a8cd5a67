//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors. Lists are comma separated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use onh_core::pointnet::PointNetConfig;
use onh_core::train::TrainConfig;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: PointNetConfig,
    pub train: TrainConfig,
    /// Master seed; the training seeds derive from it unless set explicitly.
    pub seed: u64,
    /// Train, validation and test fractions for single runs.
    pub split: [f64; 3],
    pub folds: usize,
    /// Where `train` writes its history; next to the checkpoint by default.
    pub history_path: Option<PathBuf>,
    pub roc_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 0;
        RunConfig {
            model: PointNetConfig::default(),
            train: TrainConfig::default().with_seed(seed),
            seed,
            split: [0.70, 0.15, 0.15],
            folds: 5,
            history_path: None,
            roc_path: None,
        }
    }
}

/// Parsed `key = value` lines with their line numbers.
pub(crate) fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if out.iter().any(|(_, seen, _)| seen == k) {
            return Err(Error::Config {
                line: i + 1,
                message: format!("duplicate key {k}"),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("invalid value {v:?} for {key}"),
    })
}

fn list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| value(line, key, x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Applies one model key; false if `key` is not a model key.
pub(crate) fn set_model_key(m: &mut PointNetConfig, line: usize, key: &str, v: &str) -> Result<bool> {
    match key {
        "s_points" => m.s_points = value(line, key, v)?,
        "in_dim" => m.in_dim = value(line, key, v)?,
        "spatial_dim" => m.spatial_dim = value(line, key, v)?,
        "class_count" => m.class_count = value(line, key, v)?,
        "mlp1_widths" => m.mlp1_widths = list(line, key, v)?,
        "mlp2_widths" => m.mlp2_widths = list(line, key, v)?,
        "head_widths" => m.head_widths = list(line, key, v)?,
        "dropout_rate" => m.dropout_rate = value(line, key, v)?,
        "feature_transform" => m.feature_transform = value(line, key, v)?,
        "ortho_weight" => m.ortho_weight = value(line, key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Model keys in a fixed order. Floats use the shortest round-tripping form.
pub fn model_to_text(m: &PointNetConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "s_points = {}", m.s_points);
    let _ = writeln!(s, "in_dim = {}", m.in_dim);
    let _ = writeln!(s, "spatial_dim = {}", m.spatial_dim);
    let _ = writeln!(s, "class_count = {}", m.class_count);
    let _ = writeln!(s, "mlp1_widths = {}", join(&m.mlp1_widths));
    let _ = writeln!(s, "mlp2_widths = {}", join(&m.mlp2_widths));
    let _ = writeln!(s, "head_widths = {}", join(&m.head_widths));
    let _ = writeln!(s, "dropout_rate = {}", m.dropout_rate);
    let _ = writeln!(s, "feature_transform = {}", m.feature_transform);
    let _ = writeln!(s, "ortho_weight = {}", m.ortho_weight);
    s
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let pairs = parse_pairs(text)?;
        let mut explicit_seeds = [None; 3];
        for (line, key, v) in &pairs {
            let (line, v) = (*line, v.as_str());
            if set_model_key(&mut c.model, line, key, v)? {
                if key == "ortho_weight" {
                    c.train.ortho_weight = c.model.ortho_weight;
                }
                continue;
            }
            let t = &mut c.train;
            match key.as_str() {
                "max_epochs" => t.max_epochs = value(line, key, v)?,
                "batch_size" => t.batch_size = value(line, key, v)?,
                "early_stop_patience" => t.patience = value(line, key, v)?,
                "learning_rate" => t.lr = value(line, key, v)?,
                "augment" => t.augment = value(line, key, v)?,
                "max_angle_deg" => t.max_angle = value::<f64>(line, key, v)?.to_radians(),
                "max_shift_mm" => t.max_shift_mm = value(line, key, v)?,
                "scale_um" => t.scale_um = value(line, key, v)?,
                "seed" => c.seed = value(line, key, v)?,
                "init_seed" => explicit_seeds[0] = Some(value(line, key, v)?),
                "sample_seed" => explicit_seeds[1] = Some(value(line, key, v)?),
                "dropout_seed" => explicit_seeds[2] = Some(value(line, key, v)?),
                "folds" => c.folds = value(line, key, v)?,
                "split" => {
                    let f: Vec<f64> = list(line, key, v)?;
                    c.split = f.try_into().map_err(|_| Error::Config {
                        line,
                        message: "split needs three fractions".into(),
                    })?;
                }
                "history_path" => c.history_path = Some(PathBuf::from(v)),
                "roc_path" => c.roc_path = Some(PathBuf::from(v)),
                _ => {
                    return Err(Error::Config {
                        line,
                        message: format!("unknown key {key}"),
                    })
                }
            }
        }
        c.train = c.train.clone().with_seed(c.seed);
        let [i, s, d] = explicit_seeds;
        c.train.init_seed = i.unwrap_or(c.train.init_seed);
        c.train.sample_seed = s.unwrap_or(c.train.sample_seed);
        c.train.dropout_seed = d.unwrap_or(c.train.dropout_seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.split.iter().any(|&f| !(f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Core(onh_core::Error::Spec(format!(
                "split fractions {:?} must be positive and sum to 1",
                self.split
            ))));
        }
        if self.folds < 2 {
            return Err(Error::Core(onh_core::Error::Spec(format!(
                "need at least 2 folds, got {}",
                self.folds
            ))));
        }
        Ok(())
    }
}
