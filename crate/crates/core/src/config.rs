//! Training configuration and its `key = value` text form.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Keys not present keep their defaults.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::SupervisionConfig;
use crate::model::{EncoderKind, InteractionWiring, ModelConfig};
use crate::optim::SgdConfig;

/// Floating-point width used for training and inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side length images are resized to; mirrors `model.input_size`.
    pub input_size: usize,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
    pub precision: Precision,
    pub supervision: SupervisionConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-scale schedule: 352x352 inputs, batch 30, 32 epochs.
    pub fn full_scale() -> Self {
        Self::with_scale(352, 30, 32)
    }

    /// CPU-sized schedule: 64x64 inputs, batch 8, 20 epochs.
    pub fn desk() -> Self {
        Self::with_scale(64, 8, 20)
    }

    fn with_scale(input_size: usize, batch_size: usize, epochs: usize) -> Self {
        let sgd = SgdConfig::default();
        TrainConfig {
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            epochs,
            batch_size,
            input_size,
            seed: 0,
            precision: Precision::F32,
            supervision: SupervisionConfig::default(),
            model: ModelConfig {
                input_size,
                ..ModelConfig::default()
            },
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.input_size != self.model.input_size {
            return Err(Error::Config(format!(
                "input_size {} disagrees with model input_size {}",
                self.input_size, self.model.input_size
            )));
        }
        if self.supervision.side_count != self.model.side_output_count {
            return Err(Error::Config(format!(
                "supervision expects {} side outputs, model has {}",
                self.supervision.side_count, self.model.side_output_count
            )));
        }
        self.model.validate()?;
        self.supervision.validate()
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        fn list(key: &str, value: &str) -> Result<Vec<f64>> {
            value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| num(key, s.trim()))
                .collect()
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "input_size" => {
                self.input_size = num(key, value)?;
                self.model.input_size = self.input_size;
            }
            "seed" => self.seed = num(key, value)?,
            "precision" => self.precision = value.parse()?,
            "supervision" => self.supervision.mode = value.parse()?,
            "erosion_radius" => self.supervision.erosion_radius = num(key, value)?,
            "alpha" => self.supervision.alpha = list(key, value)?,
            "beta" => self.supervision.beta = list(key, value)?,
            "unified_channels" => self.model.unified_channels = num(key, value)?,
            "cascade_depth" => self.model.cascade_depth = num(key, value)?,
            "attention" => self.model.attention = value.parse()?,
            "attention_reduction" => self.model.attention_reduction = num(key, value)?,
            "spatial_kernel" => self.model.spatial_kernel = num(key, value)?,
            "wiring" => self.model.wiring = InteractionWiring::parse(value)?,
            "init_seed" => self.model.init_seed = num(key, value)?,
            "encoder" => {
                self.model.encoder = match value {
                    "tiny" => EncoderKind::Tiny,
                    path => EncoderKind::ExternalWeights(PathBuf::from(path)),
                }
            }
            "side_output_count" => {
                let m: usize = num(key, value)?;
                self.model.side_output_count = m;
                let sup = &mut self.supervision;
                if sup.side_count != m {
                    sup.side_count = m;
                    sup.alpha.resize(m, 1.0);
                    sup.beta.resize(m, 1.0);
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines on top of the desk defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every setting, in a form [`TrainConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let encoder = match &self.model.encoder {
            EncoderKind::Tiny => "tiny".to_string(),
            EncoderKind::ExternalWeights(p) => p.display().to_string(),
        };
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("input_size", self.input_size.to_string());
        put("seed", self.seed.to_string());
        put("precision", self.precision.to_string());
        put("side_output_count", self.model.side_output_count.to_string());
        put("supervision", self.supervision.mode.to_string());
        put("erosion_radius", self.supervision.erosion_radius.to_string());
        put("alpha", join(&self.supervision.alpha));
        put("beta", join(&self.supervision.beta));
        put("unified_channels", self.model.unified_channels.to_string());
        put("cascade_depth", self.model.cascade_depth.to_string());
        put("attention", self.model.attention.to_string());
        put("attention_reduction", self.model.attention_reduction.to_string());
        put("spatial_kernel", self.model.spatial_kernel.to_string());
        put("wiring", self.model.wiring.describe());
        put("init_seed", self.model.init_seed.to_string());
        put("encoder", encoder);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::loss::SupervisionMode;

    #[test]
    fn presets() {
        let d = TrainConfig::desk();
        assert_eq!((d.input_size, d.batch_size, d.epochs), (64, 8, 20));
        let p = TrainConfig::full_scale();
        assert_eq!((p.input_size, p.batch_size, p.epochs), (352, 30, 32));
        assert_eq!((p.lr, p.momentum, p.weight_decay), (0.005, 0.9, 5e-5));
        assert!(d.validate().is_ok());
        assert!(p.validate().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0125;
        cfg.model.cascade_depth = 3;
        cfg.model.attention = AttentionKind::Channel;
        cfg.supervision.mode = SupervisionMode::Normal;
        cfg.supervision.alpha = vec![0.5, 1.0, 0.25, 2.0];
        cfg.model.wiring = InteractionWiring::all();
        cfg.precision = Precision::F64;
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors() {
        assert!(TrainConfig::parse("lr 0.1").is_err());
        assert!(TrainConfig::parse("nope = 1").is_err());
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("lr = 0").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("input_size = 60").is_err());
        assert!(TrainConfig::parse("alpha = 1,1").is_err());
        let ok = TrainConfig::parse("# comment\n\nepochs = 3\nside_output_count = 2\n").unwrap();
        assert_eq!(ok.epochs, 3);
        assert_eq!(ok.supervision.alpha.len(), 2);
    }
}
