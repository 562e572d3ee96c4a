//! Experiment configuration (TOML) and the built-in presets.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arima::ArimaOrder;
use crate::error::{Error, Result};
use crate::models::{LstmConfig, TransformerConfig};
use crate::report::ReportModel;
use crate::training::TrainConfig;

impl FromStr for ReportModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arima" => Ok(ReportModel::Arima),
            "lstm" => Ok(ReportModel::Lstm),
            "bilstm" => Ok(ReportModel::BiLstm),
            "transformer" => Ok(ReportModel::Transformer),
            other => Err(Error::usage(format!(
                "unknown model '{other}' (expected arima, lstm, bilstm or transformer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::usage(format!("unknown preset '{other}' (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Hourly CSV with a `Datetime` column. Absent: use the synthetic series.
    pub path: Option<PathBuf>,
    /// Load column; defaults to the second column.
    pub column: Option<String>,
    pub synthetic_points: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            column: None,
            synthetic_points: 8760,
        }
    }
}

/// `"auto"` or an explicit `{ p, d, q }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderChoice {
    Fixed(ArimaOrder),
    Named(AutoOrder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoOrder {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArimaConfig {
    pub order: OrderChoice,
    pub max_p: usize,
    pub max_d: usize,
    pub max_q: usize,
    /// Origins between re-estimations; 0 estimates once.
    pub refit_every: usize,
    pub fit_window: Option<usize>,
}

impl Default for ArimaConfig {
    fn default() -> Self {
        ArimaConfig {
            order: OrderChoice::Named(AutoOrder::Auto),
            max_p: 5,
            max_d: 2,
            max_q: 5,
            refit_every: 24,
            fit_window: None,
        }
    }
}

impl ArimaConfig {
    pub fn fixed_order(&self) -> Option<ArimaOrder> {
        match self.order {
            OrderChoice::Fixed(o) => Some(o),
            OrderChoice::Named(AutoOrder::Auto) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub models: Vec<String>,
    pub input_len: usize,
    pub horizon: usize,
    pub split_fraction: f64,
    pub stride: usize,
    /// First test window of the plotted week.
    pub week_origin: usize,
    pub data: DataConfig,
    pub arima: ArimaConfig,
    pub lstm: LstmConfig,
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let paper = ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/paper"),
            models: ["arima", "lstm", "bilstm", "transformer"].map(String::from).to_vec(),
            input_len: 24,
            horizon: 24,
            split_fraction: 0.8,
            stride: 1,
            week_origin: 0,
            data: DataConfig::default(),
            arima: ArimaConfig::default(),
            lstm: LstmConfig::default(),
            transformer: TransformerConfig::default(),
            train: TrainConfig::default(),
        };
        match preset {
            Preset::Paper => paper,
            Preset::Desk => ExperimentConfig {
                out_dir: PathBuf::from("runs/desk"),
                lstm: LstmConfig {
                    hidden_size: 32,
                    ..paper.lstm
                },
                transformer: TransformerConfig {
                    num_layers: 2,
                    num_heads: 2,
                    d_model: 64,
                    d_ff: 256,
                    ..paper.transformer
                },
                train: TrainConfig {
                    epochs: 10,
                    ..paper.train
                },
                ..paper
            },
        }
    }

    /// `preset` overlaid with the keys present in the TOML text.
    pub fn from_toml(text: &str, preset: Preset) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overlay);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, preset)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_list(&self) -> Result<Vec<ReportModel>> {
        let mut out = Vec::new();
        for m in &self.models {
            let m: ReportModel = m.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Propagates the shared window sizes and dropout into the model configs.
    pub fn lstm_config(&self) -> LstmConfig {
        LstmConfig {
            horizon: self.horizon,
            dropout: self.train.dropout,
            ..self.lstm
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            horizon: self.horizon,
            input_len: self.input_len,
            dropout: self.train.dropout,
            ..self.transformer
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config("input_len, horizon and stride must be ≥ 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} outside (0, 1)", self.split_fraction)));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models listed".into()));
        }
        self.model_list().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(o) = self.arima.fixed_order() {
            o.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.lstm_config().validate())?;
        wrap(self.transformer_config().validate())?;
        wrap(self.train.validate())?;
        if self.data.path.is_none() && self.data.synthetic_points < self.input_len + self.horizon + 1 {
            return Err(Error::Config("synthetic_points too small for one window".into()));
        }
        Ok(())
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (k, v) in overlay {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
