//! Run configuration: UTF-8 `key=value` lines with dotted section keys,
//! plus command-line `--set key=value` overrides. Unknown keys and malformed
//! values are rejected with the offending key named.

use std::path::Path;

use crate::chansynth::SystemConfig;
use crate::downstream::ProbeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossConfig;
use crate::patchpipe::PatchConfig;
use crate::trainer::TrainConfig;

/// Validated union of every stage's settings.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub probe_beam: ProbeConfig,
    pub probe_los: ProbeConfig,
    /// Split fractions used at dataset synthesis time.
    pub synth_ratios: Vec<f64>,
    /// Split fractions for probe train/val/test.
    pub probe_ratios: Vec<f64>,
    pub probe_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: SystemConfig::default(),
            patch: PatchConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            probe_beam: ProbeConfig::beam(),
            probe_los: ProbeConfig::los(),
            synth_ratios: vec![0.8, 0.2],
            probe_ratios: vec![0.7, 0.2, 0.1],
            probe_seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("key {key}: cannot parse value {value:?}")))
}

fn parse_ratios(key: &str, value: &str) -> Result<Vec<f64>> {
    let parts: Result<Vec<f64>> =
        value.split(',').map(|p| parse_num::<f64>(key, p)).collect();
    let parts = parts?;
    if parts.is_empty() {
        return Err(Error::config(format!("key {key}: empty ratio list")));
    }
    Ok(parts)
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "system.n_antennas" => self.system.n_antennas = parse_num(key, value)?,
            "system.n_subcarriers" => self.system.n_subcarriers = parse_num(key, value)?,
            "system.subcarrier_spacing" => self.system.subcarrier_spacing = parse_num(key, value)?,
            "system.carrier_low" => self.system.carrier_low = parse_num(key, value)?,
            "system.carrier_high" => self.system.carrier_high = parse_num(key, value)?,
            "system.max_paths" => self.system.max_paths = parse_num(key, value)?,
            "system.p_los" => self.system.p_los = parse_num(key, value)?,
            "system.n_scenarios" => self.system.n_scenarios = parse_num(key, value)?,
            "system.scenario_base" => self.system.scenario_base = parse_num(key, value)?,
            "patch.rows" => self.patch.patch_rows = parse_num(key, value)?,
            "patch.cols" => self.patch.patch_cols = parse_num(key, value)?,
            "model.d_e" => self.model.d_e = parse_num(key, value)?,
            "model.l_enc" => self.model.l_enc = parse_num(key, value)?,
            "model.l_dec" => self.model.l_dec = parse_num(key, value)?,
            "model.m_enc" => self.model.m_enc = parse_num(key, value)?,
            "model.m_dec" => self.model.m_dec = parse_num(key, value)?,
            "model.d_c" => self.model.d_c = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.lr_max" => self.train.lr_max = parse_num(key, value)?,
            "train.lr_min" => self.train.lr_min = parse_num(key, value)?,
            "train.beta1" => self.train.beta1 = parse_num(key, value)?,
            "train.beta2" => self.train.beta2 = parse_num(key, value)?,
            "train.eps" => self.train.eps = parse_num(key, value)?,
            "train.seed" => self.train.seed = parse_num(key, value)?,
            "train.mask_ratio" => self.train.mask_ratio = parse_num(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, value)?,
            "train.split" => self.train.split_ratios = parse_ratios(key, value)?,
            "loss.alpha" => self.loss.alpha = parse_num(key, value)?,
            "loss.temperature" => self.loss.temperature = parse_num(key, value)?,
            "loss.snr_low" => self.loss.snr_range.0 = parse_num(key, value)?,
            "loss.snr_high" => self.loss.snr_range.1 = parse_num(key, value)?,
            "probe.beam.lr" => self.probe_beam.lr = parse_num(key, value)?,
            "probe.beam.batch_size" => self.probe_beam.batch_size = parse_num(key, value)?,
            "probe.beam.gamma" => self.probe_beam.gamma = parse_num(key, value)?,
            "probe.beam.max_epochs" => self.probe_beam.max_epochs = parse_num(key, value)?,
            "probe.beam.patience" => self.probe_beam.patience = parse_num(key, value)?,
            "probe.los.lr" => self.probe_los.lr = parse_num(key, value)?,
            "probe.los.batch_size" => self.probe_los.batch_size = parse_num(key, value)?,
            "probe.los.gamma" => self.probe_los.gamma = parse_num(key, value)?,
            "probe.los.max_epochs" => self.probe_los.max_epochs = parse_num(key, value)?,
            "probe.los.patience" => self.probe_los.patience = parse_num(key, value)?,
            "probe.seed" => self.probe_seed = parse_num(key, value)?,
            "probe.split" => self.probe_ratios = parse_ratios(key, value)?,
            "synth.ratios" => self.synth_ratios = parse_ratios(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Parses a whole config text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then each `--set` override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::config(format!("--set expects key=value, got {item:?}"))
            })?;
            cfg.apply(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.patch.validate_for(self.system.n_antennas, self.system.n_subcarriers)?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        for (name, ratios) in [("synth.ratios", &self.synth_ratios), ("probe.split", &self.probe_ratios)] {
            let sum: f64 = ratios.iter().sum();
            if ratios.is_empty() || ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("{name} must be nonnegative and sum to 1")));
            }
        }
        Ok(())
    }
}
