//! The fixed preprocessing chain applied per subject:
//! screen → bandpass (zero phase) → DSS → z-score → decimate.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::SubjectDataset;
use crate::dsp::{decimate, design_bandpass, filtfilt_trial, screen_bad_channels, zscore_channels, BandpassSpec, ScreenReport};
use crate::dss::{apply_dss_denoise, fit_dss_dataset, DssModel, DEFAULT_N_KEEP, DEFAULT_RANK_TOLERANCE};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Reflection padding per edge; `None` uses `3 · (2 · order + 1)`.
    pub padlen: Option<usize>,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            order: 3,
            low_hz: 0.1,
            high_hz: 8.0,
            padlen: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DssSettings {
    pub enabled: bool,
    pub n_keep: usize,
    pub rank_tolerance: f64,
}

impl Default for DssSettings {
    fn default() -> Self {
        DssSettings {
            enabled: true,
            n_keep: DEFAULT_N_KEEP,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub screen_z_threshold: f64,
    pub filter: FilterSettings,
    pub dss: DssSettings,
    pub zscore: bool,
    /// Explicit factor; when absent it is derived from `target_rate_hz`.
    pub decimate_factor: Option<usize>,
    pub target_rate_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            screen_z_threshold: 5.0,
            filter: FilterSettings::default(),
            dss: DssSettings::default(),
            zscore: true,
            decimate_factor: None,
            target_rate_hz: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub subject_id: String,
    pub stages: Vec<String>,
    pub input_rate_hz: f64,
    pub output_rate_hz: f64,
    pub decimate_factor: usize,
    pub padlen: usize,
    pub screen: ScreenReport,
    pub removed_channels: Vec<String>,
    pub dss_consistency: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

pub struct Preprocessed {
    pub dataset: SubjectDataset,
    pub dss: Option<DssModel>,
    pub report: PreprocessReport,
}

fn decimation_factor(cfg: &PreprocessConfig, fs: f64, warnings: &mut Vec<String>) -> Result<usize> {
    let factor = match cfg.decimate_factor {
        Some(f) => f,
        None => {
            if !(cfg.target_rate_hz > 0.0) {
                return invalid("target_rate_hz must be positive");
            }
            let ratio = fs / cfg.target_rate_hz;
            let f = ratio.round();
            if f < 1.0 || (ratio - f).abs() > 1e-9 * f {
                return invalid(format!(
                    "input rate {fs} Hz is not an integer multiple of the {} Hz target",
                    cfg.target_rate_hz
                ));
            }
            f as usize
        }
    };
    if factor < 1 {
        return invalid("decimate_factor must be at least 1");
    }
    let out = fs / factor as f64;
    if out < cfg.target_rate_hz - 1e-9 {
        warnings.push(format!(
            "decimating {fs} Hz by {factor} gives {out} Hz, below the {} Hz target",
            cfg.target_rate_hz
        ));
    }
    if out <= 2.0 * cfg.filter.high_hz {
        warnings.push(format!("output rate {out} Hz does not clear twice the {} Hz upper band edge", cfg.filter.high_hz));
    }
    Ok(factor)
}

pub fn preprocess_subject(dataset: &SubjectDataset, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    dataset.validate()?;
    let fs = dataset
        .sample_rate_hz()
        .ok_or_else(|| crate::Error::Invalid(format!("{}: no trials", dataset.subject_id)))?;
    if dataset.trials.iter().any(|t| t.sample_rate_hz != fs) {
        return invalid(format!("{}: trials disagree on sample rate", dataset.subject_id));
    }
    let mut warnings = Vec::new();
    let factor = decimation_factor(cfg, fs, &mut warnings)?;
    let mut stages = Vec::new();

    let (kept, screen) = screen_bad_channels(dataset, cfg.screen_z_threshold)?;
    let removed_channels = screen.removed.iter().map(|&i| dataset.channel_names[i].clone()).collect();
    let mut ds = dataset.select_channels(&kept);
    stages.push(format!("screen(z_threshold={})", cfg.screen_z_threshold));

    let spec = BandpassSpec::new(cfg.filter.order, cfg.filter.low_hz, cfg.filter.high_hz, fs);
    let cascade = design_bandpass(&spec)?;
    let padlen = cfg.filter.padlen.unwrap_or_else(|| spec.default_padlen());
    ds = ds.map_trials(|t| filtfilt_trial(&cascade, t, padlen))?;
    stages.push(format!(
        "bandpass(order={}, low_hz={}, high_hz={}, padlen={padlen})",
        spec.order, spec.low_hz, spec.high_hz
    ));

    let mut dss = None;
    if cfg.dss.enabled {
        let model = fit_dss_dataset(&ds, cfg.dss.n_keep, cfg.dss.rank_tolerance)?;
        ds = ds.map_trials(|t| apply_dss_denoise(&model, t))?;
        stages.push(format!("dss(n_keep={})", cfg.dss.n_keep));
        dss = Some(model);
    }

    if cfg.zscore {
        ds.trials = zscore_channels(&ds.trials)?;
        stages.push("zscore(scope=subject)".into());
    }

    if factor > 1 || cfg.decimate_factor.is_some() {
        ds = ds.map_trials(|t| decimate(t, factor))?;
        stages.push(format!("decimate(factor={factor})"));
    }

    for w in &warnings {
        warn!("{}: {w}", dataset.subject_id);
    }
    let output_rate_hz = fs / factor as f64;
    Ok(Preprocessed {
        report: PreprocessReport {
            subject_id: dataset.subject_id.clone(),
            stages,
            input_rate_hz: fs,
            output_rate_hz,
            decimate_factor: factor,
            padlen,
            screen,
            removed_channels,
            dss_consistency: dss.as_ref().map(|m: &DssModel| m.consistency_scores.clone()),
            warnings,
        },
        dataset: ds,
        dss,
    })
}
