use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::fidelity::{cmd_with, mcad, mmd, spearman, CmdMode, MmdConfig};
use crate::codes::{prevalence, CodeMatrix};
use crate::error::{Error, Result};

/// Named scalar results with the sizes, seeds and digests that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub sample_sizes: BTreeMap<String, usize>,
    pub seeds: BTreeMap<String, u64>,
    pub config_digests: BTreeMap<String, String>,
    /// Flags raised while computing, e.g. a zero MMD bandwidth.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricReport {
    /// Insert a metric; values must be finite.
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::DegenerateInput(format!("metric {name} is {value}")));
        }
        self.metrics.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Merge `other` into `self`, prefixing its names with `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: MetricReport) {
        let p = |k: String| format!("{prefix}{k}");
        self.metrics.extend(other.metrics.into_iter().map(|(k, v)| (p(k), v)));
        self.sample_sizes.extend(other.sample_sizes.into_iter().map(|(k, v)| (p(k), v)));
        self.seeds.extend(other.seeds.into_iter().map(|(k, v)| (p(k), v)));
        self.config_digests.extend(other.config_digests.into_iter().map(|(k, v)| (p(k), v)));
        self.warnings.extend(other.warnings.into_iter().map(|w| format!("{prefix}{w}")));
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        crate::train::canonical_json(self)
    }
}

/// Fidelity-metric settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mmd: MmdConfig,
    pub mcad_bins: usize,
    pub mcad_range: (f64, f64),
    pub cmd_mode: CmdMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mmd: MmdConfig::default(),
            mcad_bins: 175,
            mcad_range: (0.0, 175.0),
            cmd_mode: CmdMode::Covariance,
        }
    }
}

/// `spearman_prevalence`, `cmd`, `mmd` and `mcad` of `synth` against `real`.
pub fn fidelity_report(real: &CodeMatrix, synth: &CodeMatrix, cfg: &EvalConfig) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let (pr, ps) = (prevalence(real)?, prevalence(synth)?);
    match spearman(&pr, &ps) {
        Ok(v) => report.insert("spearman_prevalence", v)?,
        Err(Error::DegenerateInput(msg)) => report.warnings.push(format!("spearman_prevalence: {msg}")),
        Err(e) => return Err(e),
    }
    report.insert("cmd", cmd_with(real, synth, cfg.cmd_mode)?)?;
    let m = mmd(real, synth, &cfg.mmd)?;
    if m.zero_bandwidth {
        report.warnings.push("mmd: zero bandwidth".into());
    }
    report.insert("mmd", m.value)?;
    report.insert("mcad", mcad(real, synth, cfg.mcad_bins, cfg.mcad_range)?)?;
    report.sample_sizes.insert("real".into(), real.n_records());
    report.sample_sizes.insert("synth".into(), synth.n_records());
    Ok(report)
}

/// `code,real_prev,synth_prev` rows for a prevalence scatter plot.
pub fn prevalence_csv(real: &CodeMatrix, synth: &CodeMatrix) -> Result<String> {
    if real.n_codes() != synth.n_codes() {
        return Err(Error::ShapeMismatch(format!("{} vs {} codes", real.n_codes(), synth.n_codes())));
    }
    let (pr, ps) = (prevalence(real)?, prevalence(synth)?);
    let mut out = String::from("code,real_prev,synth_prev\n");
    for (i, (a, b)) in pr.iter().zip(&ps).enumerate() {
        let code = real.code_labels().map_or_else(|| i.to_string(), |l| l[i].clone());
        writeln!(out, "{code},{a},{b}").expect("writing to a String cannot fail");
    }
    Ok(out)
}
