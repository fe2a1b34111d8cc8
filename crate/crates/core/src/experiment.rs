//! Seeded end-to-end pipeline: data, training, sampling, metrics, attacks,
//! downstream utility and guidance uplift.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{load_dataset, prevalence, save_dataset, CodeMatrix, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{
    attribute_inference_risk, auprc, auroc, covariance, covariance_distance, fidelity_report,
    membership_inference_risk, prevalence_csv, sample_exposed, spearman, train_downstream, EvalConfig, MetricReport,
};
use crate::harness::{gen_ground_truth, MixtureSpec};
use crate::io::write_atomic;
use crate::nn::DenoiserConfig;
use crate::rng::{derive_seed, substream, tag};
use crate::sample::{sample_guided, sample_unconditional, ContextSpec, GuidanceConfig};
use crate::schedule::ScheduleConfig;
use crate::train::{canonical_json, json_digest, train, Checkpoint, TrainConfig};

/// Where the real records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Mixture { spec: MixtureSpec, n_records: usize },
    /// [`MixtureSpec::desk`] on `n_codes` codes.
    Desk { n_codes: usize, n_records: usize },
    File { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub langevin: GuidanceConfig,
    /// Codes to condition on, one guided run each.
    pub targets: Vec<usize>,
    pub n_samples: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            langevin: GuidanceConfig::default(),
            targets: Vec::new(),
            n_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Exposed attribute count; `min(256, N / 2)` when absent.
    pub exposed: Option<usize>,
    pub mir_threshold: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            exposed: None,
            mir_threshold: 3.0,
        }
    }
}

impl AttackConfig {
    pub fn exposed_count(&self, n_codes: usize) -> usize {
        self.exposed.unwrap_or(256.min(n_codes / 2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilityConfig {
    /// Code predicted from the others; the last code when absent.
    pub target: Option<usize>,
    pub reg: f64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            target: None,
            reg: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub net: DenoiserConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub utility: UtilityConfig,
}

fn default_n_samples() -> usize {
    5000
}

impl RunConfig {
    /// The desk-scale experiment: the two-component mixture on 32 codes,
    /// 10k records, a two-layer width-32 denoiser trained for 15 epochs, and
    /// guidance toward the rare code 30.
    pub fn desk() -> Self {
        let mut net = DenoiserConfig::new(32, 32, 2, 2, 8);
        net.ffn_width = 64;
        RunConfig {
            seed: 0,
            data: DataSource::Desk {
                n_codes: 32,
                n_records: 10_000,
            },
            split: SplitConfig::default(),
            schedule: ScheduleConfig::default(),
            net,
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 15,
                ..TrainConfig::default()
            },
            n_samples: 5000,
            guidance: GuidanceSection {
                targets: vec![30],
                ..GuidanceSection::default()
            },
            eval: EvalConfig {
                mcad_bins: 32,
                mcad_range: (0.0, 32.0),
                ..EvalConfig::default()
            },
            attack: AttackConfig::default(),
            utility: UtilityConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.guidance.langevin.validate()?;
        if self.n_samples < 2 || (!self.guidance.targets.is_empty() && self.guidance.n_samples < 2) {
            return Err(Error::InvalidConfig("sample counts must be at least 2".into()));
        }
        for &t in &self.guidance.targets {
            ContextSpec::CodePresence(t).validate(self.net.n_tokens)?;
        }
        if let Some(t) = self.utility.target {
            if t >= self.net.n_tokens {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    n_codes: self.net.n_tokens,
                });
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        json_digest(self)
    }
}

/// Per-stage seeds, all derived from the run seed except training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub train: u64,
    pub sample: u64,
    pub guide: u64,
    pub attack: u64,
    pub baseline: u64,
}

impl StageSeeds {
    pub fn new(cfg: &RunConfig) -> Self {
        let s = |k: u64| derive_seed(cfg.seed, &[k]);
        Self {
            data: s(tag::GROUND_TRUTH),
            split: s(tag::SHUFFLE),
            train: cfg.train.seed,
            sample: s(tag::SAMPLE),
            guide: s(tag::LANGEVIN),
            attack: s(tag::ATTACK),
            baseline: s(tag::BASELINE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    /// `real`, `synthetic`, `augmented` or `guided`.
    pub trained_on: String,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftRow {
    pub code: usize,
    /// Analytic prevalence when the data come from a mixture.
    pub truth: Option<f64>,
    pub real: f64,
    pub unconditional: f64,
    pub guided: f64,
}

/// Everything a run produced, free of wall-clock values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub params_digest: String,
    pub seeds: StageSeeds,
    pub train_history: Vec<f64>,
    pub valid_history: Vec<f64>,
    /// Unconditional metrics unprefixed, guided ones under `guided.`.
    pub metrics: MetricReport,
    pub utility: Vec<UtilityRow>,
    pub uplift: Vec<UpliftRow>,
}

impl ExperimentReport {
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }
}

/// Intermediate results kept for callers that need more than the report.
pub struct ExperimentArtifacts {
    pub report: ExperimentReport,
    pub checkpoint: Checkpoint,
    pub split: DatasetSplit,
    pub synthetic: CodeMatrix,
    pub guided: Vec<CodeMatrix>,
    /// Analytic moments when the data come from a mixture.
    pub truth: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

/// Independent bits with the given presence probabilities.
pub fn independent_bernoulli(prevalence: &[f64], n: usize, seed: u64) -> Result<CodeMatrix> {
    let mut rng = substream(seed, &[]);
    let bits = (0..n * prevalence.len())
        .map(|i| u8::from(rng.gen::<f64>() < prevalence[i % prevalence.len()]))
        .collect();
    CodeMatrix::new(n, prevalence.len(), bits)
}

/// Metrics of `synth` against the analytic moments.
fn truth_metrics(
    report: &mut MetricReport,
    synth: &CodeMatrix,
    truth_prev: &[f64],
    truth_cov: &[Vec<f64>],
    seed: u64,
) -> Result<()> {
    report.insert("truth_spearman_prevalence", spearman(&prevalence(synth)?, truth_prev)?)?;
    let flat: Vec<f64> = truth_cov.concat();
    report.insert("truth_cmd", covariance_distance(&covariance(synth)?, &flat)?)?;
    // same sample size, true prevalences, no dependence between codes
    let baseline = independent_bernoulli(truth_prev, synth.n_records(), seed)?;
    report.insert("baseline_truth_cmd", covariance_distance(&covariance(&baseline)?, &flat)?)?;
    Ok(())
}

fn privacy_metrics(
    report: &mut MetricReport,
    split: &DatasetSplit,
    synth: &CodeMatrix,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<()> {
    let n_codes = synth.n_codes();
    let exposed = sample_exposed(n_codes, cfg.exposed_count(n_codes), &mut substream(seed, &[]))?;
    report.insert("air", attribute_inference_risk(&split.train, synth, &exposed)?)?;
    // equal-sized member and non-member sets
    let m = split.train.n_records().min(split.test.n_records());
    let idx: Vec<usize> = (0..m).collect();
    let (members, holdout) = (split.train.select_rows(&idx), split.test.select_rows(&idx));
    report.insert(
        "mir",
        membership_inference_risk(&members, &holdout, synth, cfg.mir_threshold)?,
    )?;
    report.sample_sizes.insert("air_exposed".into(), exposed.len());
    report.sample_sizes.insert("mir_members".into(), m);
    Ok(())
}

fn utility_row(trained_on: &str, train_set: &CodeMatrix, test: &CodeMatrix, target: usize, reg: f64) -> Result<UtilityRow> {
    let (x, y) = train_set.split_column(target)?;
    let model = train_downstream(&x, &y, reg)?;
    let (xt, yt) = test.split_column(target)?;
    let scores = model.predict_proba(&xt)?;
    Ok(UtilityRow {
        trained_on: trained_on.into(),
        auroc: auroc(&scores, &yt)?,
        auprc: auprc(&scores, &yt)?,
    })
}

fn load_data(cfg: &RunConfig, seeds: &StageSeeds) -> Result<(CodeMatrix, Option<(Vec<f64>, Vec<Vec<f64>>)>)> {
    let spec = match &cfg.data {
        DataSource::File { path } => return Ok((load_dataset(Path::new(path))?, None)),
        DataSource::Mixture { spec, n_records } => (spec.clone(), *n_records),
        DataSource::Desk { n_codes, n_records } => {
            if *n_codes < 8 {
                return Err(Error::InvalidConfig("desk data need at least 8 codes".into()));
            }
            (MixtureSpec::desk(*n_codes), *n_records)
        }
    };
    let gt = gen_ground_truth(&spec.0, spec.1, seeds.data)?;
    Ok((gt.data, Some((gt.prevalence, gt.covariance))))
}

/// Run every stage. Errors carry the name of the stage that raised them.
pub fn run_experiment_artifacts(cfg: &RunConfig) -> Result<ExperimentArtifacts> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let seeds = StageSeeds::new(cfg);
    let (data, truth) = load_data(cfg, &seeds).map_err(|e| e.at_stage("data"))?;
    let split = DatasetSplit::split(&data, cfg.split.train, cfg.split.validation, seeds.split)
        .map_err(|e| e.at_stage("data"))?;

    let ckpt = cfg
        .schedule
        .build()
        .and_then(|schedule| train(&split, &schedule, Some(cfg.schedule), &cfg.net, &cfg.train))
        .map_err(|e| e.at_stage("train"))?;

    let synthetic = sample_unconditional(&ckpt, cfg.n_samples, seeds.sample).map_err(|e| e.at_stage("sample"))?;
    let guided = cfg
        .guidance
        .targets
        .iter()
        .map(|&code| {
            let seed = derive_seed(seeds.guide, &[code as u64]);
            sample_guided(&ckpt, &ContextSpec::CodePresence(code), cfg.guidance.n_samples, &cfg.guidance.langevin, seed)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("guide"))?;

    let mut metrics = MetricReport::default();
    let mut evaluate = |prefix: &str, synth: &CodeMatrix| -> Result<()> {
        let mut r = fidelity_report(&split.train, synth, &cfg.eval).map_err(|e| e.at_stage("eval"))?;
        if let Some((p, c)) = &truth {
            truth_metrics(&mut r, synth, p, c, seeds.baseline).map_err(|e| e.at_stage("eval"))?;
        }
        privacy_metrics(&mut r, &split, synth, &cfg.attack, seeds.attack).map_err(|e| e.at_stage("attack"))?;
        metrics.absorb(prefix, r);
        Ok(())
    };
    evaluate("", &synthetic)?;
    if let Some(g) = guided.first() {
        evaluate("guided.", g)?;
    }

    let target = cfg.utility.target.unwrap_or(cfg.net.n_tokens - 1);
    let mut utility = Vec::new();
    let stage = |e: Error| e.at_stage("utility");
    let reg = cfg.utility.reg;
    utility.push(utility_row("real", &split.train, &split.test, target, reg).map_err(stage)?);
    utility.push(utility_row("synthetic", &synthetic, &split.test, target, reg).map_err(stage)?);
    let augmented = split.train.concat(&synthetic).map_err(stage)?;
    utility.push(utility_row("augmented", &augmented, &split.test, target, reg).map_err(stage)?);
    if let Some(g) = guided.first() {
        utility.push(utility_row("guided", g, &split.test, target, reg).map_err(stage)?);
    }
    for row in &utility {
        metrics.insert(format!("utility.{}.auroc", row.trained_on), row.auroc)?;
        metrics.insert(format!("utility.{}.auprc", row.trained_on), row.auprc)?;
    }

    let stage = |e: Error| e.at_stage("uplift");
    let real_prev = prevalence(&split.train).map_err(stage)?;
    let synth_prev = prevalence(&synthetic).map_err(stage)?;
    let uplift = cfg
        .guidance
        .targets
        .iter()
        .zip(&guided)
        .map(|(&code, g)| {
            Ok(UpliftRow {
                code,
                truth: truth.as_ref().map(|(p, _)| p[code]),
                real: real_prev[code],
                unconditional: synth_prev[code],
                guided: prevalence(g)?[code],
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(stage)?;

    metrics.seeds.insert("run".into(), cfg.seed);
    metrics.seeds.insert("sample".into(), seeds.sample);
    metrics.config_digests.insert("run".into(), cfg.digest()?);
    let report = ExperimentReport {
        config_digest: cfg.digest()?,
        params_digest: ckpt.params.digest(),
        seeds,
        train_history: ckpt.train_history.clone(),
        valid_history: ckpt.valid_history.clone(),
        metrics,
        utility,
        uplift,
    };
    Ok(ExperimentArtifacts {
        report,
        checkpoint: ckpt,
        split,
        synthetic,
        guided,
        truth,
    })
}

/// Run every stage and, when `out` is given, write `report.json`,
/// `prevalence.csv`, `uplift.csv`, `model.ckpt` and `synthetic.txt` there.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let art = run_experiment_artifacts(cfg)?;
    if let Some(dir) = out {
        write_outputs(dir, &art).map_err(|e| e.at_stage("write"))?;
    }
    Ok(art.report)
}

fn write_outputs(dir: &Path, art: &ExperimentArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.json"), art.report.to_canonical_json()?.as_bytes())?;
    write_atomic(
        &dir.join("prevalence.csv"),
        prevalence_csv(&art.split.train, &art.synthetic)?.as_bytes(),
    )?;
    let mut uplift = String::from("code,truth,real,unconditional,guided\n");
    for row in &art.report.uplift {
        let truth = row.truth.map_or_else(String::new, |v| v.to_string());
        uplift.push_str(&format!(
            "{},{truth},{},{},{}\n",
            row.code, row.real, row.unconditional, row.guided
        ));
    }
    write_atomic(&dir.join("uplift.csv"), uplift.as_bytes())?;
    art.checkpoint.save(&dir.join("model.ckpt"))?;
    save_dataset(&dir.join("synthetic.txt"), &art.synthetic)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.data = DataSource::Desk {
            n_codes: 8,
            n_records: 300,
        };
        cfg.net = DenoiserConfig::new(8, 8, 1, 2, 4);
        cfg.schedule.steps = 10;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 32;
        cfg.n_samples = 40;
        cfg.guidance.targets = vec![6];
        cfg.guidance.n_samples = 20;
        cfg.eval.mcad_bins = 8;
        cfg.eval.mcad_range = (0.0, 8.0);
        cfg
    }

    #[test]
    fn config_json_roundtrip_and_digest() {
        let cfg = RunConfig::desk();
        let json = canonical_json(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(other.digest().unwrap(), cfg.digest().unwrap());
        let base = r#"{"data":{"source":"desk","n_codes":8,"n_records":9},"net":"#.to_string()
            + &serde_json::to_string(&cfg.net).unwrap();
        assert!(serde_json::from_str::<RunConfig>(&(base.clone() + "}")).is_ok());
        assert!(serde_json::from_str::<RunConfig>(&(base.clone() + r#","bogus":1}"#)).is_err());
        let g: RunConfig = serde_json::from_str(&(base.clone() + r#","guidance":{"langevin":{"eta":0.2},"targets":[3]}}"#)).unwrap();
        assert_eq!((g.guidance.langevin.eta, g.guidance.targets.clone(), g.guidance.n_samples), (0.2, vec![3], 2000));
        assert!(serde_json::from_str::<RunConfig>(&(base + r#","guidance":{"langevin":{"etta":0.2}}}"#)).is_err());
    }

    #[test]
    fn deterministic_and_complete() {
        let cfg = tiny();
        let a = run_experiment(&cfg, None).unwrap();
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.to_canonical_json().unwrap(), b.to_canonical_json().unwrap());
        for name in ["spearman_prevalence", "cmd", "mmd", "mcad", "air", "mir"] {
            assert!(a.metrics.get(name).is_some(), "{name}");
            assert!(a.metrics.get(&format!("guided.{name}")).is_some(), "guided.{name}");
        }
        for name in ["truth_spearman_prevalence", "truth_cmd", "baseline_truth_cmd", "utility.real.auroc"] {
            assert!(a.metrics.get(name).is_some(), "{name}");
        }
        assert_eq!(a.utility.len(), 4);
        assert_eq!(a.uplift.len(), 1);
        assert!((a.uplift[0].truth.unwrap() - 0.07).abs() < 1e-12);
    }

    #[test]
    fn errors_name_their_stage() {
        let mut cfg = tiny();
        cfg.guidance.targets = vec![99];
        let err = run_experiment(&cfg, None).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "config", .. }), "{err}");
        let mut cfg = tiny();
        cfg.data = DataSource::File {
            path: "/nonexistent/data.txt".into(),
        };
        let err = run_experiment(&cfg, None).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "data", .. }), "{err}");
        assert!(!err.is_numeric());
    }

    #[test]
    fn writes_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&tiny(), Some(dir.path())).unwrap();
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        assert_eq!(json, report.to_canonical_json().unwrap());
        let csv = std::fs::read_to_string(dir.path().join("prevalence.csv")).unwrap();
        assert!(csv.starts_with("code,real_prev,synth_prev\n"));
        assert_eq!(csv.lines().count(), 9);
        let uplift = std::fs::read_to_string(dir.path().join("uplift.csv")).unwrap();
        assert_eq!(uplift.lines().count(), 2);
        assert!(Checkpoint::load(&dir.path().join("model.ckpt")).is_ok());
    }
}
