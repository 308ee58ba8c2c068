//! Stage implementations shared by the subcommands and the full pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use conjoint_core::domain::AttributeScheme;
use conjoint_core::infer::{self, Diagnostics, ModelConfig, PosteriorDraws};
use conjoint_core::output::{read_json, write_atomic_with, write_json};
use conjoint_core::posterior::{
    all_wtp_draws, hdi, individual_wtp, recovery_report, save_draws_csv, save_summary_csv, summarize,
    RecoveryReport, WtpSummary, DEFAULT_HDI_MASS,
};
use conjoint_core::revenue::{self, BundleScenario, RevenueSummary};
use conjoint_core::simulate::{simulate_survey, ChoiceDataset, GroundTruth, Provenance};
use conjoint_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHOICES: &str = "choices.csv";
pub const PROVENANCE: &str = "provenance.json";
pub const POSTERIOR: &str = "posterior.jsonl";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const WTP_SUMMARY: &str = "wtp_summary.csv";
pub const WTP_DRAWS: &str = "wtp_draws.csv";
pub const INDIVIDUAL_WTP: &str = "individual_wtp.csv";
pub const RECOVERY: &str = "recovery.json";
pub const REVENUE_CURVE: &str = "revenue_curve.csv";
pub const REVENUE_DRAWS: &str = "revenue_draws.csv";
pub const REPORT: &str = "report.json";

/// Population R-hat gate for a run to count as converged.
pub const RHAT_GATE: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    Simulate,
    Fit,
    Wtp,
    Revenue,
}

pub fn simulate(config: &RunConfig, out: &Path) -> Result<ChoiceDataset> {
    config.validate(true)?;
    let truth = config.ground_truth.as_ref().expect("validated");
    let dataset = simulate_survey(&config.scheme, truth, &config.simulation, config.seed)?;
    dataset.save_csv(&out.join(CHOICES))?;
    write_json(&out.join(PROVENANCE), dataset.provenance.as_ref().expect("simulated data has provenance"))?;
    Ok(dataset)
}

pub fn load_dataset(scheme: &AttributeScheme, path: &Path) -> Result<ChoiceDataset> {
    ChoiceDataset::load_csv(scheme, path)
}

pub fn fit(dataset: &ChoiceDataset, model: &ModelConfig, out: &Path) -> Result<(PosteriorDraws, Diagnostics)> {
    model.validate()?;
    let (draws, diagnostics) = infer::fit(dataset, model)?;
    draws.save_jsonl(&out.join(POSTERIOR))?;
    write_json(&out.join(DIAGNOSTICS), &diagnostics)?;
    Ok((draws, diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtpOutput {
    pub summaries: Vec<WtpSummary>,
    pub recovery: Option<RecoveryReport>,
    /// Respondents with more sign-unsafe individual draws than allowed, per feature.
    pub flagged_individuals: BTreeMap<String, Vec<u32>>,
}

/// Population WTP summaries and draws, per-respondent WTP, and the recovery
/// report when the truth is known.
pub fn wtp(draws: &PosteriorDraws, truth: Option<&GroundTruth>, out: &Path) -> Result<WtpOutput> {
    let population = all_wtp_draws(draws)?;
    let summaries: Vec<WtpSummary> =
        population.iter().map(|w| summarize(w, DEFAULT_HDI_MASS)).collect::<Result<_>>()?;
    let recovery = truth.map(|t| recovery_report(t, &summaries)).transpose()?;
    save_summary_csv(&out.join(WTP_SUMMARY), &summaries, truth)?;
    save_draws_csv(&out.join(WTP_DRAWS), &population)?;
    let flagged_individuals = write_individual_wtp(draws, &out.join(INDIVIDUAL_WTP))?;
    if let Some(r) = &recovery {
        write_json(&out.join(RECOVERY), r)?;
    }
    Ok(WtpOutput { summaries, recovery, flagged_individuals })
}

struct IndividualRow {
    respondent_id: u32,
    feature: String,
    mean: f64,
    hdi: Option<(f64, f64)>,
    flagged: bool,
}

fn write_individual_wtp(draws: &PosteriorDraws, path: &Path) -> Result<BTreeMap<String, Vec<u32>>> {
    let features: Vec<&String> =
        draws.columns.iter().enumerate().filter(|(j, _)| *j != draws.price_column).map(|(_, c)| c).collect();
    let rows: Vec<Vec<IndividualRow>> = draws
        .respondent_ids
        .par_iter()
        .map(|&id| {
            features
                .iter()
                .map(|f| {
                    let w = individual_wtp(draws, id, f)?;
                    Ok(IndividualRow {
                        respondent_id: id,
                        feature: f.to_string(),
                        mean: if w.draws.is_empty() { f64::NAN } else { w.mean() },
                        hdi: hdi(&w.draws, DEFAULT_HDI_MASS).ok(),
                        flagged: w.flagged,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut flagged: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    write_atomic_with(path, |w| {
        writeln!(w, "respondent_id,feature,mean,hdi_low,hdi_high,flagged")?;
        for row in rows.iter().flatten() {
            let (lo, hi) = row.hdi.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
            writeln!(w, "{},{},{},{lo},{hi},{}", row.respondent_id, row.feature, row.mean, row.flagged as u8)?;
            if row.flagged {
                flagged.entry(row.feature.clone()).or_default().push(row.respondent_id);
            }
        }
        Ok(())
    })?;
    Ok(flagged)
}

pub fn revenue(draws: &PosteriorDraws, scenario: &BundleScenario, out: &Path) -> Result<RevenueSummary> {
    let scheme = draws
        .scheme
        .as_ref()
        .ok_or_else(|| Error::Contract("posterior carries no attribute scheme".into()))?;
    let curve = revenue::revenue_curve(draws, scheme, scenario)?;
    revenue::save_curve_csv(&out.join(REVENUE_CURVE), &curve.summary)?;
    revenue::save_draws_csv(&out.join(REVENUE_DRAWS), &curve)?;
    Ok(curve.summary)
}

/// Truth from a provenance sidecar or a bare ground-truth document.
pub fn load_truth(path: &Path) -> Result<GroundTruth> {
    let value: serde_json::Value = read_json(path)?;
    let parsed = if value.get("ground_truth").is_some() {
        serde_json::from_value::<Provenance>(value).map(|p| p.ground_truth)
    } else {
        serde_json::from_value::<GroundTruth>(value)
    };
    parsed.map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityGates {
    pub population_r_hat_below_1_01: bool,
    /// `None` when there is no ground truth to compare with.
    pub recovery: Option<bool>,
    pub sign_safe: bool,
}

impl QualityGates {
    pub fn all_pass(&self) -> bool {
        self.population_r_hat_below_1_01 && self.recovery.unwrap_or(true) && self.sign_safe
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub max_population_r_hat: f64,
    /// Absent without the hierarchy.
    pub max_individual_r_hat: Option<f64>,
    pub min_population_ess_bulk: f64,
    pub divergence_count: usize,
    pub divergence_rate: f64,
    pub mean_accept_prob: Vec<f64>,
    pub step_size: Vec<f64>,
    pub max_tree_depth_hits: usize,
    pub population: Vec<infer::ParameterDiagnostic>,
    pub warnings: Vec<String>,
}

impl DiagnosticsSummary {
    pub fn new(d: &Diagnostics) -> Self {
        let max = |xs: &[infer::ParameterDiagnostic]| xs.iter().map(|p| p.r_hat).fold(f64::NAN, f64::max);
        Self {
            max_population_r_hat: max(&d.population),
            max_individual_r_hat: (!d.individual.is_empty()).then(|| max(&d.individual)),
            min_population_ess_bulk: d.population.iter().map(|p| p.ess_bulk).fold(f64::NAN, f64::min),
            divergence_count: d.divergence_count,
            divergence_rate: d.divergence_rate,
            mean_accept_prob: d.mean_accept_prob.clone(),
            step_size: d.step_size.clone(),
            max_tree_depth_hits: d.max_tree_depth_hits,
            population: d.population.clone(),
            warnings: d.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Effective configuration, overrides applied; add `output_dir` to rerun.
    pub config: RunConfig,
    pub stages_run: Vec<Stage>,
    pub n_records: usize,
    pub diagnostics: DiagnosticsSummary,
    pub wtp: Vec<WtpSummary>,
    pub recovery: Option<RecoveryReport>,
    pub flagged_individuals: BTreeMap<String, Vec<u32>>,
    pub revenue: Option<RevenueSummary>,
    pub quality_gates: QualityGates,
    pub overall_pass: bool,
    pub files: Vec<String>,
    /// Wall-clock seconds per stage; the only field that varies between reruns.
    pub timings: BTreeMap<String, f64>,
}

impl serde::Serialize for Stage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Stage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        [Stage::Simulate, Stage::Fit, Stage::Wtp, Stage::Revenue]
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown stage `{name}`")))
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Fit => "fit",
            Stage::Wtp => "wtp",
            Stage::Revenue => "revenue",
        }
    }
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.insert(stage.name().to_string(), start.elapsed().as_secs_f64());
    Ok(out)
}

/// simulate -> fit -> wtp -> revenue, starting at `from` and reusing the
/// outputs of earlier stages found in the output directory.
pub fn run(config: &RunConfig, from: Stage) -> Result<RunReport> {
    config.validate(from == Stage::Simulate)?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    let mut timings = BTreeMap::new();
    let mut stages_run = Vec::new();
    let mut files: Vec<&str> = Vec::new();

    let dataset = if from <= Stage::Simulate {
        stages_run.push(Stage::Simulate);
        files.extend([CHOICES, PROVENANCE]);
        Some(timed(&mut timings, Stage::Simulate, || simulate(config, &out))?)
    } else if from == Stage::Fit {
        Some(load_dataset(&config.scheme, &out.join(CHOICES))?)
    } else {
        None
    };
    if out.join(CHOICES).exists() && !files.contains(&CHOICES) {
        files.push(CHOICES);
    }
    if out.join(PROVENANCE).exists() && !files.contains(&PROVENANCE) {
        files.push(PROVENANCE);
    }

    let (draws, diagnostics) = match dataset.as_ref() {
        Some(ds) => {
            stages_run.push(Stage::Fit);
            timed(&mut timings, Stage::Fit, || fit(ds, &config.model, &out))?
        }
        None => (PosteriorDraws::load_jsonl(&out.join(POSTERIOR))?, read_json(&out.join(DIAGNOSTICS))?),
    };
    files.extend([POSTERIOR, DIAGNOSTICS]);
    let n_records = match dataset.as_ref() {
        Some(ds) => ds.len(),
        None => match load_dataset(&config.scheme, &out.join(CHOICES)) {
            Ok(ds) => ds.len(),
            Err(_) => 0,
        },
    };

    stages_run.push(Stage::Wtp);
    let truth = config.ground_truth.as_ref();
    let wtp_out = timed(&mut timings, Stage::Wtp, || wtp(&draws, truth, &out))?;
    files.extend([WTP_SUMMARY, WTP_DRAWS, INDIVIDUAL_WTP]);
    if wtp_out.recovery.is_some() {
        files.push(RECOVERY);
    }

    let revenue_summary = match &config.scenario {
        Some(scenario) => {
            stages_run.push(Stage::Revenue);
            let s = timed(&mut timings, Stage::Revenue, || revenue(&draws, scenario, &out))?;
            files.extend([REVENUE_CURVE, REVENUE_DRAWS]);
            Some(s)
        }
        None => None,
    };

    let diagnostics = DiagnosticsSummary::new(&diagnostics);
    let quality_gates = QualityGates {
        population_r_hat_below_1_01: diagnostics.max_population_r_hat < RHAT_GATE,
        recovery: wtp_out.recovery.as_ref().map(|r| r.overall_pass),
        sign_safe: wtp_out.summaries.iter().all(|s| s.flagged_count == 0),
    };
    files.push(REPORT);
    let report = RunReport {
        seed: config.seed,
        config: config.clone(),
        stages_run,
        n_records,
        diagnostics,
        wtp: wtp_out.summaries,
        recovery: wtp_out.recovery,
        flagged_individuals: wtp_out.flagged_individuals,
        revenue: revenue_summary,
        overall_pass: quality_gates.all_pass(),
        quality_gates,
        files: files.iter().map(|f| f.to_string()).collect(),
        timings,
    };
    write_json(&out.join(REPORT), &report)?;
    Ok(report)
}

/// Merge `key: value` into `report.json` in `out`, creating it if needed.
pub fn update_report<T: Serialize>(out: &Path, key: &str, value: &T) -> Result<PathBuf> {
    let path = out.join(REPORT);
    let mut report: serde_json::Map<String, serde_json::Value> =
        if path.exists() { read_json(&path)? } else { serde_json::Map::new() };
    report.insert(key.to_string(), serde_json::to_value(value)?);
    write_json(&path, &report)?;
    Ok(path)
}
