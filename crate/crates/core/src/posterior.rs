//! Dollar-valued willingness-to-pay from posterior draws.
//!
//! WTP is computed draw by draw as `-beta_f / beta_price` on the unscaled
//! coefficients, so the result is a full distribution rather than a ratio of
//! posterior means.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{wtp_with_eps, DEFAULT_SIGN_EPS};
use crate::error::{Error, Result};
use crate::infer::{PosteriorDraws, Standardization};
use crate::output::write_atomic_with;
use crate::simulate::GroundTruth;

pub const DEFAULT_HDI_MASS: f64 = 0.95;
/// Population WTP fails when more than this fraction of draws is sign-unsafe.
pub const POPULATION_FLAG_LIMIT: f64 = 0.001;
/// Individual WTP is marked (not failed) above this fraction.
pub const INDIVIDUAL_FLAG_LIMIT: f64 = 0.005;
pub const MIN_HDI_SAMPLES: usize = 100;

/// Population coefficients per draw on the dollar / level scale.
#[derive(Debug, Clone, PartialEq)]
pub struct UnscaledDraws {
    pub columns: Vec<String>,
    pub price_column: usize,
    pub n_draws: usize,
    /// `n_draws x d`.
    pub mu: Vec<f64>,
    /// `n_draws x d`, empty without the hierarchy.
    pub sigma: Vec<f64>,
}

impl UnscaledDraws {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn mu(&self, k: usize) -> &[f64] {
        let d = self.n_cols();
        &self.mu[k * d..(k + 1) * d]
    }

    pub fn sigma(&self, k: usize) -> Option<&[f64]> {
        let d = self.n_cols();
        (!self.sigma.is_empty()).then(|| &self.sigma[k * d..(k + 1) * d])
    }
}

fn standardization(draws: &PosteriorDraws) -> Result<&Standardization> {
    draws
        .standardization
        .as_ref()
        .ok_or_else(|| Error::contract("posterior draws carry no standardization metadata"))
}

/// Divide each standardized slope by its column scale.
pub fn unscale_beta(std: &Standardization, beta: &[f64]) -> Vec<f64> {
    beta.iter().zip(&std.scale).map(|(b, s)| b / s).collect()
}

pub fn unscale(draws: &PosteriorDraws) -> Result<UnscaledDraws> {
    let std = standardization(draws)?;
    std.validate()?;
    let d = draws.n_cols();
    if std.scale.len() != d {
        return Err(Error::contract(format!(
            "standardization has {} columns, draws have {d}",
            std.scale.len()
        )));
    }
    let rescale = |m: &[f64]| -> Vec<f64> {
        m.chunks(d).flat_map(|row| unscale_beta(std, row)).collect()
    };
    Ok(UnscaledDraws {
        columns: draws.columns.clone(),
        price_column: draws.price_column,
        n_draws: draws.n_draws,
        mu: rescale(&draws.mu),
        sigma: rescale(&draws.sigma),
    })
}

/// Retained WTP draws for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtpDraws {
    pub feature: String,
    pub draws: Vec<f64>,
    pub flagged_count: usize,
    pub total_draws: usize,
    /// Set for individual estimates whose flagged share exceeds the limit.
    pub flagged: bool,
}

impl WtpDraws {
    pub fn mean(&self) -> f64 {
        self.draws.iter().sum::<f64>() / self.draws.len() as f64
    }

    pub fn flagged_fraction(&self) -> f64 {
        self.flagged_count as f64 / self.total_draws.max(1) as f64
    }
}

fn feature_column(draws: &PosteriorDraws, feature: &str) -> Result<usize> {
    let j = draws
        .columns
        .iter()
        .position(|c| c == feature)
        .ok_or_else(|| Error::contract(format!("unknown feature column `{feature}`")))?;
    if j == draws.price_column {
        return Err(Error::contract("WTP is undefined for the price column"));
    }
    Ok(j)
}

fn ratio_draws(
    feature: &str,
    pairs: impl Iterator<Item = (f64, f64)>,
) -> WtpDraws {
    let mut out = WtpDraws {
        feature: feature.to_string(),
        draws: Vec::new(),
        flagged_count: 0,
        total_draws: 0,
        flagged: false,
    };
    for (beta_f, beta_price) in pairs {
        out.total_draws += 1;
        match wtp_with_eps(beta_f, beta_price, DEFAULT_SIGN_EPS) {
            Ok(w) => out.draws.push(w),
            Err(_) => out.flagged_count += 1,
        }
    }
    out
}

/// Population WTP per draw from the unscaled population means.
pub fn wtp_draws(draws: &PosteriorDraws, feature: &str) -> Result<WtpDraws> {
    let j = feature_column(draws, feature)?;
    let un = unscale(draws)?;
    wtp_from_unscaled(&un, j)
}

fn wtp_from_unscaled(un: &UnscaledDraws, j: usize) -> Result<WtpDraws> {
    let pc = un.price_column;
    let out = ratio_draws(&un.columns[j], (0..un.n_draws).map(|k| (un.mu(k)[j], un.mu(k)[pc])));
    if out.flagged_fraction() > POPULATION_FLAG_LIMIT || out.draws.is_empty() {
        return Err(Error::SignSafety {
            feature: out.feature,
            flagged: out.flagged_count,
            total: out.total_draws,
        });
    }
    Ok(out)
}

/// Population WTP draws for every non-price column, in column order.
pub fn all_wtp_draws(draws: &PosteriorDraws) -> Result<Vec<WtpDraws>> {
    let un = unscale(draws)?;
    (0..un.n_cols())
        .filter(|&j| j != un.price_column)
        .map(|j| wtp_from_unscaled(&un, j))
        .collect()
}

/// WTP of one respondent from reconstructed individual coefficients.
pub fn individual_wtp(draws: &PosteriorDraws, respondent_id: u32, feature: &str) -> Result<WtpDraws> {
    let j = feature_column(draws, feature)?;
    let i = draws.respondent_index(respondent_id).ok_or_else(|| {
        Error::contract(format!("respondent {respondent_id} is not in the fitted data"))
    })?;
    let std = standardization(draws)?;
    let pc = draws.price_column;
    let mut out = ratio_draws(
        feature,
        (0..draws.n_draws).map(|k| {
            let beta = draws.individual_beta(k, i);
            (beta[j] / std.scale[j], beta[pc] / std.scale[pc])
        }),
    );
    out.flagged = out.flagged_fraction() > INDIVIDUAL_FLAG_LIMIT;
    Ok(out)
}

/// Shortest interval over the sorted samples holding `ceil(mass * n)` of them.
/// Ties go to the leftmost window.
pub fn hdi(samples: &[f64], mass: f64) -> Result<(f64, f64)> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(Error::contract(format!("HDI mass {mass} must lie in (0, 1)")));
    }
    if samples.len() < MIN_HDI_SAMPLES {
        return Err(Error::contract(format!(
            "HDI needs at least {MIN_HDI_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::contract("HDI samples contain NaN"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let keep = ((mass * n as f64).ceil() as usize).clamp(1, n);
    let mut best = 0;
    let mut best_width = f64::INFINITY;
    for lo in 0..=n - keep {
        let width = sorted[lo + keep - 1] - sorted[lo];
        if width < best_width {
            best_width = width;
            best = lo;
        }
    }
    Ok((sorted[best], sorted[best + keep - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtpSummary {
    pub feature: String,
    pub mean: f64,
    pub hdi_low: f64,
    pub hdi_high: f64,
    pub hdi_mass: f64,
    pub flagged_count: usize,
}

pub fn summarize(wtp: &WtpDraws, mass: f64) -> Result<WtpSummary> {
    let (hdi_low, hdi_high) = hdi(&wtp.draws, mass)?;
    Ok(WtpSummary {
        feature: wtp.feature.clone(),
        mean: wtp.mean(),
        hdi_low,
        hdi_high,
        hdi_mass: mass,
        flagged_count: wtp.flagged_count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecovery {
    pub feature: String,
    pub true_wtp: f64,
    pub summary: WtpSummary,
    pub covered: bool,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub features: Vec<FeatureRecovery>,
    pub overall_pass: bool,
}

/// Compare summaries with the known truth; intervals are closed.
pub fn recovery_report(truth: &GroundTruth, summaries: &[WtpSummary]) -> Result<RecoveryReport> {
    let mut features = Vec::new();
    for (feature, &true_wtp) in &truth.true_wtp_by_feature {
        let summary = summaries
            .iter()
            .find(|s| &s.feature == feature)
            .ok_or_else(|| Error::contract(format!("no WTP summary for `{feature}`")))?;
        features.push(FeatureRecovery {
            feature: feature.clone(),
            true_wtp,
            summary: summary.clone(),
            covered: summary.hdi_low <= true_wtp && true_wtp <= summary.hdi_high,
            abs_error: (summary.mean - true_wtp).abs(),
        });
    }
    let overall_pass = features.iter().all(|f| f.covered);
    Ok(RecoveryReport { features, overall_pass })
}

/// `feature,true_wtp,mean,hdi_low,hdi_high,hdi_mass,flagged_count`;
/// `true_wtp` is blank when unknown.
pub fn write_summary_csv<W: Write>(writer: W, summaries: &[WtpSummary], truth: Option<&GroundTruth>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["feature", "true_wtp", "mean", "hdi_low", "hdi_high", "hdi_mass", "flagged_count"])?;
    for s in summaries {
        let true_wtp = truth
            .and_then(|t| t.true_wtp_by_feature.get(&s.feature))
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([
            s.feature.clone(),
            true_wtp,
            s.mean.to_string(),
            s.hdi_low.to_string(),
            s.hdi_high.to_string(),
            s.hdi_mass.to_string(),
            s.flagged_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One column per feature, one row per retained draw.
pub fn write_draws_csv<W: Write>(writer: W, wtp: &[WtpDraws]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(wtp.iter().map(|d| d.feature.as_str()))?;
    let rows = wtp.iter().map(|d| d.draws.len()).max().unwrap_or(0);
    for k in 0..rows {
        w.write_record(wtp.iter().map(|d| d.draws.get(k).map(|v| v.to_string()).unwrap_or_default()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_summary_csv(path: &Path, summaries: &[WtpSummary], truth: Option<&GroundTruth>) -> Result<()> {
    write_atomic_with(path, |w| write_summary_csv(w, summaries, truth))
}

pub fn save_draws_csv(path: &Path, wtp: &[WtpDraws]) -> Result<()> {
    write_atomic_with(path, |w| write_draws_csv(w, wtp))
}
