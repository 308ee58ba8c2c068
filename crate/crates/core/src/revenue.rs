//! Expected revenue of a feature bundle across a price grid.
//!
//! The market is a binary choice between the bundle at a candidate price and
//! the baseline product at its fixed price. For every posterior draw a panel
//! of consumers is drawn from `Normal(mu, sigma)` once and reused at every
//! price, so each draw's demand curve is exactly monotone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{sigmoid, AttributeScheme, ProductProfile, DEFAULT_SIGN_EPS};
use crate::error::{Error, Result};
use crate::infer::PosteriorDraws;
use crate::output::write_atomic_with;
use crate::posterior::{hdi, unscale, DEFAULT_HDI_MASS, POPULATION_FLAG_LIMIT};
use crate::rng::{stream, Domain};
use crate::simulate::PRICE_COEF_CEILING;

const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleScenario {
    pub baseline_profile: ProductProfile,
    /// attribute -> upgraded level
    pub bundle_upgrades: BTreeMap<String, String>,
    pub price_grid: Vec<f64>,
    #[serde(default = "default_market_size")]
    pub market_size: usize,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

fn default_market_size() -> usize {
    2000
}

impl BundleScenario {
    /// Pro camera plus titanium frame over a $799 base model, priced
    /// $799..=$1299 in $25 steps.
    pub fn smartphone() -> Self {
        let scheme = AttributeScheme::smartphone();
        Self {
            baseline_profile: scheme.baseline_profile(799.0),
            bundle_upgrades: [("camera", "Pro"), ("frame", "Titanium")]
                .into_iter()
                .map(|(a, l)| (a.to_string(), l.to_string()))
                .collect(),
            price_grid: (0..=20).map(|i| 799.0 + 25.0 * i as f64).collect(),
            market_size: default_market_size(),
            seed: 0,
        }
    }

    /// Grid and size checks that need no scheme.
    pub fn validate_shape(&self) -> Result<()> {
        if self.price_grid.is_empty() {
            return Err(Error::contract("scenario.price_grid is empty"));
        }
        if let Some(p) = self.price_grid.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::contract(format!("scenario.price_grid has non-positive price {p}")));
        }
        if self.price_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::contract("scenario.price_grid must be strictly increasing"));
        }
        if self.bundle_upgrades.is_empty() {
            return Err(Error::contract("scenario.bundle_upgrades is empty"));
        }
        if self.market_size == 0 {
            return Err(Error::contract("scenario.market_size must be at least 1"));
        }
        Ok(())
    }

    pub fn validate(&self, scheme: &AttributeScheme) -> Result<()> {
        self.validate_shape()?;
        scheme.validate_profile(&self.baseline_profile)?;
        scheme.validate_profile(&self.bundle_profile(self.baseline_profile.price))?;
        Ok(())
    }

    pub fn bundle_profile(&self, price: f64) -> ProductProfile {
        let mut profile = self.baseline_profile.clone();
        for (attr, level) in &self.bundle_upgrades {
            profile.levels.insert(attr.clone(), level.clone());
        }
        profile.price = price;
        profile
    }

    /// Encoded bundle minus baseline, with the price entry zeroed.
    fn feature_difference(&self, scheme: &AttributeScheme) -> Result<Vec<f64>> {
        let bundle = scheme.encode(&self.bundle_profile(self.baseline_profile.price))?;
        let base = scheme.encode(&self.baseline_profile)?;
        Ok(bundle.difference(&base))
    }
}

/// Simulated consumers for one posterior draw.
#[derive(Debug, Clone)]
pub struct ConsumerPanel {
    /// Utility gain of the bundle's features over the baseline, per consumer.
    gain: Vec<f64>,
    price_coef: Vec<f64>,
    baseline_price: f64,
}

impl ConsumerPanel {
    /// Draw `market_size` consumers with coefficients `mu + sigma * e` on the
    /// dollar scale (`sigma = None` puts every consumer at `mu`). Consumer
    /// price coefficients are truncated below zero.
    pub fn sample(
        scheme: &AttributeScheme,
        scenario: &BundleScenario,
        mu: &[f64],
        sigma: Option<&[f64]>,
        draw_index: u64,
    ) -> Result<Self> {
        let diff = scenario.feature_difference(scheme)?;
        Ok(Self::from_difference(&diff, scheme.price_column(), scenario, mu, sigma, draw_index))
    }

    fn from_difference(
        diff: &[f64],
        price_column: usize,
        scenario: &BundleScenario,
        mu: &[f64],
        sigma: Option<&[f64]>,
        draw_index: u64,
    ) -> Self {
        let m = scenario.market_size;
        let mut panel = Self {
            gain: Vec::with_capacity(m),
            price_coef: Vec::with_capacity(m),
            baseline_price: scenario.baseline_profile.price,
        };
        let Some(sigma) = sigma else {
            let gain = dot_except(diff, mu, price_column);
            let price = mu[price_column].min(PRICE_COEF_CEILING);
            panel.gain = vec![gain; m];
            panel.price_coef = vec![price; m];
            return panel;
        };
        let mut rng = stream(scenario.seed, Domain::Market, draw_index);
        let mut beta = vec![0.0; mu.len()];
        for _ in 0..m {
            for (j, b) in beta.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                *b = mu[j] + sigma[j] * e;
            }
            let mut price = beta[price_column];
            let mut tries = 0;
            while !(price < PRICE_COEF_CEILING) && tries < MAX_REDRAWS {
                let e: f64 = rng.sample(StandardNormal);
                price = mu[price_column] + sigma[price_column] * e;
                tries += 1;
            }
            panel.gain.push(dot_except(diff, &beta, price_column));
            panel.price_coef.push(price.min(PRICE_COEF_CEILING));
        }
        panel
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }

    /// Expected share choosing the bundle at `price`.
    pub fn purchase_probability(&self, price: f64) -> f64 {
        let dp = price - self.baseline_price;
        let total: f64 = self
            .gain
            .iter()
            .zip(&self.price_coef)
            .map(|(g, b)| sigmoid(g + b * dp))
            .sum();
        total / self.len() as f64
    }
}

fn dot_except(x: &[f64], beta: &[f64], skip: usize) -> f64 {
    x.iter()
        .zip(beta)
        .enumerate()
        .filter(|(j, _)| *j != skip)
        .map(|(_, (a, b))| a * b)
        .sum()
}

/// Purchase probability of the bundle for one draw of dollar-scale
/// population parameters.
pub fn purchase_probability(
    scheme: &AttributeScheme,
    scenario: &BundleScenario,
    mu: &[f64],
    sigma: Option<&[f64]>,
    draw_index: u64,
    price: f64,
) -> Result<f64> {
    if !(price > 0.0) {
        return Err(Error::contract(format!("price {price} must be positive")));
    }
    Ok(ConsumerPanel::sample(scheme, scenario, mu, sigma, draw_index)?.purchase_probability(price))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePoint {
    pub price: f64,
    pub mean: f64,
    pub hdi_low: f64,
    pub hdi_high: f64,
    pub mean_purchase_probability: f64,
}

/// Summary written into run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueSummary {
    pub points: Vec<PricePoint>,
    pub argmax_price: f64,
    pub argmax_hdi: (f64, f64),
    pub draws_used: usize,
    pub flagged_draws: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevenueCurve {
    pub prices: Vec<f64>,
    /// Posterior draw index of each row.
    pub draw_ids: Vec<usize>,
    /// Purchase probability per retained draw (rows) and price (columns).
    pub probability: Vec<Vec<f64>>,
    /// Expected revenue per consumer, same layout.
    pub revenue: Vec<Vec<f64>>,
    /// Grid price maximizing each draw's revenue.
    pub draw_argmax: Vec<f64>,
    pub summary: RevenueSummary,
}

impl RevenueCurve {
    /// Revenue draws at grid point `j`.
    pub fn revenue_at(&self, j: usize) -> Vec<f64> {
        self.revenue.iter().map(|row| row[j]).collect()
    }
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = j;
        }
    }
    best
}

/// Revenue distribution over the grid from population draws.
///
/// Draws whose population price coefficient is not negative are skipped; more
/// than the population sign-safety limit of them is an error.
pub fn revenue_curve(
    draws: &PosteriorDraws,
    scheme: &AttributeScheme,
    scenario: &BundleScenario,
) -> Result<RevenueCurve> {
    scenario.validate(scheme)?;
    if draws.columns != scheme.column_names() {
        return Err(Error::contract("posterior columns do not match the scheme"));
    }
    let un = unscale(draws)?;
    let pc = un.price_column;
    let kept: Vec<usize> = (0..un.n_draws).filter(|&k| un.mu(k)[pc] < -DEFAULT_SIGN_EPS).collect();
    let flagged = un.n_draws - kept.len();
    if kept.is_empty() || flagged as f64 > POPULATION_FLAG_LIMIT * un.n_draws as f64 {
        return Err(Error::SignSafety { feature: "bundle".into(), flagged, total: un.n_draws });
    }
    let diff = scenario.feature_difference(scheme)?;
    let probability: Vec<Vec<f64>> = kept
        .par_iter()
        .map(|&k| {
            let panel = ConsumerPanel::from_difference(&diff, pc, scenario, un.mu(k), un.sigma(k), k as u64);
            scenario.price_grid.iter().map(|&p| panel.purchase_probability(p)).collect()
        })
        .collect();
    let prices = scenario.price_grid.clone();
    let revenue: Vec<Vec<f64>> = probability
        .iter()
        .map(|row| row.iter().zip(&prices).map(|(q, p)| q * p).collect())
        .collect();
    let n = kept.len() as f64;
    let mut points = Vec::with_capacity(prices.len());
    for (j, &price) in prices.iter().enumerate() {
        let column: Vec<f64> = revenue.iter().map(|row| row[j]).collect();
        let (hdi_low, hdi_high) = hdi(&column, DEFAULT_HDI_MASS)?;
        points.push(PricePoint {
            price,
            mean: column.iter().sum::<f64>() / n,
            hdi_low,
            hdi_high,
            mean_purchase_probability: probability.iter().map(|row| row[j]).sum::<f64>() / n,
        });
    }
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let argmax_price = prices[first_argmax(&means)];
    let draw_argmax: Vec<f64> = revenue.iter().map(|row| prices[first_argmax(row)]).collect();
    let argmax_hdi = hdi(&draw_argmax, DEFAULT_HDI_MASS)?;
    let mut warnings = Vec::new();
    if prices.len() == 1 {
        warnings.push(format!("price grid has a single point; argmax is trivially {argmax_price}"));
    } else if argmax_price == prices[0] || argmax_price == prices[prices.len() - 1] {
        warnings.push(format!("revenue is maximized at the edge of the grid ({argmax_price})"));
    }
    Ok(RevenueCurve {
        prices,
        draw_ids: kept,
        probability,
        revenue,
        draw_argmax,
        summary: RevenueSummary {
            points,
            argmax_price,
            argmax_hdi,
            draws_used: un.n_draws - flagged,
            flagged_draws: flagged,
            warnings,
        },
    })
}

/// `price,mean,hdi_low,hdi_high`
pub fn write_curve_csv<W: Write>(writer: W, summary: &RevenueSummary) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["price", "mean", "hdi_low", "hdi_high"])?;
    for p in &summary.points {
        w.write_record([p.price, p.mean, p.hdi_low, p.hdi_high].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One row per retained draw: `draw` then one revenue column per price.
pub fn write_draws_csv<W: Write>(writer: W, curve: &RevenueCurve) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["draw".to_string()];
    header.extend(curve.prices.iter().map(|p| p.to_string()));
    w.write_record(&header)?;
    for (id, row) in curve.draw_ids.iter().zip(&curve.revenue) {
        let mut record = vec![id.to_string()];
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_curve_csv(path: &Path, summary: &RevenueSummary) -> Result<()> {
    write_atomic_with(path, |w| write_curve_csv(w, summary))
}

pub fn save_draws_csv(path: &Path, curve: &RevenueCurve) -> Result<()> {
    write_atomic_with(path, |w| write_draws_csv(w, curve))
}
