//! Bayesian hierarchical logit fitted with NUTS.
//!
//! Individual part-worths are `beta_i ~ Normal(mu, sigma)` per column on the
//! standardized scale, sampled non-centered as `beta_i = mu + sigma * z_i`.

mod adapt;
mod design;
pub mod diagnostics;
mod model;
pub mod nuts;
mod store;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adapt::{DualAveraging, WindowedMetric, Welford};
pub use design::{build_design, build_design_with, Design, Standardization};
pub use model::{log_posterior, HierarchicalLogit, LogDensity};
pub use nuts::{ChainOutput, NutsSettings};

use crate::domain::AttributeScheme;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::simulate::ChoiceDataset;

/// Fits with more divergent post-warmup transitions than this fraction fail.
pub const MAX_DIVERGENCE_RATE: f64 = 0.05;

/// Population parameters with a larger R-hat attach a convergence warning.
pub const RHAT_WARNING: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfNormalPrior {
    pub sd: f64,
}

/// Priors (standardized scale) and sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub prior_mu_price: NormalPrior,
    pub prior_mu_feature: NormalPrior,
    pub prior_sigma: HalfNormalPrior,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub warmup_per_chain: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    /// When false, one coefficient vector is shared by every respondent.
    pub hierarchical: bool,
    /// Set from the run's top-level seed; never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prior_mu_price: NormalPrior { mean: -1.0, sd: 1.0 },
            prior_mu_feature: NormalPrior { mean: 0.0, sd: 2.0 },
            prior_sigma: HalfNormalPrior { sd: 1.0 },
            chains: 4,
            draws_per_chain: 2000,
            warmup_per_chain: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            hierarchical: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::contract(format!("model.{field} {why}")));
        if self.chains == 0 {
            return fail("chains", "must be at least 1");
        }
        if self.draws_per_chain == 0 {
            return fail("draws_per_chain", "must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return fail("target_accept", "must lie strictly between 0 and 1");
        }
        if self.max_tree_depth == 0 {
            return fail("max_tree_depth", "must be at least 1");
        }
        for (name, prior) in [("prior_mu_price", self.prior_mu_price), ("prior_mu_feature", self.prior_mu_feature)] {
            if !(prior.sd > 0.0 && prior.sd.is_finite() && prior.mean.is_finite()) {
                return fail(name, "needs a finite mean and positive sd");
            }
        }
        if !(self.prior_sigma.sd > 0.0 && self.prior_sigma.sd.is_finite()) {
            return fail("prior_sigma", "needs a positive sd");
        }
        Ok(())
    }

    pub fn nuts_settings(&self) -> NutsSettings {
        NutsSettings { max_depth: self.max_tree_depth, target_accept: self.target_accept }
    }
}

/// Post-warmup draws of every model parameter.
///
/// `mu` and `sigma` are on the standardized scale; `standardization` holds
/// the column scales needed to convert back to utility per dollar / level.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub columns: Vec<String>,
    pub price_column: usize,
    pub hierarchical: bool,
    pub respondent_ids: Vec<u32>,
    pub n_draws: usize,
    /// `n_draws x d`, draw-major.
    pub mu: Vec<f64>,
    /// `n_draws x d` (empty without the hierarchy).
    pub sigma: Vec<f64>,
    /// `n_draws x n x d` (empty without the hierarchy).
    pub z: Vec<f64>,
    pub chain: Vec<u32>,
    pub draw_index: Vec<u32>,
    pub divergent: Vec<bool>,
    pub standardization: Option<Standardization>,
    pub scheme: Option<AttributeScheme>,
    pub config: ModelConfig,
}

impl PosteriorDraws {
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn n_respondents(&self) -> usize {
        self.respondent_ids.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chain.iter().map(|&c| c as usize + 1).max().unwrap_or(0)
    }

    pub fn mu(&self, k: usize) -> &[f64] {
        let d = self.n_cols();
        &self.mu[k * d..(k + 1) * d]
    }

    pub fn sigma(&self, k: usize) -> &[f64] {
        let d = self.n_cols();
        &self.sigma[k * d..(k + 1) * d]
    }

    pub fn z(&self, k: usize, i: usize) -> &[f64] {
        let d = self.n_cols();
        let n = self.n_respondents();
        &self.z[(k * n + i) * d..(k * n + i + 1) * d]
    }

    pub fn respondent_index(&self, respondent_id: u32) -> Option<usize> {
        self.respondent_ids.iter().position(|&r| r == respondent_id)
    }

    /// `mu + sigma * z_i` for draw `k` on the standardized scale.
    pub fn individual_beta(&self, k: usize, i: usize) -> Vec<f64> {
        if !self.hierarchical {
            return self.mu(k).to_vec();
        }
        let (mu, sigma, z) = (self.mu(k), self.sigma(k), self.z(k, i));
        (0..self.n_cols()).map(|f| mu[f] + sigma[f] * z[f]).collect()
    }

    pub fn dim(&self) -> usize {
        let d = self.n_cols();
        if self.hierarchical {
            2 * d + self.n_respondents() * d
        } else {
            d
        }
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.columns.iter().map(|c| format!("mu[{c}]")).collect();
        if self.hierarchical {
            names.extend(self.columns.iter().map(|c| format!("sigma[{c}]")));
            for id in &self.respondent_ids {
                names.extend(self.columns.iter().map(|c| format!("z[{id},{c}]")));
            }
        }
        names
    }

    /// Flattened `[mu | sigma | z]` for draw `k`.
    pub fn flat(&self, k: usize) -> Vec<f64> {
        let mut v = self.mu(k).to_vec();
        if self.hierarchical {
            v.extend_from_slice(self.sigma(k));
            let n = self.n_respondents();
            let d = self.n_cols();
            v.extend_from_slice(&self.z[k * n * d..(k + 1) * n * d]);
        }
        v
    }

    /// Draws of flattened parameter `j`, one vector per chain.
    pub fn by_chain(&self, j: usize) -> Vec<Vec<f64>> {
        let d = self.n_cols();
        let n = self.n_respondents();
        let value = |k: usize| -> f64 {
            if j < d {
                self.mu[k * d + j]
            } else if j < 2 * d {
                self.sigma[k * d + j - d]
            } else {
                self.z[k * n * d + j - 2 * d]
            }
        };
        let mut out = vec![Vec::new(); self.n_chains()];
        for k in 0..self.n_draws {
            out[self.chain[k] as usize].push(value(k));
        }
        out
    }

    pub(crate) fn from_chains(
        design: &Design,
        hierarchical: bool,
        config: &ModelConfig,
        chains: &[ChainOutput],
    ) -> Self {
        let d = design.n_cols();
        let n = design.n_respondents();
        let dim = if hierarchical { 2 * d + n * d } else { d };
        let total: usize = chains.iter().map(ChainOutput::n_draws).sum();
        let mut draws = PosteriorDraws {
            columns: design.standardization().columns.clone(),
            price_column: design.price_column(),
            hierarchical,
            respondent_ids: design.respondent_ids().to_vec(),
            n_draws: total,
            mu: Vec::with_capacity(total * d),
            sigma: Vec::with_capacity(if hierarchical { total * d } else { 0 }),
            z: Vec::with_capacity(if hierarchical { total * n * d } else { 0 }),
            chain: Vec::with_capacity(total),
            draw_index: Vec::with_capacity(total),
            divergent: Vec::with_capacity(total),
            standardization: Some(design.standardization().clone()),
            scheme: None,
            config: config.clone(),
        };
        for (c, out) in chains.iter().enumerate() {
            for k in 0..out.n_draws() {
                let q = &out.draws[k * dim..(k + 1) * dim];
                draws.mu.extend_from_slice(&q[..d]);
                if hierarchical {
                    draws.sigma.extend(q[d..2 * d].iter().map(|t| t.exp()));
                    draws.z.extend_from_slice(&q[2 * d..]);
                }
                draws.chain.push(c as u32);
                draws.draw_index.push(k as u32);
                draws.divergent.push(out.divergent[k]);
            }
        }
        draws
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostic {
    pub name: String,
    pub r_hat: f64,
    pub ess_bulk: f64,
}

/// Sampler quality summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Population means and SDs.
    pub population: Vec<ParameterDiagnostic>,
    /// Individual offsets `z`.
    pub individual: Vec<ParameterDiagnostic>,
    pub divergence_count: usize,
    pub divergence_rate: f64,
    pub mean_accept_prob: Vec<f64>,
    pub step_size: Vec<f64>,
    pub mean_tree_depth: Vec<f64>,
    pub max_tree_depth_hits: usize,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn max_population_r_hat(&self) -> f64 {
        self.population.iter().map(|p| p.r_hat).fold(f64::NAN, f64::max)
    }

    pub fn compute(draws: &PosteriorDraws, chains: &[ChainOutput], max_depth: usize) -> Self {
        let d = draws.n_cols();
        let names = draws.parameter_names();
        let pop_len = if draws.hierarchical { 2 * d } else { d };
        let per_param: Vec<ParameterDiagnostic> = (0..names.len())
            .into_par_iter()
            .map(|j| {
                let chains = draws.by_chain(j);
                let values: Vec<Vec<f64>> = if j >= d && j < 2 * d {
                    // sigma is sampled on the log scale
                    chains.iter().map(|c| c.iter().map(|s| s.ln()).collect()).collect()
                } else {
                    chains
                };
                ParameterDiagnostic {
                    name: names[j].clone(),
                    r_hat: diagnostics::rank_normalized_rhat(&values),
                    ess_bulk: diagnostics::ess_bulk(&values),
                }
            })
            .collect();
        let (population, individual) = {
            let mut all = per_param;
            let individual = all.split_off(pop_len);
            (all, individual)
        };
        let divergence_count = draws.divergent.iter().filter(|d| **d).count();
        let mut diag = Diagnostics {
            population,
            individual,
            divergence_count,
            divergence_rate: divergence_count as f64 / draws.n_draws.max(1) as f64,
            mean_accept_prob: chains.iter().map(ChainOutput::mean_accept).collect(),
            step_size: chains.iter().map(|c| c.step_size).collect(),
            mean_tree_depth: chains
                .iter()
                .map(|c| c.depth.iter().sum::<usize>() as f64 / c.depth.len().max(1) as f64)
                .collect(),
            max_tree_depth_hits: chains
                .iter()
                .flat_map(|c| &c.depth)
                .filter(|&&dep| dep >= max_depth)
                .count(),
            warnings: Vec::new(),
        };
        for p in &diag.population {
            if !(p.r_hat <= RHAT_WARNING) {
                diag.warnings.push(format!(
                    "r_hat {:.4} for {} exceeds {RHAT_WARNING}; chains may not have converged",
                    p.r_hat, p.name
                ));
            }
        }
        if diag.max_tree_depth_hits > 0 {
            diag.warnings.push(format!(
                "{} transitions hit the maximum tree depth {max_depth}",
                diag.max_tree_depth_hits
            ));
        }
        diag
    }
}

/// Run `config.chains` independent NUTS chains in parallel.
///
/// Each chain draws from its own stream keyed by `(seed, chain_index)`, so
/// the result does not depend on thread scheduling.
pub fn sample(
    design: &Design,
    choices: &[f64],
    config: &ModelConfig,
) -> Result<(PosteriorDraws, Diagnostics)> {
    let model = HierarchicalLogit::new(design, choices, config)?;
    let settings = config.nuts_settings();
    let chains: Vec<ChainOutput> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(config.seed, Domain::Chains, c as u64);
            let start = nuts::initial_point(&model, &mut rng)?;
            Ok(nuts::run_chain(
                &model,
                start,
                config.warmup_per_chain,
                config.draws_per_chain,
                settings,
                &mut rng,
            ))
        })
        .collect::<Result<_>>()?;
    let draws = PosteriorDraws::from_chains(design, config.hierarchical, config, &chains);
    let diagnostics = Diagnostics::compute(&draws, &chains, config.max_tree_depth);
    if diagnostics.divergence_rate > MAX_DIVERGENCE_RATE {
        return Err(Error::Fit(format!(
            "{} of {} post-warmup transitions diverged ({:.1}% > {:.0}%); \
             raise target_accept, lengthen warmup or tighten the priors",
            diagnostics.divergence_count,
            draws.n_draws,
            100.0 * diagnostics.divergence_rate,
            100.0 * MAX_DIVERGENCE_RATE
        )));
    }
    Ok((draws, diagnostics))
}

/// Build the design from a dataset, sample, and attach the scheme.
pub fn fit(dataset: &ChoiceDataset, config: &ModelConfig) -> Result<(PosteriorDraws, Diagnostics)> {
    let (design, choices) = build_design(dataset)?;
    let (mut draws, diagnostics) = sample(&design, &choices, config)?;
    draws.scheme = Some(dataset.scheme.clone());
    Ok((draws, diagnostics))
}
