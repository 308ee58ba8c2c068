//! Log posterior of the hierarchical binary logit.
//!
//! Unconstrained parameter layout for `d` columns and `n` respondents:
//!
//! ```text
//! [ mu (d) | log_sigma (d) | z (n * d, respondent-major) ]
//! ```
//!
//! with individual coefficients `beta_i = mu + sigma * z_i` on the
//! standardized scale. With the hierarchy disabled the layout is just `mu`
//! and every respondent shares it.

use super::design::Design;
use super::ModelConfig;
use crate::error::{Error, Result};

/// A differentiable log density over an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density at `position` and writes its gradient.
    fn log_density(&self, position: &[f64], grad: &mut [f64]) -> f64;
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

pub struct HierarchicalLogit<'a> {
    design: &'a Design,
    /// Design rows with the column means added back (`x / scale`). The logit
    /// has no intercept, so centering would otherwise shift every utility
    /// difference by a slope-dependent constant.
    rows: Vec<f64>,
    choices: &'a [f64],
    hierarchical: bool,
    prior_mean: Vec<f64>,
    prior_sd: Vec<f64>,
    sigma_sd: f64,
}

impl<'a> HierarchicalLogit<'a> {
    pub fn new(design: &'a Design, choices: &'a [f64], config: &ModelConfig) -> Result<Self> {
        if choices.len() != design.n_rows() {
            return Err(Error::contract(format!(
                "{} choices for {} design rows",
                choices.len(),
                design.n_rows()
            )));
        }
        if let Some(y) = choices.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(Error::contract(format!("choice value {y} is not 0 or 1")));
        }
        config.validate()?;
        let d = design.n_cols();
        let pc = design.price_column();
        let pick = |c: usize| {
            if c == pc {
                config.prior_mu_price
            } else {
                config.prior_mu_feature
            }
        };
        let std = design.standardization();
        let offset: Vec<f64> = std.mean.iter().zip(&std.scale).map(|(m, s)| m / s).collect();
        let mut rows = Vec::with_capacity(design.n_rows() * d);
        for r in 0..design.n_rows() {
            rows.extend(design.row(r).iter().zip(&offset).map(|(x, c)| x + c));
        }
        Ok(Self {
            design,
            rows,
            choices,
            hierarchical: config.hierarchical,
            prior_mean: (0..d).map(|c| pick(c).mean).collect(),
            prior_sd: (0..d).map(|c| pick(c).sd).collect(),
            sigma_sd: config.prior_sigma.sd,
        })
    }

    pub fn design(&self) -> &Design {
        self.design
    }

    pub fn is_hierarchical(&self) -> bool {
        self.hierarchical
    }

    /// Individual standardized coefficients, respondent-major.
    pub fn betas(&self, position: &[f64]) -> Vec<f64> {
        let d = self.design.n_cols();
        let n = self.design.n_respondents();
        let mu = &position[..d];
        if !self.hierarchical {
            return mu.repeat(n);
        }
        let sigma: Vec<f64> = position[d..2 * d].iter().map(|t| t.exp()).collect();
        let mut beta = Vec::with_capacity(n * d);
        for z in position[2 * d..].chunks_exact(d) {
            beta.extend((0..d).map(|f| mu[f] + sigma[f] * z[f]));
        }
        beta
    }

    /// Bernoulli log likelihood for given individual coefficients; when
    /// `grad_beta` is supplied it receives the gradient per coefficient.
    fn log_likelihood_of(&self, beta: &[f64], mut grad_beta: Option<&mut [f64]>) -> f64 {
        let d = self.design.n_cols();
        let mut total = 0.0;
        for i in 0..self.design.n_respondents() {
            let b = &beta[i * d..(i + 1) * d];
            let rows = self.design.rows_of(i);
            let mut g_i = grad_beta.as_deref_mut().map(|g| &mut g[i * d..(i + 1) * d]);
            for r in rows {
                let x = &self.rows[r * d..(r + 1) * d];
                let eta: f64 = x.iter().zip(b).map(|(u, v)| u * v).sum();
                // log sigma(t) and sigma(-t) for t = +-eta from a single exp
                let chose_a = self.choices[r] == 1.0;
                let t = if chose_a { eta } else { -eta };
                let e = (-t.abs()).exp();
                let one_pe = 1.0 + e;
                let log1pe = one_pe.ln();
                total += if t >= 0.0 { -log1pe } else { t - log1pe };
                if let Some(g) = g_i.as_deref_mut() {
                    let miss = if t >= 0.0 { e } else { 1.0 } / one_pe;
                    let resid = if chose_a { miss } else { -miss };
                    for (gf, xf) in g.iter_mut().zip(x) {
                        *gf += resid * xf;
                    }
                }
            }
        }
        total
    }

    pub fn log_likelihood(&self, position: &[f64]) -> f64 {
        self.log_likelihood_of(&self.betas(position), None)
    }

    /// Priors on `mu` and `sigma` (including the log-transform Jacobian)
    /// plus the standard-normal prior on `z`.
    pub fn log_prior(&self, position: &[f64]) -> f64 {
        let mut grad = vec![0.0; self.dim()];
        self.add_log_prior(position, &mut grad)
    }

    fn add_log_prior(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.design.n_cols();
        let mut lp = 0.0;
        for f in 0..d {
            let (m, s) = (self.prior_mean[f], self.prior_sd[f]);
            lp += normal_lpdf(position[f], m, s);
            grad[f] -= (position[f] - m) / (s * s);
        }
        if self.hierarchical {
            let s = self.sigma_sd;
            for f in 0..d {
                let t = position[d + f];
                let sigma = t.exp();
                // half-normal density of sigma, times d(sigma)/dt = sigma
                lp += std::f64::consts::LN_2 + normal_lpdf(sigma, 0.0, s) + t;
                grad[d + f] += 1.0 - sigma * sigma / (s * s);
            }
            for (k, &z) in position[2 * d..].iter().enumerate() {
                lp += -0.5 * z * z - LN_SQRT_2PI;
                grad[2 * d + k] -= z;
            }
        }
        lp
    }

    /// Log density of the centered parameterization at `(mu, log_sigma, beta)`
    /// (with the log-sigma Jacobian, without any z-to-beta Jacobian).
    pub fn log_density_centered(&self, mu: &[f64], log_sigma: &[f64], beta: &[f64]) -> f64 {
        assert!(self.hierarchical, "centered form needs the hierarchy");
        let d = self.design.n_cols();
        let n = self.design.n_respondents();
        let mut position = Vec::with_capacity(2 * d);
        position.extend_from_slice(mu);
        position.extend_from_slice(log_sigma);
        position.resize(2 * d + n * d, 0.0);
        let mut grad = vec![0.0; position.len()];
        // Priors on mu and sigma only; the z block is zero and removed below.
        let zero_z_prior = -((n * d) as f64) * LN_SQRT_2PI;
        let mut lp = self.add_log_prior(&position, &mut grad) - zero_z_prior;
        for i in 0..n {
            for f in 0..d {
                lp += normal_lpdf(beta[i * d + f], mu[f], log_sigma[f].exp());
            }
        }
        lp + self.log_likelihood_of(beta, None)
    }
}

impl LogDensity for HierarchicalLogit<'_> {
    fn dim(&self) -> usize {
        let d = self.design.n_cols();
        if self.hierarchical {
            2 * d + self.design.n_respondents() * d
        } else {
            d
        }
    }

    fn log_density(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.design.n_cols();
        let n = self.design.n_respondents();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let beta = self.betas(position);
        let mut grad_beta = vec![0.0; n * d];
        let ll = self.log_likelihood_of(&beta, Some(&mut grad_beta));
        if self.hierarchical {
            let z = &position[2 * d..];
            let sigma: Vec<f64> = position[d..2 * d].iter().map(|t| t.exp()).collect();
            for i in 0..n {
                for f in 0..d {
                    let gb = grad_beta[i * d + f];
                    grad[f] += gb;
                    grad[d + f] += gb * sigma[f] * z[i * d + f];
                    grad[2 * d + i * d + f] += gb * sigma[f];
                }
            }
        } else {
            for i in 0..n {
                for f in 0..d {
                    grad[f] += grad_beta[i * d + f];
                }
            }
        }
        let lp = ll + self.add_log_prior(position, grad);
        if lp.is_finite() {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Log posterior and its gradient at an unconstrained state.
pub fn log_posterior(
    state: &[f64],
    design: &Design,
    choices: &[f64],
    config: &ModelConfig,
) -> Result<(f64, Vec<f64>)> {
    let model = HierarchicalLogit::new(design, choices, config)?;
    if state.len() != model.dim() {
        return Err(Error::contract(format!(
            "state has {} entries, model expects {}",
            state.len(),
            model.dim()
        )));
    }
    let mut grad = vec![0.0; state.len()];
    let lp = model.log_density(state, &mut grad);
    Ok((lp, grad))
}
