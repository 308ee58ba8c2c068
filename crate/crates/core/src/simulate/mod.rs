//! Synthetic choice-based conjoint surveys with known preferences.
//!
//! Heterogeneity lives in WTP space: each respondent draws a price
//! sensitivity and a personal dollar value per feature, and the feature
//! part-worths follow as `beta_f = -beta_price * wtp_f`.

mod dataset;

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{ChoiceDataset, Provenance};

use crate::domain::{self, AttributeScheme, Coefficients, ProductProfile};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Individual price coefficients are truncated to lie below this value.
pub const PRICE_COEF_CEILING: f64 = -1e-4;

/// Attempts allowed to draw a pair of distinct profiles.
pub const MAX_PAIR_ATTEMPTS: usize = 1_000;

const MAX_TRUNCATION_ATTEMPTS: usize = 10_000;

/// Known market preferences used to generate a survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// Population mean WTP in dollars, keyed by feature column name.
    pub true_wtp_by_feature: BTreeMap<String, f64>,
    /// Between-respondent SD of WTP in dollars, keyed like the means.
    pub wtp_heterogeneity_sd: BTreeMap<String, f64>,
    /// Mean price coefficient (utility per dollar).
    pub population_price_coef_mean: f64,
    pub population_price_coef_sd: f64,
}

impl GroundTruth {
    /// WTP of $100 / $250 / $200 / $80 for 256GB, 512GB, Pro camera and
    /// titanium frame. The camera SD is $50; the others use 25% of their mean.
    pub fn smartphone() -> Self {
        let wtp = [
            ("storage:256GB", 100.0),
            ("storage:512GB", 250.0),
            ("camera:Pro", 200.0),
            ("frame:Titanium", 80.0),
        ];
        let sd = [
            ("storage:256GB", 25.0),
            ("storage:512GB", 62.5),
            ("camera:Pro", 50.0),
            ("frame:Titanium", 20.0),
        ];
        Self {
            true_wtp_by_feature: wtp.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            wtp_heterogeneity_sd: sd.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            population_price_coef_mean: -0.01,
            population_price_coef_sd: 0.002,
        }
    }

    pub fn validate(&self, scheme: &AttributeScheme) -> Result<()> {
        if !(self.population_price_coef_mean < 0.0) {
            return Err(Error::contract("ground_truth.population_price_coef_mean must be negative"));
        }
        if !(self.population_price_coef_sd >= 0.0) {
            return Err(Error::contract("ground_truth.population_price_coef_sd must be non-negative"));
        }
        let features: Vec<String> =
            scheme.feature_columns().map(|i| scheme.columns()[i].name()).collect();
        for (map, field) in [
            (&self.true_wtp_by_feature, "true_wtp_by_feature"),
            (&self.wtp_heterogeneity_sd, "wtp_heterogeneity_sd"),
        ] {
            for key in map.keys() {
                if !features.contains(key) {
                    return Err(Error::contract(format!(
                        "ground_truth.{field}: `{key}` is not a feature column"
                    )));
                }
            }
            for f in &features {
                match map.get(f) {
                    Some(v) if v.is_finite() => {}
                    _ => {
                        return Err(Error::contract(format!(
                            "ground_truth.{field}: missing or non-finite value for `{f}`"
                        )))
                    }
                }
            }
        }
        if let Some((k, _)) = self.wtp_heterogeneity_sd.iter().find(|(_, v)| **v < 0.0) {
            return Err(Error::contract(format!("ground_truth.wtp_heterogeneity_sd[{k}] is negative")));
        }
        Ok(())
    }
}

/// One simulated respondent's true part-worths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentParams {
    pub respondent_id: u32,
    pub beta: Coefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceTask {
    pub respondent_id: u32,
    pub task_id: u32,
    pub profile_a: ProductProfile,
    pub profile_b: ProductProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub task: ChoiceTask,
    pub chose_a: bool,
}

/// Survey dimensions for [`simulate_survey`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyDesign {
    pub n_respondents: usize,
    pub tasks_per_respondent: usize,
    pub price_grid: Vec<f64>,
}

impl Default for SurveyDesign {
    fn default() -> Self {
        Self {
            n_respondents: 300,
            tasks_per_respondent: 20,
            price_grid: vec![799.0, 899.0, 999.0, 1099.0, 1199.0],
        }
    }
}

fn draw_price_coef<R: Rng>(truth: &GroundTruth, rng: &mut R) -> Result<f64> {
    let (mean, sd) = (truth.population_price_coef_mean, truth.population_price_coef_sd);
    if sd == 0.0 {
        return if mean < PRICE_COEF_CEILING {
            Ok(mean)
        } else {
            Err(Error::contract(format!(
                "degenerate price coefficient {mean} is not below {PRICE_COEF_CEILING}"
            )))
        };
    }
    let normal = Normal::new(mean, sd).map_err(|e| Error::contract(e.to_string()))?;
    for _ in 0..MAX_TRUNCATION_ATTEMPTS {
        let b = normal.sample(rng);
        if b < PRICE_COEF_CEILING {
            return Ok(b);
        }
    }
    Err(Error::contract("price coefficient distribution has almost no negative mass"))
}

/// Draw `n` heterogeneous respondents around the ground truth.
pub fn sample_respondents(
    scheme: &AttributeScheme,
    truth: &GroundTruth,
    n: usize,
    seed: u64,
) -> Result<Vec<RespondentParams>> {
    if n == 0 {
        return Err(Error::contract("n_respondents must be at least 1"));
    }
    truth.validate(scheme)?;
    let price_col = scheme.price_column();
    let features: Vec<(usize, f64, f64)> = scheme
        .feature_columns()
        .map(|i| {
            let name = scheme.columns()[i].name();
            (i, truth.true_wtp_by_feature[&name], truth.wtp_heterogeneity_sd[&name])
        })
        .collect();
    (0..n as u32)
        .into_par_iter()
        .map(|id| {
            let mut rng = stream(seed, Domain::Respondents, id as u64);
            let beta_price = draw_price_coef(truth, &mut rng)?;
            let mut beta = vec![0.0; scheme.n_columns()];
            beta[price_col] = beta_price;
            for &(col, mean, sd) in &features {
                let wtp = if sd == 0.0 {
                    mean
                } else {
                    Normal::new(mean, sd).map_err(|e| Error::contract(e.to_string()))?.sample(&mut rng)
                };
                beta[col] = -beta_price * wtp;
            }
            Ok(RespondentParams { respondent_id: id, beta: Coefficients(beta) })
        })
        .collect()
}

fn random_profile<R: Rng>(scheme: &AttributeScheme, price_grid: &[f64], rng: &mut R) -> ProductProfile {
    let levels = scheme
        .categorical()
        .map(|a| (a.name.clone(), a.levels.choose(rng).expect("levels non-empty").clone()))
        .collect();
    ProductProfile { levels, price: *price_grid.choose(rng).expect("grid non-empty") }
}

/// Randomized paired-profile tasks, `tasks_per_respondent` for each of
/// `n_respondents` respondents. Identical pairs are redrawn.
pub fn generate_tasks(
    scheme: &AttributeScheme,
    n_respondents: usize,
    tasks_per_respondent: usize,
    price_grid: &[f64],
    seed: u64,
) -> Result<Vec<ChoiceTask>> {
    if n_respondents == 0 {
        return Err(Error::contract("n_respondents must be at least 1"));
    }
    if tasks_per_respondent == 0 {
        return Err(Error::contract("tasks_per_respondent must be at least 1"));
    }
    if price_grid.is_empty() {
        return Err(Error::contract("price_grid must not be empty"));
    }
    if let Some(p) = price_grid.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::contract(format!("price_grid entry {p} is not a positive amount")));
    }
    let mut distinct_prices = price_grid.to_vec();
    distinct_prices.sort_by(f64::total_cmp);
    distinct_prices.dedup();
    if scheme.n_level_combinations() * distinct_prices.len() < 2 {
        return Err(Error::Design("the scheme and price grid admit only one distinct profile".into()));
    }
    let per_respondent: Result<Vec<Vec<ChoiceTask>>> = (0..n_respondents as u32)
        .into_par_iter()
        .map(|rid| {
            let mut rng = stream(seed, Domain::Tasks, rid as u64);
            (0..tasks_per_respondent as u32)
                .map(|tid| {
                    for _ in 0..MAX_PAIR_ATTEMPTS {
                        let a = random_profile(scheme, price_grid, &mut rng);
                        let b = random_profile(scheme, price_grid, &mut rng);
                        if a != b {
                            return Ok(ChoiceTask {
                                respondent_id: rid,
                                task_id: tid,
                                profile_a: a,
                                profile_b: b,
                            });
                        }
                    }
                    Err(Error::Design(format!(
                        "no distinct profile pair after {MAX_PAIR_ATTEMPTS} attempts"
                    )))
                })
                .collect()
        })
        .collect();
    Ok(per_respondent?.into_iter().flatten().collect())
}

/// Choice probabilities for each task under the owning respondent's betas.
pub fn task_probabilities(
    scheme: &AttributeScheme,
    respondents: &[RespondentParams],
    tasks: &[ChoiceTask],
) -> Result<Vec<f64>> {
    let by_id: HashMap<u32, &RespondentParams> =
        respondents.iter().map(|r| (r.respondent_id, r)).collect();
    tasks
        .iter()
        .map(|task| {
            let params = by_id.get(&task.respondent_id).ok_or_else(|| {
                Error::contract(format!("no parameters for respondent {}", task.respondent_id))
            })?;
            let ua = domain::utility(&scheme.encode(&task.profile_a)?, &params.beta)?;
            let ub = domain::utility(&scheme.encode(&task.profile_b)?, &params.beta)?;
            domain::choice_probability(ua, ub)
        })
        .collect()
}

/// Bernoulli choices for every task. Each task owns a random stream keyed by
/// `(respondent_id, task_id)`.
pub fn simulate_choices(
    scheme: &AttributeScheme,
    respondents: &[RespondentParams],
    tasks: &[ChoiceTask],
    seed: u64,
) -> Result<ChoiceDataset> {
    let probs = task_probabilities(scheme, respondents, tasks)?;
    let records = tasks
        .par_iter()
        .zip(probs.par_iter())
        .map(|(task, &p)| {
            let key = ((task.respondent_id as u64) << 32) | task.task_id as u64;
            let u: f64 = stream(seed, Domain::Choices, key).random();
            ChoiceRecord { task: task.clone(), chose_a: u < p }
        })
        .collect();
    ChoiceDataset::new(scheme.clone(), records)
}

/// Respondents, tasks and choices in one call, with provenance attached.
pub fn simulate_survey(
    scheme: &AttributeScheme,
    truth: &GroundTruth,
    design: &SurveyDesign,
    seed: u64,
) -> Result<ChoiceDataset> {
    let respondents = sample_respondents(scheme, truth, design.n_respondents, seed)?;
    let tasks = generate_tasks(
        scheme,
        design.n_respondents,
        design.tasks_per_respondent,
        &design.price_grid,
        seed,
    )?;
    let mut dataset = simulate_choices(scheme, &respondents, &tasks, seed)?;
    dataset.provenance = Some(Provenance {
        seed,
        ground_truth: truth.clone(),
        design: design.clone(),
        respondents,
    });
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_truth_gives_identical_respondents() {
        let scheme = AttributeScheme::smartphone();
        let mut truth = GroundTruth::smartphone();
        truth.wtp_heterogeneity_sd.values_mut().for_each(|v| *v = 0.0);
        truth.population_price_coef_sd = 0.0;
        let rs = sample_respondents(&scheme, &truth, 25, 3).unwrap();
        let p = scheme.price_column();
        for r in &rs {
            assert_eq!(r.beta, rs[0].beta);
            for col in scheme.feature_columns() {
                let name = scheme.columns()[col].name();
                let w = domain::wtp(r.beta.values()[col], r.beta.values()[p]).unwrap();
                assert_eq!(w, truth.true_wtp_by_feature[&name]);
            }
        }
    }

    #[test]
    fn zero_respondents_rejected() {
        let scheme = AttributeScheme::smartphone();
        assert!(sample_respondents(&scheme, &GroundTruth::smartphone(), 0, 1).is_err());
        assert!(generate_tasks(&scheme, 0, 20, &[799.0], 1).is_err());
        assert!(generate_tasks(&scheme, 3, 0, &[799.0], 1).is_err());
        assert!(generate_tasks(&scheme, 3, 2, &[], 1).is_err());
    }

    #[test]
    fn truth_must_cover_every_feature() {
        let scheme = AttributeScheme::smartphone();
        let mut truth = GroundTruth::smartphone();
        truth.true_wtp_by_feature.remove("camera:Pro");
        let err = truth.validate(&scheme).unwrap_err().to_string();
        assert!(err.contains("camera:Pro"), "{err}");
        let mut truth = GroundTruth::smartphone();
        truth.population_price_coef_mean = 0.01;
        assert!(truth.validate(&scheme).is_err());
    }

    #[test]
    fn single_profile_scheme_is_a_design_error() {
        use crate::domain::Attribute;
        let scheme = AttributeScheme::new(
            vec![
                Attribute {
                    name: "camera".into(),
                    levels: vec!["Standard".into(), "Pro".into()],
                    baseline_level: "Standard".into(),
                },
                Attribute {
                    name: "price".into(),
                    levels: vec!["799".into(), "899".into()],
                    baseline_level: "799".into(),
                },
            ],
            "price",
        )
        .unwrap();
        // Two camera levels still give two profiles at a single price.
        assert!(generate_tasks(&scheme, 2, 3, &[799.0], 1).is_ok());
        let only_one = AttributeScheme::new(
            vec![Attribute {
                name: "price".into(),
                levels: vec!["799".into(), "899".into()],
                baseline_level: "799".into(),
            }],
            "price",
        )
        .unwrap();
        assert!(matches!(
            generate_tasks(&only_one, 2, 3, &[799.0, 799.0], 1),
            Err(Error::Design(_))
        ));
    }

    #[test]
    fn dominated_task_prefers_a() {
        let scheme = AttributeScheme::smartphone();
        let rs = sample_respondents(&scheme, &GroundTruth::smartphone(), 200, 11).unwrap();
        let better = ProductProfile::new([("storage", "512GB"), ("camera", "Pro"), ("frame", "Titanium")], 899.0);
        let worse = scheme.baseline_profile(999.0);
        let tasks: Vec<ChoiceTask> = rs
            .iter()
            .map(|r| ChoiceTask {
                respondent_id: r.respondent_id,
                task_id: 0,
                profile_a: better.clone(),
                profile_b: worse.clone(),
            })
            .collect();
        for p in task_probabilities(&scheme, &rs, &tasks).unwrap() {
            assert!(p > 0.5);
        }
    }

    #[test]
    fn missing_respondent_is_a_contract_error() {
        let scheme = AttributeScheme::smartphone();
        let tasks = generate_tasks(&scheme, 2, 1, &[799.0, 899.0], 5).unwrap();
        let rs = sample_respondents(&scheme, &GroundTruth::smartphone(), 1, 5).unwrap();
        assert!(matches!(simulate_choices(&scheme, &rs, &tasks, 5), Err(Error::Contract(_))));
    }
}
