mod common;

use common::survey;
use conjoint_core::domain::{sigmoid, AttributeScheme};
use conjoint_core::infer::{fit, ModelConfig, PosteriorDraws};
use conjoint_core::posterior::unscale;
use conjoint_core::revenue::{revenue_curve, BundleScenario, ConsumerPanel};
use conjoint_core::simulate::GroundTruth;

fn small_fit() -> PosteriorDraws {
    let ds = survey(30, 20, &GroundTruth::smartphone(), 3);
    let config = ModelConfig { chains: 2, draws_per_chain: 300, warmup_per_chain: 300, seed: 1, ..ModelConfig::default() };
    fit(&ds, &config).unwrap().0
}

#[test]
fn zero_heterogeneity_revenue_has_an_interior_maximum_on_the_default_grid() {
    // p * sigmoid(-b (p - p0 - W)) with the true bundle WTP W = 200 + 80
    let scenario = BundleScenario::smartphone();
    let (b, p0, w) = (-0.01, scenario.baseline_profile.price, 280.0);
    let revenue: Vec<f64> = scenario.price_grid.iter().map(|&p| p * sigmoid(-b * (p0 + w - p))).collect();
    let best = revenue.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
    assert!(best > 0 && best + 1 < revenue.len(), "argmax index {best}");
}

#[test]
fn revenue_is_bounded_by_price_and_probability_is_monotone_per_draw() {
    let draws = small_fit();
    let scheme = AttributeScheme::smartphone();
    let scenario = BundleScenario { market_size: 500, seed: 9, ..BundleScenario::smartphone() };
    let curve = revenue_curve(&draws, &scheme, &scenario).unwrap();
    assert_eq!(curve.probability.len(), draws.n_draws - curve.summary.flagged_draws);
    for (probs, revenue) in curve.probability.iter().zip(&curve.revenue) {
        for j in 0..curve.prices.len() {
            assert!(revenue[j] >= 0.0 && revenue[j] <= curve.prices[j]);
            if j > 0 {
                assert!(probs[j] <= probs[j - 1], "probability rose between {} and {}", curve.prices[j - 1], curve.prices[j]);
            }
        }
    }
    for point in &curve.summary.points {
        assert!(point.hdi_low <= point.hdi_high && point.hdi_high <= point.price);
    }
    assert!(curve.prices.contains(&curve.summary.argmax_price));

    // same seed, same curve
    assert_eq!(curve, revenue_curve(&draws, &scheme, &scenario).unwrap());
}

#[test]
fn doubling_the_market_moves_probabilities_within_binomial_noise() {
    let draws = small_fit();
    let scheme = AttributeScheme::smartphone();
    let un = unscale(&draws).unwrap();
    let small = BundleScenario { market_size: 2000, seed: 4, ..BundleScenario::smartphone() };
    let large = BundleScenario { market_size: 4000, ..small.clone() };
    let price = 1049.0;
    let mut outside = 0;
    for k in 0..un.n_draws {
        let p = ConsumerPanel::sample(&scheme, &small, un.mu(k), un.sigma(k), k as u64).unwrap().purchase_probability(price);
        let q = ConsumerPanel::sample(&scheme, &large, un.mu(k), un.sigma(k), k as u64).unwrap().purchase_probability(price);
        if (p - q).abs() > 3.0 * (p * (1.0 - p) / 2000.0).sqrt() {
            outside += 1;
        }
    }
    assert!(outside as f64 <= 0.01 * un.n_draws as f64, "{outside} of {} draws", un.n_draws);
}

#[test]
fn single_price_grid_warns_and_returns_that_price() {
    let draws = small_fit();
    let scheme = AttributeScheme::smartphone();
    let scenario = BundleScenario { price_grid: vec![999.0], market_size: 200, ..BundleScenario::smartphone() };
    let curve = revenue_curve(&draws, &scheme, &scenario).unwrap();
    assert_eq!(curve.summary.argmax_price, 999.0);
    assert_eq!(curve.summary.argmax_hdi, (999.0, 999.0));
    assert_eq!(curve.summary.warnings.len(), 1);
}
