#![allow(dead_code)]

use conjoint_core::domain::AttributeScheme;
use conjoint_core::infer::LogDensity;
use conjoint_core::simulate::{simulate_survey, ChoiceDataset, GroundTruth, SurveyDesign};
use nalgebra::{DMatrix, DVector};

pub fn survey(n_respondents: usize, tasks: usize, truth: &GroundTruth, seed: u64) -> ChoiceDataset {
    let design = SurveyDesign { n_respondents, tasks_per_respondent: tasks, ..SurveyDesign::default() };
    simulate_survey(&AttributeScheme::smartphone(), truth, &design, seed).unwrap()
}

pub fn zero_heterogeneity() -> GroundTruth {
    let mut truth = GroundTruth::smartphone();
    truth.wtp_heterogeneity_sd.values_mut().for_each(|v| *v = 0.0);
    truth.population_price_coef_sd = 0.0;
    truth
}

/// Raw (unstandardized) difference rows and 0/1 choices.
pub fn raw_rows(ds: &ChoiceDataset) -> (Vec<Vec<f64>>, Vec<f64>) {
    let scheme = &ds.scheme;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in &ds.records {
        let a = scheme.encode(&r.task.profile_a).unwrap();
        let b = scheme.encode(&r.task.profile_b).unwrap();
        x.push(a.difference(&b));
        y.push(if r.chose_a { 1.0 } else { 0.0 });
    }
    (x, y)
}

/// Maximum-likelihood logistic regression without intercept by Newton's
/// method. `None` when it fails to converge or the fit runs off towards
/// separation (some fitted probability within 3e-7 of 0 or 1).
pub fn newton_logit(x: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = x.len();
    let d = x.first()?.len();
    let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(d);
    for _ in 0..200 {
        let eta = &xm * &beta;
        let p = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = p.map(|q| q * (1.0 - q));
        let grad = xm.transpose() * (&yv - &p);
        let mut h = DMatrix::zeros(d, d);
        for i in 0..n {
            let row = xm.row(i);
            h += w[i] * row.transpose() * row;
        }
        let step = h.lu().solve(&grad)?;
        beta += &step;
        if !beta.iter().all(|b| b.is_finite()) || beta.norm() > 1e6 {
            return None;
        }
        // converged in the scale-free sense: the Newton decrement is tiny
        if grad.dot(&step).abs() < 1e-20 {
            let eta = &xm * &beta;
            if eta.iter().any(|e| e.abs() > 15.0) {
                return None;
            }
            return Some(beta.iter().copied().collect());
        }
    }
    None
}

/// Central finite-difference gradient.
pub fn finite_difference<T: LogDensity>(target: &T, q: &[f64], h: f64) -> Vec<f64> {
    let mut scratch = vec![0.0; q.len()];
    let mut x = q.to_vec();
    (0..q.len())
        .map(|i| {
            x[i] = q[i] + h;
            let up = target.log_density(&x, &mut scratch);
            x[i] = q[i] - h;
            let down = target.log_density(&x, &mut scratch);
            x[i] = q[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}
