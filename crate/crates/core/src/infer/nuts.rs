//! No-U-Turn sampler with multinomial trajectory sampling and a diagonal
//! Euclidean metric.
//!
//! The transition follows Stan's implementation: trajectories double in a
//! random direction, states are drawn from each new subtree in proportion to
//! `exp(-H)`, the top level uses biased progressive sampling, and the
//! generalized U-turn criterion is checked on the full tree and across the
//! seams between subtrees.

use rand::Rng;
use rand_distr::StandardNormal;

use super::adapt::{DualAveraging, WindowedMetric};
use super::model::LogDensity;
use crate::error::{Error, Result};

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Phase-space point: position, momentum and the cached density/gradient.
#[derive(Debug, Clone)]
pub struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub log_density: f64,
}

impl Point {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let log_density = target.log_density(&q, &mut grad);
        let p = vec![0.0; q.len()];
        Self { q, p, grad, log_density }
    }

    pub fn kinetic(&self, inv_mass: &[f64]) -> f64 {
        0.5 * self.p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
    }

    pub fn hamiltonian(&self, inv_mass: &[f64]) -> f64 {
        let h = -self.log_density + self.kinetic(inv_mass);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, inv_mass: &[f64]) -> Vec<f64> {
        self.p.iter().zip(inv_mass).map(|(p, m)| p * m).collect()
    }

    fn resample_momentum<R: Rng>(&mut self, inv_mass: &[f64], rng: &mut R) {
        for (p, m) in self.p.iter_mut().zip(inv_mass) {
            let z: f64 = rng.sample(StandardNormal);
            *p = z / m.sqrt();
        }
    }
}

/// One leapfrog step of size `eps` (negative to integrate backwards).
pub fn leapfrog<T: LogDensity + ?Sized>(target: &T, point: &mut Point, eps: f64, inv_mass: &[f64]) {
    for (p, g) in point.p.iter_mut().zip(&point.grad) {
        *p += 0.5 * eps * g;
    }
    for ((q, p), m) in point.q.iter_mut().zip(&point.p).zip(inv_mass) {
        *q += eps * m * p;
    }
    point.log_density = target.log_density(&point.q, &mut point.grad);
    for (p, g) in point.p.iter_mut().zip(&point.grad) {
        *p += 0.5 * eps * g;
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, v)| *a += v);
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Both ends still move along the summed momentum.
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NutsSettings {
    pub max_depth: usize,
    pub target_accept: f64,
}

impl Default for NutsSettings {
    fn default() -> Self {
        Self { max_depth: 10, target_accept: 0.8 }
    }
}

/// Outcome of a single NUTS transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth: usize,
    pub n_leapfrog: usize,
    pub energy: f64,
}

struct TreeBuilder<'a, T: ?Sized, R> {
    target: &'a T,
    inv_mass: &'a [f64],
    eps: f64,
    h0: f64,
    rng: &'a mut R,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<T: LogDensity + ?Sized, R: Rng> TreeBuilder<'_, T, R> {
    /// Extend the trajectory from `z` by `2^depth` steps in direction `sign`.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            leapfrog(self.target, z, sign * self.eps, self.inv_mass);
            self.n_leapfrog += 1;
            let mut h = z.hamiltonian(self.inv_mass);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - self.h0 > MAX_ENERGY_ERROR {
                self.divergent = true;
            }
            let weight = self.h0 - h;
            *log_sum_weight = log_add_exp(*log_sum_weight, weight);
            self.sum_metro_prob += if weight > 0.0 { 1.0 } else { weight.exp() };
            z_propose.clone_from(z);
            *p_sharp_beg = z.velocity(self.inv_mass);
            p_sharp_end.clone_from(p_sharp_beg);
            add_into(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(p_beg);
            return !self.divergent;
        }

        let dim = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut lsw_init,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut lsw_final,
        ) {
            return false;
        }

        let lsw_subtree = log_add_exp(lsw_init, lsw_final);
        *log_sum_weight = log_add_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree = sum(&rho_init, &rho_final);
        add_into(rho, &rho_subtree);
        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_extended = sum(&rho_init, &p_final_beg);
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &rho_extended);
        let rho_extended = sum(&rho_final, &p_init_end);
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &rho_extended);
        persist
    }
}

/// Draw fresh momentum and move `current` by one NUTS transition.
pub fn transition<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    current: &mut Point,
    eps: f64,
    inv_mass: &[f64],
    max_depth: usize,
    rng: &mut R,
) -> Transition {
    current.resample_momentum(inv_mass, rng);
    let dim = current.q.len();
    let h0 = current.hamiltonian(inv_mass);

    let mut z_fwd = current.clone();
    let mut z_bck = current.clone();
    let mut z_sample = current.clone();
    let mut z_propose = current.clone();

    let mut p_fwd_fwd = current.p.clone();
    let mut p_sharp_fwd_fwd = current.velocity(inv_mass);
    let mut p_fwd_bck = current.p.clone();
    let mut p_sharp_fwd_bck = p_sharp_fwd_fwd.clone();
    let mut p_bck_fwd = current.p.clone();
    let mut p_sharp_bck_fwd = p_sharp_fwd_fwd.clone();
    let mut p_bck_bck = current.p.clone();
    let mut p_sharp_bck_bck = p_sharp_fwd_fwd.clone();

    let mut rho = current.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;

    let mut builder = TreeBuilder {
        target,
        inv_mass,
        eps,
        h0,
        rng,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };

    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if builder.rng.random::<f64>() > 0.5 {
            // Extend forward; the old tree becomes the backward half.
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
            builder.build(
                depth,
                &mut z_fwd,
                &mut z_propose,
                &mut p_sharp_fwd_bck,
                &mut p_sharp_fwd_fwd,
                &mut rho_fwd,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                1.0,
                &mut lsw_subtree,
            )
        } else {
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
            builder.build(
                depth,
                &mut z_bck,
                &mut z_propose,
                &mut p_sharp_bck_fwd,
                &mut p_sharp_bck_bck,
                &mut rho_bck,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                -1.0,
                &mut lsw_subtree,
            )
        };
        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight {
            z_sample.clone_from(&z_propose);
        } else {
            let accept = (lsw_subtree - log_sum_weight).exp();
            if builder.rng.random::<f64>() < accept {
                z_sample.clone_from(&z_propose);
            }
        }
        log_sum_weight = log_add_exp(log_sum_weight, lsw_subtree);

        rho = sum(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
        let rho_extended = sum(&rho_bck, &p_fwd_bck);
        persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &rho_extended);
        let rho_extended = sum(&rho_fwd, &p_bck_fwd);
        persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &rho_extended);
        if !persist {
            break;
        }
    }

    let n_leapfrog = builder.n_leapfrog.max(1);
    let accept_stat = builder.sum_metro_prob / n_leapfrog as f64;
    let divergent = builder.divergent;
    *current = z_sample;
    Transition {
        accept_stat,
        divergent,
        depth,
        n_leapfrog: builder.n_leapfrog,
        energy: current.hamiltonian(inv_mass),
    }
}

/// Heuristic initial step size: double or halve until a single leapfrog
/// step crosses an acceptance of 0.8.
pub fn find_reasonable_step<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    start: &Point,
    mut eps: f64,
    inv_mass: &[f64],
    rng: &mut R,
) -> f64 {
    let threshold = 0.8f64.ln();
    let trial = |eps: f64, rng: &mut R| {
        let mut z = start.clone();
        z.resample_momentum(inv_mass, rng);
        let h0 = z.hamiltonian(inv_mass);
        leapfrog(target, &mut z, eps, inv_mass);
        h0 - z.hamiltonian(inv_mass)
    };
    let direction = if trial(eps, rng) > threshold { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let delta_h = trial(eps, rng);
        if direction > 0.0 && !(delta_h > threshold) {
            break;
        }
        if direction < 0.0 && !(delta_h < threshold) {
            break;
        }
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        if !(1e-10..=1e7).contains(&eps) {
            eps = eps.clamp(1e-10, 1e7);
            break;
        }
    }
    eps
}

/// Everything one chain produced.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Post-warmup positions, draw-major.
    pub draws: Vec<f64>,
    pub divergent: Vec<bool>,
    pub accept_stat: Vec<f64>,
    pub depth: Vec<usize>,
    pub n_leapfrog: Vec<usize>,
    pub energy: Vec<f64>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub warmup_divergences: usize,
}

impl ChainOutput {
    pub fn n_draws(&self) -> usize {
        self.divergent.len()
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        let dim = self.draws.len() / self.n_draws().max(1);
        &self.draws[k * dim..(k + 1) * dim]
    }

    pub fn mean_accept(&self) -> f64 {
        if self.accept_stat.is_empty() {
            return f64::NAN;
        }
        self.accept_stat.iter().sum::<f64>() / self.accept_stat.len() as f64
    }
}

/// Uniform(-2, 2) initial position with a finite density.
pub fn initial_point<T: LogDensity + ?Sized, R: Rng>(target: &T, rng: &mut R) -> Result<Point> {
    for _ in 0..100 {
        let q: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let point = Point::new(target, q);
        if point.log_density.is_finite() && point.grad.iter().all(|g| g.is_finite()) {
            return Ok(point);
        }
    }
    Err(Error::Fit("no initial position with finite log density after 100 attempts".into()))
}

/// Warm up (step size and diagonal metric) and then draw from one chain.
pub fn run_chain<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    start: Point,
    warmup: usize,
    draws: usize,
    settings: NutsSettings,
    rng: &mut R,
) -> ChainOutput {
    let dim = target.dim();
    let mut inv_mass = vec![1.0; dim];
    let mut point = start;
    let mut eps = find_reasonable_step(target, &point, 1.0, &inv_mass, rng);
    let mut step_adapt = DualAveraging::new(settings.target_accept, eps);
    let mut metric = WindowedMetric::new(dim, warmup);
    let mut warmup_divergences = 0;

    for _ in 0..warmup {
        let t = transition(target, &mut point, eps, &inv_mass, settings.max_depth, rng);
        warmup_divergences += t.divergent as usize;
        eps = step_adapt.update(t.accept_stat);
        if let Some(updated) = metric.observe(&point.q) {
            inv_mass = updated;
            eps = find_reasonable_step(target, &point, eps, &inv_mass, rng);
            step_adapt.restart(eps);
        }
    }
    if warmup > 0 {
        eps = step_adapt.final_step();
    }

    let mut out = ChainOutput {
        draws: Vec::with_capacity(draws * dim),
        divergent: Vec::with_capacity(draws),
        accept_stat: Vec::with_capacity(draws),
        depth: Vec::with_capacity(draws),
        n_leapfrog: Vec::with_capacity(draws),
        energy: Vec::with_capacity(draws),
        step_size: eps,
        inv_mass: Vec::new(),
        warmup_divergences,
    };
    for _ in 0..draws {
        let t = transition(target, &mut point, eps, &inv_mass, settings.max_depth, rng);
        out.draws.extend_from_slice(&point.q);
        out.divergent.push(t.divergent);
        out.accept_stat.push(t.accept_stat);
        out.depth.push(t.depth);
        out.n_leapfrog.push(t.n_leapfrog);
        out.energy.push(t.energy);
    }
    out.inv_mass = inv_mass;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    /// Independent normals with given means and SDs.
    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn log_density(&self, q: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..q.len() {
                let z = (q[i] - self.mean[i]) / self.sd[i];
                lp -= 0.5 * z * z;
                grad[i] = -z / self.sd[i];
            }
            lp
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = Gaussian { mean: vec![0.5, -1.0, 2.0], sd: vec![1.0, 0.3, 4.0] };
        let inv_mass = [1.0, 0.1, 10.0];
        let mut z = Point::new(&target, vec![0.1, 0.2, -0.3]);
        z.p = vec![0.7, -1.2, 0.05];
        let start = z.clone();
        for _ in 0..37 {
            leapfrog(&target, &mut z, 0.13, &inv_mass);
        }
        z.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..37 {
            leapfrog(&target, &mut z, 0.13, &inv_mass);
        }
        for i in 0..3 {
            assert!((z.q[i] - start.q[i]).abs() < 1e-8);
            assert!((z.p[i] + start.p[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn samples_a_scaled_gaussian() {
        let target = Gaussian { mean: vec![3.0, -1.0], sd: vec![0.01, 5.0] };
        let mut rng = stream(1, Domain::Chains, 0);
        let start = initial_point(&target, &mut rng).unwrap();
        let out = run_chain(&target, start, 1000, 4000, NutsSettings::default(), &mut rng);
        for i in 0..2 {
            let xs: Vec<f64> = (0..out.n_draws()).map(|k| out.draw(k)[i]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!((m - target.mean[i]).abs() < 0.1 * target.sd[i], "mean {m}");
            assert!((v.sqrt() / target.sd[i] - 1.0).abs() < 0.1, "sd {}", v.sqrt());
        }
        assert_eq!(out.divergent.iter().filter(|d| **d).count(), 0);
        // the averaged step is conservative, so realized acceptance sits a bit above target
        assert!(out.mean_accept() > 0.75 && out.mean_accept() < 0.97, "{}", out.mean_accept());
        // adapted metric recovers the variances
        assert!((out.inv_mass[0] / 1e-4 - 1.0).abs() < 0.5);
        assert!((out.inv_mass[1] / 25.0 - 1.0).abs() < 0.5);
    }

    #[test]
    fn energy_error_is_small_at_adapted_step() {
        let target = Gaussian { mean: vec![0.0; 5], sd: (1..=5).map(|i| i as f64).collect() };
        let mut rng = stream(2, Domain::Chains, 0);
        let start = initial_point(&target, &mut rng).unwrap();
        let out = run_chain(&target, start, 1000, 200, NutsSettings::default(), &mut rng);
        let mut errors = Vec::new();
        for k in 0..20 {
            let mut z = Point::new(&target, out.draw(10 * k).to_vec());
            z.resample_momentum(&out.inv_mass, &mut rng);
            let h0 = z.hamiltonian(&out.inv_mass);
            for _ in 0..64 {
                leapfrog(&target, &mut z, out.step_size, &out.inv_mass);
                errors.push((z.hamiltonian(&out.inv_mass) - h0).abs());
            }
        }
        errors.sort_by(f64::total_cmp);
        let median = errors[errors.len() / 2];
        assert!(median < 0.2, "median |dH| {median}");
    }

    #[test]
    fn divergence_is_flagged_for_huge_steps() {
        let target = Gaussian { mean: vec![0.0], sd: vec![1e-3] };
        let mut rng = stream(3, Domain::Chains, 0);
        let mut z = Point::new(&target, vec![0.5]);
        let t = transition(&target, &mut z, 10.0, &[1.0], 10, &mut rng);
        assert!(t.divergent);
    }

    #[test]
    fn chain_is_deterministic() {
        let target = Gaussian { mean: vec![1.0, 2.0], sd: vec![1.0, 2.0] };
        let run = || {
            let mut rng = stream(9, Domain::Chains, 4);
            let start = initial_point(&target, &mut rng).unwrap();
            run_chain(&target, start, 100, 100, NutsSettings::default(), &mut rng).draws
        };
        assert_eq!(run(), run());
    }
}
