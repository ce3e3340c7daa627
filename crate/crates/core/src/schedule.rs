//! Discrete diffusion process: noise schedules, forward noising, clean-sample
//! prediction and the DDIM-family reverse update.
//!
//! Timesteps are indexed `0..=T` with `ᾱ_0 = 1`, so `t = 0` always means a
//! clean input.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Serialized form of a schedule. Tables are always rebuilt from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl ScheduleParams {
    /// Short schedule for desk-scale training.
    pub fn toy() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: ScheduleKind::Linear,
        }
    }

    /// The common 1000-step linear schedule.
    pub fn standard() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.kind)
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps + 1);
    alpha_bars.push(1.0);
    for a in &alphas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * a);
    }
    Ok(NoiseSchedule {
        params: ScheduleParams {
            timesteps,
            beta_start,
            beta_end,
            kind,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// `T`, the largest valid timestep.
    pub fn max_timestep(&self) -> usize {
        self.params.timesteps
    }

    /// β_t for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α_t for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.max_timestep() {
            return Err(Error::Range(format!(
                "timestep {t} outside [0, {}]",
                self.max_timestep()
            )));
        }
        Ok(())
    }

    /// Standard deviation of the injected noise for a `t → t_next` update.
    pub fn ddim_sigma(&self, t: usize, t_next: usize, eta: f64) -> f64 {
        let (ab, ab_next) = (self.alpha_bar(t), self.alpha_bar(t_next));
        let v = (1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next);
        eta * v.max(0.0).sqrt()
    }
}

fn same_shape<F, D: Dimension>(a: &Array<F, D>, b: &Array<F, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`
pub fn add_noise<F: Scalar, D: Dimension>(
    x0: &Array<F, D>,
    t: usize,
    eps: &Array<F, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>> {
    same_shape(x0, eps, "add_noise")?;
    schedule.check_timestep(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// One forward transition `q(x_t | x_{t-1})`: `√α_t·x + √(1−α_t)·eps`.
pub fn forward_step<F: Scalar, D: Dimension>(
    x_prev: &Array<F, D>,
    t: usize,
    eps: &Array<F, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>> {
    same_shape(x_prev, eps, "forward_step")?;
    if t == 0 {
        return Err(Error::Range("forward_step needs t >= 1".into()));
    }
    schedule.check_timestep(t)?;
    let al = schedule.alpha(t);
    let (a, b) = (F::lit(al.sqrt()), F::lit((1.0 - al).sqrt()));
    Ok(Zip::from(x_prev).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// `ẑ_0 = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`; identity at `t = 0`.
pub fn predict_x0<F: Scalar, D: Dimension>(
    z_t: &Array<F, D>,
    eps_hat: &Array<F, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>> {
    same_shape(z_t, eps_hat, "predict_x0")?;
    schedule.check_timestep(t)?;
    if t == 0 {
        return Ok(z_t.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (inv, b) = (F::lit(1.0 / ab.sqrt()), F::lit((1.0 - ab).sqrt()));
    Ok(Zip::from(z_t)
        .and(eps_hat)
        .map_collect(|&z, &e| (z - b * e) * inv))
}

/// DDIM-family update from `t` to `t_next < t`:
/// `√ᾱ_next·ẑ_0 + √(1−ᾱ_next−σ²)·ε̂ + σ·noise` with
/// `σ = eta·√((1−ᾱ_next)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_next)`.
pub fn reverse_step<F: Scalar, D: Dimension>(
    z_t: &Array<F, D>,
    eps_hat: &Array<F, D>,
    t: usize,
    t_next: usize,
    eta: f64,
    noise: &Array<F, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<F, D>> {
    if t_next >= t {
        return Err(Error::Schedule(format!(
            "reverse step must decrease the timestep, got {t} -> {t_next}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
    }
    same_shape(z_t, noise, "reverse_step noise")?;
    let x0 = predict_x0(z_t, eps_hat, t, schedule)?;
    let ab_next = schedule.alpha_bar(t_next);
    let sigma = schedule.ddim_sigma(t, t_next, eta);
    let dir = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
    let (a, b, c) = (F::lit(ab_next.sqrt()), F::lit(dir), F::lit(sigma));
    let mut out = x0;
    Zip::from(&mut out)
        .and(eps_hat)
        .and(noise)
        .for_each(|o, &e, &n| *o = a * *o + b * e + c * n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_product() {
        let s = make_schedule(2, 0.1, 0.2, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for b in [0.1, 0.2] {
            prod *= 1.0 - b;
        }
        assert!((s.alpha_bar(2) - prod).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            make_schedule(0, 0.1, 0.2, ScheduleKind::Linear),
            Err(Error::Config(_))
        ));
        assert!(make_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn schedule_invariants() {
        for p in [ScheduleParams::toy(), ScheduleParams::standard()] {
            let s = p.build().unwrap();
            let ab = s.alpha_bars();
            assert_eq!(ab[0], 1.0);
            for t in 1..ab.len() {
                assert!(ab[t] < ab[t - 1]);
                let rel = (ab[t] - ab[t - 1] * s.alpha(t)).abs() / ab[t];
                assert!(rel < 1e-12);
            }
            let last = ab[s.max_timestep()];
            assert!(last > 0.0 && last < 1.0);
        }
    }

    #[test]
    fn add_noise_edge_cases() {
        let s = ScheduleParams::toy().build().unwrap();
        let x0 = arr1(&[1.5f64, -2.0, 0.25]);
        let eps = arr1(&[0.3, 0.1, -0.7]);
        assert_eq!(add_noise(&x0, 0, &eps, &s).unwrap(), x0);
        let zero = Array1::<f64>::zeros(3);
        let t = 40;
        let z = add_noise(&zero, t, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(t)).sqrt();
        for (a, b) in z.iter().zip(eps.iter()) {
            assert!((a - scale * b).abs() < 1e-15);
        }
        assert!(matches!(
            add_noise(&x0, 0, &arr1(&[1.0]), &s),
            Err(Error::Shape(_))
        ));
        assert!(matches!(add_noise(&x0, 101, &eps, &s), Err(Error::Range(_))));
    }

    #[test]
    fn predict_x0_scalar_case() {
        // One step with β = 0.75 gives ᾱ_1 = 0.25.
        let s = make_schedule(1, 0.75, 0.75, ScheduleKind::Linear).unwrap();
        let z = arr1(&[1.0 + 0.75f64.sqrt()]);
        let z_from_forward = add_noise(&arr1(&[2.0]), 1, &arr1(&[1.0]), &s).unwrap();
        assert!((z[0] - z_from_forward[0]).abs() < 1e-12);
        let x0 = predict_x0(&z, &arr1(&[1.0]), 1, &s).unwrap();
        assert!((x0[0] - 2.0).abs() < 1e-12);
        let same = predict_x0(&z, &arr1(&[5.0]), 0, &s).unwrap();
        assert_eq!(same, z);
    }

    #[test]
    fn deterministic_inversion_to_clean() {
        let s = ScheduleParams::toy().build().unwrap();
        let x0 = arr1(&[0.3f64, -1.2, 2.0]);
        let eps = arr1(&[1.1f64, -0.4, 0.05]);
        for t in [1, 17, 100] {
            let zt = add_noise(&x0, t, &eps, &s).unwrap();
            let back = reverse_step(&zt, &eps, t, 0, 0.0, &Array1::zeros(3), &s).unwrap();
            for (a, b) in back.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-9, "t={t}: {a} vs {b}");
            }
            // Ancestral noise has no effect on the final step.
            let noisy = reverse_step(&zt, &eps, t, 0, 1.0, &arr1(&[5.0, 5.0, 5.0]), &s).unwrap();
            for (a, b) in noisy.iter().zip(x0.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ddim_scalar_oracle() {
        let s = make_schedule(3, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        let ab3: f64 = 0.9 * 0.8 * 0.7;
        let ab1: f64 = 0.9;
        let (z, e) = (0.8f64, -0.3f64);
        let x0 = (z - (1.0f64 - ab3).sqrt() * e) / ab3.sqrt();
        let expect = ab1.sqrt() * x0 + (1.0f64 - ab1).sqrt() * e;
        let got = reverse_step(&arr1(&[z]), &arr1(&[e]), 3, 1, 0.0, &arr1(&[0.0]), &s).unwrap();
        assert!((got[0] - expect).abs() < 1e-12);

        let eta = 0.5;
        let sigma = eta * ((1.0f64 - ab1) / (1.0 - ab3) * (1.0 - ab3 / ab1)).sqrt();
        let n = 0.7;
        let expect = ab1.sqrt() * x0 + (1.0 - ab1 - sigma * sigma).sqrt() * e + sigma * n;
        let got = reverse_step(&arr1(&[z]), &arr1(&[e]), 3, 1, eta, &arr1(&[n]), &s).unwrap();
        assert!((got[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_rejects_non_monotone() {
        let s = ScheduleParams::toy().build().unwrap();
        let z = arr1(&[0.0f64]);
        assert!(matches!(
            reverse_step(&z, &z, 5, 5, 0.0, &z, &s),
            Err(Error::Schedule(_))
        ));
        assert!(matches!(
            reverse_step(&z, &z, 5, 7, 0.0, &z, &s),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn single_step_chain_matches_closed_form_moments() {
        // Iterating q(x_t|x_{t-1}) must reproduce q(x_t|x_0) in distribution.
        let s = make_schedule(20, 0.01, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let x0 = 1.5f64;
        let t = 20;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut x = arr1(&[x0]);
            for step in 1..=t {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = forward_step(&x, step, &arr1(&[e]), &s).unwrap();
            }
            sum += x[0];
            sumsq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        let (m_true, v_true) = (ab.sqrt() * x0, 1.0 - ab);
        let se_m = (v_true / n as f64).sqrt();
        let se_v = v_true * (2.0 / n as f64).sqrt();
        assert!((mean - m_true).abs() < 4.0 * se_m, "{mean} vs {m_true}");
        assert!((var - v_true).abs() < 4.0 * se_v, "{var} vs {v_true}");
    }
}
