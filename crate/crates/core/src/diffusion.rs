//! Noise schedules, forward noising (Euclidean and geodesic random walk on the
//! unit sphere), posterior statistics and the reverse step.
//!
//! Steps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, normalized};
use crate::rng::gaussian_vec;

/// Serialized form of a schedule; stored in checkpoints so inference
/// reproduces the training noise geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleSpec {
    /// Linear schedule over `steps`, with the usual 1000-step endpoints
    /// (1e-4, 0.02) rescaled by `1000 / steps` and capped at 0.999.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        Self {
            kind: ScheduleKind::Linear,
            steps,
            beta_start: (1e-4 * scale).min(0.999),
            beta_end: (0.02 * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self::scaled_linear(20)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bar[t]` for `t ∈ [0, T]`.
    alpha_bar: Vec<f64>,
    /// `beta_tilde[t - 1]` for `t ∈ [1, T]`.
    beta_tilde: Vec<f64>,
}

pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule bounds must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Builds the derived arrays from explicit betas. Accepts `β_t = 0` so
    /// degenerate schedules can be exercised; `build_schedule` is stricter.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let beta_tilde = betas
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let denom = 1.0 - alpha_bar[i + 1];
                if denom == 0.0 {
                    0.0
                } else {
                    (1.0 - alpha_bar[i]) / denom * b
                }
            })
            .collect();
        Ok(Self {
            betas,
            alpha_bar,
            beta_tilde,
        })
    }

    /// Maximum step `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                index: t,
                len: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, defined for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Coefficients `(c_xt, c_x0)` of the posterior mean at step `t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let beta = self.beta(t);
        let (ab_prev, ab) = (self.alpha_bar[t - 1], self.alpha_bar[t]);
        let denom = 1.0 - ab;
        if denom == 0.0 {
            // No noise has been added up to t: x_t already equals x_0.
            return Ok((1.0, 0.0));
        }
        if t == 1 {
            // ᾱ_0 = 1, so the coefficients are exactly (0, 1); the general
            // formula would divide β_1 by a rounded 1 − ᾱ_1.
            return Ok((0.0, 1.0));
        }
        Ok((
            (1.0 - beta).sqrt() * (1.0 - ab_prev) / denom,
            ab_prev.sqrt() * beta / denom,
        ))
    }
}

/// A noised diffusion state.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedState {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub on_sphere: bool,
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
pub fn euclidean_forward(x0: &[f64], t: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if eps.len() != x0.len() {
        return Err(Error::Shape {
            op: "euclidean_forward",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Removes the component of `v` along the unit vector `x`.
pub fn tangent_project(x: &[f64], v: &[f64]) -> Vec<f64> {
    let c = dot(v, x);
    v.iter().zip(x).map(|(vi, xi)| vi - c * xi).collect()
}

/// Sphere exponential map `exp_x[v] = cos(‖v‖) x + sin(‖v‖) v/‖v‖`.
pub fn exp_map(x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if x.len() != v.len() {
        return Err(Error::Shape {
            op: "exp_map",
            lhs: vec![x.len()],
            rhs: vec![v.len()],
        });
    }
    let xn = norm(x);
    if (xn - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("exp_map base point has norm {xn}")));
    }
    let vn = norm(v);
    if vn < 1e-12 {
        return Ok(x.to_vec());
    }
    if dot(x, v).abs() > 1e-6 * vn.max(1.0) {
        return Err(Error::Contract(format!(
            "exp_map direction is not tangent (x·v = {:e})",
            dot(x, v)
        )));
    }
    let (c, s) = (vn.cos(), vn.sin() / vn);
    Ok(x.iter().zip(v).map(|(xi, vi)| c * xi + s * vi).collect())
}

/// Geodesic random-walk noising with an explicit Gaussian draw `eps`:
/// normalize onto the sphere, project `eps` to the tangent space, and take a
/// single exponential-map step of scale `√(1−ᾱ_t)`.
pub fn grw_forward_with_noise(
    x0_raw: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    eps: &[f64],
) -> Result<NoisedState> {
    schedule.check(t)?;
    let x0 = normalized(x0_raw)?;
    if eps.len() != x0.len() {
        return Err(Error::Shape {
            op: "grw_forward",
            lhs: vec![x0.len()],
            rhs: vec![eps.len()],
        });
    }
    let scale = (1.0 - schedule.alpha_bar(t)).sqrt();
    let v: Vec<f64> = tangent_project(&x0, eps).into_iter().map(|e| scale * e).collect();
    Ok(NoisedState {
        x_t: exp_map(&x0, &v)?,
        t,
        on_sphere: true,
    })
}

pub fn grw_forward<R: rand::Rng + ?Sized>(
    x0_raw: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<NoisedState> {
    let eps = gaussian_vec(rng, x0_raw.len());
    grw_forward_with_noise(x0_raw, t, schedule, &eps)
}

/// Posterior mean `μ̃_t(x_t, x_0)`.
pub fn posterior_mean(x_t: &[f64], x0: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let (a, b) = schedule.posterior_coefficients(t)?;
    if x_t.len() != x0.len() {
        return Err(Error::Shape {
            op: "posterior_mean",
            lhs: vec![x_t.len()],
            rhs: vec![x0.len()],
        });
    }
    Ok(x_t.iter().zip(x0).map(|(xt, x0)| a * xt + b * x0).collect())
}

/// How the posterior variance scales the reverse-step noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// Standard deviation `√β̃_t`.
    #[default]
    Stddev,
    /// Multiply by `β̃_t` itself.
    Variance,
}

impl NoiseScale {
    pub fn factor(self, beta_tilde: f64) -> f64 {
        match self {
            NoiseScale::Stddev => beta_tilde.sqrt(),
            NoiseScale::Variance => beta_tilde,
        }
    }
}

/// One reverse step with an explicit Gaussian draw `eps`:
/// `x_{t−1} = μ̃_t(x_t, x̂_0) + s·ε`, normalized when `spherical`.
pub fn reverse_step_with_noise(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    eps: &[f64],
    spherical: bool,
    scale: NoiseScale,
) -> Result<Vec<f64>> {
    let mean = posterior_mean(x_t, x0_hat, t, schedule)?;
    let s = scale.factor(schedule.beta_tilde(t));
    let out: Vec<f64> = mean.iter().zip(eps).map(|(m, e)| m + s * e).collect();
    if spherical {
        normalized(&out)
    } else {
        Ok(out)
    }
}

pub fn reverse_step<R: rand::Rng + ?Sized>(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    spherical: bool,
    scale: NoiseScale,
) -> Result<Vec<f64>> {
    let eps = gaussian_vec(rng, x_t.len());
    reverse_step_with_noise(x_t, x0_hat, t, schedule, &eps, spherical, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap()
    }

    #[test]
    fn two_step_schedule_by_substitution() {
        let s = two_step();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar(2), 0.72, epsilon = 1e-15);
        assert_eq!(s.beta_tilde(1), 0.0);
        assert_abs_diff_eq!(s.beta_tilde(2), 0.1 / 0.28 * 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta_tilde(2), 0.0714, epsilon = 1e-4);
    }

    #[test]
    fn zero_betas_keep_alpha_bar_at_one() {
        let s = NoiseSchedule::from_betas(vec![0.0; 5]).unwrap();
        for t in 0..=5 {
            assert_eq!(s.alpha_bar(t), 1.0);
        }
    }

    #[test]
    fn twenty_step_linear_matches_product_oracle() {
        let spec = ScheduleSpec::scaled_linear(20);
        assert_abs_diff_eq!(spec.beta_start, 0.005, epsilon = 1e-15);
        assert_eq!(spec.beta_end, 0.999);
        let s = build_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..20 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 19.0;
            prod *= 1.0 - beta;
        }
        assert_abs_diff_eq!(s.alpha_bar(20), prod, epsilon = 1e-15);
        for t in 1..=20 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 5, 0.0, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 5, 0.3, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 5, 0.1, 1.0).is_err());
    }

    #[test]
    fn large_step_counts_cap_beta() {
        let spec = ScheduleSpec::scaled_linear(2);
        assert_eq!(spec.beta_end, 0.999);
        spec.build().unwrap();
    }

    #[test]
    fn euclidean_forward_limits() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.0]).unwrap();
        let x0 = [0.3, -1.2];
        assert_eq!(euclidean_forward(&x0, 2, &s, &[5.0, 6.0]).unwrap(), x0.to_vec());
        // ᾱ = 0 is unreachable with β < 1; check the closed form at ᾱ ≈ 0.
        let s = NoiseSchedule::from_betas(vec![1.0 - 1e-13]).unwrap();
        let x = euclidean_forward(&[0.0, 0.0], 1, &s, &[0.7, -0.1]).unwrap();
        assert_abs_diff_eq!(x[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], -0.1, epsilon = 1e-12);
    }

    #[test]
    fn euclidean_forward_monte_carlo_moments() {
        let s = ScheduleSpec::default().build().unwrap();
        let t = 7;
        let x0 = [0.8, -0.5, 0.2];
        let n = 100_000;
        let mut rng = stream(11, &[]);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps = gaussian_vec(&mut rng, 3);
            let x = euclidean_forward(&x0, t, &s, &eps).unwrap();
            for j in 0..3 {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        let ab = s.alpha_bar(t);
        let var = 1.0 - ab;
        for j in 0..3 {
            let mean = sum[j] / n as f64;
            let sample_var = sq[j] / n as f64 - mean * mean;
            let sigma_mean = (var / n as f64).sqrt();
            assert!((mean - ab.sqrt() * x0[j]).abs() < 3.0 * sigma_mean);
            // var of the sample variance ≈ 2σ⁴/n
            let sigma_var = (2.0 * var * var / n as f64).sqrt();
            assert!((sample_var - var).abs() < 3.0 * sigma_var);
        }
    }

    #[test]
    fn exp_map_cases() {
        let x = [1.0, 0.0];
        assert_eq!(exp_map(&x, &[0.0, 0.0]).unwrap(), x.to_vec());
        let y = exp_map(&x, &[0.0, std::f64::consts::FRAC_PI_2]).unwrap();
        assert_abs_diff_eq!(y[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 1.0, epsilon = 1e-15);
        assert!(exp_map(&[2.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(exp_map(&x, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn exp_map_geodesic_distance_by_angle() {
        let mut rng = stream(3, &[]);
        for _ in 0..200 {
            let x = normalized(&gaussian_vec(&mut rng, 6)).unwrap();
            let raw = gaussian_vec(&mut rng, 6);
            let v: Vec<f64> = tangent_project(&x, &raw).iter().map(|e| e * 0.9).collect();
            let y = exp_map(&x, &v).unwrap();
            assert_abs_diff_eq!(norm(&y), 1.0, epsilon = 1e-12);
            let theta = norm(&v) % (2.0 * std::f64::consts::PI);
            let folded = if theta > std::f64::consts::PI {
                2.0 * std::f64::consts::PI - theta
            } else {
                theta
            };
            let angle = dot(&x, &y).clamp(-1.0, 1.0).acos();
            assert_abs_diff_eq!(angle, folded, epsilon = 1e-6);
        }
    }

    #[test]
    fn grw_degenerate_cases() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.5]).unwrap();
        let x = [3.0, 4.0];
        let st = grw_forward_with_noise(&x, 1, &s, &[0.3, -2.0]).unwrap();
        assert_eq!(st.x_t, vec![0.6, 0.8]);
        assert!(st.on_sphere);
        // noise parallel to the base point projects to zero
        let st = grw_forward_with_noise(&x, 2, &s, &[0.6, 0.8]).unwrap();
        assert_abs_diff_eq!(st.x_t[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(st.x_t[1], 0.8, epsilon = 1e-15);
        assert!(matches!(
            grw_forward_with_noise(&[0.0, 0.0], 1, &s, &[1.0, 0.0]),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn posterior_mean_cases() {
        let s = two_step();
        let xt = [0.2, -0.4];
        let x0 = [1.0, 3.0];
        assert_eq!(posterior_mean(&xt, &x0, 1, &s).unwrap(), x0.to_vec());
        let (a, b) = s.posterior_coefficients(2).unwrap();
        assert_abs_diff_eq!(a, 0.31944, epsilon = 1e-5);
        assert_abs_diff_eq!(b, 0.67763, epsilon = 1e-5);
        let z = NoiseSchedule::from_betas(vec![0.3, 0.0]).unwrap();
        let m = posterior_mean(&xt, &x0, 2, &z).unwrap();
        assert_abs_diff_eq!(m[0], xt[0], epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], xt[1], epsilon = 1e-15);
        assert!(posterior_mean(&xt, &x0, 3, &s).is_err());
        assert!(posterior_mean(&xt, &x0, 0, &s).is_err());
    }

    #[test]
    fn reverse_step_at_one_is_deterministic() {
        let s = two_step();
        let x0_hat = [3.0, 4.0];
        for seed in 0..5 {
            let mut rng = stream(seed, &[]);
            let out = reverse_step(&[0.0, 1.0], &x0_hat, 1, &s, &mut rng, true, NoiseScale::Stddev).unwrap();
            assert_eq!(out, vec![0.6, 0.8]);
        }
        let z = NoiseSchedule::from_betas(vec![0.0, 0.0]).unwrap();
        let xt = [1.0, 1.0];
        let out = reverse_step_with_noise(&xt, &xt, 2, &z, &[9.0, -9.0], true, NoiseScale::Stddev).unwrap();
        assert_abs_diff_eq!(out[0], 0.5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn reverse_step_matches_scripted_formula() {
        let s = two_step();
        let mut rng = stream(5, &[]);
        let xt = normalized(&gaussian_vec(&mut rng, 4)).unwrap();
        let x0 = normalized(&gaussian_vec(&mut rng, 4)).unwrap();
        let eps = gaussian_vec(&mut rng.clone(), 4);
        let got = reverse_step(&xt, &x0, 2, &s, &mut rng, true, NoiseScale::Stddev).unwrap();
        // scripted: mean = 0.8^½·0.1/0.28·x_t + 0.9^½·0.2/0.28·x0; sd = (0.1/0.28·0.2)^½
        let sd = (0.1f64 / 0.28 * 0.2).sqrt();
        let raw: Vec<f64> = (0..4)
            .map(|i| 0.8f64.sqrt() * 0.1 / 0.28 * xt[i] + 0.9f64.sqrt() * 0.2 / 0.28 * x0[i] + sd * eps[i])
            .collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..4 {
            assert_abs_diff_eq!(got[i], raw[i] / n, epsilon = 1e-15);
        }
        let lit = reverse_step_with_noise(&xt, &x0, 2, &s, &eps, false, NoiseScale::Variance).unwrap();
        let var = 0.1 / 0.28 * 0.2;
        let mean = posterior_mean(&xt, &x0, 2, &s).unwrap();
        assert_abs_diff_eq!(lit[0], mean[0] + var * eps[0], epsilon = 1e-15);
    }

    #[test]
    fn unit_vectors_distance_identity() {
        let mut rng = stream(9, &[]);
        for _ in 0..100 {
            let a = normalized(&gaussian_vec(&mut rng, 16)).unwrap();
            let b = normalized(&gaussian_vec(&mut rng, 16)).unwrap();
            let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
            assert_abs_diff_eq!(d2, 2.0 - 2.0 * dot(&a, &b), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn grw_output_is_unit_norm(seed in any::<u64>(), t in 1usize..=20) {
            let s = ScheduleSpec::default().build().unwrap();
            let mut rng = stream(seed, &[]);
            let x = gaussian_vec(&mut rng, 32);
            let st = grw_forward(&x, t, &s, &mut rng).unwrap();
            prop_assert!((norm(&st.x_t) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn posterior_mean_at_one_returns_x0(seed in any::<u64>()) {
            let s = ScheduleSpec::default().build().unwrap();
            let mut rng = stream(seed, &[]);
            let xt = gaussian_vec(&mut rng, 8);
            let x0 = gaussian_vec(&mut rng, 8);
            prop_assert_eq!(posterior_mean(&xt, &x0, 1, &s).unwrap(), x0);
        }
    }
}
