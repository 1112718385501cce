//! Noise schedule, forward diffusion, and the deterministic DDIM reverse step.

use ndarray::Array3;

use crate::error::{GarmentError, Result};
use crate::num::Scalar;
use crate::tensor::Latent;

/// How the beta range is swept over the training timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    /// Betas interpolate linearly.
    Linear,
    /// sqrt(beta) interpolates linearly, then is squared. Convention of the
    /// latent-diffusion model family this schedule defaults to.
    ScaledLinear,
}

/// Per-timestep beta/alpha arrays and their cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule<T> {
    pub num_steps: usize,
    pub betas: Vec<T>,
    pub alphas: Vec<T>,
    pub alpha_bars: Vec<T>,
}

/// Index into the training schedule, always within `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepIndex(pub usize);

impl<T: Scalar> NoiseSchedule<T> {
    pub fn alpha_bar(&self, t: TimestepIndex) -> Result<T> {
        self.alpha_bars
            .get(t.0)
            .copied()
            .ok_or_else(|| GarmentError::Parameter(format!("timestep {} out of range", t.0)))
    }

    /// Cumulative product at `t`, with the terminal sentinel (`None`)
    /// mapping to 1.
    pub fn alpha_bar_or_terminal(&self, t: Option<TimestepIndex>) -> Result<T> {
        match t {
            Some(t) => self.alpha_bar(t),
            None => Ok(T::one()),
        }
    }
}

/// Builds a noise schedule over `t_count` training steps.
pub fn make_schedule<T: Scalar>(
    t_count: usize,
    beta_start: f64,
    beta_end: f64,
    spacing: BetaSpacing,
) -> Result<NoiseSchedule<T>> {
    if t_count < 2 {
        return Err(GarmentError::Parameter(format!("schedule needs T >= 2, got {t_count}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(GarmentError::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    // Betas are laid out in f64 and only narrowed at the end so f32
    // schedules inherit the f64 spacing.
    let n = t_count;
    let lerp = |a: f64, b: f64, i: usize| a + (b - a) * (i as f64) / ((n - 1) as f64);
    let betas_f64: Vec<f64> = match spacing {
        BetaSpacing::Linear => (0..n).map(|i| lerp(beta_start, beta_end, i)).collect(),
        BetaSpacing::ScaledLinear => (0..n)
            .map(|i| {
                let s = lerp(beta_start.sqrt(), beta_end.sqrt(), i);
                s * s
            })
            .collect(),
    };
    let mut alphas = Vec::with_capacity(n);
    let mut alpha_bars = Vec::with_capacity(n);
    let mut running = 1.0f64;
    for &b in &betas_f64 {
        let a = 1.0 - b;
        running *= a;
        alphas.push(T::from_f64(a));
        alpha_bars.push(T::from_f64(running));
    }
    Ok(NoiseSchedule {
        num_steps: n,
        betas: betas_f64.into_iter().map(T::from_f64).collect(),
        alphas,
        alpha_bars,
    })
}

fn check_same_shape<T: Scalar>(a: &Latent<T>, b: &Latent<T>, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(GarmentError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

/// Forward diffusion: `sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps`.
///
/// Noise is always caller-supplied, keeping the op a pure function.
pub fn forward_diffuse<T: Scalar>(
    x0: &Latent<T>,
    t: TimestepIndex,
    eps: &Latent<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Latent<T>> {
    check_same_shape(x0, eps, "forward_diffuse x0/eps")?;
    let ab = sched.alpha_bar(t)?;
    let signal = ab.sqrt();
    let noise = (T::one() - ab).sqrt();
    let data: Array3<T> = &x0.data * signal + &eps.data * noise;
    Ok(Latent { data, layout: x0.layout })
}

/// Algebraic inversion of the forward process:
/// `(x_t - sqrt(1 - a_bar_t) * eps_hat) / sqrt(a_bar_t)`.
pub fn predict_x0<T: Scalar>(
    x_t: &Latent<T>,
    eps_hat: &Latent<T>,
    t: TimestepIndex,
    sched: &NoiseSchedule<T>,
) -> Result<Latent<T>> {
    check_same_shape(x_t, eps_hat, "predict_x0 x_t/eps_hat")?;
    let ab = sched.alpha_bar(t)?;
    if ab <= T::zero() {
        return Err(GarmentError::Singularity("alpha_bar = 0 in predict_x0".into()));
    }
    let noise = (T::one() - ab).sqrt();
    let inv_signal = T::one() / ab.sqrt();
    let data: Array3<T> = (&x_t.data - &(&eps_hat.data * noise)) * inv_signal;
    Ok(Latent { data, layout: x_t.layout })
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
///
/// `t_prev = None` is the terminal sentinel with `a_bar = 1`, in which case
/// the step returns the current clean-sample estimate.
pub fn ddim_step<T: Scalar>(
    x_t: &Latent<T>,
    eps_hat: &Latent<T>,
    t: TimestepIndex,
    t_prev: Option<TimestepIndex>,
    sched: &NoiseSchedule<T>,
) -> Result<Latent<T>> {
    if let Some(tp) = t_prev {
        if tp.0 >= t.0 {
            return Err(GarmentError::Parameter(format!(
                "ddim_step needs t_prev < t, got {} >= {}",
                tp.0, t.0
            )));
        }
    }
    let x0_hat = predict_x0(x_t, eps_hat, t, sched)?;
    let ab_prev = sched.alpha_bar_or_terminal(t_prev)?;
    let signal = ab_prev.sqrt();
    let noise = (T::one() - ab_prev).sqrt();
    let data: Array3<T> = &x0_hat.data * signal + &eps_hat.data * noise;
    Ok(Latent { data, layout: x_t.layout })
}

/// Evenly spaced, strictly decreasing sampling subsequence ending at 0.
pub fn make_sampling_timesteps(t_count: usize, n_steps: usize) -> Result<Vec<TimestepIndex>> {
    if n_steps == 0 || t_count == 0 {
        return Err(GarmentError::Parameter("step counts must be positive".into()));
    }
    if n_steps > t_count {
        return Err(GarmentError::Parameter(format!(
            "n_steps {n_steps} exceeds schedule length {t_count}"
        )));
    }
    let mut out = Vec::with_capacity(n_steps);
    for k in (0..n_steps).rev() {
        out.push(TimestepIndex(k * t_count / n_steps));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LatentLayout;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_latent(rng: &mut ChaCha12Rng, c: usize, h: usize, w: usize) -> Latent<f64> {
        let data = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0));
        Latent { data, layout: LatentLayout::Garment }
    }

    #[test]
    fn scaled_linear_first_beta_matches_bound() {
        let s = make_schedule::<f64>(1000, 0.00085, 0.012, BetaSpacing::ScaledLinear).unwrap();
        assert!((s.alpha_bars[0] - 0.99915).abs() < 1e-12);
    }

    #[test]
    fn linear_two_step_hand_product() {
        let s = make_schedule::<f64>(2, 0.1, 0.1, BetaSpacing::Linear).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn cumulative_product_matches_extended_precision_oracle() {
        // Oracle: independent loop multiplying (1 - beta_t) in f64 from the
        // same analytic beta formula.
        let t_count = 1000;
        let (b0, b1) = (0.00085f64, 0.012f64);
        let mut expect = 1.0f64;
        for i in 0..t_count {
            let s = b0.sqrt() + (b1.sqrt() - b0.sqrt()) * (i as f64) / ((t_count - 1) as f64);
            expect *= 1.0 - s * s;
        }
        let s = make_schedule::<f64>(t_count, b0, b1, BetaSpacing::ScaledLinear).unwrap();
        assert!((s.alpha_bars[t_count - 1] - expect).abs() < 1e-15);
        // Same schedule narrowed to f32 stays within float tolerance.
        let s32 = make_schedule::<f32>(t_count, b0, b1, BetaSpacing::ScaledLinear).unwrap();
        assert!((s32.alpha_bars[t_count - 1] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn alpha_bars_strictly_decreasing_and_bounded() {
        for &spacing in &[BetaSpacing::Linear, BetaSpacing::ScaledLinear] {
            let s = make_schedule::<f64>(500, 0.0001, 0.05, spacing).unwrap();
            for t in 0..s.num_steps {
                assert!(s.betas[t] > 0.0 && s.betas[t] < 1.0);
                assert!(s.alpha_bars[t] > 0.0 && s.alpha_bars[t] <= 1.0);
                if t > 0 {
                    assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
                }
                let recomputed: f64 = s.alphas[..=t].iter().product();
                assert!((s.alpha_bars[t] - recomputed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(make_schedule::<f64>(1, 0.1, 0.2, BetaSpacing::Linear).is_err());
        assert!(make_schedule::<f64>(10, 0.0, 0.2, BetaSpacing::Linear).is_err());
        assert!(make_schedule::<f64>(10, 0.3, 0.2, BetaSpacing::Linear).is_err());
        assert!(make_schedule::<f64>(10, 0.3, 1.0, BetaSpacing::Linear).is_err());
    }

    /// Schedule with hand-picked alpha_bars for limiting-case tests.
    fn pinned_schedule(alpha_bars: &[f64]) -> NoiseSchedule<f64> {
        let mut alphas = Vec::new();
        let mut prev = 1.0;
        for &ab in alpha_bars {
            alphas.push(ab / prev);
            prev = ab;
        }
        NoiseSchedule {
            num_steps: alpha_bars.len(),
            betas: alphas.iter().map(|a| 1.0 - a).collect(),
            alphas,
            alpha_bars: alpha_bars.to_vec(),
        }
    }

    #[test]
    fn forward_diffuse_limiting_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x0 = random_latent(&mut rng, 4, 3, 5);
        let eps = random_latent(&mut rng, 4, 3, 5);
        let s = pinned_schedule(&[1.0, 1e-300]);
        // a_bar = 1: signal only.
        let out = forward_diffuse(&x0, TimestepIndex(0), &eps, &s).unwrap();
        assert_eq!(out.data, x0.data);
        // a_bar ~ 0: noise only.
        let out = forward_diffuse(&x0, TimestepIndex(1), &eps, &s).unwrap();
        for (o, e) in out.data.iter().zip(eps.data.iter()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_diffuse_monte_carlo_statistics() {
        // Oracle: empirical mean/variance over 10k draws at a_bar = 0.81.
        let s = pinned_schedule(&[0.81, 0.5]);
        let x0 = Latent {
            data: Array3::from_elem((1, 2, 2), 1.0f64),
            layout: LatentLayout::LatentMask,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 10_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let eps = Latent {
                data: Array3::from_shape_fn((1, 2, 2), |_| f64::standard_normal(&mut rng)),
                layout: LatentLayout::LatentMask,
            };
            let out = forward_diffuse(&x0, TimestepIndex(0), &eps, &s).unwrap();
            let v = out.data[[0, 0, 0]];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // 4 sigma band: 4 * sqrt(0.19 / 10000) ~ 0.0175
        assert!((mean - 0.9).abs() < 4.0 * (0.19f64 / n as f64).sqrt(), "mean {mean}");
        assert!((var - 0.19).abs() < 0.02, "var {var}");
    }

    #[test]
    fn forward_diffuse_shape_mismatch_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x0 = random_latent(&mut rng, 4, 3, 5);
        let eps = random_latent(&mut rng, 4, 3, 4);
        let s = pinned_schedule(&[0.9, 0.5]);
        assert!(matches!(
            forward_diffuse(&x0, TimestepIndex(0), &eps, &s),
            Err(GarmentError::Shape(_))
        ));
        assert!(matches!(
            forward_diffuse(&x0, TimestepIndex(9), &x0, &s),
            Err(GarmentError::Parameter(_))
        ));
    }

    #[test]
    fn predict_x0_round_trip() {
        let s = make_schedule::<f64>(100, 0.001, 0.2, BetaSpacing::Linear).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x0 = random_latent(&mut rng, 4, 3, 5);
            let eps = random_latent(&mut rng, 4, 3, 5);
            let t = TimestepIndex(rng.gen_range(0..100));
            let x_t = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0(&x_t, &eps, t, &s).unwrap();
            let max_err = rec
                .data
                .iter()
                .zip(x0.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err < 1e-9, "round trip err {max_err}");
        }
    }

    #[test]
    fn predict_x0_identity_at_unit_alpha_bar() {
        let s = pinned_schedule(&[1.0, 0.5]);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x0 = random_latent(&mut rng, 4, 2, 2);
        let eps = random_latent(&mut rng, 4, 2, 2);
        let rec = predict_x0(&x0, &eps, TimestepIndex(0), &s).unwrap();
        assert_eq!(rec.data, x0.data);
    }

    #[test]
    fn predict_x0_singularity() {
        let s = pinned_schedule(&[1.0, 0.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = random_latent(&mut rng, 4, 2, 2);
        assert!(matches!(
            predict_x0(&x, &x, TimestepIndex(1), &s),
            Err(GarmentError::Singularity(_))
        ));
    }

    #[test]
    fn ddim_terminal_step_returns_x0_estimate() {
        let s = make_schedule::<f64>(50, 0.001, 0.2, BetaSpacing::Linear).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x_t = random_latent(&mut rng, 4, 2, 3);
        let eps_hat = random_latent(&mut rng, 4, 2, 3);
        let t = TimestepIndex(20);
        let step = ddim_step(&x_t, &eps_hat, t, None, &s).unwrap();
        let x0_hat = predict_x0(&x_t, &eps_hat, t, &s).unwrap();
        assert_eq!(step.data, x0_hat.data);
    }

    #[test]
    fn ddim_schedule_jump_identity() {
        // With the true eps, stepping t -> t_prev equals forward-diffusing
        // x0 straight to t_prev.
        let s = make_schedule::<f64>(100, 0.001, 0.2, BetaSpacing::Linear).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x0 = random_latent(&mut rng, 4, 3, 3);
        let eps = random_latent(&mut rng, 4, 3, 3);
        let t = TimestepIndex(70);
        let tp = TimestepIndex(30);
        let x_t = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let stepped = ddim_step(&x_t, &eps, t, Some(tp), &s).unwrap();
        let direct = forward_diffuse(&x0, tp, &eps, &s).unwrap();
        let max_err = stepped
            .data
            .iter()
            .zip(direct.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12);
    }

    #[test]
    fn ddim_rejects_bad_ordering() {
        let s = make_schedule::<f64>(50, 0.001, 0.2, BetaSpacing::Linear).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x = random_latent(&mut rng, 4, 2, 2);
        assert!(matches!(
            ddim_step(&x, &x, TimestepIndex(5), Some(TimestepIndex(5)), &s),
            Err(GarmentError::Parameter(_))
        ));
    }

    #[test]
    fn ddim_is_deterministic() {
        let s = make_schedule::<f64>(50, 0.001, 0.2, BetaSpacing::Linear).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x = random_latent(&mut rng, 4, 2, 2);
        let e = random_latent(&mut rng, 4, 2, 2);
        let a = ddim_step(&x, &e, TimestepIndex(20), Some(TimestepIndex(10)), &s).unwrap();
        let b = ddim_step(&x, &e, TimestepIndex(20), Some(TimestepIndex(10)), &s).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn oracle_model_rollout_reconstructs_x0() {
        // Oracle model: always returns the exact injected noise. Any-step
        // DDIM trajectory must then walk x_t back to x0.
        let s = make_schedule::<f64>(1000, 0.00085, 0.012, BetaSpacing::ScaledLinear).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x0 = random_latent(&mut rng, 4, 4, 5);
        let eps = random_latent(&mut rng, 4, 4, 5);
        for &n_steps in &[1usize, 7, 50] {
            let ts = make_sampling_timesteps(1000, n_steps).unwrap();
            let mut x = forward_diffuse(&x0, ts[0], &eps, &s).unwrap();
            for i in 0..ts.len() {
                let t_prev = if i + 1 < ts.len() { Some(ts[i + 1]) } else { None };
                x = ddim_step(&x, &eps, ts[i], t_prev, &s).unwrap();
            }
            let max_err = x
                .data
                .iter()
                .zip(x0.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err < 1e-6, "{n_steps} steps, err {max_err}");
        }
    }

    #[test]
    fn sampling_timesteps_spacing() {
        // Oracle: independent index loop.
        let ts = make_sampling_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert!(ts[0].0 >= 980);
        assert_eq!(ts.last().unwrap().0, 0);
        for (k, t) in ts.iter().enumerate() {
            assert_eq!(t.0, (49 - k) * 1000 / 50);
        }
        for w in ts.windows(2) {
            assert!(w[0].0 > w[1].0);
        }

        let ident = make_sampling_timesteps(10, 10).unwrap();
        let expect: Vec<usize> = (0..10).rev().collect();
        assert_eq!(ident.iter().map(|t| t.0).collect::<Vec<_>>(), expect);

        let single = make_sampling_timesteps(1000, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert!(make_sampling_timesteps(10, 11).is_err());
    }
}
