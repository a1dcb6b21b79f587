//! Iterated single-step transitions against the closed-form marginal.

use scene4d_core::guidance::{make_schedule, q_sample, q_step, LatentShape, LatentTensor, NoiseSchedule};

const SCALAR: LatentShape = LatentShape {
    frames: 1,
    channels: 1,
    height: 1,
    width: 1,
};

fn scalar(v: f64) -> LatentTensor {
    LatentTensor::from_vec(SCALAR, vec![v]).unwrap()
}

/// Runs `q_step` for `t = 1..=upto` from `x0` with the given per-step noise.
fn iterate(sched: &NoiseSchedule, upto: usize, x0: f64, noise: impl Fn(usize) -> f64) -> f64 {
    (1..=upto).fold(x0, |x, t| q_step(&scalar(x), t, &scalar(noise(t)), sched).unwrap().data[0])
}

#[derive(Debug, Clone, Copy)]
pub struct ScheduleReport {
    pub strictly_decreasing: bool,
    /// Largest `|c_iterated - c_closed|` over all `t`, where the mean of
    /// `x_t | x_0` is `c x_0`.
    pub mean_error: f64,
    /// Largest `|var_iterated - (1 - abar_t)|` over all `t`.
    pub variance_error: f64,
}

/// The transition is linear, so the iterated mean coefficient comes from a
/// noiseless run and the variance from one unit impulse per step.
pub fn check(steps: usize, beta_start: f64, beta_end: f64) -> ScheduleReport {
    let sched = make_schedule(steps, beta_start, beta_end).unwrap();
    let strictly_decreasing = sched.alpha_bars().windows(2).all(|w| w[1] < w[0]);
    let (mut mean_error, mut variance_error) = (0.0f64, 0.0f64);
    for t in 1..=steps {
        let x0 = 1.0;
        let iterated = iterate(&sched, t, x0, |_| 0.0);
        let closed = q_sample(&scalar(x0), t, &scalar(0.0), &sched).unwrap().data[0];
        mean_error = mean_error.max((iterated - closed).abs());

        let var: f64 = (1..=t)
            .map(|s| iterate(&sched, t, 0.0, |r| if r == s { 1.0 } else { 0.0 }).powi(2))
            .sum();
        let closed_noise = q_sample(&scalar(0.0), t, &scalar(1.0), &sched).unwrap().data[0];
        variance_error = variance_error
            .max((var - (1.0 - sched.alpha_bar(t))).abs())
            .max((var - closed_noise * closed_noise).abs());
    }
    ScheduleReport {
        strictly_decreasing,
        mean_error,
        variance_error,
    }
}
